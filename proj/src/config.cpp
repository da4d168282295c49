#include "structlat/config.hpp"

#include <fstream>
#include <set>

namespace structlat {

using nlohmann::json;

namespace {

std::string join(const std::string& prefix, const std::string& key) { return prefix.empty() ? key : prefix + "." + key; }

// Reads one JSON object, tracking which keys were consumed so that
// leftovers (typos) can be reported with their full path.
class Reader {
public:
    Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
    }

    template <typename T>
    void get(const std::string& key, T& out) {
        seen_.insert(key);
        auto it = j_.find(key);
        if (it == j_.end()) return;
        const std::string p = join(path_, key);
        if constexpr (std::is_same_v<T, bool>) {
            if (!it->is_boolean()) throw ConfigError(p + ": expected a boolean");
        } else if constexpr (std::is_integral_v<T>) {
            if (!it->is_number_integer()) throw ConfigError(p + ": expected an integer");
            if (std::is_unsigned_v<T> && it->is_number_integer() && !it->is_number_unsigned() &&
                it->template get<long long>() < 0) {
                throw ConfigError(p + ": expected a nonnegative integer");
            }
        } else if constexpr (std::is_floating_point_v<T>) {
            if (!it->is_number()) throw ConfigError(p + ": expected a number");
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (!it->is_string()) throw ConfigError(p + ": expected a string");
        } else if constexpr (std::is_same_v<T, std::vector<int>>) {
            if (!it->is_array()) throw ConfigError(p + ": expected an array of integers");
            for (const auto& v : *it)
                if (!v.is_number_integer()) throw ConfigError(p + ": expected an array of integers");
        } else if constexpr (std::is_same_v<T, std::vector<double>>) {
            if (!it->is_array()) throw ConfigError(p + ": expected an array of numbers");
            for (const auto& v : *it)
                if (!v.is_number()) throw ConfigError(p + ": expected an array of numbers");
        }
        out = it->template get<T>();
    }

    Reader child(const std::string& key) {
        seen_.insert(key);
        auto it = j_.find(key);
        static const json empty = json::object();
        return Reader(it == j_.end() ? empty : *it, join(path_, key));
    }

    void finish() const {
        for (const auto& [k, v] : j_.items()) {
            if (!seen_.count(k)) throw ConfigError(join(path_, k) + ": unknown key");
        }
    }

    const std::string& path() const { return path_; }

private:
    std::string where() const { return path_.empty() ? "config" : path_; }

    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

json adam_json(const nn::AdamOptions& o) {
    return {{"lr", o.lr},         {"beta1", o.beta1},       {"beta2", o.beta2},
            {"eps", o.eps},       {"weight_decay", o.weight_decay}, {"grad_clip", o.grad_clip}};
}

void read_adam(Reader r, nn::AdamOptions& o) {
    r.get("lr", o.lr);
    r.get("beta1", o.beta1);
    r.get("beta2", o.beta2);
    r.get("eps", o.eps);
    r.get("weight_decay", o.weight_decay);
    r.get("grad_clip", o.grad_clip);
    r.finish();
}

void check(bool ok, const std::string& key, const std::string& what) {
    if (!ok) throw ConfigError(key + ": " + what);
}

void check_adam(const nn::AdamOptions& o, const std::string& key) {
    check(o.lr > 0, key + ".lr", "must be positive");
    check(o.beta1 >= 0 && o.beta1 < 1, key + ".beta1", "must be in [0, 1)");
    check(o.beta2 >= 0 && o.beta2 < 1, key + ".beta2", "must be in [0, 1)");
    check(o.eps > 0, key + ".eps", "must be positive");
    check(o.weight_decay >= 0, key + ".weight_decay", "must be nonnegative");
    check(o.grad_clip >= 0, key + ".grad_clip", "must be nonnegative");
}

}  // namespace

json config_to_json(const ExperimentConfig& c) {
    const auto& s = c.dataset.shapes;
    json j;
    j["version"] = c.version;
    j["name"] = c.name;
    j["output_root"] = c.output_root;
    j["seed"] = c.seed;
    j["deterministic"] = c.deterministic;
    j["dataset"] = {{"source", c.dataset.source},
                    {"directory", c.dataset.directory},
                    {"image_size", c.dataset.image_size},
                    {"heldout_fraction", c.dataset.heldout_fraction},
                    {"shapes",
                     {{"image_size", s.image_size},
                      {"num_shapes", s.num_shapes},
                      {"num_colors", s.num_colors},
                      {"min_objects", s.min_objects},
                      {"max_objects", s.max_objects},
                      {"texture_amplitude", s.texture_amplitude},
                      {"size", s.size},
                      {"seed", s.seed}}}};
    j["latent"] = {{"f", c.latent.f}, {"c", c.latent.c}, {"channel_grid", c.latent.channel_grid}};
    j["sampling"] = {{"weights", c.sampling.weights}};
    j["extractor"] = {{"width", c.extractor.arch.width},
                      {"feature_dim", c.extractor.arch.feature_dim},
                      {"num_classes", c.extractor.arch.num_classes},
                      {"steps", c.extractor.train.steps},
                      {"batch_size", c.extractor.train.batch_size},
                      {"optimizer", adam_json(c.extractor.train.optimizer)},
                      {"seed", c.extractor.train.seed},
                      {"init_from", c.extractor.init_from}};
    const auto& a = c.autoencoder;
    j["autoencoder"] = {{"base_width", a.arch.base_width},
                        {"max_width", a.arch.max_width},
                        {"blocks_per_stage", a.arch.blocks_per_stage},
                        {"structured", a.structured},
                        {"loss", {{"l1", a.weights.l1}, {"perceptual", a.weights.perceptual},
                                  {"adversarial", a.weights.adversarial}}},
                        {"optimizer", adam_json(a.optimizer)},
                        {"steps", a.steps},
                        {"batch_size", a.batch_size},
                        {"init_from", a.init_from}};
    const auto& d = c.diffusion;
    j["diffusion"] = {{"width", d.arch.width},
                      {"depth", d.arch.depth},
                      {"heads", d.arch.heads},
                      {"mlp_ratio", d.arch.mlp_ratio},
                      {"precondition", d.arch.precondition},
                      {"augmented", d.augmented},
                      {"schedule", d.schedule},
                      {"normalization", d.normalization},
                      {"optimizer", adam_json(d.optimizer)},
                      {"steps", d.steps},
                      {"batch_size", d.batch_size},
                      {"label_dropout", d.label_dropout},
                      {"time_epsilon", d.time_epsilon},
                      {"ema_decay", d.ema_decay}};
    const auto& e = c.eval;
    j["eval"] = {{"fid_every", e.fid_every},
                 {"fid_samples", e.fid_samples},
                 {"sampler_steps", e.sampler_steps},
                 {"finetune_steps", e.finetune_steps},
                 {"finetune_batch_size", e.finetune_batch_size},
                 {"finetune_images", e.finetune_images},
                 {"prefix_grid", e.prefix_grid},
                 {"heldout_images", e.heldout_images},
                 {"prefix_fraction", e.prefix_fraction},
                 {"throughput_warmup", e.throughput_warmup},
                 {"throughput_measured", e.throughput_measured}};
    const auto& p = c.pipeline;
    j["pipeline"] = {{"diffusion", p.diffusion},
                     {"prefix_curve", p.prefix_curve},
                     {"throughput", p.throughput},
                     {"checkpoint_every", p.checkpoint_every},
                     {"log_every", p.log_every}};
    return j;
}

ExperimentConfig config_from_json(const json& j) {
    ExperimentConfig c;
    Reader r(j, "");
    r.get("version", c.version);
    if (c.version != kConfigVersion) {
        throw ConfigError("version: unsupported config version " + std::to_string(c.version) + " (expected " +
                          std::to_string(kConfigVersion) + ")");
    }
    r.get("name", c.name);
    r.get("output_root", c.output_root);
    r.get("seed", c.seed);
    r.get("deterministic", c.deterministic);
    {
        Reader d = r.child("dataset");
        d.get("source", c.dataset.source);
        d.get("directory", c.dataset.directory);
        d.get("image_size", c.dataset.image_size);
        d.get("heldout_fraction", c.dataset.heldout_fraction);
        Reader s = d.child("shapes");
        auto& sh = c.dataset.shapes;
        s.get("image_size", sh.image_size);
        s.get("num_shapes", sh.num_shapes);
        s.get("num_colors", sh.num_colors);
        s.get("min_objects", sh.min_objects);
        s.get("max_objects", sh.max_objects);
        s.get("texture_amplitude", sh.texture_amplitude);
        s.get("size", sh.size);
        s.get("seed", sh.seed);
        s.finish();
        d.finish();
    }
    {
        Reader l = r.child("latent");
        bool grid_given = j.contains("latent") && j["latent"].contains("channel_grid");
        l.get("f", c.latent.f);
        l.get("c", c.latent.c);
        c.latent.channel_grid = default_channel_grid(c.latent.c);
        if (grid_given) l.get("channel_grid", c.latent.channel_grid);
        l.finish();
    }
    {
        Reader s = r.child("sampling");
        s.get("weights", c.sampling.weights);
        s.finish();
    }
    {
        Reader e = r.child("extractor");
        e.get("width", c.extractor.arch.width);
        e.get("feature_dim", c.extractor.arch.feature_dim);
        e.get("num_classes", c.extractor.arch.num_classes);
        e.get("steps", c.extractor.train.steps);
        e.get("batch_size", c.extractor.train.batch_size);
        read_adam(e.child("optimizer"), c.extractor.train.optimizer);
        e.get("seed", c.extractor.train.seed);
        e.get("init_from", c.extractor.init_from);
        e.finish();
    }
    {
        Reader a = r.child("autoencoder");
        auto& ae = c.autoencoder;
        a.get("base_width", ae.arch.base_width);
        a.get("max_width", ae.arch.max_width);
        a.get("blocks_per_stage", ae.arch.blocks_per_stage);
        a.get("structured", ae.structured);
        Reader loss = a.child("loss");
        loss.get("l1", ae.weights.l1);
        loss.get("perceptual", ae.weights.perceptual);
        loss.get("adversarial", ae.weights.adversarial);
        loss.finish();
        read_adam(a.child("optimizer"), ae.optimizer);
        a.get("steps", ae.steps);
        a.get("batch_size", ae.batch_size);
        a.get("init_from", ae.init_from);
        a.finish();
    }
    {
        Reader d = r.child("diffusion");
        auto& df = c.diffusion;
        d.get("width", df.arch.width);
        d.get("depth", df.arch.depth);
        d.get("heads", df.arch.heads);
        d.get("mlp_ratio", df.arch.mlp_ratio);
        d.get("precondition", df.arch.precondition);
        d.get("augmented", df.augmented);
        d.get("schedule", df.schedule);
        d.get("normalization", df.normalization);
        read_adam(d.child("optimizer"), df.optimizer);
        d.get("steps", df.steps);
        d.get("batch_size", df.batch_size);
        d.get("label_dropout", df.label_dropout);
        d.get("time_epsilon", df.time_epsilon);
        d.get("ema_decay", df.ema_decay);
        d.finish();
    }
    {
        Reader e = r.child("eval");
        auto& ev = c.eval;
        e.get("fid_every", ev.fid_every);
        e.get("fid_samples", ev.fid_samples);
        e.get("sampler_steps", ev.sampler_steps);
        e.get("finetune_steps", ev.finetune_steps);
        e.get("finetune_batch_size", ev.finetune_batch_size);
        e.get("finetune_images", ev.finetune_images);
        e.get("prefix_grid", ev.prefix_grid);
        e.get("heldout_images", ev.heldout_images);
        e.get("prefix_fraction", ev.prefix_fraction);
        e.get("throughput_warmup", ev.throughput_warmup);
        e.get("throughput_measured", ev.throughput_measured);
        e.finish();
    }
    {
        Reader p = r.child("pipeline");
        p.get("diffusion", c.pipeline.diffusion);
        p.get("prefix_curve", c.pipeline.prefix_curve);
        p.get("throughput", c.pipeline.throughput);
        p.get("checkpoint_every", c.pipeline.checkpoint_every);
        p.get("log_every", c.pipeline.log_every);
        p.finish();
    }
    r.finish();
    // Class count follows the dataset unless given explicitly.
    if (!(j.contains("extractor") && j["extractor"].contains("num_classes")) && c.dataset.source == "shapes") {
        c.extractor.arch.num_classes = c.dataset.shapes.num_classes();
    }
    c.diffusion.arch.num_classes = c.extractor.arch.num_classes;
    c.validate();
    return c;
}

void ExperimentConfig::validate() const {
    check(!name.empty() && name.find('/') == std::string::npos, "name", "must be a nonempty name without '/'");
    check(dataset.source == "shapes" || dataset.source == "directory", "dataset.source",
          "must be \"shapes\" or \"directory\"");
    if (dataset.source == "shapes") {
        try {
            dataset.shapes.validate();
        } catch (const ArgumentError& e) {
            throw ConfigError(std::string("dataset.shapes: ") + e.what());
        }
        check(dataset.shapes.image_size == dataset.image_size, "dataset.shapes.image_size",
              "must equal dataset.image_size");
    } else {
        check(!dataset.directory.empty(), "dataset.directory", "required when dataset.source is \"directory\"");
    }
    check(dataset.heldout_fraction > 0 && dataset.heldout_fraction < 1, "dataset.heldout_fraction",
          "must be in (0, 1)");
    try {
        latent.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(std::string("latent: ") + e.what());
    }
    check(dataset.image_size % latent.f == 0, "latent.f", "must divide dataset.image_size");
    try {
        sampling.validate(latent);
    } catch (const ConfigError& e) {
        throw ConfigError(std::string("sampling.weights: ") + e.what());
    }
    check(extractor.arch.feature_dim >= 16, "extractor.feature_dim", "must be >= 16");
    check(extractor.arch.width > 0, "extractor.width", "must be positive");
    check(extractor.arch.num_classes > 0, "extractor.num_classes", "must be positive");
    check(extractor.train.steps >= 0, "extractor.steps", "must be nonnegative");
    check(extractor.train.batch_size > 0, "extractor.batch_size", "must be positive");
    check_adam(extractor.train.optimizer, "extractor.optimizer");
    try {
        autoencoder.arch.validate();
        autoencoder.weights.validate();
    } catch (const std::exception& e) {
        throw ConfigError(std::string("autoencoder: ") + e.what());
    }
    check_adam(autoencoder.optimizer, "autoencoder.optimizer");
    check(autoencoder.steps >= 0, "autoencoder.steps", "must be nonnegative");
    check(autoencoder.batch_size > 0, "autoencoder.batch_size", "must be positive");
    try {
        diffusion.arch.validate();
    } catch (const std::exception& e) {
        throw ConfigError(std::string("diffusion: ") + e.what());
    }
    check(diffusion.schedule == "trig" || diffusion.schedule == "linear", "diffusion.schedule",
          "must be \"trig\" or \"linear\"");
    check(diffusion.normalization == "all" || diffusion.normalization == "kept", "diffusion.normalization",
          "must be \"all\" or \"kept\"");
    check_adam(diffusion.optimizer, "diffusion.optimizer");
    check(diffusion.steps >= 0, "diffusion.steps", "must be nonnegative");
    check(diffusion.batch_size > 0, "diffusion.batch_size", "must be positive");
    check(diffusion.label_dropout >= 0 && diffusion.label_dropout <= 1, "diffusion.label_dropout", "must be in [0, 1]");
    check(diffusion.time_epsilon > 0 && diffusion.time_epsilon < 0.5, "diffusion.time_epsilon", "must be in (0, 0.5)");
    check(diffusion.ema_decay >= 0 && diffusion.ema_decay < 1, "diffusion.ema_decay", "must be in [0, 1)");
    check(diffusion.arch.num_classes == extractor.arch.num_classes, "diffusion.num_classes",
          "must equal extractor.num_classes");
    check(eval.fid_every >= 0, "eval.fid_every", "must be nonnegative");
    check(eval.fid_samples >= 2, "eval.fid_samples", "must be >= 2");
    check(eval.sampler_steps >= 1, "eval.sampler_steps", "must be >= 1");
    check(eval.finetune_steps >= 0, "eval.finetune_steps", "must be nonnegative");
    check(eval.finetune_batch_size > 0, "eval.finetune_batch_size", "must be positive");
    check(eval.finetune_images > 0, "eval.finetune_images", "must be positive");
    for (int g : eval.prefix_grid) check(g > 0 && g <= latent.c, "eval.prefix_grid", "entries must be in (0, latent.c]");
    check(eval.heldout_images > 0, "eval.heldout_images", "must be positive");
    check(eval.prefix_fraction > 0 && eval.prefix_fraction < 1, "eval.prefix_fraction", "must be in (0, 1)");
    check(eval.throughput_warmup >= 0, "eval.throughput_warmup", "must be nonnegative");
    check(eval.throughput_measured >= 1, "eval.throughput_measured", "must be >= 1");
    check(pipeline.checkpoint_every > 0, "pipeline.checkpoint_every", "must be positive");
    check(pipeline.log_every > 0, "pipeline.log_every", "must be positive");
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return config_from_json(j);
}

void save_config(const std::filesystem::path& path, const ExperimentConfig& config) {
    std::ofstream out(path);
    if (!out) throw FormatError("cannot write " + path.string());
    out << config_to_json(config).dump(2) << '\n';
}

void apply_override(json& j, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "': expected key.path=value");
    const std::string key = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(text);
    } catch (const json::parse_error&) {
        value = text;
    }
    json* node = &j;
    std::size_t start = 0;
    while (true) {
        const auto dot = key.find('.', start);
        const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (part.empty()) throw ConfigError("override '" + assignment + "': empty key segment");
        if (dot == std::string::npos) {
            (*node)[part] = value;
            return;
        }
        json& next = (*node)[part];
        if (next.is_null()) next = json::object();
        if (!next.is_object()) throw ConfigError(key.substr(0, dot) + ": not an object, cannot set " + key);
        node = &next;
        start = dot + 1;
    }
}

ExperimentConfig preset_config(const std::string& name) {
    ExperimentConfig c;
    if (name == "default") return c;
    if (name == "tiny") {
        // Seconds-scale settings for smoke tests.
        c.name = "tiny";
        c.dataset.shapes.size = 300;
        c.extractor.train.steps = 30;
        c.autoencoder.steps = 20;
        c.autoencoder.batch_size = 8;
        c.diffusion.arch.width = 32;
        c.diffusion.arch.depth = 1;
        c.diffusion.steps = 20;
        c.diffusion.batch_size = 32;
        c.eval.fid_every = 10;
        c.eval.fid_samples = 64;
        c.eval.sampler_steps = 4;
        c.eval.finetune_steps = 5;
        c.eval.finetune_images = 64;
        c.eval.heldout_images = 30;
        c.eval.throughput_measured = 1;
        c.eval.throughput_warmup = 0;
        c.pipeline.checkpoint_every = 10;
        c.pipeline.log_every = 5;
        return c;
    }
    throw ConfigError("unknown preset '" + name + "' (known: default, tiny)");
}

}  // namespace structlat
