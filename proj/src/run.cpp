#include "structlat/run.hpp"

#include "structlat/image_io.hpp"
#include "structlat/nn/ema.hpp"

#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

namespace structlat {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

void write_json(const fs::path& path, const json& j) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp);
        if (!out) throw FormatError("cannot write " + tmp.string());
        out << j.dump(2) << '\n';
    }
    fs::rename(tmp, path);
}

std::vector<Index> first_n(Index n) {
    std::vector<Index> idx(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    return idx;
}

ImageDataset head(const ImageDataset& data, Index n) { return data.subset(first_n(std::min(n, data.size()))); }

// RNG streams; every random draw in a run is keyed by (seed, stream, step).
constexpr std::uint64_t kAeStream = 0xAE57;
constexpr std::uint64_t kDiffusionStream = 0xD1F5;
constexpr std::uint64_t kFidStream = 0xF1D;
constexpr std::uint64_t kSampleStream = 0x5A3;

}  // namespace

// ---------------------------------------------------------------- run directory

RunDirectory RunDirectory::create(const ExperimentConfig& config) {
    config.validate();
    RunDirectory run;
    run.root_ = fs::path(config.output_root) / config.name;
    run.config_ = config;
    const fs::path config_path = run.root_ / "config.json";
    if (fs::exists(config_path)) {
        const ExperimentConfig existing = load_config(config_path);
        if (!(existing == config)) {
            throw ConfigError("run directory " + run.root_.string() +
                              " already holds a different config; pick another name or remove it");
        }
        run.manifest_ = read_json(run.root_ / "manifest.json");
        return run;
    }
    for (const auto& dir : {run.root_, run.checkpoints(), run.samples(), run.analysis(), run.cache()}) {
        fs::create_directories(dir);
    }
    save_config(config_path, config);
    run.manifest_ = {{"format_versions",
                      {{"manifest", kManifestVersion}, {"config", kConfigVersion}, {"checkpoint", kCheckpointVersion}}},
                     {"run_id", config.name},
                     {"seed", config.seed},
                     {"deterministic", config.deterministic},
                     {"config_sha256", file_sha256(config_path)},
                     {"stages", json::object()},
                     {"artifacts", json::object()}};
    run.save_manifest();
    return run;
}

RunDirectory RunDirectory::open(const fs::path& root) {
    RunDirectory run;
    run.root_ = root;
    if (!fs::exists(root / "config.json")) throw FormatError(root.string() + ": not a run directory (no config.json)");
    if (!fs::exists(root / "manifest.json")) throw FormatError(root.string() + ": run directory has no manifest.json");
    run.config_ = load_config(root / "config.json");
    run.config_.output_root = root.parent_path().string();
    run.config_.name = root.filename().string();
    run.manifest_ = read_json(root / "manifest.json");
    run.audit();
    return run;
}

bool RunDirectory::stage_done(const std::string& stage) const {
    const auto& stages = manifest_.at("stages");
    return stages.contains(stage) && stages.at(stage).get<bool>();
}

void RunDirectory::mark_stage(const std::string& stage, bool done) {
    manifest_["stages"][stage] = done;
    save_manifest();
}

void RunDirectory::record_artifact(const std::string& key, const fs::path& file, const std::string& sha256,
                                   long step) {
    json entry = {{"file", fs::relative(file, root_).string()}, {"sha256", sha256}};
    if (step >= 0) entry["step"] = step;
    manifest_["artifacts"][key] = entry;
    save_manifest();
}

std::optional<std::string> RunDirectory::artifact_hash(const std::string& key) const {
    const auto& a = manifest_.at("artifacts");
    if (!a.contains(key)) return std::nullopt;
    return a.at(key).at("sha256").get<std::string>();
}

fs::path RunDirectory::artifact_path(const std::string& key) const {
    const auto& a = manifest_.at("artifacts");
    if (!a.contains(key)) throw FormatError(root_.string() + ": manifest has no artifact '" + key + "'");
    return root_ / a.at(key).at("file").get<std::string>();
}

void RunDirectory::audit() const {
    try {
        const auto& versions = manifest_.at("format_versions");
        if (versions.at("manifest").get<int>() != kManifestVersion ||
            versions.at("config").get<int>() != kConfigVersion ||
            versions.at("checkpoint").get<int>() != static_cast<int>(kCheckpointVersion)) {
            throw FormatError(root_.string() + ": unsupported format versions " + versions.dump());
        }
        if (!manifest_.contains("seed")) throw FormatError(root_.string() + ": manifest lacks the seed");
        if (file_sha256(root_ / "config.json") != manifest_.at("config_sha256").get<std::string>()) {
            throw FormatError(root_.string() + ": config.json does not match the manifest hash");
        }
        for (const auto& [key, entry] : manifest_.at("artifacts").items()) {
            const fs::path file = root_ / entry.at("file").get<std::string>();
            if (!fs::exists(file)) throw FormatError(root_.string() + ": artifact '" + key + "' is missing");
            if (file_sha256(file) != entry.at("sha256").get<std::string>()) {
                throw FormatError(root_.string() + ": artifact '" + key + "' does not match its recorded hash");
            }
        }
    } catch (const json::exception& e) {
        throw FormatError(root_.string() + ": malformed manifest (" + e.what() + ")");
    }
}

void RunDirectory::save_manifest() const { write_json(root_ / "manifest.json", manifest_); }

// ---------------------------------------------------------------- metrics

std::string format_metric_value(double v) {
    std::ostringstream s;
    s << std::setprecision(17) << v;
    return s.str();
}

MetricsLog::MetricsLog(fs::path path) : path_(std::move(path)) {
    if (!fs::exists(path_)) {
        std::ofstream out(path_);
        if (!out) throw FormatError("cannot create " + path_.string());
        out << "run_id,step,metric_name,value,n_samples,extractor_hash\n";
    }
}

void MetricsLog::append(const MetricRow& row) {
    std::ofstream out(path_, std::ios::app);
    if (!out) throw FormatError("cannot append to " + path_.string());
    out << row.run_id << ',' << row.step << ',' << row.metric << ',' << format_metric_value(row.value) << ','
        << row.n_samples << ',' << row.extractor_hash << '\n';
}

std::vector<MetricRow> MetricsLog::read() const {
    std::ifstream in(path_);
    if (!in) throw FormatError("cannot open " + path_.string());
    std::vector<MetricRow> rows;
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream s(line);
        MetricRow r;
        std::string step, value, n;
        std::getline(s, r.run_id, ',');
        std::getline(s, step, ',');
        std::getline(s, r.metric, ',');
        std::getline(s, value, ',');
        std::getline(s, n, ',');
        std::getline(s, r.extractor_hash, ',');
        try {
            r.step = std::stol(step);
            r.value = std::stod(value);
            r.n_samples = std::stoll(n);
        } catch (const std::exception&) {
            throw FormatError(path_.string() + ": malformed row '" + line + "'");
        }
        rows.push_back(std::move(r));
    }
    return rows;
}

void MetricsLog::truncate_after(const std::string& prefix, long step) {
    const auto rows = read();
    const fs::path tmp = path_.string() + ".tmp";
    {
        std::ofstream out(tmp);
        out << "run_id,step,metric_name,value,n_samples,extractor_hash\n";
    }
    MetricsLog fresh(tmp);
    for (const auto& r : rows) {
        if (r.metric.rfind(prefix, 0) == 0 && r.step > step) continue;
        fresh.append(r);
    }
    fs::rename(tmp, path_);
}

// ---------------------------------------------------------------- data

ImageDataset load_dataset(const DatasetConfig& config) {
    if (config.source == "shapes") return generate_shapes(config.shapes);
    if (config.source == "directory") return load_image_dataset(config.directory, config.image_size);
    throw ConfigError("dataset.source: unknown source '" + config.source + "'");
}

DataSplit split_dataset(const ExperimentConfig& config) {
    auto [train, heldout] = load_dataset(config.dataset).split(config.dataset.heldout_fraction,
                                                              config.dataset.shapes.seed);
    if (train.size() == 0 || heldout.size() == 0) throw ConfigError("dataset: split leaves an empty partition");
    return {std::move(train), std::move(heldout)};
}

// ---------------------------------------------------------------- pipeline

Pipeline::Pipeline(RunDirectory& run, const RunOptions& options)
    : run_(&run), options_(options), metrics_(run.metrics_path()) {}

void Pipeline::log(const std::string& msg) const {
    if (options_.log) *options_.log << '[' << run_->run_id() << "] " << msg << std::endl;
}

void Pipeline::metric(long step, const std::string& name, double value, long long n) {
    metrics_.append({run_->run_id(), step, name, value, n, extractor_hash_});
}

void Pipeline::maybe_halt(const std::string& stage, long step) const {
    if (options_.halt_stage == stage && options_.halt_after == step) {
        throw RunHalted(stage + " halted after step " + std::to_string(step));
    }
}

const DataSplit& Pipeline::data() {
    if (!data_) {
        data_ = split_dataset(run_->config());
        log("dataset: " + std::to_string(data_->train.size()) + " train / " + std::to_string(data_->heldout.size()) +
            " held-out images");
    }
    return *data_;
}

FeatureExtractor<float>& Pipeline::extractor() {
    if (extractor_) return *extractor_;
    const auto& cfg = run_->config().extractor;
    const fs::path path = run_->checkpoints() / "extractor.ckpt";
    if (run_->artifact_hash("extractor")) {
        extractor_ = extractor_from_checkpoint(load_checkpoint(run_->artifact_path("extractor"), "extractor"));
    } else if (!cfg.init_from.empty()) {
        auto net = extractor_from_checkpoint(load_checkpoint(cfg.init_from, "extractor"));
        if (!(net.arch() == cfg.arch)) throw ConfigError("extractor.init_from: architecture differs from the config");
        extractor_ = std::move(net);
        run_->record_artifact("extractor", path, save_checkpoint(path, extractor_checkpoint(*extractor_)));
        log("extractor: copied from " + cfg.init_from);
    } else {
        log("extractor: training " + std::to_string(cfg.train.steps) + " steps");
        ExtractorTrainReport report;
        extractor_ = train_feature_extractor(data().train, cfg.arch, cfg.train, &report);
        run_->record_artifact("extractor", path, save_checkpoint(path, extractor_checkpoint(*extractor_)));
        extractor_hash_ = structlat::extractor_hash(*extractor_);
        metric(cfg.train.steps, "extractor/train_accuracy", report.train_accuracy, data().train.size());
        metric(cfg.train.steps, "extractor/final_loss", report.final_loss);
        log("extractor: train accuracy " + format_metric_value(report.train_accuracy));
    }
    extractor_hash_ = structlat::extractor_hash(*extractor_);
    return *extractor_;
}

const std::string& Pipeline::extractor_hash() {
    extractor();
    return extractor_hash_;
}

AutoencoderModel<float>& Pipeline::autoencoder() {
    if (autoencoder_) return *autoencoder_;
    const auto& cfg = run_->config();
    const fs::path path = run_->checkpoints() / "autoencoder.ckpt";
    if (run_->stage_done("autoencoder")) {
        autoencoder_ = autoencoder_from_checkpoint(load_checkpoint(run_->artifact_path("autoencoder"), "autoencoder"));
        return *autoencoder_;
    }
    if (!cfg.autoencoder.init_from.empty()) {
        auto model = autoencoder_from_checkpoint(load_checkpoint(cfg.autoencoder.init_from, "autoencoder"));
        if (!(model.spec == cfg.latent) || !(model.arch == cfg.autoencoder.arch)) {
            throw ConfigError("autoencoder.init_from: checkpoint spec or architecture differs from the config");
        }
        if (!model.latent_stats) model.latent_stats = compute_latent_stats(model, data().train.images);
        autoencoder_ = std::move(model);
        log("autoencoder: copied from " + cfg.autoencoder.init_from);
    } else {
        autoencoder_.emplace(cfg.latent, cfg.autoencoder.arch, cfg.seed);
        train_autoencoder(*autoencoder_);
        autoencoder_->latent_stats = compute_latent_stats(*autoencoder_, data().train.images);
    }
    const long step = cfg.autoencoder.init_from.empty() ? cfg.autoencoder.steps : -1;
    run_->record_artifact("autoencoder", path,
                          save_checkpoint(path, autoencoder_checkpoint(*autoencoder_, std::max(step, 0L))), step);
    run_->mark_stage("autoencoder", true);
    return *autoencoder_;
}

void Pipeline::train_autoencoder(AutoencoderModel<float>& model) {
    const auto& cfg = run_->config();
    AeTrainOptions opts;
    opts.structured = cfg.autoencoder.structured;
    opts.weights = cfg.autoencoder.weights;
    opts.optimizer = cfg.autoencoder.optimizer;
    opts.sampling = cfg.sampling;
    FeatureExtractor<float>* net = opts.weights.perceptual > 0 ? &extractor() : nullptr;
    AutoencoderTrainer<float> trainer(model, opts, net, cfg.seed);
    const fs::path progress = run_->checkpoints() / "autoencoder_progress.ckpt";
    long start = 0;
    if (run_->artifact_hash("autoencoder_progress")) {
        const Checkpoint ckpt = load_checkpoint(run_->artifact_path("autoencoder_progress"), "autoencoder");
        get_params(ckpt, model.params());
        restore_autoencoder_trainer(ckpt, trainer);
        start = ckpt.meta.at("step").get<long>();
        log("autoencoder: resuming at step " + std::to_string(start));
    }
    metrics_.truncate_after("ae/", start);
    const auto& train = data().train;
    auto save_progress = [&](long step) {
        run_->record_artifact("autoencoder_progress", progress,
                              save_checkpoint(progress, autoencoder_checkpoint(model, step, &trainer)), step);
    };
    log(std::string("autoencoder: training ") + (opts.structured ? "structured" : "baseline") + " for " +
        std::to_string(cfg.autoencoder.steps) + " steps");
    for (long s = start; s < cfg.autoencoder.steps; ++s) {
        const Tensor4<float> x = gather_samples(train.images, batch_indices(train.size(), cfg.autoencoder.batch_size,
                                                                            cfg.seed, s));
        Rng rng = derive_rng(cfg.seed, kAeStream, static_cast<std::uint64_t>(s));
        const AeStepReport r = trainer.step(x, rng);
        const long step = s + 1;
        if (step % cfg.pipeline.log_every == 0) {
            metric(step, "ae/loss", r.loss.total, x.n);
            metric(step, "ae/l1", r.loss.l1, x.n);
            metric(step, "ae/perceptual", r.loss.perceptual, x.n);
            metric(step, "ae/c_prime", r.c_prime, x.n);
        }
        if (step % cfg.pipeline.checkpoint_every == 0) save_progress(step);
        if (options_.halt_stage == "autoencoder" && options_.halt_after == step) {
            if (step % cfg.pipeline.checkpoint_every != 0) save_progress(step);
            maybe_halt("autoencoder", step);
        }
        if (step % (cfg.pipeline.log_every * 10) == 0) {
            log("autoencoder: step " + std::to_string(step) + " loss " + format_metric_value(r.loss.total));
        }
    }
}

LatentCache& Pipeline::latent_cache() {
    if (cache_) return *cache_;
    auto& ae = autoencoder();
    const std::string ae_hash = *run_->artifact_hash("autoencoder");
    if (run_->artifact_hash("latent_cache")) {
        cache_ = load_latent_cache(run_->artifact_path("latent_cache"), ae_hash);
        return *cache_;
    }
    log("cache: encoding training set");
    LatentCache cache;
    cache.spec = ae.spec;
    cache.stats = *ae.latent_stats;
    cache.autoencoder_hash = ae_hash;
    cache.latents = standardize_latents(encode_all(ae, data().train.images), cache.stats);
    cache.labels = data().train.labels;
    const fs::path path = run_->cache() / "latents.bin";
    run_->record_artifact("latent_cache", path, save_latent_cache(path, cache));
    cache_ = std::move(cache);
    return *cache_;
}

const FrechetStats& Pipeline::reference_stats() {
    if (!reference_) {
        FrechetAccumulator acc;
        acc.add(extract_features(extractor(), data().train.images));
        reference_ = acc.finish();
    }
    return *reference_;
}

Tensor4<float> Pipeline::sample_images(DiffusionModel<float>& model, Index n, std::uint64_t stream,
                                       std::vector<int>* labels_out) {
    const auto& cfg = run_->config();
    std::vector<int> labels(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) labels[static_cast<std::size_t>(i)] = static_cast<int>(i % model.arch.num_classes);
    Rng rng = derive_rng(cfg.seed, kSampleStream, stream);
    const LatentBatch<float> z =
        sample_latents(model, NoiseSchedule::from_name(cfg.diffusion.schedule), n, labels, cfg.eval.sampler_steps, rng);
    const Tensor4<float> raw = destandardize_latents(z.data, latent_cache().stats);
    if (labels_out) *labels_out = labels;
    return decode_all(autoencoder(), raw);
}

double Pipeline::fid_proxy(DiffusionModel<float>& model, Index n, std::uint64_t stream) {
    const Tensor4<float> images = sample_images(model, n, kFidStream + stream);
    FrechetAccumulator acc;
    acc.add(extract_features(extractor(), images));
    return frechet_distance(acc.finish(), reference_stats());
}

DiffusionModel<float>& Pipeline::diffusion() {
    if (diffusion_) return *diffusion_;
    if (run_->stage_done("diffusion")) {
        diffusion_ = diffusion_from_checkpoint(load_checkpoint(run_->artifact_path("diffusion"), "diffusion"));
        return *diffusion_;
    }
    const auto& cfg = run_->config();
    auto& cache = latent_cache();
    const auto schedule = NoiseSchedule::from_name(cfg.diffusion.schedule);
    DiffusionModel<float> live(cfg.latent, cfg.diffusion.arch, cache.latents.h, cache.latents.w, cfg.seed, schedule);
    diffusion_.emplace(cfg.latent, cfg.diffusion.arch, cache.latents.h, cache.latents.w, cfg.seed, schedule);
    train_diffusion(live, *diffusion_);
    const fs::path path = run_->checkpoints() / "diffusion.ckpt";
    run_->record_artifact("diffusion", path,
                          save_checkpoint(path, diffusion_checkpoint(*diffusion_, cfg.diffusion.steps)),
                          cfg.diffusion.steps);
    run_->mark_stage("diffusion", true);
    return *diffusion_;
}

// Trains `live` and keeps the weight average in `averaged`, which is what gets
// evaluated and saved.
void Pipeline::train_diffusion(DiffusionModel<float>& live, DiffusionModel<float>& averaged) {
    const auto& cfg = run_->config();
    auto& cache = latent_cache();
    DiffusionTrainOptions opts;
    opts.augmented = cfg.diffusion.augmented;
    opts.optimizer = cfg.diffusion.optimizer;
    opts.sampling = cfg.sampling;
    opts.normalization =
        cfg.diffusion.normalization == "kept" ? MaskNormalization::KeptChannels : MaskNormalization::AllChannels;
    opts.time_epsilon = cfg.diffusion.time_epsilon;
    opts.label_dropout = cfg.diffusion.label_dropout;
    DiffusionTrainer<float> trainer(live.net, cfg.latent, NoiseSchedule::from_name(cfg.diffusion.schedule), opts,
                                    live.arch.num_classes);
    nn::Ema<float> ema(live.params(), averaged.params(), cfg.diffusion.ema_decay);
    const fs::path progress = run_->checkpoints() / "diffusion_progress.ckpt";
    long start = 0;
    if (run_->artifact_hash("diffusion_progress")) {
        const Checkpoint ckpt = load_checkpoint(run_->artifact_path("diffusion_progress"), "diffusion");
        get_params(ckpt, live.params());
        restore_diffusion_trainer(ckpt, trainer);
        get_params(ckpt, averaged.params(), nullptr, "ema.");
        start = ckpt.meta.at("step").get<long>();
        ema.set_updates(ckpt.meta.at("ema_updates").get<long>());
        log("diffusion: resuming at step " + std::to_string(start));
    }
    metrics_.truncate_after("diffusion/", start);
    auto save_progress = [&](long step) {
        Checkpoint ckpt = diffusion_checkpoint(live, step, &trainer);
        put_params(ckpt, averaged.params(), nullptr, "ema.");
        ckpt.meta["ema_updates"] = ema.updates();
        run_->record_artifact("diffusion_progress", progress, save_checkpoint(progress, ckpt), step);
    };
    log(std::string("diffusion: training ") + (opts.augmented ? "augmented" : "standard") + " for " +
        std::to_string(cfg.diffusion.steps) + " steps");
    const Index n = cache.latents.n;
    for (long s = start; s < cfg.diffusion.steps; ++s) {
        const auto idx = batch_indices(n, cfg.diffusion.batch_size, cfg.seed ^ kDiffusionStream, s);
        const Tensor4<float> x0 = gather_samples(cache.latents, idx);
        std::vector<int> labels;
        labels.reserve(idx.size());
        for (Index i : idx) labels.push_back(cache.labels[static_cast<std::size_t>(i)]);
        Rng rng = derive_rng(cfg.seed, kDiffusionStream, static_cast<std::uint64_t>(s));
        const DiffusionStepReport r = trainer.step(x0, labels, rng);
        ema.update();
        const long step = s + 1;
        if (step % cfg.pipeline.log_every == 0) {
            metric(step, "diffusion/loss", r.loss, x0.n);
            metric(step, "diffusion/c_prime", r.c_prime, x0.n);
        }
        const bool final_step = step == cfg.diffusion.steps;
        if ((cfg.eval.fid_every > 0 && step % cfg.eval.fid_every == 0) || final_step) {
            const double fid = fid_proxy(averaged, cfg.eval.fid_samples, 0);
            metric(step, "diffusion/fid_proxy", fid, cfg.eval.fid_samples);
            log("diffusion: step " + std::to_string(step) + " fid_proxy " + format_metric_value(fid));
        }
        if (step % cfg.pipeline.checkpoint_every == 0) save_progress(step);
        if (options_.halt_stage == "diffusion" && options_.halt_after == step) {
            if (step % cfg.pipeline.checkpoint_every != 0) save_progress(step);
            maybe_halt("diffusion", step);
        }
    }
}

void Pipeline::write_samples() {
    auto& model = diffusion();
    std::vector<int> labels;
    const Tensor4<float> images = sample_images(model, 64, 1, &labels);
    write_png(run_->samples() / "samples.png", image_grid(images, 8));
    write_png(run_->samples() / "dataset.png", image_grid(head(data().heldout, 64).images, 8));
    std::ofstream meta(run_->samples() / "samples.csv");
    meta << "index,label\n";
    for (std::size_t i = 0; i < labels.size(); ++i) meta << i << ',' << labels[i] << '\n';
}

json Pipeline::analyze() {
    const auto& cfg = run_->config();
    auto& ae = autoencoder();
    const ImageDataset held = head(data().heldout, cfg.eval.heldout_images);
    const Tensor4<float> z = encode_all(ae, held.images);
    const ChannelStats stats = per_channel_stats(std::vector<Tensor4<float>>{z});
    const double score = structure_separation_score(stats, cfg.eval.prefix_fraction);
    {
        std::ofstream csv(run_->analysis() / "channel_stats.csv");
        csv << "channel,mean,variance,energy,low_freq_fraction\n";
        for (Index k = 0; k < stats.channels(); ++k) {
            csv << k << ',' << format_metric_value(stats.mean(k)) << ',' << format_metric_value(stats.variance(k))
                << ',' << format_metric_value(stats.energy(k)) << ','
                << format_metric_value(stats.low_freq_fraction(k)) << '\n';
        }
    }
    // Channel-average maps of the first held-out latents, and every channel of
    // the first latent, each min-max normalized on its own.
    const Index shown = std::min<Index>(16, z.n);
    write_png(run_->analysis() / "channel_average_maps.png",
              map_grid(channel_average_map(gather_samples(z, first_n(shown))), 8));
    Tensor4<float> per_channel(z.c, z.h, z.w, 1);
    for (Index k = 0; k < z.c; ++k) per_channel.sample(k) = z.sample(0).col(k);
    write_png(run_->analysis() / "channel_maps_sample0.png", map_grid(per_channel, 8));
    {
        std::ofstream meta(run_->analysis() / "maps.json");
        meta << json{{"normalization", "per-map min-max to [0, 1]; constant maps render at 0.5"},
                     {"channel_average_maps.png", "mean over channels of E(x) for the first held-out images"},
                     {"channel_maps_sample0.png", "each latent channel of the first held-out image"}}
                    .dump(2)
             << '\n';
    }
    json out = {{"separation_score", score},
                {"prefix_fraction", cfg.eval.prefix_fraction},
                {"lowfreq_cutoff", stats.cutoff},
                {"low_freq_fraction", std::vector<double>(stats.low_freq_fraction.data(),
                                                          stats.low_freq_fraction.data() + stats.channels())},
                {"variance", std::vector<double>(stats.variance.data(), stats.variance.data() + stats.channels())},
                {"n_latents", z.n}};
    write_json(run_->analysis() / "analysis.json", out);
    return out;
}

json Pipeline::reconstruct(int c_prime, Index count) {
    const auto& cfg = run_->config();
    auto& ae = autoencoder();
    if (c_prime <= 0 || c_prime > ae.spec.c) {
        throw ArgumentError("reconstruct: --channels must be in [1, " + std::to_string(ae.spec.c) + "]");
    }
    const ImageDataset held = head(data().heldout, count);
    AutoencoderModel<float> tuned = ae;
    if (cfg.eval.finetune_steps > 0) {
        FinetuneOptions ft;
        ft.steps = cfg.eval.finetune_steps;
        ft.batch_size = cfg.eval.finetune_batch_size;
        ft.seed = cfg.seed;
        tuned = finetune_decoder_for_prefix(ae, c_prime, head(data().train, cfg.eval.finetune_images).images, ft);
    }
    const ChannelMask mask(ae.spec.c, c_prime);
    const Tensor4<float> recon = decode_all(tuned, apply_channel_mask(encode_all(ae, held.images), mask));
    // Originals on the first row, prefix reconstructions below.
    const Index cols = std::min<Index>(8, held.size());
    std::vector<Tensor4<float>> rows;
    for (Index start = 0; start < held.size(); start += cols) {
        std::vector<Index> idx;
        for (Index i = start; i < std::min(start + cols, held.size()); ++i) idx.push_back(i);
        rows.push_back(gather_samples(held.images, idx));
        rows.push_back(gather_samples(recon, idx));
    }
    const fs::path file = run_->samples() / ("reconstruct_c" + std::to_string(c_prime) + ".png");
    write_png(file, image_grid(concat_samples(rows), static_cast<int>(cols)));
    const double mse = (recon.values - held.images.values).cast<double>().squaredNorm() /
                       static_cast<double>(held.images.size());
    return {{"c_prime", c_prime},
            {"mse", mse},
            {"psnr", psnr(held.images, recon).mean()},
            {"finetune_steps", cfg.eval.finetune_steps},
            {"file", fs::relative(file, run_->root()).string()}};
}

json Pipeline::throughput(const std::vector<int>& f_values) {
    const auto& cfg = run_->config();
    json out = json::array();
    std::ofstream csv(run_->analysis() / "throughput.csv");
    csv << "model,f,tokens,batch_size,images_per_second,stddev\n";
    for (int f : f_values) {
        if (f <= 0 || cfg.dataset.image_size % f != 0) {
            throw ArgumentError("throughput: f = " + std::to_string(f) + " does not divide the image size");
        }
        const Index side = cfg.dataset.image_size / f;
        LatentSpec spec{f, cfg.latent.c, cfg.latent.channel_grid};
        DiffusionModel<float> model(spec, cfg.diffusion.arch, side, side, cfg.seed,
                                    NoiseSchedule::from_name(cfg.diffusion.schedule));
        DiffusionTrainOptions opts;
        opts.augmented = cfg.diffusion.augmented;
        opts.optimizer = cfg.diffusion.optimizer;
        DiffusionTrainer<float> trainer(model.net, spec, NoiseSchedule::from_name(cfg.diffusion.schedule), opts,
                                        model.arch.num_classes);
        Tensor4<float> batch(cfg.diffusion.batch_size, side, side, spec.c);
        Rng data_rng = derive_rng(cfg.seed, 0x7B);
        fill_normal(batch, data_rng);
        const std::vector<int> labels(static_cast<std::size_t>(batch.n), 0);
        long step = 0;
        const Throughput t = measure_throughput(
            [&] {
                Rng rng = derive_rng(cfg.seed, 0x7C, static_cast<std::uint64_t>(step++));
                trainer.step(batch, labels, rng);
            },
            batch.n, cfg.eval.throughput_warmup, cfg.eval.throughput_measured);
        csv << "diffusion," << f << ',' << side * side << ',' << batch.n << ',' << format_metric_value(t.mean) << ','
            << format_metric_value(t.stddev) << '\n';
        out.push_back({{"model", "diffusion"},
                       {"f", f},
                       {"tokens", side * side},
                       {"batch_size", batch.n},
                       {"images_per_second", t.mean},
                       {"stddev", t.stddev}});
        metric(0, "throughput/diffusion_f" + std::to_string(f), t.mean, batch.n);
    }
    return out;
}

json Pipeline::evaluate() {
    const auto& cfg = run_->config();
    if (run_->stage_done("eval") && fs::exists(run_->summary_path())) return read_json(run_->summary_path());
    auto& ae = autoencoder();
    auto& net = extractor();
    const ImageDataset held = head(data().heldout, cfg.eval.heldout_images);

    json summary;
    summary["run_id"] = run_->run_id();
    summary["seed"] = cfg.seed;
    summary["extractor_hash"] = extractor_hash_;
    summary["structured_autoencoder"] = cfg.autoencoder.structured;

    const PrefixCurveEntry full = masked_reconstruction_error(ae, held.images, ae.spec.c);
    FrechetAccumulator real, recon;
    real.add(extract_features(net, held.images));
    recon.add(extract_features(net, decode_all(ae, encode_all(ae, held.images))));
    const double rfid = frechet_distance(recon.finish(), real.finish());
    json ae_summary = {{"heldout_mse", full.mse},
                       {"heldout_psnr", full.psnr},
                       {"rfid_proxy", rfid},
                       {"n_heldout", held.size()}};
    metric(0, "eval/heldout_mse", full.mse, held.size());
    metric(0, "eval/heldout_psnr", full.psnr, held.size());
    metric(0, "eval/rfid_proxy", rfid, held.size());

    const json analysis = analyze();
    ae_summary["separation_score"] = analysis["separation_score"];
    ae_summary["low_freq_fraction"] = analysis["low_freq_fraction"];
    metric(0, "eval/separation_score", analysis["separation_score"].get<double>(), held.size());

    if (cfg.pipeline.prefix_curve) {
        FinetuneOptions ft;
        ft.steps = cfg.eval.finetune_steps;
        ft.batch_size = cfg.eval.finetune_batch_size;
        ft.seed = cfg.seed;
        const std::vector<int> grid = cfg.eval.prefix_grid.empty() ? ae.spec.channel_grid : cfg.eval.prefix_grid;
        log("eval: prefix curve over " + std::to_string(grid.size()) + " channel counts");
        const PrefixCurve curve = prefix_reconstruction_curve(
            ae, head(data().train, cfg.eval.finetune_images).images, held.images, grid, ft);
        json entries = json::array();
        std::ofstream csv(run_->analysis() / "prefix_curve.csv");
        csv << "c_prime,mse,psnr,finetuned\n";
        for (const auto& e : curve.entries) {
            entries.push_back({{"c_prime", e.c_prime}, {"mse", e.mse}, {"psnr", e.psnr}});
            csv << e.c_prime << ',' << format_metric_value(e.mse) << ',' << format_metric_value(e.psnr) << ','
                << (curve.finetuned ? 1 : 0) << '\n';
            metric(e.c_prime, "eval/prefix_mse", e.mse, held.size());
        }
        ae_summary["prefix_curve"] = entries;
        ae_summary["prefix_curve_finetuned"] = curve.finetuned;
        ae_summary["finetune_steps"] = ft.steps;
        const int smallest = *std::min_element(grid.begin(), grid.end());
        if (smallest < ae.spec.c) {
            ae_summary["prefix_decode_change"] = prefix_decode_change(ae, head(held, 64).images, smallest);
        }
    }
    summary["autoencoder"] = ae_summary;

    if (cfg.pipeline.diffusion) {
        diffusion();
        json curve = json::array();
        double final_fid = 0;
        for (const auto& row : metrics_.read()) {
            if (row.metric != "diffusion/fid_proxy") continue;
            curve.push_back({{"step", row.step}, {"fid_proxy", row.value}});
            if (row.step == cfg.diffusion.steps) final_fid = row.value;
        }
        summary["diffusion"] = {{"augmented", cfg.diffusion.augmented},
                                {"steps", cfg.diffusion.steps},
                                {"final_fid_proxy", final_fid},
                                {"fid_samples", cfg.eval.fid_samples},
                                {"fid_curve", curve}};
    }
    if (cfg.pipeline.throughput) {
        summary["throughput"] = throughput({cfg.latent.f});
    }
    write_json(run_->summary_path(), summary);
    run_->record_artifact("summary", run_->summary_path(), file_sha256(run_->summary_path()));
    run_->mark_stage("eval", true);
    return summary;
}

RunResult Pipeline::run_all() {
    RunResult result;
    result.root = run_->root();
    try {
        extractor();
        autoencoder();
        if (run_->config().pipeline.diffusion) {
            latent_cache();
            diffusion();
            if (!run_->stage_done("samples")) {
                write_samples();
                run_->mark_stage("samples", true);
            }
        } else if (!run_->stage_done("samples")) {
            auto& ae = autoencoder();
            const ImageDataset held = head(data().heldout, 32);
            const Tensor4<float> recon = decode_all(ae, encode_all(ae, held.images));
            write_png(run_->samples() / "dataset.png", image_grid(held.images, 8));
            write_png(run_->samples() / "reconstruction.png", image_grid(recon, 8));
            run_->mark_stage("samples", true);
        }
        result.summary = evaluate();
        result.completed = true;
    } catch (const RunHalted& h) {
        log(h.what());
    }
    return result;
}

RunResult run_experiment(const ExperimentConfig& config, const RunOptions& options) {
    RunDirectory run = RunDirectory::create(config);
    Pipeline pipeline(run, options);
    return pipeline.run_all();
}

}  // namespace structlat
