#include "structlat/checkpoint.hpp"

#include <openssl/evp.h>

#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace structlat {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'S', 'L', 'C', 'K', 'P', 'T', '\0', '\0'};

std::string to_hex(const unsigned char* digest, unsigned int len) {
    std::ostringstream hex;
    for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
    return hex.str();
}

json adam_meta(const nn::Adam<float>& opt) { return {{"steps", opt.steps()}}; }

json stats_json(const LatentStats& s) {
    return {{"mean", std::vector<double>(s.mean.data(), s.mean.data() + s.mean.size())},
            {"std", std::vector<double>(s.std.data(), s.std.data() + s.std.size())}};
}

LatentStats stats_from_json(const json& j) {
    const auto mean = j.at("mean").get<std::vector<double>>();
    const auto std = j.at("std").get<std::vector<double>>();
    LatentStats s;
    s.mean = Eigen::Map<const Eigen::VectorXd>(mean.data(), static_cast<Index>(mean.size()));
    s.std = Eigen::Map<const Eigen::VectorXd>(std.data(), static_cast<Index>(std.size()));
    return s;
}

template <typename F>
auto with_format_errors(const std::string& what, F f) {
    try {
        return f();
    } catch (const json::exception& e) {
        throw FormatError(what + ": malformed header (" + e.what() + ")");
    }
}

}  // namespace

const Mat<float>& Checkpoint::tensor(const std::string& name) const {
    for (const auto& [n, v] : tensors)
        if (n == name) return v;
    throw FormatError("checkpoint (" + kind + ") has no tensor '" + name + "'");
}

std::string sha256_hex(const void* data, std::size_t size) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_Digest(data, size, digest, &len, EVP_sha256(), nullptr);
    return to_hex(digest, len);
}

std::string file_sha256(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
    std::vector<char> buf(1 << 16);
    while (in) {
        in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        if (in.gcount() > 0) EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(in.gcount()));
    }
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx, digest, &len);
    EVP_MD_CTX_free(ctx);
    return to_hex(digest, len);
}

std::string latent_stats_hash(const LatentStats& stats) {
    std::vector<double> buf(stats.mean.data(), stats.mean.data() + stats.mean.size());
    buf.insert(buf.end(), stats.std.data(), stats.std.data() + stats.std.size());
    return sha256_hex(buf.data(), buf.size() * sizeof(double));
}

std::string save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    json header = {{"kind", ckpt.kind}, {"meta", ckpt.meta}, {"tensors", json::array()}};
    for (const auto& [name, value] : ckpt.tensors) {
        header["tensors"].push_back({{"name", name}, {"rows", value.rows()}, {"cols", value.cols()}});
    }
    const std::string text = header.dump();
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw FormatError("cannot write " + tmp.string());
        out.write(kMagic, sizeof(kMagic));
        const std::uint32_t version = kCheckpointVersion;
        const std::uint64_t len = text.size();
        out.write(reinterpret_cast<const char*>(&version), sizeof(version));
        out.write(reinterpret_cast<const char*>(&len), sizeof(len));
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        for (const auto& [name, value] : ckpt.tensors) {
            out.write(reinterpret_cast<const char*>(value.data()),
                      static_cast<std::streamsize>(sizeof(float) * static_cast<std::size_t>(value.size())));
        }
        if (!out) throw FormatError("write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
    return file_sha256(path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const std::string& expected_kind) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open checkpoint " + path.string());
    char magic[sizeof(kMagic)];
    std::uint32_t version = 0;
    std::uint64_t len = 0;
    in.read(magic, sizeof(magic));
    in.read(reinterpret_cast<char*>(&version), sizeof(version));
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw FormatError(path.string() + ": not a checkpoint file");
    }
    if (version != kCheckpointVersion) {
        throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
    }
    if (len > (1u << 30)) throw FormatError(path.string() + ": implausible header length");
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    if (!in) throw FormatError(path.string() + ": truncated header");
    return with_format_errors(path.string(), [&] {
        const json header = json::parse(text);
        Checkpoint ckpt;
        ckpt.kind = header.at("kind").get<std::string>();
        if (!expected_kind.empty() && ckpt.kind != expected_kind) {
            throw FormatError(path.string() + ": expected a " + expected_kind + " checkpoint, found " + ckpt.kind);
        }
        ckpt.meta = header.at("meta");
        for (const auto& t : header.at("tensors")) {
            const Index rows = t.at("rows").get<Index>();
            const Index cols = t.at("cols").get<Index>();
            if (rows < 0 || cols < 0) throw FormatError(path.string() + ": negative tensor shape");
            Mat<float> value(rows, cols);
            in.read(reinterpret_cast<char*>(value.data()),
                    static_cast<std::streamsize>(sizeof(float) * static_cast<std::size_t>(value.size())));
            if (!in) throw FormatError(path.string() + ": truncated tensor data");
            ckpt.tensors.emplace_back(t.at("name").get<std::string>(), std::move(value));
        }
        in.peek();
        if (!in.eof()) throw FormatError(path.string() + ": trailing bytes after tensor data");
        return ckpt;
    });
}

json spec_to_json(const LatentSpec& spec) {
    return {{"f", spec.f}, {"c", spec.c}, {"channel_grid", spec.channel_grid}};
}

LatentSpec spec_from_json(const json& j) {
    LatentSpec s{j.at("f").get<int>(), j.at("c").get<int>(), j.at("channel_grid").get<std::vector<int>>()};
    s.validate();
    return s;
}

void put_params(Checkpoint& ckpt, const nn::ParamRefs<float>& params, const nn::Adam<float>* optimizer,
                const std::string& prefix) {
    for (const auto* p : params) ckpt.tensors.emplace_back(prefix + p->name, p->value);
    if (!optimizer) return;
    const auto& m = optimizer->first_moments();
    const auto& v = optimizer->second_moments();
    for (std::size_t i = 0; i < params.size(); ++i) {
        ckpt.tensors.emplace_back(prefix + "adam.m." + params[i]->name, m[i]);
        ckpt.tensors.emplace_back(prefix + "adam.v." + params[i]->name, v[i]);
    }
    ckpt.meta[prefix + "optimizer"] = adam_meta(*optimizer);
}

void get_params(const Checkpoint& ckpt, const nn::ParamRefs<float>& params, nn::Adam<float>* optimizer,
                const std::string& prefix) {
    auto assign = [&](Mat<float>& dst, const std::string& name) {
        const Mat<float>& src = ckpt.tensor(name);
        if (src.rows() != dst.rows() || src.cols() != dst.cols()) {
            throw FormatError("checkpoint tensor '" + name + "' has shape " + std::to_string(src.rows()) + "x" +
                              std::to_string(src.cols()) + ", model expects " + std::to_string(dst.rows()) + "x" +
                              std::to_string(dst.cols()));
        }
        dst = src;
    };
    for (auto* p : params) assign(p->value, prefix + p->name);
    if (!optimizer) return;
    auto& m = optimizer->first_moments();
    auto& v = optimizer->second_moments();
    for (std::size_t i = 0; i < params.size(); ++i) {
        assign(m[i], prefix + "adam.m." + params[i]->name);
        assign(v[i], prefix + "adam.v." + params[i]->name);
    }
    with_format_errors("checkpoint", [&] {
        optimizer->set_steps(ckpt.meta.at(prefix + "optimizer").at("steps").get<long>());
        return 0;
    });
}

Checkpoint autoencoder_checkpoint(AutoencoderModel<float>& model, long step, AutoencoderTrainer<float>* trainer) {
    Checkpoint ckpt;
    ckpt.kind = "autoencoder";
    ckpt.meta["spec"] = spec_to_json(model.spec);
    ckpt.meta["arch"] = {{"base_width", model.arch.base_width},
                         {"max_width", model.arch.max_width},
                         {"blocks_per_stage", model.arch.blocks_per_stage}};
    ckpt.meta["step"] = step;
    ckpt.meta["latent_stats"] = model.latent_stats ? stats_json(*model.latent_stats) : json(nullptr);
    put_params(ckpt, model.params(), trainer ? &trainer->optimizer() : nullptr);
    if (trainer && trainer->discriminator()) {
        nn::ParamRefs<float> dp;
        trainer->discriminator()->collect(dp);
        put_params(ckpt, dp, trainer->discriminator_optimizer(), "disc.");
    }
    return ckpt;
}

AutoencoderModel<float> autoencoder_from_checkpoint(const Checkpoint& ckpt) {
    if (ckpt.kind != "autoencoder") throw FormatError("expected an autoencoder checkpoint, found " + ckpt.kind);
    return with_format_errors("autoencoder checkpoint", [&] {
        const json& a = ckpt.meta.at("arch");
        AutoencoderArch arch{a.at("base_width").get<int>(), a.at("max_width").get<int>(),
                             a.at("blocks_per_stage").get<int>()};
        AutoencoderModel<float> model(spec_from_json(ckpt.meta.at("spec")), arch, 0);
        get_params(ckpt, model.params());
        if (!ckpt.meta.at("latent_stats").is_null()) model.latent_stats = stats_from_json(ckpt.meta["latent_stats"]);
        return model;
    });
}

void restore_autoencoder_trainer(const Checkpoint& ckpt, AutoencoderTrainer<float>& trainer) {
    get_params(ckpt, trainer.optimizer().params(), &trainer.optimizer());
    if (trainer.discriminator()) {
        nn::ParamRefs<float> dp;
        trainer.discriminator()->collect(dp);
        get_params(ckpt, dp, trainer.discriminator_optimizer(), "disc.");
    }
}

Checkpoint diffusion_checkpoint(DiffusionModel<float>& model, long step, DiffusionTrainer<float>* trainer) {
    Checkpoint ckpt;
    ckpt.kind = "diffusion";
    ckpt.meta["spec"] = spec_to_json(model.spec);
    ckpt.meta["arch"] = {{"width", model.arch.width},         {"depth", model.arch.depth},
                         {"heads", model.arch.heads},         {"mlp_ratio", model.arch.mlp_ratio},
                         {"num_classes", model.arch.num_classes}, {"precondition", model.arch.precondition}};
    ckpt.meta["schedule"] = model.schedule.name();
    ckpt.meta["latent_h"] = model.latent_h;
    ckpt.meta["latent_w"] = model.latent_w;
    ckpt.meta["step"] = step;
    put_params(ckpt, model.params(), trainer ? &trainer->optimizer() : nullptr);
    return ckpt;
}

DiffusionModel<float> diffusion_from_checkpoint(const Checkpoint& ckpt) {
    if (ckpt.kind != "diffusion") throw FormatError("expected a diffusion checkpoint, found " + ckpt.kind);
    return with_format_errors("diffusion checkpoint", [&] {
        const json& a = ckpt.meta.at("arch");
        DenoiserArch arch{a.at("width").get<int>(), a.at("depth").get<int>(), a.at("heads").get<int>(),
                          a.at("mlp_ratio").get<int>(), a.at("num_classes").get<int>(),
                          a.at("precondition").get<bool>()};
        DiffusionModel<float> model(spec_from_json(ckpt.meta.at("spec")), arch, ckpt.meta.at("latent_h").get<Index>(),
                                    ckpt.meta.at("latent_w").get<Index>(), 0,
                                    NoiseSchedule::from_name(ckpt.meta.at("schedule").get<std::string>()));
        get_params(ckpt, model.params());
        return model;
    });
}

void restore_diffusion_trainer(const Checkpoint& ckpt, DiffusionTrainer<float>& trainer) {
    get_params(ckpt, trainer.optimizer().params(), &trainer.optimizer());
}

Checkpoint extractor_checkpoint(FeatureExtractor<float>& net) {
    Checkpoint ckpt;
    ckpt.kind = "extractor";
    const auto& a = net.arch();
    ckpt.meta["arch"] = {{"width", a.width}, {"feature_dim", a.feature_dim}, {"num_classes", a.num_classes}};
    nn::ParamRefs<float> p;
    net.collect(p);
    put_params(ckpt, p);
    ckpt.meta["parameter_hash"] = parameter_hash(p);
    return ckpt;
}

FeatureExtractor<float> extractor_from_checkpoint(const Checkpoint& ckpt) {
    if (ckpt.kind != "extractor") throw FormatError("expected an extractor checkpoint, found " + ckpt.kind);
    return with_format_errors("extractor checkpoint", [&] {
        const json& a = ckpt.meta.at("arch");
        FeatureExtractorArch arch{a.at("width").get<int>(), a.at("feature_dim").get<int>(),
                                  a.at("num_classes").get<int>()};
        Rng rng(0);
        FeatureExtractor<float> net(arch, rng);
        nn::ParamRefs<float> p;
        net.collect(p);
        get_params(ckpt, p);
        if (parameter_hash(p) != ckpt.meta.at("parameter_hash").get<std::string>()) {
            throw FormatError("extractor checkpoint: parameter hash mismatch");
        }
        return net;
    });
}

std::string save_latent_cache(const std::filesystem::path& path, const LatentCache& cache) {
    Checkpoint ckpt;
    ckpt.kind = "latent-cache";
    ckpt.meta["spec"] = spec_to_json(cache.spec);
    ckpt.meta["latent_stats"] = stats_json(cache.stats);
    ckpt.meta["latent_stats_hash"] = latent_stats_hash(cache.stats);
    ckpt.meta["autoencoder_hash"] = cache.autoencoder_hash;
    ckpt.meta["shape"] = {cache.latents.n, cache.latents.h, cache.latents.w, cache.latents.c};
    ckpt.meta["labels"] = cache.labels;
    ckpt.tensors.emplace_back("latents", cache.latents.values);
    return save_checkpoint(path, ckpt);
}

LatentCache load_latent_cache(const std::filesystem::path& path, const std::string& expected_autoencoder_hash) {
    const Checkpoint ckpt = load_checkpoint(path, "latent-cache");
    return with_format_errors(path.string(), [&] {
        LatentCache cache;
        cache.autoencoder_hash = ckpt.meta.at("autoencoder_hash").get<std::string>();
        if (cache.autoencoder_hash != expected_autoencoder_hash) {
            throw FormatError(path.string() + ": latent cache was built from autoencoder checkpoint " +
                              cache.autoencoder_hash.substr(0, 12) + "..., current checkpoint is " +
                              expected_autoencoder_hash.substr(0, 12) + "...; re-run cache-latents");
        }
        cache.spec = spec_from_json(ckpt.meta.at("spec"));
        cache.stats = stats_from_json(ckpt.meta.at("latent_stats"));
        if (latent_stats_hash(cache.stats) != ckpt.meta.at("latent_stats_hash").get<std::string>()) {
            throw FormatError(path.string() + ": latent stats hash mismatch; re-run cache-latents");
        }
        const auto shape = ckpt.meta.at("shape").get<std::vector<Index>>();
        if (shape.size() != 4) throw FormatError(path.string() + ": bad latent shape");
        cache.latents = Tensor4<float>(shape[0], shape[1], shape[2], shape[3]);
        const Mat<float>& v = ckpt.tensor("latents");
        if (v.rows() != cache.latents.rows() || v.cols() != cache.latents.c) {
            throw FormatError(path.string() + ": latent tensor does not match its recorded shape");
        }
        cache.latents.values = v;
        cache.labels = ckpt.meta.at("labels").get<std::vector<int>>();
        return cache;
    });
}

}  // namespace structlat
