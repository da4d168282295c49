#pragma once

#include "structlat/autoencoder.hpp"
#include "structlat/diffusion.hpp"
#include "structlat/feature_extractor.hpp"
#include "structlat/metrics.hpp"

#include <json.hpp>

#include <filesystem>
#include <map>

namespace structlat {

/// On-disk container: "SLCKPT\0\0", u32 format version, u64 header length,
/// JSON header, then raw little-endian float32 tensors in header order.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    std::string kind;  // "autoencoder", "diffusion", "extractor", "latent-cache"
    nlohmann::json meta = nlohmann::json::object();
    std::vector<std::pair<std::string, Mat<float>>> tensors;

    const Mat<float>& tensor(const std::string& name) const;
};

/// Writes atomically (temp file + rename); returns the file's SHA-256.
std::string save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);

/// Throws FormatError on a bad magic, unknown version, truncation or a kind
/// other than `expected_kind` (when nonempty).
Checkpoint load_checkpoint(const std::filesystem::path& path, const std::string& expected_kind = "");

std::string file_sha256(const std::filesystem::path& path);
std::string sha256_hex(const void* data, std::size_t size);

/// Hash of the latent statistics' float64 values.
std::string latent_stats_hash(const LatentStats& stats);

nlohmann::json spec_to_json(const LatentSpec& spec);
LatentSpec spec_from_json(const nlohmann::json& j);

/// Model parameters and, when `optimizer` is given, its moments and step.
void put_params(Checkpoint& ckpt, const nn::ParamRefs<float>& params, const nn::Adam<float>* optimizer = nullptr,
                const std::string& prefix = "");
/// Restores values by name and shape; FormatError on any mismatch.
void get_params(const Checkpoint& ckpt, const nn::ParamRefs<float>& params, nn::Adam<float>* optimizer = nullptr,
                const std::string& prefix = "");

Checkpoint autoencoder_checkpoint(AutoencoderModel<float>& model, long step,
                                  AutoencoderTrainer<float>* trainer = nullptr);
AutoencoderModel<float> autoencoder_from_checkpoint(const Checkpoint& ckpt);
/// Restores optimizer (and discriminator) state into a trainer built for the
/// model loaded from the same checkpoint.
void restore_autoencoder_trainer(const Checkpoint& ckpt, AutoencoderTrainer<float>& trainer);

Checkpoint diffusion_checkpoint(DiffusionModel<float>& model, long step, DiffusionTrainer<float>* trainer = nullptr);
DiffusionModel<float> diffusion_from_checkpoint(const Checkpoint& ckpt);
void restore_diffusion_trainer(const Checkpoint& ckpt, DiffusionTrainer<float>& trainer);

Checkpoint extractor_checkpoint(FeatureExtractor<float>& net);
FeatureExtractor<float> extractor_from_checkpoint(const Checkpoint& ckpt);

/// Standardized training latents plus the provenance needed to detect a
/// stale cache.
struct LatentCache {
    LatentSpec spec;
    LatentStats stats;
    std::string autoencoder_hash;  // SHA-256 of the autoencoder checkpoint file
    Tensor4<float> latents;        // standardized
    std::vector<int> labels;
};

std::string save_latent_cache(const std::filesystem::path& path, const LatentCache& cache);

/// Refuses (FormatError) when the cache was built from a different
/// autoencoder checkpoint or its stats do not match its hash.
LatentCache load_latent_cache(const std::filesystem::path& path, const std::string& expected_autoencoder_hash);

}  // namespace structlat
