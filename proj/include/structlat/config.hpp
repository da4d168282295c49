#pragma once

#include "structlat/autoencoder.hpp"
#include "structlat/diffusion.hpp"
#include "structlat/metrics.hpp"
#include "structlat/shapes.hpp"

#include <json.hpp>

#include <string>

namespace structlat {

inline constexpr int kConfigVersion = 1;

struct DatasetConfig {
    std::string source = "shapes";  // "shapes" or "directory"
    SyntheticShapesSpec shapes;
    std::string directory;  // used when source == "directory"
    int image_size = 32;
    double heldout_fraction = 0.1;

    bool operator==(const DatasetConfig&) const = default;
};

struct ExtractorConfig {
    FeatureExtractorArch arch;
    ExtractorTrainOptions train;
    std::string init_from;  // existing extractor checkpoint to copy instead of training

    bool operator==(const ExtractorConfig&) const = default;
};

struct AutoencoderConfig {
    AutoencoderArch arch;
    bool structured = true;
    ReconLossWeights weights;
    nn::AdamOptions optimizer{1e-3};
    long steps = 4000;
    Index batch_size = 16;
    std::string init_from;  // existing autoencoder checkpoint to copy instead of training

    bool operator==(const AutoencoderConfig&) const = default;
};

struct DiffusionConfig {
    DenoiserArch arch;
    bool augmented = true;
    std::string schedule = "trig";
    std::string normalization = "all";  // "all" or "kept"
    nn::AdamOptions optimizer{1e-3, 0.9, 0.999, 1e-8, 0.0, 1.0};
    long steps = 3000;
    Index batch_size = 128;
    double label_dropout = 0.1;
    double time_epsilon = 1e-3;
    double ema_decay = 0.999;  // weight average used for evaluation and the saved model; 0 = last weights

    bool operator==(const DiffusionConfig&) const = default;
};

struct EvalConfig {
    long fid_every = 300;  // diffusion steps between FID-proxy evaluations; 0 = final only
    Index fid_samples = 2000;
    int sampler_steps = 25;
    long finetune_steps = 300;
    Index finetune_batch_size = 32;
    Index finetune_images = 2000;
    std::vector<int> prefix_grid;  // empty = the latent channel grid
    Index heldout_images = 500;
    double prefix_fraction = 0.25;
    int throughput_warmup = 2;
    int throughput_measured = 5;

    bool operator==(const EvalConfig&) const = default;
};

struct PipelineConfig {
    bool diffusion = true;     // false stops after the autoencoder stages
    bool prefix_curve = true;  // fine-tuned prefix curve in the final evaluation
    bool throughput = false;
    long checkpoint_every = 500;
    long log_every = 50;

    bool operator==(const PipelineConfig&) const = default;
};

struct ExperimentConfig {
    int version = kConfigVersion;
    std::string name = "default";
    std::string output_root = "runs";
    std::uint64_t seed = 0;
    bool deterministic = true;
    DatasetConfig dataset;
    LatentSpec latent = LatentSpec::with_default_grid(8, 16);
    ChannelSampling sampling;
    ExtractorConfig extractor;
    AutoencoderConfig autoencoder;
    DiffusionConfig diffusion;
    EvalConfig eval;
    PipelineConfig pipeline;

    /// Cross-field checks; throws ConfigError naming the offending key.
    void validate() const;

    bool operator==(const ExperimentConfig&) const = default;
};

nlohmann::json config_to_json(const ExperimentConfig& config);

/// Strict parse: unknown keys and wrongly typed values raise ConfigError
/// with the key path (e.g. "autoencoder.optimizer.lr"). Missing keys keep
/// their defaults.
ExperimentConfig config_from_json(const nlohmann::json& j);

ExperimentConfig load_config(const std::filesystem::path& path);
void save_config(const std::filesystem::path& path, const ExperimentConfig& config);

/// Applies "a.b.c=value" (value parsed as JSON, else taken as a string).
void apply_override(nlohmann::json& j, const std::string& assignment);

/// Named starting configurations used by the recipes.
ExperimentConfig preset_config(const std::string& name);

}  // namespace structlat
