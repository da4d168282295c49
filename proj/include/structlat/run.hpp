#pragma once

#include "structlat/analysis.hpp"
#include "structlat/checkpoint.hpp"
#include "structlat/config.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>

namespace structlat {

inline constexpr int kManifestVersion = 1;

/// runs/<name>/{config.json, manifest.json, checkpoints/, cache/, metrics.csv,
/// samples/, analysis/, summary.json}.
class RunDirectory {
public:
    /// Creates the directory, or reopens it when its config.json equals
    /// `config`; a different config is refused.
    static RunDirectory create(const ExperimentConfig& config);

    /// Opens an existing run and audits it (see audit()).
    static RunDirectory open(const std::filesystem::path& root);

    const std::filesystem::path& root() const { return root_; }
    std::filesystem::path checkpoints() const { return root_ / "checkpoints"; }
    std::filesystem::path samples() const { return root_ / "samples"; }
    std::filesystem::path analysis() const { return root_ / "analysis"; }
    std::filesystem::path cache() const { return root_ / "cache"; }
    std::filesystem::path metrics_path() const { return root_ / "metrics.csv"; }
    std::filesystem::path summary_path() const { return root_ / "summary.json"; }

    const ExperimentConfig& config() const { return config_; }
    std::string run_id() const { return config_.name; }

    const nlohmann::json& manifest() const { return manifest_; }
    bool stage_done(const std::string& stage) const;
    void mark_stage(const std::string& stage, bool done);

    /// Records an artifact file and its SHA-256 in the manifest.
    void record_artifact(const std::string& key, const std::filesystem::path& file, const std::string& sha256,
                         long step = -1);
    std::optional<std::string> artifact_hash(const std::string& key) const;
    std::filesystem::path artifact_path(const std::string& key) const;

    /// Throws FormatError unless config.json parses and matches the manifest's
    /// config hash and every recorded artifact exists with its recorded hash.
    void audit() const;

private:
    void save_manifest() const;

    std::filesystem::path root_;
    ExperimentConfig config_;
    nlohmann::json manifest_;
};

struct MetricRow {
    std::string run_id;
    long step = 0;
    std::string metric;
    double value = 0;
    long long n_samples = 0;
    std::string extractor_hash;

    bool operator==(const MetricRow&) const = default;
};

/// Append-only metrics.csv (run_id,step,metric_name,value,n_samples,extractor_hash).
class MetricsLog {
public:
    explicit MetricsLog(std::filesystem::path path);

    void append(const MetricRow& row);
    std::vector<MetricRow> read() const;

    /// Drops rows whose metric starts with `prefix` and whose step exceeds
    /// `step`; used when a stage resumes from an earlier checkpoint.
    void truncate_after(const std::string& prefix, long step);

private:
    std::filesystem::path path_;
};

std::string format_metric_value(double v);

/// Train / held-out split of the configured dataset.
struct DataSplit {
    ImageDataset train;
    ImageDataset heldout;
};

ImageDataset load_dataset(const DatasetConfig& config);
DataSplit split_dataset(const ExperimentConfig& config);

/// Controls for interrupting a run at a given stage step (resume testing)
/// and for progress logging.
struct RunOptions {
    std::string halt_stage;  // "autoencoder" or "diffusion"
    long halt_after = -1;    // step after which the run checkpoints and stops
    std::ostream* log = nullptr;
};

struct RunResult {
    bool completed = false;
    std::filesystem::path root;
    nlohmann::json summary;
};

/// dataset -> extractor -> autoencoder -> latent cache -> diffusion ->
/// samples -> evaluation. Each stage resumes from the run's latest
/// checkpoint; completed stages are loaded, not recomputed.
RunResult run_experiment(const ExperimentConfig& config, const RunOptions& options = {});

/// Individual stages, also exposed through the CLI. Each loads what it needs
/// from the run directory.
class Pipeline {
public:
    Pipeline(RunDirectory& run, const RunOptions& options);

    const DataSplit& data();
    FeatureExtractor<float>& extractor();
    const std::string& extractor_hash();
    AutoencoderModel<float>& autoencoder();
    LatentCache& latent_cache();
    DiffusionModel<float>& diffusion();

    /// Fréchet statistics of real training images (cached per run).
    const FrechetStats& reference_stats();

    /// FID proxy of `n` class-conditional samples against reference_stats().
    double fid_proxy(DiffusionModel<float>& model, Index n, std::uint64_t stream);

    /// Decoded samples; labels cycle through the classes.
    Tensor4<float> sample_images(DiffusionModel<float>& model, Index n, std::uint64_t stream,
                                 std::vector<int>* labels_out = nullptr);

    void write_samples();
    nlohmann::json analyze();
    nlohmann::json reconstruct(int c_prime, Index count);
    nlohmann::json throughput(const std::vector<int>& f_values);
    nlohmann::json evaluate();

    /// Runs every stage that is not yet complete.
    RunResult run_all();

private:
    void log(const std::string& msg) const;
    void metric(long step, const std::string& name, double value, long long n = 0);
    void maybe_halt(const std::string& stage, long step) const;
    void train_autoencoder(AutoencoderModel<float>& model);
    void train_diffusion(DiffusionModel<float>& live, DiffusionModel<float>& averaged);

    RunDirectory* run_;
    RunOptions options_;
    MetricsLog metrics_;
    std::optional<DataSplit> data_;
    std::optional<FeatureExtractor<float>> extractor_;
    std::string extractor_hash_;
    std::optional<AutoencoderModel<float>> autoencoder_;
    std::optional<LatentCache> cache_;
    std::optional<DiffusionModel<float>> diffusion_;
    std::optional<FrechetStats> reference_;
};

/// Thrown internally when RunOptions asks a stage to stop early.
struct RunHalted : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct RecipeOptions {
    std::vector<std::uint64_t> seeds;  // empty = {config.seed}
    RunOptions run;
};

/// Recipes: "ablation-2x2", "convergence", "prefix-curve", "parity". Runs
/// land in <output_root>/<recipe>/...; the recipe summary goes to
/// <output_root>/<recipe>/summary.json plus a CSV table.
nlohmann::json run_recipe(const std::string& name, const ExperimentConfig& base, const RecipeOptions& options = {});

const std::vector<std::string>& recipe_names();

/// First recorded step whose value is <= target, or -1 if none is.
long steps_to_reach(const std::vector<std::pair<long, double>>& curve, double target);

}  // namespace structlat
