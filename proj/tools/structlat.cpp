#include "structlat/image_io.hpp"
#include "structlat/run.hpp"

#include <CLI11.hpp>
#include <Eigen/Core>

#include <cstdlib>
#include <fstream>
#include <iostream>

using namespace structlat;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Exit codes by error category.
enum Exit : int {
    kOk = 0,
    kInternal = 1,
    kUsage = 2,  // bad flags, malformed or invalid config, unknown recipe
    kArgument = 3,
    kFormat = 4,  // unreadable files, checksum or audit failures
    kNumerical = 5,
    kHalted = 6,
};

struct Common {
    std::string config;
    std::string preset = "default";
    std::vector<std::string> overrides;
    std::string name;
    std::string output_root;
    std::string run_dir;
    bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c, bool with_run_dir = true) {
    cmd->add_option("--config", c.config, "Experiment config (JSON)");
    cmd->add_option("--preset", c.preset, "Starting config when --config is absent (default, tiny)");
    cmd->add_option("--set", c.overrides, "Override, e.g. --set autoencoder.steps=200 (repeatable)");
    cmd->add_option("--name", c.name, "Run name");
    cmd->add_option("--output-root", c.output_root, "Directory holding run directories");
    if (with_run_dir) cmd->add_option("--run", c.run_dir, "Existing run directory (audited; overrides --config)");
    cmd->add_flag("--quiet", c.quiet, "No progress output");
}

ExperimentConfig resolve_config(const Common& c) {
    json j;
    if (!c.config.empty()) {
        std::ifstream in(c.config);
        if (!in) throw FormatError("cannot open config " + c.config);
        try {
            j = json::parse(in);
        } catch (const json::parse_error& e) {
            throw ConfigError(c.config + ": " + e.what());
        }
    } else {
        j = config_to_json(preset_config(c.preset));
    }
    for (const auto& o : c.overrides) apply_override(j, o);
    if (!c.name.empty()) j["name"] = c.name;
    if (!c.output_root.empty()) {
        j["output_root"] = c.output_root;
    } else if (const char* env = std::getenv("STRUCTLAT_OUTPUT_ROOT")) {
        j["output_root"] = env;
    }
    ExperimentConfig cfg = config_from_json(j);
    cfg.validate();
    return cfg;
}

RunDirectory open_run(const Common& c) {
    if (!c.run_dir.empty()) {
        if (!c.overrides.empty() || !c.config.empty()) {
            throw ConfigError("--run takes its config from the run directory; drop --config/--set");
        }
        return RunDirectory::open(c.run_dir);
    }
    return RunDirectory::create(resolve_config(c));
}

RunOptions run_options(const Common& c) {
    RunOptions o;
    if (!c.quiet) o.log = &std::cerr;
    return o;
}

void print(const json& j) { std::cout << j.dump(2) << '\n'; }

template <typename Fn>
int guarded(Fn&& fn) {
    try {
        fn();
        return kOk;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kUsage;
    } catch (const ArgumentError& e) {
        std::cerr << "argument error: " << e.what() << '\n';
        return kArgument;
    } catch (const FormatError& e) {
        std::cerr << "format error: " << e.what() << '\n';
        return kFormat;
    } catch (const NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << '\n';
        return kNumerical;
    } catch (const RunHalted& e) {
        std::cerr << "halted: " << e.what() << '\n';
        return kHalted;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "format error: " << e.what() << '\n';
        return kFormat;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kInternal;
    }
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
    std::vector<std::uint64_t> seeds;
    std::stringstream s(text);
    std::string item;
    while (std::getline(s, item, ',')) {
        try {
            std::size_t used = 0;
            seeds.push_back(std::stoull(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw ConfigError("--seeds: '" + item + "' is not a non-negative integer");
        }
    }
    return seeds;
}

}  // namespace

int main(int argc, char** argv) {
    if (const char* threads = std::getenv("STRUCTLAT_THREADS")) Eigen::setNbThreads(std::atoi(threads));

    CLI::App app{"Structured latent autoencoders and augmented latent diffusion"};
    app.require_subcommand(1);
    Common c;
    std::function<void()> action;

    auto* gen = app.add_subcommand("gen-data", "Write the configured synthetic dataset as PNGs plus index.csv");
    std::string out_dir;
    add_common(gen, c, false);
    gen->add_option("--out", out_dir, "Output directory")->required();
    gen->callback([&] {
        action = [&] {
            const ExperimentConfig cfg = resolve_config(c);
            if (fs::exists(out_dir) && !fs::is_empty(out_dir)) {
                throw ArgumentError("gen-data: " + out_dir + " exists and is not empty");
            }
            const ImageDataset data = load_dataset(cfg.dataset);
            save_image_dataset(out_dir, data);
            print({{"directory", out_dir}, {"images", data.size()}, {"classes", cfg.dataset.shapes.num_classes()}});
        };
    });

    auto stage = [&](const std::string& name, const std::string& help, std::function<json(Pipeline&)> body) {
        auto* cmd = app.add_subcommand(name, help);
        add_common(cmd, c);
        return std::make_pair(cmd, [&c, body] {
            RunDirectory run = open_run(c);
            Pipeline pipeline(run, run_options(c));
            print(body(pipeline));
        });
    };

    auto bind = [&](std::pair<CLI::App*, std::function<void()>> p) {
        p.first->callback([&action, fn = p.second] { action = fn; });
        return p.first;
    };

    bind(stage("train-extractor", "Train (or copy) the frozen feature extractor", [](Pipeline& p) {
        p.extractor();
        return json{{"extractor_hash", p.extractor_hash()}};
    }));
    bind(stage("train-ae", "Train the autoencoder", [](Pipeline& p) {
        auto& ae = p.autoencoder();
        return json{{"channels", ae.spec.c}, {"f", ae.spec.f}, {"structured_grid", ae.spec.channel_grid}};
    }));
    bind(stage("cache-latents", "Encode the training set into the latent cache", [](Pipeline& p) {
        const auto& cache = p.latent_cache();
        return json{{"latents", cache.latents.n}, {"autoencoder_hash", cache.autoencoder_hash}};
    }));
    bind(stage("train-diffusion", "Train the latent diffusion model", [](Pipeline& p) {
        p.diffusion();
        return json{{"status", "trained"}};
    }));
    bind(stage("sample", "Write a grid of class-conditional samples", [](Pipeline& p) {
        p.write_samples();
        return json{{"status", "written"}};
    }));
    bind(stage("analyze", "Per-channel latent statistics and separation score",
               [](Pipeline& p) { return p.analyze(); }));
    bind(stage("eval", "Evaluate a run and write summary.json", [](Pipeline& p) { return p.evaluate(); }));
    bind(stage("run", "Run every remaining stage", [](Pipeline& p) {
        RunResult r = p.run_all();
        if (!r.completed) throw RunHalted("run stopped before completion");
        return r.summary;
    }));

    int channels = 0;
    Index count = 16;
    auto* rec = bind(stage("reconstruct", "Prefix-channel reconstruction grid with a fine-tuned decoder",
                           [&channels, &count](Pipeline& p) { return p.reconstruct(channels, count); }));
    rec->add_option("--channels", channels, "Number of leading latent channels kept (c')")->required();
    rec->add_option("--count", count, "Held-out images shown");

    std::vector<int> f_values;
    auto* thr = bind(stage("throughput", "Diffusion training throughput over downsampling factors",
                           [&f_values](Pipeline& p) { return p.throughput(f_values); }));
    thr->add_option("--f", f_values, "Downsampling factors (default: the config's f)")->delimiter(',');
    thr->preparse_callback([&](std::size_t) { f_values.clear(); });

    auto* recipe = app.add_subcommand("run-recipe", "Run a named experiment recipe");
    std::string recipe_name;
    std::string seeds_text;
    add_common(recipe, c, false);
    recipe->add_option("recipe", recipe_name, "ablation-2x2, convergence, prefix-curve or parity")->required();
    recipe->add_option("--seeds", seeds_text, "Comma-separated seeds (default: the config seed)");
    recipe->callback([&] {
        action = [&] {
            RecipeOptions options;
            options.run = run_options(c);
            if (!seeds_text.empty()) options.seeds = parse_seeds(seeds_text);
            print(run_recipe(recipe_name, resolve_config(c), options));
        };
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }
    return guarded([&] {
        if (thr->parsed() && f_values.empty()) {
            RunDirectory run = open_run(c);
            f_values = {run.config().latent.f};
        }
        action();
    });
}
