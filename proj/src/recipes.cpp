#include "structlat/run.hpp"

#include <fstream>
#include <iostream>

namespace structlat {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct RecipeContext {
    std::string name;
    ExperimentConfig base;
    RecipeOptions options;
    fs::path root;

    std::vector<std::uint64_t> seeds() const {
        return options.seeds.empty() ? std::vector<std::uint64_t>{base.seed} : options.seeds;
    }

    ExperimentConfig derive(const std::string& run_name, std::uint64_t seed) const {
        ExperimentConfig cfg = base;
        cfg.output_root = root.string();
        cfg.name = run_name;
        cfg.seed = seed;
        return cfg;
    }

    json run(const ExperimentConfig& cfg) const {
        if (options.run.log) *options.run.log << "[" << name << "] run " << cfg.name << '\n';
        const RunResult r = run_experiment(cfg, options.run);
        if (!r.completed) throw RunHalted(name + ": run " + cfg.name + " halted before completion");
        return r.summary;
    }

    fs::path checkpoint(const std::string& run_name, const std::string& file) const {
        return root / run_name / "checkpoints" / file;
    }
};

std::string seed_tag(std::uint64_t seed) { return "s" + std::to_string(seed); }

// Every run of a recipe shares the extractor trained by its first run, so
// FID proxies are comparable across cells and seeds.
void share_extractor(ExperimentConfig& cfg, const RecipeContext& ctx, const std::string& owner) {
    if (cfg.name != owner && cfg.extractor.init_from.empty()) {
        cfg.extractor.init_from = ctx.checkpoint(owner, "extractor.ckpt").string();
    }
}

ExperimentConfig ae_only(ExperimentConfig cfg, bool structured) {
    cfg.autoencoder.structured = structured;
    cfg.pipeline.diffusion = false;
    return cfg;
}

ExperimentConfig diffusion_on(ExperimentConfig cfg, const fs::path& ae_checkpoint, bool structured_ae, bool augmented) {
    cfg.autoencoder.init_from = ae_checkpoint.string();
    cfg.autoencoder.structured = structured_ae;
    cfg.diffusion.augmented = augmented;
    cfg.pipeline.diffusion = true;
    cfg.pipeline.prefix_curve = false;
    return cfg;
}

int smallest_grid_entry(const ExperimentConfig& cfg) {
    const auto& grid = cfg.eval.prefix_grid.empty() ? cfg.latent.channel_grid : cfg.eval.prefix_grid;
    return *std::min_element(grid.begin(), grid.end());
}

double prefix_mse_at(const json& summary, int c_prime) {
    for (const auto& e : summary.at("autoencoder").at("prefix_curve")) {
        if (e.at("c_prime").get<int>() == c_prime) return e.at("mse").get<double>();
    }
    throw FormatError("summary has no prefix-curve entry at c' = " + std::to_string(c_prime));
}

std::vector<std::pair<long, double>> fid_curve(const json& summary) {
    std::vector<std::pair<long, double>> out;
    for (const auto& e : summary.at("diffusion").at("fid_curve")) {
        out.emplace_back(e.at("step").get<long>(), e.at("fid_proxy").get<double>());
    }
    return out;
}

void write_summary(const RecipeContext& ctx, const json& summary) {
    std::ofstream out(ctx.root / "summary.json");
    if (!out) throw FormatError("cannot write " + (ctx.root / "summary.json").string());
    out << summary.dump(2) << '\n';
}

json parity(const RecipeContext& ctx) {
    json rows = json::array();
    std::ofstream csv(ctx.root / "parity.csv");
    csv << "seed,structured_mse,baseline_mse,mse_ratio,structured_rfid,baseline_rfid\n";
    std::string owner;
    for (std::uint64_t seed : ctx.seeds()) {
        json pair;
        for (bool structured : {true, false}) {
            ExperimentConfig cfg = ae_only(ctx.derive(seed_tag(seed) + (structured ? "-structured" : "-baseline"), seed),
                                           structured);
            cfg.pipeline.prefix_curve = false;
            if (owner.empty()) owner = cfg.name;
            share_extractor(cfg, ctx, owner);
            pair[structured ? "structured" : "baseline"] = ctx.run(cfg).at("autoencoder");
        }
        const double s = pair["structured"]["heldout_mse"].get<double>();
        const double b = pair["baseline"]["heldout_mse"].get<double>();
        const json row = {{"seed", seed},
                          {"structured_mse", s},
                          {"baseline_mse", b},
                          {"mse_ratio", s / b},
                          {"structured_rfid", pair["structured"]["rfid_proxy"]},
                          {"baseline_rfid", pair["baseline"]["rfid_proxy"]}};
        csv << seed << ',' << format_metric_value(s) << ',' << format_metric_value(b) << ','
            << format_metric_value(s / b) << ',' << format_metric_value(row["structured_rfid"].get<double>()) << ','
            << format_metric_value(row["baseline_rfid"].get<double>()) << '\n';
        rows.push_back(row);
    }
    return {{"recipe", "parity"}, {"rows", rows}};
}

json prefix_curve(const RecipeContext& ctx) {
    json runs = json::array();
    std::ofstream csv(ctx.root / "prefix_curve.csv");
    csv << "seed,c_prime,mse,psnr\n";
    std::string owner;
    for (std::uint64_t seed : ctx.seeds()) {
        ExperimentConfig cfg = ae_only(ctx.derive(seed_tag(seed) + "-structured", seed), true);
        cfg.pipeline.prefix_curve = true;
        if (owner.empty()) owner = cfg.name;
        share_extractor(cfg, ctx, owner);
        const json summary = ctx.run(cfg);
        // Reconstruction grids per prefix length, from the finished run.
        RunDirectory dir = RunDirectory::open(ctx.root / cfg.name);
        Pipeline pipeline(dir, ctx.options.run);
        json grids = json::array();
        const auto& grid = cfg.eval.prefix_grid.empty() ? cfg.latent.channel_grid : cfg.eval.prefix_grid;
        for (int c_prime : grid) grids.push_back(pipeline.reconstruct(c_prime, 16));
        for (const auto& e : summary.at("autoencoder").at("prefix_curve")) {
            csv << seed << ',' << e.at("c_prime").get<int>() << ',' << format_metric_value(e.at("mse").get<double>())
                << ',' << format_metric_value(e.at("psnr").get<double>()) << '\n';
        }
        runs.push_back({{"seed", seed},
                        {"run", (ctx.root / cfg.name).string()},
                        {"prefix_curve", summary.at("autoencoder").at("prefix_curve")},
                        {"reconstructions", grids}});
    }
    return {{"recipe", "prefix-curve"}, {"runs", runs}};
}

json convergence(const RecipeContext& ctx) {
    json rows = json::array();
    std::ofstream csv(ctx.root / "convergence.csv");
    csv << "seed,baseline_final_fid,augmented_final_fid,augmented_steps_to_baseline,baseline_steps,step_ratio\n";
    std::string owner;
    for (std::uint64_t seed : ctx.seeds()) {
        ExperimentConfig ae_cfg = ae_only(ctx.derive(seed_tag(seed) + "-ae", seed), true);
        ae_cfg.pipeline.prefix_curve = false;
        if (owner.empty()) owner = ae_cfg.name;
        share_extractor(ae_cfg, ctx, owner);
        ctx.run(ae_cfg);
        const fs::path ae_ckpt = ctx.checkpoint(ae_cfg.name, "autoencoder.ckpt");
        json cells;
        for (bool augmented : {false, true}) {
            ExperimentConfig cfg =
                diffusion_on(ctx.derive(seed_tag(seed) + (augmented ? "-augmented" : "-plain"), seed), ae_ckpt, true,
                             augmented);
            share_extractor(cfg, ctx, owner);
            cells[augmented ? "augmented" : "plain"] = ctx.run(cfg).at("diffusion");
        }
        const double target = cells["plain"]["final_fid_proxy"].get<double>();
        const long reach = steps_to_reach(fid_curve({{"diffusion", cells["augmented"]}}), target);
        const long total = cells["plain"]["steps"].get<long>();
        const double ratio = reach < 0 ? -1.0 : static_cast<double>(reach) / static_cast<double>(total);
        csv << seed << ',' << format_metric_value(target) << ','
            << format_metric_value(cells["augmented"]["final_fid_proxy"].get<double>()) << ',' << reach << ','
            << total << ',' << format_metric_value(ratio) << '\n';
        rows.push_back({{"seed", seed},
                        {"baseline_final_fid", target},
                        {"augmented_final_fid", cells["augmented"]["final_fid_proxy"]},
                        {"augmented_steps_to_baseline", reach},
                        {"baseline_steps", total},
                        {"step_ratio", ratio},
                        {"plain_curve", cells["plain"]["fid_curve"]},
                        {"augmented_curve", cells["augmented"]["fid_curve"]}});
    }
    return {{"recipe", "convergence"}, {"rows", rows}};
}

json ablation(const RecipeContext& ctx) {
    json rows = json::array();
    std::ofstream csv(ctx.root / "ablation.csv");
    csv << "seed,structured,augmented,final_fid_proxy,heldout_mse,separation_score,prefix_mse_min\n";
    std::string owner;
    const int c_min = smallest_grid_entry(ctx.base);
    for (std::uint64_t seed : ctx.seeds()) {
        json seed_row = {{"seed", seed}, {"c_prime_min", c_min}};
        for (bool structured : {true, false}) {
            const std::string ae_tag = structured ? "structured" : "baseline";
            ExperimentConfig ae_cfg = ae_only(ctx.derive(seed_tag(seed) + "-ae-" + ae_tag, seed), structured);
            ae_cfg.pipeline.prefix_curve = true;
            ae_cfg.eval.prefix_grid = {c_min};
            if (owner.empty()) owner = ae_cfg.name;
            share_extractor(ae_cfg, ctx, owner);
            const json ae = ctx.run(ae_cfg).at("autoencoder");
            seed_row["autoencoder"][ae_tag] = {{"heldout_mse", ae["heldout_mse"]},
                                               {"rfid_proxy", ae["rfid_proxy"]},
                                               {"separation_score", ae["separation_score"]},
                                               {"prefix_mse_min", prefix_mse_at({{"autoencoder", ae}}, c_min)}};
            const fs::path ae_ckpt = ctx.checkpoint(ae_cfg.name, "autoencoder.ckpt");
            for (bool augmented : {true, false}) {
                const std::string cell = ae_tag + "-" + (augmented ? "augmented" : "plain");
                ExperimentConfig cfg =
                    diffusion_on(ctx.derive(seed_tag(seed) + "-" + cell, seed), ae_ckpt, structured, augmented);
                share_extractor(cfg, ctx, owner);
                const json d = ctx.run(cfg).at("diffusion");
                seed_row["cells"][cell] = {{"structured", structured},
                                           {"augmented", augmented},
                                           {"final_fid_proxy", d["final_fid_proxy"]},
                                           {"fid_curve", d["fid_curve"]}};
                csv << seed << ',' << (structured ? "on" : "off") << ',' << (augmented ? "on" : "off") << ','
                    << format_metric_value(d["final_fid_proxy"].get<double>()) << ','
                    << format_metric_value(ae["heldout_mse"].get<double>()) << ','
                    << format_metric_value(ae["separation_score"].get<double>()) << ','
                    << format_metric_value(seed_row["autoencoder"][ae_tag]["prefix_mse_min"].get<double>()) << '\n';
            }
        }
        rows.push_back(seed_row);
    }
    return {{"recipe", "ablation-2x2"}, {"rows", rows}};
}

}  // namespace

const std::vector<std::string>& recipe_names() {
    static const std::vector<std::string> names{"ablation-2x2", "convergence", "prefix-curve", "parity"};
    return names;
}

long steps_to_reach(const std::vector<std::pair<long, double>>& curve, double target) {
    for (const auto& [step, value] : curve) {
        if (value <= target) return step;
    }
    return -1;
}

json run_recipe(const std::string& name, const ExperimentConfig& base, const RecipeOptions& options) {
    const auto& names = recipe_names();
    if (std::find(names.begin(), names.end(), name) == names.end()) {
        std::string known;
        for (const auto& n : names) known += (known.empty() ? "" : ", ") + n;
        throw ConfigError("unknown recipe '" + name + "' (known: " + known + ")");
    }
    base.validate();
    RecipeContext ctx{name, base, options, fs::path(base.output_root) / name};
    fs::create_directories(ctx.root);
    json summary;
    if (name == "ablation-2x2") summary = ablation(ctx);
    else if (name == "convergence") summary = convergence(ctx);
    else if (name == "prefix-curve") summary = prefix_curve(ctx);
    else summary = parity(ctx);
    summary["root"] = ctx.root.string();
    write_summary(ctx, summary);
    return summary;
}

}  // namespace structlat
