// Acceptance criteria 1-9. Prints one PASS/FAIL line per criterion and exits
// nonzero if any fails.
#include "structlat/analysis.hpp"
#include "structlat/config.hpp"
#include "structlat/diffusion.hpp"
#include "structlat/metrics.hpp"
#include "structlat/run.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <sys/wait.h>

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

using namespace structlat;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

// pred = W2 silu(W1 [x, t] + b1) + b2 per latent pixel.
struct TwoLayerStub final : Denoiser<double> {
    nn::Linear<double> l1, l2;
    nn::SiLU<double> act;
    TwoLayerStub(Index c, Index hidden, Rng& rng) : l1("stub.l1", c + 1, hidden, rng), l2("stub.l2", hidden, c, rng) {}
    Tensor4<double> predict(const Tensor4<double>& xt, const std::vector<double>& t, const std::vector<int>&) override {
        Mat<double> in(xt.rows(), xt.c + 1);
        in.leftCols(xt.c) = xt.values;
        const Index hw = xt.h * xt.w;
        for (Index b = 0; b < xt.n; ++b) in.col(xt.c).segment(b * hw, hw).setConstant(t[static_cast<std::size_t>(b)]);
        Tensor4<double> out(xt.n, xt.h, xt.w, xt.c);
        out.values = l2.forward(act.forward(l1.forward(in)));
        return out;
    }
    void backward(const Tensor4<double>& dpred) override { l1.backward(act.backward(l2.backward(dpred.values))); }
    void collect(nn::ParamRefs<double>& out) override {
        l1.collect(out);
        l2.collect(out);
    }
};

Tensor4<double> normal(Index n, Index h, Index w, Index c, std::uint64_t seed) {
    Tensor4<double> t(n, h, w, c);
    Rng rng(seed);
    fill_normal(t, rng);
    return t;
}

DiffusionBatchState<double> random_state(Index n, Index c, std::uint64_t seed) {
    Rng rng(seed);
    std::uniform_real_distribution<double> u(0.01, 0.99);
    std::vector<double> t(static_cast<std::size_t>(n));
    for (auto& v : t) v = u(rng);
    return forward_diffuse(normal(n, 3, 3, c, seed + 1), t, normal(n, 3, 3, c, seed + 2), NoiseSchedule{});
}

bool close_rel(double a, double b, double rel, double abs_floor) {
    return std::abs(a - b) <= rel * std::max(std::abs(a), std::abs(b)) + abs_floor;
}

std::string fmt(double v) {
    std::ostringstream s;
    s.precision(4);
    s << v;
    return s.str();
}

Outcome exact_identities() {
    double worst = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const Index c = 2 + trial % 7;
        const auto st = random_state(3, c, 1000 + static_cast<std::uint64_t>(trial));
        Rng rng(static_cast<std::uint64_t>(trial));
        TwoLayerStub stub(c, 5, rng);
        const double a = augmented_denoising_loss<double>(stub, st, {}, make_prefix_mask(static_cast<int>(c),
                                                                                         static_cast<int>(c)));
        const double b = denoising_loss<double>(stub, st, {});
        worst = std::max(worst, std::abs(a - b) / std::max(std::abs(b), 1e-300));
    }
    const LatentSpec spec{4, 8, {8}};
    const AutoencoderArch arch{4, 8, 1};
    AutoencoderModel<double> ma(spec, arch, 6), mb(spec, arch, 6);
    AeTrainOptions oa;
    oa.weights = {1.0, 0.0, 0.0};
    oa.structured = true;
    AeTrainOptions ob = oa;
    ob.structured = false;
    AutoencoderTrainer<double> ta(ma, oa), tb(mb, ob);
    Tensor4<double> x(4, 16, 16, 3);
    Rng data(16);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (Index i = 0; i < x.size(); ++i) x.values.data()[i] = u(data);
    double ae_worst = 0;
    for (int s = 0; s < 3; ++s) {
        Rng ra = derive_rng(0, 1, static_cast<std::uint64_t>(s));
        Rng rb = derive_rng(0, 1, static_cast<std::uint64_t>(s));
        const double la = ta.step(x, ra).loss.total;
        const double lb = tb.step(x, rb).loss.total;
        ae_worst = std::max(ae_worst, std::abs(la - lb) / std::abs(lb));
    }
    return {worst <= 1e-12 && ae_worst <= 1e-9,
            "loss identity worst rel " + fmt(worst) + ", AE step worst rel " + fmt(ae_worst)};
}

Outcome gradient_null_space() {
    long nonzero = 0, fd_bad = 0, fd_checked = 0;
    for (int trial = 0; trial < 20; ++trial) {
        const Index c = 4 + trial % 5;
        const int cp = 1 + trial % static_cast<int>(c);
        const auto st = random_state(2, c, 2000 + static_cast<std::uint64_t>(trial));
        const auto mask = make_prefix_mask(static_cast<int>(c), cp);
        Rng rng(3000 + static_cast<std::uint64_t>(trial));
        TwoLayerStub stub(c, 6, rng);
        Tensor4<double> pred = stub.predict(apply_channel_mask(st.xt, mask), st.t, {});
        const auto lg = masked_mse(st.eps, pred, &mask);
        for (Index r = 0; r < pred.rows(); ++r)
            for (Index k = cp; k < c; ++k) nonzero += lg.grad.values(r, k) != 0.0;
        const double h = 1e-6;
        for (Index i = 0; i < pred.size(); ++i) {
            const double saved = pred.values.data()[i];
            pred.values.data()[i] = saved + h;
            const double up = masked_mse(st.eps, pred, &mask).value;
            pred.values.data()[i] = saved - h;
            const double down = masked_mse(st.eps, pred, &mask).value;
            pred.values.data()[i] = saved;
            ++fd_checked;
            fd_bad += !close_rel(lg.grad.values.data()[i], (up - down) / (2 * h), 1e-4, 1e-10);
        }
        nn::ParamRefs<double> params;
        stub.collect(params);
        nn::zero_grads(params);
        stub.predict(apply_channel_mask(st.xt, mask), st.t, {});
        stub.backward(lg.grad);
        for (auto* p : params) {
            const Mat<double> analytic = p->grad;
            for (Index i = 0; i < p->value.size(); ++i) {
                const double saved = p->value.data()[i];
                p->value.data()[i] = saved + h;
                const double up = augmented_denoising_loss<double>(stub, st, {}, mask);
                p->value.data()[i] = saved - h;
                const double down = augmented_denoising_loss<double>(stub, st, {}, mask);
                p->value.data()[i] = saved;
                ++fd_checked;
                fd_bad += !close_rel(analytic.data()[i], (up - down) / (2 * h), 1e-4, 1e-9);
            }
        }
    }
    return {nonzero == 0 && fd_bad == 0, std::to_string(nonzero) + " nonzero masked gradients, " +
                                             std::to_string(fd_bad) + "/" + std::to_string(fd_checked) +
                                             " finite-difference mismatches"};
}

Outcome forward_statistics() {
    const NoiseSchedule s;
    const Index n = 64, side = 16, c = 8;
    const double elements = static_cast<double>(n * side * side * c);
    const Tensor4<double> x0 = normal(n, side, side, c, 5);
    const double x0_mean = x0.values.mean();
    bool ok = true;
    double worst_z = 0;
    for (double t : {0.05, 0.3, 0.5, 0.7, 0.95}) {
        const double a = s.alpha(t), b = s.beta(t);
        const auto st = forward_diffuse(x0, std::vector<double>(static_cast<std::size_t>(n), t),
                                        normal(n, side, side, c, 6 + static_cast<std::uint64_t>(100 * t)), s);
        const double mean = st.xt.values.mean();
        const double z_mean = std::abs(mean - a * x0_mean) / (b / std::sqrt(elements));
        const Eigen::ArrayXXd resid = st.xt.values.array() - a * x0.values.array();
        const double rm = resid.mean();
        const double var = (resid - rm).square().sum() / (elements - 1);
        const double z_var = std::abs(var - b * b) / (b * b * std::sqrt(2.0 / (elements - 1)));
        worst_z = std::max({worst_z, z_mean, z_var});
        ok = ok && z_mean <= 3 && z_var <= 3;
    }
    double identity = 0;
    for (int i = 0; i <= 1000; ++i) {
        const double t = i / 1000.0;
        identity = std::max(identity, std::abs(s.alpha(t) * s.alpha(t) + s.beta(t) * s.beta(t) - 1.0));
    }
    ok = ok && identity <= 1e-9;
    return {ok, fmt(elements) + " elements, worst |z| " + fmt(worst_z) + ", max |a^2+b^2-1| " + fmt(identity)};
}

Outcome frechet_oracle() {
    Rng rng(11);
    std::uniform_real_distribution<double> u(0.05, 3.0);
    std::normal_distribution<double> g;
    double worst = 0, asym = 0, self = 0;
    for (int trial = 0; trial < 50; ++trial) {
        const Index d = 2 + static_cast<Index>(rng() % 10);
        FrechetStats a, b;
        a.mean.resize(d);
        b.mean.resize(d);
        Eigen::VectorXd va(d), vb(d);
        double expected = 0;
        for (Index i = 0; i < d; ++i) {
            a.mean(i) = g(rng);
            b.mean(i) = g(rng);
            va(i) = u(rng);
            vb(i) = u(rng);
            expected += std::pow(a.mean(i) - b.mean(i), 2) + std::pow(std::sqrt(va(i)) - std::sqrt(vb(i)), 2);
        }
        a.cov = va.asDiagonal();
        b.cov = vb.asDiagonal();
        a.n = b.n = 100;
        worst = std::max(worst, std::abs(frechet_distance(a, b) - expected));
        asym = std::max(asym, std::abs(frechet_distance(a, b) - frechet_distance(b, a)));
        self = std::max(self, std::abs(frechet_distance(a, a)));
    }
    return {worst <= 1e-6 && asym <= 1e-9 && self <= 1e-9,
            "worst |d - closed form| " + fmt(worst) + ", asymmetry " + fmt(asym) + ", self " + fmt(self)};
}

int majority(int n) { return n / 2 + 1; }

std::vector<std::pair<long, double>> curve_of(const json& cell) {
    std::vector<std::pair<long, double>> out;
    for (const auto& e : cell.at("fid_curve")) out.emplace_back(e.at("step").get<long>(), e.at("fid_proxy").get<double>());
    return out;
}

struct DesktopResults {
    Outcome parity, structure, convergence, ablation;
};

DesktopResults ablation_criteria(const json& summary) {
    DesktopResults r;
    const json& rows = summary.at("rows");
    const int seeds = static_cast<int>(rows.size());
    int parity = 0, prefix = 0, separation = 0, faster = 0, best = 0;
    std::string dp, ds, dc, da;
    for (const auto& row : rows) {
        const std::string seed = std::to_string(row.at("seed").get<int>());
        const json& s = row.at("autoencoder").at("structured");
        const json& b = row.at("autoencoder").at("baseline");

        const double mse_ratio = s.at("heldout_mse").get<double>() / b.at("heldout_mse").get<double>();
        parity += std::abs(mse_ratio - 1.0) <= 0.10;
        dp += " s" + seed + ":" + fmt(mse_ratio);

        const double prefix_ratio = s.at("prefix_mse_min").get<double>() / b.at("prefix_mse_min").get<double>();
        prefix += prefix_ratio <= 0.6;
        const double ss = s.at("separation_score").get<double>(), bs = b.at("separation_score").get<double>();
        separation += ss > bs;
        ds += " s" + seed + ": ratio " + fmt(prefix_ratio) + " sep " + fmt(ss) + " vs " + fmt(bs) + ";";

        const json& cells = row.at("cells");
        const auto plain = curve_of(cells.at("structured-plain"));
        const auto aug = curve_of(cells.at("structured-augmented"));
        const double target = cells.at("structured-plain").at("final_fid_proxy").get<double>();
        const long reached = steps_to_reach(aug, target);
        const double step_ratio = reached < 0 ? -1.0 : static_cast<double>(reached) / plain.back().first;
        faster += reached >= 0 && step_ratio <= 0.7;
        dc += " s" + seed + ":" + (reached < 0 ? std::string("never") : fmt(step_ratio));

        std::string winner;
        double lowest = std::numeric_limits<double>::infinity();
        for (const auto& [name, cell] : cells.items()) {
            const double f = cell.at("final_fid_proxy").get<double>();
            if (f < lowest) {
                lowest = f;
                winner = name;
            }
        }
        best += winner == "structured-augmented";
        da += " s" + seed + ":" + winner + "(" + fmt(lowest) + ")";
    }
    r.parity = {parity >= majority(seeds), std::to_string(parity) + "/" + std::to_string(seeds) +
                                                " within 10%; structured/baseline MSE" + dp};
    r.structure = {prefix >= majority(seeds) && separation == seeds,
                   std::to_string(prefix) + "/" + std::to_string(seeds) + " prefix ratio <= 0.6, " +
                       std::to_string(separation) + "/" + std::to_string(seeds) + " separation;" + ds};
    r.convergence = {faster >= majority(seeds), std::to_string(faster) + "/" + std::to_string(seeds) +
                                                    " reach the plain final FID proxy in <= 0.7x steps;" + dc};
    r.ablation = {best >= 2, std::to_string(best) + "/" + std::to_string(seeds) + " best cell;" + da};
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Outcome end_to_end(const fs::path& work, const std::string& preset) {
    const fs::path root = work / "clean";
    fs::remove_all(root);
    fs::create_directories(root);
    const auto start = std::chrono::steady_clock::now();
    const std::string cmd = std::string(STRUCTLAT_CLI) + " run-recipe prefix-curve --preset " + preset +
                            " --output-root " + root.string() + " > " + (root / "stdout.json").string() + " 2> " +
                            (root / "stderr.log").string();
    const int status = std::system(cmd.c_str());
    const double minutes = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() / 60.0;
    if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) {
        return {false, "CLI exited with status " + std::to_string(WEXITSTATUS(status)) + "; see " +
                           (root / "stderr.log").string()};
    }
    const json summary = json::parse(slurp(root / "prefix-curve" / "summary.json"));
    const json& run = summary.at("runs").at(0);
    const fs::path dir = run.at("run").get<std::string>();
    std::vector<std::string> missing;
    for (const char* f : {"metrics.csv", "summary.json", "samples/dataset.png", "samples/reconstruction.png"})
        if (!fs::exists(dir / f)) missing.push_back(f);
    for (const auto& g : run.at("reconstructions"))
        if (!fs::exists(dir / g.at("file").get<std::string>())) missing.push_back(g.at("file").get<std::string>());
    const bool finetuned = json::parse(slurp(dir / "summary.json")).at("autoencoder").at("prefix_curve_finetuned");
    const json& curve = run.at("prefix_curve");
    bool monotone = true;
    std::string values;
    for (std::size_t i = 0; i < curve.size(); ++i) {
        const double mse = curve[i].at("mse").get<double>();
        values += " " + std::to_string(curve[i].at("c_prime").get<int>()) + ":" + fmt(mse);
        if (i > 0) monotone = monotone && mse <= 1.05 * curve[i - 1].at("mse").get<double>();
    }
    const bool ok = missing.empty() && finetuned && monotone && curve.size() >= 2 && minutes <= 120;
    std::string detail = fmt(minutes) + " min; curve" + values;
    if (!missing.empty()) detail += "; missing " + missing.front();
    if (!finetuned) detail += "; curve not fine-tuned";
    return {ok, detail};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance criteria"};
    std::string work_dir = "acceptance-runs";
    std::string preset = "default";
    std::vector<int> only;
    std::vector<std::uint64_t> seeds{0, 1, 2};
    bool reuse = false;
    app.add_option("--work-dir", work_dir, "directory for run outputs");
    app.add_option("--preset", preset, "configuration preset for criteria 5-9");
    app.add_option("--only", only, "criteria to run (default: all)")->delimiter(',');
    app.add_option("--seeds", seeds, "seeds for criteria 5-8")->delimiter(',');
    app.add_flag("--reuse", reuse, "keep finished runs from an earlier invocation");
    CLI11_PARSE(app, argc, argv);

    const std::set<int> selected = only.empty() ? std::set<int>{1, 2, 3, 4, 5, 6, 7, 8, 9}
                                                : std::set<int>(only.begin(), only.end());
    const fs::path work = fs::absolute(work_dir);
    fs::create_directories(work);
    int failures = 0;
    auto report = [&](int id, const std::string& name, const Outcome& o) {
        std::cout << "criterion " << id << " (" << name << "): " << (o.pass ? "PASS" : "FAIL") << "  " << o.detail
                  << std::endl;
        failures += !o.pass;
    };
    auto guarded = [&](int id, const std::string& name, const std::function<Outcome()>& f) {
        if (!selected.contains(id)) return;
        try {
            report(id, name, f());
        } catch (const std::exception& e) {
            report(id, name, {false, std::string("error: ") + e.what()});
        }
    };

    guarded(1, "exact identities", exact_identities);
    guarded(2, "gradient null space", gradient_null_space);
    guarded(3, "forward diffusion statistics", forward_statistics);
    guarded(4, "frechet oracle", frechet_oracle);

    if (selected.contains(5) || selected.contains(6) || selected.contains(7) || selected.contains(8)) {
        DesktopResults r;
        try {
            ExperimentConfig base = preset_config(preset);
            base.output_root = (work / "runs").string();
            if (!reuse) fs::remove_all(work / "runs");
            RecipeOptions options;
            options.seeds = seeds;
            options.run.log = &std::cerr;
            r = ablation_criteria(run_recipe("ablation-2x2", base, options));
        } catch (const std::exception& e) {
            const Outcome failed{false, std::string("error: ") + e.what()};
            r = {failed, failed, failed, failed};
        }
        if (selected.contains(5)) report(5, "reconstruction parity", r.parity);
        if (selected.contains(6)) report(6, "prefix structure", r.structure);
        if (selected.contains(7)) report(7, "convergence", r.convergence);
        if (selected.contains(8)) report(8, "2x2 ablation", r.ablation);
    }
    guarded(9, "end-to-end prefix curve", [&] { return end_to_end(work, preset); });

    std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
    return failures == 0 ? 0 : 1;
}
