#include "helpers.hpp"

#include "structlat/diffusion.hpp"
#include "structlat/nn/ema.hpp"

using namespace structlat;

namespace {

// Ignores its input and returns a fixed tensor.
struct FixedDenoiser final : Denoiser<double> {
    Tensor4<double> out;
    Tensor4<double> last_input;
    Tensor4<double> predict(const Tensor4<double>& xt, const std::vector<double>&, const std::vector<int>&) override {
        last_input = xt;
        return out;
    }
    void backward(const Tensor4<double>&) override {}
    void collect(nn::ParamRefs<double>&) override {}
};

// pred = W2 silu(W1 [x, t] + b1) + b2, applied per latent pixel.
struct TwoLayerStub final : Denoiser<double> {
    nn::Linear<double> l1, l2;
    nn::SiLU<double> act;
    Index n = 0, h = 0, w = 0;
    TwoLayerStub(Index c, Index hidden, Rng& rng) : l1("stub.l1", c + 1, hidden, rng), l2("stub.l2", hidden, c, rng) {}
    Tensor4<double> predict(const Tensor4<double>& xt, const std::vector<double>& t, const std::vector<int>&) override {
        n = xt.n;
        h = xt.h;
        w = xt.w;
        Mat<double> in(xt.rows(), xt.c + 1);
        in.leftCols(xt.c) = xt.values;
        for (Index b = 0; b < xt.n; ++b) in.col(xt.c).segment(b * h * w, h * w).setConstant(t[b]);
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

}  // namespace

TEST_CASE("schedule: alpha^2 + beta^2 = 1 on 1000 uniform t") {
    const NoiseSchedule s;
    Rng rng(1);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int i = 0; i < 1000; ++i) {
        const double t = u(rng);
        REQUIRE(std::abs(s.alpha(t) * s.alpha(t) + s.beta(t) * s.beta(t) - 1.0) <= 1e-9);
    }
    CHECK(s.alpha(0.0) == 1.0);
    CHECK(s.beta(0.0) == 0.0);
    CHECK(NoiseSchedule::from_name("linear").kind() == ScheduleKind::Linear);
    CHECK_THROWS_AS(NoiseSchedule::from_name("cosine-ish"), ConfigError);
}

TEST_CASE("forward diffusion limits") {
    const auto x0 = normal(2, 3, 3, 4, 2);
    const auto eps = normal(2, 3, 3, 4, 3);
    const auto near0 = forward_diffuse(x0, {1e-12, 1e-12}, eps, NoiseSchedule{});
    CHECK((near0.xt.values - x0.values).cwiseAbs().maxCoeff() < 1e-9);
    const auto near1 = forward_diffuse(x0, {1.0 - 1e-12, 1.0 - 1e-12}, eps, NoiseSchedule{});
    CHECK((near1.xt.values - eps.values).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("forward diffusion rejects t outside (0, 1) and shape mismatches") {
    const auto x0 = normal(2, 2, 2, 2, 4);
    CHECK_THROWS_AS(forward_diffuse(x0, {0.0, 0.5}, x0, NoiseSchedule{}), ArgumentError);
    CHECK_THROWS_AS(forward_diffuse(x0, {0.5, 1.0}, x0, NoiseSchedule{}), ArgumentError);
    CHECK_THROWS_AS(forward_diffuse(x0, {0.5}, x0, NoiseSchedule{}), ArgumentError);
    CHECK_THROWS_AS(forward_diffuse(x0, {0.5, 0.5}, normal(2, 2, 2, 3, 5), NoiseSchedule{}), ArgumentError);
}

TEST_CASE("forward diffusion statistics (Monte Carlo, 3 standard errors)") {
    const NoiseSchedule s;
    const Index n = 64, side = 16, c = 8;  // 131072 elements
    const double elements = static_cast<double>(n * side * side * c);
    for (double t : {0.1, 0.45, 0.8}) {
        const double a = s.alpha(t), b = s.beta(t);
        SUBCASE("zero data: variance is beta^2") {
            const auto st = forward_diffuse(Tensor4<double>(n, side, side, c), std::vector<double>(n, t),
                                            normal(n, side, side, c, 10), s);
            const double mean = st.xt.values.mean();
            const double var = (st.xt.values.array() - mean).square().sum() / (elements - 1);
            const double se = b * b * std::sqrt(2.0 / (elements - 1));
            CHECK(std::abs(var - b * b) <= 3 * se);
        }
        SUBCASE("constant data: mean is alpha x0") {
            const double xbar = 0.7;
            const auto st = forward_diffuse(Tensor4<double>::constant(n, side, side, c, xbar),
                                            std::vector<double>(n, t), normal(n, side, side, c, 11), s);
            const double mean = st.xt.values.mean();
            CHECK(std::abs(mean - a * xbar) <= 3 * b / std::sqrt(elements));
        }
    }
}

TEST_CASE("denoising loss: perfect, zero and oracle predictions") {
    SUBCASE("perfect predictor gives 0") {
        const auto st = random_state(3, 4, 20);
        FixedDenoiser stub;
        stub.out = st.eps;
        CHECK(denoising_loss<double>(stub, st, {}) == 0.0);
    }
    SUBCASE("zero predictor with unit noise gives about 1") {
        const Index n = 32, side = 16, c = 8;
        const auto st = forward_diffuse(normal(n, side, side, c, 21), std::vector<double>(n, 0.5),
                                        normal(n, side, side, c, 22), NoiseSchedule{});
        FixedDenoiser stub;
        stub.out = Tensor4<double>(n, side, side, c);
        const double elements = static_cast<double>(n * side * side * c);
        CHECK(std::abs(denoising_loss<double>(stub, st, {}) - 1.0) <= 3 * std::sqrt(2.0 / elements));
    }
    SUBCASE("matches an element loop") {
        const auto st = random_state(2, 5, 23);
        FixedDenoiser stub;
        stub.out = normal(2, 3, 3, 5, 24);
        double sum = 0;
        for (Index b = 0; b < 2; ++b)
            for (Index i = 0; i < 3; ++i)
                for (Index j = 0; j < 3; ++j)
                    for (Index k = 0; k < 5; ++k) {
                        const double d = st.eps(b, i, j, k) - stub.out(b, i, j, k);
                        sum += d * d;
                    }
        CHECK(testing::close_rel(denoising_loss<double>(stub, st, {}), sum / (2 * 9 * 5), 1e-6));
    }
}

TEST_CASE("non-finite predictions raise a numerical error naming t") {
    const auto st = random_state(2, 3, 25);
    FixedDenoiser stub;
    stub.out = st.eps;
    stub.out(1, 0, 0, 0) = std::numeric_limits<double>::infinity();
    try {
        denoising_loss<double>(stub, st, {});
        FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
        CHECK(std::string(e.what()).find("t in [") != std::string::npos);
    }
}

TEST_CASE("augmented loss") {
    SUBCASE("full mask equals the standard loss") {
        for (int trial = 0; trial < 20; ++trial) {
            const auto st = random_state(3, 6, 100 + trial);
            Rng rng(trial);
            TwoLayerStub stub(6, 5, rng);
            CHECK(augmented_denoising_loss<double>(stub, st, {}, make_prefix_mask(6, 6)) ==
                  denoising_loss<double>(stub, st, {}));
        }
    }
    SUBCASE("c' = 1 depends only on channel 0") {
        auto st = random_state(2, 4, 30);
        FixedDenoiser stub;
        stub.out = normal(2, 3, 3, 4, 31);
        const double before = augmented_denoising_loss<double>(stub, st, {}, make_prefix_mask(4, 1));
        st.eps.values.rightCols(3).setRandom();
        stub.out.values.rightCols(3).setConstant(5.0);
        CHECK(augmented_denoising_loss<double>(stub, st, {}, make_prefix_mask(4, 1)) == before);
        CHECK(stub.last_input.values.rightCols(3).norm() == 0.0);
    }
    SUBCASE("c = 4, c' = 2 matches an element loop") {
        const auto st = random_state(2, 4, 32);
        FixedDenoiser stub;
        stub.out = normal(2, 3, 3, 4, 33);
        double sum = 0;
        for (Index b = 0; b < 2; ++b)
            for (Index i = 0; i < 3; ++i)
                for (Index j = 0; j < 3; ++j)
                    for (Index k = 0; k < 2; ++k) {
                        const double d = st.eps(b, i, j, k) - stub.out(b, i, j, k);
                        sum += d * d;
                    }
        CHECK(testing::close_rel(augmented_denoising_loss<double>(stub, st, {}, make_prefix_mask(4, 2)),
                                 sum / (2 * 9 * 4), 1e-6));
        CHECK(testing::close_rel(augmented_denoising_loss<double>(stub, st, {}, make_prefix_mask(4, 2),
                                                                  MaskNormalization::KeptChannels),
                                 sum / (2 * 9 * 2), 1e-6));
    }
    SUBCASE("a perfect predictor stays at zero for every c'") {
        const auto st = random_state(2, 8, 34);
        FixedDenoiser stub;
        stub.out = st.eps;
        for (int cp = 1; cp <= 8; ++cp) CHECK(augmented_denoising_loss<double>(stub, st, {}, make_prefix_mask(8, cp)) == 0.0);
    }
    SUBCASE("mask channel mismatch") {
        const auto st = random_state(1, 4, 35);
        FixedDenoiser stub;
        stub.out = st.eps;
        CHECK_THROWS_AS(augmented_denoising_loss<double>(stub, st, {}, make_prefix_mask(5, 2)), ArgumentError);
    }
}

TEST_CASE("zero predictor: E[augmented loss] = c'/c under all-channel normalization") {
    const Index c = 8;
    FixedDenoiser stub;
    for (int cp : {1, 3, 6}) {
        std::vector<double> draws;
        for (int r = 0; r < 400; ++r) {
            const auto st = random_state(2, c, 1000 + r);
            stub.out = Tensor4<double>(2, 3, 3, c);
            draws.push_back(augmented_denoising_loss<double>(stub, st, {}, make_prefix_mask(c, cp)));
        }
        double mean = 0, var = 0;
        for (double d : draws) mean += d / draws.size();
        for (double d : draws) var += (d - mean) * (d - mean) / (draws.size() - 1);
        const double se = std::sqrt(var / draws.size());
        CHECK(std::abs(mean - static_cast<double>(cp) / c) <= 3 * se);
    }
}

TEST_CASE("masked-out prediction channels get exactly zero gradient; the rest match finite differences") {
    for (int trial = 0; trial < 5; ++trial) {
        const Index c = 6;
        const int cp = 1 + trial;
        const auto st = random_state(2, c, 200 + trial);
        const auto mask = make_prefix_mask(static_cast<int>(c), cp);
        Rng rng(300 + trial);
        TwoLayerStub stub(c, 7, rng);
        Tensor4<double> pred = stub.predict(apply_channel_mask(st.xt, mask), st.t, {});
        const auto lg = masked_mse(st.eps, pred, &mask);
        CHECK(lg.grad.values.rightCols(c - cp).cwiseAbs().maxCoeff() == 0.0);
        const double h = 1e-6;
        int bad = 0;
        for (Index i = 0; i < pred.size(); ++i) {
            const double saved = pred.values.data()[i];
            pred.values.data()[i] = saved + h;
            const double up = masked_mse(st.eps, pred, &mask).value;
            pred.values.data()[i] = saved - h;
            const double down = masked_mse(st.eps, pred, &mask).value;
            pred.values.data()[i] = saved;
            const double numeric = (up - down) / (2 * h);
            const double analytic = lg.grad.values.data()[i];
            if ((i % c) >= cp) {
                if (numeric != 0.0 || analytic != 0.0) ++bad;
            } else if (!testing::close_rel(analytic, numeric, 1e-4, 1e-10)) {
                ++bad;
            }
        }
        CHECK(bad == 0);

        auto params = [&] {
            nn::ParamRefs<double> p;
            stub.collect(p);
            return p;
        }();
        nn::zero_grads(params);
        stub.predict(apply_channel_mask(st.xt, mask), st.t, {});
        stub.backward(lg.grad);
        const auto analytic = testing::grads_of(params);
        const auto loss = [&] { return augmented_denoising_loss<double>(stub, st, {}, mask); };
        const auto r = testing::check_param_gradients(params, analytic, loss, 6, 400 + trial);
        CHECK(r.failed == 0);
    }
}

TEST_CASE("trainer: augmented=false equals augmented=true with grid [c]") {
    const LatentSpec spec{8, 4, {4}};
    DenoiserArch arch{16, 1, 2, 2, 3};
    Rng ra(1), rb(1);
    TransformerDenoiser<double> a(arch, 4, 4, ra);
    TransformerDenoiser<double> b(arch, 4, 4, rb);
    DiffusionTrainOptions oa;
    oa.augmented = true;
    DiffusionTrainOptions ob = oa;
    ob.augmented = false;
    DiffusionTrainer<double> ta(a, spec, NoiseSchedule{}, oa, 3);
    DiffusionTrainer<double> tb(b, spec, NoiseSchedule{}, ob, 3);
    const auto x0 = normal(4, 2, 2, 4, 40);
    const std::vector<int> labels{0, 1, 2, 0};
    for (int s = 0; s < 4; ++s) {
        Rng r1 = derive_rng(0, 7, s), r2 = derive_rng(0, 7, s);
        CHECK(ta.step(x0, labels, r1).loss == tb.step(x0, labels, r2).loss);
    }
}

TEST_CASE("trainer: fixed seed gives a reproducible loss trajectory") {
    auto trace = [] {
        const LatentSpec spec{8, 4, {2, 4}};
        Rng init(2);
        TransformerDenoiser<float> net(DenoiserArch{16, 1, 2, 2, 3}, 4, 4, init);
        DiffusionTrainer<float> trainer(net, spec, NoiseSchedule{}, DiffusionTrainOptions{}, 3);
        Tensor4<float> x0(4, 2, 2, 4);
        Rng data(3);
        fill_normal(x0, data);
        std::vector<std::pair<int, double>> out;
        for (int s = 0; s < 5; ++s) {
            Rng rng = derive_rng(9, 1, s);
            const auto r = trainer.step(x0, {0, 1, 2, 0}, rng);
            out.emplace_back(r.c_prime, r.loss);
        }
        return out;
    };
    CHECK(trace() == trace());
}

TEST_CASE("transformer denoiser gradients match finite differences") {
    for (bool precondition : {true, false}) {
        DenoiserArch arch{8, 2, 2, 2, 3};
        arch.precondition = precondition;
        Rng init(5);
        TransformerDenoiser<double> net(arch, 4, 3, init);
        Tensor4<double> xt = normal(2, 2, 2, 3, 51), eps = normal(2, 2, 2, 3, 52);
        const std::vector<double> t{0.3, 0.7};
        const std::vector<int> labels{1, 3};
        const auto mask = make_prefix_mask(3, 2);
        nn::ParamRefs<double> params;
        net.collect(params);
        nn::zero_grads(params);
        const auto pred = net.predict(apply_channel_mask(xt, mask), t, labels);
        net.backward(masked_mse(eps, pred, &mask).grad);
        const auto analytic = testing::grads_of(params);
        const auto loss = [&] {
            return masked_mse(eps, net.predict(apply_channel_mask(xt, mask), t, labels), &mask).value;
        };
        const auto r = testing::check_param_gradients(params, analytic, loss, 3, 53);
        CHECK_MESSAGE(r.checked > 30, "precondition " << precondition);
        CHECK_MESSAGE(r.failed == 0, "precondition " << precondition);
    }
}

TEST_CASE("sampler: one step with a zero-output stub is the closed-form map") {
    FixedDenoiser stub;
    stub.out = Tensor4<double>(3, 2, 2, 4);
    const NoiseSchedule s;
    const double t_max = 1.0 - 1e-3;
    Rng rng(60);
    const auto out = sample_latents<double>(stub, 2, 2, 4, s, 3, {}, 1, rng, t_max);
    Rng replay(60);
    Tensor4<double> noise(3, 2, 2, 4);
    fill_normal(noise, replay);
    // x0_hat = x / alpha(t_max); x <- alpha(0) x0_hat + beta(0) * 0.
    const Mat<double> expected = noise.values / s.alpha(t_max);
    CHECK((out.values - expected).cwiseAbs().maxCoeff() <= 1e-12 * expected.cwiseAbs().maxCoeff());
    const auto times = sampler_times(4, 0.8);
    REQUIRE(times.size() == 5);
    for (int i = 0; i < 5; ++i) CHECK(times[i] == doctest::Approx(0.8 - 0.2 * i).epsilon(1e-12));
    CHECK(times.back() == 0.0);
}

TEST_CASE("sampler: deterministic for a seed and shaped [n, h, w, c]") {
    DiffusionModel<float> model(LatentSpec{8, 4, {2, 4}}, DenoiserArch{16, 1, 2, 2, 3}, 2, 3, 7);
    const std::vector<int> labels{0, 1, 2, 3, 0};
    Rng a(8), b(8);
    const auto x = sample_latents(model, NoiseSchedule{}, 5, labels, 3, a);
    const auto y = sample_latents(model, NoiseSchedule{}, 5, labels, 3, b);
    CHECK(x.data.values == y.data.values);
    CHECK(x.data.shape_string() == "[5, 2, 3, 4]");
    Rng c(8);
    CHECK_THROWS_AS(sample_latents(model, NoiseSchedule{}, 5, labels, 0, c), ArgumentError);
    CHECK_THROWS_AS(sample_latents(model, NoiseSchedule{}, 4, labels, 2, c), ArgumentError);
}

TEST_CASE("preconditioned denoiser starts at the best linear noise estimate") {
    // For unit-variance x0 the least-squares slope of eps on x_t is
    // E[eps x_t] / E[x_t^2]; at initialization the output head is zero, so
    // the prediction must be that slope times x_t.
    for (const char* name : {"trig", "linear"}) {
        const NoiseSchedule s = NoiseSchedule::from_name(name);
        Rng init(8);
        DenoiserArch arch{16, 1, 2, 2, 3};
        TransformerDenoiser<double> net(arch, 4, 4, init, s);
        for (double t : {0.05, 0.5, 0.95, 0.999}) {
            const Index n = 4000;
            const auto x0 = normal(n, 2, 2, 4, 60), eps = normal(n, 2, 2, 4, 61);
            const auto st = forward_diffuse(x0, std::vector<double>(n, t), eps, s);
            const double slope = (eps.values.array() * st.xt.values.array()).sum() / st.xt.values.squaredNorm();
            const auto small = gather_samples(st.xt, std::vector<Index>{0, 1});
            const auto pred = net.predict(small, {t, t}, {});
            const double k = pred.values(0, 0) / small.values(0, 0);
            CHECK_MESSAGE(std::abs(k - slope) <= 0.01, name << " t=" << t << " slope " << slope << " k " << k);
            CHECK((pred.values - k * small.values).cwiseAbs().maxCoeff() <= 1e-12);
        }
    }
}

TEST_CASE("weight average follows the ramped decay") {
    nn::Param<double> src{"p", Mat<double>::Constant(2, 3, 2.0)};
    nn::Param<double> dst{"p", Mat<double>::Constant(2, 3, -1.0)};
    nn::Ema<double> ema({&src}, {&dst}, 0.9);
    // Constant source: the gap to it shrinks by the product of the per-step decays.
    double gap = -3.0;
    for (int n = 0; n < 40; ++n) {
        ema.update();
        gap *= std::min(0.9, (1.0 + n) / (10.0 + n));
        CHECK(dst.value(1, 2) == doctest::Approx(2.0 + gap).epsilon(1e-12));
    }
    CHECK(ema.updates() == 40);
    CHECK(ema.current_decay() == doctest::Approx(41.0 / 50.0));

    nn::Param<double> copy{"p", Mat<double>::Zero(2, 3)};
    nn::Ema<double> none({&src}, {&copy}, 0.0);
    none.update();
    CHECK(copy.value == src.value);

    nn::Param<double> wrong{"p", Mat<double>::Zero(3, 2)};
    CHECK_THROWS_AS(nn::Ema<double>({&src}, {&wrong}, 0.9), ArgumentError);
    CHECK_THROWS_AS(nn::Ema<double>({&src}, {&dst}, 1.0), ArgumentError);
    CHECK_THROWS_AS(nn::Ema<double>({&src}, {}, 0.9), ArgumentError);
}
