#include "helpers.hpp"

#include "structlat/analysis.hpp"
#include "structlat/shapes.hpp"

using namespace structlat;
using testing::random_images;

namespace {

Tensor4<double> normal(Index n, Index h, Index w, Index c, std::uint64_t seed) {
    Tensor4<double> t(n, h, w, c);
    Rng rng(seed);
    fill_normal(t, rng);
    return t;
}

ChannelStats stats_with_fractions(const std::vector<double>& f) {
    ChannelStats s;
    s.low_freq_fraction = Eigen::Map<const Eigen::VectorXd>(f.data(), static_cast<Index>(f.size()));
    s.mean = s.variance = s.energy = Eigen::VectorXd::Zero(s.low_freq_fraction.size());
    return s;
}

}  // namespace

TEST_CASE("channel average map") {
    SUBCASE("two channels give their mean") {
        const auto z = normal(2, 3, 4, 2, 1);
        const auto m = channel_average_map(z);
        CHECK(m.c == 1);
        for (Index r = 0; r < z.rows(); ++r) CHECK(m.values(r, 0) == (z.values(r, 0) + z.values(r, 1)) / 2);
    }
    SUBCASE("constant latent gives a constant map") {
        const auto m = channel_average_map(Tensor4<double>::constant(2, 3, 3, 5, 0.75));
        CHECK((m.values.array() == 0.75).all());
    }
    SUBCASE("c = 8 matches an element loop exactly") {
        const auto z = normal(3, 4, 4, 8, 2);
        const auto m = channel_average_map(z);
        bool exact = true;
        for (Index b = 0; b < z.n; ++b)
            for (Index i = 0; i < z.h; ++i)
                for (Index j = 0; j < z.w; ++j) {
                    double s = 0;
                    for (Index k = 0; k < 8; ++k) s += z(b, i, j, k);
                    exact = exact && m(b, i, j, 0) == s / 8;
                }
        CHECK(exact);
    }
    SUBCASE("commutes with batching") {
        const auto z = normal(5, 3, 3, 6, 3);
        const auto whole = channel_average_map(z);
        std::vector<Tensor4<double>> parts;
        for (Index b = 0; b < z.n; ++b) parts.push_back(channel_average_map(gather_samples(z, std::vector<Index>{b})));
        CHECK(concat_samples(parts).values == whole.values);
    }
}

TEST_CASE("per-channel stats: all-zero latents") {
    const auto s = per_channel_stats(std::vector<Tensor4<double>>{Tensor4<double>(3, 4, 4, 5)});
    CHECK(s.mean.norm() == 0.0);
    CHECK(s.variance.norm() == 0.0);
    CHECK((s.low_freq_fraction.array() == 1.0).all());
    CHECK(s.count == 48);
}

TEST_CASE("per-channel stats: constant plus checkerboard has a two-point spectrum") {
    // v + a (-1)^(i+j) on 8 x 8: DC energy (64 v)^2, Nyquist-corner energy (64 a)^2.
    // With cutoff 2 the corner (radius 4 sqrt 2) is high frequency.
    const double v = 0.6, a = 0.35;
    Tensor4<double> z(2, 8, 8, 1);
    for (Index b = 0; b < 2; ++b)
        for (Index i = 0; i < 8; ++i)
            for (Index j = 0; j < 8; ++j) z(b, i, j, 0) = v + a * (((i + j) % 2) ? -1.0 : 1.0);
    const auto s = per_channel_stats(std::vector<Tensor4<double>>{z});
    CHECK(s.cutoff == 2.0);
    CHECK(s.low_freq_fraction(0) == doctest::Approx(v * v / (v * v + a * a)).epsilon(1e-12));
    CHECK(s.mean(0) == doctest::Approx(v).epsilon(1e-12));
    CHECK(s.variance(0) == doctest::Approx(a * a).epsilon(1e-12));
}

TEST_CASE("per-channel stats: a low-frequency wave sits inside the band") {
    Tensor4<double> z(1, 8, 8, 1);
    for (Index i = 0; i < 8; ++i)
        for (Index j = 0; j < 8; ++j) z(0, i, j, 0) = std::cos(2 * std::numbers::pi * j / 8.0);
    const auto s = per_channel_stats(std::vector<Tensor4<double>>{z});
    CHECK(s.low_freq_fraction(0) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("per-channel stats are invariant to dataset order and sharding") {
    const auto z = normal(6, 4, 4, 3, 4);
    const auto a = per_channel_stats(std::vector<Tensor4<double>>{z});
    const auto perm = gather_samples(z, std::vector<Index>{4, 1, 5, 0, 3, 2});
    const auto b = per_channel_stats(std::vector<Tensor4<double>>{gather_samples(perm, std::vector<Index>{0, 1}),
                                                                  gather_samples(perm, std::vector<Index>{2, 3, 4, 5})});
    CHECK((a.mean - b.mean).cwiseAbs().maxCoeff() < 1e-14);
    CHECK((a.variance - b.variance).cwiseAbs().maxCoeff() < 1e-14);
    CHECK((a.low_freq_fraction - b.low_freq_fraction).cwiseAbs().maxCoeff() < 1e-14);
    ChannelStatsAccumulator x, y;
    x.add(gather_samples(z, std::vector<Index>{0, 1, 2}));
    y.add(gather_samples(z, std::vector<Index>{3, 4, 5}));
    x.merge(y);
    CHECK((x.finish().energy - a.energy).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("property: total energy equals the summed mean square") {
    for (int trial = 0; trial < 10; ++trial) {
        const auto z = normal(3, 4 + trial % 3, 4, 5, 50 + trial);
        const auto s = per_channel_stats(std::vector<Tensor4<double>>{z});
        const double direct = z.values.squaredNorm() / static_cast<double>(z.rows());
        CHECK(testing::close_rel(s.energy.sum(), direct, 1e-6));
    }
}

TEST_CASE("per-channel stats errors") {
    CHECK_THROWS_AS(per_channel_stats(std::vector<Tensor4<double>>{}), ArgumentError);
    CHECK_THROWS_AS(per_channel_stats(std::vector<Tensor4<double>>{Tensor4<double>(1, 2, 2, 3),
                                                                   Tensor4<double>(1, 2, 2, 4)}),
                    ArgumentError);
}

TEST_CASE("separation score") {
    CHECK(structure_separation_score(stats_with_fractions(std::vector<double>(8, 0.5)), 0.25) == 0.0);
    CHECK(std::abs(structure_separation_score(stats_with_fractions(std::vector<double>(8, 0.4)), 0.25)) < 1e-15);
    CHECK(structure_separation_score(stats_with_fractions({1, 1, 0, 0, 0, 0, 0, 0}), 0.25) == 1.0);
    CHECK_THROWS_AS(structure_separation_score(stats_with_fractions({1, 0}), 1.0), ArgumentError);
    CHECK_THROWS_AS(structure_separation_score(stats_with_fractions({1}), 0.5), ArgumentError);
}

TEST_CASE("property: separation score is antisymmetric under channel reversal") {
    Rng rng(7);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 50; ++trial) {
        const int c = 2 * (1 + static_cast<int>(rng() % 10));
        std::vector<double> f(static_cast<std::size_t>(c));
        for (auto& v : f) v = u(rng);
        std::vector<double> r(f.rbegin(), f.rend());
        CHECK(structure_separation_score(stats_with_fractions(f), 0.5) ==
              doctest::Approx(-structure_separation_score(stats_with_fractions(r), 0.5)).epsilon(1e-12));
    }
}

TEST_CASE("separation score of untrained autoencoders is near zero") {
    SyntheticShapesSpec spec;
    spec.size = 200;
    const ImageDataset data = generate_shapes(spec);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        AutoencoderModel<float> model(LatentSpec::with_default_grid(8, 16), AutoencoderArch{}, seed);
        const auto z = encode_all(model, data.images);
        const double score = structure_separation_score(per_channel_stats(std::vector<Tensor4<float>>{z}), 0.25);
        CHECK_MESSAGE(std::abs(score) <= 0.1, "seed " << seed << " score " << score);
    }
}

TEST_CASE("prefix curve") {
    SyntheticShapesSpec spec;
    spec.image_size = 16;
    spec.size = 300;
    spec.texture_amplitude = 0.0;
    const auto [train, held] = generate_shapes(spec).split(0.2, 0);
    AutoencoderModel<float> model(LatentSpec{4, 8, {2, 4, 6, 8}}, AutoencoderArch{4, 8, 1}, 0);

    SUBCASE("c' = c without fine-tuning is the full-channel error") {
        const auto curve = prefix_reconstruction_curve(model, train.images, held.images, {8}, FinetuneOptions{0});
        REQUIRE(curve.entries.size() == 1);
        CHECK_FALSE(curve.finetuned);
        const auto y = decode(model, encode(model, held.images));
        const double mse = (y.values - held.images.values).cast<double>().squaredNorm() /
                           static_cast<double>(held.images.size());
        CHECK(curve.entries[0].mse == doctest::Approx(mse).epsilon(1e-12));
    }
    SUBCASE("entries come back sorted and deduplicated") {
        const auto curve = prefix_reconstruction_curve(model, train.images, held.images, {6, 2, 6, 4}, FinetuneOptions{0});
        REQUIRE(curve.entries.size() == 3);
        CHECK(curve.entries[0].c_prime == 2);
        CHECK(curve.entries[1].c_prime == 4);
        CHECK(curve.entries[2].c_prime == 6);
    }
    SUBCASE("grid entries outside (0, c] are rejected") {
        CHECK_THROWS_AS(prefix_reconstruction_curve(model, train.images, held.images, {2, 9}, FinetuneOptions{0}),
                        ArgumentError);
    }
}

TEST_CASE("fine-tuned prefix curve of a trained structured AE is nonincreasing within 5%") {
    SyntheticShapesSpec spec;
    spec.image_size = 16;
    spec.size = 600;
    spec.texture_amplitude = 0.0;
    const auto [train, held] = generate_shapes(spec).split(0.2, 0);
    for (std::uint64_t seed : {0u, 1u}) {
        AutoencoderModel<float> model(LatentSpec{4, 8, {2, 4, 6, 8}}, AutoencoderArch{4, 8, 1}, seed);
        AeTrainOptions opts;
        opts.weights = {1.0, 0.0, 0.0};
        opts.optimizer.lr = 3e-3;
        AutoencoderTrainer<float> trainer(model, opts);
        for (long s = 0; s < 300; ++s) {
            Rng rng = derive_rng(seed, 1, s);
            trainer.step(gather_samples(train.images, batch_indices(train.size(), 16, seed, s)), rng);
        }
        FinetuneOptions ft;
        ft.steps = 40;
        const auto curve = prefix_reconstruction_curve(model, train.images, held.images, {2, 4, 6, 8}, ft);
        CHECK(curve.finetuned);
        for (std::size_t i = 1; i < curve.entries.size(); ++i) {
            CHECK_MESSAGE(curve.entries[i].mse <= 1.05 * curve.entries[i - 1].mse,
                          "seed " << seed << " c'=" << curve.entries[i].c_prime << " mse " << curve.entries[i].mse
                                  << " previous " << curve.entries[i - 1].mse);
        }
    }
}
