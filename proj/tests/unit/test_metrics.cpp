#include "helpers.hpp"

#include "structlat/diffusion.hpp"
#include "structlat/metrics.hpp"
#include "structlat/shapes.hpp"

#include <thread>

using namespace structlat;
using testing::random_images;

namespace {

FrechetStats diagonal(const Eigen::VectorXd& mean, const Eigen::VectorXd& var) {
    FrechetStats s;
    s.mean = mean;
    s.cov = var.asDiagonal();
    s.n = 100;
    return s;
}

FrechetStats random_stats(Index d, std::uint64_t seed) {
    Rng rng(seed);
    std::normal_distribution<double> g;
    Eigen::MatrixXd f(3 * d, d);
    for (Index i = 0; i < f.size(); ++i) f.data()[i] = g(rng);
    return FrechetStats::from_features(f);
}

Eigen::MatrixXd random_rotation(Index d, std::uint64_t seed) {
    Rng rng(seed);
    std::normal_distribution<double> g;
    Eigen::MatrixXd a(d, d);
    for (Index i = 0; i < a.size(); ++i) a.data()[i] = g(rng);
    return Eigen::HouseholderQR<Eigen::MatrixXd>(a).householderQ();
}

}  // namespace

TEST_CASE("frechet: identical stats are at distance 0") {
    for (int trial = 0; trial < 10; ++trial) {
        const auto s = random_stats(6, trial);
        CHECK(frechet_distance(s, s) <= 1e-6);
    }
}

TEST_CASE("frechet: identity covariances and a mean shift give |v|^2") {
    Eigen::VectorXd v(4);
    v << 0.5, -1.0, 2.0, 0.25;
    const auto a = diagonal(Eigen::VectorXd::Zero(4), Eigen::VectorXd::Ones(4));
    const auto b = diagonal(v, Eigen::VectorXd::Ones(4));
    CHECK(frechet_distance(a, b) == doctest::Approx(v.squaredNorm()).epsilon(1e-12));
}

TEST_CASE("frechet: diagonal closed form on 50 random cases") {
    Rng rng(11);
    std::uniform_real_distribution<double> u(0.05, 3.0);
    std::normal_distribution<double> g;
    for (int trial = 0; trial < 50; ++trial) {
        const Index d = 2 + static_cast<Index>(rng() % 10);
        Eigen::VectorXd ma(d), mb(d), sa(d), sb(d);
        double expected = 0;
        for (Index i = 0; i < d; ++i) {
            ma(i) = g(rng);
            mb(i) = g(rng);
            sa(i) = u(rng);
            sb(i) = u(rng);
            const double dm = ma(i) - mb(i);
            const double ds = std::sqrt(sa(i)) - std::sqrt(sb(i));
            expected += dm * dm + ds * ds;
        }
        CHECK(std::abs(frechet_distance(diagonal(ma, sa), diagonal(mb, sb)) - expected) <= 1e-6);
        // Equal means: the sum of (sqrt s_a - sqrt s_b)^2.
        double cov_only = 0;
        for (Index i = 0; i < d; ++i) cov_only += std::pow(std::sqrt(sa(i)) - std::sqrt(sb(i)), 2);
        CHECK(std::abs(frechet_distance(diagonal(ma, sa), diagonal(ma, sb)) - cov_only) <= 1e-6);
    }
}

TEST_CASE("property: frechet distance is symmetric and rotation invariant") {
    for (int trial = 0; trial < 20; ++trial) {
        const Index d = 3 + trial % 5;
        const auto a = random_stats(d, 100 + trial);
        const auto b = random_stats(d, 200 + trial);
        const double ab = frechet_distance(a, b);
        CHECK(std::abs(ab - frechet_distance(b, a)) <= 1e-8);
        const Eigen::MatrixXd q = random_rotation(d, 300 + trial);
        FrechetStats ra = a, rb = b;
        ra.mean = q * a.mean;
        ra.cov = q * a.cov * q.transpose();
        rb.mean = q * b.mean;
        rb.cov = q * b.cov * q.transpose();
        CHECK(std::abs(frechet_distance(ra, rb) - ab) <= 1e-5);
    }
}

TEST_CASE("frechet errors") {
    const auto a = random_stats(3, 1);
    CHECK_THROWS_AS(frechet_distance(a, random_stats(4, 2)), ArgumentError);
    FrechetStats bad = a;
    bad.cov(0, 0) = -1.0;
    try {
        frechet_distance(bad, a);
        FAIL("expected ArgumentError");
    } catch (const ArgumentError& e) {
        CHECK(std::string(e.what()).find("negative eigenvalues") != std::string::npos);
    }
    // Tiny negative eigenvalues from round-off are clipped.
    FrechetStats nearly = diagonal(Eigen::VectorXd::Zero(2), Eigen::Vector2d(1.0, -1e-9));
    CHECK_NOTHROW(frechet_distance(nearly, nearly));
    CHECK_THROWS_AS(FrechetStats::from_features(Eigen::MatrixXd::Zero(1, 3)), ArgumentError);
}

TEST_CASE("frechet accumulator pools shards exactly") {
    Rng rng(5);
    std::normal_distribution<double> g;
    Eigen::MatrixXd f(90, 4);
    for (Index i = 0; i < f.size(); ++i) f.data()[i] = g(rng);
    FrechetAccumulator a, b;
    a.add(f.topRows(30));
    b.add(f.bottomRows(60));
    a.merge(b);
    const auto pooled = a.finish();
    const auto whole = FrechetStats::from_features(f);
    CHECK(pooled.n == 90);
    CHECK((pooled.mean - whole.mean).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((pooled.cov - whole.cov).cwiseAbs().maxCoeff() < 1e-12);
    // Unbiased covariance against a direct two-pass computation.
    const Eigen::MatrixXd centered = f.rowwise() - f.colwise().mean();
    CHECK((whole.cov - centered.transpose() * centered / 89.0).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("psnr") {
    const auto x = random_images<double>(3, 4, 4, 1);
    CHECK((psnr(x, x).array() == 99.0).all());
    // MSE = peak^2 = 4: x = -1, y = 1 everywhere.
    CHECK(psnr(Tensor4<double>::constant(1, 2, 2, 3, -1.0), Tensor4<double>::constant(1, 2, 2, 3, 1.0))(0) ==
          doctest::Approx(0.0));
    // MSE = 0.04: constant offset 0.2.
    CHECK(psnr(Tensor4<double>::constant(1, 2, 2, 3, 0.0), Tensor4<double>::constant(1, 2, 2, 3, 0.2))(0) ==
          doctest::Approx(20.0).epsilon(1e-12));
    CHECK_THROWS_AS(psnr(x, random_images<double>(3, 4, 2, 1)), ArgumentError);
}

TEST_CASE("property: psnr strictly decreases as noise grows") {
    const auto x = random_images<double>(2, 8, 8, 2);
    Tensor4<double> noise(2, 8, 8, 3);
    Rng rng(3);
    fill_normal(noise, rng);
    double previous = 1e9;
    for (double sigma : {0.01, 0.02, 0.05, 0.1, 0.2, 0.4}) {
        Tensor4<double> y = x;
        y.values += sigma * noise.values;
        const double p = psnr(x, y).mean();
        CHECK(p < previous);
        previous = p;
    }
}

TEST_CASE("throughput of a 10 ms stub with batch 10 is about 1000 img/s") {
    const auto stub = [] { std::this_thread::sleep_for(std::chrono::milliseconds(10)); };
    const Throughput t = measure_throughput(stub, 10, 1, 10);
    CHECK(t.measured == 10);
    CHECK(t.mean == doctest::Approx(1000.0).epsilon(0.2));
    const Throughput no_warmup = measure_throughput(stub, 10, 0, 10);
    const Throughput long_warmup = measure_throughput(stub, 10, 5, 10);
    CHECK(no_warmup.mean == doctest::Approx(long_warmup.mean).epsilon(0.2));
    CHECK_THROWS_AS(measure_throughput(stub, 10, 0, 0), ArgumentError);
    CHECK_THROWS_AS(measure_throughput(stub, 0, 0, 1), ArgumentError);
}

TEST_CASE("more latent tokens lower diffusion training throughput") {
    auto rate = [](Index side) {
        const LatentSpec spec{8, 8, {4, 8}};
        DiffusionModel<float> model(spec, DenoiserArch{32, 2, 4, 4, 4}, side, side, 0);
        DiffusionTrainer<float> trainer(model.net, spec, NoiseSchedule{}, DiffusionTrainOptions{}, 4);
        Tensor4<float> batch(16, side, side, 8);
        Rng data(1);
        fill_normal(batch, data);
        const std::vector<int> labels(16, 0);
        long step = 0;
        return measure_throughput(
                   [&] {
                       Rng rng = derive_rng(0, 1, step++);
                       trainer.step(batch, labels, rng);
                   },
                   16, 1, 3)
            .mean;
    };
    // 32 x 32 images: f = 4 gives 64 tokens, f = 8 gives 16.
    CHECK(rate(8) < rate(4));
}

TEST_CASE("feature extractor") {
    SyntheticShapesSpec spec;
    spec.size = 600;
    const ImageDataset data = generate_shapes(spec);
    ExtractorTrainOptions opts;
    opts.steps = 150;
    ExtractorTrainReport report;
    auto net = train_feature_extractor(data, FeatureExtractorArch{}, opts, &report);
    CHECK(report.train_accuracy > 1.5 / spec.num_classes());

    const Tensor4<float> x = gather_samples(data.images, std::vector<Index>{0, 1, 2, 3});
    const auto f = extract_features(net, x);
    CHECK(f.rows() == 4);
    CHECK(f.cols() == net.feature_dim());
    const auto twice = extract_features(net, gather_samples(data.images, std::vector<Index>{0, 0}));
    CHECK(twice.row(0) == twice.row(1));
    CHECK((extract_features(net, x, 3) - f).norm() <= 1e-5 * f.norm());

    // Flip each image upside down.
    Tensor4<float> flipped = x;
    for (Index b = 0; b < x.n; ++b)
        for (Index i = 0; i < x.h; ++i)
            for (Index j = 0; j < x.w; ++j)
                for (Index k = 0; k < 3; ++k) flipped(b, i, j, k) = x(b, x.h - 1 - i, j, k);
    CHECK((extract_features(net, flipped) - f).norm() > 1e-3 * f.norm());

    auto again = train_feature_extractor(data, FeatureExtractorArch{}, opts);
    CHECK(extractor_hash(again) == extractor_hash(net));
    opts.seed = 1;
    auto other = train_feature_extractor(data, FeatureExtractorArch{}, opts);
    CHECK(extractor_hash(other) != extractor_hash(net));
}
