#pragma once

#include "structlat/dataset.hpp"
#include "structlat/feature_extractor.hpp"
#include "structlat/nn/adam.hpp"

#include <functional>
#include <string>

namespace structlat {

/// Per-sample PSNR in dB for images in [-1, 1] (peak 2), capped at 99 dB
/// when the MSE is below 1e-12.
template <typename Scalar>
Eigen::VectorXd psnr(const Tensor4<Scalar>& x, const Tensor4<Scalar>& y) {
    if (!x.same_shape(y)) throw ArgumentError("psnr: shape mismatch " + x.shape_string() + " vs " + y.shape_string());
    constexpr double peak = 2.0;
    Eigen::VectorXd out(x.n);
    const double per_sample = static_cast<double>(x.h * x.w * x.c);
    for (Index b = 0; b < x.n; ++b) {
        const double mse = (x.sample(b) - y.sample(b)).template cast<double>().squaredNorm() / per_sample;
        out(b) = mse < 1e-12 ? 99.0 : std::min(99.0, 10.0 * std::log10(peak * peak / mse));
    }
    return out;
}

/// Features [N, d] in double precision, computed in chunks.
template <typename Scalar>
Eigen::MatrixXd extract_features(FeatureExtractor<Scalar>& net, const Tensor4<Scalar>& images, Index chunk = 500) {
    if (images.c != 3) throw ArgumentError("extract_features: expected [N, H, W, 3], got " + images.shape_string());
    Eigen::MatrixXd out(images.n, net.feature_dim());
    for (Index start = 0; start < images.n; start += chunk) {
        const Index count = std::min(chunk, images.n - start);
        Tensor4<Scalar> part(count, images.h, images.w, 3);
        part.values = images.values.middleRows(start * images.h * images.w, count * images.h * images.w);
        out.middleRows(start, count) = net.features(part).template cast<double>();
    }
    return out;
}

/// Gaussian sufficient statistics of a feature set.
struct FrechetStats {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;
    long long n = 0;

    /// Unbiased covariance of the rows of `features`.
    static FrechetStats from_features(const Eigen::MatrixXd& features);
};

/// Exact moment pooling across shards (counts, sums, outer-product sums).
class FrechetAccumulator {
public:
    void add(const Eigen::MatrixXd& features);
    void merge(const FrechetAccumulator& other);
    FrechetStats finish() const;

private:
    Eigen::VectorXd sum_;
    Eigen::MatrixXd outer_;
    long long n_ = 0;
};

/// ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}).
///
/// The trace term uses tr((S_a^{1/2} S_b S_a^{1/2})^{1/2}), both roots from
/// symmetric eigendecompositions with eigenvalues in [-1e-6, 0) clipped to 0.
/// More negative eigenvalues raise ArgumentError listing them.
double frechet_distance(const FrechetStats& a, const FrechetStats& b);

struct Throughput {
    double mean = 0;    // images / second
    double stddev = 0;  // across measured steps
    int measured = 0;
};

/// Times `measured` calls of `step` (after `warmup` untimed calls), each
/// processing `batch_size` images.
Throughput measure_throughput(const std::function<void()>& step, Index batch_size, int warmup, int measured);

struct ExtractorTrainOptions {
    long steps = 1500;
    Index batch_size = 64;
    nn::AdamOptions optimizer{1e-3};
    std::uint64_t seed = 0;

    bool operator==(const ExtractorTrainOptions&) const = default;
};

struct ExtractorTrainReport {
    double final_loss = 0;
    double train_accuracy = 0;
};

/// Trains the classifier once on the dataset labels (cross-entropy).
FeatureExtractor<float> train_feature_extractor(const ImageDataset& data, const FeatureExtractorArch& arch,
                                                const ExtractorTrainOptions& opts,
                                                ExtractorTrainReport* report = nullptr);

/// Hex SHA-256 of parameter names and values.
std::string parameter_hash(const nn::ParamRefs<float>& params);

template <typename Scalar>
std::string extractor_hash(FeatureExtractor<Scalar>& net) {
    nn::ParamRefs<Scalar> p;
    net.collect(p);
    if constexpr (std::is_same_v<Scalar, float>) {
        return parameter_hash(p);
    } else {
        std::vector<nn::Param<float>> copies;
        for (auto* q : p) copies.emplace_back(q->name, q->value.template cast<float>());
        nn::ParamRefs<float> refs;
        for (auto& c : copies) refs.push_back(&c);
        return parameter_hash(refs);
    }
}

}  // namespace structlat
