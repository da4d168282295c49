#include "structlat/metrics.hpp"

#include <openssl/evp.h>

#include <chrono>
#include <cmath>
#include <iomanip>
#include <sstream>

namespace structlat {

FrechetStats FrechetStats::from_features(const Eigen::MatrixXd& features) {
    FrechetAccumulator acc;
    acc.add(features);
    return acc.finish();
}

void FrechetAccumulator::add(const Eigen::MatrixXd& features) {
    if (features.rows() == 0) return;
    if (n_ == 0 && sum_.size() == 0) {
        sum_ = Eigen::VectorXd::Zero(features.cols());
        outer_ = Eigen::MatrixXd::Zero(features.cols(), features.cols());
    }
    if (features.cols() != sum_.size()) throw ArgumentError("FrechetAccumulator: feature dimension changed");
    sum_ += features.colwise().sum().transpose();
    outer_.noalias() += features.transpose() * features;
    n_ += features.rows();
}

void FrechetAccumulator::merge(const FrechetAccumulator& other) {
    if (other.n_ == 0) return;
    if (n_ == 0) {
        *this = other;
        return;
    }
    if (other.sum_.size() != sum_.size()) throw ArgumentError("FrechetAccumulator: feature dimension mismatch");
    sum_ += other.sum_;
    outer_ += other.outer_;
    n_ += other.n_;
}

FrechetStats FrechetAccumulator::finish() const {
    if (n_ < 2) throw ArgumentError("FrechetStats: need at least two samples");
    FrechetStats s;
    s.n = n_;
    const double n = static_cast<double>(n_);
    s.mean = sum_ / n;
    s.cov = (outer_ - n * s.mean * s.mean.transpose()) / (n - 1.0);
    s.cov = 0.5 * (s.cov + s.cov.transpose());
    return s;
}

namespace {

constexpr double kEigenTolerance = 1e-6;

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m, const char* which) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
    const Eigen::VectorXd& ev = es.eigenvalues();
    if (ev.size() > 0 && ev.minCoeff() < -kEigenTolerance) {
        std::ostringstream msg;
        msg << "frechet_distance: covariance " << which << " is not PSD; negative eigenvalues:";
        for (Index i = 0; i < ev.size(); ++i)
            if (ev(i) < -kEigenTolerance) msg << ' ' << ev(i);
        throw ArgumentError(msg.str());
    }
    const Eigen::VectorXd root = ev.cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double frechet_distance(const FrechetStats& a, const FrechetStats& b) {
    const Index d = a.mean.size();
    if (b.mean.size() != d || a.cov.rows() != d || a.cov.cols() != d || b.cov.rows() != d || b.cov.cols() != d) {
        throw ArgumentError("frechet_distance: dimension mismatch");
    }
    const Eigen::MatrixXd root_a = psd_sqrt(a.cov, "a");
    psd_sqrt(b.cov, "b");
    Eigen::MatrixXd m = root_a * b.cov * root_a;
    m = 0.5 * (m + m.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m, Eigen::EigenvaluesOnly);
    const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    const double dist = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
    return std::max(0.0, dist);
}

Throughput measure_throughput(const std::function<void()>& step, Index batch_size, int warmup, int measured) {
    if (measured < 1) throw ArgumentError("measure_throughput: measured must be >= 1");
    if (warmup < 0) throw ArgumentError("measure_throughput: warmup must be >= 0");
    if (batch_size < 1) throw ArgumentError("measure_throughput: batch size must be >= 1");
    for (int i = 0; i < warmup; ++i) step();
    std::vector<double> rates;
    rates.reserve(static_cast<std::size_t>(measured));
    for (int i = 0; i < measured; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        step();
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        rates.push_back(static_cast<double>(batch_size) / std::max(s, 1e-12));
    }
    Throughput out;
    out.measured = measured;
    for (double r : rates) out.mean += r / measured;
    for (double r : rates) out.stddev += (r - out.mean) * (r - out.mean);
    out.stddev = measured > 1 ? std::sqrt(out.stddev / (measured - 1)) : 0.0;
    return out;
}

FeatureExtractor<float> train_feature_extractor(const ImageDataset& data, const FeatureExtractorArch& arch,
                                                const ExtractorTrainOptions& opts, ExtractorTrainReport* report) {
    if (data.size() == 0) throw ArgumentError("train_feature_extractor: empty dataset");
    if (static_cast<Index>(data.labels.size()) != data.size()) {
        throw ArgumentError("train_feature_extractor: dataset has no labels");
    }
    Rng init = derive_rng(opts.seed, 0xFE);
    FeatureExtractor<float> net(arch, init);
    nn::ParamRefs<float> params;
    net.collect(params);
    nn::Adam<float> optimizer(params, opts.optimizer);
    double last_loss = 0;
    for (long step = 0; step < opts.steps; ++step) {
        const auto idx = batch_indices(data.size(), opts.batch_size, opts.seed, step);
        const Tensor4<float> x = gather_samples(data.images, idx);
        optimizer.zero_grad();
        const Mat<float> logits = net.logits(x);
        Mat<float> probs = (logits.colwise() - logits.rowwise().maxCoeff()).array().exp();
        probs.array().colwise() /= probs.rowwise().sum().array();
        double loss = 0;
        Mat<float> dlogits = probs;
        const float inv = 1.0f / static_cast<float>(idx.size());
        for (std::size_t b = 0; b < idx.size(); ++b) {
            const int label = data.labels[static_cast<std::size_t>(idx[b])];
            if (label < 0 || label >= arch.num_classes) throw ArgumentError("train_feature_extractor: label out of range");
            loss -= std::log(std::max(1e-12, static_cast<double>(probs(static_cast<Index>(b), label))));
            dlogits(static_cast<Index>(b), label) -= 1.0f;
        }
        dlogits *= inv;
        last_loss = loss / static_cast<double>(idx.size());
        if (!std::isfinite(last_loss)) throw NumericalError("train_feature_extractor: non-finite loss");
        net.logits_backward(dlogits);
        optimizer.step();
    }
    if (report) {
        report->final_loss = last_loss;
        Index correct = 0;
        for (Index start = 0; start < data.size(); start += 500) {
            const Index count = std::min<Index>(500, data.size() - start);
            std::vector<Index> idx(static_cast<std::size_t>(count));
            for (Index i = 0; i < count; ++i) idx[static_cast<std::size_t>(i)] = start + i;
            const Mat<float> logits = net.logits(gather_samples(data.images, idx));
            for (Index i = 0; i < count; ++i) {
                Index arg = 0;
                logits.row(i).maxCoeff(&arg);
                if (arg == data.labels[static_cast<std::size_t>(start + i)]) ++correct;
            }
        }
        report->train_accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
    }
    return net;
}

std::string parameter_hash(const nn::ParamRefs<float>& params) {
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
    for (const auto* p : params) {
        EVP_DigestUpdate(ctx, p->name.data(), p->name.size());
        const Index dims[2] = {p->value.rows(), p->value.cols()};
        EVP_DigestUpdate(ctx, dims, sizeof(dims));
        EVP_DigestUpdate(ctx, p->value.data(), sizeof(float) * static_cast<std::size_t>(p->value.size()));
    }
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx, digest, &len);
    EVP_MD_CTX_free(ctx);
    std::ostringstream hex;
    for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
    return hex.str();
}

}  // namespace structlat
