#include "structlat/analysis.hpp"

#include "structlat/metrics.hpp"

#include <algorithm>

namespace structlat {

void ChannelStatsAccumulator::init(Index h, Index w, Index c) {
    if (c_ != 0) {
        if (h != h_ || w != w_ || c != c_) throw ArgumentError("per_channel_stats: latent shapes differ across batches");
        return;
    }
    h_ = h;
    w_ = w;
    c_ = c;
    if (cutoff_ <= 0) cutoff_ = default_lowfreq_cutoff(h, w);
    low_band_ = Eigen::ArrayXXd::Zero(h, w);
    for (Index i = 0; i < h; ++i) {
        const double fy = static_cast<double>(i <= h / 2 ? i : i - h);
        for (Index j = 0; j < w; ++j) {
            const double fx = static_cast<double>(j <= w / 2 ? j : j - w);
            if (std::sqrt(fy * fy + fx * fx) <= cutoff_ + 1e-12) low_band_(i, j) = 1.0;
        }
    }
    sum_ = sumsq_ = total_spec_ = low_spec_ = Eigen::VectorXd::Zero(c);
}

void ChannelStatsAccumulator::merge(const ChannelStatsAccumulator& other) {
    if (other.c_ == 0) return;
    if (c_ == 0) {
        *this = other;
        return;
    }
    if (other.h_ != h_ || other.w_ != w_ || other.c_ != c_ || other.cutoff_ != cutoff_) {
        throw ArgumentError("ChannelStatsAccumulator::merge: incompatible shards");
    }
    sum_ += other.sum_;
    sumsq_ += other.sumsq_;
    total_spec_ += other.total_spec_;
    low_spec_ += other.low_spec_;
    count_ += other.count_;
}

ChannelStats ChannelStatsAccumulator::finish() const {
    if (count_ == 0) throw ArgumentError("per_channel_stats: empty dataset");
    ChannelStats s;
    const double n = static_cast<double>(count_);
    s.mean = sum_ / n;
    s.energy = sumsq_ / n;
    s.variance = (s.energy.array() - s.mean.array().square()).max(0.0).matrix();
    s.low_freq_fraction.resize(c_);
    for (Index k = 0; k < c_; ++k) {
        s.low_freq_fraction(k) = total_spec_(k) > 0 ? std::clamp(low_spec_(k) / total_spec_(k), 0.0, 1.0) : 1.0;
    }
    s.cutoff = cutoff_;
    s.count = count_;
    return s;
}

double structure_separation_score(const ChannelStats& stats, double prefix_fraction) {
    if (!(prefix_fraction > 0 && prefix_fraction < 1)) {
        throw ArgumentError("structure_separation_score: prefix_fraction must be in (0, 1)");
    }
    const Index c = stats.low_freq_fraction.size();
    if (c < 2) throw ArgumentError("structure_separation_score: need at least two channels");
    Index k = static_cast<Index>(std::ceil(prefix_fraction * static_cast<double>(c) - 1e-9));
    k = std::clamp<Index>(k, 1, c - 1);
    const double head = stats.low_freq_fraction.head(k).mean();
    const double tail = stats.low_freq_fraction.tail(c - k).mean();
    return head - tail;
}

template <typename Scalar>
PrefixCurveEntry masked_reconstruction_error(AutoencoderModel<Scalar>& model, const Tensor4<Scalar>& images,
                                             int c_prime) {
    if (images.n == 0) throw ArgumentError("masked_reconstruction_error: empty dataset");
    const ChannelMask mask(model.spec.c, c_prime);
    const Tensor4<Scalar> z = apply_channel_mask(encode_all(model, images), mask);
    const Tensor4<Scalar> y = decode_all(model, z);
    PrefixCurveEntry e;
    e.c_prime = c_prime;
    e.mse = (y.values - images.values).template cast<double>().squaredNorm() / static_cast<double>(images.size());
    e.psnr = psnr(images, y).mean();
    return e;
}

template <typename Scalar>
PrefixCurve prefix_reconstruction_curve(AutoencoderModel<Scalar>& model, const Tensor4<Scalar>& train,
                                        const Tensor4<Scalar>& heldout, std::vector<int> grid,
                                        const FinetuneOptions& finetune) {
    std::sort(grid.begin(), grid.end());
    grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
    for (int g : grid) {
        if (g <= 0 || g > model.spec.c) {
            throw ArgumentError("prefix_reconstruction_curve: grid element " + std::to_string(g) + " outside (0, " +
                                std::to_string(model.spec.c) + "]");
        }
    }
    PrefixCurve curve;
    curve.finetuned = finetune.steps > 0;
    for (int g : grid) {
        if (curve.finetuned) {
            AutoencoderModel<Scalar> tuned = finetune_decoder_for_prefix(model, g, train, finetune);
            curve.entries.push_back(masked_reconstruction_error(tuned, heldout, g));
        } else {
            curve.entries.push_back(masked_reconstruction_error(model, heldout, g));
        }
    }
    return curve;
}

template <typename Scalar>
double prefix_decode_change(AutoencoderModel<Scalar>& model, const Tensor4<Scalar>& images, int c_prime) {
    const LatentBatch<Scalar> z = encode(model, images);
    const Tensor4<Scalar> full = decode(model, z);
    const Tensor4<Scalar> part = decode(model, apply_channel_mask(z, ChannelMask(model.spec.c, c_prime)));
    return (full.values - part.values).template cast<double>().squaredNorm() / static_cast<double>(full.size());
}

template PrefixCurve prefix_reconstruction_curve<float>(AutoencoderModel<float>&, const Tensor4<float>&,
                                                        const Tensor4<float>&, std::vector<int>,
                                                        const FinetuneOptions&);
template PrefixCurve prefix_reconstruction_curve<double>(AutoencoderModel<double>&, const Tensor4<double>&,
                                                         const Tensor4<double>&, std::vector<int>,
                                                         const FinetuneOptions&);
template PrefixCurveEntry masked_reconstruction_error<float>(AutoencoderModel<float>&, const Tensor4<float>&, int);
template PrefixCurveEntry masked_reconstruction_error<double>(AutoencoderModel<double>&, const Tensor4<double>&, int);
template double prefix_decode_change<float>(AutoencoderModel<float>&, const Tensor4<float>&, int);

}  // namespace structlat
