#pragma once

#include "structlat/autoencoder.hpp"

#include <unsupported/Eigen/FFT>

#include <cmath>
#include <complex>

namespace structlat {

/// Mean over the channel axis: [N, h, w, c] -> [N, h, w, 1].
template <typename Scalar>
Tensor4<Scalar> channel_average_map(const Tensor4<Scalar>& z) {
    if (z.c <= 0) throw ArgumentError("channel_average_map: latent has no channels");
    Tensor4<Scalar> out(z.n, z.h, z.w, 1);
    for (Index r = 0; r < z.rows(); ++r) {
        Scalar sum = 0;
        for (Index k = 0; k < z.c; ++k) sum += z.values(r, k);
        out.values(r, 0) = sum / static_cast<Scalar>(z.c);
    }
    return out;
}

/// Per-channel moments plus the share of 2-D spectral energy at radial
/// frequency <= cutoff. Low-frequency fraction is 1 for an all-zero channel.
struct ChannelStats {
    Eigen::VectorXd mean;
    Eigen::VectorXd variance;
    Eigen::VectorXd energy;  // mean square
    Eigen::VectorXd low_freq_fraction;
    double cutoff = 0;
    long long count = 0;  // values per channel

    Index channels() const { return mean.size(); }
};

/// Default radial cutoff, min(h, w) / 4 in discrete-frequency units.
inline double default_lowfreq_cutoff(Index h, Index w) { return static_cast<double>(std::min(h, w)) / 4.0; }

/// Streaming accumulator for ChannelStats; shards merge by addition.
class ChannelStatsAccumulator {
public:
    /// cutoff <= 0 selects default_lowfreq_cutoff on the first batch.
    explicit ChannelStatsAccumulator(double cutoff = 0) : cutoff_(cutoff) {}

    template <typename Scalar>
    void add(const Tensor4<Scalar>& z) {
        if (z.n == 0) return;
        init(z.h, z.w, z.c);
        const Mat<double> v = z.values.template cast<double>();
        sum_ += v.colwise().sum().transpose();
        sumsq_ += v.array().square().colwise().sum().matrix().transpose();
        count_ += z.n * z.h * z.w;
        Eigen::FFT<double> fft;
        Eigen::MatrixXcd spec(z.h, z.w);
        Eigen::VectorXcd tmp_in, tmp_out;
        for (Index b = 0; b < z.n; ++b) {
            for (Index k = 0; k < z.c; ++k) {
                for (Index i = 0; i < z.h; ++i) {
                    Eigen::VectorXcd row(z.w);
                    for (Index j = 0; j < z.w; ++j) row(j) = std::complex<double>(z(b, i, j, k), 0.0);
                    fft.fwd(tmp_out, row);
                    spec.row(i) = tmp_out.transpose();
                }
                for (Index j = 0; j < z.w; ++j) {
                    tmp_in = spec.col(j);
                    fft.fwd(tmp_out, tmp_in);
                    spec.col(j) = tmp_out;
                }
                const Eigen::ArrayXXd power = spec.array().abs2();
                total_spec_(k) += power.sum();
                low_spec_(k) += (power * low_band_).sum();
            }
        }
    }

    void merge(const ChannelStatsAccumulator& other);

    ChannelStats finish() const;

private:
    void init(Index h, Index w, Index c);

    double cutoff_;
    Index h_ = 0, w_ = 0, c_ = 0;
    Eigen::ArrayXXd low_band_;
    Eigen::VectorXd sum_, sumsq_, total_spec_, low_spec_;
    long long count_ = 0;
};

/// Streams a dataset of latent batches through ChannelStatsAccumulator.
template <typename Scalar>
ChannelStats per_channel_stats(const std::vector<Tensor4<Scalar>>& latents, double cutoff = 0) {
    ChannelStatsAccumulator acc(cutoff);
    bool any = false;
    for (const auto& z : latents) {
        if (z.n > 0) any = true;
        acc.add(z);
    }
    if (!any) throw ArgumentError("per_channel_stats: empty dataset");
    return acc.finish();
}

/// Mean low-frequency fraction over the first ceil(prefix_fraction * c)
/// channels minus the mean over the rest.
double structure_separation_score(const ChannelStats& stats, double prefix_fraction);

struct PrefixCurveEntry {
    int c_prime = 0;
    double mse = 0;
    double psnr = 0;
};

struct PrefixCurve {
    std::vector<PrefixCurveEntry> entries;  // sorted by c_prime
    bool finetuned = false;
};

/// For each c' in `grid`: optionally fine-tune a decoder copy on `train` at c',
/// then measure prefix-masked reconstruction MSE / PSNR on `heldout`.
template <typename Scalar>
PrefixCurve prefix_reconstruction_curve(AutoencoderModel<Scalar>& model, const Tensor4<Scalar>& train,
                                        const Tensor4<Scalar>& heldout, std::vector<int> grid,
                                        const FinetuneOptions& finetune);

/// Mean squared error and mean per-sample PSNR of decode(E(x) * mask_{c,c'}).
template <typename Scalar>
PrefixCurveEntry masked_reconstruction_error(AutoencoderModel<Scalar>& model, const Tensor4<Scalar>& images,
                                             int c_prime);

/// Pixel MSE between prefix-c' and full-channel decodes on one fixed batch;
/// used to check that masking changes the output.
template <typename Scalar>
double prefix_decode_change(AutoencoderModel<Scalar>& model, const Tensor4<Scalar>& images, int c_prime);

extern template PrefixCurve prefix_reconstruction_curve<float>(AutoencoderModel<float>&, const Tensor4<float>&,
                                                               const Tensor4<float>&, std::vector<int>,
                                                               const FinetuneOptions&);
extern template PrefixCurveEntry masked_reconstruction_error<float>(AutoencoderModel<float>&, const Tensor4<float>&,
                                                                    int);

}  // namespace structlat
