#pragma once

#include "structlat/tensor.hpp"

#include <vector>

namespace structlat {

/// Latent geometry: spatial compression ratio f, channel count c and the
/// channel counts that prefix masking may select.
struct LatentSpec {
    int f = 8;
    int c = 16;
    std::vector<int> channel_grid;

    /// Throws ConfigError unless f, c > 0 and the grid is strictly increasing
    /// within (0, c] and ends at c.
    void validate() const;

    static LatentSpec with_default_grid(int f, int c);

    bool operator==(const LatentSpec&) const = default;
};

/// Desk default: [c/4, c/4 + c/8, ..., c] for c < 32 (16 -> 4,6,...,16), and
/// the stride-4 grid [16, 20, ..., c] from 32 channels up.
std::vector<int> default_channel_grid(int c);

/// How c' is drawn from the grid. Empty weights mean uniform.
struct ChannelSampling {
    std::vector<double> weights;

    void validate(const LatentSpec& spec) const;
    bool operator==(const ChannelSampling&) const = default;
};

/// Draws c' from spec.channel_grid.
int sample_channel_count(const LatentSpec& spec, Rng& rng, const ChannelSampling& sampling = {});

/// Binary prefix mask: c' leading ones, then zeros.
class ChannelMask {
public:
    /// Throws ArgumentError unless 0 < c_prime <= c.
    ChannelMask(int c, int c_prime);

    /// Rejects anything that is not a nonempty prefix pattern.
    static ChannelMask from_bits(const std::vector<int>& bits);

    int channels() const { return c_; }
    int kept() const { return c_prime_; }
    const Eigen::ArrayXi& bits() const { return bits_; }
    int popcount() const { return bits_.sum(); }
    bool is_full() const { return c_prime_ == c_; }

    template <typename Scalar>
    RowVec<Scalar> row() const {
        return bits_.cast<Scalar>().matrix().transpose();
    }

private:
    int c_;
    int c_prime_;
    Eigen::ArrayXi bits_;
};

ChannelMask make_prefix_mask(int c, int c_prime);

/// Encoder output or diffusion state, tagged with the spec it conforms to.
template <typename Scalar>
struct LatentBatch {
    Tensor4<Scalar> data;
    LatentSpec spec;

    LatentBatch() = default;
    LatentBatch(Tensor4<Scalar> d, LatentSpec s) : data(std::move(d)), spec(std::move(s)) { check(); }

    void check() const {
        if (data.c != spec.c) {
            throw ArgumentError("LatentBatch: channel axis " + std::to_string(data.c) + " != spec.c " +
                                std::to_string(spec.c));
        }
        if (!data.all_finite()) throw NumericalError("LatentBatch: non-finite entries");
    }
};

/// output[..., i] = z[..., i] * mask[i].
template <typename Scalar>
Tensor4<Scalar> apply_channel_mask(const Tensor4<Scalar>& z, const ChannelMask& mask) {
    if (mask.channels() != z.c) {
        throw ArgumentError("apply_channel_mask: mask has " + std::to_string(mask.channels()) +
                            " channels, latent has " + std::to_string(z.c));
    }
    Tensor4<Scalar> out = z;
    if (!mask.is_full()) out.values.rightCols(z.c - mask.kept()).setZero();
    return out;
}

template <typename Scalar>
LatentBatch<Scalar> apply_channel_mask(const LatentBatch<Scalar>& z, const ChannelMask& mask) {
    LatentBatch<Scalar> out;
    out.spec = z.spec;
    out.data = apply_channel_mask(z.data, mask);
    return out;
}

}  // namespace structlat
