#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace structlat {

using Index = Eigen::Index;

// Row-major so that a channels-last buffer maps to one pixel (or token) per row.
template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using RowVec = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Rng = std::mt19937_64;

/// Bad shapes, out-of-range arguments and similar caller errors.
struct ArgumentError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Invalid or inconsistent configuration.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Non-finite losses or predictions; the message carries the diagnostics.
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Corrupt, mismatched or missing on-disk artifacts.
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Rank-4 channels-last array [n, h, w, c].
///
/// `values` stores the NHWC buffer as an (n*h*w) x c row-major matrix, so
/// per-pixel linear maps and channel-wise operations are plain Eigen
/// expressions on it.
template <typename Scalar>
struct Tensor4 {
    Index n = 0;
    Index h = 0;
    Index w = 0;
    Index c = 0;
    Mat<Scalar> values;

    Tensor4() = default;
    Tensor4(Index n_, Index h_, Index w_, Index c_)
        : n(n_), h(h_), w(w_), c(c_), values(Mat<Scalar>::Zero(n_ * h_ * w_, c_)) {
        if (n_ < 0 || h_ < 0 || w_ < 0 || c_ < 0) {
            throw ArgumentError("Tensor4: negative dimension");
        }
    }

    static Tensor4 constant(Index n_, Index h_, Index w_, Index c_, Scalar v) {
        Tensor4 t(n_, h_, w_, c_);
        t.values.setConstant(v);
        return t;
    }

    Index pixels_per_sample() const { return h * w; }
    Index rows() const { return n * h * w; }
    Index size() const { return n * h * w * c; }

    Scalar& operator()(Index b, Index i, Index j, Index k) { return values((b * h + i) * w + j, k); }
    Scalar operator()(Index b, Index i, Index j, Index k) const { return values((b * h + i) * w + j, k); }

    auto sample(Index b) { return values.middleRows(b * h * w, h * w); }
    auto sample(Index b) const { return values.middleRows(b * h * w, h * w); }

    bool same_shape(const Tensor4& o) const { return n == o.n && h == o.h && w == o.w && c == o.c; }

    bool all_finite() const { return values.allFinite(); }

    template <typename Other>
    Tensor4<Other> cast() const {
        Tensor4<Other> out;
        out.n = n;
        out.h = h;
        out.w = w;
        out.c = c;
        out.values = values.template cast<Other>();
        return out;
    }

    std::string shape_string() const {
        return "[" + std::to_string(n) + ", " + std::to_string(h) + ", " + std::to_string(w) + ", " +
               std::to_string(c) + "]";
    }
};

/// Copies the samples listed in `indices` into a new batch.
template <typename Scalar, typename IndexRange>
Tensor4<Scalar> gather_samples(const Tensor4<Scalar>& src, const IndexRange& indices) {
    Index count = 0;
    for ([[maybe_unused]] auto i : indices) ++count;
    Tensor4<Scalar> out(count, src.h, src.w, src.c);
    Index b = 0;
    for (auto i : indices) {
        if (i < 0 || static_cast<Index>(i) >= src.n) throw ArgumentError("gather_samples: index out of range");
        out.sample(b++) = src.sample(static_cast<Index>(i));
    }
    return out;
}

/// Concatenates batches along the sample axis.
template <typename Scalar>
Tensor4<Scalar> concat_samples(const std::vector<Tensor4<Scalar>>& parts) {
    if (parts.empty()) return {};
    Index total = 0;
    for (const auto& p : parts) {
        if (p.h != parts[0].h || p.w != parts[0].w || p.c != parts[0].c) {
            throw ArgumentError("concat_samples: mismatched shapes");
        }
        total += p.n;
    }
    Tensor4<Scalar> out(total, parts[0].h, parts[0].w, parts[0].c);
    Index row = 0;
    for (const auto& p : parts) {
        out.values.middleRows(row, p.rows()) = p.values;
        row += p.rows();
    }
    return out;
}

/// Fills with independent standard normal draws.
template <typename Scalar>
void fill_normal(Tensor4<Scalar>& t, Rng& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    Scalar* p = t.values.data();
    for (Index i = 0; i < t.size(); ++i) p[i] = static_cast<Scalar>(normal(rng));
}

/// Derives an independent generator for (seed, stream, step); training loops
/// draw one per step so a resumed run replays the same randomness.
inline Rng derive_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t step = 0) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(step),
                      static_cast<std::uint32_t>(step >> 32)};
    return Rng(seq);
}

}  // namespace structlat
