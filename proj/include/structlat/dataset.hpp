#pragma once

#include "structlat/tensor.hpp"

#include <filesystem>
#include <vector>

namespace structlat {

/// Ground-truth geometry for one drawn object.
struct ObjectInfo {
    int shape = 0;
    int color = 0;
    double cx = 0;  // center, pixels
    double cy = 0;
    double scale = 0;  // half-extent, pixels

    bool operator==(const ObjectInfo&) const = default;
};

/// Images in [-1, 1], channels-last, with class labels.
struct ImageDataset {
    Tensor4<float> images;
    std::vector<int> labels;
    int num_classes = 0;
    std::vector<std::vector<ObjectInfo>> objects;  // empty for external datasets

    Index size() const { return images.n; }

    ImageDataset subset(const std::vector<Index>& indices) const;

    /// Deterministic split into (train, heldout); the last
    /// round(fraction * n) samples of a seeded permutation are held out.
    std::pair<ImageDataset, ImageDataset> split(double heldout_fraction, std::uint64_t seed) const;
};

/// Throws ArgumentError unless x is [N, H, W, 3] with H, W divisible by f.
template <typename Scalar>
void check_image_batch(const Tensor4<Scalar>& x, int f) {
    if (x.c != 3) throw ArgumentError("image batch must have 3 channels, got shape " + x.shape_string());
    if (f <= 0 || x.h % f != 0 || x.w % f != 0) {
        throw ArgumentError("image resolution " + std::to_string(x.h) + "x" + std::to_string(x.w) +
                            " is not divisible by f = " + std::to_string(f));
    }
}

/// Batch indices for step `step` of an epoch-shuffled pass over `n` samples.
/// A pure function of (seed, step), so resumed runs see the same batches.
std::vector<Index> batch_indices(Index n, Index batch_size, std::uint64_t seed, long step);

}  // namespace structlat
