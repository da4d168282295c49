#pragma once

#include "structlat/dataset.hpp"

#include <array>

namespace structlat {

enum class ShapeKind { Circle = 0, Square = 1, Triangle = 2 };

/// Procedural shapes on a flat background. Class = shape * colors + color of
/// the first (topmost, largest) object.
struct SyntheticShapesSpec {
    int image_size = 32;
    int num_shapes = 3;  // at most 3: circle, square, triangle
    int num_colors = 4;
    int min_objects = 1;
    int max_objects = 3;
    double texture_amplitude = 0.05;  // i.i.d. per-pixel noise, uniform in [-a, a]
    Index size = 10000;
    std::uint64_t seed = 0;

    int num_classes() const { return num_shapes * num_colors; }
    void validate() const;
    bool operator==(const SyntheticShapesSpec&) const = default;
};

/// Fixed palette in [-1, 1]; entries beyond it are rejected by validate().
const std::vector<std::array<float, 3>>& shape_palette();

/// Deterministic given spec.seed; sample i depends only on (seed, i).
ImageDataset generate_shapes(const SyntheticShapesSpec& spec);

}  // namespace structlat
