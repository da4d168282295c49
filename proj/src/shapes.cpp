#include "structlat/shapes.hpp"

#include <array>
#include <cmath>

namespace structlat {

namespace {

bool inside(ShapeKind kind, double dx, double dy, double s) {
    switch (kind) {
        case ShapeKind::Circle:
            return dx * dx + dy * dy <= s * s;
        case ShapeKind::Square:
            return std::abs(dx) <= s && std::abs(dy) <= s;
        case ShapeKind::Triangle:
            // Apex up, base at dy = s; half-width grows linearly from the apex.
            return dy >= -s && dy <= s && std::abs(dx) <= 0.5 * (dy + s);
    }
    return false;
}

}  // namespace

void SyntheticShapesSpec::validate() const {
    if (size <= 0) throw ArgumentError("shapes: dataset size must be positive");
    if (image_size < 8) throw ArgumentError("shapes: image_size must be >= 8");
    if (num_shapes < 1 || num_shapes > 3) throw ArgumentError("shapes: num_shapes must be in [1, 3]");
    if (num_colors < 1 || num_colors > static_cast<int>(shape_palette().size())) {
        throw ArgumentError("shapes: num_colors must be in [1, " + std::to_string(shape_palette().size()) + "]");
    }
    if (min_objects < 1 || max_objects < min_objects) throw ArgumentError("shapes: need 1 <= min_objects <= max_objects");
    if (!(texture_amplitude >= 0 && texture_amplitude <= 1)) {
        throw ArgumentError("shapes: texture_amplitude must be in [0, 1]");
    }
}

const std::vector<std::array<float, 3>>& shape_palette() {
    static const std::vector<std::array<float, 3>> palette = {
        {0.9f, -0.7f, -0.7f},  // red
        {-0.7f, 0.8f, -0.6f},  // green
        {-0.6f, -0.5f, 0.9f},  // blue
        {0.9f, 0.8f, -0.7f},   // yellow
        {0.8f, -0.6f, 0.8f},   // magenta
        {-0.6f, 0.8f, 0.8f},   // cyan
    };
    return palette;
}

ImageDataset generate_shapes(const SyntheticShapesSpec& spec) {
    spec.validate();
    const int s = spec.image_size;
    ImageDataset data;
    data.num_classes = spec.num_classes();
    data.images = Tensor4<float>(spec.size, s, s, 3);
    data.labels.resize(static_cast<std::size_t>(spec.size));
    data.objects.resize(static_cast<std::size_t>(spec.size));
    const auto& palette = shape_palette();

    for (Index b = 0; b < spec.size; ++b) {
        Rng rng = derive_rng(spec.seed, 0x5AA7E, static_cast<std::uint64_t>(b));
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        std::uniform_int_distribution<int> count_dist(spec.min_objects, spec.max_objects);
        std::uniform_int_distribution<int> shape_dist(0, spec.num_shapes - 1);
        std::uniform_int_distribution<int> color_dist(0, spec.num_colors - 1);

        const float bg = static_cast<float>(-0.2 - 0.4 * unit(rng));
        auto img = data.images.sample(b);
        img.setConstant(bg);

        const int count = count_dist(rng);
        std::vector<ObjectInfo> objs(static_cast<std::size_t>(count));
        for (int k = 0; k < count; ++k) {
            ObjectInfo& o = objs[static_cast<std::size_t>(k)];
            o.shape = shape_dist(rng);
            o.color = color_dist(rng);
            // The labelled object is larger than the distractors.
            const double lo = k == 0 ? 0.18 : 0.08;
            const double hi = k == 0 ? 0.28 : 0.14;
            o.scale = s * (lo + (hi - lo) * unit(rng));
            o.cx = o.scale + (s - 2 * o.scale) * unit(rng);
            o.cy = o.scale + (s - 2 * o.scale) * unit(rng);
        }
        // Draw back to front so object 0 is on top.
        for (int k = count - 1; k >= 0; --k) {
            const ObjectInfo& o = objs[static_cast<std::size_t>(k)];
            const auto& rgb = palette[static_cast<std::size_t>(o.color)];
            for (int i = 0; i < s; ++i) {
                for (int j = 0; j < s; ++j) {
                    if (!inside(static_cast<ShapeKind>(o.shape), j + 0.5 - o.cx, i + 0.5 - o.cy, o.scale)) continue;
                    for (int ch = 0; ch < 3; ++ch) img(i * s + j, ch) = rgb[static_cast<std::size_t>(ch)];
                }
            }
        }
        if (spec.texture_amplitude > 0) {
            std::uniform_real_distribution<double> noise(-spec.texture_amplitude, spec.texture_amplitude);
            for (Index r = 0; r < img.rows(); ++r) {
                for (Index ch = 0; ch < 3; ++ch) {
                    img(r, ch) = std::clamp(img(r, ch) + static_cast<float>(noise(rng)), -1.0f, 1.0f);
                }
            }
        }
        data.labels[static_cast<std::size_t>(b)] = objs[0].shape * spec.num_colors + objs[0].color;
        data.objects[static_cast<std::size_t>(b)] = std::move(objs);
    }
    return data;
}

}  // namespace structlat
