#include "structlat/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace structlat {

ImageDataset ImageDataset::subset(const std::vector<Index>& indices) const {
    ImageDataset out;
    out.images = gather_samples(images, indices);
    out.num_classes = num_classes;
    for (Index i : indices) {
        if (!labels.empty()) out.labels.push_back(labels[static_cast<std::size_t>(i)]);
        if (!objects.empty()) out.objects.push_back(objects[static_cast<std::size_t>(i)]);
    }
    return out;
}

std::pair<ImageDataset, ImageDataset> ImageDataset::split(double heldout_fraction, std::uint64_t seed) const {
    if (!(heldout_fraction >= 0 && heldout_fraction < 1)) {
        throw ArgumentError("heldout fraction must be in [0, 1)");
    }
    std::vector<Index> order(static_cast<std::size_t>(size()));
    std::iota(order.begin(), order.end(), Index{0});
    Rng rng = derive_rng(seed, 0x5B17);
    std::shuffle(order.begin(), order.end(), rng);
    const auto held = static_cast<std::size_t>(std::llround(heldout_fraction * static_cast<double>(size())));
    std::vector<Index> train(order.begin(), order.end() - static_cast<std::ptrdiff_t>(held));
    std::vector<Index> test(order.end() - static_cast<std::ptrdiff_t>(held), order.end());
    std::sort(train.begin(), train.end());
    std::sort(test.begin(), test.end());
    return {subset(train), subset(test)};
}

std::vector<Index> batch_indices(Index n, Index batch_size, std::uint64_t seed, long step) {
    if (n <= 0) throw ArgumentError("batch_indices: empty dataset");
    if (batch_size <= 0) throw ArgumentError("batch_indices: batch size must be positive");
    std::vector<Index> out;
    out.reserve(static_cast<std::size_t>(batch_size));
    long long pos = static_cast<long long>(step) * batch_size;
    long long epoch = -1;
    std::vector<Index> perm;
    for (Index k = 0; k < batch_size; ++k, ++pos) {
        const long long e = pos / n;
        if (e != epoch) {
            epoch = e;
            perm.resize(static_cast<std::size_t>(n));
            std::iota(perm.begin(), perm.end(), Index{0});
            Rng rng = derive_rng(seed, 0xBA7C, static_cast<std::uint64_t>(e));
            std::shuffle(perm.begin(), perm.end(), rng);
        }
        out.push_back(perm[static_cast<std::size_t>(pos % n)]);
    }
    return out;
}

}  // namespace structlat
