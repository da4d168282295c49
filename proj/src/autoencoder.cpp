#include "structlat/autoencoder.hpp"

#include <cmath>

namespace structlat {

void AutoencoderArch::validate() const {
    if (base_width <= 0) throw ConfigError("autoencoder.base_width must be positive");
    if (max_width < base_width) throw ConfigError("autoencoder.max_width must be >= base_width");
    if (blocks_per_stage < 0) throw ConfigError("autoencoder.blocks_per_stage must be >= 0");
}

std::vector<int> AutoencoderArch::widths(int stages) const {
    std::vector<int> w;
    long width = base_width;
    for (int s = 0; s <= stages; ++s) {
        w.push_back(static_cast<int>(std::min<long>(width, max_width)));
        width *= 2;
    }
    return w;
}

int downsampling_stages(int f) {
    if (f <= 0 || (f & (f - 1)) != 0) {
        throw ConfigError("spatial compression ratio f must be a power of two, got " + std::to_string(f));
    }
    int stages = 0;
    while ((1 << stages) < f) ++stages;
    return stages;
}

void ReconLossWeights::validate() const {
    for (double w : {l1, perceptual, adversarial}) {
        if (!(w >= 0) || !std::isfinite(w)) throw ConfigError("reconstruction loss weights must be finite and >= 0");
    }
    if (l1 + perceptual + adversarial <= 0) {
        throw ConfigError("at least one reconstruction loss weight must be positive");
    }
}

}  // namespace structlat
