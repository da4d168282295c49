#include "structlat/latents.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace structlat {

void LatentSpec::validate() const {
    if (f <= 0) throw ConfigError("latent.f must be positive, got " + std::to_string(f));
    if (c <= 0) throw ConfigError("latent.c must be positive, got " + std::to_string(c));
    if (channel_grid.empty()) throw ConfigError("latent.channel_grid is empty");
    for (std::size_t i = 0; i < channel_grid.size(); ++i) {
        const int g = channel_grid[i];
        if (g <= 0 || g > c) {
            throw ConfigError("latent.channel_grid[" + std::to_string(i) + "] = " + std::to_string(g) +
                              " outside (0, " + std::to_string(c) + "]");
        }
        if (i > 0 && g <= channel_grid[i - 1]) {
            throw ConfigError("latent.channel_grid must be strictly increasing");
        }
    }
    if (channel_grid.back() != c) throw ConfigError("latent.channel_grid must end at c");
}

LatentSpec LatentSpec::with_default_grid(int f, int c) {
    LatentSpec s;
    s.f = f;
    s.c = c;
    s.channel_grid = default_channel_grid(c);
    return s;
}

std::vector<int> default_channel_grid(int c) {
    if (c <= 0) throw ArgumentError("default_channel_grid: c must be positive");
    int start = 16;
    int stride = 4;
    if (c < 32) {
        start = std::max(1, c / 4);
        stride = std::max(1, c / 8);
    }
    std::vector<int> grid;
    for (int g = start; g < c; g += stride) grid.push_back(g);
    grid.push_back(c);
    return grid;
}

void ChannelSampling::validate(const LatentSpec& spec) const {
    if (weights.empty()) return;
    if (weights.size() != spec.channel_grid.size()) {
        throw ConfigError("latent.grid_weights must have one entry per channel_grid element");
    }
    double total = 0;
    for (double w : weights) {
        if (!(w >= 0) || !std::isfinite(w)) throw ConfigError("latent.grid_weights must be finite and >= 0");
        total += w;
    }
    if (total <= 0) throw ConfigError("latent.grid_weights sum to zero");
}

int sample_channel_count(const LatentSpec& spec, Rng& rng, const ChannelSampling& sampling) {
    if (spec.channel_grid.empty()) throw ConfigError("sample_channel_count: empty channel grid");
    const auto& grid = spec.channel_grid;
    if (grid.size() == 1) return grid.front();
    if (sampling.weights.empty()) {
        std::uniform_int_distribution<std::size_t> pick(0, grid.size() - 1);
        return grid[pick(rng)];
    }
    sampling.validate(spec);
    std::discrete_distribution<std::size_t> pick(sampling.weights.begin(), sampling.weights.end());
    return grid[pick(rng)];
}

ChannelMask::ChannelMask(int c, int c_prime) : c_(c), c_prime_(c_prime) {
    if (c <= 0) throw ArgumentError("ChannelMask: c must be positive");
    if (c_prime <= 0 || c_prime > c) {
        throw ArgumentError("ChannelMask: c' = " + std::to_string(c_prime) + " outside (0, " + std::to_string(c) +
                            "]");
    }
    bits_ = Eigen::ArrayXi::Zero(c);
    bits_.head(c_prime).setOnes();
}

ChannelMask ChannelMask::from_bits(const std::vector<int>& bits) {
    const int c = static_cast<int>(bits.size());
    int kept = 0;
    while (kept < c && bits[kept] == 1) ++kept;
    for (int i = kept; i < c; ++i) {
        if (bits[i] != 0) throw ArgumentError("ChannelMask::from_bits: not a prefix mask");
    }
    return ChannelMask(c, kept);
}

ChannelMask make_prefix_mask(int c, int c_prime) { return ChannelMask(c, c_prime); }

}  // namespace structlat
