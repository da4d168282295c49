#include "structlat/diffusion.hpp"

namespace structlat {

NoiseSchedule NoiseSchedule::from_name(const std::string& name) {
    if (name == "trig") return NoiseSchedule(ScheduleKind::Trig);
    if (name == "linear") return NoiseSchedule(ScheduleKind::Linear);
    throw ConfigError("unknown noise schedule '" + name + "' (expected trig or linear)");
}

void DenoiserArch::validate() const {
    if (width <= 0 || width % 2 != 0) throw ConfigError("diffusion.width must be a positive even number");
    if (depth < 1) throw ConfigError("diffusion.depth must be >= 1");
    if (heads < 1 || width % heads != 0) throw ConfigError("diffusion.heads must divide diffusion.width");
    if (mlp_ratio < 1) throw ConfigError("diffusion.mlp_ratio must be >= 1");
    if (num_classes < 1) throw ConfigError("diffusion.num_classes must be >= 1");
}

std::vector<double> sampler_times(int steps, double t_max) {
    if (steps < 1) throw ArgumentError("sampler_times: steps must be >= 1");
    if (!(t_max > 0 && t_max < 1)) throw ArgumentError("sampler_times: t_max must be in (0, 1)");
    std::vector<double> t(static_cast<std::size_t>(steps) + 1);
    for (int i = 0; i <= steps; ++i) t[static_cast<std::size_t>(i)] = t_max * (1.0 - static_cast<double>(i) / steps);
    t.back() = 0.0;
    return t;
}

}  // namespace structlat
