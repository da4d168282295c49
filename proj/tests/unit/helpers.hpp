#pragma once

#include "structlat/nn/param.hpp"

#include <doctest.h>

#include <functional>

namespace testing {

using namespace structlat;

template <typename Scalar>
Tensor4<Scalar> random_images(Index n, Index h, Index w, std::uint64_t seed) {
    Tensor4<Scalar> x(n, h, w, 3);
    Rng rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (Index i = 0; i < x.size(); ++i) x.values.data()[i] = static_cast<Scalar>(u(rng));
    return x;
}

inline bool close_rel(double a, double b, double rel, double abs_floor = 1e-10) {
    return std::abs(a - b) <= rel * std::max(std::abs(a), std::abs(b)) + abs_floor;
}

/// Central finite differences on `per_param` random entries of every
/// parameter; `loss` must be deterministic and `analytic` holds the gradients
/// to compare against (copied before any probing).
struct GradCheck {
    int checked = 0;
    int failed = 0;
    double worst = 0;
};

inline GradCheck check_param_gradients(const nn::ParamRefs<double>& params, const std::vector<Mat<double>>& analytic,
                                       const std::function<double()>& loss, int per_param, std::uint64_t seed,
                                       double rel = 1e-4, double h = 1e-6) {
    GradCheck out;
    Rng rng(seed);
    for (std::size_t p = 0; p < params.size(); ++p) {
        auto& value = params[p]->value;
        for (int k = 0; k < per_param; ++k) {
            const Index i = static_cast<Index>(rng() % static_cast<std::uint64_t>(value.size()));
            const double saved = value.data()[i];
            value.data()[i] = saved + h;
            const double up = loss();
            value.data()[i] = saved - h;
            const double down = loss();
            value.data()[i] = saved;
            const double numeric = (up - down) / (2 * h);
            const double a = analytic[p].data()[i];
            ++out.checked;
            const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
            out.worst = std::max(out.worst, std::min(err, std::abs(a - numeric)));
            if (!close_rel(a, numeric, rel, 1e-9)) {
                ++out.failed;
                MESSAGE(params[p]->name << "[" << i << "]: analytic " << a << " numeric " << numeric);
            }
        }
    }
    return out;
}

inline std::vector<Mat<double>> grads_of(const nn::ParamRefs<double>& params) {
    std::vector<Mat<double>> g;
    for (auto* p : params) g.push_back(p->grad);
    return g;
}

}  // namespace testing
