#pragma once

#include "structlat/tensor.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace structlat::nn {

template <typename Scalar>
struct Param {
    std::string name;
    Mat<Scalar> value;
    Mat<Scalar> grad;

    Param() = default;
    Param(std::string n, Mat<Scalar> v)
        : name(std::move(n)), value(std::move(v)), grad(Mat<Scalar>::Zero(value.rows(), value.cols())) {}

    void zero_grad() { grad.setZero(); }
};

template <typename Scalar>
using ParamRefs = std::vector<Param<Scalar>*>;

template <typename Scalar>
void zero_grads(const ParamRefs<Scalar>& params) {
    for (auto* p : params) p->zero_grad();
}

template <typename Scalar>
Index parameter_count(const ParamRefs<Scalar>& params) {
    Index n = 0;
    for (auto* p : params) n += p->value.size();
    return n;
}

/// Gaussian init with std = gain / sqrt(fan_in).
template <typename Scalar>
Mat<Scalar> scaled_normal(Index rows, Index cols, Index fan_in, double gain, Rng& rng) {
    std::normal_distribution<double> normal(0.0, gain / std::sqrt(static_cast<double>(fan_in)));
    Mat<Scalar> m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(normal(rng));
    return m;
}

}  // namespace structlat::nn
