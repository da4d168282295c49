#pragma once

#include "structlat/nn/param.hpp"

#include <cmath>

namespace structlat::nn {

struct AdamOptions {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    double grad_clip = 0.0;  // global-norm clip; 0 disables

    bool operator==(const AdamOptions&) const = default;
};

/// Adam with optional decoupled weight decay and global-norm clipping.
template <typename Scalar>
class Adam {
public:
    Adam() = default;
    Adam(ParamRefs<Scalar> params, AdamOptions opts) : params_(std::move(params)), opts_(opts) {
        for (auto* p : params_) {
            m_.push_back(Mat<Scalar>::Zero(p->value.rows(), p->value.cols()));
            v_.push_back(Mat<Scalar>::Zero(p->value.rows(), p->value.cols()));
        }
    }

    void zero_grad() { zero_grads(params_); }

    /// Applies one update from the accumulated gradients. Returns the global
    /// gradient norm before clipping.
    double step() {
        double sq = 0;
        for (auto* p : params_) sq += static_cast<double>(p->grad.squaredNorm());
        const double norm = std::sqrt(sq);
        double clip_scale = 1.0;
        if (opts_.grad_clip > 0 && norm > opts_.grad_clip) clip_scale = opts_.grad_clip / norm;
        ++t_;
        const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
        const Scalar b1 = static_cast<Scalar>(opts_.beta1);
        const Scalar b2 = static_cast<Scalar>(opts_.beta2);
        const Scalar step_size = static_cast<Scalar>(opts_.lr / bc1);
        const Scalar eps = static_cast<Scalar>(opts_.eps);
        const Scalar inv_sqrt_bc2 = static_cast<Scalar>(1.0 / std::sqrt(bc2));
        const Scalar decay = static_cast<Scalar>(opts_.lr * opts_.weight_decay);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto* p = params_[i];
            auto g = p->grad.array() * static_cast<Scalar>(clip_scale);
            m_[i].array() = b1 * m_[i].array() + (Scalar(1) - b1) * g;
            v_[i].array() = b2 * v_[i].array() + (Scalar(1) - b2) * g.square();
            if (decay != Scalar(0)) p->value.array() -= decay * p->value.array();
            p->value.array() -= step_size * m_[i].array() / (v_[i].array().sqrt() * inv_sqrt_bc2 + eps);
        }
        return norm;
    }

    long steps() const { return t_; }
    const AdamOptions& options() const { return opts_; }
    const ParamRefs<Scalar>& params() const { return params_; }

    std::vector<Mat<Scalar>>& first_moments() { return m_; }
    std::vector<Mat<Scalar>>& second_moments() { return v_; }
    const std::vector<Mat<Scalar>>& first_moments() const { return m_; }
    const std::vector<Mat<Scalar>>& second_moments() const { return v_; }
    void set_steps(long t) { t_ = t; }

private:
    ParamRefs<Scalar> params_;
    AdamOptions opts_;
    std::vector<Mat<Scalar>> m_;
    std::vector<Mat<Scalar>> v_;
    long t_ = 0;
};

}  // namespace structlat::nn
