#pragma once

#include "structlat/nn/param.hpp"

#include <algorithm>

namespace structlat::nn {

/// Exponential moving average of one parameter set into another of the same
/// shapes. The effective decay ramps up as min(decay, (1+n)/(10+n)) so early
/// averages are not dominated by the initialization. decay 0 copies.
template <typename Scalar>
class Ema {
public:
    Ema(ParamRefs<Scalar> source, ParamRefs<Scalar> target, double decay)
        : source_(std::move(source)), target_(std::move(target)), decay_(decay) {
        if (source_.size() != target_.size()) throw ArgumentError("Ema: parameter lists differ in length");
        if (!(decay_ >= 0 && decay_ < 1)) throw ArgumentError("Ema: decay must be in [0, 1)");
        for (std::size_t i = 0; i < source_.size(); ++i) {
            if (source_[i]->value.rows() != target_[i]->value.rows() ||
                source_[i]->value.cols() != target_[i]->value.cols()) {
                throw ArgumentError("Ema: parameter shapes differ at " + source_[i]->name);
            }
        }
    }

    double current_decay() const {
        const double n = static_cast<double>(updates_);
        return std::min(decay_, (1.0 + n) / (10.0 + n));
    }

    void update() {
        const auto d = static_cast<Scalar>(current_decay());
        for (std::size_t i = 0; i < source_.size(); ++i) {
            target_[i]->value = d * target_[i]->value + (Scalar(1) - d) * source_[i]->value;
        }
        ++updates_;
    }

    long updates() const { return updates_; }
    void set_updates(long n) { updates_ = n; }

private:
    ParamRefs<Scalar> source_;
    ParamRefs<Scalar> target_;
    double decay_;
    long updates_ = 0;
};

}  // namespace structlat::nn
