#pragma once

// Layers with hand-written backward passes. Each layer caches what its
// backward pass needs during forward, so one instance serves one
// forward/backward pair at a time.

#include "structlat/nn/param.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace structlat::nn {

/// Square-kernel 2-D convolution on channels-last tensors, "same" padding,
/// computed as im2col followed by one GEMM.
template <typename Scalar>
class Conv2d {
public:
    Conv2d() = default;
    Conv2d(const std::string& name, Index in_ch, Index out_ch, Index kernel, Index stride, Rng& rng,
           double gain = std::sqrt(2.0))
        : in_ch_(in_ch), out_ch_(out_ch), k_(kernel), stride_(stride), pad_((kernel - 1) / 2),
          weight_(name + ".weight", scaled_normal<Scalar>(kernel * kernel * in_ch, out_ch, kernel * kernel * in_ch,
                                                          gain, rng)),
          bias_(name + ".bias", Mat<Scalar>::Zero(1, out_ch)) {}

    Index in_channels() const { return in_ch_; }
    Index out_channels() const { return out_ch_; }

    Tensor4<Scalar> forward(const Tensor4<Scalar>& x) {
        if (x.c != in_ch_) {
            throw ArgumentError("Conv2d " + weight_.name + ": expected " + std::to_string(in_ch_) +
                                " input channels, got " + std::to_string(x.c));
        }
        in_n_ = x.n;
        in_h_ = x.h;
        in_w_ = x.w;
        out_h_ = (x.h + 2 * pad_ - k_) / stride_ + 1;
        out_w_ = (x.w + 2 * pad_ - k_) / stride_ + 1;
        Tensor4<Scalar> y(x.n, out_h_, out_w_, out_ch_);
        if (k_ == 1 && stride_ == 1) {
            cols_ = x.values;
        } else {
            im2col(x);
        }
        y.values.noalias() = cols_ * weight_.value;
        y.values.rowwise() += bias_.value.row(0);
        return y;
    }

    Tensor4<Scalar> backward(const Tensor4<Scalar>& dy) {
        weight_.grad.noalias() += cols_.transpose() * dy.values;
        bias_.grad.row(0) += dy.values.colwise().sum();
        Mat<Scalar> dcols = dy.values * weight_.value.transpose();
        if (k_ == 1 && stride_ == 1) {
            Tensor4<Scalar> dx(in_n_, in_h_, in_w_, in_ch_);
            dx.values = std::move(dcols);
            return dx;
        }
        return col2im(dcols);
    }

    void collect(ParamRefs<Scalar>& out) {
        out.push_back(&weight_);
        out.push_back(&bias_);
    }

private:
    void im2col(const Tensor4<Scalar>& x) {
        const Index patch = k_ * k_ * in_ch_;
        cols_.resize(x.n * out_h_ * out_w_, patch);
        for (Index b = 0; b < x.n; ++b) {
            for (Index oy = 0; oy < out_h_; ++oy) {
                for (Index ox = 0; ox < out_w_; ++ox) {
                    Scalar* dst = cols_.row((b * out_h_ + oy) * out_w_ + ox).data();
                    for (Index ky = 0; ky < k_; ++ky) {
                        const Index iy = oy * stride_ - pad_ + ky;
                        for (Index kx = 0; kx < k_; ++kx) {
                            const Index ix = ox * stride_ - pad_ + kx;
                            Scalar* cell = dst + (ky * k_ + kx) * in_ch_;
                            if (iy < 0 || iy >= x.h || ix < 0 || ix >= x.w) {
                                std::fill(cell, cell + in_ch_, Scalar(0));
                            } else {
                                const Scalar* src = x.values.row((b * x.h + iy) * x.w + ix).data();
                                std::copy(src, src + in_ch_, cell);
                            }
                        }
                    }
                }
            }
        }
    }

    Tensor4<Scalar> col2im(const Mat<Scalar>& dcols) const {
        Tensor4<Scalar> dx(in_n_, in_h_, in_w_, in_ch_);
        for (Index b = 0; b < in_n_; ++b) {
            for (Index oy = 0; oy < out_h_; ++oy) {
                for (Index ox = 0; ox < out_w_; ++ox) {
                    const Scalar* src = dcols.row((b * out_h_ + oy) * out_w_ + ox).data();
                    for (Index ky = 0; ky < k_; ++ky) {
                        const Index iy = oy * stride_ - pad_ + ky;
                        if (iy < 0 || iy >= in_h_) continue;
                        for (Index kx = 0; kx < k_; ++kx) {
                            const Index ix = ox * stride_ - pad_ + kx;
                            if (ix < 0 || ix >= in_w_) continue;
                            Scalar* dst = dx.values.row((b * in_h_ + iy) * in_w_ + ix).data();
                            const Scalar* cell = src + (ky * k_ + kx) * in_ch_;
                            for (Index ci = 0; ci < in_ch_; ++ci) dst[ci] += cell[ci];
                        }
                    }
                }
            }
        }
        return dx;
    }

    Index in_ch_ = 0, out_ch_ = 0, k_ = 1, stride_ = 1, pad_ = 0;
    Param<Scalar> weight_;
    Param<Scalar> bias_;
    Mat<Scalar> cols_;
    Index in_n_ = 0, in_h_ = 0, in_w_ = 0, out_h_ = 0, out_w_ = 0;
};

/// Nearest-neighbour 2x spatial upsampling.
template <typename Scalar>
Tensor4<Scalar> upsample2x(const Tensor4<Scalar>& x) {
    Tensor4<Scalar> y(x.n, 2 * x.h, 2 * x.w, x.c);
    for (Index b = 0; b < x.n; ++b)
        for (Index i = 0; i < y.h; ++i)
            for (Index j = 0; j < y.w; ++j)
                y.values.row((b * y.h + i) * y.w + j) = x.values.row((b * x.h + i / 2) * x.w + j / 2);
    return y;
}

template <typename Scalar>
Tensor4<Scalar> upsample2x_backward(const Tensor4<Scalar>& dy) {
    Tensor4<Scalar> dx(dy.n, dy.h / 2, dy.w / 2, dy.c);
    for (Index b = 0; b < dy.n; ++b)
        for (Index i = 0; i < dy.h; ++i)
            for (Index j = 0; j < dy.w; ++j)
                dx.values.row((b * dx.h + i / 2) * dx.w + j / 2) += dy.values.row((b * dy.h + i) * dy.w + j);
    return dx;
}

/// x * sigmoid(x).
template <typename Scalar>
class SiLU {
public:
    Mat<Scalar> forward(const Mat<Scalar>& x) {
        input_ = x;
        return x.array() / (Scalar(1) + (-x.array()).exp());
    }
    Mat<Scalar> backward(const Mat<Scalar>& dy) const {
        auto sig = Scalar(1) / (Scalar(1) + (-input_.array()).exp());
        return dy.array() * (sig * (Scalar(1) + input_.array() * (Scalar(1) - sig)));
    }
    Tensor4<Scalar> forward(const Tensor4<Scalar>& x) {
        Tensor4<Scalar> y = x;
        y.values = forward(x.values);
        return y;
    }
    Tensor4<Scalar> backward(const Tensor4<Scalar>& dy) const {
        Tensor4<Scalar> dx = dy;
        dx.values = backward(dy.values);
        return dx;
    }

private:
    Mat<Scalar> input_;
};

/// tanh-approximated GELU.
template <typename Scalar>
class GELU {
public:
    Mat<Scalar> forward(const Mat<Scalar>& x) {
        input_ = x;
        const Scalar k = Scalar(0.7978845608028654);
        auto th = (k * (x.array() + Scalar(0.044715) * x.array().cube())).tanh();
        return Scalar(0.5) * x.array() * (Scalar(1) + th);
    }
    Mat<Scalar> backward(const Mat<Scalar>& dy) const {
        const Scalar k = Scalar(0.7978845608028654);
        const auto& x = input_.array();
        Mat<Scalar> th = (k * (x + Scalar(0.044715) * x.cube())).tanh().matrix();
        auto t = th.array();
        auto d = Scalar(0.5) * (Scalar(1) + t) +
                 Scalar(0.5) * x * (Scalar(1) - t.square()) * k * (Scalar(1) + Scalar(3 * 0.044715) * x.square());
        return dy.array() * d;
    }

private:
    Mat<Scalar> input_;
};

/// y = x W + b on row vectors.
template <typename Scalar>
class Linear {
public:
    Linear() = default;
    Linear(const std::string& name, Index in, Index out, Rng& rng, double gain = 1.0)
        : weight_(name + ".weight", gain == 0.0 ? Mat<Scalar>(Mat<Scalar>::Zero(in, out))
                                                : scaled_normal<Scalar>(in, out, in, gain, rng)),
          bias_(name + ".bias", Mat<Scalar>::Zero(1, out)) {}

    Index in_features() const { return weight_.value.rows(); }
    Index out_features() const { return weight_.value.cols(); }

    Mat<Scalar> forward(const Mat<Scalar>& x) {
        if (x.cols() != weight_.value.rows()) {
            throw ArgumentError("Linear " + weight_.name + ": expected " + std::to_string(weight_.value.rows()) +
                                " features, got " + std::to_string(x.cols()));
        }
        input_ = x;
        Mat<Scalar> y = x * weight_.value;
        y.rowwise() += bias_.value.row(0);
        return y;
    }

    Mat<Scalar> backward(const Mat<Scalar>& dy) {
        weight_.grad.noalias() += input_.transpose() * dy;
        bias_.grad.row(0) += dy.colwise().sum();
        return dy * weight_.value.transpose();
    }

    void collect(ParamRefs<Scalar>& out) {
        out.push_back(&weight_);
        out.push_back(&bias_);
    }

    Param<Scalar>& weight() { return weight_; }

private:
    Param<Scalar> weight_;
    Param<Scalar> bias_;
    Mat<Scalar> input_;
};

/// Per-row layer normalization with learned scale and shift.
template <typename Scalar>
class LayerNorm {
public:
    LayerNorm() = default;
    LayerNorm(const std::string& name, Index dim)
        : gamma_(name + ".gamma", Mat<Scalar>::Ones(1, dim)), beta_(name + ".beta", Mat<Scalar>::Zero(1, dim)) {}

    Mat<Scalar> forward(const Mat<Scalar>& x) {
        const Index d = x.cols();
        Vec<Scalar> mean = x.rowwise().mean();
        xhat_ = x.colwise() - mean;
        Vec<Scalar> var = xhat_.array().square().rowwise().sum() / Scalar(d);
        inv_std_ = (var.array() + Scalar(1e-5)).rsqrt();
        xhat_.array().colwise() *= inv_std_.array();
        Mat<Scalar> y = xhat_.array().rowwise() * gamma_.value.row(0).array();
        y.rowwise() += beta_.value.row(0);
        return y;
    }

    Mat<Scalar> backward(const Mat<Scalar>& dy) {
        const Scalar d = Scalar(xhat_.cols());
        gamma_.grad.row(0) += (dy.array() * xhat_.array()).colwise().sum().matrix();
        beta_.grad.row(0) += dy.colwise().sum();
        Mat<Scalar> dxhat = dy.array().rowwise() * gamma_.value.row(0).array();
        Vec<Scalar> sum_d = dxhat.rowwise().sum();
        Vec<Scalar> sum_dx = (dxhat.array() * xhat_.array()).rowwise().sum();
        Mat<Scalar> dx = (d * dxhat.array() - xhat_.array().colwise() * sum_dx.array()).colwise() - sum_d.array();
        dx.array().colwise() *= inv_std_.array() / d;
        return dx;
    }

    void collect(ParamRefs<Scalar>& out) {
        out.push_back(&gamma_);
        out.push_back(&beta_);
    }

private:
    Param<Scalar> gamma_;
    Param<Scalar> beta_;
    Mat<Scalar> xhat_;
    Vec<Scalar> inv_std_;
};

/// Multi-head self-attention over `batch` independent sequences of `tokens`
/// rows each.
template <typename Scalar>
class SelfAttention {
public:
    SelfAttention() = default;
    SelfAttention(const std::string& name, Index dim, Index heads, Rng& rng, double out_gain = 1.0)
        : dim_(dim), heads_(heads), qkv_(name + ".qkv", dim, 3 * dim, rng), proj_(name + ".proj", dim, dim, rng, out_gain) {
        if (dim % heads != 0) throw ArgumentError("SelfAttention: dim must be divisible by heads");
    }

    Mat<Scalar> forward(const Mat<Scalar>& x, Index batch, Index tokens) {
        batch_ = batch;
        tokens_ = tokens;
        qkv_out_ = qkv_.forward(x);
        const Index dh = dim_ / heads_;
        const Scalar scale = Scalar(1) / std::sqrt(Scalar(dh));
        probs_.assign(static_cast<std::size_t>(batch * heads_), Mat<Scalar>());
        Mat<Scalar> attn(batch * tokens, dim_);
        for (Index b = 0; b < batch; ++b) {
            for (Index hd = 0; hd < heads_; ++hd) {
                auto q = qkv_out_.block(b * tokens, hd * dh, tokens, dh);
                auto k = qkv_out_.block(b * tokens, dim_ + hd * dh, tokens, dh);
                auto v = qkv_out_.block(b * tokens, 2 * dim_ + hd * dh, tokens, dh);
                Mat<Scalar> s = (q * k.transpose()) * scale;
                Vec<Scalar> mx = s.rowwise().maxCoeff();
                s = (s.colwise() - mx).array().exp();
                s.array().colwise() /= s.rowwise().sum().array();
                attn.block(b * tokens, hd * dh, tokens, dh).noalias() = s * v;
                probs_[static_cast<std::size_t>(b * heads_ + hd)] = std::move(s);
            }
        }
        return proj_.forward(attn);
    }

    Mat<Scalar> backward(const Mat<Scalar>& dy) {
        Mat<Scalar> dattn = proj_.backward(dy);
        const Index dh = dim_ / heads_;
        const Scalar scale = Scalar(1) / std::sqrt(Scalar(dh));
        Mat<Scalar> dqkv = Mat<Scalar>::Zero(qkv_out_.rows(), qkv_out_.cols());
        for (Index b = 0; b < batch_; ++b) {
            for (Index hd = 0; hd < heads_; ++hd) {
                const auto& p = probs_[static_cast<std::size_t>(b * heads_ + hd)];
                auto q = qkv_out_.block(b * tokens_, hd * dh, tokens_, dh);
                auto k = qkv_out_.block(b * tokens_, dim_ + hd * dh, tokens_, dh);
                auto v = qkv_out_.block(b * tokens_, 2 * dim_ + hd * dh, tokens_, dh);
                auto dout = dattn.block(b * tokens_, hd * dh, tokens_, dh);
                Mat<Scalar> dp = dout * v.transpose();
                dqkv.block(b * tokens_, 2 * dim_ + hd * dh, tokens_, dh).noalias() = p.transpose() * dout;
                Vec<Scalar> row_dot = (dp.array() * p.array()).rowwise().sum();
                Mat<Scalar> ds = p.array() * (dp.colwise() - row_dot).array();
                ds *= scale;
                dqkv.block(b * tokens_, hd * dh, tokens_, dh).noalias() = ds * k;
                dqkv.block(b * tokens_, dim_ + hd * dh, tokens_, dh).noalias() = ds.transpose() * q;
            }
        }
        return qkv_.backward(dqkv);
    }

    void collect(ParamRefs<Scalar>& out) {
        qkv_.collect(out);
        proj_.collect(out);
    }

private:
    Index dim_ = 0, heads_ = 1;
    Linear<Scalar> qkv_;
    Linear<Scalar> proj_;
    Mat<Scalar> qkv_out_;
    std::vector<Mat<Scalar>> probs_;
    Index batch_ = 0, tokens_ = 0;
};

/// x + conv(silu(conv(silu(x)))).
template <typename Scalar>
class ResBlock {
public:
    ResBlock() = default;
    ResBlock(const std::string& name, Index channels, Rng& rng)
        : conv1_(name + ".conv1", channels, channels, 3, 1, rng),
          conv2_(name + ".conv2", channels, channels, 3, 1, rng, 0.5) {}

    Tensor4<Scalar> forward(const Tensor4<Scalar>& x) {
        Tensor4<Scalar> h = conv2_.forward(act2_.forward(conv1_.forward(act1_.forward(x))));
        h.values += x.values;
        return h;
    }

    Tensor4<Scalar> backward(const Tensor4<Scalar>& dy) {
        Tensor4<Scalar> dx = act1_.backward(conv1_.backward(act2_.backward(conv2_.backward(dy))));
        dx.values += dy.values;
        return dx;
    }

    void collect(ParamRefs<Scalar>& out) {
        conv1_.collect(out);
        conv2_.collect(out);
    }

private:
    SiLU<Scalar> act1_, act2_;
    Conv2d<Scalar> conv1_, conv2_;
};

}  // namespace structlat::nn
