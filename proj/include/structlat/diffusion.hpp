#pragma once

#include "structlat/latents.hpp"
#include "structlat/nn/adam.hpp"
#include "structlat/nn/layers.hpp"

#include <cmath>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>

namespace structlat {

enum class ScheduleKind {
    Trig,    // alpha = cos(pi t / 2), beta = sin(pi t / 2); variance preserving
    Linear,  // alpha = 1 - t, beta = t
};

/// x_t = alpha(t) x_0 + beta(t) eps for t in [0, 1].
class NoiseSchedule {
public:
    explicit NoiseSchedule(ScheduleKind kind = ScheduleKind::Trig) : kind_(kind) {}

    double alpha(double t) const {
        return kind_ == ScheduleKind::Trig ? std::cos(0.5 * std::numbers::pi * t) : 1.0 - t;
    }
    double beta(double t) const {
        return kind_ == ScheduleKind::Trig ? std::sin(0.5 * std::numbers::pi * t) : t;
    }

    ScheduleKind kind() const { return kind_; }
    std::string name() const { return kind_ == ScheduleKind::Trig ? "trig" : "linear"; }
    static NoiseSchedule from_name(const std::string& name);

private:
    ScheduleKind kind_;
};

template <typename Scalar>
struct DiffusionBatchState {
    Tensor4<Scalar> x0;
    Tensor4<Scalar> eps;
    std::vector<double> t;  // one per sample
    Tensor4<Scalar> xt;
};

/// xt = alpha_t x0 + beta_t eps per sample; every t must lie in (0, 1).
template <typename Scalar>
DiffusionBatchState<Scalar> forward_diffuse(const Tensor4<Scalar>& x0, const std::vector<double>& t,
                                            const Tensor4<Scalar>& eps, const NoiseSchedule& schedule) {
    if (!x0.same_shape(eps)) {
        throw ArgumentError("forward_diffuse: noise shape " + eps.shape_string() + " != latent shape " +
                            x0.shape_string());
    }
    if (static_cast<Index>(t.size()) != x0.n) throw ArgumentError("forward_diffuse: need one time per sample");
    DiffusionBatchState<Scalar> s{x0, eps, t, Tensor4<Scalar>(x0.n, x0.h, x0.w, x0.c)};
    for (Index b = 0; b < x0.n; ++b) {
        const double tb = t[static_cast<std::size_t>(b)];
        if (!(tb > 0.0 && tb < 1.0)) {
            throw ArgumentError("forward_diffuse: t = " + std::to_string(tb) + " outside (0, 1)");
        }
        s.xt.sample(b) = static_cast<Scalar>(schedule.alpha(tb)) * x0.sample(b) +
                         static_cast<Scalar>(schedule.beta(tb)) * eps.sample(b);
    }
    return s;
}

/// Noise-prediction network interface. predict() caches what backward()
/// needs; backward() accumulates parameter gradients for d loss / d pred.
template <typename Scalar>
class Denoiser {
public:
    virtual ~Denoiser() = default;
    virtual Tensor4<Scalar> predict(const Tensor4<Scalar>& xt, const std::vector<double>& t,
                                    const std::vector<int>& labels) = 0;
    virtual void backward(const Tensor4<Scalar>& dpred) = 0;
    virtual void collect(nn::ParamRefs<Scalar>& out) = 0;
};

struct DenoiserArch {
    int width = 64;
    int depth = 3;
    int heads = 4;
    int mlp_ratio = 4;
    int num_classes = 12;  // label index num_classes is the null label
    bool precondition = true;  // eps_hat = c_skip(t) x_t + c_out(t) F, see TransformerDenoiser

    void validate() const;
    bool operator==(const DenoiserArch&) const = default;
};

/// Transformer over h*w latent tokens (patch size 1) of dimension c. Time and
/// label embeddings form a per-sample condition vector that each block adds
/// to its tokens through its own projection.
///
/// With arch.precondition the output is c_skip x_t + c_out F, where
/// c_skip = beta / (alpha^2 + beta^2) is the best linear noise estimate for
/// unit-variance latents and c_out = alpha / sqrt(alpha^2 + beta^2) its
/// residual scale. Near t = 1 the network error is then scaled by alpha, which
/// the sampler's division by alpha would otherwise amplify.
template <typename Scalar>
class TransformerDenoiser final : public Denoiser<Scalar> {
public:
    TransformerDenoiser() = default;
    TransformerDenoiser(const DenoiserArch& arch, Index tokens, Index channels, Rng& rng,
                        NoiseSchedule schedule = NoiseSchedule{})
        : arch_(arch), tokens_(tokens), channels_(channels), schedule_(schedule) {
        arch.validate();
        const Index d = arch.width;
        embed_ = nn::Linear<Scalar>("dit.embed", channels, d, rng);
        pos_ = nn::Param<Scalar>("dit.pos", nn::scaled_normal<Scalar>(tokens, d, 1, 0.02, rng));
        time1_ = nn::Linear<Scalar>("dit.time1", d, d, rng);
        time2_ = nn::Linear<Scalar>("dit.time2", d, d, rng);
        labels_ = nn::Param<Scalar>("dit.labels", nn::scaled_normal<Scalar>(arch.num_classes + 1, d, 1, 0.02, rng));
        for (int i = 0; i < arch.depth; ++i) {
            const std::string p = "dit.block" + std::to_string(i);
            Block b;
            b.cond = nn::Linear<Scalar>(p + ".cond", d, d, rng);
            b.ln1 = nn::LayerNorm<Scalar>(p + ".ln1", d);
            b.attn = nn::SelfAttention<Scalar>(p + ".attn", d, arch.heads, rng, 0.5);
            b.ln2 = nn::LayerNorm<Scalar>(p + ".ln2", d);
            b.fc1 = nn::Linear<Scalar>(p + ".fc1", d, arch.mlp_ratio * d, rng, std::sqrt(2.0));
            b.fc2 = nn::Linear<Scalar>(p + ".fc2", arch.mlp_ratio * d, d, rng, 0.5);
            blocks_.push_back(std::move(b));
        }
        ln_out_ = nn::LayerNorm<Scalar>("dit.ln_out", d);
        out_ = nn::Linear<Scalar>("dit.out", d, channels, rng, 0.0);
    }

    const DenoiserArch& arch() const { return arch_; }
    Index tokens() const { return tokens_; }
    Index channels() const { return channels_; }

    Tensor4<Scalar> predict(const Tensor4<Scalar>& xt, const std::vector<double>& t,
                            const std::vector<int>& labels) override {
        if (xt.h * xt.w != tokens_ || xt.c != channels_) {
            throw ArgumentError("TransformerDenoiser: expected " + std::to_string(tokens_) + " tokens of " +
                                std::to_string(channels_) + " channels, got " + xt.shape_string());
        }
        if (static_cast<Index>(t.size()) != xt.n) throw ArgumentError("TransformerDenoiser: need one time per sample");
        if (!labels.empty() && static_cast<Index>(labels.size()) != xt.n) {
            throw ArgumentError("TransformerDenoiser: need one label per sample");
        }
        batch_ = xt.n;
        const Index d = arch_.width;

        label_idx_.assign(static_cast<std::size_t>(batch_), arch_.num_classes);
        for (std::size_t b = 0; b < labels.size(); ++b) {
            const int l = labels[b];
            if (l < 0 || l > arch_.num_classes) throw ArgumentError("TransformerDenoiser: label out of range");
            label_idx_[b] = l;
        }
        Mat<Scalar> cond = time2_.forward(time_act_.forward(time1_.forward(timestep_embedding(t, d))));
        for (Index b = 0; b < batch_; ++b) cond.row(b) += labels_.value.row(label_idx_[static_cast<std::size_t>(b)]);
        const Mat<Scalar> cond_act = cond_act_.forward(cond);

        Mat<Scalar> h = embed_.forward(xt.values);
        for (Index b = 0; b < batch_; ++b) h.middleRows(b * tokens_, tokens_) += pos_.value;
        for (auto& blk : blocks_) {
            const Mat<Scalar> shift = blk.cond.forward(cond_act);
            for (Index b = 0; b < batch_; ++b) h.middleRows(b * tokens_, tokens_).rowwise() += shift.row(b);
            h += blk.attn.forward(blk.ln1.forward(h), batch_, tokens_);
            h += blk.fc2.forward(blk.act.forward(blk.fc1.forward(blk.ln2.forward(h))));
        }
        Tensor4<Scalar> out(xt.n, xt.h, xt.w, xt.c);
        out.values = out_.forward(ln_out_.forward(h));
        c_out_.assign(static_cast<std::size_t>(batch_), Scalar(1));
        if (arch_.precondition) {
            for (Index b = 0; b < batch_; ++b) {
                const double a = schedule_.alpha(t[static_cast<std::size_t>(b)]);
                const double s = schedule_.beta(t[static_cast<std::size_t>(b)]);
                const double norm = a * a + s * s;
                c_out_[static_cast<std::size_t>(b)] = static_cast<Scalar>(a / std::sqrt(norm));
                out.sample(b) = c_out_[static_cast<std::size_t>(b)] * out.sample(b) +
                                static_cast<Scalar>(s / norm) * xt.sample(b);
            }
        }
        return out;
    }

    void backward(const Tensor4<Scalar>& dpred) override {
        Mat<Scalar> dout = dpred.values;
        for (Index b = 0; b < batch_; ++b) {
            dout.middleRows(b * tokens_, tokens_) *= c_out_[static_cast<std::size_t>(b)];
        }
        Mat<Scalar> dh = ln_out_.backward(out_.backward(dout));
        Mat<Scalar> dcond_act = Mat<Scalar>::Zero(batch_, arch_.width);
        for (auto it = blocks_.rbegin(); it != blocks_.rend(); ++it) {
            dh += it->ln2.backward(it->fc1.backward(it->act.backward(it->fc2.backward(dh))));
            dh += it->ln1.backward(it->attn.backward(dh));
            Mat<Scalar> dshift(batch_, arch_.width);
            for (Index b = 0; b < batch_; ++b) dshift.row(b) = dh.middleRows(b * tokens_, tokens_).colwise().sum();
            dcond_act += it->cond.backward(dshift);
        }
        for (Index b = 0; b < batch_; ++b) pos_.grad += dh.middleRows(b * tokens_, tokens_);
        embed_.backward(dh);
        const Mat<Scalar> dcond = cond_act_.backward(dcond_act);
        for (Index b = 0; b < batch_; ++b) labels_.grad.row(label_idx_[static_cast<std::size_t>(b)]) += dcond.row(b);
        time1_.backward(time_act_.backward(time2_.backward(dcond)));
    }

    void collect(nn::ParamRefs<Scalar>& out) override {
        embed_.collect(out);
        out.push_back(&pos_);
        time1_.collect(out);
        time2_.collect(out);
        out.push_back(&labels_);
        for (auto& b : blocks_) {
            b.cond.collect(out);
            b.ln1.collect(out);
            b.attn.collect(out);
            b.ln2.collect(out);
            b.fc1.collect(out);
            b.fc2.collect(out);
        }
        ln_out_.collect(out);
        out_.collect(out);
    }

    /// Sinusoidal features of 1000 t: [cos(1000 t w_i), sin(1000 t w_i)].
    static Mat<Scalar> timestep_embedding(const std::vector<double>& t, Index dim) {
        const Index half = dim / 2;
        Mat<Scalar> e = Mat<Scalar>::Zero(static_cast<Index>(t.size()), dim);
        for (Index b = 0; b < e.rows(); ++b) {
            for (Index i = 0; i < half; ++i) {
                const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
                const double arg = 1000.0 * t[static_cast<std::size_t>(b)] * freq;
                e(b, i) = static_cast<Scalar>(std::cos(arg));
                e(b, half + i) = static_cast<Scalar>(std::sin(arg));
            }
        }
        return e;
    }

private:
    struct Block {
        nn::Linear<Scalar> cond;
        nn::LayerNorm<Scalar> ln1;
        nn::SelfAttention<Scalar> attn;
        nn::LayerNorm<Scalar> ln2;
        nn::Linear<Scalar> fc1;
        nn::GELU<Scalar> act;
        nn::Linear<Scalar> fc2;
    };

    DenoiserArch arch_;
    Index tokens_ = 0;
    Index channels_ = 0;
    NoiseSchedule schedule_;
    nn::Linear<Scalar> embed_;
    nn::Param<Scalar> pos_;
    nn::Linear<Scalar> time1_, time2_;
    nn::SiLU<Scalar> time_act_, cond_act_;
    nn::Param<Scalar> labels_;
    std::vector<Block> blocks_;
    nn::LayerNorm<Scalar> ln_out_;
    nn::Linear<Scalar> out_;
    Index batch_ = 0;
    std::vector<int> label_idx_;
    std::vector<Scalar> c_out_;
};

/// Denoiser plus the latent geometry it was built for.
template <typename Scalar>
struct DiffusionModel {
    LatentSpec spec;
    DenoiserArch arch;
    Index latent_h = 0;
    Index latent_w = 0;
    NoiseSchedule schedule;
    TransformerDenoiser<Scalar> net;

    DiffusionModel() = default;
    DiffusionModel(LatentSpec s, DenoiserArch a, Index h, Index w, std::uint64_t seed,
                   NoiseSchedule sched = NoiseSchedule{})
        : spec(std::move(s)), arch(a), latent_h(h), latent_w(w), schedule(sched) {
        spec.validate();
        Rng rng = derive_rng(seed, 0xD1F);
        net = TransformerDenoiser<Scalar>(arch, h * w, spec.c, rng, schedule);
    }

    nn::ParamRefs<Scalar> params() {
        nn::ParamRefs<Scalar> out;
        net.collect(out);
        return out;
    }
};

enum class MaskNormalization {
    AllChannels,   // divide by N*h*w*c regardless of c'
    KeptChannels,  // divide by N*h*w*c'
};

template <typename Scalar>
struct LossAndGrad {
    double value = 0;
    Tensor4<Scalar> grad;  // d value / d pred
};

/// ||(eps - pred) * mask||^2 / denominator, with its gradient in pred.
/// A null mask is the plain mean squared error.
template <typename Scalar>
LossAndGrad<Scalar> masked_mse(const Tensor4<Scalar>& eps, const Tensor4<Scalar>& pred, const ChannelMask* mask,
                               MaskNormalization norm = MaskNormalization::AllChannels) {
    if (!eps.same_shape(pred)) {
        throw ArgumentError("masked_mse: shape mismatch " + eps.shape_string() + " vs " + pred.shape_string());
    }
    if (mask && mask->channels() != eps.c) {
        throw ArgumentError("masked_mse: mask has " + std::to_string(mask->channels()) + " channels, latent has " +
                            std::to_string(eps.c));
    }
    const Index kept = mask ? mask->kept() : eps.c;
    const Index counted = norm == MaskNormalization::KeptChannels ? kept : eps.c;
    const double denom = static_cast<double>(eps.rows() * counted);
    LossAndGrad<Scalar> r;
    r.grad = Tensor4<Scalar>(pred.n, pred.h, pred.w, pred.c);
    auto diff = pred.values.leftCols(kept) - eps.values.leftCols(kept);
    r.value = (diff.template cast<double>()).squaredNorm() / denom;
    r.grad.values.leftCols(kept) = diff * static_cast<Scalar>(2.0 / denom);
    return r;
}

namespace detail {
template <typename Scalar>
void require_finite_prediction(const Tensor4<Scalar>& pred, const std::vector<double>& t, const char* where) {
    if (pred.all_finite()) return;
    std::ostringstream msg;
    msg << where << ": non-finite prediction (batch " << pred.shape_string() << ", t in [";
    double lo = 1, hi = 0;
    for (double v : t) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    msg << lo << ", " << hi << "])";
    throw NumericalError(msg.str());
}
}  // namespace detail

/// mean ||eps - eps_theta(x_t, t)||^2 over all elements.
template <typename Scalar>
double denoising_loss(Denoiser<Scalar>& model, const DiffusionBatchState<Scalar>& state,
                      const std::vector<int>& labels) {
    const Tensor4<Scalar> pred = model.predict(state.xt, state.t, labels);
    detail::require_finite_prediction(pred, state.t, "denoising_loss");
    return masked_mse(state.eps, pred, nullptr).value;
}

/// ||eps * mask - eps_theta(x_t * mask, t) * mask||^2 / denominator.
template <typename Scalar>
double augmented_denoising_loss(Denoiser<Scalar>& model, const DiffusionBatchState<Scalar>& state,
                                const std::vector<int>& labels, const ChannelMask& mask,
                                MaskNormalization norm = MaskNormalization::AllChannels) {
    if (mask.channels() != state.xt.c) {
        throw ArgumentError("augmented_denoising_loss: mask has " + std::to_string(mask.channels()) +
                            " channels, latent has " + std::to_string(state.xt.c));
    }
    const Tensor4<Scalar> pred = model.predict(apply_channel_mask(state.xt, mask), state.t, labels);
    detail::require_finite_prediction(pred, state.t, "augmented_denoising_loss");
    return masked_mse(state.eps, pred, &mask, norm).value;
}

struct DiffusionTrainOptions {
    bool augmented = true;
    nn::AdamOptions optimizer{1e-4, 0.9, 0.999, 1e-8, 0.0, 1.0};
    ChannelSampling sampling;
    MaskNormalization normalization = MaskNormalization::AllChannels;
    double time_epsilon = 1e-3;
    double label_dropout = 0.1;
};

struct DiffusionStepReport {
    long step = 0;
    int c_prime = 0;
    double loss = 0;
    double t_mean = 0;
    double t_min = 0;
    double t_max = 0;
    double grad_norm = 0;
};

/// Owns the optimizer for one denoiser, which must outlive the trainer.
template <typename Scalar>
class DiffusionTrainer {
public:
    DiffusionTrainer(Denoiser<Scalar>& model, LatentSpec spec, NoiseSchedule schedule, DiffusionTrainOptions opts,
                     int null_label)
        : model_(&model), spec_(std::move(spec)), schedule_(schedule), opts_(std::move(opts)),
          null_label_(null_label) {
        spec_.validate();
        opts_.sampling.validate(spec_);
        if (!(opts_.time_epsilon > 0 && opts_.time_epsilon < 0.5)) {
            throw ConfigError("diffusion.time_epsilon must be in (0, 0.5)");
        }
        nn::ParamRefs<Scalar> params;
        model.collect(params);
        optimizer_ = nn::Adam<Scalar>(params, opts_.optimizer);
    }

    /// One update. Draw order: t, eps, c' (augmented only), label dropout.
    DiffusionStepReport step(const Tensor4<Scalar>& x0, const std::vector<int>& labels, Rng& rng) {
        if (x0.c != spec_.c) throw ArgumentError("diffusion_train_step: latent channels do not match spec");
        DiffusionStepReport report;
        std::uniform_real_distribution<double> unif(opts_.time_epsilon, 1.0 - opts_.time_epsilon);
        std::vector<double> t(static_cast<std::size_t>(x0.n));
        for (auto& v : t) v = unif(rng);
        Tensor4<Scalar> eps(x0.n, x0.h, x0.w, x0.c);
        fill_normal(eps, rng);
        const auto state = forward_diffuse(x0, t, eps, schedule_);

        std::optional<ChannelMask> mask;
        report.c_prime = spec_.c;
        if (opts_.augmented) {
            report.c_prime = sample_channel_count(spec_, rng, opts_.sampling);
            mask.emplace(spec_.c, report.c_prime);
        }
        std::vector<int> used = labels;
        if (opts_.label_dropout > 0 && !used.empty()) {
            std::bernoulli_distribution drop(opts_.label_dropout);
            for (auto& l : used)
                if (drop(rng)) l = null_label_;
        }

        optimizer_.zero_grad();
        const Tensor4<Scalar> input = mask ? apply_channel_mask(state.xt, *mask) : state.xt;
        const Tensor4<Scalar> pred = model_->predict(input, t, used);
        detail::require_finite_prediction(pred, t, "diffusion_train_step");
        auto loss = masked_mse(state.eps, pred, mask ? &*mask : nullptr, opts_.normalization);
        if (!std::isfinite(loss.value)) {
            throw NumericalError("diffusion_train_step " + std::to_string(optimizer_.steps()) +
                                 ": non-finite loss (c'=" + std::to_string(report.c_prime) + ")");
        }
        model_->backward(loss.grad);
        report.grad_norm = optimizer_.step();
        report.loss = loss.value;
        report.t_mean = 0;
        report.t_min = 1;
        report.t_max = 0;
        for (double v : t) {
            report.t_mean += v / static_cast<double>(t.size());
            report.t_min = std::min(report.t_min, v);
            report.t_max = std::max(report.t_max, v);
        }
        report.step = optimizer_.steps();
        return report;
    }

    nn::Adam<Scalar>& optimizer() { return optimizer_; }
    const DiffusionTrainOptions& options() const { return opts_; }

private:
    Denoiser<Scalar>* model_;
    LatentSpec spec_;
    NoiseSchedule schedule_;
    DiffusionTrainOptions opts_;
    int null_label_;
    nn::Adam<Scalar> optimizer_;
};

template <typename Scalar>
DiffusionStepReport diffusion_train_step(DiffusionTrainer<Scalar>& trainer, const Tensor4<Scalar>& batch,
                                         const std::vector<int>& labels, Rng& rng) {
    return trainer.step(batch, labels, rng);
}

/// Time grid t_i = t_max (1 - i / steps), i = 0..steps.
std::vector<double> sampler_times(int steps, double t_max);

/// Deterministic probability-flow sampler. Each step is an Euler step of
/// d(x / alpha) = eps_theta d(beta / alpha), i.e.
///   x0_hat = (x - beta_i eps_hat) / alpha_i,  x <- alpha_{i+1} x0_hat + beta_{i+1} eps_hat,
/// from standard normal noise at t_max down to t = 0.
template <typename Scalar>
Tensor4<Scalar> sample_latents(Denoiser<Scalar>& model, Index h, Index w, Index c, const NoiseSchedule& schedule,
                               Index n, const std::vector<int>& labels, int steps, Rng& rng, double t_max = 1.0 - 1e-3,
                               Index chunk = 500) {
    if (steps < 1) throw ArgumentError("sample_latents: steps must be >= 1");
    if (n < 0) throw ArgumentError("sample_latents: negative sample count");
    if (!labels.empty() && static_cast<Index>(labels.size()) != n) {
        throw ArgumentError("sample_latents: need one label per sample");
    }
    Tensor4<Scalar> x(n, h, w, c);
    fill_normal(x, rng);
    const auto times = sampler_times(steps, t_max);
    std::vector<Tensor4<Scalar>> parts;
    for (Index start = 0; start < n; start += chunk) {
        const Index count = std::min(chunk, n - start);
        Tensor4<Scalar> xc(count, h, w, c);
        xc.values = x.values.middleRows(start * h * w, count * h * w);
        std::vector<int> lc;
        if (!labels.empty()) lc.assign(labels.begin() + start, labels.begin() + start + count);
        for (int i = 0; i < steps; ++i) {
            const double ti = times[static_cast<std::size_t>(i)];
            const double tn = times[static_cast<std::size_t>(i) + 1];
            const std::vector<double> tv(static_cast<std::size_t>(count), ti);
            const Tensor4<Scalar> eps_hat = model.predict(xc, tv, lc);
            detail::require_finite_prediction(eps_hat, tv, "sample_latents");
            const Scalar a = static_cast<Scalar>(schedule.alpha(ti));
            const Scalar bt = static_cast<Scalar>(schedule.beta(ti));
            const Scalar an = static_cast<Scalar>(schedule.alpha(tn));
            const Scalar bn = static_cast<Scalar>(schedule.beta(tn));
            Mat<Scalar> x0_hat = (xc.values - bt * eps_hat.values) / a;
            xc.values = an * x0_hat + bn * eps_hat.values;
        }
        parts.push_back(std::move(xc));
    }
    return concat_samples(parts);
}

template <typename Scalar>
LatentBatch<Scalar> sample_latents(DiffusionModel<Scalar>& model, const NoiseSchedule& schedule, Index n,
                                   const std::vector<int>& labels, int steps, Rng& rng) {
    return LatentBatch<Scalar>(
        sample_latents<Scalar>(model.net, model.latent_h, model.latent_w, model.spec.c, schedule, n, labels, steps, rng),
        model.spec);
}

}  // namespace structlat
