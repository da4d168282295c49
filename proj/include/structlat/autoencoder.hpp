#pragma once

#include "structlat/dataset.hpp"
#include "structlat/feature_extractor.hpp"
#include "structlat/latents.hpp"
#include "structlat/nn/adam.hpp"
#include "structlat/nn/layers.hpp"

#include <memory>
#include <optional>
#include <sstream>

namespace structlat {

/// Residual conv encoder/decoder sizes. Stage s runs at resolution H / 2^s
/// with min(base_width * 2^s, max_width) channels.
struct AutoencoderArch {
    int base_width = 16;
    int max_width = 64;
    int blocks_per_stage = 1;

    void validate() const;
    std::vector<int> widths(int stages) const;
    bool operator==(const AutoencoderArch&) const = default;
};

/// Number of stride-2 stages for f; f must be a power of two.
int downsampling_stages(int f);

template <typename Scalar>
class Encoder {
public:
    Encoder() = default;
    Encoder(const LatentSpec& spec, const AutoencoderArch& arch, Rng& rng) {
        const int stages = downsampling_stages(spec.f);
        const auto w = arch.widths(stages);
        stem_ = nn::Conv2d<Scalar>("enc.stem", 3, w[0], 3, 1, rng);
        for (int s = 0; s < stages; ++s) {
            Stage st;
            for (int b = 0; b < arch.blocks_per_stage; ++b) {
                st.blocks.emplace_back("enc.s" + std::to_string(s) + ".block" + std::to_string(b), w[s], rng);
            }
            st.down = nn::Conv2d<Scalar>("enc.s" + std::to_string(s) + ".down", w[s], w[s + 1], 3, 2, rng);
            stages_.push_back(std::move(st));
        }
        mid_ = nn::ResBlock<Scalar>("enc.mid", w[stages], rng);
        out_ = nn::Conv2d<Scalar>("enc.out", w[stages], spec.c, 3, 1, rng, 1.0);
    }

    Tensor4<Scalar> forward(const Tensor4<Scalar>& x) {
        Tensor4<Scalar> h = stem_.forward(x);
        for (auto& st : stages_) {
            for (auto& b : st.blocks) h = b.forward(h);
            h = st.down.forward(h);
        }
        return out_.forward(act_.forward(mid_.forward(h)));
    }

    Tensor4<Scalar> backward(const Tensor4<Scalar>& dz) {
        Tensor4<Scalar> d = mid_.backward(act_.backward(out_.backward(dz)));
        for (auto it = stages_.rbegin(); it != stages_.rend(); ++it) {
            d = it->down.backward(d);
            for (auto b = it->blocks.rbegin(); b != it->blocks.rend(); ++b) d = b->backward(d);
        }
        return stem_.backward(d);
    }

    void collect(nn::ParamRefs<Scalar>& out) {
        stem_.collect(out);
        for (auto& st : stages_) {
            for (auto& b : st.blocks) b.collect(out);
            st.down.collect(out);
        }
        mid_.collect(out);
        out_.collect(out);
    }

private:
    struct Stage {
        std::vector<nn::ResBlock<Scalar>> blocks;
        nn::Conv2d<Scalar> down;
    };
    nn::Conv2d<Scalar> stem_;
    std::vector<Stage> stages_;
    nn::ResBlock<Scalar> mid_;
    nn::SiLU<Scalar> act_;
    nn::Conv2d<Scalar> out_;
};

template <typename Scalar>
class Decoder {
public:
    Decoder() = default;
    Decoder(const LatentSpec& spec, const AutoencoderArch& arch, Rng& rng) {
        const int stages = downsampling_stages(spec.f);
        const auto w = arch.widths(stages);
        in_ = nn::Conv2d<Scalar>("dec.in", spec.c, w[stages], 3, 1, rng);
        mid_ = nn::ResBlock<Scalar>("dec.mid", w[stages], rng);
        for (int s = stages - 1; s >= 0; --s) {
            Stage st;
            st.up = nn::Conv2d<Scalar>("dec.s" + std::to_string(s) + ".up", w[s + 1], w[s], 3, 1, rng);
            for (int b = 0; b < arch.blocks_per_stage; ++b) {
                st.blocks.emplace_back("dec.s" + std::to_string(s) + ".block" + std::to_string(b), w[s], rng);
            }
            stages_.push_back(std::move(st));
        }
        out_ = nn::Conv2d<Scalar>("dec.out", w[0], 3, 3, 1, rng, 1.0);
    }

    /// Unclamped output; decode() clamps it to [-1, 1].
    Tensor4<Scalar> forward(const Tensor4<Scalar>& z) {
        Tensor4<Scalar> h = mid_.forward(in_.forward(z));
        for (auto& st : stages_) {
            h = st.up.forward(nn::upsample2x(h));
            for (auto& b : st.blocks) h = b.forward(h);
        }
        return out_.forward(act_.forward(h));
    }

    Tensor4<Scalar> backward(const Tensor4<Scalar>& dy) {
        Tensor4<Scalar> d = act_.backward(out_.backward(dy));
        for (auto it = stages_.rbegin(); it != stages_.rend(); ++it) {
            for (auto b = it->blocks.rbegin(); b != it->blocks.rend(); ++b) d = b->backward(d);
            d = nn::upsample2x_backward(it->up.backward(d));
        }
        return in_.backward(mid_.backward(d));
    }

    void collect(nn::ParamRefs<Scalar>& out) {
        in_.collect(out);
        mid_.collect(out);
        for (auto& st : stages_) {
            st.up.collect(out);
            for (auto& b : st.blocks) b.collect(out);
        }
        out_.collect(out);
    }

private:
    struct Stage {
        nn::Conv2d<Scalar> up;
        std::vector<nn::ResBlock<Scalar>> blocks;
    };
    nn::Conv2d<Scalar> in_;
    nn::ResBlock<Scalar> mid_;
    std::vector<Stage> stages_;
    nn::SiLU<Scalar> act_;
    nn::Conv2d<Scalar> out_;
};

/// Per-channel latent moments used to standardize latents for diffusion.
struct LatentStats {
    Eigen::VectorXd mean;
    Eigen::VectorXd std;

    static constexpr double kStdFloor = 1e-6;
    bool operator==(const LatentStats& o) const { return mean == o.mean && std == o.std; }
};

/// Deterministic (non-variational) autoencoder.
template <typename Scalar>
struct AutoencoderModel {
    LatentSpec spec;
    AutoencoderArch arch;
    Encoder<Scalar> encoder;
    Decoder<Scalar> decoder;
    std::optional<LatentStats> latent_stats;

    AutoencoderModel() = default;
    AutoencoderModel(LatentSpec s, AutoencoderArch a, std::uint64_t seed) : spec(std::move(s)), arch(a) {
        spec.validate();
        arch.validate();
        Rng rng = derive_rng(seed, 0xAE);
        encoder = Encoder<Scalar>(spec, arch, rng);
        decoder = Decoder<Scalar>(spec, arch, rng);
    }

    nn::ParamRefs<Scalar> encoder_params() {
        nn::ParamRefs<Scalar> out;
        encoder.collect(out);
        return out;
    }
    nn::ParamRefs<Scalar> decoder_params() {
        nn::ParamRefs<Scalar> out;
        decoder.collect(out);
        return out;
    }
    nn::ParamRefs<Scalar> params() {
        auto out = encoder_params();
        decoder.collect(out);
        return out;
    }
};

template <typename Scalar>
LatentBatch<Scalar> encode(AutoencoderModel<Scalar>& model, const Tensor4<Scalar>& x) {
    check_image_batch(x, model.spec.f);
    return LatentBatch<Scalar>(model.encoder.forward(x), model.spec);
}

template <typename Scalar>
Tensor4<Scalar> decode(AutoencoderModel<Scalar>& model, const LatentBatch<Scalar>& z) {
    if (!(z.spec == model.spec)) throw ArgumentError("decode: latent spec does not match the model");
    Tensor4<Scalar> y = model.decoder.forward(z.data);
    y.values = y.values.cwiseMax(Scalar(-1)).cwiseMin(Scalar(1));
    return y;
}

/// Encodes in chunks of `batch` images.
template <typename Scalar>
Tensor4<Scalar> encode_all(AutoencoderModel<Scalar>& model, const Tensor4<Scalar>& images, Index batch = 256) {
    std::vector<Tensor4<Scalar>> parts;
    for (Index start = 0; start < images.n; start += batch) {
        const Index count = std::min(batch, images.n - start);
        Tensor4<Scalar> chunk(count, images.h, images.w, images.c);
        chunk.values = images.values.middleRows(start * images.h * images.w, count * images.h * images.w);
        parts.push_back(encode(model, chunk).data);
    }
    return concat_samples(parts);
}

/// Decodes (clamped) in chunks of `batch` latents.
template <typename Scalar>
Tensor4<Scalar> decode_all(AutoencoderModel<Scalar>& model, const Tensor4<Scalar>& latents, Index batch = 256) {
    std::vector<Tensor4<Scalar>> parts;
    for (Index start = 0; start < latents.n; start += batch) {
        const Index count = std::min(batch, latents.n - start);
        Tensor4<Scalar> chunk(count, latents.h, latents.w, latents.c);
        chunk.values = latents.values.middleRows(start * latents.h * latents.w, count * latents.h * latents.w);
        parts.push_back(decode(model, LatentBatch<Scalar>(std::move(chunk), model.spec)));
    }
    return concat_samples(parts);
}

struct ReconLossWeights {
    double l1 = 1.0;
    double perceptual = 0.1;
    double adversarial = 0.0;

    void validate() const;
    bool operator==(const ReconLossWeights&) const = default;
};

struct ReconLossReport {
    double total = 0;
    double l1 = 0;
    double perceptual = 0;
    double adversarial = 0;
};

/// w_l1 * mean|x - y| + w_perceptual * mean((F(x) - F(y))^2) + w_adv * (-mean D(y)).
///
/// F is the frozen extractor's feature map; it is required when the
/// perceptual weight is positive, and `disc` when the adversarial weight is.
/// When `grad_y` is given it receives d(total)/dy.
template <typename Scalar>
ReconLossReport reconstruction_loss(const Tensor4<Scalar>& x, const Tensor4<Scalar>& y, const ReconLossWeights& weights,
                                    FeatureExtractor<Scalar>* feature_net = nullptr,
                                    PatchDiscriminator<Scalar>* disc = nullptr, Tensor4<Scalar>* grad_y = nullptr) {
    weights.validate();
    if (!x.same_shape(y)) {
        throw ArgumentError("reconstruction_loss: shape mismatch " + x.shape_string() + " vs " + y.shape_string());
    }
    ReconLossReport r;
    const double count = static_cast<double>(x.size());
    Mat<Scalar> diff = y.values - x.values;
    r.l1 = static_cast<double>(diff.array().abs().template cast<double>().sum()) / count;
    if (grad_y) {
        *grad_y = Tensor4<Scalar>(y.n, y.h, y.w, y.c);
        if (weights.l1 > 0) {
            grad_y->values = diff.array().sign() * static_cast<Scalar>(weights.l1 / count);
        }
    }
    if (weights.perceptual > 0) {
        if (!feature_net) throw ArgumentError("reconstruction_loss: perceptual weight set without a feature network");
        const Tensor4<Scalar> fx = feature_net->feature_map(x);
        const Tensor4<Scalar> fy = feature_net->feature_map(y);
        Mat<Scalar> fd = fy.values - fx.values;
        const double fcount = static_cast<double>(fd.size());
        r.perceptual = static_cast<double>(fd.array().square().template cast<double>().sum()) / fcount;
        if (grad_y) {
            Tensor4<Scalar> dmap(fy.n, fy.h, fy.w, fy.c);
            dmap.values = fd * static_cast<Scalar>(2.0 * weights.perceptual / fcount);
            grad_y->values += feature_net->feature_map_backward(dmap).values;
        }
    }
    if (weights.adversarial > 0) {
        if (!disc) throw ArgumentError("reconstruction_loss: adversarial weight set without a discriminator");
        const Tensor4<Scalar> logits = disc->forward(y);
        r.adversarial = -static_cast<double>(logits.values.template cast<double>().mean());
        if (grad_y) {
            Tensor4<Scalar> dl = Tensor4<Scalar>::constant(logits.n, logits.h, logits.w, logits.c,
                                                           static_cast<Scalar>(-weights.adversarial /
                                                                               static_cast<double>(logits.size())));
            grad_y->values += disc->backward(dl).values;
        }
    }
    r.total = weights.l1 * r.l1 + weights.perceptual * r.perceptual + weights.adversarial * r.adversarial;
    return r;
}

/// Result of one forward/backward pass of l(x, D(z * mask)).
template <typename Scalar>
struct MaskedPass {
    ReconLossReport loss;
    Tensor4<Scalar> latent;       // E(x), unmasked
    Tensor4<Scalar> latent_grad;  // d loss / d E(x)
    Tensor4<Scalar> reconstruction;
};

/// Forward and backward of the reconstruction loss through the decoder and
/// (optionally) the encoder; parameter gradients accumulate. A null mask
/// runs the conventional unmasked path.
template <typename Scalar>
MaskedPass<Scalar> masked_reconstruction_pass(AutoencoderModel<Scalar>& model, const Tensor4<Scalar>& x,
                                              const ChannelMask* mask, const ReconLossWeights& weights,
                                              FeatureExtractor<Scalar>* feature_net,
                                              PatchDiscriminator<Scalar>* disc, bool backprop_encoder = true) {
    check_image_batch(x, model.spec.f);
    MaskedPass<Scalar> pass;
    pass.latent = model.encoder.forward(x);
    const Tensor4<Scalar> decoder_in = mask ? apply_channel_mask(pass.latent, *mask) : pass.latent;
    pass.reconstruction = model.decoder.forward(decoder_in);
    Tensor4<Scalar> grad_y;
    pass.loss = reconstruction_loss(x, pass.reconstruction, weights, feature_net, disc, &grad_y);
    if (!std::isfinite(pass.loss.total)) return pass;
    Tensor4<Scalar> dz = model.decoder.backward(grad_y);
    pass.latent_grad = mask ? apply_channel_mask(dz, *mask) : dz;
    if (backprop_encoder) model.encoder.backward(pass.latent_grad);
    return pass;
}

struct AeTrainOptions {
    bool structured = true;
    ReconLossWeights weights;
    nn::AdamOptions optimizer;
    nn::AdamOptions disc_optimizer{1e-4, 0.5, 0.9};
    int disc_width = 16;
    ChannelSampling sampling;
};

struct AeStepReport {
    long step = 0;
    int c_prime = 0;
    ReconLossReport loss;
    double grad_norm = 0;
    double disc_loss = 0;
};

/// Owns the optimizer (and discriminator, when the adversarial weight is
/// positive) for one AutoencoderModel. The model must outlive the trainer.
template <typename Scalar>
class AutoencoderTrainer {
public:
    AutoencoderTrainer(AutoencoderModel<Scalar>& model, AeTrainOptions opts,
                       FeatureExtractor<Scalar>* feature_net = nullptr, std::uint64_t seed = 0)
        : model_(&model), opts_(std::move(opts)), feature_net_(feature_net) {
        opts_.weights.validate();
        opts_.sampling.validate(model.spec);
        optimizer_ = nn::Adam<Scalar>(model.params(), opts_.optimizer);
        if (opts_.weights.adversarial > 0) {
            Rng rng = derive_rng(seed, 0xD15C);
            disc_ = std::make_unique<PatchDiscriminator<Scalar>>(opts_.disc_width, rng);
            nn::ParamRefs<Scalar> dp;
            disc_->collect(dp);
            disc_optimizer_ = nn::Adam<Scalar>(dp, opts_.disc_optimizer);
        }
    }

    /// One update on l(x, D(E(x) * mask_{c,c'})) with c' drawn from the grid;
    /// with structured = false the unmasked conventional objective is used.
    /// Throws NumericalError (without updating) on a non-finite loss.
    AeStepReport step(const Tensor4<Scalar>& batch, Rng& rng) {
        AeStepReport report;
        std::optional<ChannelMask> mask;
        if (opts_.structured) {
            report.c_prime = sample_channel_count(model_->spec, rng, opts_.sampling);
            mask.emplace(model_->spec.c, report.c_prime);
        } else {
            report.c_prime = model_->spec.c;
        }
        optimizer_.zero_grad();
        auto pass = masked_reconstruction_pass(*model_, batch, mask ? &*mask : nullptr, opts_.weights, feature_net_,
                                               disc_.get());
        report.loss = pass.loss;
        if (!std::isfinite(pass.loss.total)) {
            std::ostringstream msg;
            msg << "autoencoder step " << optimizer_.steps() << ": non-finite loss (c'=" << report.c_prime
                << ", l1=" << pass.loss.l1 << ", perceptual=" << pass.loss.perceptual
                << ", adversarial=" << pass.loss.adversarial << ")";
            throw NumericalError(msg.str());
        }
        report.grad_norm = optimizer_.step();
        if (disc_) report.disc_loss = discriminator_step(batch, pass.reconstruction);
        report.step = optimizer_.steps();
        return report;
    }

    nn::Adam<Scalar>& optimizer() { return optimizer_; }
    PatchDiscriminator<Scalar>* discriminator() { return disc_.get(); }
    nn::Adam<Scalar>* discriminator_optimizer() { return disc_ ? &disc_optimizer_ : nullptr; }
    const AeTrainOptions& options() const { return opts_; }

private:
    // Hinge loss: mean relu(1 - D(x)) + mean relu(1 + D(y)).
    double discriminator_step(const Tensor4<Scalar>& real, const Tensor4<Scalar>& fake) {
        disc_optimizer_.zero_grad();
        double loss = 0;
        for (int pass = 0; pass < 2; ++pass) {
            const Tensor4<Scalar>& in = pass == 0 ? real : fake;
            const Scalar sign = pass == 0 ? Scalar(-1) : Scalar(1);
            Tensor4<Scalar> logits = disc_->forward(in);
            const Scalar inv = Scalar(1) / Scalar(logits.size());
            Mat<Scalar> margin = (Scalar(1) + sign * logits.values.array()).matrix();
            loss += static_cast<double>(margin.cwiseMax(Scalar(0)).sum() * inv);
            Tensor4<Scalar> dl = logits;
            dl.values = (margin.array() > Scalar(0)).template cast<Scalar>() * sign * inv;
            disc_->backward(dl);
        }
        disc_optimizer_.step();
        return loss;
    }

    AutoencoderModel<Scalar>* model_;
    AeTrainOptions opts_;
    FeatureExtractor<Scalar>* feature_net_;
    nn::Adam<Scalar> optimizer_;
    std::unique_ptr<PatchDiscriminator<Scalar>> disc_;
    nn::Adam<Scalar> disc_optimizer_;
};

template <typename Scalar>
AeStepReport structured_ae_train_step(AutoencoderTrainer<Scalar>& trainer, const Tensor4<Scalar>& batch, Rng& rng) {
    return trainer.step(batch, rng);
}

struct FinetuneOptions {
    long steps = 200;
    Index batch_size = 32;
    nn::AdamOptions optimizer{1e-3};
    ReconLossWeights weights{1.0, 0.0, 0.0};
    std::uint64_t seed = 0;
};

/// Copy of `model` whose decoder was trained on E(x) * mask_{c,c_prime} with
/// the encoder frozen. `model` is not modified.
template <typename Scalar>
AutoencoderModel<Scalar> finetune_decoder_for_prefix(AutoencoderModel<Scalar>& model, int c_prime,
                                                     const Tensor4<Scalar>& images, const FinetuneOptions& opts,
                                                     FeatureExtractor<Scalar>* feature_net = nullptr) {
    if (c_prime <= 0 || c_prime > model.spec.c) {
        throw ArgumentError("finetune_decoder_for_prefix: c' = " + std::to_string(c_prime) + " outside (0, " +
                            std::to_string(model.spec.c) + "]");
    }
    if (images.n == 0) throw ArgumentError("finetune_decoder_for_prefix: empty dataset");
    const ChannelMask mask(model.spec.c, c_prime);
    const Tensor4<Scalar> latents = apply_channel_mask(encode_all(model, images), mask);
    AutoencoderModel<Scalar> tuned = model;
    nn::Adam<Scalar> optimizer(tuned.decoder_params(), opts.optimizer);
    for (long step = 0; step < opts.steps; ++step) {
        const auto idx = batch_indices(images.n, opts.batch_size, opts.seed, step);
        const Tensor4<Scalar> x = gather_samples(images, idx);
        const Tensor4<Scalar> z = gather_samples(latents, idx);
        optimizer.zero_grad();
        Tensor4<Scalar> y = tuned.decoder.forward(z);
        Tensor4<Scalar> grad_y;
        const auto loss = reconstruction_loss<Scalar>(x, y, opts.weights, feature_net, nullptr, &grad_y);
        if (!std::isfinite(loss.total)) {
            throw NumericalError("finetune_decoder_for_prefix: non-finite loss at step " + std::to_string(step));
        }
        tuned.decoder.backward(grad_y);
        optimizer.step();
    }
    return tuned;
}

/// Per-channel mean/std of E(x) over `images`, std floored at 1e-6.
template <typename Scalar>
LatentStats compute_latent_stats(AutoencoderModel<Scalar>& model, const Tensor4<Scalar>& images, Index batch = 256) {
    if (images.n == 0) throw ArgumentError("compute_latent_stats: empty dataset");
    const Index c = model.spec.c;
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(c);
    Eigen::VectorXd sumsq = Eigen::VectorXd::Zero(c);
    double count = 0;
    for (Index start = 0; start < images.n; start += batch) {
        const Index n = std::min(batch, images.n - start);
        Tensor4<Scalar> chunk(n, images.h, images.w, images.c);
        chunk.values = images.values.middleRows(start * images.h * images.w, n * images.h * images.w);
        const Mat<double> z = encode(model, chunk).data.values.template cast<double>();
        sum += z.colwise().sum().transpose();
        sumsq += z.array().square().colwise().sum().matrix().transpose();
        count += static_cast<double>(z.rows());
    }
    LatentStats stats;
    stats.mean = sum / count;
    Eigen::ArrayXd var = (sumsq / count).array() - stats.mean.array().square();
    stats.std = var.max(0.0).sqrt().max(LatentStats::kStdFloor).matrix();
    return stats;
}

/// (z - mean) / std per channel.
template <typename Scalar>
Tensor4<Scalar> standardize_latents(const Tensor4<Scalar>& z, const LatentStats& stats) {
    Tensor4<Scalar> out = z;
    const RowVec<Scalar> mean = stats.mean.transpose().cast<Scalar>();
    const RowVec<Scalar> inv = stats.std.cwiseInverse().transpose().cast<Scalar>();
    out.values.rowwise() -= mean;
    out.values.array().rowwise() *= inv.array();
    return out;
}

template <typename Scalar>
Tensor4<Scalar> destandardize_latents(const Tensor4<Scalar>& z, const LatentStats& stats) {
    Tensor4<Scalar> out = z;
    out.values.array().rowwise() *= stats.std.transpose().cast<Scalar>().array();
    out.values.rowwise() += stats.mean.transpose().cast<Scalar>();
    return out;
}

}  // namespace structlat
