#pragma once

#include "structlat/nn/layers.hpp"

namespace structlat {

struct FeatureExtractorArch {
    int width = 16;
    int feature_dim = 64;
    int num_classes = 12;

    bool operator==(const FeatureExtractorArch&) const = default;
};

/// Small convolutional classifier. Its last spatial feature map drives the
/// perceptual loss; its penultimate dense activations are the features behind
/// the Frechet distance proxy.
///
///   conv3x3(3->w) silu conv3x3/2(w->2w) silu conv3x3/2(2w->2w) silu   [map]
///   global-avg-pool  dense(2w->d) silu                               [features]
///   dense(d->classes)                                                 [logits]
template <typename Scalar>
class FeatureExtractor {
public:
    FeatureExtractor() = default;
    FeatureExtractor(const FeatureExtractorArch& arch, Rng& rng)
        : arch_(arch),
          conv1_("fx.conv1", 3, arch.width, 3, 1, rng),
          conv2_("fx.conv2", arch.width, 2 * arch.width, 3, 2, rng),
          conv3_("fx.conv3", 2 * arch.width, 2 * arch.width, 3, 2, rng),
          fc1_("fx.fc1", 2 * arch.width, arch.feature_dim, rng, std::sqrt(2.0)),
          fc2_("fx.fc2", arch.feature_dim, arch.num_classes, rng) {
        if (arch.feature_dim < 16) throw ArgumentError("FeatureExtractor: feature dimension must be >= 16");
        if (arch.num_classes < 1) throw ArgumentError("FeatureExtractor: need at least one class");
    }

    const FeatureExtractorArch& arch() const { return arch_; }
    int feature_dim() const { return arch_.feature_dim; }

    Tensor4<Scalar> feature_map(const Tensor4<Scalar>& x) {
        if (x.c != 3) throw ArgumentError("FeatureExtractor: expected 3-channel images, got " + x.shape_string());
        return a3_.forward(conv3_.forward(a2_.forward(conv2_.forward(a1_.forward(conv1_.forward(x))))));
    }

    /// Gradient with respect to the image for a gradient on the last
    /// feature_map() output. Accumulates parameter gradients as a side effect;
    /// callers that keep the extractor frozen never step them.
    Tensor4<Scalar> feature_map_backward(const Tensor4<Scalar>& dmap) {
        return conv1_.backward(a1_.backward(conv2_.backward(a2_.backward(conv3_.backward(a3_.backward(dmap))))));
    }

    Mat<Scalar> features(const Tensor4<Scalar>& x) { return head_features(feature_map(x)); }

    Mat<Scalar> logits(const Tensor4<Scalar>& x) { return fc2_.forward(features(x)); }

    /// Backward from logits through the whole network.
    void logits_backward(const Mat<Scalar>& dlogits) {
        Mat<Scalar> dpooled = fc1_.backward(af_.backward(fc2_.backward(dlogits)));
        Tensor4<Scalar> dmap(map_n_, map_h_, map_w_, dpooled.cols());
        const Scalar inv = Scalar(1) / Scalar(map_h_ * map_w_);
        for (Index b = 0; b < map_n_; ++b) dmap.sample(b).rowwise() = dpooled.row(b) * inv;
        feature_map_backward(dmap);
    }

    void collect(nn::ParamRefs<Scalar>& out) {
        conv1_.collect(out);
        conv2_.collect(out);
        conv3_.collect(out);
        fc1_.collect(out);
        fc2_.collect(out);
    }

private:
    Mat<Scalar> head_features(const Tensor4<Scalar>& map) {
        map_n_ = map.n;
        map_h_ = map.h;
        map_w_ = map.w;
        Mat<Scalar> pooled(map.n, map.c);
        for (Index b = 0; b < map.n; ++b) pooled.row(b) = map.sample(b).colwise().mean();
        return af_.forward(fc1_.forward(pooled));
    }

    FeatureExtractorArch arch_;
    nn::Conv2d<Scalar> conv1_, conv2_, conv3_;
    nn::SiLU<Scalar> a1_, a2_, a3_, af_;
    nn::Linear<Scalar> fc1_, fc2_;
    Index map_n_ = 0, map_h_ = 0, map_w_ = 0;
};

/// Patch discriminator producing one logit per (H/4 x W/4) cell.
template <typename Scalar>
class PatchDiscriminator {
public:
    PatchDiscriminator() = default;
    PatchDiscriminator(int width, Rng& rng)
        : conv1_("disc.conv1", 3, width, 3, 2, rng),
          conv2_("disc.conv2", width, 2 * width, 3, 2, rng),
          conv3_("disc.conv3", 2 * width, 1, 3, 1, rng, 1.0) {}

    Tensor4<Scalar> forward(const Tensor4<Scalar>& x) {
        return conv3_.forward(a2_.forward(conv2_.forward(a1_.forward(conv1_.forward(x)))));
    }

    Tensor4<Scalar> backward(const Tensor4<Scalar>& dy) {
        return conv1_.backward(a1_.backward(conv2_.backward(a2_.backward(conv3_.backward(dy)))));
    }

    void collect(nn::ParamRefs<Scalar>& out) {
        conv1_.collect(out);
        conv2_.collect(out);
        conv3_.collect(out);
    }

private:
    nn::Conv2d<Scalar> conv1_, conv2_, conv3_;
    nn::SiLU<Scalar> a1_, a2_;
};

}  // namespace structlat
