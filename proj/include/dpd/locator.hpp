#pragma once

// Confidence/threshold crowd locator with an independent proxy threshold
// head and an exponential-moving-average twin.

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dpd/ops.hpp"
#include "dpd/tensor.hpp"

namespace dpd {

struct ConvLayer {
    Param weight;
    Param bias;
    std::size_t stride = 1;
    std::size_t pad = 1;

    ConvLayer() = default;
    ConvLayer(const std::string& name, std::size_t cout, std::size_t cin, std::size_t k, std::size_t stride_)
        : weight(name + ".weight", {cout, cin, k, k}), bias(name + ".bias", {cout}), stride(stride_), pad((k - 1) / 2) {}

    Tensor forward(const Tensor& x) const { return ops::conv2d(x, weight.value, bias.value, stride, pad); }

    /// Accumulates parameter grads; returns the input grad when requested.
    Tensor backward(const Tensor& x, const Tensor& grad_out, bool want_input_grad) {
        Tensor gin;
        if (want_input_grad) gin = Tensor(x.shape());
        ops::conv2d_backward(x, weight.value, stride, pad, grad_out, want_input_grad ? &gin : nullptr, weight.grad,
                             bias.grad);
        return gin;
    }

    template <class Rng>
    void init(Rng& rng) {
        const std::size_t k2 = weight.value.dim(2) * weight.value.dim(3);
        glorot_uniform(weight.value, weight.value.dim(1) * k2, weight.value.dim(0) * k2, rng);
        bias.value.fill(0.0);
    }
};

/// Two stride-2 convolutions, 3 -> 8 -> 16 channels; output at 1/4 resolution.
struct Encoder {
    ConvLayer c1, c2;
    explicit Encoder(const std::string& p = "encoder") : c1(p + ".c1", 8, 3, 3, 2), c2(p + ".c2", 16, 8, 3, 2) {}
};

/// 16 -> 8 at feature resolution, x4 bilinear upsample, 8 -> 1 logit.
struct Decoder {
    ConvLayer c1, c2;
    explicit Decoder(const std::string& p = "decoder") : c1(p + ".c1", 8, 16, 3, 1), c2(p + ".c2", 1, 8, 3, 1) {}
};

/// Same layout as the decoder, fed with confidence-modulated features.
struct ThresholdHead {
    ConvLayer c1, c2;
    explicit ThresholdHead(const std::string& p = "threshold") : c1(p + ".c1", 8, 16, 3, 1), c2(p + ".c2", 1, 8, 3, 1) {}
};

struct LocatorNet {
    Encoder encoder;
    Decoder decoder;
    ThresholdHead threshold;

    explicit LocatorNet(const std::string& p = "main")
        : encoder(p + ".encoder"), decoder(p + ".decoder"), threshold(p + ".threshold") {}
};

inline std::vector<ConvLayer*> layers(ThresholdHead& t) { return {&t.c1, &t.c2}; }
inline std::vector<ConvLayer*> layers(LocatorNet& n) {
    return {&n.encoder.c1, &n.encoder.c2, &n.decoder.c1, &n.decoder.c2, &n.threshold.c1, &n.threshold.c2};
}

template <class Module>
std::vector<Param*> parameters(Module& m) {
    std::vector<Param*> out;
    for (auto* l : layers(m)) {
        out.push_back(&l->weight);
        out.push_back(&l->bias);
    }
    return out;
}

template <class Module>
void zero_grad(Module& m) {
    for (auto* p : parameters(m)) p->zero_grad();
}

/// Main model, proxy threshold head and momentum twin.
struct LocatorParams {
    LocatorNet main{"main"};
    ThresholdHead dpd_threshold{"dpd_threshold"};
    LocatorNet momentum{"momentum"};

    /// Every parameter, in a fixed order (main, dpd_threshold, momentum).
    std::vector<Param*> all() {
        auto out = parameters(main);
        for (auto* p : parameters(dpd_threshold)) out.push_back(p);
        for (auto* p : parameters(momentum)) out.push_back(p);
        return out;
    }
};

/// Fresh parameters: main and dpd_threshold drawn independently, momentum a copy of main.
inline LocatorParams make_locator_params(std::uint64_t seed) {
    LocatorParams p;
    std::mt19937_64 rng(seed);
    for (auto* l : layers(p.main)) l->init(rng);
    for (auto* l : layers(p.dpd_threshold)) l->init(rng);
    auto src = parameters(p.main);
    auto dst = parameters(p.momentum);
    for (std::size_t i = 0; i < src.size(); ++i) dst[i]->value = src[i]->value;
    return p;
}

struct LocatorConfig {
    double t_lo = 0.05;
    double t_hi = 0.95;
    double tau = 0.1;
    /// Replaces the learned threshold map by a constant when set.
    std::optional<double> fixed_threshold;
};

inline constexpr std::size_t kFeatureStride = 4;
/// Images in [0,1] are shifted by this constant before the first convolution.
inline constexpr double kInputCenter = 0.5;

struct LocatorOutput {
    Tensor confidence;
    Tensor threshold;
    Tensor binary_soft;
    Tensor binary_hard;
};

struct EncoderTrace {
    Tensor input, z1, a1, z2, features;
};

struct DecoderTrace {
    Tensor z1, a1, up, logit, confidence;
};

struct ThresholdTrace {
    Tensor pooled_conf, modulated, z1, a1, up, logit, squashed, threshold;
};

struct LocatorTrace {
    EncoderTrace enc;
    DecoderTrace dec;
    ThresholdTrace thr;
    LocatorOutput out;
};

inline void require_locator_input(const Tensor& image) {
    if (image.rank() != 3 || image.dim(0) != 3) {
        throw ShapeError("locator: expected [3,H,W] image, got " + shape_string(image.shape()));
    }
    if (image.dim(1) % kFeatureStride || image.dim(2) % kFeatureStride) {
        throw ShapeError("locator: spatial axes 1,2 of " + shape_string(image.shape()) + " must be divisible by 4");
    }
}

inline EncoderTrace encoder_forward(const Encoder& e, const Tensor& image) {
    EncoderTrace t;
    t.input = image;
    for (auto& v : t.input.data()) v -= kInputCenter;
    t.z1 = e.c1.forward(t.input);
    t.a1 = ops::relu(t.z1);
    t.z2 = e.c2.forward(t.a1);
    t.features = ops::relu(t.z2);
    return t;
}

inline DecoderTrace decoder_forward(const Decoder& d, const Tensor& features) {
    DecoderTrace t;
    t.z1 = d.c1.forward(features);
    t.a1 = ops::relu(t.z1);
    t.up = ops::bilinear_upsample(t.a1, kFeatureStride);
    t.logit = d.c2.forward(t.up);
    t.confidence = ops::sigmoid(t.logit);
    return t;
}

/// threshold = t_lo + (t_hi - t_lo) * sigmoid(h_T(features * avgpool(confidence))).
inline ThresholdTrace threshold_forward(const ThresholdHead& h, const Tensor& features, const Tensor& confidence,
                                        const LocatorConfig& cfg) {
    ThresholdTrace t;
    t.pooled_conf = ops::avg_pool(confidence, kFeatureStride);
    t.modulated = ops::modulate(features, t.pooled_conf);
    t.z1 = h.c1.forward(t.modulated);
    t.a1 = ops::relu(t.z1);
    t.up = ops::bilinear_upsample(t.a1, kFeatureStride);
    t.logit = h.c2.forward(t.up);
    t.squashed = ops::sigmoid(t.logit);
    t.threshold = t.squashed;
    for (auto& v : t.threshold.data()) v = cfg.t_lo + (cfg.t_hi - cfg.t_lo) * v;
    return t;
}

/// Soft map sigmoid((c - t)/tau) and hard map [c >= t].
inline std::pair<Tensor, Tensor> binarize(const Tensor& confidence, const Tensor& threshold, double tau) {
    Tensor::require_same_shape(confidence, threshold, "binarize");
    Tensor soft(confidence.shape()), hard(confidence.shape());
    for (std::size_t i = 0; i < confidence.size(); ++i) {
        soft[i] = ops::sigmoid((confidence[i] - threshold[i]) / tau);
        hard[i] = confidence[i] >= threshold[i] ? 1.0 : 0.0;
    }
    return {std::move(soft), std::move(hard)};
}

using FeatureHook = std::function<void(Tensor&)>;

/// Full forward pass keeping every intermediate needed by backward.
/// `feature_hook`, when given, edits the encoder output in place before the heads.
inline LocatorTrace forward_trace(const LocatorNet& net, const Tensor& image, const LocatorConfig& cfg,
                                  const FeatureHook& feature_hook = {}) {
    require_locator_input(image);
    LocatorTrace t;
    t.enc = encoder_forward(net.encoder, image);
    if (feature_hook) feature_hook(t.enc.features);
    t.dec = decoder_forward(net.decoder, t.enc.features);
    t.out.confidence = t.dec.confidence;
    if (cfg.fixed_threshold) {
        t.out.threshold = Tensor(t.out.confidence.shape(), *cfg.fixed_threshold);
    } else {
        t.thr = threshold_forward(net.threshold, t.enc.features, t.dec.confidence, cfg);
        t.out.threshold = t.thr.threshold;
    }
    std::tie(t.out.binary_soft, t.out.binary_hard) = binarize(t.out.confidence, t.out.threshold, cfg.tau);
    return t;
}

inline LocatorOutput forward(const LocatorNet& net, const Tensor& image, const LocatorConfig& cfg = {}) {
    return forward_trace(net, image, cfg).out;
}

inline LocatorOutput forward(const LocatorParams& params, const Tensor& image, const LocatorConfig& cfg = {}) {
    return forward(params.main, image, cfg);
}

/// Proxy-domain prediction: dpd_threshold applied to the momentum model's
/// features and confidence.
struct DpdTrace {
    LocatorTrace momentum;
    ThresholdTrace thr;
    Tensor binary_soft, binary_hard;
};

inline DpdTrace dpd_forward_trace(const LocatorParams& params, const Tensor& image, const LocatorConfig& cfg) {
    DpdTrace d;
    d.momentum = forward_trace(params.momentum, image, cfg);
    d.thr = threshold_forward(params.dpd_threshold, d.momentum.enc.features, d.momentum.out.confidence, cfg);
    std::tie(d.binary_soft, d.binary_hard) = binarize(d.momentum.out.confidence, d.thr.threshold, cfg.tau);
    return d;
}

inline Tensor forward_dpd_threshold(const LocatorParams& params, const Tensor& image, const LocatorConfig& cfg = {}) {
    require_locator_input(image);
    const auto enc = encoder_forward(params.momentum.encoder, image);
    const auto dec = decoder_forward(params.momentum.decoder, enc.features);
    return threshold_forward(params.dpd_threshold, enc.features, dec.confidence, cfg).threshold;
}

// ---------------------------------------------------------------------------
// Backward

struct ThresholdInputGrads {
    Tensor features;
    Tensor confidence;
};

/// Back-propagates dL/dthreshold through a threshold head. Input grads are
/// only produced when `want_input_grads` is set.
inline ThresholdInputGrads threshold_backward(ThresholdHead& h, const ThresholdTrace& t, const Tensor& features,
                                              const Tensor& grad_threshold, const LocatorConfig& cfg,
                                              bool want_input_grads) {
    Tensor g = grad_threshold;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= (cfg.t_hi - cfg.t_lo) * t.squashed[i] * (1.0 - t.squashed[i]);
    Tensor g_up = h.c2.backward(t.up, g, true);
    Tensor g_a1 = ops::bilinear_upsample_backward(t.a1.shape(), kFeatureStride, g_up);
    Tensor g_z1 = ops::relu_backward(t.z1, g_a1);
    Tensor g_mod = h.c1.backward(t.modulated, g_z1, want_input_grads);
    ThresholdInputGrads out;
    if (want_input_grads) {
        auto [g_feat, g_pool] = ops::modulate_backward(features, t.pooled_conf, g_mod);
        const Shape conf_shape{1, features.dim(1) * kFeatureStride, features.dim(2) * kFeatureStride};
        out.features = std::move(g_feat);
        out.confidence = ops::avg_pool_backward(conf_shape, kFeatureStride, g_pool);
    }
    return out;
}

/// Gradients of (soft map, threshold) w.r.t. confidence and threshold.
inline std::pair<Tensor, Tensor> binarize_backward(const Tensor& soft, const Tensor& grad_soft, double tau) {
    Tensor gc(soft.shape()), gt(soft.shape());
    for (std::size_t i = 0; i < soft.size(); ++i) {
        const double d = grad_soft[i] * soft[i] * (1.0 - soft[i]) / tau;
        gc[i] = d;
        gt[i] = -d;
    }
    return {std::move(gc), std::move(gt)};
}

/// Accumulates parameter grads of `net` given dL/dconfidence and dL/dbinary_soft.
/// Either gradient may be empty (treated as zero).
inline void backward(LocatorNet& net, const LocatorTrace& t, const Tensor& grad_confidence, const Tensor& grad_soft,
                     const LocatorConfig& cfg) {
    Tensor g_conf(t.out.confidence.shape());
    if (!grad_confidence.empty()) g_conf += grad_confidence;
    Tensor g_feat(t.enc.features.shape());
    if (!grad_soft.empty()) {
        auto [gc, gthr] = binarize_backward(t.out.binary_soft, grad_soft, cfg.tau);
        g_conf += gc;
        if (!cfg.fixed_threshold) {
            auto in = threshold_backward(net.threshold, t.thr, t.enc.features, gthr, cfg, true);
            g_conf += in.confidence;
            g_feat += in.features;
        }
    }
    Tensor g_logit = ops::sigmoid_backward(t.dec.confidence, g_conf);
    Tensor g_up = net.decoder.c2.backward(t.dec.up, g_logit, true);
    Tensor g_a1 = ops::bilinear_upsample_backward(t.dec.a1.shape(), kFeatureStride, g_up);
    Tensor g_z1 = ops::relu_backward(t.dec.z1, g_a1);
    g_feat += net.decoder.c1.backward(t.enc.features, g_z1, true);

    Tensor g_z2 = ops::relu_backward(t.enc.z2, g_feat);
    Tensor g_ea1 = net.encoder.c2.backward(t.enc.a1, g_z2, true);
    Tensor g_ez1 = ops::relu_backward(t.enc.z1, g_ea1);
    net.encoder.c1.backward(t.enc.input, g_ez1, false);
}

// ---------------------------------------------------------------------------

/// theta_momentum <- mu * theta_momentum + (1 - mu) * theta_main over encoder, decoder, threshold.
inline void momentum_update(LocatorParams& params, double mu) {
    if (!(mu >= 0.0 && mu <= 1.0)) throw ConfigError("momentum_update: mu must lie in [0,1]");
    auto src = parameters(params.main);
    auto dst = parameters(params.momentum);
    for (std::size_t i = 0; i < src.size(); ++i) {
        auto s = src[i]->value.data();
        auto d = dst[i]->value.data();
        for (std::size_t j = 0; j < s.size(); ++j) d[j] = mu * d[j] + (1.0 - mu) * s[j];
    }
}

/// Fraction of pixels whose confidence/threshold ordering contradicts the ground truth.
inline double irrationality_rate(const LocatorOutput& out, const Tensor& gt) {
    Tensor::require_same_shape(out.confidence, gt, "irrationality_rate");
    std::size_t bad = 0;
    for (std::size_t i = 0; i < gt.size(); ++i) {
        const bool fires = out.confidence[i] >= out.threshold[i];
        const bool positive = gt[i] > 0.5;
        if (fires != positive) ++bad;
    }
    return gt.size() ? static_cast<double>(bad) / static_cast<double>(gt.size()) : 0.0;
}

/// 32-dim embedding: per-channel global mean and max of the encoder features.
inline std::vector<double> pooled_embedding(const LocatorNet& net, const Tensor& image) {
    require_locator_input(image);
    const auto enc = encoder_forward(net.encoder, image);
    const std::size_t c = enc.features.dim(0), plane = enc.features.dim(1) * enc.features.dim(2);
    std::vector<double> out(2 * c, 0.0);
    for (std::size_t ch = 0; ch < c; ++ch) {
        double s = 0.0, m = 0.0;
        for (std::size_t i = 0; i < plane; ++i) {
            const double v = enc.features[ch * plane + i];
            s += v;
            m = std::max(m, v);
        }
        out[ch] = s / static_cast<double>(plane);
        out[c + ch] = m;
    }
    return out;
}

}  // namespace dpd
