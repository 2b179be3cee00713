#pragma once

// One optimisation step of the proxy-domain training loop.

#include <cmath>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "dpd/locator.hpp"
#include "dpd/losses.hpp"
#include "dpd/scene.hpp"

namespace dpd {

/// How the proxy-domain prediction of the DPD branch is produced.
enum class ProxyMode {
    dpd_head,      // dpd_threshold on momentum features and confidence
    input_gauss,   // momentum model on a noise-corrupted crop
    embed_gauss,   // momentum model with noise on the encoder output
    color_jitter,  // momentum model on a colour-jittered crop
    mc_dropout,    // momentum model with dropout on the encoder output
};

inline std::string_view to_string(ProxyMode m) {
    switch (m) {
        case ProxyMode::dpd_head: return "dpd_head";
        case ProxyMode::input_gauss: return "input_gauss";
        case ProxyMode::embed_gauss: return "embed_gauss";
        case ProxyMode::color_jitter: return "color_jitter";
        case ProxyMode::mc_dropout: return "mc_dropout";
    }
    return "dpd_head";
}

inline ProxyMode proxy_mode_from_string(std::string_view s) {
    for (auto m : {ProxyMode::dpd_head, ProxyMode::input_gauss, ProxyMode::embed_gauss, ProxyMode::color_jitter,
                   ProxyMode::mc_dropout})
        if (to_string(m) == s) return m;
    throw ConfigError("unknown perturbation kind '" + std::string(s) +
                      "' (expected input_gauss, embed_gauss, color_jitter or mc_dropout)");
}

inline constexpr double kMcDropoutRate = 0.3;

struct TrainStepOptions {
    LossWeights weights;
    double mu = 0.99;
    LocatorConfig locator;
    ProxyMode proxy = ProxyMode::dpd_head;
    double perturb_sigma = 0.1;
    /// Dice + L1 on the DPD branch when true, L1 only otherwise.
    bool strong_loss = true;
};

/// A training crop and its binary ground truth.
struct Crop {
    Tensor image;
    Tensor gt;
};

struct ScenePair {
    Crop first;   // ERM crop
    Crop second;  // consistency / DPD crop
};

/// `batch` pairs of independent random crops drawn uniformly from `pool`.
inline std::vector<ScenePair> sample_batch(const std::vector<const Scene*>& pool, std::size_t batch,
                                           std::size_t crop_size, std::mt19937_64& rng) {
    if (pool.empty()) throw SamplingError("sample_batch: empty scene pool");
    if (crop_size == 0 || crop_size % kFeatureStride)
        throw ConfigError("sample_batch: crop size must be a positive multiple of 4");
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    auto draw = [&]() {
        const Scene& s = *pool[pick(rng)];
        const std::size_t h = s.image.dim(1), w = s.image.dim(2);
        if (crop_size > h || crop_size > w) throw ConfigError("sample_batch: crop larger than scene");
        std::uniform_int_distribution<std::size_t> oy(0, h - crop_size), ox(0, w - crop_size);
        const std::size_t y = oy(rng), x = ox(rng);
        auto [img, gt] = crop(s, y, x, crop_size, crop_size);
        return Crop{std::move(img), std::move(gt)};
    };
    std::vector<ScenePair> out;
    out.reserve(batch);
    for (std::size_t i = 0; i < batch; ++i) {
        Crop a = draw();
        Crop b = draw();
        out.push_back({std::move(a), std::move(b)});
    }
    return out;
}

inline std::vector<const Scene*> scene_pool(const std::vector<Scene>& scenes) {
    std::vector<const Scene*> out;
    for (const auto& s : scenes) out.push_back(&s);
    return out;
}

/// Parameters plus the two independent optimizers.
struct TrainState {
    LocatorParams params;
    Adam main_opt;
    Adam dpd_opt;

    TrainState(LocatorParams p, const AdamOptions& opt) : params(std::move(p)) {
        main_opt = Adam(parameters(params.main), opt);
        dpd_opt = Adam(parameters(params.dpd_threshold), opt);
    }
    TrainState(const TrainState&) = delete;
    TrainState& operator=(const TrainState&) = delete;
};

/// Copies main encoder/decoder/threshold into the momentum twin.
inline void sync_momentum(LocatorParams& p) { momentum_update(p, 0.0); }

namespace detail {

inline Tensor color_jitter(const Tensor& img, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> shift(-0.2, 0.2), gain(0.7, 1.3), channel(0.9, 1.1);
    const double b = shift(rng), c = gain(rng);
    const double ch[3] = {channel(rng), channel(rng), channel(rng)};
    Tensor out = img;
    const std::size_t plane = img.dim(1) * img.dim(2);
    for (std::size_t k = 0; k < 3; ++k)
        for (std::size_t i = 0; i < plane; ++i) {
            double& v = out[k * plane + i];
            v = std::clamp(((v - 0.5) * c + 0.5) * ch[k] + b, 0.0, 1.0);
        }
    return out;
}

/// Proxy soft map from a perturbed momentum pass; no gradient flows back.
inline Tensor perturbed_proxy(const LocatorParams& p, const Tensor& image, const TrainStepOptions& opt,
                              std::mt19937_64& rng) {
    std::normal_distribution<double> gauss(0.0, 1.0);
    switch (opt.proxy) {
        case ProxyMode::input_gauss: {
            Tensor noisy = image;
            for (auto& v : noisy.data()) v += opt.perturb_sigma * gauss(rng);
            return forward_trace(p.momentum, noisy, opt.locator).out.binary_soft;
        }
        case ProxyMode::color_jitter:
            return forward_trace(p.momentum, color_jitter(image, rng), opt.locator).out.binary_soft;
        case ProxyMode::embed_gauss: {
            FeatureHook hook = [&](Tensor& f) {
                double ss = 0.0;
                for (double v : f.data()) ss += v * v;
                const double rms = std::sqrt(ss / static_cast<double>(f.size()));
                for (auto& v : f.data()) v += opt.perturb_sigma * rms * gauss(rng);
            };
            return forward_trace(p.momentum, image, opt.locator, hook).out.binary_soft;
        }
        case ProxyMode::mc_dropout: {
            std::bernoulli_distribution keep(1.0 - kMcDropoutRate);
            FeatureHook hook = [&](Tensor& f) {
                for (auto& v : f.data()) v = keep(rng) ? v / (1.0 - kMcDropoutRate) : 0.0;
            };
            return forward_trace(p.momentum, image, opt.locator, hook).out.binary_soft;
        }
        case ProxyMode::dpd_head: break;
    }
    throw ConfigError("perturbed_proxy: dpd_head is not a perturbation");
}

}  // namespace detail

/// Batch loss of one training step. With `accumulate` set, the analytic
/// gradients of the weighted total are added into the main and dpd_threshold
/// grads (nothing is zeroed). Terms with zero weight are skipped entirely.
inline LossBreakdown batch_loss(TrainState& state, const std::vector<ScenePair>& batch, const TrainStepOptions& opt,
                                std::mt19937_64& rng, bool accumulate = true) {
    auto& params = state.params;
    const auto& w = opt.weights;
    const auto& cfg = opt.locator;
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    const bool use_second = w.cons > 0.0 || w.dpd > 0.0;
    LossBreakdown lb;
    lb.weights = w;

    for (const auto& pair : batch) {
        const auto t1 = forward_trace(params.main, pair.first.image, cfg);
        const auto erm = erm_loss(t1.out, pair.first.gt);
        lb.erm_l2 += erm.l2 * inv_b;
        lb.erm_l1 += erm.l1 * inv_b;
        if (w.erm > 0.0 && accumulate) {
            auto [gc, gs] = erm_loss_grad(t1.out, pair.first.gt, w.erm * inv_b, w.erm * inv_b);
            backward(params.main, t1, gc, gs, cfg);
        }
        if (!use_second) continue;

        const auto t2 = forward_trace(params.main, pair.second.image, cfg);
        Tensor gc2(t2.out.confidence.shape()), gs2(t2.out.confidence.shape());
        const bool need_momentum = w.cons > 0.0 || (w.dpd > 0.0 && opt.proxy == ProxyMode::dpd_head);
        LocatorTrace mo;
        if (need_momentum) mo = forward_trace(params.momentum, pair.second.image, cfg);

        if (w.cons > 0.0) {
            lb.consistency += consistency_loss(t2.out, mo.out) * inv_b;
            auto [gc, gs] = consistency_loss_grad(t2.out, mo.out, w.cons * inv_b);
            gc2 += gc;
            gs2 += gs;
        }
        if (w.dpd > 0.0) {
            const double dice_scale = opt.strong_loss ? w.dpd * inv_b : 0.0;
            if (opt.proxy == ProxyMode::dpd_head) {
                auto thr = threshold_forward(params.dpd_threshold, mo.enc.features, mo.out.confidence, cfg);
                auto [soft, hard] = binarize(mo.out.confidence, thr.threshold, cfg.tau);
                const auto terms = dpd_loss(t2.out.binary_soft, soft);
                if (opt.strong_loss) lb.dpd_dice += terms.dice * inv_b;
                lb.dpd_l1 += terms.l1 * inv_b;
                if (accumulate) {
                    auto [ga, gb] = dpd_loss_grad(t2.out.binary_soft, soft, dice_scale, w.dpd * inv_b);
                    gs2 += ga;
                    // Momentum is not a gradient recipient: only the threshold path of the proxy map is followed.
                    auto [gconf_unused, gthr] = binarize_backward(soft, gb, cfg.tau);
                    threshold_backward(params.dpd_threshold, thr, mo.enc.features, gthr, cfg, false);
                }
            } else {
                const Tensor proxy = detail::perturbed_proxy(params, pair.second.image, opt, rng);
                const auto terms = dpd_loss(t2.out.binary_soft, proxy);
                if (opt.strong_loss) lb.dpd_dice += terms.dice * inv_b;
                lb.dpd_l1 += terms.l1 * inv_b;
                auto [ga, gb_unused] = dpd_loss_grad(t2.out.binary_soft, proxy, dice_scale, w.dpd * inv_b);
                gs2 += ga;
            }
        }
        if (accumulate) backward(params.main, t2, gc2, gs2, cfg);
    }
    lb.total = lb.weighted_total();
    return lb;
}

/// One step over a batch of crop pairs:
///   ERM on the first crop; main vs momentum consistency on the second;
///   DPD agreement between the main soft map and the proxy prediction on the
///   second crop; one update each for the main model and dpd_threshold;
///   then the momentum update.
inline LossBreakdown train_step(TrainState& state, const std::vector<ScenePair>& batch, const TrainStepOptions& opt,
                                std::mt19937_64& rng) {
    const auto& w = opt.weights;
    const bool use_second = w.cons > 0.0 || w.dpd > 0.0;
    const bool train_dpd_head = w.dpd > 0.0 && opt.proxy == ProxyMode::dpd_head;
    state.main_opt.zero_grad();
    state.dpd_opt.zero_grad();
    const LossBreakdown lb = batch_loss(state, batch, opt, rng, true);
    auto& params = state.params;
    state.main_opt.step();
    if (train_dpd_head) state.dpd_opt.step();
    if (use_second) momentum_update(params, opt.mu);
    return lb;
}

}  // namespace dpd
