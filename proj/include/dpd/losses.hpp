#pragma once

// Training objectives with their analytic gradients, and the Adam optimizer.

#include <cmath>
#include <cstddef>
#include <iostream>
#include <vector>

#include "dpd/locator.hpp"
#include "dpd/tensor.hpp"

namespace dpd {

struct LossWeights {
    double erm = 1.0;
    double cons = 0.5;
    double dpd = 0.5;
    friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

struct LossBreakdown {
    double erm_l2 = 0.0;
    double erm_l1 = 0.0;
    double consistency = 0.0;
    double dpd_dice = 0.0;
    double dpd_l1 = 0.0;
    double total = 0.0;
    LossWeights weights;

    double weighted_total() const {
        return weights.erm * (erm_l2 + erm_l1) + weights.cons * consistency + weights.dpd * (dpd_dice + dpd_l1);
    }
};

namespace detail {
inline double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }
}  // namespace detail

struct ErmTerms {
    double l2 = 0.0;
    double l1 = 0.0;
};

/// l2 = mean (confidence - gt)^2, l1 = mean |binary_soft - gt|.
inline ErmTerms erm_loss(const LocatorOutput& out, const Tensor& gt) {
    Tensor::require_same_shape(out.confidence, gt, "erm_loss");
    Tensor::require_same_shape(out.binary_soft, gt, "erm_loss");
    ErmTerms t;
    for (std::size_t i = 0; i < gt.size(); ++i) {
        const double d = out.confidence[i] - gt[i];
        t.l2 += d * d;
        t.l1 += std::abs(out.binary_soft[i] - gt[i]);
    }
    const double n = static_cast<double>(gt.size());
    t.l2 /= n;
    t.l1 /= n;
    return t;
}

/// Gradients of scale_l2 * l2 + scale_l1 * l1 w.r.t. (confidence, binary_soft).
inline std::pair<Tensor, Tensor> erm_loss_grad(const LocatorOutput& out, const Tensor& gt, double scale_l2,
                                               double scale_l1) {
    const double n = static_cast<double>(gt.size());
    Tensor gc(gt.shape()), gs(gt.shape());
    for (std::size_t i = 0; i < gt.size(); ++i) {
        gc[i] = scale_l2 * 2.0 * (out.confidence[i] - gt[i]) / n;
        gs[i] = scale_l1 * detail::sign(out.binary_soft[i] - gt[i]) / n;
    }
    return {std::move(gc), std::move(gs)};
}

/// Mean squared confidence gap plus mean absolute soft-map gap. The momentum
/// side is a constant target.
inline double consistency_loss(const LocatorOutput& main_out, const LocatorOutput& momentum_out) {
    Tensor::require_same_shape(main_out.confidence, momentum_out.confidence, "consistency_loss");
    double l2 = 0.0, l1 = 0.0;
    for (std::size_t i = 0; i < main_out.confidence.size(); ++i) {
        const double d = main_out.confidence[i] - momentum_out.confidence[i];
        l2 += d * d;
        l1 += std::abs(main_out.binary_soft[i] - momentum_out.binary_soft[i]);
    }
    const double n = static_cast<double>(main_out.confidence.size());
    return l2 / n + l1 / n;
}

inline std::pair<Tensor, Tensor> consistency_loss_grad(const LocatorOutput& main_out,
                                                       const LocatorOutput& momentum_out, double scale) {
    const double n = static_cast<double>(main_out.confidence.size());
    Tensor gc(main_out.confidence.shape()), gs(main_out.confidence.shape());
    for (std::size_t i = 0; i < gc.size(); ++i) {
        gc[i] = scale * 2.0 * (main_out.confidence[i] - momentum_out.confidence[i]) / n;
        gs[i] = scale * detail::sign(main_out.binary_soft[i] - momentum_out.binary_soft[i]) / n;
    }
    return {std::move(gc), std::move(gs)};
}

inline constexpr double kDiceEps = 1e-8;

struct DpdTerms {
    double dice = 0.0;
    double l1 = 0.0;
};

/// dice = 1 - 2 sum(a*b) / (sum a + sum b + eps), l1 = mean |a - b|.
/// The dice term vanishes for identical binary maps; on soft maps it also
/// rewards confident (near 0/1) values. Two all-zero maps give dice = 0.
inline DpdTerms dpd_loss(const Tensor& a, const Tensor& b) {
    Tensor::require_same_shape(a, b, "dpd_loss");
    double inter = 0.0, sa = 0.0, sb = 0.0, l1 = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        inter += a[i] * b[i];
        sa += a[i];
        sb += b[i];
        l1 += std::abs(a[i] - b[i]);
    }
    DpdTerms t;
    t.dice = (sa + sb == 0.0) ? 0.0 : 1.0 - 2.0 * inter / (sa + sb + kDiceEps);
    t.l1 = l1 / static_cast<double>(a.size());
    return t;
}

/// Gradients of scale_dice * dice + scale_l1 * l1 w.r.t. both maps.
inline std::pair<Tensor, Tensor> dpd_loss_grad(const Tensor& a, const Tensor& b, double scale_dice, double scale_l1) {
    Tensor::require_same_shape(a, b, "dpd_loss_grad");
    double inter = 0.0, sa = 0.0, sb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        inter += a[i] * b[i];
        sa += a[i];
        sb += b[i];
    }
    const double s = sa + sb + kDiceEps;
    const double n = static_cast<double>(a.size());
    Tensor ga(a.shape()), gb(b.shape());
    const bool dice_defined = sa + sb != 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double sg = detail::sign(a[i] - b[i]);
        double da = scale_l1 * sg / n, db = -scale_l1 * sg / n;
        if (dice_defined) {
            da += scale_dice * (-2.0 * (b[i] * s - inter) / (s * s));
            db += scale_dice * (-2.0 * (a[i] * s - inter) / (s * s));
        }
        ga[i] = da;
        gb[i] = db;
    }
    return {std::move(ga), std::move(gb)};
}

struct AdamOptions {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam over a fixed parameter list; owns its moment estimates.
class Adam {
public:
    Adam() = default;
    Adam(std::vector<Param*> params, AdamOptions opt) : params_(std::move(params)), opt_(opt) {
        for (auto* p : params_) {
            m_.emplace_back(p->value.shape());
            v_.emplace_back(p->value.shape());
        }
    }

    /// Applies one update from the accumulated grads. A non-finite gradient
    /// skips the update, bumps skipped() and logs a warning; returns false then.
    bool step() {
        for (auto* p : params_) {
            if (!p->grad.all_finite()) {
                ++skipped_;
                std::clog << "warning: non-finite gradient in " << p->name << ", optimizer step skipped (" << skipped_
                          << " so far)\n";
                return false;
            }
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
        for (std::size_t k = 0; k < params_.size(); ++k) {
            auto val = params_[k]->value.data();
            auto g = params_[k]->grad.data();
            auto m = m_[k].data();
            auto v = v_[k].data();
            for (std::size_t i = 0; i < val.size(); ++i) {
                m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * g[i];
                v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * g[i] * g[i];
                const double mhat = m[i] / bc1, vhat = v[i] / bc2;
                val[i] -= opt_.lr * mhat / (std::sqrt(vhat) + opt_.eps);
            }
        }
        return true;
    }

    void zero_grad() {
        for (auto* p : params_) p->zero_grad();
    }

    std::size_t steps() const noexcept { return t_; }
    std::size_t skipped() const noexcept { return skipped_; }
    const AdamOptions& options() const noexcept { return opt_; }
    void set_lr(double lr) { opt_.lr = lr; }
    const std::vector<Param*>& params() const noexcept { return params_; }
    std::vector<Tensor>& first_moments() noexcept { return m_; }
    std::vector<Tensor>& second_moments() noexcept { return v_; }
    void set_counters(std::size_t steps, std::size_t skipped) {
        t_ = steps;
        skipped_ = skipped;
    }

private:
    std::vector<Param*> params_;
    AdamOptions opt_;
    std::vector<Tensor> m_, v_;
    std::size_t t_ = 0;
    std::size_t skipped_ = 0;
};

}  // namespace dpd
