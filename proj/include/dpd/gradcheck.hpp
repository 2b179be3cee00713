#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dpd/error.hpp"
#include "dpd/tensor.hpp"

namespace dpd {

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::size_t coordinates = 0;
    std::string worst;  // "<param>[index]"
};

/// Compares analytic gradients with central differences.
///
/// `loss(true)` must zero nothing itself; it evaluates the loss and
/// accumulates analytic grads into the params. `loss(false)` only evaluates.
/// Up to `samples` coordinates are drawn uniformly across all parameters; the
/// error per coordinate is |a - n| / max(1, |a|, |n|).
inline GradCheckResult grad_check(const std::function<double(bool)>& loss, std::span<Param* const> params, double eps,
                                  std::size_t samples = 100, std::uint64_t seed = 0) {
    if (eps < 1e-7 || eps > 1e-4) throw ConfigError("grad_check: eps must lie in [1e-7, 1e-4]");
    for (auto* p : params) p->zero_grad();
    const double base = loss(true);
    if (!std::isfinite(base)) throw NumericError("grad_check: loss is not finite (" + std::to_string(base) + ")");

    std::vector<std::pair<std::size_t, std::size_t>> coords;
    for (std::size_t k = 0; k < params.size(); ++k)
        for (std::size_t i = 0; i < params[k]->value.size(); ++i) coords.emplace_back(k, i);
    if (coords.size() > samples) {
        std::mt19937_64 rng(seed);
        std::shuffle(coords.begin(), coords.end(), rng);
        coords.resize(samples);
    }

    GradCheckResult res;
    res.coordinates = coords.size();
    for (auto [k, i] : coords) {
        double& x = params[k]->value[i];
        const double orig = x;
        x = orig + eps;
        const double up = loss(false);
        x = orig - eps;
        const double down = loss(false);
        x = orig;
        if (!std::isfinite(up) || !std::isfinite(down)) {
            throw NumericError("grad_check: non-finite loss while perturbing " + params[k]->name + "[" +
                               std::to_string(i) + "]");
        }
        const double numeric = (up - down) / (2.0 * eps);
        const double analytic = params[k]->grad[i];
        const double err =
            std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)});
        if (err > res.max_relative_error) {
            res.max_relative_error = err;
            res.worst = params[k]->name + "[" + std::to_string(i) + "]";
        }
    }
    return res;
}

}  // namespace dpd
