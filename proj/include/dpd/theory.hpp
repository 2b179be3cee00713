#pragma once

// Divergence estimation, VC-style bound arithmetic and uncertainty scores.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dpd/error.hpp"
#include "dpd/scene.hpp"
#include "dpd/training.hpp"

namespace dpd {

using FeatureSet = std::vector<std::vector<double>>;

inline constexpr std::size_t kImageStatDim = 32;

/// Fixed 32-dim summary of an image: colour moments, luminance quantiles and
/// histogram, edge and Laplacian energy, autocorrelation, blob density and
/// large-scale trends.
inline std::vector<double> image_statistics(const Tensor& image) {
    if (image.rank() != 3 || image.dim(0) != 3) {
        throw ShapeError("image_statistics: expected [3,H,W] image, got " + shape_string(image.shape()));
    }
    const std::size_t h = image.dim(1), w = image.dim(2), n = h * w;
    if (h < 9 || w < 9) throw ShapeError("image_statistics: image must be at least 9x9");
    std::vector<double> f;
    f.reserve(kImageStatDim);

    for (std::size_t c = 0; c < 3; ++c) {
        double s = 0.0, ss = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double v = image[c * n + i];
            s += v;
            ss += v * v;
        }
        const double m = s / static_cast<double>(n);
        f.push_back(m);
        f.push_back(std::sqrt(std::max(0.0, ss / static_cast<double>(n) - m * m)));
    }

    std::vector<double> lum(n);
    for (std::size_t i = 0; i < n; ++i) lum[i] = (image[i] + image[n + i] + image[2 * n + i]) / 3.0;
    auto L = [&](std::size_t y, std::size_t x) { return lum[y * w + x]; };
    const double mean = std::accumulate(lum.begin(), lum.end(), 0.0) / static_cast<double>(n);
    double var = 0.0;
    for (double v : lum) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    const double sd = std::sqrt(var);
    f.push_back(mean);
    f.push_back(sd);

    std::vector<double> sorted = lum;
    std::sort(sorted.begin(), sorted.end());
    for (double p : {0.1, 0.25, 0.5, 0.75, 0.9}) {
        const double hq = (static_cast<double>(n) - 1.0) * p;
        const auto lo = static_cast<std::size_t>(hq);
        const std::size_t hi = std::min(lo + 1, n - 1);
        f.push_back(sorted[lo] + (hq - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]));
    }

    std::array<double, 8> hist{};
    for (double v : lum) hist[std::min<std::size_t>(7, static_cast<std::size_t>(std::max(0.0, v) * 8.0))] += 1.0;
    for (double c : hist) f.push_back(c / static_cast<double>(n));

    double grad = 0.0, lap = 0.0, hf = 0.0;
    std::size_t peaks = 0;
    for (std::size_t y = 1; y + 1 < h; ++y)
        for (std::size_t x = 1; x + 1 < w; ++x) {
            const double c = L(y, x);
            const double gx = 0.5 * (L(y, x + 1) - L(y, x - 1)), gy = 0.5 * (L(y + 1, x) - L(y - 1, x));
            grad += std::sqrt(gx * gx + gy * gy);
            const double l = L(y - 1, x) + L(y + 1, x) + L(y, x - 1) + L(y, x + 1) - 4.0 * c;
            lap += l * l;
            double box = 0.0, mx = -1e300;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    const double v = L(y + dy, x + dx);
                    box += v;
                    if (dy || dx) mx = std::max(mx, v);
                }
            hf += (c - box / 9.0) * (c - box / 9.0);
            if (c > mx && c > mean + sd) ++peaks;
        }
    const double inner = static_cast<double>((h - 2) * (w - 2));
    f.push_back(grad / inner);
    f.push_back(std::sqrt(lap / inner));
    f.push_back(std::sqrt(hf / inner));
    f.push_back(static_cast<double>(peaks) / inner * 100.0);

    for (std::size_t lag : {1, 2, 4, 8}) {
        double acc = 0.0;
        std::size_t cnt = 0;
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x + lag < w; ++x, ++cnt) acc += (L(y, x) - mean) * (L(y, x + lag) - mean);
        for (std::size_t y = 0; y + lag < h; ++y)
            for (std::size_t x = 0; x < w; ++x, ++cnt) acc += (L(y, x) - mean) * (L(y + lag, x) - mean);
        f.push_back(var > 0.0 ? acc / static_cast<double>(cnt) / var : 0.0);
    }

    std::size_t bright = 0;
    for (double v : lum)
        if (v > mean + 2.0 * sd) ++bright;
    f.push_back(static_cast<double>(bright) / static_cast<double>(n));

    // Vertical and horizontal luminance trend (top minus bottom half, left minus right).
    double top = 0.0, left = 0.0;
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            const double v = L(y, x) - mean;
            top += (y < h / 2 ? v : -v);
            left += (x < w / 2 ? v : -v);
        }
    f.push_back(top / static_cast<double>(n));
    f.push_back(left / static_cast<double>(n));
    return f;
}

/// Image statistics of `n` scenes drawn from `spec` starting at `first_index`.
inline FeatureSet domain_features(const DomainSpec& spec, std::size_t n, std::uint64_t first_index) {
    FeatureSet out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(image_statistics(sample_scene(spec, first_index + i).image));
    return out;
}

struct DivergenceEstimate {
    double value = 0.0;
    double classifier_error = 0.0;
    std::size_t n_samples_per_domain = 0;
    std::uint64_t seed = 0;
};

inline constexpr std::size_t kMinDivergenceSamples = 100;
inline constexpr std::size_t kProbeSteps = 500;
inline constexpr double kHoldoutFraction = 0.3;

/// Proxy A-distance 2(1 - 2 err) of a logistic-regression probe trained to
/// tell `a` (label 0) from `b` (label 1); err is measured on a held-out 30%.
inline DivergenceEstimate proxy_a_distance(const FeatureSet& a, const FeatureSet& b, std::uint64_t seed) {
    if (a.size() < kMinDivergenceSamples || b.size() < kMinDivergenceSamples) {
        throw SamplingError("proxy_a_distance: need at least 100 samples per side (got " + std::to_string(a.size()) +
                            " and " + std::to_string(b.size()) + ")");
    }
    const std::size_t dim = a.front().size();
    if (dim == 0) throw ShapeError("proxy_a_distance: empty feature vectors");
    for (const auto* set : {&a, &b})
        for (const auto& v : *set)
            if (v.size() != dim) throw ShapeError("proxy_a_distance: feature vectors differ in length");

    struct Row {
        const std::vector<double>* x;
        double y;
    };
    std::vector<Row> rows;
    for (const auto& v : a) rows.push_back({&v, 0.0});
    for (const auto& v : b) rows.push_back({&v, 1.0});
    std::mt19937_64 rng(seed);
    std::shuffle(rows.begin(), rows.end(), rng);
    const auto n_test = static_cast<std::size_t>(std::lround(kHoldoutFraction * static_cast<double>(rows.size())));
    const std::size_t n_train = rows.size() - n_test;
    auto has_both = [&](std::size_t lo, std::size_t hi) {
        bool zero = false, one = false;
        for (std::size_t i = lo; i < hi; ++i) (rows[i].y > 0.5 ? one : zero) = true;
        return zero && one;
    };
    if (!has_both(0, n_train) || !has_both(n_train, rows.size())) {
        throw SamplingError("proxy_a_distance: a split holds a single class");
    }

    std::vector<double> mu(dim, 0.0), sigma(dim, 0.0);
    for (std::size_t i = 0; i < n_train; ++i)
        for (std::size_t k = 0; k < dim; ++k) mu[k] += (*rows[i].x)[k];
    for (auto& m : mu) m /= static_cast<double>(n_train);
    for (std::size_t i = 0; i < n_train; ++i)
        for (std::size_t k = 0; k < dim; ++k) {
            const double d = (*rows[i].x)[k] - mu[k];
            sigma[k] += d * d;
        }
    for (auto& s : sigma) {
        s = std::sqrt(s / static_cast<double>(n_train));
        if (s < 1e-12) s = 1.0;
    }
    auto standardized = [&](const std::vector<double>& x) {
        std::vector<double> z(dim);
        for (std::size_t k = 0; k < dim; ++k) z[k] = (x[k] - mu[k]) / sigma[k];
        return z;
    };
    std::vector<std::vector<double>> z(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) z[i] = standardized(*rows[i].x);

    std::vector<double> wgt(dim, 0.0), gw(dim);
    double bias = 0.0;
    constexpr double lr = 0.5;
    for (std::size_t step = 0; step < kProbeSteps; ++step) {
        std::fill(gw.begin(), gw.end(), 0.0);
        double gb = 0.0;
        for (std::size_t i = 0; i < n_train; ++i) {
            double s = bias;
            for (std::size_t k = 0; k < dim; ++k) s += wgt[k] * z[i][k];
            const double r = ops::sigmoid(s) - rows[i].y;
            for (std::size_t k = 0; k < dim; ++k) gw[k] += r * z[i][k];
            gb += r;
        }
        for (std::size_t k = 0; k < dim; ++k) wgt[k] -= lr * gw[k] / static_cast<double>(n_train);
        bias -= lr * gb / static_cast<double>(n_train);
    }

    std::size_t wrong = 0;
    for (std::size_t i = n_train; i < rows.size(); ++i) {
        double s = bias;
        for (std::size_t k = 0; k < dim; ++k) s += wgt[k] * z[i][k];
        if ((s >= 0.0) != (rows[i].y > 0.5)) ++wrong;
    }
    DivergenceEstimate est;
    est.classifier_error = static_cast<double>(wrong) / static_cast<double>(n_test);
    est.value = std::clamp(2.0 * (1.0 - 2.0 * est.classifier_error), 0.0, 2.0);
    est.n_samples_per_domain = std::min(a.size(), b.size());
    est.seed = seed;
    return est;
}

/// 4 sqrt((2d ln(2m) + ln(2/delta)) / m).
inline double vc_complexity_term(std::size_t m, std::size_t d, double delta) {
    if (m < 1) throw ConfigError("vc_complexity_term: m must be >= 1");
    if (d < 1) throw ConfigError("vc_complexity_term: d must be >= 1");
    if (!(delta > 0.0 && delta < 1.0)) throw ConfigError("vc_complexity_term: delta must lie in (0,1)");
    const double md = static_cast<double>(m);
    return 4.0 * std::sqrt((2.0 * static_cast<double>(d) * std::log(2.0 * md) + std::log(2.0 / delta)) / md);
}

struct BoundReport {
    double source_risk = 0.0;
    double proxy_risk = 0.0;
    double div_st = 0.0;
    double div_pt = 0.0;
    double gamma = 0.5;
    std::size_t m_s = 1;
    std::size_t m_p = 0;
    std::size_t vc_dim = 50;
    double delta = 0.05;
    double lambda_hat = 0.0;
    double lambda_gamma_hat = 0.0;
    double erm_rhs = 0.0;
    double dpd_rhs = 0.0;
    bool thm2_condition_holds = false;

    void validate() const {
        auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
        if (!unit(source_risk) || !unit(proxy_risk)) throw ConfigError("bound report: risks must lie in [0,1]");
        if (!(div_st >= 0.0 && div_st <= 2.0) || !(div_pt >= 0.0 && div_pt <= 2.0))
            throw ConfigError("bound report: divergences must lie in [0,2]");
        if (!unit(gamma)) throw ConfigError("bound report: gamma must lie in [0,1]");
        if (!(lambda_hat >= 0.0) || !(lambda_gamma_hat >= 0.0))
            throw ConfigError("bound report: lambda estimates must be non-negative");
    }
};

/// R_S + div_st / 2 + vc(m_s) + lambda.
inline double erm_bound_rhs(const BoundReport& r) {
    return r.source_risk + 0.5 * r.div_st + vc_complexity_term(r.m_s, r.vc_dim, r.delta) + r.lambda_hat;
}

/// gamma (R_S + div_st / 2) + (1 - gamma)(R_P + div_pt / 2) + lambda_gamma + vc(m_s + m_p).
inline double dpd_bound_rhs(const BoundReport& r) {
    if (!(r.gamma >= 0.0 && r.gamma <= 1.0)) throw ConfigError("dpd_bound_rhs: gamma must lie in [0,1]");
    // Same summation order as erm_bound_rhs so gamma = 1, m_p = 0 reproduces it exactly.
    const double mix = r.gamma * (r.source_risk + 0.5 * r.div_st) + (1.0 - r.gamma) * (r.proxy_risk + 0.5 * r.div_pt);
    return mix + vc_complexity_term(r.m_s + r.m_p, r.vc_dim, r.delta) + r.lambda_gamma_hat;
}

struct Thm2Check {
    bool tighter = false;
    double margin = 0.0;
};

/// Whether the mixed divergence gamma div_st + (1 - gamma) div_pt is strictly
/// below div_st; margin is div_st minus the mixture.
inline Thm2Check thm2_check(double div_st, double div_pt, double gamma) {
    const double mix = gamma * div_st + (1.0 - gamma) * div_pt;
    return {mix < div_st, div_st - mix};
}

/// Fills both right-hand sides and the tighter-divergence flag.
inline BoundReport finalize_bounds(BoundReport r) {
    r.validate();
    r.erm_rhs = erm_bound_rhs(r);
    r.dpd_rhs = dpd_bound_rhs(r);
    r.thm2_condition_holds = thm2_check(r.div_st, r.div_pt, r.gamma).tighter;
    return r;
}

inline std::string to_key_value(const BoundReport& r) {
    std::ostringstream os;
    os.precision(17);
    os << "source_risk=" << r.source_risk << "\nproxy_risk=" << r.proxy_risk << "\ndiv_st=" << r.div_st
       << "\ndiv_pt=" << r.div_pt << "\ngamma=" << r.gamma << "\nm_s=" << r.m_s << "\nm_p=" << r.m_p
       << "\nvc_dim=" << r.vc_dim << "\ndelta=" << r.delta << "\nlambda_hat_estimate=" << r.lambda_hat
       << "\nlambda_gamma_hat_estimate=" << r.lambda_gamma_hat << "\nerm_rhs=" << r.erm_rhs
       << "\ndpd_rhs=" << r.dpd_rhs << "\nthm2_condition_holds=" << (r.thm2_condition_holds ? "true" : "false")
       << "\n";
    return os.str();
}

inline std::string bound_csv_header() {
    return "source_risk,proxy_risk,div_st,div_pt,gamma,m_s,m_p,vc_dim,delta,lambda_hat_estimate,"
           "lambda_gamma_hat_estimate,erm_rhs,dpd_rhs,thm2_condition_holds";
}

inline std::string to_csv_row(const BoundReport& r) {
    std::ostringstream os;
    os.precision(17);
    os << r.source_risk << ',' << r.proxy_risk << ',' << r.div_st << ',' << r.div_pt << ',' << r.gamma << ','
       << r.m_s << ',' << r.m_p << ',' << r.vc_dim << ',' << r.delta << ',' << r.lambda_hat << ','
       << r.lambda_gamma_hat << ',' << r.erm_rhs << ',' << r.dpd_rhs << ',' << (r.thm2_condition_holds ? 1 : 0);
    return os.str();
}

inline constexpr double kMixtureTolerance = 0.15;

struct MixtureCheck {
    double lhs = 0.0;
    double rhs = 0.0;
    double div_st = 0.0;
    double div_pt = 0.0;
    bool holds = false;
};

/// Scene-index block reserved for one seed; domains and roles get disjoint offsets.
inline std::uint64_t divergence_index_base(std::uint64_t seed) { return 10'000'000ull + seed * 100'000ull; }

/// Feature samples behind one mixture check. The extra pools feed the
/// mixture so that it never reuses a sample of the single-domain estimates.
struct MixturePools {
    FeatureSet source, proxy, target, extra_source, extra_proxy;
};

inline MixturePools mixture_pools(const DomainSpec& spec_s, const DomainSpec& spec_p, const DomainSpec& spec_t,
                                  std::uint64_t seed, std::size_t n = 300) {
    const std::uint64_t base = divergence_index_base(seed);
    return {domain_features(spec_s, n, base), domain_features(spec_p, n, base), domain_features(spec_t, n, base),
            domain_features(spec_s, n, base + n), domain_features(spec_p, n, base + n)};
}

/// Compares div(mixture, target) with gamma div_st + (1 - gamma) div_pt, where
/// each mixture draw comes from the source with probability gamma, else the proxy.
inline MixtureCheck mixture_divergence_check(const MixturePools& pools, double gamma, std::uint64_t seed) {
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("mixture_divergence_check: gamma must lie in [0,1]");
    const std::size_t n = std::min(pools.extra_source.size(), pools.extra_proxy.size());
    FeatureSet mix;
    mix.reserve(n);
    std::mt19937_64 rng(seed ^ 0xa5a5a5a5ull);
    std::bernoulli_distribution from_source(gamma);
    for (std::size_t i = 0; i < n; ++i) mix.push_back(from_source(rng) ? pools.extra_source[i] : pools.extra_proxy[i]);
    MixtureCheck c;
    c.div_st = proxy_a_distance(pools.source, pools.target, seed).value;
    c.div_pt = proxy_a_distance(pools.proxy, pools.target, seed).value;
    c.lhs = proxy_a_distance(mix, pools.target, seed).value;
    c.rhs = gamma * c.div_st + (1.0 - gamma) * c.div_pt;
    c.holds = c.lhs <= c.rhs + kMixtureTolerance;
    return c;
}

inline MixtureCheck mixture_divergence_check(const DomainSpec& spec_s, const DomainSpec& spec_p,
                                             const DomainSpec& spec_t, double gamma, std::uint64_t seed,
                                             std::size_t n = 300) {
    return mixture_divergence_check(mixture_pools(spec_s, spec_p, spec_t, seed, n), gamma, seed);
}

/// Mean of -c ln c over confidences sampled at ground-truth-positive pixels.
inline double monte_carlo_uncertainty(const std::vector<double>& confidences) {
    if (confidences.empty()) throw UndefinedMetricError("monte_carlo_uncertainty: no confidences");
    double s = 0.0;
    for (double c : confidences) {
        if (!(c > 0.0 && c <= 1.0)) throw ConfigError("monte_carlo_uncertainty: confidences must lie in (0,1]");
        s -= c * std::log(c);
    }
    return s / static_cast<double>(confidences.size());
}

struct LambdaOptions {
    std::size_t train_scenes = 100;
    std::size_t test_scenes = 50;
    std::size_t batch = 8;
    std::size_t crop = 32;
    AdamOptions adam{3e-3};
};

/// Mean irrationality rate of `net` over `scenes` (full-size forward passes).
inline double pixel_risk(const LocatorNet& net, const std::vector<Scene>& scenes, const LocatorConfig& cfg = {}) {
    if (scenes.empty()) throw UndefinedMetricError("pixel_risk: no scenes");
    double s = 0.0;
    for (const auto& sc : scenes) s += irrationality_rate(forward(net, sc.image, cfg), sc.gt_binary);
    return s / static_cast<double>(scenes.size());
}

/// Trains one locator by ERM on the union of the domains' training scenes for
/// `budget` steps and returns each domain's held-out pixel risk.
inline std::vector<double> joint_risks(const std::vector<DomainSpec>& domains, std::size_t budget, std::uint64_t seed,
                                       const LambdaOptions& opt = {}) {
    const std::uint64_t base = divergence_index_base(seed) + 50'000ull;
    std::vector<std::vector<Scene>> train, test;
    for (const auto& d : domains) {
        train.push_back(sample_scenes(d, opt.train_scenes, base));
        test.push_back(sample_scenes(d, opt.test_scenes, base + opt.train_scenes));
    }
    std::vector<const Scene*> pool;
    for (const auto& t : train)
        for (const auto& s : t) pool.push_back(&s);
    TrainState state(make_locator_params(seed), opt.adam);
    TrainStepOptions step_opt;
    step_opt.weights = {1.0, 0.0, 0.0};
    std::mt19937_64 rng(seed + 0x1234567ull);
    for (std::size_t i = 0; i < budget; ++i) train_step(state, sample_batch(pool, opt.batch, opt.crop, rng), step_opt, rng);
    std::vector<double> risks;
    for (const auto& t : test) risks.push_back(pixel_risk(state.params.main, t, step_opt.locator));
    return risks;
}

/// Empirical upper estimate of lambda: R_S + R_T of one jointly trained locator.
/// A zero budget gives the initial-risk sum, which is vacuous as an estimate.
inline double estimate_lambda(const DomainSpec& spec_s, const DomainSpec& spec_t, std::size_t budget,
                              std::uint64_t seed, const LambdaOptions& opt = {}) {
    const auto r = joint_risks({spec_s, spec_t}, budget, seed, opt);
    return r[0] + r[1];
}

/// Empirical upper estimate of lambda_gamma: gamma R_S + (1 - gamma) R_P + R_T.
inline double estimate_lambda_gamma(const DomainSpec& spec_s, const DomainSpec& spec_p, const DomainSpec& spec_t,
                                    double gamma, std::size_t budget, std::uint64_t seed,
                                    const LambdaOptions& opt = {}) {
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("estimate_lambda_gamma: gamma must lie in [0,1]");
    const auto r = joint_risks({spec_s, spec_p, spec_t}, budget, seed, opt);
    return gamma * r[0] + (1.0 - gamma) * r[1] + r[2];
}

}  // namespace dpd
