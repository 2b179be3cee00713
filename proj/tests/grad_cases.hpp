#pragma once

// Finite-difference checks for every layer and every loss, each a function
// of a seed. Shared by the unit tests and the acceptance binary.

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "dpd/gradcheck.hpp"
#include "dpd/locator.hpp"
#include "dpd/losses.hpp"
#include "dpd/ops.hpp"
#include "dpd/scene.hpp"
#include "dpd/training.hpp"
#include "oracles.hpp"

namespace gradcases {

using dpd::GradCheckResult;
using dpd::Param;
using dpd::Tensor;

inline constexpr double kEps = 1e-6;
// Whole-network checks cross relu kinks far more often; the smallest allowed
// step keeps that rare while roundoff stays near 1e-9.
inline constexpr double kNetworkEps = 1e-7;
inline constexpr std::size_t kSamples = 150;

struct Case {
    std::string name;
    std::function<GradCheckResult(std::uint64_t)> run;
};

namespace detail {

inline double dot(const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline Param random_param(const std::string& name, dpd::Shape shape, std::mt19937_64& rng, double lo = -1.0,
                          double hi = 1.0) {
    Param p(name, shape);
    p.value = oracle::random_tensor(std::move(shape), rng, lo, hi);
    return p;
}

// Relu kinks make central differences unreliable within eps of zero.
inline void push_off_zero(Tensor& t) {
    for (auto& v : t.data())
        if (std::abs(v) < 1e-3) v = v < 0 ? -1e-3 : 1e-3;
}

inline GradCheckResult check(const std::function<double(bool)>& loss, std::vector<Param*> ps, std::uint64_t seed,
                             double eps = kEps) {
    return dpd::grad_check(loss, ps, eps, kSamples, seed);
}

// A crop pair from the mixed preset source, with a small random network.
inline std::vector<dpd::ScenePair> small_batch(std::uint64_t seed, std::size_t n = 2) {
    static const auto scenes = dpd::sample_scenes(dpd::source_spec(), 8, 500);
    const auto pool = dpd::scene_pool(scenes);
    std::mt19937_64 rng(seed);
    return dpd::sample_batch(pool, n, 16, rng);
}

// Perturbs biases slightly so no pre-activation sits exactly at a relu kink.
inline dpd::LocatorParams random_params(std::uint64_t seed) {
    auto p = dpd::make_locator_params(seed);
    std::mt19937_64 rng(seed ^ 0xabcdefull);
    std::uniform_real_distribution<double> u(-0.05, 0.05);
    for (auto* q : p.all())
        if (q->value.rank() == 1)
            for (auto& v : q->value.data()) v = u(rng);
    // Give the momentum twin its own weights so consistency is non-trivial.
    auto main = dpd::parameters(p.main);
    auto mom = dpd::parameters(p.momentum);
    for (std::size_t i = 0; i < main.size(); ++i)
        for (std::size_t j = 0; j < mom[i]->value.size(); ++j) mom[i]->value[j] = main[i]->value[j] * 0.9 + u(rng);
    return p;
}

}  // namespace detail

inline std::vector<Case> all_cases() {
    using namespace detail;
    std::vector<Case> cases;

    for (std::size_t stride : {1, 2}) {
        cases.push_back({"conv2d_stride" + std::to_string(stride), [stride](std::uint64_t seed) {
                             std::mt19937_64 rng(seed);
                             Param x = random_param("x", {3, 8, 6}, rng), k = random_param("k", {4, 3, 3, 3}, rng),
                                   b = random_param("b", {4}, rng);
                             const Tensor w = oracle::random_tensor(
                                 dpd::ops::conv2d(x.value, k.value, b.value, stride, 1).shape(), rng);
                             auto loss = [&](bool acc) {
                                 const Tensor y = dpd::ops::conv2d(x.value, k.value, b.value, stride, 1);
                                 if (acc)
                                     dpd::ops::conv2d_backward(x.value, k.value, stride, 1, w, &x.grad, k.grad,
                                                               b.grad);
                                 return dot(y, w);
                             };
                             return check(loss, {&x, &k, &b}, seed);
                         }});
    }

    cases.push_back({"relu", [](std::uint64_t seed) {
                         std::mt19937_64 rng(seed);
                         Param x = random_param("x", {2, 5, 5}, rng);
                         push_off_zero(x.value);
                         const Tensor w = oracle::random_tensor(x.value.shape(), rng);
                         auto loss = [&](bool acc) {
                             if (acc) x.grad += dpd::ops::relu_backward(x.value, w);
                             return dot(dpd::ops::relu(x.value), w);
                         };
                         return check(loss, {&x}, seed);
                     }});

    cases.push_back({"sigmoid", [](std::uint64_t seed) {
                         std::mt19937_64 rng(seed);
                         Param x = random_param("x", {2, 5, 5}, rng, -4.0, 4.0);
                         const Tensor w = oracle::random_tensor(x.value.shape(), rng);
                         auto loss = [&](bool acc) {
                             const Tensor y = dpd::ops::sigmoid(x.value);
                             if (acc) x.grad += dpd::ops::sigmoid_backward(y, w);
                             return dot(y, w);
                         };
                         return check(loss, {&x}, seed);
                     }});

    cases.push_back({"bilinear_upsample", [](std::uint64_t seed) {
                         std::mt19937_64 rng(seed);
                         Param x = random_param("x", {2, 3, 4}, rng);
                         const Tensor w = oracle::random_tensor({2, 12, 16}, rng);
                         auto loss = [&](bool acc) {
                             if (acc) x.grad += dpd::ops::bilinear_upsample_backward(x.value.shape(), 4, w);
                             return dot(dpd::ops::bilinear_upsample(x.value, 4), w);
                         };
                         return check(loss, {&x}, seed);
                     }});

    cases.push_back({"avg_pool", [](std::uint64_t seed) {
                         std::mt19937_64 rng(seed);
                         Param x = random_param("x", {2, 8, 8}, rng);
                         const Tensor w = oracle::random_tensor({2, 2, 2}, rng);
                         auto loss = [&](bool acc) {
                             if (acc) x.grad += dpd::ops::avg_pool_backward(x.value.shape(), 4, w);
                             return dot(dpd::ops::avg_pool(x.value, 4), w);
                         };
                         return check(loss, {&x}, seed);
                     }});

    cases.push_back({"modulate", [](std::uint64_t seed) {
                         std::mt19937_64 rng(seed);
                         Param f = random_param("features", {4, 3, 3}, rng), g = random_param("gate", {1, 3, 3}, rng);
                         const Tensor w = oracle::random_tensor(f.value.shape(), rng);
                         auto loss = [&](bool acc) {
                             if (acc) {
                                 auto [gf, gg] = dpd::ops::modulate_backward(f.value, g.value, w);
                                 f.grad += gf;
                                 g.grad += gg;
                             }
                             return dot(dpd::ops::modulate(f.value, g.value), w);
                         };
                         return check(loss, {&f, &g}, seed);
                     }});

    cases.push_back({"binarize_soft", [](std::uint64_t seed) {
                         std::mt19937_64 rng(seed);
                         Param c = random_param("confidence", {1, 4, 4}, rng, 0.0, 1.0),
                               t = random_param("threshold", {1, 4, 4}, rng, 0.05, 0.95);
                         const Tensor w = oracle::random_tensor(c.value.shape(), rng);
                         auto loss = [&](bool acc) {
                             auto [soft, hard] = dpd::binarize(c.value, t.value, 0.1);
                             if (acc) {
                                 auto [gc, gt] = dpd::binarize_backward(soft, w, 0.1);
                                 c.grad += gc;
                                 t.grad += gt;
                             }
                             return dot(soft, w);
                         };
                         return check(loss, {&c, &t}, seed);
                     }});

    // Whole locator: ERM loss through decoder, threshold head and binarization.
    cases.push_back({"locator_erm", [](std::uint64_t seed) {
                         auto p = random_params(seed);
                         const auto batch = small_batch(seed, 1);
                         const dpd::LocatorConfig cfg;
                         auto loss = [&](bool acc) {
                             const auto t = dpd::forward_trace(p.main, batch[0].first.image, cfg);
                             const auto e = dpd::erm_loss(t.out, batch[0].first.gt);
                             if (acc) {
                                 auto [gc, gs] = dpd::erm_loss_grad(t.out, batch[0].first.gt, 1.0, 1.0);
                                 dpd::backward(p.main, t, gc, gs, cfg);
                             }
                             return e.l2 + e.l1;
                         };
                         return check(loss, dpd::parameters(p.main), seed, kNetworkEps);
                     }});

    cases.push_back({"locator_fixed_threshold", [](std::uint64_t seed) {
                         auto p = random_params(seed);
                         const auto batch = small_batch(seed, 1);
                         dpd::LocatorConfig cfg;
                         cfg.fixed_threshold = 0.5;
                         auto ps = dpd::parameters(p.main);
                         ps.resize(8);  // encoder and decoder only; the threshold head is bypassed
                         auto loss = [&](bool acc) {
                             const auto t = dpd::forward_trace(p.main, batch[0].first.image, cfg);
                             const auto e = dpd::erm_loss(t.out, batch[0].first.gt);
                             if (acc) {
                                 auto [gc, gs] = dpd::erm_loss_grad(t.out, batch[0].first.gt, 1.0, 1.0);
                                 dpd::backward(p.main, t, gc, gs, cfg);
                             }
                             return e.l2 + e.l1;
                         };
                         return check(loss, ps, seed, kNetworkEps);
                     }});

    // Threshold head input gradients (features and confidence).
    cases.push_back({"threshold_head_inputs", [](std::uint64_t seed) {
                         auto p = random_params(seed);
                         std::mt19937_64 rng(seed);
                         Param f = random_param("features", {16, 4, 4}, rng, 0.0, 1.0),
                               c = random_param("confidence", {1, 16, 16}, rng, 0.05, 0.95);
                         const dpd::LocatorConfig cfg;
                         const Tensor w = oracle::random_tensor({1, 16, 16}, rng);
                         auto loss = [&](bool acc) {
                             const auto t = dpd::threshold_forward(p.main.threshold, f.value, c.value, cfg);
                             if (acc) {
                                 auto in = dpd::threshold_backward(p.main.threshold, t, f.value, w, cfg, true);
                                 f.grad += in.features;
                                 c.grad += in.confidence;
                             }
                             return dot(t.threshold, w);
                         };
                         auto ps = dpd::parameters(p.main.threshold);
                         ps.push_back(&f);
                         ps.push_back(&c);
                         return check(loss, ps, seed);
                     }});

    cases.push_back({"erm_loss", [](std::uint64_t seed) {
                         std::mt19937_64 rng(seed);
                         Param c = random_param("confidence", {1, 6, 6}, rng, 0.01, 0.99),
                               s = random_param("soft", {1, 6, 6}, rng, 0.01, 0.99);
                         Tensor gt({1, 6, 6});
                         std::bernoulli_distribution coin(0.3);
                         for (auto& v : gt.data()) v = coin(rng) ? 1.0 : 0.0;
                         auto loss = [&](bool acc) {
                             dpd::LocatorOutput out{c.value, {}, s.value, {}};
                             const auto e = dpd::erm_loss(out, gt);
                             if (acc) {
                                 auto [gc, gs] = dpd::erm_loss_grad(out, gt, 1.0, 1.0);
                                 c.grad += gc;
                                 s.grad += gs;
                             }
                             return e.l2 + e.l1;
                         };
                         return check(loss, {&c, &s}, seed);
                     }});

    cases.push_back({"consistency_loss", [](std::uint64_t seed) {
                         std::mt19937_64 rng(seed);
                         Param c = random_param("confidence", {1, 6, 6}, rng, 0.01, 0.99),
                               s = random_param("soft", {1, 6, 6}, rng, 0.01, 0.99);
                         const dpd::LocatorOutput mo{oracle::random_tensor({1, 6, 6}, rng, 0.01, 0.99), {},
                                                     oracle::random_tensor({1, 6, 6}, rng, 0.01, 0.99), {}};
                         auto loss = [&](bool acc) {
                             dpd::LocatorOutput out{c.value, {}, s.value, {}};
                             if (acc) {
                                 auto [gc, gs] = dpd::consistency_loss_grad(out, mo, 1.0);
                                 c.grad += gc;
                                 s.grad += gs;
                             }
                             return dpd::consistency_loss(out, mo);
                         };
                         return check(loss, {&c, &s}, seed);
                     }});

    for (bool strong : {true, false}) {
        cases.push_back({strong ? "dpd_loss_dice_l1" : "dpd_loss_l1", [strong](std::uint64_t seed) {
                             std::mt19937_64 rng(seed);
                             Param a = random_param("a", {1, 6, 6}, rng, 0.01, 0.99),
                                   b = random_param("b", {1, 6, 6}, rng, 0.01, 0.99);
                             auto loss = [&](bool acc) {
                                 const auto t = dpd::dpd_loss(a.value, b.value);
                                 if (acc) {
                                     auto [ga, gb] = dpd::dpd_loss_grad(a.value, b.value, strong ? 1.0 : 0.0, 1.0);
                                     a.grad += ga;
                                     b.grad += gb;
                                 }
                                 return (strong ? t.dice : 0.0) + t.l1;
                             };
                             return check(loss, {&a, &b}, seed);
                         }});
    }

    // Full training objective with every term active, w.r.t. the main model
    // and the proxy threshold head.
    cases.push_back({"train_step_total", [](std::uint64_t seed) {
                         dpd::TrainState st(random_params(seed), dpd::AdamOptions{});
                         const auto batch = small_batch(seed, 2);
                         dpd::TrainStepOptions opt;
                         std::mt19937_64 rng(seed);
                         auto loss = [&](bool acc) { return dpd::batch_loss(st, batch, opt, rng, acc).total; };
                         auto ps = st.params.all();
                         ps.resize(ps.size() - dpd::parameters(st.params.momentum).size());
                         return check(loss, ps, seed, kNetworkEps);
                     }});

    return cases;
}

}  // namespace gradcases
