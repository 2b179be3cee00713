#pragma once

// Experiment orchestration: training runs per seed, frozen evaluation,
// bound reports, resumable checkpoints and per-run artifacts.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "dpd/checkpoint.hpp"
#include "dpd/config.hpp"
#include "dpd/eval.hpp"
#include "dpd/report.hpp"
#include "dpd/theory.hpp"
#include "dpd/training.hpp"

namespace dpd {

/// Linear learning-rate ramp length at the start of every run.
inline constexpr std::size_t kLrRampSteps = 200;

inline constexpr std::uint64_t kTestSceneOffset = 100'000;

/// Evaluates a frozen network on labelled scenes: micro-averaged localization
/// scores, per-scene scores, MCU and the confidence/threshold distributions at
/// ground-truth-positive pixels.
inline DomainEval evaluate_domain(const LocatorNet& net, const std::vector<Scene>& scenes, const LocatorConfig& cfg,
                                  std::string name) {
    DomainEval ev;
    ev.name = std::move(name);
    std::size_t tp = 0, fp = 0, fn = 0;
    std::vector<double> conf, thr;
    for (const auto& s : scenes) {
        const auto out = forward(net, s.image, cfg);
        const auto [gt, radii] = gt_points(s.points);
        const auto m = match_points(extract_centers(out.binary_hard), gt, radii);
        tp += m.tp;
        fp += m.fp;
        fn += m.fn;
        ev.per_scene.push_back(localization_metrics(m));
        for (std::size_t i = 0; i < s.gt_binary.size(); ++i) {
            if (s.gt_binary[i] < 0.5) continue;
            // Saturated sigmoids can round to 0; c ln c -> 0 there anyway.
            conf.push_back(std::max(out.confidence[i], std::numeric_limits<double>::min()));
            thr.push_back(out.threshold[i]);
        }
    }
    ev.metrics = localization_metrics(tp, fp, fn);
    if (!conf.empty()) {
        ev.mcu = monte_carlo_uncertainty(conf);
        ev.confidence = distribution_stats(conf);
        ev.threshold = distribution_stats(thr);
    }
    return ev;
}

inline double target_f1(const LocatorNet& net, const std::vector<Scene>& scenes, const LocatorConfig& cfg) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (const auto& s : scenes) {
        const auto out = forward(net, s.image, cfg);
        const auto [gt, radii] = gt_points(s.points);
        const auto m = match_points(extract_centers(out.binary_hard), gt, radii);
        tp += m.tp;
        fp += m.fp;
        fn += m.fn;
    }
    return localization_metrics(tp, fp, fn).f1;
}

struct RunOptions {
    bool write_artifacts = true;
    /// Continue from an existing checkpoint in the run directory.
    bool resume = true;
    /// Stop after this many optimisation steps in this call (checkpoint kept,
    /// record marked incomplete). Unset runs to the end.
    std::optional<std::size_t> step_budget;
    std::ostream* log = nullptr;
};

inline std::filesystem::path run_directory(const ExperimentConfig& cfg, std::uint64_t seed) {
    std::string leaf = "seed_" + std::to_string(seed);
    if (cfg.experiment == ExperimentKind::perturbation) {
        std::ostringstream os;
        os << "sigma_" << cfg.sigma << "_" << leaf;
        leaf = os.str();
    }
    return std::filesystem::path(cfg.output_dir) / cfg.label() / cfg.shift_preset / leaf;
}

inline TrainStepOptions step_options(const ExperimentConfig& cfg, std::size_t step) {
    TrainStepOptions o;
    o.mu = cfg.mu;
    o.locator.tau = cfg.tau;
    if (cfg.experiment == ExperimentKind::fixed_threshold) o.locator.fixed_threshold = cfg.fixed_threshold;
    o.strong_loss = cfg.strong_loss;
    o.perturb_sigma = cfg.sigma;
    o.proxy = cfg.experiment == ExperimentKind::perturbation ? cfg.perturbation : ProxyMode::dpd_head;
    o.weights = {cfg.weights.erm, 0.0, 0.0};
    if (cfg.uses_momentum() && step >= cfg.warmup) {
        const double ramp = cfg.aux_ramp ? std::min(1.0, static_cast<double>(step - cfg.warmup + 1) /
                                                             static_cast<double>(cfg.aux_ramp))
                                         : 1.0;
        o.weights.cons = ramp * cfg.weights.cons;
        if (cfg.uses_proxy()) o.weights.dpd = ramp * cfg.weights.dpd;
    }
    return o;
}

namespace detail {

inline Tensor loss_log_blob(const std::vector<LossBreakdown>& log) {
    Tensor t({log.size(), 6});
    for (std::size_t i = 0; i < log.size(); ++i) {
        const auto& l = log[i];
        const double row[6] = {l.erm_l2, l.erm_l1, l.consistency, l.dpd_dice, l.dpd_l1, l.total};
        for (std::size_t k = 0; k < 6; ++k) t[i * 6 + k] = row[k];
    }
    return t;
}

inline std::vector<LossBreakdown> loss_log_from_blob(const Tensor& t, const ExperimentConfig& cfg) {
    std::vector<LossBreakdown> log;
    const std::size_t n = t.rank() == 2 ? t.dim(0) : 0;
    for (std::size_t i = 0; i < n; ++i) {
        LossBreakdown l;
        l.erm_l2 = t[i * 6];
        l.erm_l1 = t[i * 6 + 1];
        l.consistency = t[i * 6 + 2];
        l.dpd_dice = t[i * 6 + 3];
        l.dpd_l1 = t[i * 6 + 4];
        l.total = t[i * 6 + 5];
        l.weights = step_options(cfg, i).weights;
        log.push_back(l);
    }
    return log;
}

inline Tensor curve_blob(const std::vector<CurvePoint>& curve) {
    Tensor t({curve.size(), 2});
    for (std::size_t i = 0; i < curve.size(); ++i) {
        t[i * 2] = static_cast<double>(curve[i].step);
        t[i * 2 + 1] = curve[i].target_f1;
    }
    return t;
}

inline std::vector<CurvePoint> curve_from_blob(const Tensor& t) {
    std::vector<CurvePoint> c;
    const std::size_t n = t.rank() == 2 ? t.dim(0) : 0;
    for (std::size_t i = 0; i < n; ++i) c.push_back({static_cast<std::size_t>(t[i * 2]), t[i * 2 + 1]});
    return c;
}

}  // namespace detail

/// Scenes every run of a preset shares: a fixed training set and held-out
/// test sets, independent of the seed.
struct RunData {
    DomainSpec source, target, proxy;
    std::vector<Scene> train, source_test, target_test;
};

inline RunData make_run_data(const ExperimentConfig& cfg) {
    RunData d;
    std::tie(d.source, d.target) = shift_preset(cfg.shift_preset);
    d.proxy = midpoint_spec(d.source, d.target);
    d.train = sample_scenes(d.source, cfg.train_scenes, 0);
    d.source_test = sample_scenes(d.source, cfg.test_scenes, kTestSceneOffset);
    d.target_test = sample_scenes(d.target, cfg.test_scenes, kTestSceneOffset);
    return d;
}

/// Bound report for a trained network. Risks are pixel irrationality rates;
/// divergences come from image statistics; lambda terms are joint-training
/// estimates.
inline BoundReport compute_bound_report(const ExperimentConfig& cfg, const RunData& data, const LocatorNet& net,
                                        std::uint64_t seed) {
    LocatorConfig lc;
    lc.tau = cfg.tau;
    if (cfg.experiment == ExperimentKind::fixed_threshold) lc.fixed_threshold = cfg.fixed_threshold;
    BoundReport r;
    r.source_risk = pixel_risk(net, data.source_test, lc);
    r.proxy_risk = pixel_risk(net, sample_scenes(data.proxy, cfg.test_scenes, kTestSceneOffset), lc);
    const std::uint64_t base = divergence_index_base(seed);
    const auto fs = domain_features(data.source, cfg.divergence_samples, base);
    const auto fp = domain_features(data.proxy, cfg.divergence_samples, base);
    const auto ft = domain_features(data.target, cfg.divergence_samples, base);
    r.div_st = proxy_a_distance(fs, ft, seed).value;
    r.div_pt = proxy_a_distance(fp, ft, seed).value;
    r.vc_dim = cfg.bound.vc_dim;
    r.delta = cfg.bound.delta;
    r.m_s = cfg.train_scenes;
    if (cfg.uses_proxy()) {
        r.gamma = cfg.bound.gamma;
        r.m_p = (cfg.steps - cfg.warmup) * cfg.batch;
    } else {
        r.gamma = 1.0;
        r.m_p = 0;
    }
    r.lambda_hat = estimate_lambda(data.source, data.target, cfg.lambda_budget, seed);
    r.lambda_gamma_hat = cfg.uses_proxy() ? estimate_lambda_gamma(data.source, data.proxy, data.target, r.gamma,
                                                                  cfg.lambda_budget, seed)
                                          : r.lambda_hat;
    return finalize_bounds(r);
}

/// Trains and evaluates one seed of `cfg`.
inline RunRecord run_seed(const ExperimentConfig& cfg, std::uint64_t seed, const RunData& data,
                          const RunOptions& opt = {}) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();
    const std::uint64_t hash = config_hash(cfg);
    const auto dir = run_directory(cfg, seed);
    const auto ckpt_path = (dir / "checkpoint.bin").string();
    if (opt.write_artifacts) std::filesystem::create_directories(dir);

    RunRecord rec;
    rec.label = cfg.label();
    rec.preset = cfg.shift_preset;
    rec.kind = cfg.experiment;
    rec.sigma = cfg.sigma;
    rec.batch = cfg.batch;
    rec.seed = seed;
    rec.config_hash = hash;
    rec.steps = cfg.steps;
    rec.eval_interval = cfg.eval_interval;

    TrainState state(make_locator_params(seed), AdamOptions{cfg.lr});
    std::seed_seq sseq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 0xd9du};
    std::mt19937_64 rng(sseq);
    std::size_t start = 0;

    if (opt.write_artifacts && opt.resume && std::filesystem::exists(ckpt_path)) {
        const Checkpoint ck = read_checkpoint(ckpt_path);
        if (ck.config_hash != hash) {
            throw ResumeError("refusing to resume " + ckpt_path + ": config hash differs (checkpoint " +
                              std::to_string(ck.config_hash) + ", config " + std::to_string(hash) + ")");
        }
        if (ck.seed != seed) throw ResumeError("refusing to resume " + ckpt_path + ": seed differs");
        if (ck.step > cfg.steps) throw ResumeError("refusing to resume " + ckpt_path + ": checkpoint is past the end");
        restore_state(state, ck);
        set_rng_state(rng, ck.rng_state);
        if (auto it = ck.blobs.find("loss_log"); it != ck.blobs.end())
            rec.loss_log = detail::loss_log_from_blob(it->second, cfg);
        if (auto it = ck.blobs.find("curve"); it != ck.blobs.end()) rec.curve = detail::curve_from_blob(it->second);
        start = static_cast<std::size_t>(ck.step);
        if (opt.log) *opt.log << "resuming " << rec.label << " seed " << seed << " at step " << start << "\n";
    }

    auto save = [&](std::size_t step) {
        if (!opt.write_artifacts) return;
        Checkpoint ck;
        ck.config_hash = hash;
        ck.seed = seed;
        ck.step = step;
        ck.rng_state = rng_state(rng);
        capture_state(state, ck);
        ck.blobs["loss_log"] = detail::loss_log_blob(rec.loss_log);
        ck.blobs["curve"] = detail::curve_blob(rec.curve);
        write_checkpoint(ckpt_path, ck);
        rec.checkpoint_path = ckpt_path;
    };

    const auto pool = scene_pool(data.train);
    std::size_t done_this_call = 0;
    for (std::size_t step = start; step < cfg.steps; ++step) {
        if (opt.step_budget && done_this_call == *opt.step_budget) {
            save(step);
            rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            return rec;
        }
        const double lr = cfg.lr * std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(kLrRampSteps));
        state.main_opt.set_lr(lr);
        state.dpd_opt.set_lr(lr);
        const TrainStepOptions so = step_options(cfg, step);
        if (cfg.uses_momentum() && step == cfg.warmup) sync_momentum(state.params);
        auto batch = sample_batch(pool, cfg.batch, cfg.crop, rng);
        rec.loss_log.push_back(train_step(state, batch, so, rng));
        ++done_this_call;
        if ((step + 1) % cfg.eval_interval == 0) {
            rec.curve.push_back({step + 1, target_f1(state.params.main, data.target_test, so.locator)});
            if (opt.log)
                *opt.log << rec.label << " seed " << seed << " step " << step + 1 << " loss "
                         << rec.loss_log.back().total << " target_f1 " << rec.curve.back().target_f1 << "\n";
        }
        if (cfg.checkpoint_interval && (step + 1) % cfg.checkpoint_interval == 0 && step + 1 < cfg.steps)
            save(step + 1);
    }
    save(cfg.steps);

    const LocatorConfig lc = step_options(cfg, cfg.steps).locator;
    const auto& net = state.params.main;
    rec.domains.push_back(evaluate_domain(net, data.source_test, lc, "source"));
    rec.domains.push_back(evaluate_domain(net, data.target_test, lc, "target"));
    if (cfg.eval_all_presets) {
        for (auto p : all_presets) {
            const auto tgt = shift_preset(p).second;
            rec.domains.push_back(evaluate_domain(net, sample_scenes(tgt, cfg.test_scenes, kTestSceneOffset), lc,
                                                  "target_" + std::string(to_string(p))));
        }
    }
    if (cfg.bounds) rec.bounds = compute_bound_report(cfg, data, net, seed);
    rec.complete = true;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (opt.write_artifacts) write_run_artifacts(dir, cfg, rec);
    return rec;
}

inline RunRecord run_seed(const ExperimentConfig& cfg, std::uint64_t seed, const RunOptions& opt = {}) {
    return run_seed(cfg, seed, make_run_data(cfg), opt);
}

/// Every seed of `cfg`, sharing one set of scenes.
inline std::vector<RunRecord> run_experiment(const ExperimentConfig& cfg, const RunOptions& opt = {}) {
    cfg.validate();
    const RunData data = make_run_data(cfg);
    if (opt.write_artifacts) {
        const auto dir = std::filesystem::path(cfg.output_dir) / cfg.label() / cfg.shift_preset;
        std::filesystem::create_directories(dir);
        std::ofstream(dir / "config.ini") << to_ini(cfg);
    }
    std::vector<RunRecord> out;
    for (auto seed : cfg.seeds) out.push_back(run_seed(cfg, seed, data, opt));
    return out;
}

inline constexpr std::array<double, 3> kGaussSigmas{0.1, 0.2, 0.5};
inline constexpr std::array<ProxyMode, 4> kPerturbationKinds{ProxyMode::input_gauss, ProxyMode::embed_gauss,
                                                              ProxyMode::color_jitter, ProxyMode::mc_dropout};

/// Configs of the proxy-generation comparison: each perturbation kind in place
/// of the dpd_threshold branch; gaussian kinds at three noise levels (their
/// records share a label, so reports average over the levels).
inline std::vector<ExperimentConfig> perturbation_suite_configs(const ExperimentConfig& base) {
    std::vector<ExperimentConfig> out;
    for (auto kind : kPerturbationKinds) {
        ExperimentConfig c = base;
        c.experiment = ExperimentKind::perturbation;
        c.perturbation = kind;
        if (kind == ProxyMode::input_gauss || kind == ProxyMode::embed_gauss) {
            for (double s : kGaussSigmas) {
                c.sigma = s;
                out.push_back(c);
            }
        } else {
            out.push_back(c);
        }
    }
    return out;
}

inline std::vector<RunRecord> run_perturbation_suite(const ExperimentConfig& base, const RunOptions& opt = {}) {
    std::vector<RunRecord> out;
    for (const auto& c : perturbation_suite_configs(base))
        for (auto& r : run_experiment(c, opt)) out.push_back(std::move(r));
    return out;
}

inline constexpr std::array<std::size_t, 5> kSweepBatches{2, 4, 8, 16, 32};

/// Batch-size grid with and without momentum training; labels carry the batch.
inline std::vector<RunRecord> run_batch_sweep(const ExperimentConfig& base, const RunOptions& opt = {}) {
    std::vector<RunRecord> out;
    for (auto b : kSweepBatches)
        for (auto kind : {ExperimentKind::baseline_erm, ExperimentKind::momentum_only}) {
            ExperimentConfig c = base;
            c.experiment = kind;
            c.batch = b;
            c.output_dir = (std::filesystem::path(base.output_dir) / "batch_sweep" / ("b" + std::to_string(b))).string();
            for (auto& r : run_experiment(c, opt)) {
                r.label += "_b" + std::to_string(b);
                out.push_back(std::move(r));
            }
        }
    return out;
}

}  // namespace dpd
