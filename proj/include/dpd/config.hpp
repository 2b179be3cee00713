#pragma once

// Experiment configuration: a sectioned key = value text file.

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "dpd/error.hpp"
#include "dpd/scene.hpp"
#include "dpd/training.hpp"

namespace dpd {

/// Training variant of a run.
enum class ExperimentKind {
    baseline_erm,     // ERM only, learned threshold
    fixed_threshold,  // ERM only, constant threshold map
    momentum_only,    // ERM + momentum consistency
    full_dpd,         // ERM + consistency + proxy-domain agreement via dpd_threshold
    perturbation,     // full_dpd with the proxy produced by a perturbed momentum pass
};

inline std::string_view to_string(ExperimentKind k) {
    switch (k) {
        case ExperimentKind::baseline_erm: return "baseline_erm";
        case ExperimentKind::fixed_threshold: return "fixed_threshold";
        case ExperimentKind::momentum_only: return "momentum_only";
        case ExperimentKind::full_dpd: return "full_dpd";
        case ExperimentKind::perturbation: return "perturbation";
    }
    return "baseline_erm";
}

inline ExperimentKind experiment_kind_from_string(std::string_view s) {
    for (auto k : {ExperimentKind::baseline_erm, ExperimentKind::fixed_threshold, ExperimentKind::momentum_only,
                   ExperimentKind::full_dpd, ExperimentKind::perturbation})
        if (to_string(k) == s) return k;
    throw ConfigError("unknown experiment '" + std::string(s) +
                      "' (expected baseline_erm, fixed_threshold, momentum_only, full_dpd or perturbation)");
}

struct BoundParams {
    std::size_t vc_dim = 50;
    double delta = 0.05;
    double gamma = 0.5;
    friend bool operator==(const BoundParams&, const BoundParams&) = default;
};

struct ExperimentConfig {
    ExperimentKind experiment = ExperimentKind::full_dpd;
    double fixed_threshold = 0.5;
    ProxyMode perturbation = ProxyMode::input_gauss;
    double sigma = 0.1;
    bool strong_loss = true;
    std::string shift_preset = "mixed";
    std::vector<std::uint64_t> seeds{1, 2, 3};
    std::string output_dir = "runs";
    /// Also evaluate on the target of every shift preset, not only the configured one.
    bool eval_all_presets = false;

    std::size_t steps = 2000;
    std::size_t warmup = 600;
    /// Steps over which the consistency and proxy weights grow linearly to
    /// their full value once warmup ends; 0 switches them on at once.
    std::size_t aux_ramp = 200;
    std::size_t batch = 8;
    std::size_t crop = 32;
    double lr = 3e-3;
    double mu = 0.99;
    double tau = 0.1;
    LossWeights weights;
    std::size_t train_scenes = 200;
    std::size_t test_scenes = 100;
    std::size_t eval_interval = 100;
    /// 0 disables periodic checkpoints; the final checkpoint is always written.
    std::size_t checkpoint_interval = 500;

    bool bounds = true;
    BoundParams bound;
    std::size_t divergence_samples = 200;
    std::size_t lambda_budget = 200;

    friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;

    /// Short label used for directories and report rows.
    std::string label() const {
        std::string s(to_string(experiment));
        if (experiment == ExperimentKind::fixed_threshold) {
            std::ostringstream os;
            os << s << '_' << fixed_threshold;
            s = os.str();
        }
        if (experiment == ExperimentKind::perturbation) s += "_" + std::string(to_string(perturbation));
        if (!strong_loss && (experiment == ExperimentKind::full_dpd || experiment == ExperimentKind::perturbation))
            s += "_l1";
        return s;
    }

    bool uses_momentum() const {
        return experiment == ExperimentKind::momentum_only || experiment == ExperimentKind::full_dpd ||
               experiment == ExperimentKind::perturbation;
    }
    bool uses_proxy() const {
        return experiment == ExperimentKind::full_dpd || experiment == ExperimentKind::perturbation;
    }

    void validate() const {
        auto fail = [](const std::string& m) { throw ConfigError("config: " + m); };
        if (seeds.empty()) fail("seeds must be non-empty");
        if (steps < 1) fail("steps must be >= 1");
        if (warmup > steps) fail("warmup must not exceed steps");
        if (batch < 1) fail("batch must be >= 1");
        if (crop == 0 || crop % kFeatureStride) fail("crop must be a positive multiple of 4");
        if (!(lr > 0.0)) fail("lr must be positive");
        if (!(mu >= 0.0 && mu <= 1.0)) fail("mu must lie in [0,1]");
        if (!(tau > 0.0)) fail("tau must be positive");
        if (!(weights.erm >= 0.0 && weights.cons >= 0.0 && weights.dpd >= 0.0)) fail("loss weights must be >= 0");
        if (train_scenes < 1 || test_scenes < 1) fail("scene counts must be >= 1");
        if (eval_interval < 1 || eval_interval > steps) fail("eval_interval must lie in [1, steps]");
        if (!(fixed_threshold > 0.0 && fixed_threshold < 1.0)) fail("fixed_threshold must lie in (0,1)");
        if (!(sigma > 0.0)) fail("sigma must be positive");
        if (experiment == ExperimentKind::perturbation && perturbation == ProxyMode::dpd_head)
            fail("perturbation kind must be input_gauss, embed_gauss, color_jitter or mc_dropout");
        if (bound.vc_dim < 1) fail("vc_dim must be >= 1");
        if (!(bound.delta > 0.0 && bound.delta < 1.0)) fail("delta must lie in (0,1)");
        if (!(bound.gamma >= 0.0 && bound.gamma <= 1.0)) fail("gamma must lie in [0,1]");
        if (divergence_samples < 100) fail("divergence_samples must be >= 100");
        preset_from_string(shift_preset);
        const DomainSpec src = source_spec();
        if (crop > src.height || crop > src.width) fail("crop exceeds the scene size");
    }
};

namespace detail {

inline std::string format_double(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    if (ec != std::errc()) throw ConfigError("config: cannot format number");
    return std::string(buf, end);
}

inline double parse_double(const std::string& key, const std::string& s) {
    double v = 0.0;
    auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || end != s.data() + s.size()) throw ConfigError("config: " + key + " is not a number: '" + s + "'");
    return v;
}

inline std::size_t parse_size(const std::string& key, const std::string& s) {
    std::uint64_t v = 0;
    auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || end != s.data() + s.size())
        throw ConfigError("config: " + key + " is not a non-negative integer: '" + s + "'");
    return static_cast<std::size_t>(v);
}

inline bool parse_bool(const std::string& key, const std::string& s) {
    if (s == "true") return true;
    if (s == "false") return false;
    throw ConfigError("config: " + key + " must be true or false, got '" + s + "'");
}

inline std::string trim(std::string s) {
    const auto a = s.find_first_not_of(" \t");
    const auto b = s.find_last_not_of(" \t");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
}

}  // namespace detail

inline std::string to_ini(const ExperimentConfig& c) {
    using detail::format_double;
    std::ostringstream os;
    std::string seeds;
    for (std::size_t i = 0; i < c.seeds.size(); ++i) seeds += (i ? "," : "") + std::to_string(c.seeds[i]);
    os << "[experiment]\n"
       << "kind = " << to_string(c.experiment) << "\n"
       << "fixed_threshold = " << format_double(c.fixed_threshold) << "\n"
       << "perturbation = " << to_string(c.perturbation) << "\n"
       << "sigma = " << format_double(c.sigma) << "\n"
       << "strong_loss = " << (c.strong_loss ? "true" : "false") << "\n"
       << "shift_preset = " << c.shift_preset << "\n"
       << "seeds = " << seeds << "\n"
       << "output_dir = " << c.output_dir << "\n"
       << "eval_all_presets = " << (c.eval_all_presets ? "true" : "false") << "\n"
       << "\n[training]\n"
       << "steps = " << c.steps << "\n"
       << "warmup = " << c.warmup << "\n"
       << "aux_ramp = " << c.aux_ramp << "\n"
       << "batch = " << c.batch << "\n"
       << "crop = " << c.crop << "\n"
       << "lr = " << format_double(c.lr) << "\n"
       << "mu = " << format_double(c.mu) << "\n"
       << "tau = " << format_double(c.tau) << "\n"
       << "w_erm = " << format_double(c.weights.erm) << "\n"
       << "w_cons = " << format_double(c.weights.cons) << "\n"
       << "w_dpd = " << format_double(c.weights.dpd) << "\n"
       << "train_scenes = " << c.train_scenes << "\n"
       << "test_scenes = " << c.test_scenes << "\n"
       << "eval_interval = " << c.eval_interval << "\n"
       << "checkpoint_interval = " << c.checkpoint_interval << "\n"
       << "\n[bounds]\n"
       << "enabled = " << (c.bounds ? "true" : "false") << "\n"
       << "vc_dim = " << c.bound.vc_dim << "\n"
       << "delta = " << format_double(c.bound.delta) << "\n"
       << "gamma = " << format_double(c.bound.gamma) << "\n"
       << "divergence_samples = " << c.divergence_samples << "\n"
       << "lambda_budget = " << c.lambda_budget << "\n";
    return os.str();
}

/// Parses a config; absent keys keep their defaults, unknown keys are errors.
inline ExperimentConfig parse_ini(std::istream& is) {
    namespace pt = boost::property_tree;
    pt::ptree tree;
    try {
        pt::read_ini(is, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    ExperimentConfig c;
    using namespace detail;
    for (const auto& [section, body] : tree) {
        if (body.empty() && !body.data().empty())
            throw ConfigError("config: key '" + section + "' must sit inside a [section]");
        for (const auto& [key, node] : body) {
            const std::string k = section + "." + key;
            const std::string v = trim(node.data());
            if (k == "experiment.kind") c.experiment = experiment_kind_from_string(v);
            else if (k == "experiment.fixed_threshold") c.fixed_threshold = parse_double(k, v);
            else if (k == "experiment.perturbation") c.perturbation = proxy_mode_from_string(v);
            else if (k == "experiment.sigma") c.sigma = parse_double(k, v);
            else if (k == "experiment.strong_loss") c.strong_loss = parse_bool(k, v);
            else if (k == "experiment.shift_preset") c.shift_preset = v;
            else if (k == "experiment.output_dir") c.output_dir = v;
            else if (k == "experiment.eval_all_presets") c.eval_all_presets = parse_bool(k, v);
            else if (k == "experiment.seeds") {
                c.seeds.clear();
                std::stringstream ss(v);
                std::string item;
                while (std::getline(ss, item, ',')) c.seeds.push_back(parse_size(k, trim(item)));
            }
            else if (k == "training.steps") c.steps = parse_size(k, v);
            else if (k == "training.warmup") c.warmup = parse_size(k, v);
            else if (k == "training.aux_ramp") c.aux_ramp = parse_size(k, v);
            else if (k == "training.batch") c.batch = parse_size(k, v);
            else if (k == "training.crop") c.crop = parse_size(k, v);
            else if (k == "training.lr") c.lr = parse_double(k, v);
            else if (k == "training.mu") c.mu = parse_double(k, v);
            else if (k == "training.tau") c.tau = parse_double(k, v);
            else if (k == "training.w_erm") c.weights.erm = parse_double(k, v);
            else if (k == "training.w_cons") c.weights.cons = parse_double(k, v);
            else if (k == "training.w_dpd") c.weights.dpd = parse_double(k, v);
            else if (k == "training.train_scenes") c.train_scenes = parse_size(k, v);
            else if (k == "training.test_scenes") c.test_scenes = parse_size(k, v);
            else if (k == "training.eval_interval") c.eval_interval = parse_size(k, v);
            else if (k == "training.checkpoint_interval") c.checkpoint_interval = parse_size(k, v);
            else if (k == "bounds.enabled") c.bounds = parse_bool(k, v);
            else if (k == "bounds.vc_dim") c.bound.vc_dim = parse_size(k, v);
            else if (k == "bounds.delta") c.bound.delta = parse_double(k, v);
            else if (k == "bounds.gamma") c.bound.gamma = parse_double(k, v);
            else if (k == "bounds.divergence_samples") c.divergence_samples = parse_size(k, v);
            else if (k == "bounds.lambda_budget") c.lambda_budget = parse_size(k, v);
            else throw ConfigError("config: unknown key '" + k + "'");
        }
    }
    c.validate();
    return c;
}

inline ExperimentConfig parse_ini(const std::string& text) {
    std::istringstream is(text);
    return parse_ini(is);
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot open " + path);
    return parse_ini(is);
}

/// FNV-1a over the canonical text of everything that shapes a single-seed
/// run; seeds and output_dir are excluded.
inline std::uint64_t config_hash(const ExperimentConfig& c) {
    ExperimentConfig canon = c;
    canon.seeds = {0};
    canon.output_dir.clear();
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char ch : to_ini(canon)) {
        h ^= ch;
        h *= 0x100000001b3ull;
    }
    return h;
}

}  // namespace dpd
