#pragma once

// Results of one training run.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dpd/config.hpp"
#include "dpd/eval.hpp"
#include "dpd/losses.hpp"
#include "dpd/theory.hpp"

namespace dpd {

struct DomainEval {
    std::string name;
    LocalizationMetrics metrics;
    double mcu = 0.0;
    DistributionStats confidence;
    DistributionStats threshold;
    std::vector<LocalizationMetrics> per_scene;
};

struct CurvePoint {
    std::size_t step = 0;
    double target_f1 = 0.0;
};

struct RunRecord {
    std::string label;
    std::string preset;
    ExperimentKind kind = ExperimentKind::full_dpd;
    double sigma = 0.0;
    std::size_t batch = 0;
    std::uint64_t seed = 0;
    std::uint64_t config_hash = 0;
    std::size_t steps = 0;
    std::size_t eval_interval = 0;
    bool complete = false;
    std::vector<LossBreakdown> loss_log;
    std::string checkpoint_path;
    std::vector<DomainEval> domains;
    std::vector<CurvePoint> curve;
    std::optional<BoundReport> bounds;
    double seconds = 0.0;

    const DomainEval& domain(std::string_view name) const {
        for (const auto& d : domains)
            if (d.name == name) return d;
        throw ConfigError("run record has no domain '" + std::string(name) + "'");
    }
};

}  // namespace dpd
