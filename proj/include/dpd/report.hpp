#pragma once

// Per-run artifacts and aggregate reports (CSV tables plus a text summary).

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "dpd/config.hpp"
#include "dpd/record.hpp"

namespace dpd {

inline constexpr int kCsvSchemaVersion = 1;

namespace detail {

inline std::string num(double v) { return format_double(v); }

inline std::ofstream open_csv(const std::filesystem::path& path, std::string_view kind, std::string_view header) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    os << "# dpd-lab " << kind << " v" << kCsvSchemaVersion << "\n" << header << "\n";
    return os;
}

inline void stats_cells(std::ostream& os, const DistributionStats& s) {
    os << num(s.q1) << ',' << num(s.median) << ',' << num(s.q3) << ',' << num(s.mean) << ',' << num(s.min) << ','
       << num(s.max) << ',' << s.n;
}

}  // namespace detail

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;
    std::size_t n = 0;
};

/// Mean and sample standard deviation; a single value has std 0.
inline MeanStd mean_std(const std::vector<double>& v) {
    MeanStd r;
    r.n = v.size();
    if (v.empty()) return r;
    r.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    if (v.size() > 1) {
        double ss = 0.0;
        for (double x : v) ss += (x - r.mean) * (x - r.mean);
        r.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
    }
    return r;
}

/// "73.4 ±0.55": a [0,1] score shown in percent.
inline std::string format_percent(const MeanStd& m) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.1f ±%.2f", 100.0 * m.mean, 100.0 * m.std);
    return buf;
}

// ---------------------------------------------------------------------------
// Record serialization

inline nlohmann::json to_json(const DistributionStats& s) {
    return {{"q1", s.q1}, {"median", s.median}, {"q3", s.q3}, {"mean", s.mean},
            {"min", s.min}, {"max", s.max},       {"n", s.n}};
}

inline DistributionStats stats_from_json(const nlohmann::json& j) {
    DistributionStats s;
    s.q1 = j.at("q1");
    s.median = j.at("median");
    s.q3 = j.at("q3");
    s.mean = j.at("mean");
    s.min = j.at("min");
    s.max = j.at("max");
    s.n = j.at("n");
    return s;
}

inline nlohmann::json to_json(const BoundReport& r) {
    return {{"source_risk", r.source_risk}, {"proxy_risk", r.proxy_risk},
            {"div_st", r.div_st},           {"div_pt", r.div_pt},
            {"gamma", r.gamma},             {"m_s", r.m_s},
            {"m_p", r.m_p},                 {"vc_dim", r.vc_dim},
            {"delta", r.delta},             {"lambda_hat_estimate", r.lambda_hat},
            {"lambda_gamma_hat_estimate", r.lambda_gamma_hat}, {"erm_rhs", r.erm_rhs},
            {"dpd_rhs", r.dpd_rhs},         {"thm2_condition_holds", r.thm2_condition_holds}};
}

inline BoundReport bounds_from_json(const nlohmann::json& j) {
    BoundReport r;
    r.source_risk = j.at("source_risk");
    r.proxy_risk = j.at("proxy_risk");
    r.div_st = j.at("div_st");
    r.div_pt = j.at("div_pt");
    r.gamma = j.at("gamma");
    r.m_s = j.at("m_s");
    r.m_p = j.at("m_p");
    r.vc_dim = j.at("vc_dim");
    r.delta = j.at("delta");
    r.lambda_hat = j.at("lambda_hat_estimate");
    r.lambda_gamma_hat = j.at("lambda_gamma_hat_estimate");
    r.erm_rhs = j.at("erm_rhs");
    r.dpd_rhs = j.at("dpd_rhs");
    r.thm2_condition_holds = j.at("thm2_condition_holds");
    return r;
}

/// Summary of a record; the per-step loss log and per-scene rows live in CSVs.
inline nlohmann::json to_json(const RunRecord& r) {
    nlohmann::json j;
    j["label"] = r.label;
    j["preset"] = r.preset;
    j["experiment"] = std::string(to_string(r.kind));
    j["sigma"] = r.sigma;
    j["batch"] = r.batch;
    j["seed"] = r.seed;
    j["config_hash"] = r.config_hash;
    j["steps"] = r.steps;
    j["eval_interval"] = r.eval_interval;
    j["complete"] = r.complete;
    j["checkpoint"] = r.checkpoint_path;
    j["seconds"] = r.seconds;
    j["domains"] = nlohmann::json::array();
    for (const auto& d : r.domains) {
        j["domains"].push_back({{"name", d.name},
                                {"tp", d.metrics.tp},
                                {"fp", d.metrics.fp},
                                {"fn", d.metrics.fn},
                                {"precision", d.metrics.precision},
                                {"recall", d.metrics.recall},
                                {"f1", d.metrics.f1},
                                {"mcu", d.mcu},
                                {"confidence", to_json(d.confidence)},
                                {"threshold", to_json(d.threshold)}});
    }
    j["curve"] = nlohmann::json::array();
    for (const auto& c : r.curve) j["curve"].push_back({c.step, c.target_f1});
    j["bounds"] = r.bounds ? to_json(*r.bounds) : nlohmann::json();
    return j;
}

inline RunRecord record_from_json(const nlohmann::json& j) {
    RunRecord r;
    r.label = j.at("label");
    r.preset = j.at("preset");
    r.kind = experiment_kind_from_string(j.at("experiment").get<std::string>());
    r.sigma = j.at("sigma");
    r.batch = j.at("batch");
    r.seed = j.at("seed");
    r.config_hash = j.at("config_hash");
    r.steps = j.at("steps");
    r.eval_interval = j.at("eval_interval");
    r.complete = j.at("complete");
    r.checkpoint_path = j.at("checkpoint");
    r.seconds = j.at("seconds");
    for (const auto& d : j.at("domains")) {
        DomainEval e;
        e.name = d.at("name");
        e.metrics.tp = d.at("tp");
        e.metrics.fp = d.at("fp");
        e.metrics.fn = d.at("fn");
        e.metrics.precision = d.at("precision");
        e.metrics.recall = d.at("recall");
        e.metrics.f1 = d.at("f1");
        e.mcu = d.at("mcu");
        e.confidence = stats_from_json(d.at("confidence"));
        e.threshold = stats_from_json(d.at("threshold"));
        r.domains.push_back(std::move(e));
    }
    for (const auto& c : j.at("curve")) r.curve.push_back({c.at(0).get<std::size_t>(), c.at(1).get<double>()});
    if (!j.at("bounds").is_null()) r.bounds = bounds_from_json(j.at("bounds"));
    return r;
}

/// Every record.json below `root`, in path order.
inline std::vector<RunRecord> load_records(const std::filesystem::path& root) {
    if (!std::filesystem::is_directory(root)) throw IoError("not a directory: " + root.string());
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::recursive_directory_iterator(root))
        if (e.is_regular_file() && e.path().filename() == "record.json") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    std::vector<RunRecord> out;
    for (const auto& f : files) {
        std::ifstream is(f);
        try {
            out.push_back(record_from_json(nlohmann::json::parse(is)));
        } catch (const nlohmann::json::exception& e) {
            throw IoError("malformed record " + f.string() + ": " + e.what());
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Per-run artifacts

inline void write_run_artifacts(const std::filesystem::path& dir, const ExperimentConfig& cfg, const RunRecord& rec) {
    using detail::num;
    std::filesystem::create_directories(dir);
    std::ofstream(dir / "config.ini") << to_ini(cfg);
    {
        auto os = detail::open_csv(dir / "loss_log.csv", "loss_log", "step,erm_l2,erm_l1,consistency,dpd_dice,dpd_l1,total");
        for (std::size_t i = 0; i < rec.loss_log.size(); ++i) {
            const auto& l = rec.loss_log[i];
            os << i << ',' << num(l.erm_l2) << ',' << num(l.erm_l1) << ',' << num(l.consistency) << ','
               << num(l.dpd_dice) << ',' << num(l.dpd_l1) << ',' << num(l.total) << '\n';
        }
    }
    {
        auto os = detail::open_csv(dir / "curve.csv", "curve", "step,target_f1");
        for (const auto& c : rec.curve) os << c.step << ',' << num(c.target_f1) << '\n';
    }
    for (const auto& d : rec.domains) {
        auto os = detail::open_csv(dir / ("scenes_" + d.name + ".csv"), "scene_metrics",
                                   "scene_id,tp,fp,fn,precision,recall,f1");
        for (std::size_t i = 0; i < d.per_scene.size(); ++i) {
            const auto& m = d.per_scene[i];
            os << i << ',' << m.tp << ',' << m.fp << ',' << m.fn << ',' << num(m.precision) << ','
               << num(m.recall) << ',' << num(m.f1) << '\n';
        }
    }
    {
        auto os = detail::open_csv(dir / "distributions.csv", "distributions",
                                   "experiment,domain,quantity,q1,median,q3,mean,min,max,n");
        for (const auto& d : rec.domains) {
            os << rec.label << ',' << d.name << ",confidence,";
            detail::stats_cells(os, d.confidence);
            os << '\n' << rec.label << ',' << d.name << ",threshold,";
            detail::stats_cells(os, d.threshold);
            os << '\n';
        }
    }
    if (rec.bounds) {
        std::ofstream(dir / "bounds.txt") << to_key_value(*rec.bounds);
        auto os = detail::open_csv(dir / "bounds.csv", "bounds", bound_csv_header());
        os << to_csv_row(*rec.bounds) << '\n';
    }
    std::ofstream(dir / "record.json") << to_json(rec).dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Aggregate report

struct RecordGroup {
    std::string label;
    std::string preset;
    std::vector<const RunRecord*> runs;

    std::vector<double> values(std::string_view domain, double (*get)(const DomainEval&)) const {
        std::vector<double> v;
        for (const auto* r : runs)
            for (const auto& d : r->domains)
                if (d.name == domain) v.push_back(get(d));
        return v;
    }
};

/// Records grouped by (label, preset) in order of first appearance.
inline std::vector<RecordGroup> group_records(const std::vector<RunRecord>& records) {
    std::vector<RecordGroup> groups;
    for (const auto& r : records) {
        auto it = std::find_if(groups.begin(), groups.end(),
                               [&](const RecordGroup& g) { return g.label == r.label && g.preset == r.preset; });
        if (it == groups.end()) {
            groups.push_back({r.label, r.preset, {}});
            it = groups.end() - 1;
        }
        it->runs.push_back(&r);
    }
    return groups;
}

namespace detail {
inline double get_f1(const DomainEval& d) { return d.metrics.f1; }
inline double get_precision(const DomainEval& d) { return d.metrics.precision; }
inline double get_recall(const DomainEval& d) { return d.metrics.recall; }
inline double get_mcu(const DomainEval& d) { return d.mcu; }
}  // namespace detail

/// Writes the aggregate tables into `out_dir`; returns the file paths.
inline std::vector<std::filesystem::path> emit_report(const std::vector<RunRecord>& records,
                                                      const std::filesystem::path& out_dir) {
    using detail::num;
    if (records.empty()) throw ConfigError("emit_report: no run records");
    std::filesystem::create_directories(out_dir);
    const auto groups = group_records(records);
    std::vector<std::filesystem::path> files;
    auto ms = [](const RecordGroup& g, std::string_view dom, double (*get)(const DomainEval&)) {
        return mean_std(g.values(dom, get));
    };
    auto cells = [&](std::ostream& os, const MeanStd& m) { os << ',' << num(m.mean) << ',' << num(m.std); };

    {
        const auto path = out_dir / "metrics_table.csv";
        auto os = detail::open_csv(path, "metrics_table",
                                   "experiment,preset,n_seeds,source_f1_mean,source_f1_std,source_precision_mean,"
                                   "source_precision_std,source_recall_mean,source_recall_std,target_f1_mean,"
                                   "target_f1_std,target_precision_mean,target_precision_std,target_recall_mean,"
                                   "target_recall_std");
        for (const auto& g : groups) {
            os << g.label << ',' << g.preset << ',' << g.runs.size();
            for (const char* dom : {"source", "target"}) {
                cells(os, ms(g, dom, detail::get_f1));
                cells(os, ms(g, dom, detail::get_precision));
                cells(os, ms(g, dom, detail::get_recall));
            }
            os << '\n';
        }
        files.push_back(path);
    }
    {
        const auto path = out_dir / "ablation.csv";
        auto os = detail::open_csv(path, "ablation",
                                   "experiment,preset,n_seeds,target_f1_mean,target_f1_std,delta_vs_baseline_erm");
        for (const auto& g : groups) {
            const auto m = ms(g, "target", detail::get_f1);
            os << g.label << ',' << g.preset << ',' << g.runs.size();
            cells(os, m);
            os << ',';
            for (const auto& b : groups)
                if (b.label == "baseline_erm" && b.preset == g.preset)
                    os << num(m.mean - ms(b, "target", detail::get_f1).mean);
            os << '\n';
        }
        files.push_back(path);
    }
    {
        const auto path = out_dir / "mcu.csv";
        auto os = detail::open_csv(path, "mcu",
                                   "experiment,preset,n_seeds,source_mcu_mean,source_mcu_std,target_mcu_mean,"
                                   "target_mcu_std");
        for (const auto& g : groups) {
            os << g.label << ',' << g.preset << ',' << g.runs.size();
            cells(os, ms(g, "source", detail::get_mcu));
            cells(os, ms(g, "target", detail::get_mcu));
            os << '\n';
        }
        files.push_back(path);
    }
    {
        const auto path = out_dir / "boxplot.csv";
        auto os = detail::open_csv(path, "boxplot",
                                   "experiment,preset,seed,domain,conf_q1,conf_median,conf_q3,conf_mean,conf_min,"
                                   "conf_max,conf_n,thr_q1,thr_median,thr_q3,thr_mean,thr_min,thr_max,thr_n");
        for (const auto& r : records)
            for (const auto& d : r.domains) {
                if (d.name != "target") continue;
                os << r.label << ',' << r.preset << ',' << r.seed << ',' << d.name << ',';
                detail::stats_cells(os, d.confidence);
                os << ',';
                detail::stats_cells(os, d.threshold);
                os << '\n';
            }
        files.push_back(path);
    }
    {
        const auto path = out_dir / "training_curve.csv";
        std::set<std::string> presets;
        for (const auto& g : groups) presets.insert(g.preset);
        std::string header = "step";
        for (const auto& g : groups) header += "," + g.label + (presets.size() > 1 ? "@" + g.preset : "");
        auto os = detail::open_csv(path, "training_curve", header);
        std::set<std::size_t> steps;
        for (const auto& r : records)
            for (const auto& c : r.curve) steps.insert(c.step);
        for (auto s : steps) {
            os << s;
            for (const auto& g : groups) {
                std::vector<double> v;
                for (const auto* r : g.runs)
                    for (const auto& c : r->curve)
                        if (c.step == s) v.push_back(c.target_f1);
                os << ',';
                if (!v.empty()) os << num(mean_std(v).mean);
            }
            os << '\n';
        }
        files.push_back(path);
    }
    {
        const auto path = out_dir / "bounds.csv";
        auto os = detail::open_csv(path, "bounds", "experiment,preset,seed," + bound_csv_header());
        for (const auto& r : records)
            if (r.bounds) os << r.label << ',' << r.preset << ',' << r.seed << ',' << to_csv_row(*r.bounds) << '\n';
        files.push_back(path);
    }
    {
        const auto path = out_dir / "domain_metrics.csv";
        auto os = detail::open_csv(path, "domain_metrics",
                                   "experiment,preset,domain,n_seeds,f1_mean,f1_std,precision_mean,precision_std,"
                                   "recall_mean,recall_std,mcu_mean,mcu_std");
        for (const auto& g : groups) {
            std::vector<std::string> names;
            for (const auto* r : g.runs)
                for (const auto& d : r->domains)
                    if (std::find(names.begin(), names.end(), d.name) == names.end()) names.push_back(d.name);
            for (const auto& n : names) {
                os << g.label << ',' << g.preset << ',' << n << ',' << g.values(n, detail::get_f1).size();
                cells(os, ms(g, n, detail::get_f1));
                cells(os, ms(g, n, detail::get_precision));
                cells(os, ms(g, n, detail::get_recall));
                cells(os, ms(g, n, detail::get_mcu));
                os << '\n';
            }
        }
        files.push_back(path);
    }
    {
        const auto path = out_dir / "summary.txt";
        std::ofstream os(path);
        if (!os) throw IoError("cannot open " + path.string() + " for writing");
        for (const auto& g : groups) {
            os << g.label << " [" << g.preset << "] n=" << g.runs.size() << "\n";
            for (const char* dom : {"source", "target"}) {
                os << "  " << dom << ": F1 " << format_percent(ms(g, dom, detail::get_f1)) << "  Pre "
                   << format_percent(ms(g, dom, detail::get_precision)) << "  Rec "
                   << format_percent(ms(g, dom, detail::get_recall));
                const auto mcu = ms(g, dom, detail::get_mcu);
                char buf[64];
                std::snprintf(buf, sizeof buf, "  MCU %.3f ±%.3f\n", mcu.mean, mcu.std);
                os << buf;
            }
        }
        files.push_back(path);
    }
    return files;
}

}  // namespace dpd
