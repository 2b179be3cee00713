// dpdlab: scene generation, training runs, bound reports and aggregate tables.
//
// Exit status: 0 on success, 1 on a usage or configuration error, 2 on any
// other failure.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "dpd/experiment.hpp"
#include "grad_cases.hpp"

using namespace dpd;
namespace fs = std::filesystem;

namespace {

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string preset;
};

ExperimentConfig resolve_config(const Common& c) {
    ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : load_config(c.config);
    if (c.seed) cfg.seeds = {*c.seed};
    if (!c.out.empty()) cfg.output_dir = c.out;
    if (!c.preset.empty()) cfg.shift_preset = c.preset;
    cfg.validate();
    return cfg;
}

int cmd_generate(const Common& c, std::size_t count, bool images) {
    const ExperimentConfig cfg = resolve_config(c);
    const auto [src, tgt] = shift_preset(cfg.shift_preset);
    const std::uint64_t first = c.seed.value_or(0);
    const fs::path root = fs::path(cfg.output_dir) / "scenes" / cfg.shift_preset;
    for (const auto& [name, spec] : {std::pair{"source", src}, std::pair{"target", tgt}}) {
        const fs::path dir = root / name;
        fs::create_directories(dir);
        for (std::size_t i = 0; i < count; ++i) {
            const Scene s = sample_scene(spec, first + i);
            const std::string stem = (dir / ("scene_" + std::to_string(first + i))).string();
            write_scene(stem + ".bin", s);
            if (images) {
                write_netpbm(stem + ".ppm", s.image);
                write_netpbm(stem + "_gt.pgm", s.gt_binary);
            }
        }
    }
    std::cout << "wrote " << 2 * count << " scenes under " << root.string() << "\n";
    return 0;
}

int cmd_train(const Common& c, const std::string& grid, bool fresh) {
    const ExperimentConfig cfg = resolve_config(c);
    RunOptions opt;
    opt.resume = !fresh;
    opt.log = &std::cout;
    std::vector<RunRecord> recs;
    if (grid.empty()) recs = run_experiment(cfg, opt);
    else if (grid == "batch_sweep") recs = run_batch_sweep(cfg, opt);
    else if (grid == "perturbation") recs = run_perturbation_suite(cfg, opt);
    else throw ConfigError("unknown grid '" + grid + "' (expected batch_sweep or perturbation)");
    const fs::path report_dir = fs::path(cfg.output_dir) / "report";
    emit_report(recs, report_dir);
    std::ifstream summary(report_dir / "summary.txt");
    std::cout << summary.rdbuf();
    return 0;
}

struct BoundInputs {
    double source_risk = 0.0, proxy_risk = 0.0, lambda = 0.0, lambda_gamma = 0.0;
};

int cmd_bounds(const Common& c, const BoundInputs& in) {
    const ExperimentConfig cfg = resolve_config(c);
    const std::uint64_t seed = cfg.seeds.front();
    const auto [src, tgt] = shift_preset(cfg.shift_preset);
    const auto proxy = midpoint_spec(src, tgt);
    const auto pools = mixture_pools(src, proxy, tgt, seed, cfg.divergence_samples);
    const auto mix = mixture_divergence_check(pools, cfg.bound.gamma, seed);

    BoundReport r;
    r.source_risk = in.source_risk;
    r.proxy_risk = in.proxy_risk;
    r.div_st = mix.div_st;
    r.div_pt = mix.div_pt;
    r.gamma = cfg.bound.gamma;
    r.m_s = cfg.train_scenes;
    r.m_p = (cfg.steps - cfg.warmup) * cfg.batch;
    r.vc_dim = cfg.bound.vc_dim;
    r.delta = cfg.bound.delta;
    r.lambda_hat = in.lambda;
    r.lambda_gamma_hat = in.lambda_gamma;
    r = finalize_bounds(r);

    const fs::path dir = fs::path(cfg.output_dir) / "bounds" / cfg.shift_preset;
    fs::create_directories(dir);
    const std::string kv = to_key_value(r);
    std::ofstream(dir / ("seed_" + std::to_string(seed) + ".txt")) << kv;
    std::ofstream(dir / ("seed_" + std::to_string(seed) + ".csv")) << bound_csv_header() << "\n" << to_csv_row(r) << "\n";
    std::cout << kv << "mixture_lhs=" << mix.lhs << "\nmixture_rhs=" << mix.rhs
              << "\nmixture_holds=" << (mix.holds ? "true" : "false") << "\n";
    return 0;
}

int cmd_report(const Common& c) {
    const fs::path root = c.out.empty() ? fs::path("runs") : fs::path(c.out);
    const auto recs = load_records(root);
    if (recs.empty()) throw ConfigError("no record.json files under " + root.string());
    for (const auto& f : emit_report(recs, root / "report")) std::cout << f.string() << "\n";
    return 0;
}

int cmd_selftest() {
    std::size_t pass = 0, fail = 0;
    auto tally = [&](bool ok, const std::string& what) {
        (ok ? pass : fail)++;
        if (!ok) std::cout << "FAIL " << what << "\n";
    };
    for (const auto& c : gradcases::all_cases())
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            const auto r = c.run(seed);
            tally(r.max_relative_error < 1e-4, "grad " + c.name + " seed " + std::to_string(seed));
        }
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int i = 0; i < 200; ++i) {
        BoundReport r;
        r.source_risk = u(rng);
        r.div_st = 2.0 * u(rng);
        r.gamma = 1.0;
        r.m_s = 1 + rng() % 10000;
        r.m_p = 0;
        r.lambda_hat = r.lambda_gamma_hat = u(rng);
        tally(dpd_bound_rhs(r) == erm_bound_rhs(r), "degenerate proxy bound " + std::to_string(i));
        const auto t = thm2_check(r.div_st, 0.5 * r.div_st, 0.5);
        tally(r.div_st == 0.0 || t.tighter, "smaller proxy divergence tightens " + std::to_string(i));
    }
    const double vc = vc_complexity_term(1000, 10, 0.1);
    tally(std::abs(vc - 4.0 * std::sqrt((20.0 * std::log(2000.0) + std::log(20.0)) / 1000.0)) <= 1e-12, "vc term");
    tally(std::abs(monte_carlo_uncertainty({1.0 / std::exp(1.0)}) - 0.36788) <= 1e-5, "MCU of 1/e");
    std::cout << pass << " passed, " << fail << " failed\n";
    return fail ? 2 : 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dpdlab: dynamic proxy domain experiments at desk scale"};
    app.require_subcommand(1);
    Common common;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", common.config, "Experiment config file (sectioned key = value)");
        sub->add_option("--seed", common.seed, "Single seed, overriding the config's seed list");
        sub->add_option("--out", common.out, "Output directory");
        sub->add_option("--preset", common.preset, "Shift preset: scale_up, density_up, style_dark, resolution_down, mixed");
    };

    std::size_t count = 10;
    bool images = false;
    auto* gen = app.add_subcommand("generate", "Write source and target scenes of a preset");
    add_common(gen);
    gen->add_option("--count", count, "Scenes per domain");
    gen->add_flag("--images", images, "Also write PPM images and PGM ground-truth maps");

    std::string grid;
    bool fresh = false;
    auto* train = app.add_subcommand("train", "Run the configured experiment and emit the report tables");
    add_common(train);
    train->add_option("--grid", grid, "Run a grid instead: batch_sweep or perturbation");
    train->add_flag("--fresh", fresh, "Ignore existing checkpoints");

    BoundInputs bin;
    auto* bounds = app.add_subcommand("bounds", "Divergence and bound report for a preset, without training");
    add_common(bounds);
    bounds->add_option("--source-risk", bin.source_risk, "Source risk to plug into the bound");
    bounds->add_option("--proxy-risk", bin.proxy_risk, "Proxy risk to plug into the bound");
    bounds->add_option("--lambda", bin.lambda, "Joint optimal risk for source and target");
    bounds->add_option("--lambda-gamma", bin.lambda_gamma, "Joint optimal risk for the mixture and target");

    auto* report = app.add_subcommand("report", "Aggregate every record.json under --out");
    add_common(report);

    auto* selftest = app.add_subcommand("selftest", "Gradient checks and bound identities");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return 1;
    }

    try {
        if (*gen) return cmd_generate(common, count, images);
        if (*train) return cmd_train(common, grid, fresh);
        if (*bounds) return cmd_bounds(common, bin);
        if (*report) return cmd_report(common);
        if (*selftest) return cmd_selftest();
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
