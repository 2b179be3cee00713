#include <gtest/gtest.h>

#include <random>

#include "dpd/eval.hpp"
#include "oracles.hpp"

using namespace dpd;

namespace {

std::vector<Point2> to_points(const std::vector<oracle::Pt>& v) {
    std::vector<Point2> out;
    for (const auto& p : v) out.push_back({p.r, p.c});
    return out;
}

std::vector<oracle::Pt> random_pts(std::size_t n, std::mt19937_64& rng, double extent) {
    std::uniform_real_distribution<double> u(0.0, extent);
    std::vector<oracle::Pt> v;
    for (std::size_t i = 0; i < n; ++i) v.push_back({u(rng), u(rng)});
    return v;
}

}  // namespace

TEST(ExtractCenters, EmptyMapAndSquareBlock) {
    EXPECT_TRUE(extract_centers(Tensor({1, 8, 8})).empty());
    Tensor m({1, 10, 10});
    for (std::size_t y = 2; y <= 4; ++y)
        for (std::size_t x = 5; x <= 7; ++x) m.at(0, y, x) = 1.0;
    const auto c = extract_centers(m);
    ASSERT_EQ(c.size(), 1u);
    EXPECT_EQ(c[0], (Point2{3.0, 6.0}));
}

TEST(ExtractCenters, DiagonalNeighboursAreSeparateAndSinglePixelsAreDropped) {
    Tensor m({1, 6, 6});
    m.at(0, 0, 0) = m.at(0, 0, 1) = 1.0;
    m.at(0, 1, 2) = m.at(0, 2, 2) = 1.0;  // touches the first blob only diagonally
    m.at(0, 5, 5) = 1.0;
    const auto c = extract_centers(m);
    ASSERT_EQ(c.size(), 2u);
    EXPECT_EQ(extract_centers(m, 1).size(), 3u);
    EXPECT_THROW(extract_centers(Tensor({2, 4, 4})), ShapeError);
}

TEST(ExtractCenters, MatchesFloodFillOracle) {
    std::mt19937_64 rng(21);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t h = 5 + rng() % 20, w = 5 + rng() % 20;
        std::bernoulli_distribution on(0.2 + 0.4 * (trial % 3) / 2.0);
        std::vector<int> grid(h * w);
        Tensor m({1, h, w});
        for (std::size_t i = 0; i < h * w; ++i) {
            grid[i] = on(rng);
            m[i] = grid[i];
        }
        std::vector<oracle::Blob> want;
        for (const auto& b : oracle::flood_fill(grid, h, w))
            if (b.area >= kMinComponentArea) want.push_back(b);
        const auto got = extract_centers(m);
        ASSERT_EQ(got.size(), want.size());
        for (std::size_t i = 0; i < got.size(); ++i) {
            EXPECT_NEAR(got[i].row, want[i].r, 1e-12);
            EXPECT_NEAR(got[i].col, want[i].c, 1e-12);
        }
    }
}

TEST(Matching, IdenticalSetsMatchCompletely) {
    std::mt19937_64 rng(1);
    const auto pts = to_points(random_pts(12, rng, 30.0));
    const auto m = match_points(pts, pts, 2.0);
    EXPECT_EQ(m.tp, 12u);
    EXPECT_EQ(m.fp, 0u);
    EXPECT_EQ(m.fn, 0u);
    EXPECT_EQ(m.total_distance(), 0.0);
}

TEST(Matching, OneToOne) {
    const auto m = match_points({{0.0, 0.0}, {0.0, 1.0}}, {{0.0, 0.5}}, 2.0);
    EXPECT_EQ(m.tp, 1u);
    EXPECT_EQ(m.fp, 1u);
    EXPECT_EQ(m.fn, 0u);
}

TEST(Matching, EmptySidesAndBadArguments) {
    const auto a = match_points({}, {{1.0, 1.0}}, 1.0);
    EXPECT_EQ(a.fn, 1u);
    const auto b = match_points({{1.0, 1.0}}, {}, 1.0);
    EXPECT_EQ(b.fp, 1u);
    EXPECT_THROW(match_points({}, {{1.0, 1.0}}, 0.0), ConfigError);
    EXPECT_THROW(match_points({}, {{1.0, 1.0}}, std::vector<double>{}), ShapeError);
}

TEST(Matching, AgreesWithExhaustiveSearch) {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> rad(1.0, 4.0);
    for (int trial = 0; trial < 1500; ++trial) {
        const auto p = random_pts(rng() % 7, rng, 10.0), g = random_pts(rng() % 7, rng, 10.0);
        std::vector<double> radius;
        for (std::size_t j = 0; j < g.size(); ++j) radius.push_back(rad(rng));
        const auto m = match_points(to_points(p), to_points(g), radius);
        const auto [n, d] = oracle::brute_force_match(p, g, radius);
        ASSERT_EQ(m.tp, n) << "trial " << trial;
        EXPECT_NEAR(m.total_distance(), d, 1e-9) << "trial " << trial;
        EXPECT_EQ(m.fp + m.tp, p.size());
        EXPECT_EQ(m.fn + m.tp, g.size());
    }
}

TEST(Matching, PairsAreInjectiveAdmissibleAndBeatGreedy) {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 300; ++trial) {
        const auto p = random_pts(5 + rng() % 40, rng, 40.0), g = random_pts(5 + rng() % 40, rng, 40.0);
        const std::vector<double> radius(g.size(), 3.0);
        const auto m = match_points(to_points(p), to_points(g), radius);
        std::vector<int> up(p.size()), ug(g.size());
        for (const auto& pr : m.pairs) {
            EXPECT_EQ(up[pr.pred]++, 0);
            EXPECT_EQ(ug[pr.gt]++, 0);
            EXPECT_LE(pr.distance, 3.0);
        }
        EXPECT_GE(m.tp, oracle::greedy_match(p, g, radius));
    }
}

TEST(Metrics, FormulaAndConventions) {
    const auto m = localization_metrics(8, 2, 2);
    EXPECT_DOUBLE_EQ(m.precision, 0.8);
    EXPECT_DOUBLE_EQ(m.recall, 0.8);
    EXPECT_DOUBLE_EQ(m.f1, 0.8);
    const auto perfect = localization_metrics(5, 0, 0);
    EXPECT_EQ(perfect.f1, 1.0);
    EXPECT_EQ(perfect.precision, 1.0);
    EXPECT_EQ(localization_metrics(0, 3, 4).f1, 0.0);
    EXPECT_EQ(localization_metrics(0, 0, 0).precision, 0.0);
    EXPECT_EQ(localization_metrics(0, 0, 0).recall, 0.0);
}

TEST(Metrics, RangeAndHarmonicMean) {
    for (std::size_t tp = 0; tp < 12; ++tp)
        for (std::size_t fp = 0; fp < 12; ++fp)
            for (std::size_t fn = 0; fn < 12; ++fn) {
                const auto m = localization_metrics(tp, fp, fn);
                for (double v : {m.precision, m.recall, m.f1}) {
                    ASSERT_GE(v, 0.0);
                    ASSERT_LE(v, 1.0);
                }
                EXPECT_LE(m.f1, std::max(m.precision, m.recall) + 1e-15);
                if (m.precision > 0 && m.recall > 0) {
                    EXPECT_NEAR(1.0 / m.f1, 0.5 * (1.0 / m.precision + 1.0 / m.recall), 1e-12);
                }
            }
}

TEST(Distribution, ExamplesAndOracle) {
    const auto s = distribution_stats({5, 1, 4, 2, 3});
    EXPECT_EQ(s.q1, 2.0);
    EXPECT_EQ(s.median, 3.0);
    EXPECT_EQ(s.q3, 4.0);
    EXPECT_EQ(s.mean, 3.0);
    EXPECT_EQ(s.n, 5u);
    const auto c = distribution_stats(std::vector<double>(7, 0.25));
    EXPECT_EQ(c.q1, 0.25);
    EXPECT_EQ(c.q3, 0.25);
    EXPECT_DOUBLE_EQ(c.mean, 0.25);
    EXPECT_THROW(distribution_stats({}), UndefinedMetricError);

    std::mt19937_64 rng(4);
    std::normal_distribution<double> g;
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> v(1 + rng() % 50);
        for (auto& x : v) x = g(rng);
        const auto d = distribution_stats(v);
        EXPECT_NEAR(d.q1, oracle::quantile(v, 0.25), 1e-12);
        EXPECT_NEAR(d.median, oracle::quantile(v, 0.5), 1e-12);
        EXPECT_NEAR(d.q3, oracle::quantile(v, 0.75), 1e-12);
        EXPECT_LE(d.min, d.q1);
        EXPECT_LE(d.q1, d.median);
        EXPECT_LE(d.median, d.q3);
        EXPECT_LE(d.q3, d.max);
    }
}

TEST(SelfConsistency, RenderedGroundTruthScoresPerfectly) {
    for (auto preset : all_presets) {
        const auto [src, tgt] = shift_preset(preset);
        for (std::uint64_t i = 0; i < 100; ++i) {
            const Scene sc = sample_scene(i % 2 ? tgt : src, i);
            const auto [gt, radii] = gt_points(sc.points);
            const auto m = localization_metrics(match_points(extract_centers(sc.gt_binary), gt, radii));
            if (sc.points.empty()) continue;
            ASSERT_EQ(m.f1, 1.0) << to_string(preset) << " scene " << i;
        }
    }
}
