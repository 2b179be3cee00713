#pragma once

// Point extraction, optimal matching and localization scores.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <vector>

#include "dpd/error.hpp"
#include "dpd/scene.hpp"
#include "dpd/tensor.hpp"

namespace dpd {

struct Point2 {
    double row = 0.0;
    double col = 0.0;
    friend bool operator==(const Point2&, const Point2&) = default;
};

inline constexpr std::size_t kMinComponentArea = 2;

/// Centroids of the 4-connected foreground components with area >= min_area,
/// in raster order of each component's first pixel.
inline std::vector<Point2> extract_centers(const Tensor& binary, std::size_t min_area = kMinComponentArea) {
    if (binary.rank() != 3 || binary.dim(0) != 1) {
        throw ShapeError("extract_centers: expected [1,H,W] map, got " + shape_string(binary.shape()));
    }
    const std::size_t h = binary.dim(1), w = binary.dim(2);
    std::vector<char> seen(h * w, 0);
    std::vector<std::size_t> stack;
    std::vector<Point2> centers;
    for (std::size_t start = 0; start < h * w; ++start) {
        if (seen[start] || binary[start] < 0.5) continue;
        seen[start] = 1;
        stack.assign(1, start);
        double sy = 0.0, sx = 0.0;
        std::size_t area = 0;
        while (!stack.empty()) {
            const std::size_t idx = stack.back();
            stack.pop_back();
            const std::size_t y = idx / w, x = idx % w;
            sy += static_cast<double>(y);
            sx += static_cast<double>(x);
            ++area;
            auto visit = [&](std::size_t n) {
                if (!seen[n] && binary[n] >= 0.5) {
                    seen[n] = 1;
                    stack.push_back(n);
                }
            };
            if (y > 0) visit(idx - w);
            if (y + 1 < h) visit(idx + w);
            if (x > 0) visit(idx - 1);
            if (x + 1 < w) visit(idx + 1);
        }
        if (area >= min_area) centers.push_back({sy / static_cast<double>(area), sx / static_cast<double>(area)});
    }
    return centers;
}

struct MatchPair {
    std::size_t pred = 0;
    std::size_t gt = 0;
    double distance = 0.0;
};

struct MatchResult {
    std::size_t tp = 0;
    std::size_t fp = 0;
    std::size_t fn = 0;
    std::vector<MatchPair> pairs;

    double total_distance() const {
        double s = 0.0;
        for (const auto& p : pairs) s += p.distance;
        return s;
    }
};

namespace detail {

// Minimum-cost perfect assignment on a square cost matrix (shortest augmenting
// paths with potentials). Returns row -> column.
inline std::vector<std::size_t> hungarian(const std::vector<std::vector<double>>& cost) {
    const std::size_t n = cost.size();
    constexpr double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
    std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(n + 1, inf);
        std::vector<char> used(n + 1, 0);
        do {
            used[j0] = 1;
            const std::size_t i0 = p[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0);
    }
    std::vector<std::size_t> row_to_col(n, 0);
    for (std::size_t j = 1; j <= n; ++j)
        if (p[j]) row_to_col[p[j] - 1] = j - 1;
    return row_to_col;
}

}  // namespace detail

/// Optimal one-to-one matching of predictions to ground truth. A pair is
/// admissible when its distance is at most the ground-truth point's radius.
/// The matching maximises the number of pairs, then minimises their total
/// distance.
inline MatchResult match_points(const std::vector<Point2>& pred, const std::vector<Point2>& gt,
                                const std::vector<double>& gt_radius) {
    if (gt_radius.size() != gt.size()) throw ShapeError("match_points: one radius per ground-truth point required");
    for (double r : gt_radius)
        if (!(r > 0.0)) throw ConfigError("match_points: radius must be positive");
    MatchResult res;
    const std::size_t np = pred.size(), ng = gt.size();
    const std::size_t n = std::max(np, ng);
    if (n == 0) return res;
    double max_r = 0.0;
    for (double r : gt_radius) max_r = std::max(max_r, r);
    // Any set of admissible pairs costs less than one inadmissible slot.
    const double big = static_cast<double>(n + 1) * (max_r + 1.0);
    std::vector<std::vector<double>> cost(n, std::vector<double>(n, big));
    std::vector<std::vector<double>> dist(np, std::vector<double>(ng, 0.0));
    for (std::size_t i = 0; i < np; ++i)
        for (std::size_t j = 0; j < ng; ++j) {
            const double d = std::hypot(pred[i].row - gt[j].row, pred[i].col - gt[j].col);
            dist[i][j] = d;
            if (d <= gt_radius[j]) cost[i][j] = d;
        }
    const auto assign = detail::hungarian(cost);
    std::vector<char> gt_used(ng, 0);
    for (std::size_t i = 0; i < np; ++i) {
        const std::size_t j = assign[i];
        if (j < ng && dist[i][j] <= gt_radius[j]) {
            res.pairs.push_back({i, j, dist[i][j]});
            gt_used[j] = 1;
        }
    }
    res.tp = res.pairs.size();
    res.fp = np - res.tp;
    res.fn = ng - res.tp;
    return res;
}

inline MatchResult match_points(const std::vector<Point2>& pred, const std::vector<Point2>& gt, double radius) {
    return match_points(pred, gt, std::vector<double>(gt.size(), radius));
}

/// Ground-truth head centres and radii from scene annotations.
inline std::pair<std::vector<Point2>, std::vector<double>> gt_points(const std::vector<HeadPoint>& heads) {
    std::vector<Point2> pts;
    std::vector<double> radii;
    for (const auto& h : heads) {
        pts.push_back({static_cast<double>(h.row), static_cast<double>(h.col)});
        radii.push_back(static_cast<double>(h.radius));
    }
    return {std::move(pts), std::move(radii)};
}

struct LocalizationMetrics {
    std::size_t tp = 0, fp = 0, fn = 0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

inline LocalizationMetrics localization_metrics(std::size_t tp, std::size_t fp, std::size_t fn) {
    LocalizationMetrics m{tp, fp, fn};
    m.precision = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
    m.recall = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
    m.f1 = m.precision + m.recall > 0.0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
    return m;
}

inline LocalizationMetrics localization_metrics(const MatchResult& m) { return localization_metrics(m.tp, m.fp, m.fn); }

struct DistributionStats {
    double q1 = 0.0, median = 0.0, q3 = 0.0;
    double mean = 0.0, min = 0.0, max = 0.0;
    std::size_t n = 0;
};

/// Quantile with linear interpolation between order statistics at h = (n-1)p.
inline double quantile_sorted(const std::vector<double>& sorted, double p) {
    const double h = (static_cast<double>(sorted.size()) - 1.0) * p;
    const std::size_t lo = static_cast<std::size_t>(std::floor(h));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

inline DistributionStats distribution_stats(std::vector<double> values) {
    if (values.empty()) throw UndefinedMetricError("distribution_stats: empty sample");
    std::sort(values.begin(), values.end());
    DistributionStats s;
    s.n = values.size();
    s.q1 = quantile_sorted(values, 0.25);
    s.median = quantile_sorted(values, 0.5);
    s.q3 = quantile_sorted(values, 0.75);
    s.min = values.front();
    s.max = values.back();
    s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
    return s;
}

}  // namespace dpd
