#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "neurocarve/errors.hpp"
#include "neurocarve/kdtree.hpp"
#include "neurocarve/mesh.hpp"

namespace ncarve {

// Symmetric mean nearest-neighbor *squared* distance. Raw value; any report
// scaling happens at presentation time.
inline double chamfer(const PointCloud& a, const PointCloud& b) {
    if (a.points.empty() || b.points.empty()) throw EmptyCloud();
    const KdTree3 ta(a.points), tb(b.points);
    double sum_ab = 0;
    for (const auto& p : a.points) sum_ab += tb.nearest_sq(p);
    double sum_ba = 0;
    for (const auto& p : b.points) sum_ba += ta.nearest_sq(p);
    return sum_ab / static_cast<double>(a.points.size()) +
           sum_ba / static_cast<double>(b.points.size());
}

namespace detail {

// Hungarian algorithm (shortest augmenting path with potentials), O(n^3).
// cost is row-major n x n; returns the assignment column for each row.
inline std::vector<int> hungarian(const std::vector<double>& cost, int n) {
    const double INF = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0), v(n + 1, 0);
    std::vector<int> p(n + 1, 0), way(n + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(n + 1, INF);
        std::vector<char> used(n + 1, false);
        do {
            used[j0] = true;
            const int i0 = p[j0];
            double delta = INF;
            int j1 = 0;
            for (int j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = cost[static_cast<size_t>(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (int j = 0; j <= n; ++j) {
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
            const int j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0);
    }
    std::vector<int> match(n);
    for (int j = 1; j <= n; ++j)
        if (p[j] > 0) match[p[j] - 1] = j - 1;
    return match;
}

}  // namespace detail

// Exact EMD: min over bijections of the mean Euclidean matching cost,
// solved with the Hungarian algorithm.
inline double emd_exact(const PointCloud& a, const PointCloud& b, size_t cap = 512) {
    if (a.points.size() != b.points.size()) throw SizeMismatch();
    const size_t n = a.points.size();
    if (n == 0) throw EmptyCloud();
    if (n > cap) throw TooLargeForExact(std::to_string(n) + " > cap " + std::to_string(cap));
    std::vector<double> cost(n * n);
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < n; ++j)
            cost[i * n + j] = (a.points[i] - b.points[j]).norm();
    const auto match = detail::hungarian(cost, static_cast<int>(n));
    double total = 0;
    for (size_t i = 0; i < n; ++i) total += cost[i * n + static_cast<size_t>(match[i])];
    return total / static_cast<double>(n);
}

// Entropy-regularized EMD via log-domain Sinkhorn with uniform marginals.
// Returns the transport cost <P, C>; approaches emd_exact as epsilon -> 0.
inline double emd_sinkhorn(const PointCloud& a, const PointCloud& b, double epsilon,
                           int max_iters = 5000) {
    if (a.points.size() != b.points.size()) throw SizeMismatch();
    const size_t n = a.points.size();
    if (n == 0) throw EmptyCloud();
    if (epsilon <= 0) throw Error("epsilon must be positive");

    std::vector<double> cost(n * n);
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < n; ++j)
            cost[i * n + j] = (a.points[i] - b.points[j]).norm();

    const double logw = -std::log(static_cast<double>(n));  // log(1/n)
    std::vector<double> f(n, 0.0), g(n, 0.0);

    auto lse_row = [&](size_t i) {  // logsumexp_j (g_j - C_ij)/eps
        double m = -std::numeric_limits<double>::infinity();
        for (size_t j = 0; j < n; ++j) m = std::max(m, (g[j] - cost[i * n + j]) / epsilon);
        double s = 0;
        for (size_t j = 0; j < n; ++j) s += std::exp((g[j] - cost[i * n + j]) / epsilon - m);
        return m + std::log(s);
    };
    auto lse_col = [&](size_t j) {
        double m = -std::numeric_limits<double>::infinity();
        for (size_t i = 0; i < n; ++i) m = std::max(m, (f[i] - cost[i * n + j]) / epsilon);
        double s = 0;
        for (size_t i = 0; i < n; ++i) s += std::exp((f[i] - cost[i * n + j]) / epsilon - m);
        return m + std::log(s);
    };

    double residual = std::numeric_limits<double>::infinity();
    for (int it = 0; it < max_iters; ++it) {
        for (size_t i = 0; i < n; ++i) f[i] = epsilon * (logw - lse_row(i));
        for (size_t j = 0; j < n; ++j) g[j] = epsilon * (logw - lse_col(j));
        // rows are exact after the f update; check the row marginals now that
        // g moved underneath them
        residual = 0;
        for (size_t i = 0; i < n; ++i) {
            double rowsum = 0;
            for (size_t j = 0; j < n; ++j)
                rowsum += std::exp((f[i] + g[j] - cost[i * n + j]) / epsilon);
            residual += std::fabs(rowsum - 1.0 / static_cast<double>(n));
        }
        if (residual <= 1e-6) break;
    }
    if (residual > 1e-6)
        throw NonConvergence("marginal residual " + std::to_string(residual));

    double total = 0;
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < n; ++j)
            total += std::exp((f[i] + g[j] - cost[i * n + j]) / epsilon) * cost[i * n + j];
    return total;
}

}  // namespace ncarve
