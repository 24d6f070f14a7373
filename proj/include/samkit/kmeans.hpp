// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "samkit/embedding.hpp"
#include "samkit/errors.hpp"
#include "samkit/rng.hpp"

namespace samkit {

namespace detail {

inline double sq_dist(const std::vector<double>& a, const Embedding& b) {
    double d = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double diff = a[i] - static_cast<double>(b.values[i]);
        d += diff * diff;
    }
    return d;
}

}  // namespace detail

/// Within-cluster sum of squared distances for a given assignment.
inline double kmeans_objective(const std::vector<Embedding>& points,
                               const std::vector<size_t>& assignment, size_t k) {
    const size_t dim = points.empty() ? 0 : points[0].dim();
    std::vector<std::vector<double>> centroids(k, std::vector<double>(dim, 0.0));
    std::vector<size_t> counts(k, 0);
    for (size_t p = 0; p < points.size(); ++p) {
        for (size_t i = 0; i < dim; ++i) centroids[assignment[p]][i] += points[p].values[i];
        ++counts[assignment[p]];
    }
    for (size_t c = 0; c < k; ++c)
        if (counts[c])
            for (double& v : centroids[c]) v /= static_cast<double>(counts[c]);
    double total = 0.0;
    for (size_t p = 0; p < points.size(); ++p)
        total += detail::sq_dist(centroids[assignment[p]], points[p]);
    return total;
}

struct ClusterTrace {
    std::vector<size_t> assignments;
    std::vector<double> objective_per_iteration;  // WCSS after each assignment step
};

/// K-means with k-means++ seeding: at most 100 Lloyd iterations, convergence
/// when no centroid moves more than 1e-6 (squared movement below 1e-12).
/// Deterministic under seed; every cluster ends non-empty.
inline ClusterTrace cluster_split_traced(const std::vector<Embedding>& points, size_t n_splits,
                                         uint64_t seed) {
    if (n_splits < 1) throw InvalidValue("n_splits must be at least 1");
    if (n_splits > points.size())
        throw TooFewPoints("cannot split " + std::to_string(points.size()) + " points into " +
                           std::to_string(n_splits) + " clusters");
    for (const Embedding& p : points) {
        p.validate();
        check_same_dim(points[0], p);
    }

    ClusterTrace trace;
    trace.assignments.assign(points.size(), 0);
    if (n_splits == 1) {
        trace.objective_per_iteration.push_back(
            kmeans_objective(points, trace.assignments, 1));
        return trace;
    }

    const size_t dim = points[0].dim();
    SplitMix64 rng(seed);

    // k-means++ seeding: D² sampling.
    std::vector<std::vector<double>> centroids;
    centroids.reserve(n_splits);
    {
        const size_t first = static_cast<size_t>(rng.next_below(points.size()));
        centroids.emplace_back(points[first].values.begin(), points[first].values.end());
        std::vector<double> d2(points.size());
        while (centroids.size() < n_splits) {
            double total = 0.0;
            for (size_t p = 0; p < points.size(); ++p) {
                double best = std::numeric_limits<double>::max();
                for (const auto& c : centroids) best = std::min(best, detail::sq_dist(c, points[p]));
                d2[p] = best;
                total += best;
            }
            size_t chosen = 0;
            if (total <= 0.0) {
                // all remaining points coincide with centroids; pick any uncovered index
                chosen = static_cast<size_t>(rng.next_below(points.size()));
            } else {
                const double target = rng.next_double() * total;
                double cum = 0.0;
                for (size_t p = 0; p < points.size(); ++p) {
                    cum += d2[p];
                    if (cum >= target) {
                        chosen = p;
                        break;
                    }
                }
            }
            centroids.emplace_back(points[chosen].values.begin(), points[chosen].values.end());
        }
    }

    for (int iter = 0; iter < 100; ++iter) {
        // Assignment step (ties to the lower cluster index).
        for (size_t p = 0; p < points.size(); ++p) {
            double best = std::numeric_limits<double>::max();
            size_t arg = 0;
            for (size_t c = 0; c < centroids.size(); ++c) {
                const double d = detail::sq_dist(centroids[c], points[p]);
                if (d < best) {
                    best = d;
                    arg = c;
                }
            }
            trace.assignments[p] = arg;
        }

        // Repair empty clusters: move the point farthest from its centroid.
        std::vector<size_t> counts(n_splits, 0);
        for (size_t a : trace.assignments) ++counts[a];
        for (size_t c = 0; c < n_splits; ++c) {
            if (counts[c] > 0) continue;
            double worst = -1.0;
            size_t worst_p = 0;
            for (size_t p = 0; p < points.size(); ++p) {
                if (counts[trace.assignments[p]] <= 1) continue;
                const double d = detail::sq_dist(centroids[trace.assignments[p]], points[p]);
                if (d > worst) {
                    worst = d;
                    worst_p = p;
                }
            }
            --counts[trace.assignments[worst_p]];
            trace.assignments[worst_p] = c;
            ++counts[c];
        }

        trace.objective_per_iteration.push_back(
            kmeans_objective(points, trace.assignments, n_splits));

        // Update step.
        std::vector<std::vector<double>> next(n_splits, std::vector<double>(dim, 0.0));
        for (size_t p = 0; p < points.size(); ++p)
            for (size_t i = 0; i < dim; ++i)
                next[trace.assignments[p]][i] += points[p].values[i];
        for (size_t c = 0; c < n_splits; ++c)
            for (double& v : next[c]) v /= static_cast<double>(counts[c]);

        double movement = 0.0;
        for (size_t c = 0; c < n_splits; ++c) {
            double d = 0.0;
            for (size_t i = 0; i < dim; ++i) {
                const double diff = next[c][i] - centroids[c][i];
                d += diff * diff;
            }
            movement = std::max(movement, d);
        }
        centroids = std::move(next);
        if (movement < 1e-12) break;
    }
    return trace;
}

/// Cluster assignment per point, per the traced variant above.
inline std::vector<size_t> cluster_split(const std::vector<Embedding>& points, size_t n_splits,
                                         uint64_t seed) {
    return cluster_split_traced(points, n_splits, seed).assignments;
}

}  // namespace samkit
