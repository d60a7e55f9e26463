#pragma once

// Brute-force reference implementations shared by unit and acceptance tests.

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numeric>
#include <span>
#include <vector>

#include "xmk/detection.hpp"
#include "xmk/model.hpp"

namespace oracle {

inline double dist(const xmk::Keypoint& a, const xmk::Keypoint& b) {
    return std::hypot(double(a.x) - b.x, double(a.y) - b.y);
}

/// Component id of every point in the eps-graph restricted to core points
/// (-1 for non-core points), by repeated relabelling until stable.
inline std::vector<int> core_components(std::span<const xmk::Keypoint> pts, double eps, int min_samples,
                                        std::vector<bool>& core) {
    const std::size_t n = pts.size();
    core.assign(n, false);
    for (std::size_t i = 0; i < n; ++i) {
        int cnt = 0;
        for (std::size_t j = 0; j < n; ++j) cnt += dist(pts[i], pts[j]) <= eps;
        core[i] = cnt >= min_samples;
    }
    std::vector<int> comp(n, -1);
    for (std::size_t i = 0; i < n; ++i)
        if (core[i]) comp[i] = int(i);
    for (bool changed = true; changed;) {
        changed = false;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                if (core[i] && core[j] && dist(pts[i], pts[j]) <= eps && comp[j] < comp[i]) {
                    comp[i] = comp[j];
                    changed = true;
                }
    }
    return comp;
}

/// Checks DBSCAN labels against density components: core points share a label
/// iff they share a component, border points carry the label of a core point
/// within eps, and noise is exactly the set of points with no core neighbour.
inline bool dbscan_consistent(std::span<const xmk::Keypoint> pts, double eps, int min_samples,
                              std::span<const int> labels) {
    std::vector<bool> core;
    const auto comp = core_components(pts, eps, min_samples, core);
    const std::size_t n = pts.size();
    if (labels.size() != n) return false;
    std::map<int, int> comp_to_label, label_to_comp;
    for (std::size_t i = 0; i < n; ++i) {
        if (!core[i]) continue;
        if (labels[i] < 0) return false;
        auto [a, ina] = comp_to_label.emplace(comp[i], labels[i]);
        auto [b, inb] = label_to_comp.emplace(labels[i], comp[i]);
        if (a->second != labels[i] || b->second != comp[i]) return false;
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (core[i]) continue;
        bool near_core = false, label_ok = false;
        for (std::size_t j = 0; j < n; ++j)
            if (core[j] && dist(pts[i], pts[j]) <= eps) {
                near_core = true;
                label_ok |= labels[i] == labels[j];
            }
        if (near_core ? !label_ok : labels[i] != xmk::kNoise) return false;
    }
    return true;
}

/// argmin_{j != k} ||a_k - p_j||, lowest index on ties, by direct loops.
inline std::vector<int> hardest_negatives(const xmk::DescriptorMat& a, const xmk::DescriptorMat& p) {
    const auto b = a.cols();
    std::vector<int> out(static_cast<std::size_t>(b), -1);
    for (Eigen::Index k = 0; k < b; ++k) {
        double best = INFINITY;
        for (Eigen::Index j = 0; j < b; ++j) {
            if (j == k) continue;
            double d = 0;
            for (Eigen::Index r = 0; r < a.rows(); ++r) {
                const double t = double(a(r, k)) - double(p(r, j));
                d += t * t;
            }
            if (d < best) {
                best = d;
                out[static_cast<std::size_t>(k)] = int(j);
            }
        }
    }
    return out;
}

/// Full similarity matrix in long double, then a stable partial sort.
inline std::vector<std::vector<std::pair<int, double>>> dense_knn(const xmk::DescriptorMat& q,
                                                                    const xmk::DescriptorMat& idx, int k) {
    auto norm = [](const xmk::DescriptorMat& m, Eigen::Index c) {
        long double s = 0;
        for (Eigen::Index r = 0; r < m.rows(); ++r) s += (long double)m(r, c) * m(r, c);
        return std::sqrt(s);
    };
    std::vector<std::vector<std::pair<int, double>>> out;
    for (Eigen::Index i = 0; i < q.cols(); ++i) {
        std::vector<std::pair<int, double>> row;
        const long double nq = norm(q, i);
        for (Eigen::Index j = 0; j < idx.cols(); ++j) {
            long double dot = 0;
            for (Eigen::Index r = 0; r < q.rows(); ++r) dot += (long double)q(r, i) * idx(r, j);
            const long double den = nq * norm(idx, j);
            row.emplace_back(int(j), den > 0 ? double(dot / den) : 0.0);
        }
        std::stable_sort(row.begin(), row.end(), [](auto& a, auto& b) { return a.second > b.second; });
        row.resize(std::min<std::size_t>(row.size(), static_cast<std::size_t>(k)));
        out.push_back(std::move(row));
    }
    return out;
}

/// Convex hull area by gift wrapping plus the shoelace formula.
inline double hull_area(std::vector<std::array<double, 2>> pts) {
    std::sort(pts.begin(), pts.end());
    pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
    if (pts.size() < 3) return 0.0;
    auto cross = [](const std::array<double, 2>& o, const std::array<double, 2>& a, const std::array<double, 2>& b) {
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    };
    std::vector<std::array<double, 2>> hull;
    std::size_t start = 0, cur = 0;
    do {
        hull.push_back(pts[cur]);
        std::size_t next = (cur + 1) % pts.size();
        for (std::size_t i = 0; i < pts.size(); ++i) {
            const double c = cross(pts[cur], pts[next], pts[i]);
            const auto d2 = [&](std::size_t t) {
                return std::pow(pts[t][0] - pts[cur][0], 2) + std::pow(pts[t][1] - pts[cur][1], 2);
            };
            if (c < 0 || (c == 0 && d2(i) > d2(next))) next = i;
        }
        cur = next;
        if (hull.size() > pts.size()) break;
    } while (cur != start);
    double a = 0;
    for (std::size_t i = 0; i < hull.size(); ++i) {
        const auto& p = hull[i];
        const auto& q = hull[(i + 1) % hull.size()];
        a += p[0] * q[1] - q[0] * p[1];
    }
    return std::abs(a) / 2.0;
}

}  // namespace oracle
