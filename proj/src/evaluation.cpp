#include "xmk/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <set>

#include "xmk/error.hpp"
#include "xmk/parallel.hpp"
#include "xmk/rng.hpp"

namespace xmk {

namespace {

using Pt = std::array<double, 2>;

double cross(const Pt& o, const Pt& a, const Pt& b) {
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
}

std::ofstream open_out(const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    return out;
}

}  // namespace

GroundTruth GroundTruth::smooth_warp(int height, int width, int depth, double amplitude_px, std::uint64_t seed) {
    if (height < 1 || width < 1 || depth < 1) throw ConfigError("warp shape components must be >= 1");
    if (!(amplitude_px >= 0.0)) throw ConfigError("warp amplitude must be >= 0");
    GroundTruth gt;
    gt.height_ = height;
    gt.width_ = width;
    gt.depth_ = depth;
    const auto n = static_cast<std::size_t>(height) * width * depth;
    gt.dx_.assign(n, 0.0f);
    gt.dy_.assign(n, 0.0f);

    struct Mode {
        double kx, ky, kz, phase, ax, ay;
    };
    std::mt19937_64 rng(derive_seed({seed, 0x3A5Full}));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<Mode> modes(4);
    for (auto& m : modes) {
        const double wavelength = 80.0 + 100.0 * unit(rng);
        const double dir = 2.0 * std::numbers::pi * unit(rng);
        m.kx = 2.0 * std::numbers::pi / wavelength * std::cos(dir);
        m.ky = 2.0 * std::numbers::pi / wavelength * std::sin(dir);
        m.kz = 2.0 * std::numbers::pi / (40.0 + 60.0 * unit(rng));
        m.phase = 2.0 * std::numbers::pi * unit(rng);
        m.ax = 2.0 * unit(rng) - 1.0;
        m.ay = 2.0 * unit(rng) - 1.0;
    }
    double peak = 0.0;
    std::size_t i = 0;
    for (int z = 0; z < depth; ++z)
        for (int y = 0; y < height; ++y)
            for (int x = 0; x < width; ++x, ++i) {
                double u = 0.0, v = 0.0;
                for (const auto& m : modes) {
                    const double s = std::sin(m.kx * x + m.ky * y + m.kz * z + m.phase);
                    u += m.ax * s;
                    v += m.ay * s;
                }
                gt.dx_[i] = static_cast<float>(u);
                gt.dy_[i] = static_cast<float>(v);
                peak = std::max(peak, std::hypot(u, v));
            }
    const double scale = peak > 0.0 ? amplitude_px / peak : 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        gt.dx_[k] = static_cast<float>(gt.dx_[k] * scale);
        gt.dy_[k] = static_cast<float>(gt.dy_[k] * scale);
    }
    return gt;
}

std::array<double, 2> GroundTruth::displacement(double x, double y, int z) const {
    x = std::clamp(x, 0.0, double(width_ - 1));
    y = std::clamp(y, 0.0, double(height_ - 1));
    const int x0 = std::min(static_cast<int>(x), width_ - 1), y0 = std::min(static_cast<int>(y), height_ - 1);
    const int x1 = std::min(x0 + 1, width_ - 1), y1 = std::min(y0 + 1, height_ - 1);
    const double fx = x - x0, fy = y - y0;
    const auto base = static_cast<std::size_t>(std::clamp(z, 0, depth_ - 1)) * height_ * width_;
    auto at = [&](const std::vector<float>& f, int yy, int xx) { return double(f[base + std::size_t(yy) * width_ + xx]); };
    auto interp = [&](const std::vector<float>& f) {
        return (1 - fy) * ((1 - fx) * at(f, y0, x0) + fx * at(f, y0, x1)) + fy * ((1 - fx) * at(f, y1, x0) + fx * at(f, y1, x1));
    };
    return {interp(dx_), interp(dy_)};
}

std::array<double, 2> GroundTruth::map(double x, double y, int z) const {
    if (is_identity()) return {x, y};
    // Solve q + u(q) = p by fixed-point iteration; u is smooth and small.
    double qx = x, qy = y;
    for (int it = 0; it < 30; ++it) {
        const auto u = displacement(qx, qy, z);
        qx = x - u[0];
        qy = y - u[1];
    }
    return {qx, qy};
}

Volume GroundTruth::warp_volume(const Volume& v) const {
    if (is_identity()) return v;
    if (v.height() != height_ || v.width() != width_ || v.depth() != depth_)
        throw Error("warp field and volume shapes differ");
    std::vector<float> out(v.voxels().size());
    std::size_t i = 0;
    for (int z = 0; z < depth_; ++z)
        for (int y = 0; y < height_; ++y)
            for (int x = 0; x < width_; ++x, ++i) {
                const double sx = std::clamp(x + double(dx_[i]), 0.0, double(width_ - 1));
                const double sy = std::clamp(y + double(dy_[i]), 0.0, double(height_ - 1));
                const int x0 = std::min(static_cast<int>(sx), width_ - 1), y0 = std::min(static_cast<int>(sy), height_ - 1);
                const int x1 = std::min(x0 + 1, width_ - 1), y1 = std::min(y0 + 1, height_ - 1);
                const double fx = sx - x0, fy = sy - y0;
                out[i] = static_cast<float>((1 - fy) * ((1 - fx) * v.at(y0, x0, z) + fx * v.at(y0, x1, z)) +
                                            fy * ((1 - fx) * v.at(y1, x0, z) + fx * v.at(y1, x1, z)));
            }
    return Volume(v.shape(), std::move(out), v.modality(), v.spacing_mm());
}

double convex_hull_area(std::span<const Pt> pts_in) {
    std::vector<Pt> pts(pts_in.begin(), pts_in.end());
    std::sort(pts.begin(), pts.end());
    pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
    if (pts.size() < 3) return 0.0;
    std::vector<Pt> hull(2 * pts.size());
    std::size_t k = 0;
    for (const auto& p : pts) {
        while (k >= 2 && cross(hull[k - 2], hull[k - 1], p) <= 0) --k;
        hull[k++] = p;
    }
    for (std::size_t i = pts.size() - 1, t = k + 1; i-- > 0;) {
        while (k >= t && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
        hull[k++] = pts[i];
    }
    hull.resize(k - 1);
    double a = 0.0;
    for (std::size_t i = 0; i < hull.size(); ++i) {
        const auto& p = hull[i];
        const auto& q = hull[(i + 1) % hull.size()];
        a += p[0] * q[1] - q[0] * p[1];
    }
    return std::abs(a) / 2.0;
}

double area_coverage(std::span<const Pt> pts, int height, int width, AreaMode mode, int cell_px) {
    if (height < 2 || width < 2) return 0.0;
    if (mode == AreaMode::kConvexHull)
        return std::min(100.0, 100.0 * convex_hull_area(pts) / (double(width - 1) * double(height - 1)));
    if (cell_px < 1) throw ConfigError("grid cell size must be >= 1");
    const int gx = (width + cell_px - 1) / cell_px, gy = (height + cell_px - 1) / cell_px;
    std::set<std::pair<int, int>> cells;
    for (const auto& p : pts) {
        const int cx = std::clamp(static_cast<int>(std::floor(p[0] / cell_px)), 0, gx - 1);
        const int cy = std::clamp(static_cast<int>(std::floor(p[1] / cell_px)), 0, gy - 1);
        cells.emplace(cy, cx);
    }
    return 100.0 * double(cells.size()) / (double(gx) * gy);
}

std::vector<bool> correct_matches(const MatchSet& ms, const GroundTruth& gt) {
    std::vector<bool> ok;
    ok.reserve(ms.matches.size());
    for (const auto& m : ms.matches) {
        const auto& a = ms.mr_keypoints.at(m.mr_id);
        const auto& b = ms.us_keypoints.at(m.us_id);
        const auto t = gt.map(a.x, a.y, ms.slice_index);
        ok.push_back(std::hypot(b.x - t[0], b.y - t[1]) <= gt.tolerance_px);
    }
    return ok;
}

SliceScore score_matches(const MatchSet& ms, const GroundTruth& gt, int n_detected, int height, int width, AreaMode mode) {
    SliceScore s;
    s.slice_index = ms.slice_index;
    s.n_detected = n_detected;
    s.n_matches = static_cast<int>(ms.matches.size());
    const auto ok = correct_matches(ms, gt);
    std::vector<Pt> pts;
    for (std::size_t i = 0; i < ok.size(); ++i) {
        if (!ok[i]) continue;
        ++s.n_correct;
        const auto& k = ms.mr_keypoints[ms.matches[i].mr_id];
        pts.push_back({k.x, k.y});
    }
    s.empty = s.n_matches == 0;
    s.precision_pct = s.empty ? 0.0 : 100.0 * s.n_correct / s.n_matches;
    s.matching_score_pct = n_detected > 0 ? 100.0 * s.n_correct / n_detected : 0.0;
    s.area_pct = area_coverage(pts, height, width, mode);
    return s;
}

Deviation per_slice_deviation(std::span<const double> p) {
    if (p.size() < 2) throw Error("per-slice deviation needs at least two slices");
    Deviation d;
    for (double v : p) d.mean += v;
    d.mean /= double(p.size());
    double sq = 0.0;
    for (double v : p) {
        d.mean_abs_deviation += std::abs(v - d.mean);
        sq += (v - d.mean) * (v - d.mean);
    }
    d.mean_abs_deviation /= double(p.size());
    d.std_dev = std::sqrt(sq / double(p.size()));
    return d;
}

EvalReport aggregate(std::vector<SliceScore> scores, nlohmann::ordered_json config) {
    EvalReport r;
    r.config = std::move(config);
    r.n_slices = static_cast<int>(scores.size());
    std::vector<double> prec;
    for (const auto& s : scores) {
        r.matching_score_pct += s.matching_score_pct;
        r.matched_points += s.n_matches;
        r.area_pct += s.area_pct;
        if (s.empty)
            ++r.n_empty;
        else
            prec.push_back(s.precision_pct);
    }
    if (r.n_slices > 0) {
        r.matching_score_pct /= r.n_slices;
        r.matched_points /= r.n_slices;
        r.area_pct /= r.n_slices;
    }
    for (double v : prec) r.precision_pct += v;
    if (!prec.empty()) r.precision_pct /= double(prec.size());
    if (prec.size() >= 2) r.precision_spread = per_slice_deviation(prec);
    r.per_slice = std::move(scores);
    return r;
}

EvalReport evaluate_volumes(const Model& model, const Volume& mr, std::span<const Volume> us, std::span<const int> slices,
                            const DetectorConfig& det, const MatchConfig& mc, const GroundTruth& gt, AreaMode mode) {
    for (const auto& v : us)
        if (v.shape() != mr.shape()) throw Error("US volume is not aligned with the MR volume");
    std::vector<SliceScore> scores(slices.size() * us.size());
    parallel_for(slices.size(), [&](std::size_t i) {
        const int z = slices[i];
        const auto a = detect_and_describe(get_slice(mr, z), model, det, mc.n_mr, "MR");
        for (std::size_t v = 0; v < us.size(); ++v) {
            const auto b = detect_and_describe(get_slice(us[v], z), model, det, mc.m_us_cap, "US");
            const auto ms = match_described(a, b, mc);
            scores[i * us.size() + v] =
                score_matches(ms, gt, static_cast<int>(a.keypoints.size()), mr.height(), mr.width(), mode);
        }
    });
    return aggregate(std::move(scores));
}

EvalReport evaluate_pair(const Model& model, const Volume& mr, const Volume& us, std::span<const int> slices,
                         const DetectorConfig& det, const MatchConfig& mc, const GroundTruth& gt, AreaMode mode) {
    return evaluate_volumes(model, mr, std::span(&us, 1), slices, det, mc, gt, mode);
}

RepeatabilityResult mode_holdout_repeatability(const Model& model, const Volume& mr, const Volume& baseline,
                                               std::span<const Volume> held_out, std::span<const int> slices,
                                               const DetectorConfig& det, const MatchConfig& mc, double tolerance_px) {
    RepeatabilityResult res;
    const std::size_t nv = held_out.size();
    std::vector<int> base_count(slices.size(), 0);
    std::vector<long> per(slices.size() * nv, 0);
    parallel_for(slices.size(), [&](std::size_t i) {
        const int z = slices[i];
        const auto a = detect_and_describe(get_slice(mr, z), model, det, mc.n_mr, "MR");
        const auto b = detect_and_describe(get_slice(baseline, z), model, det, mc.m_us_cap, "US");
        const auto base = match_described(a, b, mc);
        base_count[i] = static_cast<int>(base.matches.size());
        for (std::size_t v = 0; v < nv; ++v) {
            const auto c = detect_and_describe(get_slice(held_out[v], z), model, det, mc.m_us_cap, "US");
            const auto ms = match_described(a, c, mc);
            std::vector<int> us_of(a.keypoints.size(), -1);
            for (const auto& m : ms.matches) us_of[m.mr_id] = m.us_id;
            for (const auto& m : base.matches) {
                const int u = us_of[m.mr_id];
                if (u < 0) continue;
                const auto& p = base.us_keypoints[m.us_id];
                const auto& q = ms.us_keypoints[u];
                if (std::hypot(p.x - q.x, p.y - q.y) <= tolerance_px) ++per[i * nv + v];
            }
        }
    });
    std::vector<long> recurring(nv, 0);
    for (std::size_t i = 0; i < slices.size(); ++i) {
        res.baseline_matches += base_count[i];
        for (std::size_t v = 0; v < nv; ++v) recurring[v] += per[i * nv + v];
    }
    if (res.baseline_matches == 0) throw Error("repeatability: the baseline match set is empty");
    for (long r : recurring) res.per_variant_pct.push_back(100.0 * double(r) / res.baseline_matches);
    for (double p : res.per_variant_pct) res.mean_pct += p;
    if (!res.per_variant_pct.empty()) res.mean_pct /= double(res.per_variant_pct.size());
    return res;
}

RetrievalResult slice_retrieval(const DescribedSlice& target, int true_index, std::span<const DescribedSlice> us_slices,
                                const MatchConfig& mc, double spacing_mm) {
    if (us_slices.empty()) throw Error("slice retrieval needs at least one candidate slice");
    RetrievalResult r;
    r.target_index = true_index;
    r.scores.resize(us_slices.size());
    parallel_for(us_slices.size(), [&](std::size_t i) {
        r.scores[i] = static_cast<int>(match_described(target, us_slices[i], mc).matches.size());
    });
    const auto best = std::max_element(r.scores.begin(), r.scores.end()) - r.scores.begin();
    r.best_index = us_slices[best].slice_index;
    r.error_mm = std::abs(r.best_index - true_index) * spacing_mm;
    return r;
}

std::vector<DescribedSlice> describe_volume(const Volume& v, const Model& model, const DetectorConfig& det,
                                            int max_keypoints, const std::string& source) {
    std::vector<DescribedSlice> out(static_cast<std::size_t>(v.depth()));
    parallel_for(out.size(), [&](std::size_t z) {
        out[z] = detect_and_describe(get_slice(v, static_cast<int>(z)), model, det, max_keypoints, source);
    });
    return out;
}

nlohmann::ordered_json report_json(const EvalReport& r) {
    nlohmann::ordered_json j;
    j["precision_pct"] = r.precision_pct;
    j["matching_score_pct"] = r.matching_score_pct;
    j["matched_points"] = r.matched_points;
    j["area_pct"] = r.area_pct;
    j["n_slices"] = r.n_slices;
    j["n_empty"] = r.n_empty;
    j["precision_mean_abs_deviation"] = r.precision_spread.mean_abs_deviation;
    j["precision_std"] = r.precision_spread.std_dev;
    auto& rows = j["per_slice"] = nlohmann::ordered_json::array();
    for (const auto& s : r.per_slice)
        rows.push_back({{"slice", s.slice_index},
                        {"n_detected", s.n_detected},
                        {"n_matches", s.n_matches},
                        {"n_correct", s.n_correct},
                        {"precision_pct", s.precision_pct},
                        {"matching_score_pct", s.matching_score_pct},
                        {"area_pct", s.area_pct},
                        {"empty", s.empty}});
    j["config"] = r.config;
    return j;
}

void write_report_json(const EvalReport& r, const std::filesystem::path& path) {
    open_out(path) << report_json(r).dump(1) << '\n';
}

void write_per_slice_csv(const EvalReport& r, const std::filesystem::path& path) {
    auto out = open_out(path);
    out << "slice,n_detected,n_matches,n_correct,precision_pct,matching_score_pct,area_pct,empty\n";
    for (const auto& s : r.per_slice)
        out << s.slice_index << ',' << s.n_detected << ',' << s.n_matches << ',' << s.n_correct << ',' << s.precision_pct
            << ',' << s.matching_score_pct << ',' << s.area_pct << ',' << (s.empty ? 1 : 0) << '\n';
}

void write_table_csv(std::span<const TableRow> rows, const std::filesystem::path& path) {
    auto out = open_out(path);
    out << "row,prec_pct,msc_pct,avg_mp,area_pct,n_slices\n";
    for (const auto& r : rows)
        out << r.label << ',' << r.report.precision_pct << ',' << r.report.matching_score_pct << ','
            << r.report.matched_points << ',' << r.report.area_pct << ',' << r.report.n_slices << '\n';
}

}  // namespace xmk
