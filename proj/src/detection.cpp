#include "xmk/detection.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "xmk/error.hpp"

namespace xmk {

namespace {

// Uniform bucket grid for fixed-radius neighbor queries.
class PointGrid {
public:
    PointGrid(std::span<const Keypoint> pts, double cell) : pts_(pts), cell_(std::max(cell, 1e-6)) {
        for (std::size_t i = 0; i < pts.size(); ++i) cells_[key(pts[i].x, pts[i].y)].push_back(static_cast<int>(i));
    }

    template <class F>
    void for_each_within(double x, double y, double r, F&& f) const {
        const long cx0 = static_cast<long>(std::floor((x - r) / cell_));
        const long cx1 = static_cast<long>(std::floor((x + r) / cell_));
        const long cy0 = static_cast<long>(std::floor((y - r) / cell_));
        const long cy1 = static_cast<long>(std::floor((y + r) / cell_));
        const double r2 = r * r;
        for (long cy = cy0; cy <= cy1; ++cy)
            for (long cx = cx0; cx <= cx1; ++cx) {
                auto it = cells_.find(pack(cx, cy));
                if (it == cells_.end()) continue;
                for (int i : it->second) {
                    const double dx = pts_[i].x - x, dy = pts_[i].y - y;
                    if (dx * dx + dy * dy <= r2) f(i);
                }
            }
    }

private:
    static long long pack(long cx, long cy) { return (static_cast<long long>(cy) << 32) ^ (cx & 0xffffffffLL); }
    long long key(double x, double y) const {
        return pack(static_cast<long>(std::floor(x / cell_)), static_cast<long>(std::floor(y / cell_)));
    }

    std::span<const Keypoint> pts_;
    double cell_;
    std::unordered_map<long long, std::vector<int>> cells_;
};

float subpixel_offset(float left, float centre, float right) {
    const float den = left - 2.0f * centre + right;
    if (!(den < 0.0f)) return 0.0f;
    return std::clamp(0.5f * (left - right) / den, -0.5f, 0.5f);
}

}  // namespace

void DetectorConfig::validate(int patch_size) const {
    if (max_keypoints < 1) throw ConfigError("detection.max_keypoints must be >= 1");
    if (nms_radius_px < 0) throw ConfigError("detection.nms_radius_px must be >= 0");
    if (!std::isfinite(response_threshold)) throw ConfigError("detection.response_threshold must be finite");
    if (border_margin_px < patch_size / 2)
        throw ConfigError("detection.border_margin_px must be >= patch_size/2 = " +
                          std::to_string(patch_size / 2));
}

void ConsensusParams::validate() const {
    if (!(margin_px > 0)) throw ConfigError("consensus margin_px must be > 0");
    if (min_votes < 1) throw ConfigError("consensus min_votes must be >= 1");
    if (!(cluster_eps_px > 0)) throw ConfigError("cluster_eps_px must be > 0");
    if (cluster_min_samples < 1) throw ConfigError("cluster_min_samples must be >= 1");
}

Image corner_response(const Image& img) {
    const int h = img.height, w = img.width;
    Image ixx(h, w), iyy(h, w), ixy(h, w);
    auto px = [&](int y, int x) { return img.at(std::clamp(y, 0, h - 1), std::clamp(x, 0, w - 1)); };
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const float gx = 0.5f * (px(y, x + 1) - px(y, x - 1));
            const float gy = 0.5f * (px(y + 1, x) - px(y - 1, x));
            ixx.at(y, x) = gx * gx;
            iyy.at(y, x) = gy * gy;
            ixy.at(y, x) = gx * gy;
        }
    Image resp(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double a = 0, b = 0, c = 0;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    const int yy = std::clamp(y + dy, 0, h - 1), xx = std::clamp(x + dx, 0, w - 1);
                    a += ixx.at(yy, xx);
                    b += ixy.at(yy, xx);
                    c += iyy.at(yy, xx);
                }
            const double half_tr = 0.5 * (a + c);
            const double disc = std::sqrt(0.25 * (a - c) * (a - c) + b * b);
            resp.at(y, x) = static_cast<float>(std::max(0.0, half_tr - disc));
        }
    return resp;
}

std::vector<Keypoint> detect_all_keypoints(const Slice& s, const DetectorConfig& cfg,
                                           const std::string& source) {
    const Image resp = corner_response(s.image);
    const int h = resp.height, w = resp.width, m = cfg.border_margin_px;
    struct Candidate {
        float response;
        int idx;
        float x, y;
    };
    std::vector<Candidate> cand;
    for (int y = std::max(m, 1); y <= h - 1 - m && y < h - 1; ++y)
        for (int x = std::max(m, 1); x <= w - 1 - m && x < w - 1; ++x) {
            const float r = resp.at(y, x);
            if (!(r > 0.0f) || r < cfg.response_threshold) continue;
            bool is_max = true;
            for (int dy = -1; dy <= 1 && is_max; ++dy)
                for (int dx = -1; dx <= 1; ++dx)
                    if (resp.at(y + dy, x + dx) > r) {
                        is_max = false;
                        break;
                    }
            if (!is_max) continue;
            const float ox = subpixel_offset(resp.at(y, x - 1), r, resp.at(y, x + 1));
            const float oy = subpixel_offset(resp.at(y - 1, x), r, resp.at(y + 1, x));
            cand.push_back({r, y * w + x, x + ox, y + oy});
        }
    std::sort(cand.begin(), cand.end(), [](const Candidate& a, const Candidate& b) {
        return a.response != b.response ? a.response > b.response : a.idx < b.idx;
    });

    std::vector<Keypoint> out;
    const double r = cfg.nms_radius_px;
    const double cell = std::max(r, 1.0);
    std::unordered_map<long long, std::vector<int>> grid;
    auto cell_of = [&](double v) { return static_cast<long>(std::floor(v / cell)); };
    for (const auto& c : cand) {
        bool suppressed = false;
        const long gx = cell_of(c.x), gy = cell_of(c.y);
        for (long yy = gy - 1; yy <= gy + 1 && !suppressed; ++yy)
            for (long xx = gx - 1; xx <= gx + 1 && !suppressed; ++xx) {
                auto it = grid.find((static_cast<long long>(yy) << 32) ^ (xx & 0xffffffffLL));
                if (it == grid.end()) continue;
                for (int k : it->second) {
                    const double dx = out[k].x - c.x, dy = out[k].y - c.y;
                    if (dx * dx + dy * dy <= r * r) {
                        suppressed = true;
                        break;
                    }
                }
            }
        if (suppressed) continue;
        grid[(static_cast<long long>(gy) << 32) ^ (gx & 0xffffffffLL)].push_back(static_cast<int>(out.size()));
        out.push_back({c.x, c.y, s.slice_index, c.response, source});
    }
    return out;
}

std::vector<Keypoint> detect_keypoints(const Slice& s, const DetectorConfig& cfg,
                                       const std::string& source) {
    auto all = detect_all_keypoints(s, cfg, source);
    if (all.size() > static_cast<std::size_t>(cfg.max_keypoints)) all.resize(cfg.max_keypoints);
    return all;
}

std::vector<DetectionHit> proximity_hits(std::span<const Keypoint> detections,
                                         std::span<const Keypoint> anchors, double margin_px) {
    PointGrid grid(detections, std::max(margin_px, 1.0));
    std::vector<DetectionHit> out;
    out.reserve(anchors.size());
    for (std::size_t a = 0; a < anchors.size(); ++a) {
        bool hit = false;
        grid.for_each_within(anchors[a].x, anchors[a].y, margin_px, [&](int) { hit = true; });
        out.push_back({static_cast<int>(a), hit});
    }
    return out;
}

std::vector<DetectionHit> enforce_detection(const Slice& s, std::span<const Keypoint> anchors,
                                            double margin_px, const DetectorConfig& cfg) {
    const auto detections = detect_all_keypoints(s, cfg, "SynUS");
    return proximity_hits(detections, anchors, margin_px);
}

std::vector<int> consensus_indices(std::size_t n_anchors,
                                   const std::vector<std::vector<DetectionHit>>& hits_per_variant,
                                   int min_votes) {
    std::vector<int> votes(n_anchors, 0);
    for (const auto& hits : hits_per_variant)
        for (const auto& h : hits) {
            if (h.anchor_id < 0 || static_cast<std::size_t>(h.anchor_id) >= n_anchors)
                throw Error("detection hit references unknown anchor " + std::to_string(h.anchor_id));
            if (h.hit) ++votes[h.anchor_id];
        }
    std::vector<int> kept;
    for (std::size_t i = 0; i < n_anchors; ++i)
        if (votes[i] >= min_votes) kept.push_back(static_cast<int>(i));
    return kept;
}

std::vector<Keypoint> consensus_filter(std::span<const Keypoint> anchors,
                                       const std::vector<std::vector<DetectionHit>>& hits_per_variant,
                                       int min_votes) {
    std::vector<Keypoint> out;
    for (int i : consensus_indices(anchors.size(), hits_per_variant, min_votes)) out.push_back(anchors[i]);
    return out;
}

std::vector<int> dbscan_labels(std::span<const Keypoint> points, double eps, int min_samples) {
    constexpr int kUnvisited = -2;
    const auto n = points.size();
    std::vector<int> labels(n, kUnvisited);
    PointGrid grid(points, std::max(eps, 1e-3));
    auto neighbors = [&](std::size_t i) {
        std::vector<int> nb;
        grid.for_each_within(points[i].x, points[i].y, eps, [&](int j) { nb.push_back(j); });
        std::sort(nb.begin(), nb.end());
        return nb;
    };
    int cluster = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] != kUnvisited) continue;
        auto nb = neighbors(i);
        if (static_cast<int>(nb.size()) < min_samples) {
            labels[i] = kNoise;
            continue;
        }
        labels[i] = cluster;
        std::vector<int> frontier(nb.begin(), nb.end());
        for (std::size_t f = 0; f < frontier.size(); ++f) {
            const int j = frontier[f];
            if (labels[j] == kNoise) labels[j] = cluster;  // border point
            if (labels[j] != kUnvisited) continue;
            labels[j] = cluster;
            auto nbj = neighbors(j);
            if (static_cast<int>(nbj.size()) >= min_samples)
                frontier.insert(frontier.end(), nbj.begin(), nbj.end());
        }
        ++cluster;
    }
    return labels;
}

std::vector<int> dbscan_representatives(std::span<const Keypoint> points, std::span<const int> labels) {
    int n_clusters = 0;
    for (int l : labels) n_clusters = std::max(n_clusters, l + 1);
    std::vector<int> best(n_clusters, -1);
    for (std::size_t i = 0; i < points.size(); ++i) {
        const int l = labels[i];
        if (l < 0) continue;
        if (best[l] < 0 || points[i].response > points[best[l]].response) best[l] = static_cast<int>(i);
    }
    return best;
}

std::vector<Keypoint> dbscan_cluster(std::span<const Keypoint> points, double eps, int min_samples) {
    const auto labels = dbscan_labels(points, eps, min_samples);
    std::vector<Keypoint> out;
    for (int i : dbscan_representatives(points, labels)) out.push_back(points[i]);
    return out;
}

void save_keypoints_csv(std::span<const Keypoint> kps, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out << "slice_index,x,y,response,source\n";
    out.precision(9);
    for (const auto& k : kps) out << k.slice_index << ',' << k.x << ',' << k.y << ',' << k.response << ',' << k.source << '\n';
}

std::vector<Keypoint> load_keypoints_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw MissingArtifact("cannot open keypoints file " + path.string());
    std::string line;
    if (!std::getline(in, line) || line.rfind("slice_index,x,y,response,source", 0) != 0)
        throw FormatError(path.string() + ": expected header 'slice_index,x,y,response,source'");
    std::vector<Keypoint> out;
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line == "\r") continue;
        if (line.back() == '\r') line.pop_back();
        std::stringstream ss(line);
        std::string f[5];
        for (int i = 0; i < 5; ++i)
            if (!std::getline(ss, f[i], i < 4 ? ',' : '\n'))
                throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected 5 fields");
        try {
            Keypoint k{std::stof(f[1]), std::stof(f[2]), std::stoi(f[0]), std::stof(f[3]), f[4]};
            if (!std::isfinite(k.x) || !std::isfinite(k.y) || !std::isfinite(k.response))
                throw FormatError("non-finite value");
            out.push_back(std::move(k));
        } catch (const std::exception& e) {
            throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace xmk
