#include "xmk/matcher.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "xmk/error.hpp"

namespace xmk {

namespace {

bool better(const Neighbor& a, const Neighbor& b) {
    return a.similarity > b.similarity || (a.similarity == b.similarity && a.id < b.id);
}

std::vector<double> column_norms(const DescriptorMat& m) {
    std::vector<double> n(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
        double s = 0.0;
        for (Eigen::Index r = 0; r < m.rows(); ++r) s += double(m(r, j)) * double(m(r, j));
        n[static_cast<std::size_t>(j)] = std::sqrt(s);
    }
    return n;
}

nlohmann::ordered_json keypoints_json(std::span<const Keypoint> kps) {
    auto a = nlohmann::ordered_json::array();
    for (const auto& k : kps) a.push_back({k.x, k.y, k.response});
    return a;
}

std::vector<Keypoint> keypoints_from_json(const nlohmann::json& a, int slice, const std::string& source) {
    std::vector<Keypoint> out;
    for (const auto& k : a) {
        Keypoint kp{k.at(0).get<float>(), k.at(1).get<float>(), slice, k.size() > 2 ? k.at(2).get<float>() : 0.0f, source};
        out.push_back(kp);
    }
    return out;
}

}  // namespace

void MatchConfig::validate() const {
    if (n_mr < 1) throw ConfigError("match.n_mr must be >= 1");
    if (m_us_cap < 1) throw ConfigError("match.m_us_cap must be >= 1");
    if (knn_k < 1) throw ConfigError("match.knn_k must be >= 1");
    if (ratio_test && knn_k < 2) throw ConfigError("match.knn_k must be >= 2 when the ratio test is enabled");
    if (!(min_similarity >= -1.0 && min_similarity <= 1.0)) throw ConfigError("match.min_similarity must lie in [-1, 1]");
    if (!(ratio_threshold > 0.0 && ratio_threshold <= 1.0)) throw ConfigError("match.ratio_threshold must lie in (0, 1]");
}

std::vector<std::vector<Neighbor>> knn_cosine(const DescriptorMat& query, const DescriptorMat& index, int k) {
    if (index.cols() == 0) throw Error("knn_cosine: empty index");
    if (query.rows() != index.rows()) throw Error("knn_cosine: descriptor dimensions differ");
    if (k < 1) throw Error("knn_cosine: k must be >= 1");
    const auto kk = static_cast<std::size_t>(std::min<Eigen::Index>(k, index.cols()));
    const auto qn = column_norms(query), xn = column_norms(index);
    std::vector<std::vector<Neighbor>> out(static_cast<std::size_t>(query.cols()));
    std::vector<Neighbor> best;
    for (Eigen::Index q = 0; q < query.cols(); ++q) {
        best.clear();
        for (Eigen::Index j = 0; j < index.cols(); ++j) {
            double dot = 0.0;
            for (Eigen::Index r = 0; r < query.rows(); ++r) dot += double(query(r, q)) * double(index(r, j));
            const double den = qn[q] * xn[j];
            const Neighbor c{static_cast<int>(j), den > 0.0 ? dot / den : 0.0};
            if (best.size() == kk && !better(c, best.back())) continue;
            if (best.size() == kk) best.pop_back();
            best.insert(std::upper_bound(best.begin(), best.end(), c, better), c);
        }
        out[static_cast<std::size_t>(q)] = best;
    }
    return out;
}

std::string to_string(MatchVerdict v) {
    switch (v) {
        case MatchVerdict::kAccepted: return "accepted";
        case MatchVerdict::kSimilarity: return "min_similarity";
        case MatchVerdict::kRatio: return "ratio";
        case MatchVerdict::kUniqueness: return "uniqueness";
        case MatchVerdict::kNoNeighbor: return "no_neighbor";
    }
    return "unknown";
}

MatchVerdict verdict_from_string(const std::string& s) {
    for (auto v : {MatchVerdict::kAccepted, MatchVerdict::kSimilarity, MatchVerdict::kRatio, MatchVerdict::kUniqueness,
                   MatchVerdict::kNoNeighbor})
        if (to_string(v) == s) return v;
    throw FormatError("unknown match verdict '" + s + "'");
}

int MatchSet::count(MatchVerdict v) const {
    return static_cast<int>(std::count_if(candidates.begin(), candidates.end(),
                                          [v](const CandidateResult& c) { return c.verdict == v; }));
}

MatchSet filter_matches(const std::vector<std::vector<Neighbor>>& knn, const MatchConfig& cfg) {
    MatchSet ms;
    ms.config = cfg;
    std::vector<int> survivors;
    for (std::size_t q = 0; q < knn.size(); ++q) {
        CandidateResult c;
        c.mr_id = static_cast<int>(q);
        c.s2 = std::numeric_limits<double>::quiet_NaN();
        const auto& nb = knn[q];
        if (nb.empty()) {
            c.verdict = MatchVerdict::kNoNeighbor;
        } else {
            c.us_id = nb[0].id;
            c.s1 = nb[0].similarity;
            if (nb.size() > 1) c.s2 = nb[1].similarity;
            if (c.s1 < cfg.min_similarity) {
                c.verdict = MatchVerdict::kSimilarity;
            } else if (cfg.ratio_test && nb.size() > 1) {
                const double d1 = 1.0 - c.s1, d2 = 1.0 - c.s2;
                const double ratio = d2 > 0.0 ? d1 / d2 : 1.0;  // s1 = s2 = 1: indistinguishable
                if (ratio > cfg.ratio_threshold) c.verdict = MatchVerdict::kRatio;
            }
        }
        if (c.verdict == MatchVerdict::kAccepted) survivors.push_back(c.mr_id);
        ms.candidates.push_back(c);
    }
    std::stable_sort(survivors.begin(), survivors.end(),
                     [&](int a, int b) { return ms.candidates[a].s1 > ms.candidates[b].s1; });
    std::vector<char> taken;
    for (int q : survivors) {
        auto& c = ms.candidates[q];
        if (cfg.uniqueness) {
            if (static_cast<std::size_t>(c.us_id) >= taken.size()) taken.resize(c.us_id + 1, 0);
            if (taken[c.us_id]) {
                c.verdict = MatchVerdict::kUniqueness;
                continue;
            }
            taken[c.us_id] = 1;
        }
        ms.matches.push_back({c.mr_id, c.us_id, c.s1});
    }
    return ms;
}

DescribedSlice describe_keypoints(const Slice& s, std::span<const Keypoint> kps, const Model& model) {
    const int size = model.net.arch().patch_size;
    const auto n = static_cast<std::size_t>(size) * size;
    DescribedSlice out;
    out.slice_index = s.slice_index;
    std::vector<float> buf;
    buf.reserve(kps.size() * n);
    for (const auto& k : kps) {
        if (!patch_fits(s.height(), s.width(), k, size)) {
            spdlog::warn("slice {}: keypoint ({:.1f}, {:.1f}) too close to the border for a {}px patch; dropped",
                         s.slice_index, k.x, k.y, size);
            continue;
        }
        auto p = extract_patch(s, k, size);
        normalize_patch(p, model.norm_stats);
        buf.insert(buf.end(), p.pixels.begin(), p.pixels.end());
        out.keypoints.push_back(k);
    }
    out.descriptors = describe_patches(model.net, buf, static_cast<int>(out.keypoints.size()));
    return out;
}

DescribedSlice detect_and_describe(const Slice& s, const Model& model, DetectorConfig det, int max_keypoints,
                                   const std::string& source) {
    det.max_keypoints = max_keypoints;
    const auto kps = detect_keypoints(s, det, source);
    return describe_keypoints(s, kps, model);
}

MatchSet match_described(const DescribedSlice& mr, const DescribedSlice& us, const MatchConfig& cfg) {
    cfg.validate();
    MatchSet ms;
    if (us.keypoints.empty() || mr.keypoints.empty()) {
        ms.config = cfg;
        for (std::size_t i = 0; i < mr.keypoints.size(); ++i)
            ms.candidates.push_back({static_cast<int>(i), -1, 0.0, std::numeric_limits<double>::quiet_NaN(),
                                     MatchVerdict::kNoNeighbor});
    } else {
        ms = filter_matches(knn_cosine(mr.descriptors, us.descriptors, cfg.knn_k), cfg);
    }
    ms.slice_index = mr.slice_index;
    ms.mr_keypoints = mr.keypoints;
    ms.us_keypoints = us.keypoints;
    return ms;
}

MatchSet match_slices(const Slice& mr, const Slice& us, const Model& model, const DetectorConfig& det,
                      const MatchConfig& cfg) {
    cfg.validate();
    if (mr.height() != us.height() || mr.width() != us.width())
        throw Error("match_slices: MR and US slices differ in size");
    const auto a = detect_and_describe(mr, model, det, cfg.n_mr, "MR");
    const auto b = detect_and_describe(us, model, det, cfg.m_us_cap, "US");
    return match_described(a, b, cfg);
}

void save_match_json(const MatchSet& ms, const std::filesystem::path& path) {
    nlohmann::ordered_json j;
    const auto& c = ms.config;
    j["config"] = {{"n_mr", c.n_mr},
                   {"m_us_cap", c.m_us_cap},
                   {"knn_k", c.knn_k},
                   {"min_similarity", c.min_similarity},
                   {"ratio_test", c.ratio_test},
                   {"ratio_threshold", c.ratio_threshold},
                   {"uniqueness", c.uniqueness}};
    j["slice_index"] = ms.slice_index;
    j["mr_keypoints"] = keypoints_json(ms.mr_keypoints);
    j["us_keypoints"] = keypoints_json(ms.us_keypoints);
    auto& m = j["matches"] = nlohmann::ordered_json::array();
    for (const auto& x : ms.matches) m.push_back({x.mr_id, x.us_id, x.similarity});
    auto& cand = j["candidates"] = nlohmann::ordered_json::array();
    for (const auto& x : ms.candidates)
        cand.push_back({{"mr", x.mr_id}, {"us", x.us_id}, {"s1", x.s1},
                        {"s2", std::isnan(x.s2) ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(x.s2)},
                        {"verdict", to_string(x.verdict)}});
    auto& st = j["statistics"];
    st["candidates"] = ms.candidates.size();
    for (auto v : {MatchVerdict::kSimilarity, MatchVerdict::kRatio, MatchVerdict::kUniqueness, MatchVerdict::kNoNeighbor})
        st["rejected_" + to_string(v)] = ms.count(v);
    st["matches"] = ms.matches.size();
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out << j.dump(1) << '\n';
}

MatchSet load_match_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw MissingArtifact("missing match file " + path.string());
    try {
        const auto j = nlohmann::json::parse(in);
        MatchSet ms;
        if (j.contains("config")) {
            const auto& c = j.at("config");
            ms.config.n_mr = c.value("n_mr", ms.config.n_mr);
            ms.config.m_us_cap = c.value("m_us_cap", ms.config.m_us_cap);
            ms.config.knn_k = c.value("knn_k", ms.config.knn_k);
            ms.config.min_similarity = c.value("min_similarity", ms.config.min_similarity);
            ms.config.ratio_test = c.value("ratio_test", ms.config.ratio_test);
            ms.config.ratio_threshold = c.value("ratio_threshold", ms.config.ratio_threshold);
            ms.config.uniqueness = c.value("uniqueness", ms.config.uniqueness);
        }
        ms.slice_index = j.value("slice_index", 0);
        ms.mr_keypoints = keypoints_from_json(j.at("mr_keypoints"), ms.slice_index, "MR");
        ms.us_keypoints = keypoints_from_json(j.at("us_keypoints"), ms.slice_index, "US");
        for (const auto& m : j.at("matches")) {
            Match x{m.at(0).get<int>(), m.at(1).get<int>(), m.size() > 2 ? m.at(2).get<double>() : 0.0};
            if (x.mr_id < 0 || static_cast<std::size_t>(x.mr_id) >= ms.mr_keypoints.size() || x.us_id < 0 ||
                static_cast<std::size_t>(x.us_id) >= ms.us_keypoints.size())
                throw FormatError("match references a keypoint that does not exist");
            ms.matches.push_back(x);
        }
        if (j.contains("candidates")) {
            for (const auto& c : j.at("candidates")) {
                CandidateResult r;
                r.mr_id = c.at("mr").get<int>();
                r.us_id = c.at("us").get<int>();
                r.s1 = c.at("s1").get<double>();
                r.s2 = c.at("s2").is_null() ? std::numeric_limits<double>::quiet_NaN() : c.at("s2").get<double>();
                r.verdict = verdict_from_string(c.at("verdict").get<std::string>());
                ms.candidates.push_back(r);
            }
        }
        return ms;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

RgbImage render_matches(const Slice& mr, const Slice& us, const MatchSet& ms) {
    const int gap = 8;
    RgbImage img(std::max(mr.height(), us.height()), mr.width() + gap + us.width(), 255);
    img.blit_gray(mr.image, 0, 0);
    img.blit_gray(us.image, 0, mr.width() + gap);
    std::vector<char> matched(ms.mr_keypoints.size(), 0);
    for (const auto& m : ms.matches) {
        matched[m.mr_id] = 1;
        const auto& a = ms.mr_keypoints[m.mr_id];
        const auto& b = ms.us_keypoints[m.us_id];
        img.line(a.y, a.x, b.y, b.x + mr.width() + gap, 0, 200, 0);
    }
    for (std::size_t i = 0; i < ms.mr_keypoints.size(); ++i)
        if (!matched[i]) img.dot(ms.mr_keypoints[i].y, ms.mr_keypoints[i].x, 1, 220, 0, 0);
    return img;
}

}  // namespace xmk
