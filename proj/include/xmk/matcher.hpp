#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "xmk/detection.hpp"
#include "xmk/model.hpp"
#include "xmk/png.hpp"

namespace xmk {

struct MatchConfig {
    int n_mr = 200;         // keypoints detected on the MR slice
    int m_us_cap = 1500;    // keypoint cap per US slice
    int knn_k = 2;
    double min_similarity = 0.7;
    bool ratio_test = true;
    double ratio_threshold = 0.9;  // on cosine distances (1 - s)
    bool uniqueness = true;

    void validate() const;
};

struct Neighbor {
    int id = 0;
    double similarity = 0.0;

    bool operator==(const Neighbor&) const = default;
};

/// Exact top-k cosine neighbors of every query column among the index
/// columns, most similar first, lower index id first on ties. k is clamped
/// to the index size; a zero vector has similarity 0 with everything.
std::vector<std::vector<Neighbor>> knn_cosine(const DescriptorMat& query, const DescriptorMat& index, int k);

enum class MatchVerdict { kAccepted, kSimilarity, kRatio, kUniqueness, kNoNeighbor };
std::string to_string(MatchVerdict v);
MatchVerdict verdict_from_string(const std::string& s);

struct Match {
    int mr_id = 0;
    int us_id = 0;
    double similarity = 0.0;

    bool operator==(const Match&) const = default;
};

struct CandidateResult {
    int mr_id = 0;
    int us_id = -1;  // best neighbor
    double s1 = 0.0;
    double s2 = 0.0;  // NaN without a second neighbor
    MatchVerdict verdict = MatchVerdict::kAccepted;
};

struct MatchSet {
    int slice_index = 0;
    std::vector<Keypoint> mr_keypoints;
    std::vector<Keypoint> us_keypoints;
    std::vector<Match> matches;  // similarity descending
    std::vector<CandidateResult> candidates;
    MatchConfig config;

    int count(MatchVerdict v) const;
};

/// Threshold, then ratio test, then greedy one-to-one assignment by
/// descending best similarity (lower MR id first on ties).
MatchSet filter_matches(const std::vector<std::vector<Neighbor>>& knn, const MatchConfig& cfg);

/// Keypoints of a slice with their descriptors (column i belongs to
/// keypoints[i]).
struct DescribedSlice {
    int slice_index = 0;
    std::vector<Keypoint> keypoints;
    DescriptorMat descriptors;
};

/// Describes keypoints of `s` with the model; keypoints whose patch does not
/// fit are dropped with a warning. Order is preserved.
DescribedSlice describe_keypoints(const Slice& s, std::span<const Keypoint> kps, const Model& model);

/// Detects up to `max_keypoints` keypoints and describes them.
DescribedSlice detect_and_describe(const Slice& s, const Model& model, DetectorConfig det, int max_keypoints,
                                   const std::string& source);

MatchSet match_described(const DescribedSlice& mr, const DescribedSlice& us, const MatchConfig& cfg);

MatchSet match_slices(const Slice& mr, const Slice& us, const Model& model, const DetectorConfig& det,
                      const MatchConfig& cfg);

void save_match_json(const MatchSet& ms, const std::filesystem::path& path);
/// Reads a match file written by save_match_json or by an external tool
/// following the same schema (candidates are optional).
MatchSet load_match_json(const std::filesystem::path& path);

/// Side-by-side MR | US rendering: accepted matches as green lines, rejected
/// MR keypoints as red dots.
RgbImage render_matches(const Slice& mr, const Slice& us, const MatchSet& ms);

}  // namespace xmk
