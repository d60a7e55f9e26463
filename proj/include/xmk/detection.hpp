#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "xmk/imaging.hpp"

namespace xmk {

struct Keypoint {
    float x = 0.0f;
    float y = 0.0f;
    int slice_index = 0;
    float response = 0.0f;
    std::string source = "MR";  // MR, US, SynUS-<i>, external

    bool operator==(const Keypoint&) const = default;
};

struct DetectorConfig {
    int max_keypoints = 256;
    int nms_radius_px = 2;
    float response_threshold = 0.01f;
    int border_margin_px = 32;

    /// Throws ConfigError unless the config can feed patches of `patch_size`.
    void validate(int patch_size = 64) const;
};

struct ConsensusParams {
    double margin_px = 5.0;
    int min_votes = 3;
    double cluster_eps_px = 5.0;
    int cluster_min_samples = 1;

    void validate() const;
};

/// Minimum eigenvalue of the structure tensor summed over a 3x3 window of
/// central-difference gradients.
Image corner_response(const Image& img);

/// Structure-tensor corners: local maxima above the threshold, outside the
/// border margin, greedily suppressed so that survivors are more than
/// nms_radius_px apart, strongest first, truncated to max_keypoints.
/// Positions carry a parabolic sub-pixel offset of at most 0.5 px.
std::vector<Keypoint> detect_keypoints(const Slice& s, const DetectorConfig& cfg,
                                       const std::string& source = "MR");

/// Same as detect_keypoints without the max_keypoints truncation.
std::vector<Keypoint> detect_all_keypoints(const Slice& s, const DetectorConfig& cfg,
                                           const std::string& source = "MR");

struct DetectionHit {
    int anchor_id = 0;
    bool hit = false;
};

/// hit(a) iff the untruncated detection set of `s` has a keypoint within
/// margin_px (Euclidean, inclusive) of anchor a.
std::vector<DetectionHit> enforce_detection(const Slice& s, std::span<const Keypoint> anchors,
                                            double margin_px, const DetectorConfig& cfg);

/// Same test against an already computed detection set.
std::vector<DetectionHit> proximity_hits(std::span<const Keypoint> detections,
                                         std::span<const Keypoint> anchors, double margin_px);

/// Indices of anchors hit in at least min_votes variants.
std::vector<int> consensus_indices(std::size_t n_anchors,
                                   const std::vector<std::vector<DetectionHit>>& hits_per_variant,
                                   int min_votes);

std::vector<Keypoint> consensus_filter(std::span<const Keypoint> anchors,
                                       const std::vector<std::vector<DetectionHit>>& hits_per_variant,
                                       int min_votes = 3);

inline constexpr int kNoise = -1;

/// DBSCAN labels (cluster ids from 0 in discovery order, kNoise for noise).
/// A point is core when at least min_samples points (itself included) lie
/// within eps.
std::vector<int> dbscan_labels(std::span<const Keypoint> points, double eps, int min_samples);

/// Index of the highest-response member of each cluster (lowest index on
/// ties), in cluster order. Noise points are dropped.
std::vector<int> dbscan_representatives(std::span<const Keypoint> points,
                                        std::span<const int> labels);

std::vector<Keypoint> dbscan_cluster(std::span<const Keypoint> points, double eps = 5.0,
                                     int min_samples = 1);

void save_keypoints_csv(std::span<const Keypoint> kps, const std::filesystem::path& path);
std::vector<Keypoint> load_keypoints_csv(const std::filesystem::path& path);

}  // namespace xmk
