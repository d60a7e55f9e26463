#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "xmk/matcher.hpp"

namespace xmk {

/// MR pixel -> US pixel correspondence. Identity unless a displacement field
/// is attached.
class GroundTruth {
public:
    GroundTruth() = default;

    /// Smooth random backward displacement u (a few sinusoidal modes with
    /// peak magnitude `amplitude_px`); warp_volume resamples src(q + u(q)).
    static GroundTruth smooth_warp(int height, int width, int depth, double amplitude_px, std::uint64_t seed);

    bool is_identity() const { return dx_.empty(); }
    /// US location of the MR point (x, y) on slice z.
    std::array<double, 2> map(double x, double y, int z) const;
    /// Bilinear resampling of `v` so that GT maps v's voxels onto the result.
    Volume warp_volume(const Volume& v) const;

    double tolerance_px = 4.0;

private:
    int height_ = 0, width_ = 0, depth_ = 0;
    std::vector<float> dx_, dy_;  // per voxel, slice-major
    std::array<double, 2> displacement(double x, double y, int z) const;
};

enum class AreaMode { kConvexHull, kGrid };

struct SliceScore {
    int slice_index = 0;
    int n_detected = 0;
    int n_matches = 0;
    int n_correct = 0;
    double precision_pct = 0.0;
    double matching_score_pct = 0.0;
    double area_pct = 0.0;
    bool empty = false;  // no matches: precision undefined, reported as 0

    bool operator==(const SliceScore&) const = default;
};

/// Area enclosed by the convex hull of the points (counter-clockwise hull via
/// the monotone chain); 0 for fewer than three non-collinear points.
double convex_hull_area(std::span<const std::array<double, 2>> pts);

/// Percentage of the slice covered by the correctly matched MR keypoints:
/// hull area over (W-1)(H-1), or the fraction of grid cells of `cell_px`
/// containing at least one point.
double area_coverage(std::span<const std::array<double, 2>> correct_mr_points, int height, int width,
                     AreaMode mode = AreaMode::kConvexHull, int cell_px = 16);

/// correct(m) iff |us(m) - gt(mr(m))| <= gt.tolerance_px.
std::vector<bool> correct_matches(const MatchSet& ms, const GroundTruth& gt);

SliceScore score_matches(const MatchSet& ms, const GroundTruth& gt, int n_detected, int height, int width,
                         AreaMode mode = AreaMode::kConvexHull);

struct Deviation {
    double mean = 0.0;
    double mean_abs_deviation = 0.0;
    double std_dev = 0.0;  // population

    bool operator==(const Deviation&) const = default;
};

/// Spread of per-slice precision around the volume mean. At least two values.
Deviation per_slice_deviation(std::span<const double> precisions);

struct EvalReport {
    double precision_pct = 0.0;       // mean over slices with at least one match
    double matching_score_pct = 0.0;  // mean over all slices
    double matched_points = 0.0;      // mean over all slices
    double area_pct = 0.0;            // mean over all slices
    int n_slices = 0;
    int n_empty = 0;
    Deviation precision_spread;       // over slices with at least one match
    std::vector<SliceScore> per_slice;
    nlohmann::ordered_json config;

    bool operator==(const EvalReport&) const = default;
};

EvalReport aggregate(std::vector<SliceScore> scores, nlohmann::ordered_json config = {});

/// Matches every listed slice of `mr` against the same slice of `us` and
/// scores the result.
EvalReport evaluate_pair(const Model& model, const Volume& mr, const Volume& us, std::span<const int> slices,
                         const DetectorConfig& det, const MatchConfig& mc, const GroundTruth& gt = {},
                         AreaMode mode = AreaMode::kConvexHull);

/// Pools slice scores of several US volumes (one EvalReport row).
EvalReport evaluate_volumes(const Model& model, const Volume& mr, std::span<const Volume> us, std::span<const int> slices,
                            const DetectorConfig& det, const MatchConfig& mc, const GroundTruth& gt = {},
                            AreaMode mode = AreaMode::kConvexHull);

struct RepeatabilityResult {
    int baseline_matches = 0;
    std::vector<double> per_variant_pct;  // held-out variants in input order
    double mean_pct = 0.0;
};

/// Baseline: MR matched against `baseline` (a training variant). A baseline
/// match recurs on a held-out variant when the same MR keypoint is matched
/// there to a US location within `tolerance_px` of its baseline location.
RepeatabilityResult mode_holdout_repeatability(const Model& model, const Volume& mr, const Volume& baseline,
                                               std::span<const Volume> held_out, std::span<const int> slices,
                                               const DetectorConfig& det, const MatchConfig& mc,
                                               double tolerance_px = 4.0);

struct RetrievalResult {
    int target_index = 0;
    int best_index = 0;
    double error_mm = 0.0;
    std::vector<int> scores;  // filtered matches per candidate US slice
};

/// Scores every candidate slice by its number of filtered matches against
/// the target; the best is the argmax, lowest index on ties.
RetrievalResult slice_retrieval(const DescribedSlice& target, int true_index, std::span<const DescribedSlice> us_slices,
                                const MatchConfig& mc, double spacing_mm);

/// All slices of a volume described once (US side of retrieval).
std::vector<DescribedSlice> describe_volume(const Volume& v, const Model& model, const DetectorConfig& det,
                                            int max_keypoints, const std::string& source);

nlohmann::ordered_json report_json(const EvalReport& r);
void write_report_json(const EvalReport& r, const std::filesystem::path& path);
void write_per_slice_csv(const EvalReport& r, const std::filesystem::path& path);

/// One labelled row of a Prec/MSc/MP/Area table.
struct TableRow {
    std::string label;
    EvalReport report;
};
void write_table_csv(std::span<const TableRow> rows, const std::filesystem::path& path);

}  // namespace xmk
