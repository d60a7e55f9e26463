#pragma once

#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "xmk/detection.hpp"
#include "xmk/imaging.hpp"
#include "xmk/phantom.hpp"

namespace xmk {

struct Patch {
    int size = 0;
    std::vector<float> pixels;  // size x size, row-major
    int keypoint_id = -1;
    std::string source;         // "MR" or a variant name
    bool normalized = false;
};

struct NormStats {
    double mean = 0.0;
    double std = 1.0;
    std::size_t n_patches = 0;
    bool degenerate = false;  // pooled std fell below 1e-8 and was replaced by 1

    bool operator==(const NormStats&) const = default;
};

/// Count/sum/sum-of-squares accumulator; partial results merge exactly.
class NormAccumulator {
public:
    void add(std::span<const float> pixels);
    void merge(const NormAccumulator& other);
    NormStats finish() const;
    std::size_t count() const { return count_; }

private:
    std::size_t count_ = 0;
    std::size_t patches_ = 0;
    double sum_ = 0.0;
    double sumsq_ = 0.0;
};

/// Window of size x size centered on the keypoint rounded to the nearest
/// pixel: rows/cols [c - size/2, c - size/2 + size).
Patch extract_patch(const Slice& s, const Keypoint& k, int size = 64);

/// Whether extract_patch would succeed for this keypoint.
bool patch_fits(int height, int width, const Keypoint& k, int size);

NormStats compute_norm_stats(std::span<const Patch> patches);

void normalize_patch(Patch& p, const NormStats& stats);

/// One stored patch. variant == -1 denotes the reference image.
struct PatchRecord {
    int anchor_id = 0;
    int variant = -1;
    int slice_index = 0;
    int cx = 0;
    int cy = 0;

    bool operator==(const PatchRecord&) const = default;
};

/// Provides normalized pixels of a record.
class PatchSource {
public:
    virtual ~PatchSource() = default;
    virtual void fetch(std::size_t record_index, const PatchRecord& rec, std::span<float> out) const = 0;
};

struct SliceLog {
    int slice_index = 0;
    int detected = 0;
    int consensus = 0;
    int clustered = 0;

    bool operator==(const SliceLog&) const = default;
};

struct TrainingSet {
    int patch_size = 64;
    NormStats norm_stats;
    std::vector<Keypoint> keypoints;  // anchor keypoints; keypoint_id is the index
    std::vector<PatchRecord> records;  // manifest order
    std::vector<int> anchor_record;    // per anchor
    std::vector<std::vector<int>> positive_records;  // per anchor
    std::vector<std::string> variant_names;
    std::vector<SliceLog> slice_log;
    DetectorConfig detector;
    ConsensusParams consensus;
    int effective_min_votes = 0;
    std::shared_ptr<const PatchSource> source;

    std::size_t n_anchors() const { return anchor_record.size(); }
    /// Normalized pixels of record `r` written to `out` (patch_size^2 values).
    void fetch(std::size_t r, std::span<float> out) const;
    Patch patch(std::size_t r) const;
    /// Fraction of detected reference keypoints kept after clustering.
    double retained_fraction() const;
};

/// Detects up to det.max_keypoints keypoints per reference slice, re-detects
/// them in every variant, keeps consensus keypoints, deduplicates them with
/// DBSCAN and records one anchor patch plus one positive per hitting variant.
/// Statistics are pooled over every extracted patch and applied to all.
TrainingSet build_training_set(const Volume& reference, const VariantSet& variants,
                               const DetectorConfig& det, const ConsensusParams& consensus,
                               int patch_size = 64);

/// Writes manifest.json and patches.bin (normalized float32 records in
/// manifest order).
void save_training_set(const TrainingSet& ts, const std::filesystem::path& dir);
TrainingSet load_training_set(const std::filesystem::path& dir);

}  // namespace xmk
