#include "xmk/dataset.hpp"

#include <cmath>
#include <fstream>
#include <mutex>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "xmk/error.hpp"

namespace xmk {

namespace {

int round_center(float v) { return static_cast<int>(std::lround(v)); }

void copy_window(std::span<const float> slice, int width, int cx, int cy, int size, std::span<float> out) {
    const int x0 = cx - size / 2, y0 = cy - size / 2;
    for (int y = 0; y < size; ++y) {
        const float* src = slice.data() + static_cast<std::size_t>(y0 + y) * width + x0;
        std::copy(src, src + size, out.data() + static_cast<std::size_t>(y) * size);
    }
}

class VolumePatchSource final : public PatchSource {
public:
    VolumePatchSource(std::vector<Volume> volumes, int size, NormStats stats)
        : volumes_(std::move(volumes)), size_(size), stats_(stats) {}

    // Raw (unnormalized) window.
    void raw(const PatchRecord& rec, std::span<float> out) const {
        const auto& v = volumes_.at(static_cast<std::size_t>(rec.variant + 1));
        copy_window(v.slice_span(rec.slice_index), v.width(), rec.cx, rec.cy, size_, out);
    }

    void set_stats(const NormStats& s) { stats_ = s; }

    void fetch(std::size_t, const PatchRecord& rec, std::span<float> out) const override {
        raw(rec, out);
        for (auto& v : out) v = static_cast<float>((v - stats_.mean) / stats_.std);
    }

private:
    std::vector<Volume> volumes_;  // [reference, variant 0, variant 1, ...]
    int size_;
    NormStats stats_;
};

class FilePatchSource final : public PatchSource {
public:
    FilePatchSource(const std::filesystem::path& path, int size, std::size_t n_records)
        : in_(path, std::ios::binary), size_(size) {
        if (!in_) throw MissingArtifact("cannot open " + path.string());
        const auto expected = n_records * static_cast<std::size_t>(size) * size * 4;
        if (std::filesystem::file_size(path) != expected)
            throw FormatError(path.string() + ": size does not match the manifest record count");
    }

    void fetch(std::size_t record_index, const PatchRecord&, std::span<float> out) const override {
        std::lock_guard lock(mu_);
        const auto n = static_cast<std::size_t>(size_) * size_;
        in_.seekg(static_cast<std::streamoff>(record_index * n * 4));
        read_f32le(in_, out.first(n));
    }

private:
    mutable std::mutex mu_;
    mutable std::ifstream in_;
    int size_;
};

}  // namespace

void NormAccumulator::add(std::span<const float> pixels) {
    ++patches_;
    for (float v : pixels) {
        sum_ += v;
        sumsq_ += static_cast<double>(v) * v;
    }
    count_ += pixels.size();
}

void NormAccumulator::merge(const NormAccumulator& other) {
    count_ += other.count_;
    patches_ += other.patches_;
    sum_ += other.sum_;
    sumsq_ += other.sumsq_;
}

NormStats NormAccumulator::finish() const {
    if (count_ == 0) throw Error("cannot compute normalization statistics of an empty patch set");
    NormStats s;
    s.n_patches = patches_;
    s.mean = sum_ / static_cast<double>(count_);
    const double var = std::max(0.0, sumsq_ / static_cast<double>(count_) - s.mean * s.mean);
    s.std = std::sqrt(var);
    if (!(s.std >= 1e-8)) {
        spdlog::warn("patch standard deviation {} is degenerate; using 1", s.std);
        s.std = 1.0;
        s.degenerate = true;
    }
    return s;
}

bool patch_fits(int height, int width, const Keypoint& k, int size) {
    const int cx = round_center(k.x), cy = round_center(k.y);
    const int x0 = cx - size / 2, y0 = cy - size / 2;
    return x0 >= 0 && y0 >= 0 && x0 + size <= width && y0 + size <= height;
}

Patch extract_patch(const Slice& s, const Keypoint& k, int size) {
    if (size < 1) throw Error("patch size must be >= 1");
    if (!patch_fits(s.height(), s.width(), k, size)) {
        throw Error("patch of size " + std::to_string(size) + " at (" + std::to_string(k.x) + ", " +
                    std::to_string(k.y) + ") exceeds the " + std::to_string(s.width()) + "x" +
                    std::to_string(s.height()) + " slice");
    }
    Patch p;
    p.size = size;
    p.pixels.resize(static_cast<std::size_t>(size) * size);
    copy_window(s.image.pixels, s.width(), round_center(k.x), round_center(k.y), size, p.pixels);
    p.source = k.source;
    return p;
}

NormStats compute_norm_stats(std::span<const Patch> patches) {
    if (patches.empty()) throw Error("cannot compute normalization statistics of an empty patch set");
    NormAccumulator acc;
    for (const auto& p : patches) acc.add(p.pixels);
    return acc.finish();
}

void normalize_patch(Patch& p, const NormStats& stats) {
    if (p.normalized) throw Error("patch is already normalized");
    for (auto& v : p.pixels) v = static_cast<float>((v - stats.mean) / stats.std);
    p.normalized = true;
}

void TrainingSet::fetch(std::size_t r, std::span<float> out) const {
    if (!source) throw Error("training set has no patch source");
    source->fetch(r, records.at(r), out);
}

Patch TrainingSet::patch(std::size_t r) const {
    Patch p;
    p.size = patch_size;
    p.pixels.resize(static_cast<std::size_t>(patch_size) * patch_size);
    fetch(r, p.pixels);
    const auto& rec = records.at(r);
    p.keypoint_id = rec.anchor_id;
    p.source = rec.variant < 0 ? "MR" : variant_names.at(static_cast<std::size_t>(rec.variant));
    p.normalized = true;
    return p;
}

double TrainingSet::retained_fraction() const {
    long detected = 0, clustered = 0;
    for (const auto& s : slice_log) {
        detected += s.detected;
        clustered += s.clustered;
    }
    return detected > 0 ? double(clustered) / double(detected) : 0.0;
}

TrainingSet build_training_set(const Volume& reference, const VariantSet& variants,
                               const DetectorConfig& det, const ConsensusParams& consensus,
                               int patch_size) {
    det.validate(patch_size);
    consensus.validate();
    if (variants.variants.empty()) throw ConfigError("variant set is empty");
    for (const auto& v : variants.variants)
        if (v.volume.shape() != reference.shape())
            throw Error("variant " + v.name + " is not aligned with the reference");

    TrainingSet ts;
    ts.patch_size = patch_size;
    ts.detector = det;
    ts.consensus = consensus;
    ts.effective_min_votes = consensus.min_votes;
    if (static_cast<std::size_t>(consensus.min_votes) > variants.p()) {
        ts.effective_min_votes = static_cast<int>(variants.p());
        spdlog::warn("only {} synthetic variants; consensus min_votes clamped from {} to {}", variants.p(),
                     consensus.min_votes, ts.effective_min_votes);
    }
    for (const auto& v : variants.variants) ts.variant_names.push_back(v.name);

    for (int z = 0; z < reference.depth(); ++z) {
        const auto mr = get_slice(reference, z, "reference");
        const auto anchors = detect_keypoints(mr, det, "MR");
        std::vector<std::vector<DetectionHit>> hits;
        hits.reserve(variants.p());
        for (std::size_t i = 0; i < variants.p(); ++i) {
            const auto s = get_slice(variants.variants[i].volume, z, variants.variants[i].name);
            hits.push_back(proximity_hits(detect_all_keypoints(s, det, "SynUS-" + std::to_string(i)),
                                          anchors, consensus.margin_px));
        }
        const auto kept_idx = consensus_indices(anchors.size(), hits, ts.effective_min_votes);
        std::vector<Keypoint> kept;
        for (int i : kept_idx) kept.push_back(anchors[i]);
        const auto labels = dbscan_labels(kept, consensus.cluster_eps_px, consensus.cluster_min_samples);
        const auto reps = dbscan_representatives(kept, labels);

        for (int r : reps) {
            const int a = kept_idx[r];
            const auto& kp = anchors[a];
            if (!patch_fits(reference.height(), reference.width(), kp, patch_size)) continue;
            const int id = static_cast<int>(ts.keypoints.size());
            ts.keypoints.push_back(kp);
            const PatchRecord base{id, -1, z, static_cast<int>(std::lround(kp.x)), static_cast<int>(std::lround(kp.y))};
            ts.anchor_record.push_back(static_cast<int>(ts.records.size()));
            ts.records.push_back(base);
            auto& pos = ts.positive_records.emplace_back();
            for (std::size_t i = 0; i < variants.p(); ++i) {
                if (!hits[i][a].hit) continue;
                auto rec = base;
                rec.variant = static_cast<int>(i);
                pos.push_back(static_cast<int>(ts.records.size()));
                ts.records.push_back(rec);
            }
        }
        ts.slice_log.push_back({z, static_cast<int>(anchors.size()), static_cast<int>(kept.size()),
                                static_cast<int>(reps.size())});
        spdlog::debug("slice {}: detected {}, consensus {}, clustered {}", z, anchors.size(), kept.size(), reps.size());
    }
    if (ts.n_anchors() == 0)
        throw Error("no keypoint survived consensus filtering; lower detection.response_threshold");

    std::vector<Volume> volumes{reference};
    for (const auto& v : variants.variants) volumes.push_back(v.volume);
    auto src = std::make_shared<VolumePatchSource>(std::move(volumes), patch_size, NormStats{});
    NormAccumulator acc;
    std::vector<float> buf(static_cast<std::size_t>(patch_size) * patch_size);
    for (const auto& rec : ts.records) {
        src->raw(rec, buf);
        acc.add(buf);
    }
    ts.norm_stats = acc.finish();
    src->set_stats(ts.norm_stats);
    ts.source = std::move(src);
    spdlog::info("training set: {} anchors, {} patches, retained fraction {:.3f}", ts.n_anchors(),
                 ts.records.size(), ts.retained_fraction());
    return ts;
}

void save_training_set(const TrainingSet& ts, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::ordered_json m;
    m["patch_size"] = ts.patch_size;
    m["norm_stats"] = {{"mean", ts.norm_stats.mean}, {"std", ts.norm_stats.std},
                       {"n_patches", ts.norm_stats.n_patches}, {"degenerate", ts.norm_stats.degenerate}};
    m["config"] = {{"detection",
                    {{"max_keypoints", ts.detector.max_keypoints},
                     {"nms_radius_px", ts.detector.nms_radius_px},
                     {"response_threshold", ts.detector.response_threshold},
                     {"border_margin_px", ts.detector.border_margin_px}}},
                   {"consensus",
                    {{"margin_px", ts.consensus.margin_px},
                     {"min_votes", ts.consensus.min_votes},
                     {"cluster_eps_px", ts.consensus.cluster_eps_px},
                     {"cluster_min_samples", ts.consensus.cluster_min_samples}}},
                   {"effective_min_votes", ts.effective_min_votes}};
    m["variants"] = ts.variant_names;
    auto& log = m["slices"] = nlohmann::ordered_json::array();
    for (const auto& s : ts.slice_log)
        log.push_back({{"slice", s.slice_index}, {"detected", s.detected}, {"consensus", s.consensus},
                       {"clustered", s.clustered}});
    auto& anchors = m["anchors"] = nlohmann::ordered_json::array();
    for (std::size_t a = 0; a < ts.n_anchors(); ++a) {
        const auto& k = ts.keypoints[a];
        anchors.push_back({{"id", a}, {"slice", k.slice_index}, {"x", k.x}, {"y", k.y}, {"response", k.response},
                           {"record", ts.anchor_record[a]}, {"positives", ts.positive_records[a]}});
    }
    auto& recs = m["records"] = nlohmann::ordered_json::array();
    for (const auto& r : ts.records)
        recs.push_back({r.anchor_id, r.variant, r.slice_index, r.cx, r.cy});
    m["records_layout"] = {"anchor_id", "variant", "slice", "cx", "cy"};
    {
        std::ofstream out(dir / "manifest.json");
        out << m.dump(1) << '\n';
    }
    std::ofstream bin(dir / "patches.bin", std::ios::binary | std::ios::trunc);
    if (!bin) throw Error("cannot write " + (dir / "patches.bin").string());
    std::vector<float> buf(static_cast<std::size_t>(ts.patch_size) * ts.patch_size);
    for (std::size_t r = 0; r < ts.records.size(); ++r) {
        ts.fetch(r, buf);
        write_f32le(bin, buf);
    }
}

TrainingSet load_training_set(const std::filesystem::path& dir) {
    const auto path = dir / "manifest.json";
    std::ifstream in(path);
    if (!in) throw MissingArtifact("missing dataset manifest " + path.string());
    try {
        const auto m = nlohmann::json::parse(in);
        TrainingSet ts;
        ts.patch_size = m.at("patch_size").get<int>();
        const auto& ns = m.at("norm_stats");
        ts.norm_stats = {ns.at("mean").get<double>(), ns.at("std").get<double>(),
                         ns.at("n_patches").get<std::size_t>(), ns.at("degenerate").get<bool>()};
        const auto& cfg = m.at("config");
        const auto& d = cfg.at("detection");
        ts.detector = {d.at("max_keypoints").get<int>(), d.at("nms_radius_px").get<int>(),
                       d.at("response_threshold").get<float>(), d.at("border_margin_px").get<int>()};
        const auto& c = cfg.at("consensus");
        ts.consensus = {c.at("margin_px").get<double>(), c.at("min_votes").get<int>(),
                        c.at("cluster_eps_px").get<double>(), c.at("cluster_min_samples").get<int>()};
        ts.effective_min_votes = cfg.at("effective_min_votes").get<int>();
        ts.variant_names = m.at("variants").get<std::vector<std::string>>();
        for (const auto& s : m.at("slices"))
            ts.slice_log.push_back({s.at("slice").get<int>(), s.at("detected").get<int>(),
                                    s.at("consensus").get<int>(), s.at("clustered").get<int>()});
        for (const auto& r : m.at("records")) {
            const auto v = r.get<std::array<int, 5>>();
            ts.records.push_back({v[0], v[1], v[2], v[3], v[4]});
        }
        for (const auto& a : m.at("anchors")) {
            Keypoint k{a.at("x").get<float>(), a.at("y").get<float>(), a.at("slice").get<int>(),
                       a.at("response").get<float>(), "MR"};
            ts.keypoints.push_back(k);
            ts.anchor_record.push_back(a.at("record").get<int>());
            ts.positive_records.push_back(a.at("positives").get<std::vector<int>>());
        }
        for (std::size_t a = 0; a < ts.n_anchors(); ++a) {
            auto check = [&](int r) {
                if (r < 0 || static_cast<std::size_t>(r) >= ts.records.size() ||
                    ts.records[r].anchor_id != static_cast<int>(a))
                    throw FormatError("record " + std::to_string(r) + " does not belong to anchor " + std::to_string(a));
            };
            check(ts.anchor_record[a]);
            for (int r : ts.positive_records[a]) check(r);
        }
        ts.source = std::make_shared<FilePatchSource>(dir / "patches.bin", ts.patch_size, ts.records.size());
        return ts;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

}  // namespace xmk
