#include "xmk/pipeline.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <fstream>
#include <iomanip>
#include <map>
#include <random>
#include <sstream>

#include <spdlog/spdlog.h>
#include <spdlog/version.h>
#include <toml.hpp>

#include "xmk/error.hpp"
#include "xmk/png.hpp"
#include "xmk/rng.hpp"
#include "xmk/version.hpp"

namespace xmk {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

namespace {

// Reads the keys of one config section and rejects the ones nobody asked for.
class SectionReader {
public:
    SectionReader(const json& j, std::string name) : j_(j), name_(std::move(name)) {
        if (!j_.is_object()) throw ConfigError("config section [" + name_ + "] must be a table");
    }

    bool has(const std::string& key) const { return j_.contains(key); }

    template <class T>
    bool get(const std::string& key, T& dst) {
        seen_.insert(key);
        if (!j_.contains(key)) return false;
        try {
            dst = j_.at(key).get<T>();
        } catch (const json::exception&) {
            throw ConfigError(name_ + "." + key + ": unexpected value " + j_.at(key).dump());
        }
        return true;
    }

    const json* raw(const std::string& key) {
        seen_.insert(key);
        return j_.contains(key) ? &j_.at(key) : nullptr;
    }

    void finish() const {
        for (const auto& [k, v] : j_.items())
            if (!seen_.contains(k)) throw ConfigError("unknown config key '" + name_ + "." + k + "'");
    }

    [[noreturn]] void fail(const std::string& key, const std::string& what) const {
        throw ConfigError(name_ + "." + key + ": " + what);
    }

private:
    const json& j_;
    std::string name_;
    std::set<std::string> seen_;
};

std::vector<Modality> combo_or_throw(SectionReader& r, const std::string& key, const std::string& s) {
    try {
        return parse_combo(s);
    } catch (const Error& e) {
        r.fail(key, e.what());
    }
}

std::vector<std::vector<Modality>> combo_list(SectionReader& r, const std::string& key) {
    std::vector<std::string> names;
    r.get(key, names);
    std::vector<std::vector<Modality>> out;
    for (const auto& n : names) out.push_back(combo_or_throw(r, key, n));
    if (out.empty()) r.fail(key, "must list at least one combo");
    return out;
}

std::vector<std::string> combo_names(const std::vector<std::vector<Modality>>& combos) {
    std::vector<std::string> out;
    for (const auto& c : combos) out.push_back(combo_name(c));
    return out;
}

json toml_to_json(const std::string& text, const std::string& origin) {
    try {
        const auto tbl = toml::parse(text, origin);
        std::ostringstream ss;
        ss << toml::json_formatter{tbl};
        return json::parse(ss.str());
    } catch (const toml::parse_error& e) {
        std::ostringstream ss;
        ss << origin << ":" << e.source().begin.line << ":" << e.source().begin.column << ": " << e.description();
        throw ConfigError(ss.str());
    }
}

std::string area_mode_name(AreaMode m) { return m == AreaMode::kGrid ? "grid" : "convex_hull"; }

// Sections each stage's outputs depend on.
const std::map<std::string, std::vector<std::string>> kStageSections{
    {"phantom", {"phantom"}},
    {"synth", {"phantom", "synthesis"}},
    {"dataset", {"phantom", "synthesis", "detection", "dataset"}},
    {"train", {"phantom", "synthesis", "detection", "dataset", "train"}},
    {"match", {"phantom", "synthesis", "detection", "dataset", "train", "match", "eval"}},
    {"eval", {"phantom", "synthesis", "detection", "dataset", "train", "match", "eval"}},
    {"retrieve", {"phantom", "synthesis", "detection", "dataset", "train", "match", "eval"}},
    {"ablate", {"phantom", "synthesis", "detection", "dataset", "train", "match", "eval"}},
};

ojson stage_config(const RunConfig& cfg, const std::string& stage) {
    const auto full = config_json(cfg);
    ojson out;
    out["seed"] = full.at("seed");
    for (const auto& s : kStageSections.at(stage)) out[s] = full.at(s);
    return out;
}

ojson versions() {
    return {{"xmk", kVersion},
            {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                          std::to_string(EIGEN_MINOR_VERSION)},
            {"spdlog", std::to_string(SPDLOG_VER_MAJOR) + "." + std::to_string(SPDLOG_VER_MINOR) + "." +
                           std::to_string(SPDLOG_VER_PATCH)},
            {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                  std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                  std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
            {"toml++", std::to_string(TOML_LIB_MAJOR) + "." + std::to_string(TOML_LIB_MINOR) + "." +
                           std::to_string(TOML_LIB_PATCH)}};
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out << text;
}

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw MissingArtifact("missing " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

// Stage bookkeeping: decides whether to (re)run and records run.json.
class Stage {
public:
    Stage(const StageContext& ctx, std::string name) : ctx_(ctx), name_(std::move(name)) {
        dir_ = stage_dir(ctx.cfg, name_);
        config_ = stage_config(ctx.cfg, name_);
    }

    const fs::path& dir() const { return dir_; }

    /// Checks that `upstream` ran with the current configuration.
    void require(const std::string& upstream, const std::string& command) const {
        const auto path = stage_dir(ctx_.cfg, upstream) / "run.json";
        if (!fs::exists(path))
            throw MissingArtifact("missing " + path.string() + "; run `xmk " + command + "` first");
        const auto rec = read_json(path);
        if (rec.at("config") != json(stage_config(ctx_.cfg, upstream)))
            throw ConfigError(upstream + " outputs in " + stage_dir(ctx_.cfg, upstream).string() +
                              " were produced with a different configuration; re-run `xmk " + command + " --force`");
    }

    /// False when outputs from the same configuration already exist.
    bool begin() const {
        const auto path = dir_ / "run.json";
        if (fs::exists(path)) {
            const auto rec = read_json(path);
            if (!ctx_.force) {
                if (rec.contains("config") && rec.at("config") == json(config_)) {
                    spdlog::info("{} is up to date in {} (use --force to recompute)", name_, dir_.string());
                    return false;
                }
                throw ConfigError(dir_.string() + " holds " + name_ +
                                  " outputs from a different configuration; pass --force to overwrite");
            }
            fs::remove(path);
        }
        fs::create_directories(dir_);
        return true;
    }

    void finish(ojson extra = {}) const {
        ojson rec;
        rec["command"] = ctx_.command;
        rec["config"] = config_;
        rec["resolved_config"] = config_json(ctx_.cfg);
        rec["versions"] = versions();
        if (!extra.is_null()) rec["outputs"] = std::move(extra);
        write_text(dir_ / "run.json", rec.dump(1) + "\n");
    }

private:
    const StageContext& ctx_;
    std::string name_;
    fs::path dir_;
    ojson config_;
};

void save_phantom(const Phantom& ph, const PhantomSpec& spec, const fs::path& dir) {
    fs::create_directories(dir);
    save_volume(ph.labels, dir / "labels.mvol");
    ojson m;
    m["seed"] = spec.seed;
    m["shape"] = spec.shape;
    m["n_structures"] = spec.n_structures;
    m["files"] = {{"labels", "labels.mvol"}};
    for (const auto& [mod, v] : ph.renderings) {
        const std::string name(to_string(mod));
        save_volume(v, dir / (name + ".mvol"));
        m["files"][name] = name + ".mvol";
    }
    auto& t = m["class_intensity_table"];
    for (const auto& [mod, row] : ph.class_intensity_table) t[std::string(to_string(mod))] = row;
    write_text(dir / "manifest.json", m.dump(1) + "\n");
}

Phantom load_phantom(const fs::path& dir) {
    const auto m = read_json(dir / "manifest.json");
    Phantom ph;
    ph.labels = load_volume(dir / m.at("files").at("labels").get<std::string>());
    for (const auto& [name, file] : m.at("files").items()) {
        if (name == "labels") continue;
        ph.renderings.emplace(modality_from_string(name), load_volume(dir / file.get<std::string>()));
    }
    for (const auto& [name, row] : m.at("class_intensity_table").items())
        ph.class_intensity_table[modality_from_string(name)] = row.get<std::vector<float>>();
    return ph;
}

GroundTruth test_ground_truth(const RunConfig& cfg) {
    GroundTruth gt;
    if (cfg.eval.warp_amplitude_px > 0.0) {
        const auto [h, w, d] = cfg.phantom.shape;
        gt = GroundTruth::smooth_warp(h, w, d, cfg.eval.warp_amplitude_px, derive_seed({cfg.seed, 0x3A5Full}));
    }
    gt.tolerance_px = cfg.eval.tolerance_px;
    return gt;
}

struct Held {
    std::vector<std::string> training;
    std::vector<std::string> held_out;
};

Held read_split(const fs::path& dataset_dir) {
    const auto j = read_json(dataset_dir / "split.json");
    return {j.at("training").get<std::vector<std::string>>(), j.at("held_out").get<std::vector<std::string>>()};
}

// Score-curve plot: one polyline per target, true index marked in blue.
RgbImage plot_curves(const std::vector<RetrievalResult>& rs, int depth) {
    const int w = 480, h = 240, pad = 20;
    RgbImage img(h, w, 255);
    int top = 1;
    for (const auto& r : rs)
        for (int s : r.scores) top = std::max(top, s);
    auto px = [&](double i) { return pad + i * (w - 2 * pad) / std::max(1, depth - 1); };
    auto py = [&](double s) { return h - pad - s * (h - 2 * pad) / top; };
    img.line(h - pad, pad, h - pad, w - pad, 0, 0, 0);
    img.line(pad, pad, h - pad, pad, 0, 0, 0);
    for (std::size_t k = 0; k < rs.size(); ++k) {
        const auto& r = rs[k];
        const auto shade = static_cast<std::uint8_t>(40 + (160 * k) / std::max<std::size_t>(1, rs.size()));
        for (std::size_t i = 1; i < r.scores.size(); ++i)
            img.line(py(r.scores[i - 1]), px(double(i - 1)), py(r.scores[i]), px(double(i)), 200, shade, 0);
        img.dot(h - pad - 3, px(r.target_index), 2, 0, 0, 220);
    }
    return img;
}

}  // namespace

std::vector<int> pick_targets(const std::vector<int>& slices, int n, std::uint64_t seed) {
    auto pool = slices;
    std::mt19937_64 rng(seed);
    std::shuffle(pool.begin(), pool.end(), rng);
    pool.resize(std::min<std::size_t>(pool.size(), static_cast<std::size_t>(std::max(0, n))));
    std::sort(pool.begin(), pool.end());
    return pool;
}

int repeatability_baseline(const VariantSet& set, const std::vector<int>& held_out,
                           const std::vector<Modality>& test_combo) {
    int first = -1;
    for (int i = 0; i < static_cast<int>(set.variants.size()); ++i) {
        if (std::find(held_out.begin(), held_out.end(), i) != held_out.end()) continue;
        if (set.variants[static_cast<std::size_t>(i)].config.modalities == test_combo) return i;
        if (first < 0) first = i;
    }
    if (first < 0) throw ConfigError("every variant is held out; no repeatability baseline left");
    return first;
}

void RunConfig::set_seed(std::uint64_t s) {
    seed = s;
    if (!phantom_seed_explicit) phantom.seed = s;
    if (!train_seed_explicit) train.config.seed = s;
}

void RunConfig::validate() const {
    if (jobs < 1) throw ConfigError("jobs must be >= 1");
    if (phantom.n_structures < 0) throw ConfigError("phantom.n_structures must be >= 0");
    for (int s : phantom.shape)
        if (s < 1) throw ConfigError("phantom.shape components must be >= 1");
    for (double s : phantom.spacing_mm)
        if (!(s > 0.0)) throw ConfigError("phantom.spacing_mm components must be > 0");
    if (synthesis.combos.empty()) throw ConfigError("synthesis.combos must not be empty");
    if (synthesis.options.samples_per_combo < 1) throw ConfigError("synthesis.samples_per_combo must be >= 1");
    if (synthesis.options.presets.empty()) throw ConfigError("synthesis.presets must not be empty");
    if (!(synthesis.options.dropout_rate >= 0.0 && synthesis.options.dropout_rate <= 1.0))
        throw ConfigError("synthesis.dropout_rate must lie in [0, 1]");
    detection.validate(dataset.patch_size);
    dataset.consensus.validate();
    if (dataset.held_out_modes < 0) throw ConfigError("dataset.held_out_modes must be >= 0");
    const auto p = synthesis.combos.size() * static_cast<std::size_t>(synthesis.options.samples_per_combo);
    if (static_cast<std::size_t>(dataset.held_out_modes) >= p)
        throw ConfigError("dataset.held_out_modes must leave at least one training variant");
    train.config.validate();
    train.arch.validate();
    if (train.arch.patch_size != dataset.patch_size) throw ConfigError("train.patch_size must equal dataset.patch_size");
    match.validate();
    if (!(eval.tolerance_px > 0.0)) throw ConfigError("eval.tolerance_px must be > 0");
    if (eval.grid_cell_px < 1) throw ConfigError("eval.grid_cell_px must be >= 1");
    if (eval.n_test_volumes < 1) throw ConfigError("eval.n_test_volumes must be >= 1");
    if (!(eval.warp_amplitude_px >= 0.0)) throw ConfigError("eval.warp_amplitude_px must be >= 0");
    if (eval.retrieval_targets < 0) throw ConfigError("eval.retrieval_targets must be >= 0");
    if (eval.ablation_epochs < 0) throw ConfigError("eval.ablation_epochs must be >= 0");
    for (const auto& row : eval.ablation_rows)
        if (row.empty()) throw ConfigError("eval.ablation_rows entries must not be empty");
}

RunConfig parse_config(const std::string& text, const std::string& origin) {
    const auto first = text.find_first_not_of(" \t\r\n");
    json root;
    if (first != std::string::npos && text[first] == '{') {
        try {
            root = json::parse(text);
        } catch (const json::exception& e) {
            throw ConfigError(origin + ": " + e.what());
        }
    } else {
        root = toml_to_json(text, origin);
    }
    if (!root.is_object()) throw ConfigError(origin + ": top level must be a table");
    // A stage's run.json replays the run it records.
    if (root.contains("resolved_config") && root.contains("versions")) root = json(root.at("resolved_config"));

    RunConfig cfg;
    SectionReader top(root, "<top>");
    std::uint64_t seed = cfg.seed;
    top.get("seed", seed);
    std::string out;
    if (top.get("out", out)) cfg.out = out;
    top.get("jobs", cfg.jobs);
    for (const auto& s : kConfigSections) {
        if (!top.raw(s)) continue;
        cfg.sections.insert(s);
    }
    top.finish();

    const json empty = json::object();
    auto section = [&](const std::string& s) { return SectionReader(root.contains(s) ? root.at(s) : empty, s); };

    {
        auto r = section("phantom");
        cfg.phantom_seed_explicit = r.get("seed", cfg.phantom.seed);
        r.get("shape", cfg.phantom.shape);
        r.get("n_structures", cfg.phantom.n_structures);
        r.get("bias_field_strength", cfg.phantom.bias_field_strength);
        r.get("spacing_mm", cfg.phantom.spacing_mm);
        if (const auto* t = r.raw("class_intensity_table")) {
            if (!t->is_object()) r.fail("class_intensity_table", "must be a table of modality = [intensities]");
            for (const auto& [name, row] : t->items()) {
                try {
                    cfg.phantom.class_intensity_table[modality_from_string(name)] = row.get<std::vector<float>>();
                } catch (const std::exception& e) {
                    r.fail("class_intensity_table." + name, e.what());
                }
            }
        }
        r.finish();
    }
    {
        auto r = section("synthesis");
        if (r.has("combos")) cfg.synthesis.combos = combo_list(r, "combos");
        r.raw("combos");
        auto& o = cfg.synthesis.options;
        r.get("samples_per_combo", o.samples_per_combo);
        r.get("seed_base", o.seed_base);
        r.get("dropout_rate", o.dropout_rate);
        std::vector<std::array<double, 2>> presets;
        if (r.get("presets", presets)) {
            o.presets.clear();
            for (const auto& p : presets) o.presets.push_back({p[0], p[1]});
        }
        r.finish();
    }
    {
        auto r = section("detection");
        auto& d = cfg.detection;
        r.get("max_keypoints", d.max_keypoints);
        r.get("nms_radius_px", d.nms_radius_px);
        r.get("response_threshold", d.response_threshold);
        r.get("border_margin_px", d.border_margin_px);
        r.finish();
    }
    {
        auto r = section("dataset");
        auto& d = cfg.dataset;
        r.get("patch_size", d.patch_size);
        r.get("margin_px", d.consensus.margin_px);
        r.get("min_votes", d.consensus.min_votes);
        r.get("cluster_eps_px", d.consensus.cluster_eps_px);
        r.get("cluster_min_samples", d.consensus.cluster_min_samples);
        r.get("held_out_modes", d.held_out_modes);
        r.get("holdout_seed", d.holdout_seed);
        r.finish();
        cfg.train.arch.patch_size = d.patch_size;
    }
    {
        auto r = section("train");
        auto& t = cfg.train.config;
        r.get("learning_rate", t.learning_rate);
        r.get("batch_size", t.batch_size);
        r.get("margin", t.margin);
        r.get("epochs", t.epochs);
        r.get("beta1", t.beta1);
        r.get("beta2", t.beta2);
        r.get("adam_eps", t.adam_eps);
        cfg.train_seed_explicit = r.get("seed", t.seed);
        r.get("widths", cfg.train.arch.widths);
        r.get("strides", cfg.train.arch.strides);
        r.get("descriptor_dim", cfg.train.arch.descriptor_dim);
        r.finish();
    }
    {
        auto r = section("match");
        auto& m = cfg.match;
        r.get("n_mr", m.n_mr);
        r.get("m_us_cap", m.m_us_cap);
        r.get("knn_k", m.knn_k);
        r.get("min_similarity", m.min_similarity);
        r.get("ratio_test", m.ratio_test);
        r.get("ratio_threshold", m.ratio_threshold);
        r.get("uniqueness", m.uniqueness);
        r.finish();
    }
    {
        auto r = section("eval");
        auto& e = cfg.eval;
        r.get("tolerance_px", e.tolerance_px);
        std::string mode;
        if (r.get("area_mode", mode)) {
            if (mode == "convex_hull")
                e.area_mode = AreaMode::kConvexHull;
            else if (mode == "grid")
                e.area_mode = AreaMode::kGrid;
            else
                r.fail("area_mode", "expected \"convex_hull\" or \"grid\"");
        }
        r.get("grid_cell_px", e.grid_cell_px);
        r.get("n_test_volumes", e.n_test_volumes);
        std::string combo;
        if (r.get("test_combo", combo)) e.test_combo = combo_or_throw(r, "test_combo", combo);
        r.get("test_seed_offset", e.test_seed_offset);
        r.get("warp_amplitude_px", e.warp_amplitude_px);
        r.get("random_baseline", e.random_baseline);
        r.get("retrieval_targets", e.retrieval_targets);
        r.get("retrieval_seed", e.retrieval_seed);
        if (r.has("ablation_rows")) e.ablation_rows = combo_list(r, "ablation_rows");
        r.raw("ablation_rows");
        r.get("ablation_epochs", e.ablation_epochs);
        r.finish();
    }
    cfg.set_seed(seed);
    cfg.validate();
    return cfg;
}

RunConfig load_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw MissingArtifact("config file not found: " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), path.string());
}

void require_sections(const RunConfig& cfg, const std::vector<std::string>& required) {
    for (const auto& s : required)
        if (!cfg.sections.contains(s)) throw ConfigError("config is missing required section [" + s + "]");
}

ojson config_json(const RunConfig& cfg) {
    ojson j;
    j["seed"] = cfg.seed;
    j["out"] = cfg.out.string();
    j["jobs"] = cfg.jobs;
    const auto& ph = cfg.phantom;
    j["phantom"] = {{"seed", ph.seed},
                    {"shape", ph.shape},
                    {"n_structures", ph.n_structures},
                    {"bias_field_strength", ph.bias_field_strength},
                    {"spacing_mm", ph.spacing_mm}};
    if (!ph.class_intensity_table.empty()) {
        auto& t = j["phantom"]["class_intensity_table"];
        for (const auto& [m, row] : ph.class_intensity_table) t[std::string(to_string(m))] = row;
    }
    const auto& o = cfg.synthesis.options;
    auto presets = ojson::array();
    for (const auto& p : o.presets) presets.push_back({p.speckle_strength, p.blur_sigma_px});
    j["synthesis"] = {{"combos", combo_names(cfg.synthesis.combos)},
                      {"samples_per_combo", o.samples_per_combo},
                      {"seed_base", o.seed_base},
                      {"dropout_rate", o.dropout_rate},
                      {"presets", presets}};
    const auto& d = cfg.detection;
    j["detection"] = {{"max_keypoints", d.max_keypoints},
                      {"nms_radius_px", d.nms_radius_px},
                      {"response_threshold", d.response_threshold},
                      {"border_margin_px", d.border_margin_px}};
    const auto& ds = cfg.dataset;
    j["dataset"] = {{"patch_size", ds.patch_size},
                    {"margin_px", ds.consensus.margin_px},
                    {"min_votes", ds.consensus.min_votes},
                    {"cluster_eps_px", ds.consensus.cluster_eps_px},
                    {"cluster_min_samples", ds.consensus.cluster_min_samples},
                    {"held_out_modes", ds.held_out_modes},
                    {"holdout_seed", ds.holdout_seed}};
    const auto& t = cfg.train.config;
    j["train"] = {{"learning_rate", t.learning_rate},
                  {"batch_size", t.batch_size},
                  {"margin", t.margin},
                  {"epochs", t.epochs},
                  {"beta1", t.beta1},
                  {"beta2", t.beta2},
                  {"adam_eps", t.adam_eps},
                  {"seed", t.seed},
                  {"widths", cfg.train.arch.widths},
                  {"strides", cfg.train.arch.strides},
                  {"descriptor_dim", cfg.train.arch.descriptor_dim}};
    const auto& m = cfg.match;
    j["match"] = {{"n_mr", m.n_mr},
                  {"m_us_cap", m.m_us_cap},
                  {"knn_k", m.knn_k},
                  {"min_similarity", m.min_similarity},
                  {"ratio_test", m.ratio_test},
                  {"ratio_threshold", m.ratio_threshold},
                  {"uniqueness", m.uniqueness}};
    const auto& e = cfg.eval;
    j["eval"] = {{"tolerance_px", e.tolerance_px},
                 {"area_mode", area_mode_name(e.area_mode)},
                 {"grid_cell_px", e.grid_cell_px},
                 {"n_test_volumes", e.n_test_volumes},
                 {"test_combo", combo_name(e.test_combo)},
                 {"test_seed_offset", e.test_seed_offset},
                 {"warp_amplitude_px", e.warp_amplitude_px},
                 {"random_baseline", e.random_baseline},
                 {"retrieval_targets", e.retrieval_targets},
                 {"retrieval_seed", e.retrieval_seed},
                 {"ablation_rows", combo_names(e.ablation_rows)},
                 {"ablation_epochs", e.ablation_epochs}};
    return j;
}

std::vector<int> held_out_indices(std::size_t p, int count, std::uint64_t seed) {
    if (count < 0 || static_cast<std::size_t>(count) >= p)
        throw ConfigError("cannot hold out " + std::to_string(count) + " of " + std::to_string(p) + " variants");
    std::vector<int> idx(p);
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(derive_seed({seed, 0x401Dull}));
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(static_cast<std::size_t>(count));
    std::sort(idx.begin(), idx.end());
    return idx;
}

VariantSet select_variants(const VariantSet& set, const std::vector<int>& keep) {
    VariantSet out;
    out.reference = set.reference;
    for (int i : keep) out.variants.push_back(set.variants.at(static_cast<std::size_t>(i)));
    return out;
}

std::vector<Volume> make_test_volumes(const RunConfig& cfg, const Phantom& ph) {
    auto opts = cfg.synthesis.options;
    opts.seed_base += cfg.eval.test_seed_offset;
    const auto gt = test_ground_truth(cfg);
    std::vector<Volume> out;
    for (int j = 0; j < cfg.eval.n_test_volumes; ++j) {
        auto v = synthesize_us(ph.renderings, ph.labels, variant_config(cfg.eval.test_combo, j, opts));
        out.push_back(gt.warp_volume(v).with_modality(Modality::US));
    }
    return out;
}

std::vector<int> evaluation_slices(const TrainingSet& ts) {
    std::set<int> s;
    for (const auto& k : ts.keypoints) s.insert(k.slice_index);
    return {s.begin(), s.end()};
}

std::vector<int> evaluation_slices(const Volume& reference, const DetectorConfig& det) {
    std::vector<int> out;
    auto d = det;
    d.max_keypoints = 1;
    for (int z = 0; z < reference.depth(); ++z)
        if (!detect_keypoints(get_slice(reference, z), d).empty()) out.push_back(z);
    return out;
}

Experiment prepare_experiment(const RunConfig& cfg) {
    cfg.validate();
    Experiment ex;
    ex.phantom = generate_phantom(cfg.phantom);
    ex.all_variants = generate_variant_set(ex.phantom.renderings, ex.phantom.labels, cfg.synthesis.combos,
                                           cfg.synthesis.options);
    ex.held_out = held_out_indices(ex.all_variants.p(), cfg.dataset.held_out_modes, cfg.dataset.holdout_seed);
    std::vector<int> keep;
    for (int i = 0; i < static_cast<int>(ex.all_variants.p()); ++i)
        if (!std::binary_search(ex.held_out.begin(), ex.held_out.end(), i)) keep.push_back(i);
    ex.training_variants = select_variants(ex.all_variants, keep);
    ex.data = build_training_set(ex.training_variants.reference, ex.training_variants, cfg.detection,
                                 cfg.dataset.consensus, cfg.dataset.patch_size);
    return ex;
}

Model random_model(const RunConfig& cfg, const NormStats& stats) {
    Model m;
    m.net = DescriptorNet(cfg.train.arch);
    m.net.init(derive_seed({cfg.train.config.seed, 1}));  // the untrained starting point of train()
    m.norm_stats = stats;
    m.seed = cfg.train.config.seed;
    return m;
}

std::vector<AblationRow> run_ablation(const RunConfig& cfg, const Phantom& ph) {
    cfg.validate();
    const auto all = generate_variant_set(ph.renderings, ph.labels, all_modality_combos(), cfg.synthesis.options);
    const auto full = build_training_set(all.reference, all, cfg.detection, cfg.dataset.consensus, cfg.dataset.patch_size);
    const auto slices = evaluation_slices(full);
    const auto tests = make_test_volumes(cfg, ph);
    const auto gt = test_ground_truth(cfg);
    auto tc = cfg.train.config;
    if (cfg.eval.ablation_epochs > 0) tc.epochs = cfg.eval.ablation_epochs;

    std::vector<AblationRow> rows;
    for (const auto& row : cfg.eval.ablation_rows) {
        const auto combos = combos_over(row);
        std::vector<int> keep;
        for (std::size_t i = 0; i < all.p(); ++i)
            if (std::find(combos.begin(), combos.end(), all.variants[i].config.modalities) != combos.end())
                keep.push_back(static_cast<int>(i));
        const auto subset = select_variants(all, keep);
        AblationRow r;
        r.label = combo_name(row);
        r.p = subset.p();
        spdlog::info("ablation row {}: {} variants", r.label, r.p);
        const auto data = build_training_set(subset.reference, subset, cfg.detection, cfg.dataset.consensus,
                                             cfg.dataset.patch_size);
        r.n_anchors = data.n_anchors();
        auto trained = train(data, tc, cfg.train.arch);
        r.loss_history = trained.loss_history;
        r.report = evaluate_volumes(trained.model, all.reference, tests, slices, cfg.detection, cfg.match, gt,
                                    cfg.eval.area_mode);
        spdlog::info("ablation row {}: Prec {:.2f}  MSc {:.2f}  MP {:.2f}  Area {:.2f}", r.label,
                     r.report.precision_pct, r.report.matching_score_pct, r.report.matched_points, r.report.area_pct);
        rows.push_back(std::move(r));
    }
    return rows;
}

fs::path stage_dir(const RunConfig& cfg, const std::string& stage) { return cfg.out / stage; }

void run_phantom(const StageContext& ctx) {
    Stage st(ctx, "phantom");
    if (!st.begin()) return;
    const auto ph = generate_phantom(ctx.cfg.phantom);
    save_phantom(ph, ctx.cfg.phantom, st.dir());
    st.finish({{"labels", "labels.mvol"}, {"renderings", {"T1.mvol", "T2.mvol", "FLAIR.mvol"}}});
    spdlog::info("phantom written to {}", st.dir().string());
}

void run_synth(const StageContext& ctx) {
    Stage st(ctx, "synth");
    st.require("phantom", "phantom");
    if (!st.begin()) return;
    const auto ph = load_phantom(stage_dir(ctx.cfg, "phantom"));
    const auto set = generate_variant_set(ph.renderings, ph.labels, ctx.cfg.synthesis.combos, ctx.cfg.synthesis.options);
    save_variant_set(set, st.dir());
    st.finish({{"p", set.p()}});
    spdlog::info("{} variants written to {}", set.p(), st.dir().string());
}

void run_build_dataset(const StageContext& ctx) {
    const auto& cfg = ctx.cfg;
    Stage st(ctx, "dataset");
    st.require("synth", "synth");
    if (!st.begin()) return;
    const auto all = load_variant_set(stage_dir(cfg, "synth"));
    const auto held = held_out_indices(all.p(), cfg.dataset.held_out_modes, cfg.dataset.holdout_seed);
    std::vector<int> keep;
    ojson split{{"training", ojson::array()}, {"held_out", ojson::array()}};
    for (int i = 0; i < static_cast<int>(all.p()); ++i) {
        const bool h = std::binary_search(held.begin(), held.end(), i);
        split[h ? "held_out" : "training"].push_back(all.variants[i].name);
        if (!h) keep.push_back(i);
    }
    const auto training = select_variants(all, keep);
    const auto ts = build_training_set(training.reference, training, cfg.detection, cfg.dataset.consensus,
                                       cfg.dataset.patch_size);
    save_training_set(ts, st.dir());
    write_text(st.dir() / "split.json", split.dump(1) + "\n");
    st.finish({{"anchors", ts.n_anchors()}, {"patches", ts.records.size()}, {"retained_fraction", ts.retained_fraction()}});
}

void run_train(const StageContext& ctx) {
    const auto& cfg = ctx.cfg;
    Stage st(ctx, "train");
    st.require("dataset", "build-dataset");
    if (!st.begin()) return;
    const auto ts = load_training_set(stage_dir(cfg, "dataset"));
    std::ofstream epochs_csv;
    fs::create_directories(st.dir());
    epochs_csv.open(st.dir() / "epochs.csv");
    epochs_csv << "epoch,mean_loss,active_fraction,seconds\n";
    const auto res = train(ts, cfg.train.config, cfg.train.arch, [&](const EpochStats& e) {
        epochs_csv << e.epoch << ',' << std::setprecision(17) << e.mean_loss << ',' << e.active_fraction << ','
                   << std::setprecision(6) << e.seconds << '\n'
                   << std::flush;
    });
    save_checkpoint(res.model, st.dir() / "model.ckpt");
    write_text(st.dir() / "loss_history.json", ojson(res.loss_history).dump() + "\n");
    st.finish({{"checkpoint", "model.ckpt"}, {"epochs", res.loss_history.size()},
               {"final_loss", res.loss_history.empty() ? 0.0 : res.loss_history.back()}});
}

void run_match(const StageContext& ctx, const fs::path& us_path, int slice) {
    const auto& cfg = ctx.cfg;
    Stage st(ctx, "match");
    st.require("train", "train");
    // Explicit inputs change the outputs without changing the config.
    if (!us_path.empty() || slice >= 0) {
        auto forced = ctx;
        forced.force = true;
        Stage(forced, "match").begin();
    } else if (!st.begin()) {
        return;
    }
    const auto model = load_checkpoint(stage_dir(cfg, "train") / "model.ckpt", &cfg.train.arch);
    const auto mr = load_volume(stage_dir(cfg, "synth") / "reference.mvol");
    Volume us;
    if (!us_path.empty()) {
        us = load_volume(us_path);
    } else {
        st.require("phantom", "phantom");
        auto one = cfg;
        one.eval.n_test_volumes = 1;
        us = make_test_volumes(one, load_phantom(stage_dir(cfg, "phantom"))).front();
    }
    if (us.height() != mr.height() || us.width() != mr.width())
        throw ConfigError("US volume in-plane size differs from the MR volume");
    std::vector<int> slices;
    if (slice >= 0) {
        slices = {slice};
    } else {
        slices = evaluation_slices(load_training_set(stage_dir(cfg, "dataset")));
    }
    ojson summary = ojson::array();
    for (int z : slices) {
        if (z >= mr.depth() || z >= us.depth()) throw ConfigError("slice " + std::to_string(z) + " is out of range");
        const auto a = get_slice(mr, z, "MR"), b = get_slice(us, z, "US");
        const auto ms = match_slices(a, b, model, cfg.detection, cfg.match);
        std::ostringstream name;
        name << "slice_" << std::setw(3) << std::setfill('0') << z;
        save_match_json(ms, st.dir() / (name.str() + ".json"));
        write_png(render_matches(a, b, ms), st.dir() / (name.str() + ".png"));
        summary.push_back({{"slice", z}, {"mr_keypoints", ms.mr_keypoints.size()},
                           {"us_keypoints", ms.us_keypoints.size()}, {"matches", ms.matches.size()}});
    }
    st.finish({{"us", us_path.empty() ? "test volume 0" : us_path.string()}, {"slices", summary}});
}

void run_eval(const StageContext& ctx, const fs::path& matches_dir) {
    const auto& cfg = ctx.cfg;
    const auto gt = test_ground_truth(cfg);
    if (!matches_dir.empty()) {
        // External match files: score only, no model needed.
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(matches_dir))
            if (e.path().extension() == ".json") files.push_back(e.path());
        if (files.empty()) throw MissingArtifact("no match files in " + matches_dir.string());
        std::sort(files.begin(), files.end());
        const auto [h, w, d] = cfg.phantom.shape;
        std::vector<SliceScore> scores;
        for (const auto& f : files) {
            const auto ms = load_match_json(f);
            scores.push_back(score_matches(ms, gt, static_cast<int>(ms.mr_keypoints.size()), h, w, cfg.eval.area_mode));
        }
        auto report = aggregate(std::move(scores), stage_config(cfg, "eval"));
        const auto out = stage_dir(cfg, "eval") / "external";
        write_report_json(report, out / "report.json");
        write_per_slice_csv(report, out / "per_slice.csv");
        const TableRow row{matches_dir.filename().string(), report};
        write_table_csv(std::span(&row, 1), out / "table.csv");
        spdlog::info("external matches: Prec {:.2f}  MSc {:.2f}  MP {:.2f}", report.precision_pct,
                     report.matching_score_pct, report.matched_points);
        return;
    }

    Stage st(ctx, "eval");
    st.require("train", "train");
    st.require("phantom", "phantom");
    if (!st.begin()) return;
    const auto model = load_checkpoint(stage_dir(cfg, "train") / "model.ckpt", &cfg.train.arch);
    const auto ph = load_phantom(stage_dir(cfg, "phantom"));
    const auto mr = load_volume(stage_dir(cfg, "synth") / "reference.mvol");
    const auto ts = load_training_set(stage_dir(cfg, "dataset"));
    const auto slices = evaluation_slices(ts);
    const auto tests = make_test_volumes(cfg, ph);
    fs::create_directories(st.dir() / "test_us");
    for (std::size_t j = 0; j < tests.size(); ++j)
        save_volume(tests[j], st.dir() / "test_us" / ("test_" + std::to_string(j) + ".mvol"));

    auto report = evaluate_volumes(model, mr, tests, slices, cfg.detection, cfg.match, gt, cfg.eval.area_mode);
    report.config = stage_config(cfg, "eval");
    write_report_json(report, st.dir() / "report.json");
    write_per_slice_csv(report, st.dir() / "per_slice.csv");
    std::vector<TableRow> rows{{"trained", report}};
    spdlog::info("trained: Prec {:.2f}  MSc {:.2f}  MP {:.2f}  Area {:.2f}  per-slice MAD {:.2f}", report.precision_pct,
                 report.matching_score_pct, report.matched_points, report.area_pct,
                 report.precision_spread.mean_abs_deviation);
    if (cfg.eval.random_baseline) {
        auto rnd = evaluate_volumes(random_model(cfg, model.norm_stats), mr, tests, slices, cfg.detection, cfg.match, gt,
                                    cfg.eval.area_mode);
        rnd.config = report.config;
        write_report_json(rnd, st.dir() / "report_random.json");
        spdlog::info("random weights: Prec {:.2f}  MSc {:.2f}  MP {:.2f}", rnd.precision_pct, rnd.matching_score_pct,
                     rnd.matched_points);
        rows.push_back({"random_weights", std::move(rnd)});
    }
    write_table_csv(rows, st.dir() / "table.csv");

    ojson outputs{{"precision_pct", report.precision_pct}, {"matched_points", report.matched_points}};
    const auto split = read_split(stage_dir(cfg, "dataset"));
    if (!split.held_out.empty()) {
        const auto all = load_variant_set(stage_dir(cfg, "synth"));
        std::vector<int> held_idx;
        std::vector<Volume> held;
        for (std::size_t i = 0; i < all.variants.size(); ++i)
            if (std::find(split.held_out.begin(), split.held_out.end(), all.variants[i].name) != split.held_out.end()) {
                held_idx.push_back(static_cast<int>(i));
                held.push_back(all.variants[i].volume);
            }
        const auto* baseline =
            &all.variants[static_cast<std::size_t>(repeatability_baseline(all, held_idx, cfg.eval.test_combo))].volume;
        const auto rep = mode_holdout_repeatability(model, mr, *baseline, held, slices, cfg.detection, cfg.match,
                                                    cfg.eval.tolerance_px);
        ojson j{{"baseline_matches", rep.baseline_matches},
                {"held_out", split.held_out},
                {"per_variant_pct", rep.per_variant_pct},
                {"mean_pct", rep.mean_pct}};
        write_text(st.dir() / "repeatability.json", j.dump(1) + "\n");
        spdlog::info("repeatability on {} held-out modes: {:.2f}%", held.size(), rep.mean_pct);
        outputs["repeatability_pct"] = rep.mean_pct;
    }
    st.finish(outputs);
}

void run_retrieve(const StageContext& ctx) {
    const auto& cfg = ctx.cfg;
    Stage st(ctx, "retrieve");
    st.require("train", "train");
    st.require("phantom", "phantom");
    if (!st.begin()) return;
    const auto model = load_checkpoint(stage_dir(cfg, "train") / "model.ckpt", &cfg.train.arch);
    const auto ph = load_phantom(stage_dir(cfg, "phantom"));
    const auto mr = load_volume(stage_dir(cfg, "synth") / "reference.mvol");
    auto one = cfg;
    one.eval.n_test_volumes = 1;
    const auto us = make_test_volumes(one, ph).front();
    const auto targets = pick_targets(evaluation_slices(load_training_set(stage_dir(cfg, "dataset"))),
                                      cfg.eval.retrieval_targets, cfg.eval.retrieval_seed);
    const auto us_slices = describe_volume(us, model, cfg.detection, cfg.match.m_us_cap, "US");
    std::vector<RetrievalResult> results;
    ojson rows = ojson::array();
    int within = 0;
    double err = 0.0;
    for (int z : targets) {
        const auto target = detect_and_describe(get_slice(mr, z, "MR"), model, cfg.detection, cfg.match.n_mr, "MR");
        auto r = slice_retrieval(target, z, us_slices, cfg.match, mr.spacing_mm()[2]);
        within += std::abs(r.best_index - z) <= 2;
        err += r.error_mm;
        rows.push_back({{"target", z}, {"best", r.best_index}, {"error_mm", r.error_mm}, {"scores", r.scores}});
        spdlog::info("slice {} retrieved at {} ({:.2f} mm)", z, r.best_index, r.error_mm);
        results.push_back(std::move(r));
    }
    ojson j{{"targets", rows},
            {"within_2_slices", within},
            {"mean_error_mm", targets.empty() ? 0.0 : err / double(targets.size())}};
    write_text(st.dir() / "retrieval.json", j.dump(1) + "\n");
    {
        std::ofstream csv(st.dir() / "curves.csv");
        csv << "target,slice,score\n";
        for (const auto& r : results)
            for (std::size_t i = 0; i < r.scores.size(); ++i) csv << r.target_index << ',' << i << ',' << r.scores[i] << '\n';
    }
    write_png(plot_curves(results, us.depth()), st.dir() / "curves.png");
    st.finish({{"within_2_slices", within}, {"targets", targets.size()}});
}

void run_ablate(const StageContext& ctx) {
    const auto& cfg = ctx.cfg;
    Stage st(ctx, "ablate");
    if (!st.begin()) return;
    const auto ph = generate_phantom(cfg.phantom);
    const auto rows = run_ablation(cfg, ph);
    std::vector<TableRow> table;
    ojson j = ojson::array();
    for (const auto& r : rows) {
        table.push_back({r.label, r.report});
        j.push_back({{"row", r.label}, {"p", r.p}, {"anchors", r.n_anchors}, {"loss_history", r.loss_history},
                     {"report", report_json(r.report)}});
    }
    write_table_csv(table, st.dir() / "table.csv");
    write_text(st.dir() / "rows.json", j.dump(1) + "\n");
    st.finish({{"rows", rows.size()}});
}

}  // namespace xmk
