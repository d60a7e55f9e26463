#pragma once

// Run configuration and the pipeline stages behind the `xmk` subcommands.

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "xmk/dataset.hpp"
#include "xmk/evaluation.hpp"
#include "xmk/matcher.hpp"
#include "xmk/model.hpp"
#include "xmk/phantom.hpp"

namespace xmk {

struct SynthesisSection {
    std::vector<std::vector<Modality>> combos = all_modality_combos();
    VariantSetOptions options;
};

struct DatasetSection {
    int patch_size = 64;
    ConsensusParams consensus;
    int held_out_modes = 0;  // variants excluded from training, kept for repeatability
    std::uint64_t holdout_seed = 7;
};

struct TrainSection {
    TrainConfig config;
    ArchSpec arch;
};

struct EvalSection {
    double tolerance_px = 4.0;
    AreaMode area_mode = AreaMode::kConvexHull;
    int grid_cell_px = 16;
    int n_test_volumes = 4;
    std::vector<Modality> test_combo{Modality::T1, Modality::T2, Modality::FLAIR};
    std::uint64_t test_seed_offset = 1000;  // test sampling seeds = seed_base + offset + j
    double warp_amplitude_px = 0.0;         // 0: identity ground truth
    bool random_baseline = true;
    int retrieval_targets = 10;
    std::uint64_t retrieval_seed = 11;
    std::vector<std::vector<Modality>> ablation_rows{
        {Modality::T2},
        {Modality::T2, Modality::FLAIR},
        {Modality::T1, Modality::T2},
        {Modality::T1, Modality::T2, Modality::FLAIR}};
    int ablation_epochs = 0;  // 0: train.epochs
};

struct RunConfig {
    std::uint64_t seed = 1;
    std::filesystem::path out = "out";
    int jobs = 1;
    PhantomSpec phantom;
    SynthesisSection synthesis;
    DetectorConfig detection;
    DatasetSection dataset;
    TrainSection train;
    MatchConfig match;
    EvalSection eval;

    std::set<std::string> sections;  // sections present in the source file
    bool phantom_seed_explicit = false;
    bool train_seed_explicit = false;

    /// Re-derives seeds that were not set explicitly from the global seed.
    void set_seed(std::uint64_t s);
    void validate() const;
};

inline const std::vector<std::string> kConfigSections{"phantom", "synthesis", "detection", "dataset",
                                                      "train",   "match",     "eval"};

/// Parses a TOML or JSON document (JSON when the first non-blank character
/// is '{'). Unknown sections or keys raise ConfigError.
RunConfig parse_config(const std::string& text, const std::string& origin = "<config>");
RunConfig load_config(const std::filesystem::path& path);

/// Throws ConfigError naming the first section of `required` absent from a
/// config read from a file.
void require_sections(const RunConfig& cfg, const std::vector<std::string>& required);

/// Fully resolved configuration; parse_config(dump) reproduces it.
nlohmann::ordered_json config_json(const RunConfig& cfg);

// In-memory building blocks.

/// Indices of the variants held out of training (sorted).
std::vector<int> held_out_indices(std::size_t p, int count, std::uint64_t seed);
VariantSet select_variants(const VariantSet& set, const std::vector<int>& keep);

/// Fresh-seed renderings of eval.test_combo, one per sampling preset.
std::vector<Volume> make_test_volumes(const RunConfig& cfg, const Phantom& ph);

/// Slices holding at least one training anchor.
std::vector<int> evaluation_slices(const TrainingSet& ts);

/// Evaluation slices, or every slice whose reference detections leave room
/// for matching when no training set is at hand.
std::vector<int> evaluation_slices(const Volume& reference, const DetectorConfig& det);

struct Experiment {
    Phantom phantom;
    VariantSet all_variants;
    std::vector<int> held_out;
    VariantSet training_variants;
    TrainingSet data;
};

/// Phantom, variant set (all combos in cfg), training subset and dataset.
Experiment prepare_experiment(const RunConfig& cfg);

Model random_model(const RunConfig& cfg, const NormStats& stats);

/// `n` seeded picks from `slices`, sorted (retrieval targets).
std::vector<int> pick_targets(const std::vector<int>& slices, int n, std::uint64_t seed);

/// Variant matched against the reference to define repeatability: the first
/// training variant of `test_combo`, else the first training variant.
int repeatability_baseline(const VariantSet& set, const std::vector<int>& held_out,
                           const std::vector<Modality>& test_combo);

struct AblationRow {
    std::string label;
    std::size_t p = 0;
    std::size_t n_anchors = 0;
    std::vector<double> loss_history;
    EvalReport report;
};

/// Trains and evaluates one model per eval.ablation_rows entry, each on all
/// non-empty subsets of the row's modalities x samples_per_combo.
std::vector<AblationRow> run_ablation(const RunConfig& cfg, const Phantom& ph);

// On-disk stages under cfg.out/<stage>/. Each stage writes run.json with the
// resolved configuration. Existing outputs produced by an identical
// configuration are kept; a different configuration requires `force`.

struct StageContext {
    RunConfig cfg;
    bool force = false;
    std::string command;
};

std::filesystem::path stage_dir(const RunConfig& cfg, const std::string& stage);

void run_phantom(const StageContext& ctx);
void run_synth(const StageContext& ctx);
void run_build_dataset(const StageContext& ctx);
void run_train(const StageContext& ctx);
/// Matches MR slices against `us_path` (default: the first test volume).
void run_match(const StageContext& ctx, const std::filesystem::path& us_path = {}, int slice = -1);
/// Scores the trained model, or the external match files in `matches_dir`
/// when given.
void run_eval(const StageContext& ctx, const std::filesystem::path& matches_dir = {});
void run_retrieve(const StageContext& ctx);
void run_ablate(const StageContext& ctx);

}  // namespace xmk
