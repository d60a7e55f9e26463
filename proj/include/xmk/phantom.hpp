#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "xmk/imaging.hpp"

namespace xmk {

using Renderings = std::map<Modality, Volume>;

/// Label classes used by the phantom.
inline constexpr int kBackgroundClass = 0;
inline constexpr int kRimClass = 1;
inline constexpr int kTissueClass = 2;
inline constexpr int kFirstStructureClass = 3;

inline constexpr int kMinStructureRadiusPx = 4;

struct PhantomSpec {
    std::uint64_t seed = 1;
    Volume::Shape shape{192, 192, 40};
    int n_structures = 300;
    /// Per-modality class -> mean intensity. Left empty, a table is drawn from
    /// `seed`; when given, it must cover T1, T2 and FLAIR and every class.
    std::map<Modality, std::vector<float>> class_intensity_table;
    double bias_field_strength = 0.15;
    Volume::Spacing spacing_mm{0.5, 0.5, 0.5};
};

struct Phantom {
    Volume labels;  // class ids stored as floats, modality LABEL
    Renderings renderings;  // T1, T2, FLAIR normalized to [-1, 1]
    std::map<Modality, std::vector<float>> class_intensity_table;
};

/// Draws the default class-intensity table for `n_structures` structures.
/// Each modality shows a structure either at nominal contrast or nearly
/// isointense, brighter or darker than tissue; T1 inverts the T2 polarity of
/// most structures while FLAIR mostly keeps it. Structures with index
/// i % 8 in {0, 1, 2} are visible in T1, T2 or FLAIR only.
std::map<Modality, std::vector<float>> default_intensity_table(std::uint64_t seed,
                                                               int n_structures);

Phantom generate_phantom(const PhantomSpec& spec);

/// One texture mode of the ultrasound-like synthesizer.
struct SynthesisConfig {
    std::vector<Modality> modalities;  // non-empty subset of {T1, T2, FLAIR}
    std::uint64_t sampling_seed = 0;
    double speckle_strength = 0.3;
    double blur_sigma_px = 1.0;
    double dropout_rate = 0.1;
    /// Seed of the monotone intensity warp; 0 selects the identity warp.
    std::uint64_t intensity_warp_seed = 1;

    bool operator==(const SynthesisConfig&) const = default;
};

/// "T1+T2" style name, modalities in canonical T1, T2, FLAIR order.
std::string combo_name(const std::vector<Modality>& combo);
std::vector<Modality> parse_combo(const std::string& name);

/// The seven non-empty subsets of {T1, T2, FLAIR} in the order
/// T1, T2, FLAIR, T1+T2, T1+FLAIR, T2+FLAIR, T1+T2+FLAIR.
std::vector<std::vector<Modality>> all_modality_combos();
/// All non-empty subsets of `available` (canonical order as above).
std::vector<std::vector<Modality>> combos_over(const std::vector<Modality>& available);

/// Per-class fusion: each class takes the modality with the strongest tissue
/// contrast, shifted to the mean tissue level.
Volume fuse_renderings(const Renderings& renderings, const Volume& labels,
                       const std::vector<Modality>& modalities);

/// Seeded strictly increasing piecewise-linear map of [-1, 1] onto itself.
class MonotoneWarp {
public:
    explicit MonotoneWarp(std::uint64_t seed, int n_segments = 6);
    float operator()(float v) const;

private:
    std::vector<float> knots_in_;
    std::vector<float> knots_out_;
};

Volume synthesize_us(const Renderings& renderings, const Volume& labels,
                     const SynthesisConfig& cfg);

/// Texture knobs applied to the k-th sampling parameter of every combo.
struct SamplingPreset {
    double speckle_strength;
    double blur_sigma_px;
};

struct VariantSetOptions {
    int samples_per_combo = 4;
    std::uint64_t seed_base = 100;
    double dropout_rate = 0.1;
    std::vector<SamplingPreset> presets{{0.20, 0.8}, {0.28, 1.0}, {0.36, 1.2}, {0.44, 1.4}};
};

struct Variant {
    SynthesisConfig config;
    std::string name;  // "<combo>_<sample>"
    Volume volume;
};

struct VariantSet {
    Volume reference;  // T2 rendering
    std::vector<Variant> variants;
    std::size_t p() const { return variants.size(); }
};

/// Config of sample `j` for `combo`. Sample j shares its sampling seed across
/// combos so that modality subsets can be compared under matched seeds.
SynthesisConfig variant_config(const std::vector<Modality>& combo, int j,
                               const VariantSetOptions& opts);

VariantSet generate_variant_set(const Renderings& renderings, const Volume& labels,
                                const std::vector<std::vector<Modality>>& combos,
                                const VariantSetOptions& opts = {});

/// Writes `dir/variants/<name>.mvol`, `dir/reference.mvol` and `dir/manifest.json`.
void save_variant_set(const VariantSet& set, const std::filesystem::path& dir);
VariantSet load_variant_set(const std::filesystem::path& dir);

/// Number of structures whose fused contrast against tissue is at least
/// `min_contrast` (in normalized intensity units).
int count_nominal_structures(const Volume& image, const Volume& labels, double min_contrast);

}  // namespace xmk
