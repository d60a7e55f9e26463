#include "xmk/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "xmk/error.hpp"
#include "xmk/image_ops.hpp"
#include "xmk/rng.hpp"

namespace xmk {

namespace {

constexpr std::array<Modality, 3> kMrModalities{Modality::T1, Modality::T2, Modality::FLAIR};

struct BaseLevels {
    float background, rim, tissue;
};

BaseLevels base_levels(Modality m) {
    switch (m) {
        case Modality::T1: return {0.0f, 0.85f, 0.60f};
        case Modality::T2: return {0.0f, 0.30f, 0.45f};
        default: return {0.0f, 0.40f, 0.50f};
    }
}

struct Structure {
    double cy, cx, cz;
    double ry, rx, rz;
    double theta;
};

// Low-frequency multiplicative field, exp(strength * f) with |f| <= 1.
std::vector<float> bias_field(Volume::Shape shape, double strength, std::uint64_t seed) {
    const int h = shape[0], w = shape[1], d = shape[2];
    std::vector<float> field(static_cast<std::size_t>(h) * w * d, 1.0f);
    if (strength <= 0.0) return field;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    constexpr int kWaves = 3;
    struct Wave {
        double ky, kx, kz, phase;
    };
    std::array<Wave, kWaves> waves{};
    for (auto& wv : waves) {
        const double period = 150.0 + 250.0 * unit(rng);
        const double angle = 2.0 * std::numbers::pi * unit(rng);
        const double k = 2.0 * std::numbers::pi / period;
        wv = {k * std::sin(angle), k * std::cos(angle), k * (unit(rng) - 0.5), 2.0 * std::numbers::pi * unit(rng)};
    }
    std::size_t i = 0;
    for (int z = 0; z < d; ++z)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x, ++i) {
                double f = 0.0;
                for (const auto& wv : waves) f += std::cos(wv.ky * y + wv.kx * x + wv.kz * z + wv.phase);
                field[i] = static_cast<float>(std::exp(strength * f / kWaves));
            }
    return field;
}

struct ClassStats {
    std::vector<double> mean;
    std::vector<std::size_t> count;
};

ClassStats class_stats(std::span<const float> image, std::span<const float> labels) {
    int n_classes = 0;
    for (float l : labels) n_classes = std::max(n_classes, static_cast<int>(l) + 1);
    ClassStats s{std::vector<double>(n_classes, 0.0), std::vector<std::size_t>(n_classes, 0)};
    for (std::size_t i = 0; i < image.size(); ++i) {
        const auto c = static_cast<std::size_t>(labels[i]);
        s.mean[c] += image[i];
        ++s.count[c];
    }
    for (std::size_t c = 0; c < s.mean.size(); ++c)
        if (s.count[c] > 0) s.mean[c] /= static_cast<double>(s.count[c]);
    return s;
}

void check_aligned(const Volume& a, const Volume& b) {
    if (a.shape() != b.shape()) throw Error("volumes are not on the same voxel grid");
}

}  // namespace

std::map<Modality, std::vector<float>> default_intensity_table(std::uint64_t seed,
                                                               int n_structures) {
    std::mt19937_64 rng(derive_seed({seed, 0x7AB1Eull}));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::map<Modality, std::vector<float>> table;
    for (auto m : kMrModalities) {
        const auto b = base_levels(m);
        table[m] = {b.background, b.rim, b.tissue};
    }
    for (int i = 0; i < n_structures; ++i) {
        // Contrast polarity relative to tissue: T1 tends to invert T2, FLAIR tends to follow it.
        const double pol_t2 = unit(rng) < 0.5 ? -1.0 : 1.0;
        const std::map<Modality, double> polarity{{Modality::T2, pol_t2},
                                                  {Modality::T1, unit(rng) < 0.6 ? -pol_t2 : pol_t2},
                                                  {Modality::FLAIR, unit(rng) < 0.7 ? pol_t2 : -pol_t2}};
        const bool vis_t2 = unit(rng) < 0.55;
        const bool vis_t1 = vis_t2 ? unit(rng) < 0.5 : unit(rng) < 0.7;
        bool vis_flair = vis_t2 ? unit(rng) < 0.4 : unit(rng) < 0.35;
        const bool any = vis_t2 || vis_t1 || vis_flair;
        std::map<Modality, bool> visible{
            {Modality::T1, vis_t1 || !any}, {Modality::T2, vis_t2}, {Modality::FLAIR, vis_flair}};
        // Every modality keeps structures that only it shows, so adding a
        // modality to a fusion always reveals something new.
        if (i % 8 < 3)
            for (std::size_t k = 0; k < kMrModalities.size(); ++k)
                visible[kMrModalities[k]] = k == static_cast<std::size_t>(i % 8);
        for (auto m : kMrModalities) {
            const double mag = visible.at(m) ? 0.20 + 0.20 * unit(rng) : 0.010 + 0.015 * unit(rng);
            table[m].push_back(static_cast<float>(base_levels(m).tissue + polarity.at(m) * mag));
        }
    }
    // Class intensities must be pairwise distinct within a modality.
    for (auto& [m, row] : table) {
        for (std::size_t i = 1; i < row.size(); ++i) {
            while (std::find(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(i), row[i]) !=
                   row.begin() + static_cast<std::ptrdiff_t>(i))
                row[i] += 1e-3f;
        }
    }
    return table;
}

Phantom generate_phantom(const PhantomSpec& spec) {
    const auto [h, w, d] = spec.shape;
    if (h < 1 || w < 1 || d < 1) throw ConfigError("phantom shape components must be >= 1");
    if (spec.n_structures < 0) throw ConfigError("n_structures must be >= 0");
    if (spec.bias_field_strength < 0) throw ConfigError("bias_field_strength must be >= 0");

    const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0, cz = (d - 1) / 2.0;
    const double ay = 0.44 * h, ax = 0.40 * w, az = 1.2 * d;
    constexpr double kRimPx = 6.0;

    // Structures must fit inside the brain with their minimum radius.
    const double inner = std::min(ay, ax) - 2.0;
    if (spec.n_structures > 0 && inner < 2.0 * kMinStructureRadiusPx) {
        throw ConfigError("phantom shape " + std::to_string(h) + "x" + std::to_string(w) +
                          " is too small to place structures of radius >= " +
                          std::to_string(kMinStructureRadiusPx) + " px");
    }
    const double r_max = std::clamp(inner / 3.0, double(kMinStructureRadiusPx), 12.0);

    std::mt19937_64 rng(derive_seed({spec.seed, 0x57Cull}));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<Structure> structures;
    for (int i = 0; i < spec.n_structures; ++i) {
        Structure s{};
        s.ry = kMinStructureRadiusPx + (r_max - kMinStructureRadiusPx) * unit(rng);
        s.rx = kMinStructureRadiusPx + (r_max - kMinStructureRadiusPx) * unit(rng);
        s.rz = 2.5 + 3.5 * unit(rng);
        s.theta = std::numbers::pi * unit(rng);
        s.cz = d * unit(rng) - 0.5;
        const double sy = ay - r_max - 2.0, sx = ax - r_max - 2.0;
        double u = 0, v = 0;
        do {
            u = 2.0 * unit(rng) - 1.0;
            v = 2.0 * unit(rng) - 1.0;
        } while (u * u + v * v > 1.0);
        s.cy = cy + u * sy;
        s.cx = cx + v * sx;
        structures.push_back(s);
    }

    std::vector<float> labels(static_cast<std::size_t>(h) * w * d, float(kBackgroundClass));
    for (int z = 0; z < d; ++z) {
        const double dz = (z - cz) / az;
        const double shrink = std::sqrt(std::max(0.0, 1.0 - dz * dz));
        const double by = ay * shrink, bx = ax * shrink;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const double ny = (y - cy), nx = (x - cx);
                const double inside = (ny * ny) / (by * by) + (nx * nx) / (bx * bx);
                const double outer = (ny * ny) / ((by + kRimPx) * (by + kRimPx)) +
                                     (nx * nx) / ((bx + kRimPx) * (bx + kRimPx));
                float& l = labels[(static_cast<std::size_t>(z) * h + y) * w + x];
                if (inside <= 1.0) l = float(kTissueClass);
                else if (outer <= 1.0) l = float(kRimClass);
            }
    }
    for (std::size_t i = 0; i < structures.size(); ++i) {
        const auto& s = structures[i];
        const float cls = float(kFirstStructureClass + static_cast<int>(i));
        const double c = std::cos(s.theta), sn = std::sin(s.theta);
        const double reach = std::max(s.ry, s.rx);
        const int z0 = std::max(0, int(std::floor(s.cz - s.rz))), z1 = std::min(d - 1, int(std::ceil(s.cz + s.rz)));
        const int y0 = std::max(0, int(std::floor(s.cy - reach))), y1 = std::min(h - 1, int(std::ceil(s.cy + reach)));
        const int x0 = std::max(0, int(std::floor(s.cx - reach))), x1 = std::min(w - 1, int(std::ceil(s.cx + reach)));
        for (int z = z0; z <= z1; ++z)
            for (int y = y0; y <= y1; ++y)
                for (int x = x0; x <= x1; ++x) {
                    const double dy = y - s.cy, dx = x - s.cx, dz = (z - s.cz) / s.rz;
                    const double u = (dx * c + dy * sn) / s.rx;
                    const double v = (-dx * sn + dy * c) / s.ry;
                    if (u * u + v * v + dz * dz > 1.0) continue;
                    float& l = labels[(static_cast<std::size_t>(z) * h + y) * w + x];
                    if (l >= float(kTissueClass)) l = cls;
                }
    }

    Phantom out;
    out.class_intensity_table = spec.class_intensity_table.empty()
                                    ? default_intensity_table(spec.seed, spec.n_structures)
                                    : spec.class_intensity_table;
    const auto n_classes = static_cast<std::size_t>(kFirstStructureClass + spec.n_structures);
    for (auto m : kMrModalities) {
        auto it = out.class_intensity_table.find(m);
        if (it == out.class_intensity_table.end() || it->second.size() < n_classes)
            throw ConfigError("class intensity table must cover every class for " +
                              std::string(to_string(m)));
        const auto& row = it->second;
        auto bias = bias_field(spec.shape, spec.bias_field_strength,
                               derive_seed({spec.seed, static_cast<std::uint64_t>(m), 0xB1A5ull}));
        std::vector<float> img(labels.size());
        for (std::size_t i = 0; i < labels.size(); ++i)
            img[i] = row[static_cast<std::size_t>(labels[i])] * bias[i];
        Volume raw(spec.shape, std::move(img), m, spec.spacing_mm);
        out.renderings.emplace(m, normalize_volume(raw).volume);
    }
    out.labels = Volume(spec.shape, std::move(labels), Modality::LABEL, spec.spacing_mm);
    return out;
}

std::string combo_name(const std::vector<Modality>& combo) {
    std::string name;
    for (auto m : kMrModalities) {
        if (std::find(combo.begin(), combo.end(), m) == combo.end()) continue;
        if (!name.empty()) name += '+';
        name += to_string(m);
    }
    return name;
}

std::vector<Modality> parse_combo(const std::string& name) {
    std::vector<Modality> out;
    std::size_t start = 0;
    while (start <= name.size()) {
        auto end = name.find('+', start);
        if (end == std::string::npos) end = name.size();
        const auto tok = name.substr(start, end - start);
        Modality m;
        try {
            m = modality_from_string(tok);
        } catch (const Error&) {
            throw ConfigError("unknown modality '" + tok + "' in combo '" + name + "'");
        }
        if (std::find(kMrModalities.begin(), kMrModalities.end(), m) == kMrModalities.end())
            throw ConfigError("combo '" + name + "' may only use T1, T2, FLAIR");
        if (std::find(out.begin(), out.end(), m) == out.end()) out.push_back(m);
        start = end + 1;
    }
    if (out.empty()) throw ConfigError("empty modality combo");
    return out;
}

std::vector<std::vector<Modality>> all_modality_combos() {
    return combos_over({Modality::T1, Modality::T2, Modality::FLAIR});
}

std::vector<std::vector<Modality>> combos_over(const std::vector<Modality>& available) {
    // Canonical order: singles, then pairs, then the triple.
    std::vector<Modality> avail;
    for (auto m : kMrModalities)
        if (std::find(available.begin(), available.end(), m) != available.end()) avail.push_back(m);
    std::vector<std::vector<Modality>> out;
    const int n = static_cast<int>(avail.size());
    for (int size = 1; size <= n; ++size) {
        std::vector<bool> pick(n, false);
        std::fill(pick.begin(), pick.begin() + size, true);
        do {
            std::vector<Modality> c;
            for (int i = 0; i < n; ++i)
                if (pick[i]) c.push_back(avail[i]);
            out.push_back(c);
        } while (std::prev_permutation(pick.begin(), pick.end()));
    }
    return out;
}

Volume fuse_renderings(const Renderings& renderings, const Volume& labels,
                       const std::vector<Modality>& modalities) {
    if (modalities.empty()) throw ConfigError("synthesis needs at least one modality");
    std::vector<const Volume*> sel;
    for (auto m : modalities) {
        auto it = renderings.find(m);
        if (it == renderings.end())
            throw ConfigError("modality " + std::string(to_string(m)) + " is not rendered");
        check_aligned(it->second, labels);
        sel.push_back(&it->second);
    }
    // Per-class weights are one-hot on the modality with the strongest
    // contrast against its own tissue level, and intensities are taken
    // relative to that level, so adding a modality never weakens a class.
    // Classes without contrast anywhere (tissue itself) average uniformly.
    const auto lab = labels.voxels();
    std::vector<std::vector<double>> contrast;
    std::vector<double> tissue;
    for (const auto* v : sel) {
        auto st = class_stats(v->voxels(), lab);
        const double t = st.mean.size() > std::size_t(kTissueClass) ? st.mean[kTissueClass] : 0.0;
        for (auto& m : st.mean) m -= t;
        tissue.push_back(t);
        contrast.push_back(std::move(st.mean));
    }
    const double tissue_mean = std::accumulate(tissue.begin(), tissue.end(), 0.0) / double(tissue.size());
    const std::size_t n_classes = contrast.front().size();
    std::vector<int> winner(n_classes, -1);
    for (std::size_t c = 0; c < n_classes; ++c) {
        double best = 1e-9;
        for (std::size_t k = 0; k < sel.size(); ++k)
            if (std::abs(contrast[k][c]) > best) {
                best = std::abs(contrast[k][c]);
                winner[c] = static_cast<int>(k);
            }
    }
    std::vector<float> out(lab.size());
    for (std::size_t i = 0; i < lab.size(); ++i) {
        const int k = winner[static_cast<std::size_t>(lab[i])];
        double v = 0.0;
        if (k >= 0) {
            v = sel[k]->voxels()[i] - tissue[k] + tissue_mean;
        } else {
            for (const auto* s : sel) v += s->voxels()[i];
            v /= double(sel.size());
        }
        out[i] = static_cast<float>(v);
    }
    return Volume(labels.shape(), std::move(out), Modality::SynUS, labels.spacing_mm());
}

MonotoneWarp::MonotoneWarp(std::uint64_t seed, int n_segments) {
    std::mt19937_64 rng(derive_seed({seed, 0x3A4Bull}));
    std::uniform_real_distribution<double> inc(0.3, 1.7);
    std::vector<double> steps(n_segments);
    double total = 0.0;
    for (auto& s : steps) total += (s = inc(rng));
    knots_in_.push_back(-1.0f);
    knots_out_.push_back(-1.0f);
    double acc = -1.0;
    for (int i = 0; i < n_segments; ++i) {
        acc += 2.0 * steps[i] / total;
        knots_in_.push_back(static_cast<float>(-1.0 + 2.0 * (i + 1) / n_segments));
        knots_out_.push_back(static_cast<float>(acc));
    }
    knots_in_.back() = 1.0f;
    knots_out_.back() = 1.0f;
}

float MonotoneWarp::operator()(float v) const {
    if (v <= knots_in_.front()) return knots_out_.front() + (v - knots_in_.front());
    if (v >= knots_in_.back()) return knots_out_.back() + (v - knots_in_.back());
    auto it = std::upper_bound(knots_in_.begin(), knots_in_.end(), v);
    const auto i = static_cast<std::size_t>(it - knots_in_.begin());
    const float t = (v - knots_in_[i - 1]) / (knots_in_[i] - knots_in_[i - 1]);
    return knots_out_[i - 1] + t * (knots_out_[i] - knots_out_[i - 1]);
}

Volume synthesize_us(const Renderings& renderings, const Volume& labels,
                     const SynthesisConfig& cfg) {
    if (cfg.speckle_strength < 0 || cfg.blur_sigma_px < 0)
        throw ConfigError("speckle_strength and blur_sigma_px must be >= 0");
    if (cfg.dropout_rate < 0 || cfg.dropout_rate > 1) throw ConfigError("dropout_rate must lie in [0, 1]");

    // (1) fusion
    Volume fused = fuse_renderings(renderings, labels, cfg.modalities);
    std::vector<float> img(fused.voxels().begin(), fused.voxels().end());
    const auto lab = labels.voxels();

    // (2) monotone intensity warp
    if (cfg.intensity_warp_seed != 0) {
        MonotoneWarp warp(cfg.intensity_warp_seed);
        for (auto& v : img) v = warp(v);
    }

    // (3) structure-contrast dropout
    if (cfg.dropout_rate > 0) {
        auto st = class_stats(img, lab);
        std::vector<int> present;
        for (std::size_t c = kFirstStructureClass; c < st.count.size(); ++c)
            if (st.count[c] > 0) present.push_back(static_cast<int>(c));
        const auto n_drop = static_cast<std::size_t>(std::lround(cfg.dropout_rate * present.size()));
        std::mt19937_64 rng(derive_seed({cfg.sampling_seed, 0xD809ull}));
        std::shuffle(present.begin(), present.end(), rng);
        std::vector<double> shift(st.mean.size(), 0.0);
        for (std::size_t i = 0; i < n_drop; ++i) {
            const auto c = static_cast<std::size_t>(present[i]);
            shift[c] = 0.9 * (st.mean[c] - st.mean[kTissueClass]);
        }
        for (std::size_t i = 0; i < img.size(); ++i)
            img[i] = static_cast<float>(img[i] - shift[static_cast<std::size_t>(lab[i])]);
    }

    // (4) multiplicative Gamma speckle, mean 1 and variance speckle_strength^2
    if (cfg.speckle_strength > 0) {
        const double k = 1.0 / (cfg.speckle_strength * cfg.speckle_strength);
        std::mt19937_64 rng(derive_seed({cfg.sampling_seed, 0x5BECull}));
        std::gamma_distribution<double> gamma(k, 1.0 / k);
        for (auto& v : img) {
            const double g = std::min(gamma(rng), 3.0);
            const double u = std::clamp((v + 1.0) * 0.5, 0.0, 1.0);
            v = static_cast<float>(2.0 * std::min(u * g, 1.0) - 1.0);
        }
    }

    Volume speckled(labels.shape(), std::move(img), Modality::SynUS, labels.spacing_mm());
    // (5) in-plane blur, (6) renormalization
    if (cfg.blur_sigma_px > 0) speckled = gaussian_blur_slices(speckled, cfg.blur_sigma_px);
    return normalize_volume(speckled).volume.with_modality(Modality::SynUS);
}

SynthesisConfig variant_config(const std::vector<Modality>& combo, int j,
                               const VariantSetOptions& opts) {
    if (opts.presets.empty()) throw ConfigError("at least one sampling preset is required");
    const auto& preset = opts.presets[static_cast<std::size_t>(j) % opts.presets.size()];
    SynthesisConfig cfg;
    cfg.modalities = parse_combo(combo_name(combo));
    cfg.sampling_seed = opts.seed_base + static_cast<std::uint64_t>(j);
    cfg.speckle_strength = preset.speckle_strength;
    cfg.blur_sigma_px = preset.blur_sigma_px;
    cfg.dropout_rate = opts.dropout_rate;
    cfg.intensity_warp_seed =
        derive_seed({cfg.sampling_seed, fnv1a(combo_name(combo))}) | 1ull;
    return cfg;
}

VariantSet generate_variant_set(const Renderings& renderings, const Volume& labels,
                                const std::vector<std::vector<Modality>>& combos,
                                const VariantSetOptions& opts) {
    if (combos.empty()) throw ConfigError("variant set needs at least one modality combo");
    if (opts.samples_per_combo < 1) throw ConfigError("samples_per_combo must be >= 1");
    auto ref = renderings.find(Modality::T2);
    if (ref == renderings.end()) throw ConfigError("the T2 rendering is required as reference");
    for (const auto& combo : combos) {
        if (combo.empty()) throw ConfigError("empty modality combo");
        for (auto m : combo)
            if (!renderings.contains(m))
                throw ConfigError("combo " + combo_name(combo) + " references unavailable modality " +
                                  std::string(to_string(m)));
    }
    VariantSet set;
    set.reference = ref->second;
    for (const auto& combo : combos) {
        for (int j = 0; j < opts.samples_per_combo; ++j) {
            auto cfg = variant_config(combo, j, opts);
            Variant v{cfg, combo_name(combo) + "_" + std::to_string(j), synthesize_us(renderings, labels, cfg)};
            spdlog::debug("synthesized variant {}", v.name);
            set.variants.push_back(std::move(v));
        }
    }
    return set;
}

namespace {

nlohmann::ordered_json config_to_json(const SynthesisConfig& c) {
    nlohmann::ordered_json j;
    std::vector<std::string> mods;
    for (auto m : c.modalities) mods.emplace_back(to_string(m));
    j["modalities"] = mods;
    j["sampling_seed"] = c.sampling_seed;
    j["speckle_strength"] = c.speckle_strength;
    j["blur_sigma_px"] = c.blur_sigma_px;
    j["dropout_rate"] = c.dropout_rate;
    j["intensity_warp_seed"] = c.intensity_warp_seed;
    return j;
}

SynthesisConfig config_from_json(const nlohmann::json& j) {
    SynthesisConfig c;
    for (const auto& m : j.at("modalities")) c.modalities.push_back(modality_from_string(m.get<std::string>()));
    c.sampling_seed = j.at("sampling_seed").get<std::uint64_t>();
    c.speckle_strength = j.at("speckle_strength").get<double>();
    c.blur_sigma_px = j.at("blur_sigma_px").get<double>();
    c.dropout_rate = j.at("dropout_rate").get<double>();
    c.intensity_warp_seed = j.at("intensity_warp_seed").get<std::uint64_t>();
    return c;
}

}  // namespace

void save_variant_set(const VariantSet& set, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "variants");
    save_volume(set.reference, dir / "reference.mvol");
    nlohmann::ordered_json manifest;
    manifest["p"] = set.p();
    manifest["reference"] = "reference.mvol";
    auto& arr = manifest["variants"] = nlohmann::ordered_json::array();
    for (const auto& v : set.variants) {
        const auto file = fs::path("variants") / (v.name + ".mvol");
        save_volume(v.volume, dir / file);
        nlohmann::ordered_json e;
        e["name"] = v.name;
        e["file"] = file.generic_string();
        e["config"] = config_to_json(v.config);
        arr.push_back(e);
    }
    std::ofstream out(dir / "manifest.json");
    out << manifest.dump(2) << '\n';
}

VariantSet load_variant_set(const std::filesystem::path& dir) {
    const auto manifest_path = dir / "manifest.json";
    std::ifstream in(manifest_path);
    if (!in) throw MissingArtifact("missing variant manifest " + manifest_path.string());
    try {
        const auto manifest = nlohmann::json::parse(in);
        VariantSet set;
        set.reference = load_volume(dir / manifest.at("reference").get<std::string>());
        for (const auto& e : manifest.at("variants")) {
            Variant v{config_from_json(e.at("config")), e.at("name").get<std::string>(),
                      load_volume(dir / e.at("file").get<std::string>())};
            check_aligned(v.volume, set.reference);
            set.variants.push_back(std::move(v));
        }
        if (set.p() != manifest.at("p").get<std::size_t>())
            throw FormatError("variant count does not match manifest p");
        return set;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(manifest_path.string() + ": " + e.what());
    }
}

int count_nominal_structures(const Volume& image, const Volume& labels, double min_contrast) {
    check_aligned(image, labels);
    auto st = class_stats(image.voxels(), labels.voxels());
    if (st.mean.size() <= std::size_t(kTissueClass)) return 0;
    int n = 0;
    for (std::size_t c = kFirstStructureClass; c < st.mean.size(); ++c)
        if (st.count[c] > 0 && std::abs(st.mean[c] - st.mean[kTissueClass]) >= min_contrast) ++n;
    return n;
}

}  // namespace xmk
