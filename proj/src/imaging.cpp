#include "xmk/imaging.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include <nlohmann/json.hpp>

#include "xmk/error.hpp"

namespace xmk {

namespace {

constexpr std::string_view kMagic = "MVOL1";

std::array<float, 2> observed_range(std::span<const float> v) {
    if (v.empty()) return {0.0f, 0.0f};
    auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    return {*lo, *hi};
}

}  // namespace

std::string_view to_string(Modality m) {
    switch (m) {
        case Modality::T1: return "T1";
        case Modality::T2: return "T2";
        case Modality::FLAIR: return "FLAIR";
        case Modality::US: return "US";
        case Modality::SynUS: return "SynUS";
        case Modality::LABEL: return "LABEL";
    }
    return "?";
}

Modality modality_from_string(std::string_view s) {
    for (auto m : {Modality::T1, Modality::T2, Modality::FLAIR, Modality::US, Modality::SynUS,
                   Modality::LABEL}) {
        if (to_string(m) == s) return m;
    }
    throw FormatError("unknown modality tag '" + std::string(s) + "'");
}

Image::Image(int h, int w, float fill)
    : height(h), width(w), pixels(static_cast<std::size_t>(h) * w, fill) {}

Volume::Volume(Shape shape, std::vector<float> voxels, Modality modality, Spacing spacing_mm)
    : shape_(shape), spacing_(spacing_mm), modality_(modality), voxels_(std::move(voxels)) {
    for (int s : shape_) {
        if (s < 1) throw Error("volume dimensions must be >= 1");
    }
    for (double s : spacing_) {
        if (!(s > 0.0) || !std::isfinite(s)) throw Error("volume spacing must be positive");
    }
    const auto expected = static_cast<std::size_t>(shape_[0]) * shape_[1] * shape_[2];
    if (voxels_.size() != expected) {
        throw Error("voxel count " + std::to_string(voxels_.size()) + " does not match shape (" +
                    std::to_string(expected) + ")");
    }
    for (float v : voxels_) {
        if (!std::isfinite(v)) throw Error("volume contains non-finite voxel values");
    }
    range_ = observed_range(voxels_);
}

Volume Volume::from_slices(std::span<const Image> slices, Modality modality, Spacing spacing_mm) {
    if (slices.empty()) throw Error("cannot build a volume from zero slices");
    const int h = slices.front().height;
    const int w = slices.front().width;
    std::vector<float> voxels;
    voxels.reserve(static_cast<std::size_t>(h) * w * slices.size());
    for (const auto& s : slices) {
        if (s.height != h || s.width != w) throw Error("slices differ in size");
        voxels.insert(voxels.end(), s.pixels.begin(), s.pixels.end());
    }
    return Volume({h, w, static_cast<int>(slices.size())}, std::move(voxels), modality,
                  spacing_mm);
}

std::span<const float> Volume::slice_span(int z) const {
    const auto n = static_cast<std::size_t>(shape_[0]) * shape_[1];
    return std::span<const float>(voxels_).subspan(static_cast<std::size_t>(z) * n, n);
}

Volume Volume::with_modality(Modality m) const {
    Volume out = *this;
    out.modality_ = m;
    return out;
}

Volume Volume::with_intensity_range(std::array<float, 2> range) const {
    if (!(range[0] <= range[1])) throw Error("intensity range must satisfy lo <= hi");
    Volume out = *this;
    out.range_ = range;
    return out;
}

NormalizeResult normalize_volume(const Volume& v) {
    auto [lo, hi] = observed_range(v.voxels());
    std::vector<float> out(v.voxels().size(), 0.0f);
    if (!(hi > lo)) {
        Volume z(v.shape(), std::move(out), v.modality(), v.spacing_mm());
        return {z.with_intensity_range({-1.0f, 1.0f}), true};
    }
    const double scale = 2.0 / (static_cast<double>(hi) - lo);
    auto src = v.voxels();
    for (std::size_t i = 0; i < src.size(); ++i) {
        const double t = (static_cast<double>(src[i]) - lo) * scale - 1.0;
        out[i] = static_cast<float>(std::clamp(t, -1.0, 1.0));
    }
    Volume n(v.shape(), std::move(out), v.modality(), v.spacing_mm());
    return {n.with_intensity_range({-1.0f, 1.0f}), false};
}

Volume pad_crop_inplane(const Volume& v, std::array<int, 2> target) {
    const int th = target[0], tw = target[1];
    if (th < 1 || tw < 1) throw Error("pad/crop target must be >= 1");
    const int h = v.height(), w = v.width(), d = v.depth();
    // Offset of the source origin inside the target canvas (negative when cropping).
    const int oy = th >= h ? (th - h) / 2 : -((h - th) / 2);
    const int ox = tw >= w ? (tw - w) / 2 : -((w - tw) / 2);
    std::vector<float> out(static_cast<std::size_t>(th) * tw * d, -1.0f);
    for (int z = 0; z < d; ++z) {
        for (int y = 0; y < th; ++y) {
            const int sy = y - oy;
            if (sy < 0 || sy >= h) continue;
            for (int x = 0; x < tw; ++x) {
                const int sx = x - ox;
                if (sx < 0 || sx >= w) continue;
                out[(static_cast<std::size_t>(z) * th + y) * tw + x] = v.at(sy, sx, z);
            }
        }
    }
    return Volume({th, tw, d}, std::move(out), v.modality(), v.spacing_mm());
}

Slice get_slice(const Volume& v, int k, std::string volume_id) {
    if (k < 0 || k >= v.depth()) {
        throw Error("slice index " + std::to_string(k) + " out of range [0, " +
                    std::to_string(v.depth()) + ")");
    }
    Slice s;
    s.image = Image(v.height(), v.width());
    auto src = v.slice_span(k);
    std::copy(src.begin(), src.end(), s.image.pixels.begin());
    s.volume_id = std::move(volume_id);
    s.slice_index = k;
    return s;
}

void write_f32le(std::ostream& os, std::span<const float> values) {
    std::vector<char> buf(values.size() * 4);
    for (std::size_t i = 0; i < values.size(); ++i) {
        auto bits = std::bit_cast<std::uint32_t>(values[i]);
        for (int b = 0; b < 4; ++b) buf[i * 4 + b] = static_cast<char>((bits >> (8 * b)) & 0xFFu);
    }
    os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

void read_f32le(std::istream& is, std::span<float> values) {
    std::vector<unsigned char> buf(values.size() * 4);
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (static_cast<std::size_t>(is.gcount()) != buf.size()) {
        throw FormatError("payload truncated: expected " + std::to_string(values.size()) +
                          " float32 values, got " + std::to_string(is.gcount() / 4));
    }
    for (std::size_t i = 0; i < values.size(); ++i) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(buf[i * 4 + b]) << (8 * b);
        values[i] = std::bit_cast<float>(bits);
    }
}

Volume load_volume(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifact("cannot open volume file " + path.string());
    try {
        std::string header_line;
        if (!std::getline(in, header_line)) throw FormatError("empty file");
        const auto header = nlohmann::json::parse(header_line);
        if (header.at("magic").get<std::string>() != kMagic) throw FormatError("not an MVOL1 file");
        if (header.at("dtype").get<std::string>() != "f32le") throw FormatError("unsupported dtype");
        if (header.at("order").get<std::string>() != "row-major-slice-major")
            throw FormatError("unsupported voxel order");
        auto shape = header.at("shape").get<std::array<int, 3>>();
        auto spacing = header.at("spacing_mm").get<std::array<double, 3>>();
        auto modality = modality_from_string(header.at("modality").get<std::string>());
        for (int s : shape) {
            if (s < 1) throw FormatError("shape components must be >= 1");
        }
        std::vector<float> voxels(static_cast<std::size_t>(shape[0]) * shape[1] * shape[2]);
        read_f32le(in, voxels);
        if (in.peek() != std::char_traits<char>::eof())
            throw FormatError("payload longer than header shape");
        for (float v : voxels) {
            if (!std::isfinite(v)) throw FormatError("non-finite voxel value");
        }
        Volume vol(shape, std::move(voxels), modality, spacing);
        if (header.contains("intensity_range"))
            vol = vol.with_intensity_range(header["intensity_range"].get<std::array<float, 2>>());
        return vol;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": bad MVOL header: " + e.what());
    } catch (const Error& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

void save_volume(const Volume& v, const std::filesystem::path& path) {
    nlohmann::ordered_json header;
    header["magic"] = kMagic;
    header["shape"] = v.shape();
    header["spacing_mm"] = v.spacing_mm();
    header["dtype"] = "f32le";
    header["order"] = "row-major-slice-major";
    header["modality"] = to_string(v.modality());
    header["intensity_range"] = v.intensity_range();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write volume file " + path.string());
    out << header.dump() << '\n';
    write_f32le(out, v.voxels());
    if (!out) throw Error("failed writing volume file " + path.string());
}

}  // namespace xmk
