#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace xmk {

enum class Modality { T1, T2, FLAIR, US, SynUS, LABEL };

std::string_view to_string(Modality m);
Modality modality_from_string(std::string_view s);

/// Dense 2D float image, row-major.
struct Image {
    int height = 0;
    int width = 0;
    std::vector<float> pixels;

    Image() = default;
    Image(int h, int w, float fill = 0.0f);

    float at(int y, int x) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
    float& at(int y, int x) { return pixels[static_cast<std::size_t>(y) * width + x]; }
    std::size_t size() const { return pixels.size(); }

    bool operator==(const Image&) const = default;
};

/// One in-plane slice of a volume.
struct Slice {
    Image image;
    std::string volume_id;
    int slice_index = 0;

    int height() const { return image.height; }
    int width() const { return image.width; }
};

/// 3D scalar grid stored slice-major, row-major within each slice:
/// voxel (y, x, z) lives at z*H*W + y*W + x.
///
/// A Volume is immutable once built; every operation returns a new one.
class Volume {
public:
    using Shape = std::array<int, 3>;  // (H, W, D)
    using Spacing = std::array<double, 3>;

    Volume() = default;

    /// Validates shape, spacing and that every voxel is finite.
    Volume(Shape shape, std::vector<float> voxels, Modality modality = Modality::T2,
           Spacing spacing_mm = {0.5, 0.5, 0.5});

    /// Assembles a volume from equally sized slices.
    static Volume from_slices(std::span<const Image> slices, Modality modality,
                              Spacing spacing_mm = {0.5, 0.5, 0.5});

    int height() const { return shape_[0]; }
    int width() const { return shape_[1]; }
    int depth() const { return shape_[2]; }
    const Shape& shape() const { return shape_; }
    const Spacing& spacing_mm() const { return spacing_; }
    Modality modality() const { return modality_; }
    /// Declared intensity range; defaults to the observed min/max.
    std::array<float, 2> intensity_range() const { return range_; }

    std::span<const float> voxels() const { return voxels_; }
    std::span<const float> slice_span(int z) const;
    float at(int y, int x, int z) const {
        return voxels_[(static_cast<std::size_t>(z) * shape_[0] + y) * shape_[1] + x];
    }

    Volume with_modality(Modality m) const;
    Volume with_intensity_range(std::array<float, 2> range) const;

    bool operator==(const Volume&) const = default;

private:
    Shape shape_{0, 0, 0};
    Spacing spacing_{0.5, 0.5, 0.5};
    Modality modality_ = Modality::T2;
    std::array<float, 2> range_{0.0f, 0.0f};
    std::vector<float> voxels_;
};

struct NormalizeResult {
    Volume volume;
    bool degenerate = false;  // input was constant; output is all zeros
};

/// Linear min-max map onto [-1, 1]. A constant volume maps to zeros and sets
/// `degenerate`.
NormalizeResult normalize_volume(const Volume& v);

/// Centers every slice in a (target_h, target_w) canvas. Padding uses -1 and
/// oversize inputs are cropped symmetrically (extra odd pixel dropped at the
/// high end).
Volume pad_crop_inplane(const Volume& v, std::array<int, 2> target);

Slice get_slice(const Volume& v, int k, std::string volume_id = {});

Volume load_volume(const std::filesystem::path& path);
void save_volume(const Volume& v, const std::filesystem::path& path);

/// Little-endian float32 helpers shared by every binary payload.
void write_f32le(std::ostream& os, std::span<const float> values);
void read_f32le(std::istream& is, std::span<float> values);

}  // namespace xmk
