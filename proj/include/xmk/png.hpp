#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "xmk/imaging.hpp"

namespace xmk {

/// 8-bit RGB canvas for diagnostic plots.
struct RgbImage {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel

    RgbImage() = default;
    RgbImage(int h, int w, std::uint8_t fill = 0) : height(h), width(w), rgb(std::size_t(h) * w * 3, fill) {}

    void set(int y, int x, std::uint8_t r, std::uint8_t g, std::uint8_t b);
    void line(double y0, double x0, double y1, double x1, std::uint8_t r, std::uint8_t g, std::uint8_t b);
    void dot(double y, double x, int radius, std::uint8_t r, std::uint8_t g, std::uint8_t b);
    /// Pastes a grayscale image mapped linearly from [lo, hi].
    void blit_gray(const Image& img, int oy, int ox, float lo = -1.0f, float hi = 1.0f);
};

void write_png(const RgbImage& img, const std::filesystem::path& path);

}  // namespace xmk
