#pragma once

#include "xmk/imaging.hpp"

namespace xmk {

/// Separable Gaussian blur, kernel truncated at 3 sigma, mirrored borders.
Image gaussian_blur(const Image& img, double sigma);

/// Applies gaussian_blur to every slice independently.
Volume gaussian_blur_slices(const Volume& v, double sigma);

/// Integer translation; uncovered pixels take `fill`.
Image shift_image(const Image& img, int dy, int dx, float fill);

}  // namespace xmk
