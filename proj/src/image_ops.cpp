#include "xmk/image_ops.hpp"

#include <cmath>
#include <vector>

namespace xmk {

namespace {

int mirror(int i, int n) {
    if (n == 1) return 0;
    while (i < 0 || i >= n) {
        if (i < 0) i = -i - 1;
        if (i >= n) i = 2 * n - i - 1;
    }
    return i;
}

std::vector<double> gaussian_kernel(double sigma) {
    const int r = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> k(2 * r + 1);
    double sum = 0.0;
    for (int i = -r; i <= r; ++i) sum += (k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma)));
    for (auto& v : k) v /= sum;
    return k;
}

}  // namespace

Image gaussian_blur(const Image& img, double sigma) {
    if (sigma <= 0.0) return img;
    const auto k = gaussian_kernel(sigma);
    const int r = static_cast<int>(k.size() / 2);
    const int h = img.height, w = img.width;
    Image tmp(h, w), out(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double s = 0.0;
            for (int i = -r; i <= r; ++i) s += k[i + r] * img.at(y, mirror(x + i, w));
            tmp.at(y, x) = static_cast<float>(s);
        }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double s = 0.0;
            for (int i = -r; i <= r; ++i) s += k[i + r] * tmp.at(mirror(y + i, h), x);
            out.at(y, x) = static_cast<float>(s);
        }
    return out;
}

Volume gaussian_blur_slices(const Volume& v, double sigma) {
    std::vector<Image> slices;
    slices.reserve(v.depth());
    for (int z = 0; z < v.depth(); ++z) slices.push_back(gaussian_blur(get_slice(v, z).image, sigma));
    return Volume::from_slices(slices, v.modality(), v.spacing_mm());
}

Image shift_image(const Image& img, int dy, int dx, float fill) {
    Image out(img.height, img.width, fill);
    for (int y = 0; y < img.height; ++y) {
        const int sy = y - dy;
        if (sy < 0 || sy >= img.height) continue;
        for (int x = 0; x < img.width; ++x) {
            const int sx = x - dx;
            if (sx < 0 || sx >= img.width) continue;
            out.at(y, x) = img.at(sy, sx);
        }
    }
    return out;
}

}  // namespace xmk
