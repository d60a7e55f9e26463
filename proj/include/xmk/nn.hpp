#pragma once

// Convolutional descriptor network with hand-written backpropagation.
//
// Activations use a channel-major batch layout [C][N][H][W] so that every
// convolution is a single GEMM over im2col columns:
//   Y (Cout x N*Ho*Wo) = W (Cout x Cin*k*k) * cols (Cin*k*k x N*Ho*Wo) + b.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "xmk/error.hpp"

namespace xmk {

/// Network shape: 3x3 conv stages (bias + ReLU) followed by one conv whose
/// kernel covers the remaining spatial extent, producing descriptor_dim
/// values that are L2-normalized.
struct ArchSpec {
    int patch_size = 64;
    std::vector<int> widths{32, 32, 64, 64, 128, 128};
    std::vector<int> strides{1, 2, 1, 2, 1, 2};
    int descriptor_dim = 128;

    void validate() const {
        if (patch_size < 1) throw ConfigError("patch_size must be >= 1");
        if (widths.empty() || widths.size() != strides.size())
            throw ConfigError("widths and strides must be non-empty and of equal length");
        for (int w : widths)
            if (w < 1) throw ConfigError("layer widths must be >= 1");
        int s = patch_size;
        for (int st : strides) {
            if (st != 1 && st != 2) throw ConfigError("strides must be 1 or 2");
            s = (s + 2 - 3) / st + 1;
        }
        if (s < 1) throw ConfigError("patch too small for the stride schedule");
        if (descriptor_dim < 1) throw ConfigError("descriptor_dim must be >= 1");
    }

    bool operator==(const ArchSpec&) const = default;
};

struct ConvGeom {
    int cin, cout, k, stride, pad;
    int hin, win, hout, wout;
    bool relu;
    std::size_t w_offset, b_offset;

    std::size_t fan_in() const { return static_cast<std::size_t>(cin) * k * k; }
    std::size_t in_plane() const { return static_cast<std::size_t>(hin) * win; }
    std::size_t out_plane() const { return static_cast<std::size_t>(hout) * wout; }
};

inline std::vector<ConvGeom> build_geometry(const ArchSpec& arch) {
    arch.validate();
    std::vector<ConvGeom> g;
    int c = 1, s = arch.patch_size;
    std::size_t off = 0;
    auto add = [&](int cout, int k, int stride, int pad, bool relu) {
        ConvGeom l{c, cout, k, stride, pad, s, s, (s + 2 * pad - k) / stride + 1,
                   (s + 2 * pad - k) / stride + 1, relu, 0, 0};
        l.w_offset = off;
        off += static_cast<std::size_t>(cout) * l.fan_in();
        l.b_offset = off;
        off += static_cast<std::size_t>(cout);
        g.push_back(l);
        c = cout;
        s = l.hout;
    };
    for (std::size_t i = 0; i < arch.widths.size(); ++i) add(arch.widths[i], 3, arch.strides[i], 1, true);
    add(arch.descriptor_dim, s, 1, 0, false);
    return g;
}

inline std::size_t parameter_count(const std::vector<ConvGeom>& g) {
    return g.empty() ? 0 : g.back().b_offset + static_cast<std::size_t>(g.back().cout);
}

template <class T>
class DescriptorNetT {
public:
    using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using MapMat = Eigen::Map<Mat, 0, Eigen::OuterStride<>>;
    using ConstMapMat = Eigen::Map<const Mat, 0, Eigen::OuterStride<>>;
    // Vectorized reductions pick their unaligned prologue from the address,
    // so buffers are over-aligned to keep results bit-identical across runs.
    using Buffer = std::vector<T, Eigen::aligned_allocator<T>>;

    DescriptorNetT() : DescriptorNetT(ArchSpec{}) {}
    explicit DescriptorNetT(const ArchSpec& arch)
        : arch_(arch), geom_(build_geometry(arch)), params_(parameter_count(geom_), T(0)) {}

    const ArchSpec& arch() const { return arch_; }
    const std::vector<ConvGeom>& geometry() const { return geom_; }
    int descriptor_dim() const { return arch_.descriptor_dim; }
    std::size_t input_size() const { return static_cast<std::size_t>(arch_.patch_size) * arch_.patch_size; }

    std::span<T> parameters() { return params_; }
    std::span<const T> parameters() const { return params_; }

    /// He-normal weights for ReLU stages, unit-variance scaling for the last
    /// layer, zero biases.
    void init(std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        for (const auto& l : geom_) {
            std::normal_distribution<double> nd(0.0, std::sqrt((l.relu ? 2.0 : 1.0) / double(l.fan_in())));
            const auto n = static_cast<std::size_t>(l.cout) * l.fan_in();
            for (std::size_t i = 0; i < n; ++i) params_[l.w_offset + i] = static_cast<T>(nd(rng));
            std::fill_n(params_.begin() + l.b_offset, l.cout, T(0));
        }
    }

    /// Unit-norm descriptors for `n` patches stored back to back. Output is
    /// descriptor_dim x n, one column per patch. Safe for concurrent callers.
    Mat infer(std::span<const T> patches, int n) const {
        std::vector<Buffer> acts;
        Buffer norms;
        return run(patches, n, acts, norms, false);
    }

    /// Which ReLU outputs are positive, layer by layer, for these patches.
    std::vector<bool> relu_mask(std::span<const T> patches, int n) const {
        std::vector<Buffer> acts;
        Buffer norms;
        run(patches, n, acts, norms, true);
        std::vector<bool> mask;
        for (std::size_t li = 0; li < geom_.size(); ++li)
            if (geom_[li].relu)
                for (T v : acts[li + 1]) mask.push_back(v > T(0));
        return mask;
    }

    /// Same as infer() but retains the activations needed by backward().
    Mat forward(std::span<const T> patches, int n) {
        out_ = run(patches, n, acts_, norms_, true);
        n_ = n;
        return out_;
    }

    /// Accumulates dLoss/dparams into `grad` given dLoss/d(descriptors)
    /// (descriptor_dim x n) for the most recent forward().
    void backward(const Mat& d_desc, std::span<T> grad) {
        if (acts_.size() != geom_.size() + 1 || out_.cols() != n_)
            throw Error("backward called without a retained forward pass");
        if (grad.size() != params_.size()) throw Error("gradient buffer has the wrong size");
        const int dim = arch_.descriptor_dim;
        // Through the L2 normalization: dz = (g - d (d.g)) / |z|.
        Buffer dy(static_cast<std::size_t>(dim) * n_);
        Eigen::Map<Mat> dz(dy.data(), dim, n_);
        for (int j = 0; j < n_; ++j) {
            const T dot = out_.col(j).dot(d_desc.col(j));
            dz.col(j) = (d_desc.col(j) - out_.col(j) * dot) / norms_[j];
        }
        Buffer dx;
        for (std::size_t li = geom_.size(); li-- > 0;) {
            const auto& l = geom_[li];
            if (l.relu) {
                const auto& y = acts_[li + 1];
                for (std::size_t i = 0; i < dy.size(); ++i)
                    if (!(y[i] > T(0))) dy[i] = T(0);
            }
            conv_backward(l, acts_[li], dy, li > 0 ? &dx : nullptr, grad, n_);
            dy.swap(dx);
        }
    }

    /// Drops the activations retained by forward().
    void release() {
        acts_.clear();
        out_.resize(0, 0);
        n_ = 0;
    }

private:
    static constexpr int kChunk = 32;

    Mat run(std::span<const T> patches, int n, std::vector<Buffer>& acts, Buffer& norms,
            bool keep) const {
        if (n < 0 || patches.size() != input_size() * static_cast<std::size_t>(n))
            throw Error("forward: expected " + std::to_string(n) + " patches of " +
                        std::to_string(input_size()) + " values");
        acts.assign(geom_.size() + 1, {});
        acts[0].assign(patches.begin(), patches.end());
        for (std::size_t li = 0; li < geom_.size(); ++li) {
            conv_forward(geom_[li], acts[li], acts[li + 1], n);
            if (!keep) Buffer().swap(acts[li]);
        }
        const int dim = arch_.descriptor_dim;
        Eigen::Map<const Mat> z(acts.back().data(), dim, n);
        norms.resize(n);
        Mat d(dim, n);
        for (int j = 0; j < n; ++j) {
            const T nrm = z.col(j).norm();
            if (nrm > T(0)) {
                norms[j] = nrm;
                d.col(j) = z.col(j) / nrm;
            } else {  // all-zero pre-activation: fall back to the first axis
                norms[j] = T(1);
                d.col(j).setZero();
                d(0, j) = T(1);
            }
        }
        return d;
    }

    // Output columns [lo, hi) whose input column ox*stride - pad + kx is inside
    // the image.
    static std::pair<int, int> valid_range(int kx, const ConvGeom& l) {
        int lo = 0;
        while (lo < l.wout && lo * l.stride - l.pad + kx < 0) ++lo;
        int hi = l.wout;
        while (hi > lo && (hi - 1) * l.stride - l.pad + kx >= l.win) --hi;
        return {lo, hi};
    }

    void im2col(const ConvGeom& l, const Buffer& x, int n_total, int n0, int nc, Mat& cols) const {
        const std::size_t hw_out = l.out_plane();
        cols.resize(static_cast<Eigen::Index>(l.fan_in()), static_cast<Eigen::Index>(nc * hw_out));
        for (int c = 0; c < l.cin; ++c)
            for (int ky = 0; ky < l.k; ++ky)
                for (int kx = 0; kx < l.k; ++kx) {
                    const auto [lo, hi] = valid_range(kx, l);
                    const int shift = kx - l.pad;
                    T* row = cols.data() + ((static_cast<std::size_t>(c) * l.k + ky) * l.k + kx) * nc * hw_out;
                    for (int n = 0; n < nc; ++n) {
                        const T* src = x.data() + (static_cast<std::size_t>(c) * n_total + n0 + n) * l.in_plane();
                        T* dst = row + n * hw_out;
                        for (int oy = 0; oy < l.hout; ++oy) {
                            const int iy = oy * l.stride - l.pad + ky;
                            T* drow = dst + static_cast<std::size_t>(oy) * l.wout;
                            if (iy < 0 || iy >= l.hin) {
                                std::fill_n(drow, l.wout, T(0));
                                continue;
                            }
                            const T* srow = src + static_cast<std::size_t>(iy) * l.win + shift;
                            std::fill(drow, drow + lo, T(0));
                            if (l.stride == 1) {
                                std::copy(srow + lo, srow + hi, drow + lo);
                            } else {
                                for (int ox = lo; ox < hi; ++ox) drow[ox] = srow[ox * l.stride];
                            }
                            std::fill(drow + hi, drow + l.wout, T(0));
                        }
                    }
                }
    }

    void col2im(const ConvGeom& l, const Mat& cols, int n_total, int n0, int nc, Buffer& dx) const {
        const std::size_t hw_out = l.out_plane();
        for (int c = 0; c < l.cin; ++c)
            for (int ky = 0; ky < l.k; ++ky)
                for (int kx = 0; kx < l.k; ++kx) {
                    const auto [lo, hi] = valid_range(kx, l);
                    const int shift = kx - l.pad;
                    const T* row = cols.data() + ((static_cast<std::size_t>(c) * l.k + ky) * l.k + kx) * nc * hw_out;
                    for (int n = 0; n < nc; ++n) {
                        T* dst = dx.data() + (static_cast<std::size_t>(c) * n_total + n0 + n) * l.in_plane();
                        const T* src = row + n * hw_out;
                        for (int oy = 0; oy < l.hout; ++oy) {
                            const int iy = oy * l.stride - l.pad + ky;
                            if (iy < 0 || iy >= l.hin) continue;
                            T* drow = dst + static_cast<std::size_t>(iy) * l.win + shift;
                            const T* srow = src + static_cast<std::size_t>(oy) * l.wout;
                            if (l.stride == 1) {
                                for (int ox = lo; ox < hi; ++ox) drow[ox] += srow[ox];
                            } else {
                                for (int ox = lo; ox < hi; ++ox) drow[ox * l.stride] += srow[ox];
                            }
                        }
                    }
                }
    }

    void conv_forward(const ConvGeom& l, const Buffer& x, Buffer& y, int n) const {
        const std::size_t hw_out = l.out_plane();
        const auto ld = static_cast<Eigen::Index>(n * hw_out);
        y.assign(static_cast<std::size_t>(l.cout) * n * hw_out, T(0));
        Eigen::Map<const Mat> w(params_.data() + l.w_offset, l.cout, static_cast<Eigen::Index>(l.fan_in()));
        Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> b(params_.data() + l.b_offset, l.cout);
        Mat cols;
        for (int n0 = 0; n0 < n; n0 += kChunk) {
            const int nc = std::min(kChunk, n - n0);
            im2col(l, x, n, n0, nc, cols);
            MapMat out(y.data() + n0 * hw_out, l.cout, static_cast<Eigen::Index>(nc * hw_out), Eigen::OuterStride<>(ld));
            out.noalias() = w * cols;
            out.colwise() += b;
        }
        if (l.relu)
            for (auto& v : y) v = std::max(v, T(0));
    }

    void conv_backward(const ConvGeom& l, const Buffer& x, const Buffer& dy,
                       Buffer* dx, std::span<T> grad, int n) const {
        const std::size_t hw_out = l.out_plane();
        const auto ld = static_cast<Eigen::Index>(n * hw_out);
        Eigen::Map<const Mat> w(params_.data() + l.w_offset, l.cout, static_cast<Eigen::Index>(l.fan_in()));
        Eigen::Map<Mat> dw(grad.data() + l.w_offset, l.cout, static_cast<Eigen::Index>(l.fan_in()));
        Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> db(grad.data() + l.b_offset, l.cout);
        if (dx) dx->assign(static_cast<std::size_t>(l.cin) * n * l.in_plane(), T(0));
        Mat cols, dcols;
        for (int n0 = 0; n0 < n; n0 += kChunk) {
            const int nc = std::min(kChunk, n - n0);
            ConstMapMat g(dy.data() + n0 * hw_out, l.cout, static_cast<Eigen::Index>(nc * hw_out), Eigen::OuterStride<>(ld));
            im2col(l, x, n, n0, nc, cols);
            dw.noalias() += g * cols.transpose();
            db += g.rowwise().sum();
            if (dx) {
                dcols.noalias() = w.transpose() * g;
                col2im(l, dcols, n, n0, nc, *dx);
            }
        }
    }

    ArchSpec arch_;
    std::vector<ConvGeom> geom_;
    Buffer params_;

    int n_ = 0;
    std::vector<Buffer> acts_;
    Buffer norms_;
    Mat out_;
};

}  // namespace xmk
