#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "kiunet/errors.hpp"
#include "kiunet/tensor.hpp"

namespace kiunet {

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

template <typename T>
using StridedMap = Eigen::Map<RowMatrix<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMatrix<T>, 0, Eigen::OuterStride<>>;

// Unfolds output rows [y0, y1) of one image [C, H, W] into columns
// [C*k*k, (y1-y0)*W] for a stride-1, zero-padded, size-preserving convolution.
template <typename T>
void im2col(const T* image, std::size_t channels, std::size_t h, std::size_t w, std::size_t k,
            std::size_t pad, std::size_t y0, std::size_t y1, T* cols) {
    const auto sh = static_cast<std::ptrdiff_t>(h);
    const auto sw = static_cast<std::ptrdiff_t>(w);
    const std::size_t ncols = (y1 - y0) * w;
    for (std::size_t c = 0; c < channels; ++c) {
        const T* plane = image + c * h * w;
        for (std::size_t dy = 0; dy < k; ++dy) {
            for (std::size_t dx = 0; dx < k; ++dx) {
                T* row = cols + ((c * k + dy) * k + dx) * ncols;
                const std::ptrdiff_t oy = static_cast<std::ptrdiff_t>(dy) - static_cast<std::ptrdiff_t>(pad);
                const std::ptrdiff_t ox = static_cast<std::ptrdiff_t>(dx) - static_cast<std::ptrdiff_t>(pad);
                const std::ptrdiff_t x_lo = std::max<std::ptrdiff_t>(0, -ox);
                const std::ptrdiff_t x_hi = std::min<std::ptrdiff_t>(sw, sw - ox);
                for (auto y = static_cast<std::ptrdiff_t>(y0); y < static_cast<std::ptrdiff_t>(y1); ++y) {
                    T* dst = row + (y - static_cast<std::ptrdiff_t>(y0)) * sw;
                    const std::ptrdiff_t sy = y + oy;
                    if (sy < 0 || sy >= sh) {
                        std::fill(dst, dst + sw, T(0));
                        continue;
                    }
                    const T* src = plane + sy * sw + ox;
                    std::fill(dst, dst + x_lo, T(0));
                    std::copy(src + x_lo, src + x_hi, dst + x_lo);
                    std::fill(dst + x_hi, dst + sw, T(0));
                }
            }
        }
    }
}

// Adjoint of im2col over the same row band: accumulates column gradients
// back into an image gradient.
template <typename T>
void col2im_add(const T* cols, std::size_t channels, std::size_t h, std::size_t w, std::size_t k,
                std::size_t pad, std::size_t y0, std::size_t y1, T* image) {
    const auto sh = static_cast<std::ptrdiff_t>(h);
    const auto sw = static_cast<std::ptrdiff_t>(w);
    const std::size_t ncols = (y1 - y0) * w;
    for (std::size_t c = 0; c < channels; ++c) {
        T* plane = image + c * h * w;
        for (std::size_t dy = 0; dy < k; ++dy) {
            for (std::size_t dx = 0; dx < k; ++dx) {
                const T* row = cols + ((c * k + dy) * k + dx) * ncols;
                const std::ptrdiff_t oy = static_cast<std::ptrdiff_t>(dy) - static_cast<std::ptrdiff_t>(pad);
                const std::ptrdiff_t ox = static_cast<std::ptrdiff_t>(dx) - static_cast<std::ptrdiff_t>(pad);
                const std::ptrdiff_t x_lo = std::max<std::ptrdiff_t>(0, -ox);
                const std::ptrdiff_t x_hi = std::min<std::ptrdiff_t>(sw, sw - ox);
                for (auto y = static_cast<std::ptrdiff_t>(y0); y < static_cast<std::ptrdiff_t>(y1); ++y) {
                    const std::ptrdiff_t sy = y + oy;
                    if (sy < 0 || sy >= sh) {
                        continue;
                    }
                    const T* src = row + (y - static_cast<std::ptrdiff_t>(y0)) * sw;
                    T* dst = plane + sy * sw + ox;
                    for (std::ptrdiff_t x = x_lo; x < x_hi; ++x) {
                        dst[x] += src[x];
                    }
                }
            }
        }
    }
}

// Reused per-thread buffers for the unfolded columns; large fresh
// allocations cost more than the copies themselves.
template <typename T>
T* conv_scratch(int slot, std::size_t size) {
    thread_local std::vector<T> buffers[2];
    auto& buf = buffers[slot];
    if (buf.size() < size) {
        buf.resize(size);
    }
    return buf.data();
}

// Row band height so one band of columns stays around a few hundred KB.
inline std::size_t conv_band_rows(std::size_t patch, std::size_t w) {
    constexpr std::size_t kBandElements = 1 << 17;
    return std::max<std::size_t>(1, kBandElements / std::max<std::size_t>(1, patch * w));
}

// Per-axis bilinear sampling table, half-pixel centers with edge clamping.
struct AxisTaps {
    std::vector<std::size_t> lo;
    std::vector<std::size_t> hi;
    std::vector<double> frac;
};

inline AxisTaps bilinear_taps(std::size_t in, std::size_t out) {
    AxisTaps taps;
    taps.lo.resize(out);
    taps.hi.resize(out);
    taps.frac.resize(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    const double max_src = static_cast<double>(in - 1);
    for (std::size_t d = 0; d < out; ++d) {
        double s = (static_cast<double>(d) + 0.5) * scale - 0.5;
        s = std::clamp(s, 0.0, max_src);
        const auto i0 = static_cast<std::size_t>(std::floor(s));
        taps.lo[d] = i0;
        taps.hi[d] = std::min(i0 + 1, in - 1);
        taps.frac[d] = s - static_cast<double>(i0);
    }
    return taps;
}

}  // namespace detail

/// Stride-1 2-D convolution (cross-correlation) with zero padding.
///
/// `weight` is [Cout, Cin, k, k] with k odd, `bias` is [Cout, 1, 1, 1] and
/// `padding` must equal (k - 1) / 2 so the spatial size is preserved.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t padding) {
    const Shape& is = input.shape();
    const Shape& ws = weight.shape();
    if (ws.h != ws.w || ws.h % 2 == 0) {
        throw ShapeError("conv2d kernel must be square with odd extent, got weight " + ws.str());
    }
    if (ws.c != is.c) {
        throw ShapeError("conv2d channel mismatch: input " + is.str() + " vs weight " + ws.str());
    }
    if (padding != (ws.h - 1) / 2) {
        throw ShapeError("conv2d padding must be (k-1)/2 = " + std::to_string((ws.h - 1) / 2));
    }
    if (bias.numel() != ws.n) {
        throw ShapeError("conv2d bias " + bias.shape().str() + " does not match weight " + ws.str());
    }

    const std::size_t cin = is.c, cout = ws.n, k = ws.h, hw = is.plane();
    const std::size_t patch = cin * k * k;
    const std::size_t band = detail::conv_band_rows(patch, is.w);
    const Shape os{is.n, cout, is.h, is.w};
    std::vector<T> out(os.numel());

    const T* x = input.values().data();
    const T* b = bias.values().data();
    detail::ConstMatrixMap<T> wmat(weight.values().data(), cout, patch);
    T* cols = detail::conv_scratch<T>(0, patch * band * is.w);
    for (std::size_t n = 0; n < is.n; ++n) {
        const T* img = x + n * cin * hw;
        T* dst = out.data() + n * cout * hw;
        for (std::size_t y0 = 0; y0 < is.h; y0 += band) {
            const std::size_t y1 = std::min(is.h, y0 + band);
            const auto ncols = static_cast<Eigen::Index>((y1 - y0) * is.w);
            const T* col_ptr = img + y0 * is.w;
            Eigen::Index col_stride = static_cast<Eigen::Index>(hw);
            if (k != 1) {
                detail::im2col(img, cin, is.h, is.w, k, padding, y0, y1, cols);
                col_ptr = cols;
                col_stride = ncols;
            }
            detail::ConstStridedMap<T> cmat(col_ptr, patch, ncols, Eigen::OuterStride<>(col_stride));
            detail::StridedMap<T> omat(dst + y0 * is.w, cout, ncols, Eigen::OuterStride<>(hw));
            omat.noalias() = wmat * cmat;
        }
        for (std::size_t co = 0; co < cout; ++co) {
            T* row = dst + co * hw;
            for (std::size_t i = 0; i < hw; ++i) {
                row[i] += b[co];
            }
        }
    }
    detail::ensure_finite<T>(out, "conv2d");

    std::shared_ptr<detail::Node<T>> node;
    if (detail::any_requires_grad({&input, &weight, &bias})) {
        node = detail::make_node<T>(
            OpKind::conv2d, {&input, &weight, &bias},
            [input, weight, padding, is, cin, cout, k, hw, patch, band](
                std::span<const T> g, std::span<std::vector<T>*> dst) {
                std::vector<T>* gx = dst[0];
                std::vector<T>* gw = dst[1];
                std::vector<T>* gb = dst[2];
                const T* x = input.values().data();
                detail::ConstMatrixMap<T> wmat(weight.values().data(), cout, patch);
                T* cols = detail::conv_scratch<T>(0, patch * band * is.w);
                T* gcols = detail::conv_scratch<T>(1, patch * band * is.w);
                for (std::size_t n = 0; n < is.n; ++n) {
                    const T* gimg_up = g.data() + n * cout * hw;
                    if (gb) {
                        for (std::size_t co = 0; co < cout; ++co) {
                            double acc = 0.0;
                            for (std::size_t i = 0; i < hw; ++i) acc += static_cast<double>(gimg_up[co * hw + i]);
                            (*gb)[co] += static_cast<T>(acc);
                        }
                    }
                    const T* img = x + n * cin * hw;
                    T* gimg = gx ? gx->data() + n * cin * hw : nullptr;
                    for (std::size_t y0 = 0; y0 < is.h; y0 += band) {
                        const std::size_t y1 = std::min(is.h, y0 + band);
                        const auto ncols = static_cast<Eigen::Index>((y1 - y0) * is.w);
                        const auto stride = Eigen::OuterStride<>(static_cast<Eigen::Index>(hw));
                        detail::ConstStridedMap<T> gmat(gimg_up + y0 * is.w, cout, ncols, stride);
                        if (gw) {
                            detail::MatrixMap<T> gwmat(gw->data(), cout, patch);
                            if (k == 1) {
                                detail::ConstStridedMap<T> cmat(img + y0 * is.w, patch, ncols, stride);
                                gwmat.noalias() += gmat * cmat.transpose();
                            } else {
                                detail::im2col(img, cin, is.h, is.w, k, padding, y0, y1, cols);
                                detail::ConstMatrixMap<T> cmat(cols, patch, ncols);
                                gwmat.noalias() += gmat * cmat.transpose();
                            }
                        }
                        if (gimg) {
                            if (k == 1) {
                                detail::StridedMap<T> gxmat(gimg + y0 * is.w, cin, ncols, stride);
                                gxmat.noalias() += wmat.transpose() * gmat;
                            } else {
                                detail::MatrixMap<T> gcmat(gcols, patch, ncols);
                                gcmat.noalias() = wmat.transpose() * gmat;
                                detail::col2im_add(gcols, cin, is.h, is.w, k, padding, y0, y1, gimg);
                            }
                        }
                    }
                }
            });
    }
    return Tensor<T>::from_op(os, std::move(out), std::move(node));
}

/// Non-overlapping 2x2 max pooling. Gradient goes to the first maximal element
/// in row-major window order.
template <typename T>
Tensor<T> maxpool2x2(const Tensor<T>& input) {
    const Shape& is = input.shape();
    if (is.h % 2 != 0 || is.w % 2 != 0) {
        throw ShapeError("maxpool2x2 needs even height and width, got " + is.str());
    }
    const Shape os{is.n, is.c, is.h / 2, is.w / 2};
    std::vector<T> out(os.numel());
    auto argmax = std::make_shared<std::vector<std::size_t>>(os.numel());
    const T* x = input.values().data();
    std::size_t o = 0;
    for (std::size_t p = 0; p < is.n * is.c; ++p) {
        const std::size_t base = p * is.plane();
        for (std::size_t y = 0; y < os.h; ++y) {
            for (std::size_t xo = 0; xo < os.w; ++xo, ++o) {
                const std::size_t top = base + 2 * y * is.w + 2 * xo;
                const std::size_t cand[4] = {top, top + 1, top + is.w, top + is.w + 1};
                std::size_t best = cand[0];
                for (int i = 1; i < 4; ++i) {
                    if (x[cand[i]] > x[best]) {
                        best = cand[i];
                    }
                }
                out[o] = x[best];
                (*argmax)[o] = best;
            }
        }
    }

    std::shared_ptr<detail::Node<T>> node;
    if (detail::any_requires_grad({&input})) {
        node = detail::make_node<T>(OpKind::maxpool2x2, {&input},
                                    [argmax](std::span<const T> g, std::span<std::vector<T>*> dst) {
                                        auto& gx = *dst[0];
                                        for (std::size_t i = 0; i < g.size(); ++i) {
                                            gx[(*argmax)[i]] += g[i];
                                        }
                                    });
    }
    return Tensor<T>::from_op(os, std::move(out), std::move(node));
}

/// Non-overlapping 2x2 mean pooling; the linear stand-in for max pooling used
/// by the receptive-field probe.
template <typename T>
Tensor<T> avgpool2x2(const Tensor<T>& input) {
    const Shape& is = input.shape();
    if (is.h % 2 != 0 || is.w % 2 != 0) {
        throw ShapeError("avgpool2x2 needs even height and width, got " + is.str());
    }
    const Shape os{is.n, is.c, is.h / 2, is.w / 2};
    std::vector<T> out(os.numel());
    const T* x = input.values().data();
    std::size_t o = 0;
    for (std::size_t p = 0; p < is.n * is.c; ++p) {
        const std::size_t base = p * is.plane();
        for (std::size_t y = 0; y < os.h; ++y) {
            for (std::size_t xo = 0; xo < os.w; ++xo, ++o) {
                const std::size_t top = base + 2 * y * is.w + 2 * xo;
                out[o] = T(0.25) * (x[top] + x[top + 1] + x[top + is.w] + x[top + is.w + 1]);
            }
        }
    }
    std::shared_ptr<detail::Node<T>> node;
    if (detail::any_requires_grad({&input})) {
        node = detail::make_node<T>(
            OpKind::avgpool2x2, {&input}, [is, os](std::span<const T> g, std::span<std::vector<T>*> dst) {
                auto& gx = *dst[0];
                std::size_t o = 0;
                for (std::size_t p = 0; p < is.n * is.c; ++p) {
                    const std::size_t base = p * is.plane();
                    for (std::size_t y = 0; y < os.h; ++y) {
                        for (std::size_t xo = 0; xo < os.w; ++xo, ++o) {
                            const std::size_t top = base + 2 * y * is.w + 2 * xo;
                            const T q = T(0.25) * g[o];
                            gx[top] += q;
                            gx[top + 1] += q;
                            gx[top + is.w] += q;
                            gx[top + is.w + 1] += q;
                        }
                    }
                }
            });
    }
    return Tensor<T>::from_op(os, std::move(out), std::move(node));
}

/// Bilinear resize to (out_h, out_w) with half-pixel centers:
/// source = (dst + 0.5) * in / out - 0.5, clamped to [0, in - 1].
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& input, std::size_t out_h, std::size_t out_w) {
    const Shape& is = input.shape();
    if (out_h == 0 || out_w == 0) {
        throw ShapeError("resize_bilinear target must be non-empty");
    }
    const Shape os{is.n, is.c, out_h, out_w};
    auto ty = std::make_shared<detail::AxisTaps>(detail::bilinear_taps(is.h, out_h));
    auto tx = std::make_shared<detail::AxisTaps>(detail::bilinear_taps(is.w, out_w));

    std::vector<T> out(os.numel());
    const T* x = input.values().data();
    for (std::size_t p = 0; p < is.n * is.c; ++p) {
        const T* src = x + p * is.plane();
        T* dst = out.data() + p * os.plane();
        for (std::size_t y = 0; y < out_h; ++y) {
            const T fy = static_cast<T>(ty->frac[y]);
            const T* r0 = src + ty->lo[y] * is.w;
            const T* r1 = src + ty->hi[y] * is.w;
            for (std::size_t xo = 0; xo < out_w; ++xo) {
                const T fx = static_cast<T>(tx->frac[xo]);
                const std::size_t a = tx->lo[xo], b = tx->hi[xo];
                const T top = (T(1) - fx) * r0[a] + fx * r0[b];
                const T bot = (T(1) - fx) * r1[a] + fx * r1[b];
                dst[y * out_w + xo] = (T(1) - fy) * top + fy * bot;
            }
        }
    }

    std::shared_ptr<detail::Node<T>> node;
    if (detail::any_requires_grad({&input})) {
        node = detail::make_node<T>(
            OpKind::resize_bilinear, {&input},
            [is, os, ty, tx](std::span<const T> g, std::span<std::vector<T>*> dst) {
                auto& gx = *dst[0];
                for (std::size_t p = 0; p < is.n * is.c; ++p) {
                    const T* gsrc = g.data() + p * os.plane();
                    T* gplane = gx.data() + p * is.plane();
                    for (std::size_t y = 0; y < os.h; ++y) {
                        const T fy = static_cast<T>(ty->frac[y]);
                        T* r0 = gplane + ty->lo[y] * is.w;
                        T* r1 = gplane + ty->hi[y] * is.w;
                        for (std::size_t xo = 0; xo < os.w; ++xo) {
                            const T fx = static_cast<T>(tx->frac[xo]);
                            const std::size_t a = tx->lo[xo], b = tx->hi[xo];
                            const T v = gsrc[y * os.w + xo];
                            const T top = (T(1) - fy) * v;
                            const T bot = fy * v;
                            r0[a] += (T(1) - fx) * top;
                            r0[b] += fx * top;
                            r1[a] += (T(1) - fx) * bot;
                            r1[b] += fx * bot;
                        }
                    }
                }
            });
    }
    return Tensor<T>::from_op(os, std::move(out), std::move(node));
}

template <typename T>
Tensor<T> bilinear_upsample2x(const Tensor<T>& input) {
    return resize_bilinear(input, input.shape().h * 2, input.shape().w * 2);
}

template <typename T>
Tensor<T> bilinear_downsample2x(const Tensor<T>& input) {
    const Shape& s = input.shape();
    if (s.h % 2 != 0 || s.w % 2 != 0) {
        throw ShapeError("bilinear_downsample2x needs even height and width, got " + s.str());
    }
    return resize_bilinear(input, s.h / 2, s.w / 2);
}

template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
    auto x = input.values();
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = x[i] > T(0) ? x[i] : T(0);
    }
    std::shared_ptr<detail::Node<T>> node;
    if (detail::any_requires_grad({&input})) {
        node = detail::make_node<T>(OpKind::relu, {&input},
                                    [input](std::span<const T> g, std::span<std::vector<T>*> dst) {
                                        auto x = input.values();
                                        auto& gx = *dst[0];
                                        for (std::size_t i = 0; i < g.size(); ++i) {
                                            gx[i] += x[i] > T(0) ? g[i] : T(0);
                                        }
                                    });
    }
    return Tensor<T>::from_op(input.shape(), std::move(out), std::move(node));
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& input) {
    auto x = input.values();
    auto out = std::make_shared<std::vector<T>>(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (x[i] >= T(0)) {
            (*out)[i] = T(1) / (T(1) + std::exp(-x[i]));
        } else {
            const T e = std::exp(x[i]);
            (*out)[i] = e / (T(1) + e);
        }
    }
    std::shared_ptr<detail::Node<T>> node;
    if (detail::any_requires_grad({&input})) {
        node = detail::make_node<T>(OpKind::sigmoid, {&input},
                                    [out](std::span<const T> g, std::span<std::vector<T>*> dst) {
                                        auto& gx = *dst[0];
                                        const auto& y = *out;
                                        for (std::size_t i = 0; i < g.size(); ++i) {
                                            gx[i] += g[i] * y[i] * (T(1) - y[i]);
                                        }
                                    });
    }
    return Tensor<T>::from_op(input.shape(), *out, std::move(node));
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("add shape mismatch: " + a.shape().str() + " vs " + b.shape().str());
    }
    auto x = a.values();
    auto y = b.values();
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = x[i] + y[i];
    }
    detail::ensure_finite<T>(out, "add");
    std::shared_ptr<detail::Node<T>> node;
    if (detail::any_requires_grad({&a, &b})) {
        node = detail::make_node<T>(OpKind::add, {&a, &b},
                                    [](std::span<const T> g, std::span<std::vector<T>*> dst) {
                                        for (std::vector<T>* d : dst) {
                                            if (!d) {
                                                continue;
                                            }
                                            for (std::size_t i = 0; i < g.size(); ++i) {
                                                (*d)[i] += g[i];
                                            }
                                        }
                                    });
    }
    return Tensor<T>::from_op(a.shape(), std::move(out), std::move(node));
}

/// Scalar sum_i weights[i] * input[i] with constant weights.
template <typename T>
Tensor<T> weighted_sum(const Tensor<T>& input, std::vector<T> weights) {
    if (weights.size() != input.numel()) {
        throw ShapeError("weighted_sum needs " + std::to_string(input.numel()) + " weights");
    }
    auto x = input.values();
    long double acc = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        acc += static_cast<long double>(weights[i]) * x[i];
    }
    std::shared_ptr<detail::Node<T>> node;
    if (detail::any_requires_grad({&input})) {
        auto w = std::make_shared<std::vector<T>>(std::move(weights));
        node = detail::make_node<T>(OpKind::weighted_sum, {&input},
                                    [w](std::span<const T> g, std::span<std::vector<T>*> dst) {
                                        auto& gx = *dst[0];
                                        for (std::size_t i = 0; i < gx.size(); ++i) {
                                            gx[i] += g[0] * (*w)[i];
                                        }
                                    });
    }
    std::vector<T> out{static_cast<T>(acc)};
    detail::ensure_finite<T>(out, "weighted_sum");
    return Tensor<T>::from_op(Shape{}, std::move(out), std::move(node));
}

template <typename T>
Tensor<T> sum(const Tensor<T>& input) {
    return weighted_sum(input, std::vector<T>(input.numel(), T(1)));
}

/// Stacks same-shaped tensors along the batch axis.
template <typename T>
Tensor<T> concat_batch(std::span<const Tensor<T>> parts) {
    if (parts.empty()) {
        throw ShapeError("concat_batch of zero tensors");
    }
    Shape os = parts[0].shape();
    os.n = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        if (s.c != os.c || s.h != os.h || s.w != os.w) {
            throw ShapeError("concat_batch mismatch: " + parts[0].shape().str() + " vs " + s.str());
        }
        os.n += s.n;
    }
    std::vector<T> out;
    out.reserve(os.numel());
    bool needs_grad = false;
    for (const auto& p : parts) {
        out.insert(out.end(), p.values().begin(), p.values().end());
        needs_grad = needs_grad || (grad_mode_enabled() && p.requires_grad());
    }
    std::shared_ptr<detail::Node<T>> node;
    if (needs_grad) {
        node = std::make_shared<detail::Node<T>>();
        node->kind = OpKind::concat_batch;
        for (const auto& p : parts) {
            node->parents.push_back(p.storage());
        }
        std::vector<std::size_t> sizes;
        for (const auto& p : parts) {
            sizes.push_back(p.numel());
        }
        node->backward = [sizes](std::span<const T> g, std::span<std::vector<T>*> dst) {
            std::size_t offset = 0;
            for (std::size_t p = 0; p < dst.size(); ++p) {
                if (std::vector<T>* d = dst[p]) {
                    for (std::size_t i = 0; i < sizes[p]; ++i) {
                        (*d)[i] += g[offset + i];
                    }
                }
                offset += sizes[p];
            }
        };
    }
    return Tensor<T>::from_op(os, std::move(out), std::move(node));
}

}  // namespace kiunet
