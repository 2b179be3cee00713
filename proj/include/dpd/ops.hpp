#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "dpd/tensor.hpp"

namespace dpd::ops {

namespace detail {

inline void require_chw(const Tensor& t, const char* what) {
    if (t.rank() != 3) {
        throw ShapeError(std::string(what) + ": expected [C,H,W] input, got " + shape_string(t.shape()));
    }
}

inline std::size_t conv_out(std::size_t n, std::size_t k, std::size_t stride, std::size_t pad) {
    return (n + 2 * pad - k) / stride + 1;
}

inline void check_conv(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t stride,
                       std::size_t pad) {
    require_chw(input, "conv2d");
    if (kernel.rank() != 4) {
        throw ShapeError("conv2d: kernel must be [C_out,C_in,k,k], got " + shape_string(kernel.shape()));
    }
    if (kernel.dim(1) != input.dim(0)) {
        throw ShapeError("conv2d: kernel axis 1 (C_in=" + std::to_string(kernel.dim(1)) +
                         ") does not match input axis 0 (C=" + std::to_string(input.dim(0)) + ")");
    }
    if (kernel.dim(2) != kernel.dim(3) || kernel.dim(2) % 2 == 0) {
        throw ShapeError("conv2d: kernel axes 2,3 must be equal and odd, got " + shape_string(kernel.shape()));
    }
    if (bias.rank() != 1 || bias.dim(0) != kernel.dim(0)) {
        throw ShapeError("conv2d: bias axis 0 must equal kernel axis 0 (C_out=" + std::to_string(kernel.dim(0)) +
                         "), got " + shape_string(bias.shape()));
    }
    if (stride != 1 && stride != 2) throw ShapeError("conv2d: stride must be 1 or 2");
    const std::size_t k = kernel.dim(2);
    if (input.dim(1) + 2 * pad < k || input.dim(2) + 2 * pad < k) {
        throw ShapeError("conv2d: spatial axes 1,2 of input " + shape_string(input.shape()) +
                         " smaller than kernel");
    }
}

// Output columns ox for which ix = ox*stride + kx - pad lies in [0, width).
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t out_n, std::size_t in_n, std::size_t k_off,
                                                       std::size_t stride, std::size_t pad) {
    const long off = static_cast<long>(k_off) - static_cast<long>(pad);
    long lo = 0;
    if (off < 0) lo = (-off + static_cast<long>(stride) - 1) / static_cast<long>(stride);
    long hi = (static_cast<long>(in_n) - 1 - off);
    if (hi < 0) return {0, 0};
    hi = hi / static_cast<long>(stride) + 1;
    hi = std::min<long>(hi, static_cast<long>(out_n));
    if (lo >= hi) return {0, 0};
    return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

}  // namespace detail

/// 2-D cross-correlation of a [C_in,H,W] input with a [C_out,C_in,k,k] kernel.
inline Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t stride,
                     std::size_t pad) {
    detail::check_conv(input, kernel, bias, stride, pad);
    const std::size_t cin = input.dim(0), h = input.dim(1), w = input.dim(2);
    const std::size_t cout = kernel.dim(0), k = kernel.dim(2);
    const std::size_t oh = detail::conv_out(h, k, stride, pad), ow = detail::conv_out(w, k, stride, pad);
    Tensor out = Tensor::chw(cout, oh, ow);
    const double* in = input.data().data();
    const double* ker = kernel.data().data();
    double* o = out.data().data();
    for (std::size_t oc = 0; oc < cout; ++oc) {
        double* oplane = o + oc * oh * ow;
        std::fill(oplane, oplane + oh * ow, bias[oc]);
        for (std::size_t ic = 0; ic < cin; ++ic) {
            const double* iplane = in + ic * h * w;
            for (std::size_t ky = 0; ky < k; ++ky) {
                const auto [ylo, yhi] = detail::valid_range(oh, h, ky, stride, pad);
                for (std::size_t kx = 0; kx < k; ++kx) {
                    const double wv = ker[((oc * cin + ic) * k + ky) * k + kx];
                    const auto [xlo, xhi] = detail::valid_range(ow, w, kx, stride, pad);
                    for (std::size_t oy = ylo; oy < yhi; ++oy) {
                        const std::ptrdiff_t base = static_cast<std::ptrdiff_t>((oy * stride + ky - pad) * w) +
                                                    static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(pad);
                        double* orow = oplane + oy * ow;
                        for (std::size_t ox = xlo; ox < xhi; ++ox)
                            orow[ox] += wv * iplane[base + static_cast<std::ptrdiff_t>(ox * stride)];
                    }
                }
            }
        }
    }
    return out;
}

/// Accumulates kernel/bias gradients and (optionally) the input gradient of conv2d.
inline void conv2d_backward(const Tensor& input, const Tensor& kernel, std::size_t stride, std::size_t pad,
                            const Tensor& grad_out, Tensor* grad_input, Tensor& grad_kernel, Tensor& grad_bias) {
    const std::size_t cin = input.dim(0), h = input.dim(1), w = input.dim(2);
    const std::size_t cout = kernel.dim(0), k = kernel.dim(2);
    const std::size_t oh = grad_out.dim(1), ow = grad_out.dim(2);
    if (grad_out.dim(0) != cout || oh != detail::conv_out(h, k, stride, pad) ||
        ow != detail::conv_out(w, k, stride, pad)) {
        throw ShapeError("conv2d_backward: grad_out shape " + shape_string(grad_out.shape()) +
                         " does not match forward output");
    }
    if (grad_input) Tensor::require_same_shape(*grad_input, input, "conv2d_backward grad_input");
    const double* in = input.data().data();
    const double* ker = kernel.data().data();
    const double* go = grad_out.data().data();
    double* gk = grad_kernel.data().data();
    double* gi = grad_input ? grad_input->data().data() : nullptr;
    for (std::size_t oc = 0; oc < cout; ++oc) {
        const double* gplane = go + oc * oh * ow;
        double bsum = 0.0;
        for (std::size_t i = 0; i < oh * ow; ++i) bsum += gplane[i];
        grad_bias[oc] += bsum;
        for (std::size_t ic = 0; ic < cin; ++ic) {
            const double* iplane = in + ic * h * w;
            double* giplane = gi ? gi + ic * h * w : nullptr;
            for (std::size_t ky = 0; ky < k; ++ky) {
                const auto [ylo, yhi] = detail::valid_range(oh, h, ky, stride, pad);
                for (std::size_t kx = 0; kx < k; ++kx) {
                    const std::size_t widx = ((oc * cin + ic) * k + ky) * k + kx;
                    const double wv = ker[widx];
                    const auto [xlo, xhi] = detail::valid_range(ow, w, kx, stride, pad);
                    double acc = 0.0;
                    for (std::size_t oy = ylo; oy < yhi; ++oy) {
                        const std::ptrdiff_t base = static_cast<std::ptrdiff_t>((oy * stride + ky - pad) * w) +
                                                    static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(pad);
                        const double* grow = gplane + oy * ow;
                        for (std::size_t ox = xlo; ox < xhi; ++ox)
                            acc += grow[ox] * iplane[base + static_cast<std::ptrdiff_t>(ox * stride)];
                        if (giplane) {
                            for (std::size_t ox = xlo; ox < xhi; ++ox)
                                giplane[base + static_cast<std::ptrdiff_t>(ox * stride)] += wv * grow[ox];
                        }
                    }
                    gk[widx] += acc;
                }
            }
        }
    }
}

inline Tensor relu(const Tensor& input) {
    Tensor out = input;
    for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
    return out;
}

/// grad_in = grad_out where the forward input was positive.
inline Tensor relu_backward(const Tensor& input, const Tensor& grad_out) {
    Tensor::require_same_shape(input, grad_out, "relu_backward");
    Tensor g = grad_out;
    for (std::size_t i = 0; i < g.size(); ++i)
        if (!(input[i] > 0.0)) g[i] = 0.0;
    return g;
}

inline double sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& input) {
    Tensor out = input;
    for (auto& v : out.data()) v = sigmoid(v);
    return out;
}

/// Uses the forward output s: ds/dz = s(1-s).
inline Tensor sigmoid_backward(const Tensor& output, const Tensor& grad_out) {
    Tensor::require_same_shape(output, grad_out, "sigmoid_backward");
    Tensor g = grad_out;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= output[i] * (1.0 - output[i]);
    return g;
}

namespace detail {

struct LerpTable {
    std::vector<std::size_t> lo, hi;
    std::vector<double> frac;
};

// Align-corners sampling: output index i maps to i*(n-1)/(n*f-1) in the source.
inline LerpTable lerp_table(std::size_t n, std::size_t factor) {
    const std::size_t m = n * factor;
    LerpTable t;
    t.lo.resize(m);
    t.hi.resize(m);
    t.frac.resize(m);
    for (std::size_t i = 0; i < m; ++i) {
        const double src = m > 1 ? static_cast<double>(i) * static_cast<double>(n - 1) / static_cast<double>(m - 1)
                                 : 0.0;
        std::size_t lo = static_cast<std::size_t>(std::floor(src));
        if (lo > n - 1) lo = n - 1;
        t.lo[i] = lo;
        t.hi[i] = std::min(lo + 1, n - 1);
        t.frac[i] = src - static_cast<double>(lo);
    }
    return t;
}

}  // namespace detail

/// Bilinear upsampling by an integer factor with corner-aligned sampling.
inline Tensor bilinear_upsample(const Tensor& input, std::size_t factor) {
    detail::require_chw(input, "bilinear_upsample");
    if (factor < 1) throw ShapeError("bilinear_upsample: factor must be >= 1");
    if (factor == 1) return input;
    const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
    const auto ty = detail::lerp_table(h, factor), tx = detail::lerp_table(w, factor);
    Tensor out = Tensor::chw(c, h * factor, w * factor);
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < h * factor; ++y) {
            const double fy = ty.frac[y];
            for (std::size_t x = 0; x < w * factor; ++x) {
                const double fx = tx.frac[x];
                const double top = (1 - fx) * input.at(ch, ty.lo[y], tx.lo[x]) + fx * input.at(ch, ty.lo[y], tx.hi[x]);
                const double bot = (1 - fx) * input.at(ch, ty.hi[y], tx.lo[x]) + fx * input.at(ch, ty.hi[y], tx.hi[x]);
                out.at(ch, y, x) = (1 - fy) * top + fy * bot;
            }
        }
    return out;
}

inline Tensor bilinear_upsample_backward(const Shape& input_shape, std::size_t factor, const Tensor& grad_out) {
    if (factor == 1) return grad_out;
    const std::size_t c = input_shape[0], h = input_shape[1], w = input_shape[2];
    if (grad_out.shape() != Shape{c, h * factor, w * factor}) {
        throw ShapeError("bilinear_upsample_backward: grad_out shape " + shape_string(grad_out.shape()));
    }
    const auto ty = detail::lerp_table(h, factor), tx = detail::lerp_table(w, factor);
    Tensor g(input_shape);
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < h * factor; ++y) {
            const double fy = ty.frac[y];
            for (std::size_t x = 0; x < w * factor; ++x) {
                const double fx = tx.frac[x];
                const double go = grad_out.at(ch, y, x);
                g.at(ch, ty.lo[y], tx.lo[x]) += (1 - fy) * (1 - fx) * go;
                g.at(ch, ty.lo[y], tx.hi[x]) += (1 - fy) * fx * go;
                g.at(ch, ty.hi[y], tx.lo[x]) += fy * (1 - fx) * go;
                g.at(ch, ty.hi[y], tx.hi[x]) += fy * fx * go;
            }
        }
    return g;
}

/// Non-overlapping mean pooling over factor x factor blocks.
inline Tensor avg_pool(const Tensor& input, std::size_t factor) {
    detail::require_chw(input, "avg_pool");
    const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
    if (factor == 0 || h % factor || w % factor) {
        throw ShapeError("avg_pool: spatial axes 1,2 of " + shape_string(input.shape()) + " not divisible by " +
                         std::to_string(factor));
    }
    const double inv = 1.0 / static_cast<double>(factor * factor);
    Tensor out = Tensor::chw(c, h / factor, w / factor);
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) out.at(ch, y / factor, x / factor) += inv * input.at(ch, y, x);
    return out;
}

inline Tensor avg_pool_backward(const Shape& input_shape, std::size_t factor, const Tensor& grad_out) {
    const double inv = 1.0 / static_cast<double>(factor * factor);
    Tensor g(input_shape);
    for (std::size_t ch = 0; ch < input_shape[0]; ++ch)
        for (std::size_t y = 0; y < input_shape[1]; ++y)
            for (std::size_t x = 0; x < input_shape[2]; ++x) g.at(ch, y, x) = inv * grad_out.at(ch, y / factor, x / factor);
    return g;
}

/// out[c,y,x] = features[c,y,x] * gate[0,y,x].
inline Tensor modulate(const Tensor& features, const Tensor& gate) {
    if (gate.rank() != 3 || gate.dim(0) != 1 || gate.dim(1) != features.dim(1) || gate.dim(2) != features.dim(2)) {
        throw ShapeError("modulate: gate " + shape_string(gate.shape()) + " incompatible with features " +
                         shape_string(features.shape()));
    }
    Tensor out = features;
    const std::size_t plane = features.dim(1) * features.dim(2);
    for (std::size_t c = 0; c < features.dim(0); ++c)
        for (std::size_t i = 0; i < plane; ++i) out[c * plane + i] *= gate[i];
    return out;
}

/// Gradients of modulate w.r.t. features and gate.
inline std::pair<Tensor, Tensor> modulate_backward(const Tensor& features, const Tensor& gate, const Tensor& grad_out) {
    Tensor gf = grad_out;
    Tensor gg(gate.shape());
    const std::size_t plane = features.dim(1) * features.dim(2);
    for (std::size_t c = 0; c < features.dim(0); ++c)
        for (std::size_t i = 0; i < plane; ++i) {
            gf[c * plane + i] *= gate[i];
            gg[i] += grad_out[c * plane + i] * features[c * plane + i];
        }
    return {std::move(gf), std::move(gg)};
}

}  // namespace dpd::ops
