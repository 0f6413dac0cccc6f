#pragma once

// Eager tensor kernels. The expression graph evaluates its nodes with these,
// and they are usable directly when no derivative is needed.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>

#include "gradleak/tensor.hpp"

namespace gradleak::ops {

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": operand shapes " + shape_string(a.shape()) +
                             " and " + shape_string(b.shape()) + " differ");
    }
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* operand) {
    if (t.rank() != rank) {
        throw DimensionError(std::string(op) + ": operand '" + operand + "' must have rank " +
                             std::to_string(rank) + ", got shape " + shape_string(t.shape()));
    }
}

template <typename F>
Tensor map(const Tensor& a, F f) {
    Tensor out(a.shape());
    auto src = a.data();
    auto dst = out.data();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = f(src[i]);
    return out;
}

template <typename F>
Tensor zip(const Tensor& a, const Tensor& b, const char* op, F f) {
    require_same_shape(a, b, op);
    Tensor out(a.shape());
    auto x = a.data();
    auto y = b.data();
    auto dst = out.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = f(x[i], y[i]);
    return out;
}

} // namespace detail

/// Output length of a sliding window along one axis:
/// (n + 2*padding - window) / stride + 1, which must be integral.
inline std::size_t window_output_size(std::size_t n, std::size_t window, std::size_t stride,
                                      std::size_t padding, const char* op) {
    if (stride == 0) throw GeometryError(std::string(op) + ": stride must be positive");
    if (n + 2 * padding < window) {
        throw GeometryError(std::string(op) + ": window " + std::to_string(window) +
                            " exceeds padded extent " + std::to_string(n + 2 * padding));
    }
    const std::size_t span = n + 2 * padding - window;
    if (span % stride != 0) {
        throw GeometryError(std::string(op) + ": (" + std::to_string(n) + " + 2*" +
                            std::to_string(padding) + " - " + std::to_string(window) +
                            ") is not divisible by stride " + std::to_string(stride));
    }
    return span / stride + 1;
}

// ---- element-wise -------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::zip(a, b, "add", [](double x, double y) { return x + y; });
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::zip(a, b, "sub", [](double x, double y) { return x - y; });
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::zip(a, b, "mul", [](double x, double y) { return x * y; });
}
inline Tensor div(const Tensor& a, const Tensor& b) {
    return detail::zip(a, b, "div", [](double x, double y) {
        if (y == 0.0) throw DomainError("div: division by zero");
        return x / y;
    });
}

/// alpha * a + beta, element-wise.
inline Tensor scale_shift(const Tensor& a, double alpha, double beta = 0.0) {
    return detail::map(a, [=](double x) { return alpha * x + beta; });
}

inline Tensor log(const Tensor& a) {
    return detail::map(a, [](double x) {
        if (!(x > 0.0)) throw DomainError("log: non-positive argument");
        return std::log(x);
    });
}

/// 1 / (1 + e^-x), evaluated so that neither tail overflows.
inline double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& a) {
    return detail::map(a, [](double x) { return sigmoid(x); });
}

inline Tensor relu(const Tensor& a) {
    return detail::map(a, [](double x) { return x > 0.0 ? x : 0.0; });
}

/// Heaviside step with step(0) = 0; the derivative factor of relu.
inline Tensor step(const Tensor& a) {
    return detail::map(a, [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

// ---- reductions ---------------------------------------------------------

inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    return Tensor::scalar(s);
}

inline Tensor broadcast(const Tensor& scalar, const Shape& shape) {
    return Tensor(shape, scalar.item());
}

// ---- linear algebra -----------------------------------------------------

/// W[m x n] * x[n].
inline Tensor matvec(const Tensor& w, const Tensor& x) {
    detail::require_rank(w, 2, "matvec", "W");
    detail::require_rank(x, 1, "matvec", "X");
    const std::size_t m = w.dim(0), n = w.dim(1);
    if (x.dim(0) != n) {
        throw DimensionError("matvec: operand 'X' has length " + std::to_string(x.dim(0)) +
                             ", expected " + std::to_string(n));
    }
    Tensor y(Shape{m});
    for (std::size_t i = 0; i < m; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += w[i * n + j] * x[j];
        y[i] = acc;
    }
    return y;
}

/// W[m x n]^T * g[m].
inline Tensor matvec_transposed(const Tensor& w, const Tensor& g) {
    detail::require_rank(w, 2, "matvec_transposed", "W");
    detail::require_rank(g, 1, "matvec_transposed", "G");
    const std::size_t m = w.dim(0), n = w.dim(1);
    if (g.dim(0) != m) {
        throw DimensionError("matvec_transposed: operand 'G' has length " +
                             std::to_string(g.dim(0)) + ", expected " + std::to_string(m));
    }
    Tensor y(Shape{n});
    for (std::size_t i = 0; i < m; ++i) {
        const double gi = g[i];
        for (std::size_t j = 0; j < n; ++j) y[j] += w[i * n + j] * gi;
    }
    return y;
}

/// a[m] b[n]^T.
inline Tensor outer(const Tensor& a, const Tensor& b) {
    detail::require_rank(a, 1, "outer", "A");
    detail::require_rank(b, 1, "outer", "B");
    const std::size_t m = a.dim(0), n = b.dim(0);
    Tensor out(Shape{m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a[i] * b[j];
    return out;
}

/// Y = W X + B for W[m x n], X[n], B[m].
inline Tensor affine(const Tensor& w, const Tensor& x, const Tensor& b) {
    detail::require_rank(b, 1, "affine", "B");
    if (w.rank() == 2 && b.dim(0) != w.dim(0)) {
        throw DimensionError("affine: operand 'B' has length " + std::to_string(b.dim(0)) +
                             ", expected " + std::to_string(w.dim(0)));
    }
    Tensor y = matvec(w, x);
    for (std::size_t i = 0; i < y.numel(); ++i) y[i] += b[i];
    return y;
}

// ---- convolution --------------------------------------------------------

struct ConvGeometry {
    std::size_t stride = 1;
    std::size_t padding = 0;
};

namespace detail {

struct ConvDims {
    std::size_t h, w, c, kh, kw, d, oh, ow;
};

inline ConvDims conv_dims(const Shape& input, const Shape& kernel, ConvGeometry geo,
                          const char* op) {
    if (input.size() != 3) {
        throw DimensionError(std::string(op) + ": operand 'input' must be HxWxC, got " +
                             shape_string(input));
    }
    if (kernel.size() != 4) {
        throw DimensionError(std::string(op) + ": operand 'kernel' must be kxkxCxD, got " +
                             shape_string(kernel));
    }
    if (kernel[2] != input[2]) {
        throw DimensionError(std::string(op) + ": operand 'kernel' has " +
                             std::to_string(kernel[2]) + " input channels, input has " +
                             std::to_string(input[2]));
    }
    ConvDims d{input[0], input[1], input[2], kernel[0], kernel[1], kernel[3], 0, 0};
    d.oh = window_output_size(d.h, d.kh, geo.stride, geo.padding, op);
    d.ow = window_output_size(d.w, d.kw, geo.stride, geo.padding, op);
    return d;
}

// Visits every (output cell, kernel tap) pair whose input tap is in bounds.
template <typename F>
void for_each_tap(const ConvDims& d, ConvGeometry geo, F f) {
    const auto pad = static_cast<std::ptrdiff_t>(geo.padding);
    for (std::size_t oy = 0; oy < d.oh; ++oy) {
        for (std::size_t ox = 0; ox < d.ow; ++ox) {
            const std::size_t out_base = (oy * d.ow + ox) * d.d;
            for (std::size_t r = 0; r < d.kh; ++r) {
                const auto iy = static_cast<std::ptrdiff_t>(oy * geo.stride + r) - pad;
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.h)) continue;
                for (std::size_t s = 0; s < d.kw; ++s) {
                    const auto ix = static_cast<std::ptrdiff_t>(ox * geo.stride + s) - pad;
                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(d.w)) continue;
                    const std::size_t in_base =
                        (static_cast<std::size_t>(iy) * d.w + static_cast<std::size_t>(ix)) * d.c;
                    const std::size_t k_base = (r * d.kw + s) * d.c * d.d;
                    f(out_base, in_base, k_base);
                }
            }
        }
    }
}

} // namespace detail

/// Sliding-window cross-correlation of an HxWxC input with a kxkxCxD kernel.
inline Tensor conv2d_correlate(const Tensor& input, const Tensor& kernel, ConvGeometry geo) {
    const auto d = detail::conv_dims(input.shape(), kernel.shape(), geo, "conv2d");
    Tensor out(Shape{d.oh, d.ow, d.d});
    auto in = input.data();
    auto k = kernel.data();
    auto o = out.data();
    detail::for_each_tap(d, geo, [&](std::size_t ob, std::size_t ib, std::size_t kb) {
        for (std::size_t c = 0; c < d.c; ++c) {
            const double x = in[ib + c];
            const double* krow = &k[kb + c * d.d];
            double* orow = &o[ob];
            for (std::size_t j = 0; j < d.d; ++j) orow[j] += x * krow[j];
        }
    });
    return out;
}

/// Rotates the two spatial axes of a kxkxCxD kernel by 180 degrees.
inline Tensor rotate180(const Tensor& kernel) {
    detail::require_rank(kernel, 4, "rotate180", "kernel");
    const std::size_t kh = kernel.dim(0), kw = kernel.dim(1);
    const std::size_t inner = kernel.dim(2) * kernel.dim(3);
    Tensor out(kernel.shape());
    for (std::size_t r = 0; r < kh; ++r)
        for (std::size_t s = 0; s < kw; ++s) {
            const std::size_t src = (r * kw + s) * inner;
            const std::size_t dst = ((kh - 1 - r) * kw + (kw - 1 - s)) * inner;
            std::copy_n(kernel.data().begin() + src, inner, out.data().begin() + dst);
        }
    return out;
}

/// 2-D convolution. flip=true rotates the kernel (true convolution);
/// flip=false is cross-correlation.
inline Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride,
                     std::size_t padding, bool flip) {
    const ConvGeometry geo{stride, padding};
    return flip ? conv2d_correlate(input, rotate180(kernel), geo)
                : conv2d_correlate(input, kernel, geo);
}

/// Adjoint of conv2d_correlate with respect to its input.
inline Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& kernel,
                                const Shape& input_shape, ConvGeometry geo) {
    const auto d = detail::conv_dims(input_shape, kernel.shape(), geo, "conv2d_input_grad");
    if (grad_out.shape() != Shape{d.oh, d.ow, d.d}) {
        throw DimensionError("conv2d_input_grad: upstream gradient shape " +
                             shape_string(grad_out.shape()) + " does not match output");
    }
    Tensor out(input_shape);
    auto g = grad_out.data();
    auto k = kernel.data();
    auto o = out.data();
    detail::for_each_tap(d, geo, [&](std::size_t ob, std::size_t ib, std::size_t kb) {
        const double* grow = &g[ob];
        for (std::size_t c = 0; c < d.c; ++c) {
            const double* krow = &k[kb + c * d.d];
            double acc = 0.0;
            for (std::size_t j = 0; j < d.d; ++j) acc += grow[j] * krow[j];
            o[ib + c] += acc;
        }
    });
    return out;
}

/// Adjoint of conv2d_correlate with respect to its kernel.
inline Tensor conv2d_kernel_grad(const Tensor& input, const Tensor& grad_out,
                                 const Shape& kernel_shape, ConvGeometry geo) {
    const auto d = detail::conv_dims(input.shape(), kernel_shape, geo, "conv2d_kernel_grad");
    if (grad_out.shape() != Shape{d.oh, d.ow, d.d}) {
        throw DimensionError("conv2d_kernel_grad: upstream gradient shape " +
                             shape_string(grad_out.shape()) + " does not match output");
    }
    Tensor out(kernel_shape);
    auto in = input.data();
    auto g = grad_out.data();
    auto o = out.data();
    detail::for_each_tap(d, geo, [&](std::size_t ob, std::size_t ib, std::size_t kb) {
        const double* grow = &g[ob];
        for (std::size_t c = 0; c < d.c; ++c) {
            const double x = in[ib + c];
            double* orow = &o[kb + c * d.d];
            for (std::size_t j = 0; j < d.d; ++j) orow[j] += x * grow[j];
        }
    });
    return out;
}

// ---- pooling ------------------------------------------------------------

struct PoolGeometry {
    std::size_t window = 2;
    std::size_t stride = 2;
};

inline Shape avg_pool2d_output_shape(const Shape& input, PoolGeometry geo) {
    if (input.size() != 3) {
        throw DimensionError("avg_pool2d: input must be HxWxC, got " + shape_string(input));
    }
    if (geo.window == 0) throw GeometryError("avg_pool2d: window must be positive");
    return {window_output_size(input[0], geo.window, geo.stride, 0, "avg_pool2d"),
            window_output_size(input[1], geo.window, geo.stride, 0, "avg_pool2d"), input[2]};
}

inline Tensor avg_pool2d(const Tensor& input, std::size_t window, std::size_t stride) {
    const PoolGeometry geo{window, stride};
    const Shape os = avg_pool2d_output_shape(input.shape(), geo);
    const std::size_t w = input.dim(1), c = input.dim(2);
    const double inv = 1.0 / static_cast<double>(window * window);
    Tensor out(os);
    for (std::size_t oy = 0; oy < os[0]; ++oy)
        for (std::size_t ox = 0; ox < os[1]; ++ox)
            for (std::size_t ch = 0; ch < c; ++ch) {
                double acc = 0.0;
                for (std::size_t r = 0; r < window; ++r)
                    for (std::size_t s = 0; s < window; ++s)
                        acc += input[((oy * stride + r) * w + ox * stride + s) * c + ch];
                out[(oy * os[1] + ox) * c + ch] = acc * inv;
            }
    return out;
}

/// Adjoint of avg_pool2d: spreads each upstream cell evenly over its window.
inline Tensor avg_pool2d_grad(const Tensor& grad_out, const Shape& input_shape,
                              PoolGeometry geo) {
    const Shape os = avg_pool2d_output_shape(input_shape, geo);
    if (grad_out.shape() != os) {
        throw DimensionError("avg_pool2d_grad: upstream gradient shape " +
                             shape_string(grad_out.shape()) + " does not match output");
    }
    const std::size_t w = input_shape[1], c = input_shape[2];
    const double inv = 1.0 / static_cast<double>(geo.window * geo.window);
    Tensor out(input_shape);
    for (std::size_t oy = 0; oy < os[0]; ++oy)
        for (std::size_t ox = 0; ox < os[1]; ++ox)
            for (std::size_t ch = 0; ch < c; ++ch) {
                const double g = grad_out[(oy * os[1] + ox) * c + ch] * inv;
                for (std::size_t r = 0; r < geo.window; ++r)
                    for (std::size_t s = 0; s < geo.window; ++s)
                        out[((oy * geo.stride + r) * w + ox * geo.stride + s) * c + ch] += g;
            }
    return out;
}

// ---- classification head ------------------------------------------------

/// Softmax of a logit vector, computed after subtracting the maximum.
inline Tensor softmax(const Tensor& logits) {
    detail::require_rank(logits, 1, "softmax", "logits");
    auto v = logits.data();
    const double mx = *std::max_element(v.begin(), v.end());
    Tensor out(logits.shape());
    double total = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        out[i] = std::exp(v[i] - mx);
        total += out[i];
    }
    for (auto& p : out.data()) p /= total;
    return out;
}

/// -sum_i target_i * ln(probs_i). Terms with zero target contribute nothing.
inline double cross_entropy(const Tensor& probs, const Tensor& target) {
    detail::require_same_shape(probs, target, "cross_entropy");
    double loss = 0.0;
    for (std::size_t i = 0; i < probs.numel(); ++i) {
        if (target[i] == 0.0) continue;
        if (!(probs[i] > 0.0)) {
            throw DomainError("cross_entropy: probability at index " + std::to_string(i) +
                              " is non-positive where the target is positive");
        }
        loss -= target[i] * std::log(probs[i]);
    }
    return loss;
}

} // namespace gradleak::ops
