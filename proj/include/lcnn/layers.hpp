#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <utility>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lcnn/random.hpp"
#include "lcnn/tensor.hpp"

namespace lcnn {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

inline void require_rank(const Shape& s, std::size_t rank, const char* what) {
    if (s.size() != rank)
        throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got shape " +
                         to_string(s));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolution

struct ConvGeometry {
    std::size_t filters = 1;
    std::size_t kernel = 1;
    std::size_t stride = 1;
    std::size_t padding = 0;

    /// floor((in + 2p - f) / s) + 1, or 0 when the window does not fit.
    std::size_t output_side(std::size_t in) const noexcept {
        if (stride == 0 || in + 2 * padding < kernel) return 0;
        return (in + 2 * padding - kernel) / stride + 1;
    }
};

namespace detail {

/// Output columns [lo, hi) whose input column ox*s + kx - p lies inside [0, w).
inline std::pair<std::size_t, std::size_t> valid_columns(std::size_t kx, std::size_t s, std::ptrdiff_t p,
                                                         std::size_t w, std::size_t wo) {
    const auto first = p - static_cast<std::ptrdiff_t>(kx);  // need ox*s >= first
    std::size_t lo = first <= 0 ? 0 : static_cast<std::size_t>((first + static_cast<std::ptrdiff_t>(s) - 1) /
                                                               static_cast<std::ptrdiff_t>(s));
    // need ox*s + kx - p <= w - 1
    const auto last = static_cast<std::ptrdiff_t>(w) - 1 + p - static_cast<std::ptrdiff_t>(kx);
    std::size_t hi = last < 0 ? 0 : std::min(wo, static_cast<std::size_t>(last) / s + 1);
    lo = std::min(lo, hi);
    return {lo, hi};
}

/// Unfolds one NCHW image into a (C*f*f) x (Ho*Wo) row-major matrix.
template <Real T>
void im2col(const T* img, std::size_t channels, std::size_t h, std::size_t w, const ConvGeometry& g,
            std::size_t ho, std::size_t wo, T* cols) {
    const auto f = g.kernel;
    const auto s = g.stride;
    const auto p = static_cast<std::ptrdiff_t>(g.padding);
    std::size_t row = 0;
    for (std::size_t c = 0; c < channels; ++c) {
        const T* plane = img + c * h * w;
        for (std::size_t ky = 0; ky < f; ++ky) {
            for (std::size_t kx = 0; kx < f; ++kx, ++row) {
                T* dst = cols + row * ho * wo;
                for (std::size_t oy = 0; oy < ho; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * s + ky) - p;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) {
                        std::fill(dst + oy * wo, dst + (oy + 1) * wo, T(0));
                        continue;
                    }
                    const T* src = plane + iy * w;
                    T* row_out = dst + oy * wo;
                    const auto [lo, hi] = valid_columns(kx, s, p, w, wo);
                    std::fill(row_out, row_out + lo, T(0));
                    const T* in = src + (lo * s + kx - g.padding);
                    if (s == 1)
                        std::copy(in, in + (hi - lo), row_out + lo);
                    else
                        for (std::size_t ox = lo; ox < hi; ++ox, in += s) row_out[ox] = *in;
                    std::fill(row_out + hi, row_out + wo, T(0));
                }
            }
        }
    }
}

/// Inverse scatter of im2col: accumulates column entries back onto the image.
template <Real T>
void col2im(const T* cols, std::size_t channels, std::size_t h, std::size_t w, const ConvGeometry& g,
            std::size_t ho, std::size_t wo, T* img) {
    const auto f = g.kernel;
    const auto s = g.stride;
    const auto p = static_cast<std::ptrdiff_t>(g.padding);
    std::size_t row = 0;
    for (std::size_t c = 0; c < channels; ++c) {
        T* plane = img + c * h * w;
        for (std::size_t ky = 0; ky < f; ++ky) {
            for (std::size_t kx = 0; kx < f; ++kx, ++row) {
                const T* src = cols + row * ho * wo;
                for (std::size_t oy = 0; oy < ho; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * s + ky) - p;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                    const auto [lo, hi] = valid_columns(kx, s, p, w, wo);
                    T* out = plane + iy * w + (lo * s + kx - g.padding);
                    const T* in = src + oy * wo;
                    for (std::size_t ox = lo; ox < hi; ++ox, out += s) *out += in[ox];
                }
            }
        }
    }
}

template <Real T>
void check_conv_args(const Tensor<T>& x, const Tensor<T>& weights, const Tensor<T>& bias,
                     const ConvGeometry& g) {
    require_rank(x.shape(), 4, "conv2d");
    require_rank(weights.shape(), 4, "conv2d weights");
    const Shape expect_w{g.filters, x.dim(1), g.kernel, g.kernel};
    if (weights.shape() != expect_w)
        throw ShapeError("conv2d: weights " + to_string(weights.shape()) + " do not match expected " +
                         to_string(expect_w));
    if (bias.shape() != Shape{g.filters})
        throw ShapeError("conv2d: bias " + to_string(bias.shape()) + " does not match filter count " +
                         std::to_string(g.filters));
    if (g.output_side(x.dim(2)) == 0 || g.output_side(x.dim(3)) == 0)
        throw ConfigError("conv2d: kernel " + std::to_string(g.kernel) + " stride " + std::to_string(g.stride) +
                          " padding " + std::to_string(g.padding) + " gives non-positive output for input " +
                          to_string(x.shape()));
}

}  // namespace detail

/// Cross-correlation plus bias. weights: (d, c, f, f); bias: (d).
template <Real T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& weights, const Tensor<T>& bias,
                         const ConvGeometry& g) {
    detail::check_conv_args(x, weights, bias, g);
    const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const auto ho = g.output_side(h), wo = g.output_side(w);
    const auto k = c * g.kernel * g.kernel;
    const auto pix = ho * wo;

    Tensor<T> out({n, g.filters, ho, wo});
    AlignedVector<T> cols(k * pix);
    detail::ConstMapMat<T> wm(weights.raw(), g.filters, k);
    for (std::size_t b = 0; b < n; ++b) {
        detail::im2col(x.raw() + b * c * h * w, c, h, w, g, ho, wo, cols.data());
        detail::ConstMapMat<T> cm(cols.data(), k, pix);
        detail::MapMat<T> om(out.raw() + b * g.filters * pix, g.filters, pix);
        om.noalias() = wm * cm;
        for (std::size_t d = 0; d < g.filters; ++d) om.row(d).array() += bias[d];
    }
    return out;
}

template <Real T>
struct ConvGrads {
    Tensor<T> input;
    Tensor<T> weights;
    Tensor<T> bias;
};

template <Real T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& weights, const Tensor<T>& bias,
                             const ConvGeometry& g, const Tensor<T>& grad_out) {
    detail::check_conv_args(x, weights, bias, g);
    const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const auto ho = g.output_side(h), wo = g.output_side(w);
    require_same_shape(grad_out.shape(), Shape{n, g.filters, ho, wo}, "conv2d_backward grad_out");
    const auto k = c * g.kernel * g.kernel;
    const auto pix = ho * wo;

    ConvGrads<T> grads{Tensor<T>(x.shape()), Tensor<T>(weights.shape()), Tensor<T>(bias.shape())};
    AlignedVector<T> cols(k * pix);
    detail::ConstMapMat<T> wm(weights.raw(), g.filters, k);
    detail::MapMat<T> gw(grads.weights.raw(), g.filters, k);
    for (std::size_t b = 0; b < n; ++b) {
        detail::ConstMapMat<T> gom(grad_out.raw() + b * g.filters * pix, g.filters, pix);
        detail::im2col(x.raw() + b * c * h * w, c, h, w, g, ho, wo, cols.data());
        detail::MapMat<T> cm(cols.data(), k, pix);
        gw.noalias() += gom * cm.transpose();
        for (std::size_t d = 0; d < g.filters; ++d) grads.bias[d] += gom.row(d).sum();
        cm.noalias() = wm.transpose() * gom;
        detail::col2im(cols.data(), c, h, w, g, ho, wo, grads.input.raw() + b * c * h * w);
    }
    return grads;
}

// ---------------------------------------------------------------------------
// ReLU

template <Real T>
Tensor<T> relu_forward(const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
    return out;
}

/// Derivative at exactly zero is zero. `x` may be either the pre- or the
/// post-activation since both are positive at the same positions.
template <Real T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& grad_out) {
    require_same_shape(x.shape(), grad_out.shape(), "relu_backward");
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T(0) ? grad_out[i] : T(0);
    return out;
}

// ---------------------------------------------------------------------------
// Max pooling with window == stride

template <Real T>
struct PoolResult {
    Tensor<T> output;
    std::vector<std::uint32_t> argmax;  // flat input index per output cell
};

template <Real T>
PoolResult<T> maxpool_forward(const Tensor<T>& x, std::size_t stride) {
    detail::require_rank(x.shape(), 4, "maxpool");
    const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (stride == 0 || h % stride != 0 || w % stride != 0)
        throw ConfigError("maxpool: stride " + std::to_string(stride) + " does not divide spatial extent " +
                          std::to_string(h) + "x" + std::to_string(w));
    const auto ho = h / stride, wo = w / stride;
    PoolResult<T> r{Tensor<T>({n, c, ho, wo}), std::vector<std::uint32_t>(n * c * ho * wo)};
    std::size_t o = 0;
    for (std::size_t plane = 0; plane < n * c; ++plane) {
        const std::size_t base = plane * h * w;
        for (std::size_t oy = 0; oy < ho; ++oy) {
            for (std::size_t ox = 0; ox < wo; ++ox, ++o) {
                std::size_t best = base + (oy * stride) * w + ox * stride;
                for (std::size_t ky = 0; ky < stride; ++ky)
                    for (std::size_t kx = 0; kx < stride; ++kx) {
                        const std::size_t idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if (x[idx] > x[best]) best = idx;  // strict: first maximum wins ties
                    }
                r.output[o] = x[best];
                r.argmax[o] = static_cast<std::uint32_t>(best);
            }
        }
    }
    return r;
}

template <Real T>
Tensor<T> maxpool_backward(std::span<const std::uint32_t> argmax, const Shape& input_shape,
                           const Tensor<T>& grad_out) {
    if (argmax.size() != grad_out.size())
        throw ShapeError("maxpool_backward: " + std::to_string(argmax.size()) + " indices for grad of shape " +
                         to_string(grad_out.shape()));
    Tensor<T> grad_in(input_shape);
    for (std::size_t o = 0; o < argmax.size(); ++o) grad_in[argmax[o]] += grad_out[o];
    return grad_in;
}

// ---------------------------------------------------------------------------
// Fully connected

/// x: (n, in); weights: (out, in); bias: (out). Returns (n, out).
template <Real T>
Tensor<T> dense_forward(const Tensor<T>& x, const Tensor<T>& weights, const Tensor<T>& bias) {
    detail::require_rank(x.shape(), 2, "dense");
    detail::require_rank(weights.shape(), 2, "dense weights");
    const auto n = x.dim(0), in = x.dim(1), out_n = weights.dim(0);
    if (weights.dim(1) != in)
        throw ShapeError("dense: input length " + std::to_string(in) + " does not match weights " +
                         to_string(weights.shape()));
    if (bias.shape() != Shape{out_n})
        throw ShapeError("dense: bias " + to_string(bias.shape()) + " does not match weights " +
                         to_string(weights.shape()));
    Tensor<T> y({n, out_n});
    detail::ConstMapMat<T> xm(x.raw(), n, in);
    detail::ConstMapMat<T> wm(weights.raw(), out_n, in);
    detail::MapMat<T> ym(y.raw(), n, out_n);
    ym.noalias() = xm * wm.transpose();
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < out_n; ++j) ym(r, j) += bias[j];
    return y;
}

template <Real T>
struct DenseGrads {
    Tensor<T> input;
    Tensor<T> weights;
    Tensor<T> bias;
};

template <Real T>
DenseGrads<T> dense_backward(const Tensor<T>& x, const Tensor<T>& weights, const Tensor<T>& grad_out) {
    detail::require_rank(x.shape(), 2, "dense_backward");
    const auto n = x.dim(0), in = x.dim(1), out_n = weights.dim(0);
    require_same_shape(grad_out.shape(), Shape{n, out_n}, "dense_backward grad_out");
    require_same_shape(weights.shape(), Shape{out_n, in}, "dense_backward weights");
    DenseGrads<T> g{Tensor<T>(x.shape()), Tensor<T>(weights.shape()), Tensor<T>({out_n})};
    detail::ConstMapMat<T> xm(x.raw(), n, in);
    detail::ConstMapMat<T> wm(weights.raw(), out_n, in);
    detail::ConstMapMat<T> gm(grad_out.raw(), n, out_n);
    detail::MapMat<T>(g.input.raw(), n, in).noalias() = gm * wm;
    detail::MapMat<T>(g.weights.raw(), out_n, in).noalias() = gm.transpose() * xm;
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < out_n; ++j) g.bias[j] += gm(r, j);
    return g;
}

// ---------------------------------------------------------------------------
// Inverted dropout

struct DropoutParams {
    double rate = 0.0;
    std::uint64_t seed = 0;
    bool training = false;
};

template <Real T>
struct DropoutResult {
    Tensor<T> output;
    Tensor<T> mask;  // 0 or 1/(1-p) per element; empty when the layer is the identity
};

/// The mask is a pure function of (seed, layer, step) and the element index.
template <Real T>
DropoutResult<T> dropout_forward(const Tensor<T>& x, const DropoutParams& p, std::uint64_t layer,
                                 std::uint64_t step) {
    if (!(p.rate >= 0.0 && p.rate < 1.0))
        throw ConfigError("dropout rate must be in [0,1), got " + std::to_string(p.rate));
    if (!p.training || p.rate == 0.0) return {x, Tensor<T>{}};
    const T keep_scale = T(1) / static_cast<T>(1.0 - p.rate);
    DropoutResult<T> r{Tensor<T>(x.shape()), Tensor<T>(x.shape())};
    CounterRng rng(derive_seed({p.seed, 0xD0D0ULL, layer, step}));
    for (std::size_t i = 0; i < x.size(); ++i) {
        const T m = rng.uniform() < p.rate ? T(0) : keep_scale;
        r.mask[i] = m;
        r.output[i] = x[i] * m;
    }
    return r;
}

template <Real T>
Tensor<T> dropout_backward(const Tensor<T>& mask, const Tensor<T>& grad_out) {
    if (mask.empty()) return grad_out;
    require_same_shape(mask.shape(), grad_out.shape(), "dropout_backward");
    return zip_elementwise(ZipOp::Mul, grad_out, mask);
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy

template <Real T>
Tensor<T> softmax(const Tensor<T>& logits) {
    detail::require_rank(logits.shape(), 2, "softmax");
    const auto n = logits.dim(0), k = logits.dim(1);
    Tensor<T> out(logits.shape());
    for (std::size_t r = 0; r < n; ++r) {
        const T* row = logits.raw() + r * k;
        T* o = out.raw() + r * k;
        T mx = row[0];
        for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        T sum = 0;
        for (std::size_t j = 0; j < k; ++j) sum += (o[j] = std::exp(row[j] - mx));
        for (std::size_t j = 0; j < k; ++j) o[j] /= sum;
    }
    return out;
}

template <Real T>
struct LossResult {
    double loss = 0.0;
    Tensor<T> grad;
};

/// Mean over the batch of -log softmax(logits)[label]; grad = (softmax - onehot) / n.
template <Real T>
LossResult<T> softmax_xent(const Tensor<T>& logits, std::span<const std::uint8_t> labels) {
    detail::require_rank(logits.shape(), 2, "softmax_xent");
    const auto n = logits.dim(0), k = logits.dim(1);
    if (labels.size() != n)
        throw ShapeError("softmax_xent: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) +
                         " rows");
    LossResult<T> r{0.0, Tensor<T>(logits.shape())};
    const T inv_n = T(1) / static_cast<T>(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] >= k)
            throw std::out_of_range("softmax_xent: label " + std::to_string(labels[i]) + " at row " +
                                    std::to_string(i) + " outside 0.." + std::to_string(k - 1));
        const T* row = logits.raw() + i * k;
        T* g = r.grad.raw() + i * k;
        T mx = row[0];
        for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        double sum = 0;
        for (std::size_t j = 0; j < k; ++j) sum += std::exp(static_cast<double>(row[j] - mx));
        const double log_z = std::log(sum) + static_cast<double>(mx);
        r.loss += log_z - static_cast<double>(row[labels[i]]);
        for (std::size_t j = 0; j < k; ++j)
            g[j] = static_cast<T>(std::exp(static_cast<double>(row[j]) - log_z)) * inv_n;
        g[labels[i]] -= inv_n;
    }
    r.loss /= static_cast<double>(n);
    return r;
}

}  // namespace lcnn
