#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "lcnn/tensor.hpp"

namespace lcnn {

/// Element-wise operator used by a lattice fusion point.
enum class FusionOp { Average, Add, Subtract, AbsDiff };

inline std::string_view fusion_name(FusionOp op) noexcept {
    switch (op) {
        case FusionOp::Average: return "average";
        case FusionOp::Add: return "add";
        case FusionOp::Subtract: return "sub";
        case FusionOp::AbsDiff: return "absdiff";
    }
    return "?";
}

/// Lowercase name lookup; callers lowercase user input first.
inline std::optional<FusionOp> parse_fusion_op(std::string_view name) noexcept {
    if (name == "average") return FusionOp::Average;
    if (name == "add") return FusionOp::Add;
    if (name == "sub") return FusionOp::Subtract;
    if (name == "absdiff") return FusionOp::AbsDiff;
    return std::nullopt;
}

/// Subtract and AbsDiff are binary; Average and Add take any n >= 1.
inline bool accepts_arity(FusionOp op, std::size_t n) noexcept {
    if (n == 0) return false;
    if (op == FusionOp::Subtract || op == FusionOp::AbsDiff) return n == 2;
    return true;
}

class FusionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Ordered per-stream maps C_a..C_n sharing one shape.
template <Real T>
using StreamBundle = std::vector<Tensor<T>>;

template <Real T>
void check_bundle(FusionOp op, const StreamBundle<T>& streams) {
    if (!accepts_arity(op, streams.size()))
        throw FusionError("fusion '" + std::string(fusion_name(op)) + "' cannot take " +
                          std::to_string(streams.size()) + " stream(s)");
    for (std::size_t k = 1; k < streams.size(); ++k)
        if (streams[k].shape() != streams[0].shape())
            throw ShapeError("fusion: stream " + std::to_string(k) + " has shape " + to_string(streams[k].shape()) +
                             " but stream 0 has " + to_string(streams[0].shape()));
}

namespace detail {

/// Balanced-tree sum over streams [lo, hi). Identical inputs then sum exactly
/// whenever the count is a power of two.
template <Real T>
Tensor<T> pairwise_sum(const StreamBundle<T>& streams, std::size_t lo, std::size_t hi) {
    if (hi - lo == 1) return streams[lo];
    const std::size_t mid = lo + (hi - lo) / 2;
    Tensor<T> left = pairwise_sum(streams, lo, mid);
    return accumulate(left, pairwise_sum(streams, mid, hi));
}

}  // namespace detail

template <Real T>
Tensor<T> fuse_forward(FusionOp op, const StreamBundle<T>& streams) {
    check_bundle(op, streams);
    const auto n = streams.size();
    const auto len = streams[0].size();
    Tensor<T> y(streams[0].shape());
    switch (op) {
        case FusionOp::Average:
        case FusionOp::Add: {
            y = detail::pairwise_sum(streams, 0, n);
            if (op == FusionOp::Average && n > 1) {
                const T inv = T(1) / static_cast<T>(n);
                for (std::size_t i = 0; i < len; ++i) y[i] *= inv;
            }
            break;
        }
        case FusionOp::Subtract:
            y = zip_elementwise(ZipOp::Sub, streams[0], streams[1]);
            break;
        case FusionOp::AbsDiff:
            y = zip_elementwise(ZipOp::AbsDiff, streams[0], streams[1]);
            break;
    }
    return y;
}

/// Gradient of each stream given dL/dy. AbsDiff uses sign(0) = 0.
template <Real T>
StreamBundle<T> fuse_backward(FusionOp op, const StreamBundle<T>& streams, const Tensor<T>& grad_y) {
    check_bundle(op, streams);
    require_same_shape(grad_y.shape(), streams[0].shape(), "fuse_backward");
    const auto n = streams.size();
    StreamBundle<T> grads;
    grads.reserve(n);
    switch (op) {
        case FusionOp::Average: {
            if (n == 1) {
                grads.push_back(grad_y);
                break;
            }
            const Tensor<T> g = scale(grad_y, T(1) / static_cast<T>(n));
            grads.assign(n, g);
            break;
        }
        case FusionOp::Add:
            grads.assign(n, grad_y);
            break;
        case FusionOp::Subtract:
            grads.push_back(grad_y);
            grads.push_back(scale(grad_y, T(-1)));
            break;
        case FusionOp::AbsDiff: {
            Tensor<T> ga(grad_y.shape());
            Tensor<T> gb(grad_y.shape());
            const auto& a = streams[0];
            const auto& b = streams[1];
            for (std::size_t i = 0; i < grad_y.size(); ++i) {
                const T d = a[i] - b[i];
                if (d == T(0)) continue;  // both stay +0
                ga[i] = d > T(0) ? grad_y[i] : -grad_y[i];
                gb[i] = -ga[i];
            }
            grads.push_back(std::move(ga));
            grads.push_back(std::move(gb));
            break;
        }
    }
    return grads;
}

}  // namespace lcnn
