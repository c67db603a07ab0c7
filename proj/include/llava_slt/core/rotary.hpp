#pragma once

#include "llava_slt/core/tensor.hpp"

#include <cmath>
#include <span>
#include <stdexcept>
#include <utility>

namespace slt {

inline constexpr double kRotaryBase = 10000.0;

/// Rotates every head block of `x` (rows = positions, cols = heads * head_dim)
/// in place. Pair (2m, 2m+1) at position p turns by p * base^(-2m/head_dim).
/// `inverse` applies the transposed rotation, which is what the backward pass
/// needs.
template <class T>
void rotate_heads(Matrix<T>& x, int head_dim, std::span<const int> positions, double base = kRotaryBase,
                  bool inverse = false) {
    if (head_dim % 2 != 0) throw std::invalid_argument("rotary: head width must be even");
    if (x.cols() % head_dim != 0) throw std::invalid_argument("rotary: width not a multiple of head width");
    if (static_cast<Index>(positions.size()) != x.rows()) throw std::invalid_argument("rotary: positions/rows mismatch");
    const Index heads = x.cols() / head_dim;
    const int half = head_dim / 2;
    for (int m = 0; m < half; ++m) {
        const double theta = std::pow(base, -2.0 * m / head_dim);
        for (Index t = 0; t < x.rows(); ++t) {
            const double angle = positions[static_cast<std::size_t>(t)] * theta;
            const T c = static_cast<T>(std::cos(angle));
            const T s = static_cast<T>(inverse ? -std::sin(angle) : std::sin(angle));
            for (Index h = 0; h < heads; ++h) {
                const Index col = h * head_dim + 2 * m;
                const T a = x(t, col);
                const T b = x(t, col + 1);
                x(t, col) = a * c - b * s;
                x(t, col + 1) = a * s + b * c;
            }
        }
    }
}

/// Rotary position embedding applied to query and key matrices laid out as
/// rows = positions, cols = heads * head_dim.
template <class T>
std::pair<Matrix<T>, Matrix<T>> rotary_apply(Matrix<T> q, Matrix<T> k, int head_dim, std::span<const int> positions,
                                             double base = kRotaryBase) {
    rotate_heads(q, head_dim, positions, base);
    rotate_heads(k, head_dim, positions, base);
    return {std::move(q), std::move(k)};
}

}  // namespace slt
