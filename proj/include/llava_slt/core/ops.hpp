#pragma once

#include "llava_slt/core/autograd.hpp"
#include "llava_slt/core/rotary.hpp"

#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

/// Differentiable operations on tape variables. Every op computes its value
/// eagerly and registers a closure that accumulates input gradients.
namespace slt::ops {

namespace detail {

template <class T>
int next_id(const Tape<T>& t) {
    return static_cast<int>(t.size());
}

inline void require(bool cond, const char* what) {
    if (!cond) throw std::invalid_argument(what);
}

}  // namespace detail

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
    detail::require(a.cols() == b.rows(), "matmul: inner dimensions differ");
    Tape<T>& t = *a.tape;
    const int o = detail::next_id(t);
    const bool rg = a.requires_grad() || b.requires_grad();
    Matrix<T> out = a.value() * b.value();
    return t.op(std::move(out), rg, [&t, a, b, o] {
        const Matrix<T>& g = t.grad(o);
        if (a.requires_grad()) t.grad(a.id).noalias() += g * b.value().transpose();
        if (b.requires_grad()) t.grad(b.id).noalias() += a.value().transpose() * g;
    });
}

/// a * b^T
template <class T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
    detail::require(a.cols() == b.cols(), "matmul_nt: widths differ");
    Tape<T>& t = *a.tape;
    const int o = detail::next_id(t);
    const bool rg = a.requires_grad() || b.requires_grad();
    Matrix<T> out = a.value() * b.value().transpose();
    return t.op(std::move(out), rg, [&t, a, b, o] {
        const Matrix<T>& g = t.grad(o);
        if (a.requires_grad()) t.grad(a.id).noalias() += g * b.value();
        if (b.requires_grad()) t.grad(b.id).noalias() += g.transpose() * a.value();
    });
}

template <class T>
Var<T> transpose(Var<T> a) {
    Tape<T>& t = *a.tape;
    const int o = detail::next_id(t);
    Matrix<T> out = a.value().transpose();
    return t.op(std::move(out), a.requires_grad(), [&t, a, o] { t.grad(a.id) += t.grad(o).transpose(); });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
    detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
    Tape<T>& t = *a.tape;
    const int o = detail::next_id(t);
    Matrix<T> out = a.value() + b.value();
    return t.op(std::move(out), a.requires_grad() || b.requires_grad(), [&t, a, b, o] {
        const Matrix<T>& g = t.grad(o);
        if (a.requires_grad()) t.grad(a.id) += g;
        if (b.requires_grad()) t.grad(b.id) += g;
    });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
    detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
    Tape<T>& t = *a.tape;
    const int o = detail::next_id(t);
    Matrix<T> out = a.value() - b.value();
    return t.op(std::move(out), a.requires_grad() || b.requires_grad(), [&t, a, b, o] {
        const Matrix<T>& g = t.grad(o);
        if (a.requires_grad()) t.grad(a.id) += g;
        if (b.requires_grad()) t.grad(b.id) -= g;
    });
}

/// Adds a 1 x n row to every row of `a`.
template <class T>
Var<T> add_row(Var<T> a, Var<T> row) {
    detail::require(row.rows() == 1 && row.cols() == a.cols(), "add_row: bias shape mismatch");
    Tape<T>& t = *a.tape;
    const int o = detail::next_id(t);
    Matrix<T> out = a.value().rowwise() + row.value().row(0);
    return t.op(std::move(out), a.requires_grad() || row.requires_grad(), [&t, a, row, o] {
        const Matrix<T>& g = t.grad(o);
        if (a.requires_grad()) t.grad(a.id) += g;
        if (row.requires_grad()) t.grad(row.id) += g.colwise().sum();
    });
}

template <class T>
Var<T> scale(Var<T> a, T c) {
    Tape<T>& t = *a.tape;
    const int o = detail::next_id(t);
    Matrix<T> out = a.value() * c;
    return t.op(std::move(out), a.requires_grad(), [&t, a, c, o] { t.grad(a.id) += t.grad(o) * c; });
}

/// a * s where s is a 1x1 variable.
template <class T>
Var<T> mul_scalar(Var<T> a, Var<T> s) {
    detail::require(s.rows() == 1 && s.cols() == 1, "mul_scalar: scalar must be 1x1");
    Tape<T>& t = *a.tape;
    const int o = detail::next_id(t);
    Matrix<T> out = a.value() * s.scalar();
    return t.op(std::move(out), a.requires_grad() || s.requires_grad(), [&t, a, s, o] {
        const Matrix<T>& g = t.grad(o);
        if (a.requires_grad()) t.grad(a.id) += g * s.scalar();
        if (s.requires_grad()) t.grad(s.id)(0, 0) += g.cwiseProduct(a.value()).sum();
    });
}

template <class T>
Var<T> exp(Var<T> a) {
    Tape<T>& t = *a.tape;
    const int o = detail::next_id(t);
    Matrix<T> out = a.value().array().exp().matrix();
    return t.op(std::move(out), a.requires_grad(),
                [&t, a, o] { t.grad(a.id) += t.grad(o).cwiseProduct(t.value(o)); });
}

/// GELU, tanh approximation.
template <class T>
Var<T> gelu(Var<T> a) {
    Tape<T>& t = *a.tape;
    const int o = detail::next_id(t);
    constexpr T kC = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
    constexpr T kA = static_cast<T>(0.044715);
    const auto& x = a.value();
    Matrix<T> out(x.rows(), x.cols());
    for (Index i = 0; i < x.size(); ++i) {
        const T v = x.data()[i];
        out.data()[i] = T(0.5) * v * (T(1) + std::tanh(kC * (v + kA * v * v * v)));
    }
    return t.op(std::move(out), a.requires_grad(), [&t, a, o] {
        const auto& xv = a.value();
        const auto& g = t.grad(o);
        auto& ga = t.grad(a.id);
        for (Index i = 0; i < xv.size(); ++i) {
            const T v = xv.data()[i];
            const T th = std::tanh(kC * (v + kA * v * v * v));
            const T d = T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th * th) * kC * (T(1) + T(3) * kA * v * v);
            ga.data()[i] += g.data()[i] * d;
        }
    });
}

/// Row-wise layer normalisation with 1 x d gain and bias.
template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps = T(1e-5)) {
    detail::require(gain.cols() == x.cols() && bias.cols() == x.cols(), "layer_norm: width mismatch");
    Tape<T>& t = *x.tape;
    const int o = detail::next_id(t);
    const Index n = x.rows(), d = x.cols();
    auto xhat = std::make_shared<Matrix<T>>(n, d);
    auto rstd = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n));
    Matrix<T> out(n, d);
    const auto& xv = x.value();
    for (Index r = 0; r < n; ++r) {
        const T mu = xv.row(r).mean();
        const T var = (xv.row(r).array() - mu).square().mean();
        const T rs = T(1) / std::sqrt(var + eps);
        (*rstd)[static_cast<std::size_t>(r)] = rs;
        xhat->row(r) = (xv.row(r).array() - mu) * rs;
        out.row(r) = xhat->row(r).cwiseProduct(gain.value().row(0)) + bias.value().row(0);
    }
    const bool rg = x.requires_grad() || gain.requires_grad() || bias.requires_grad();
    return t.op(std::move(out), rg, [&t, x, gain, bias, o, xhat, rstd] {
        const Matrix<T>& g = t.grad(o);
        if (gain.requires_grad()) t.grad(gain.id) += g.cwiseProduct(*xhat).colwise().sum();
        if (bias.requires_grad()) t.grad(bias.id) += g.colwise().sum();
        if (x.requires_grad()) {
            auto& gx = t.grad(x.id);
            const auto& gv = gain.value();
            for (Index r = 0; r < g.rows(); ++r) {
                const auto dxhat = g.row(r).cwiseProduct(gv.row(0)).eval();
                const T m1 = dxhat.mean();
                const T m2 = dxhat.cwiseProduct(xhat->row(r)).mean();
                gx.row(r).array() +=
                    (*rstd)[static_cast<std::size_t>(r)] * (dxhat.array() - m1 - xhat->row(r).array() * m2);
            }
        }
    });
}

/// out[r] = a[index[r]]; backward scatter-adds. Serves embedding lookup and
/// nearest-neighbour downsampling.
template <class T>
Var<T> gather_rows(Var<T> a, std::vector<int> index) {
    Tape<T>& t = *a.tape;
    const int o = detail::next_id(t);
    Matrix<T> out(static_cast<Index>(index.size()), a.cols());
    for (std::size_t r = 0; r < index.size(); ++r) {
        detail::require(index[r] >= 0 && index[r] < a.rows(), "gather_rows: index out of range");
        out.row(static_cast<Index>(r)) = a.value().row(index[r]);
    }
    return t.op(std::move(out), a.requires_grad(), [&t, a, o, index = std::move(index)] {
        const Matrix<T>& g = t.grad(o);
        auto& ga = t.grad(a.id);
        for (std::size_t r = 0; r < index.size(); ++r) ga.row(index[r]) += g.row(static_cast<Index>(r));
    });
}

template <class T>
Var<T> slice_rows(Var<T> a, Index start, Index count) {
    detail::require(start >= 0 && count >= 0 && start + count <= a.rows(), "slice_rows: range out of bounds");
    Tape<T>& t = *a.tape;
    const int o = detail::next_id(t);
    Matrix<T> out = a.value().middleRows(start, count);
    return t.op(std::move(out), a.requires_grad(),
                [&t, a, o, start, count] { t.grad(a.id).middleRows(start, count) += t.grad(o); });
}

template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
    detail::require(!parts.empty(), "concat_rows: no inputs");
    Tape<T>& t = *parts.front().tape;
    const int o = detail::next_id(t);
    Index rows = 0;
    bool rg = false;
    for (const auto& p : parts) {
        detail::require(p.cols() == parts.front().cols(), "concat_rows: width mismatch");
        rows += p.rows();
        rg = rg || p.requires_grad();
    }
    Matrix<T> out(rows, parts.front().cols());
    Index r = 0;
    for (const auto& p : parts) {
        out.middleRows(r, p.rows()) = p.value();
        r += p.rows();
    }
    return t.op(std::move(out), rg, [&t, parts, o] {
        const Matrix<T>& g = t.grad(o);
        Index off = 0;
        for (const auto& p : parts) {
            if (p.requires_grad()) t.grad(p.id) += g.middleRows(off, p.rows());
            off += p.rows();
        }
    });
}

/// Column means, 1 x d.
template <class T>
Var<T> mean_rows(Var<T> a) {
    Tape<T>& t = *a.tape;
    const int o = detail::next_id(t);
    Matrix<T> out = a.value().colwise().mean();
    return t.op(std::move(out), a.requires_grad(), [&t, a, o] {
        const T inv = T(1) / static_cast<T>(a.rows());
        t.grad(a.id).rowwise() += t.grad(o).row(0) * inv;
    });
}

template <class T>
Var<T> sum(Var<T> a) {
    Tape<T>& t = *a.tape;
    const int o = detail::next_id(t);
    Matrix<T> out(1, 1);
    out(0, 0) = a.value().sum();
    return t.op(std::move(out), a.requires_grad(), [&t, a, o] { t.grad(a.id).array() += t.grad(o)(0, 0); });
}

/// Each row divided by its Euclidean norm.
template <class T>
Var<T> l2_normalize_rows(Var<T> a) {
    Tape<T>& t = *a.tape;
    const int o = detail::next_id(t);
    auto norms = std::make_shared<std::vector<T>>(static_cast<std::size_t>(a.rows()));
    Matrix<T> out(a.rows(), a.cols());
    for (Index r = 0; r < a.rows(); ++r) {
        const T n = std::max(a.value().row(r).norm(), std::numeric_limits<T>::min());
        (*norms)[static_cast<std::size_t>(r)] = n;
        out.row(r) = a.value().row(r) / n;
    }
    return t.op(std::move(out), a.requires_grad(), [&t, a, o, norms] {
        const auto& y = t.value(o);
        const auto& g = t.grad(o);
        auto& ga = t.grad(a.id);
        for (Index r = 0; r < y.rows(); ++r) {
            const T dot = y.row(r).dot(g.row(r));
            ga.row(r) += (g.row(r) - y.row(r) * dot) / (*norms)[static_cast<std::size_t>(r)];
        }
    });
}

enum class MaskKind { kFull, kCausal, kBand };

/// Which key positions a query may attend to.
struct AttentionMask {
    MaskKind kind = MaskKind::kFull;
    int window = 0;  // band half-width, kBand only

    bool allowed(Index i, Index j) const {
        switch (kind) {
            case MaskKind::kCausal:
                return j <= i;
            case MaskKind::kBand:
                return (i > j ? i - j : j - i) <= window;
            case MaskKind::kFull:
            default:
                return true;
        }
    }
};

struct AttentionSpec {
    int heads = 1;
    AttentionMask mask{};
    bool rotary = false;
    double rotary_base = kRotaryBase;
    int position_offset = 0;
};

/// Multi-head scaled dot-product self-attention over already projected q, k, v
/// (rows = positions). Masked scores are exactly excluded from the softmax.
template <class T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, const AttentionSpec& spec) {
    detail::require(q.rows() == k.rows() && q.rows() == v.rows(), "attention: length mismatch");
    detail::require(q.cols() == k.cols() && q.cols() == v.cols(), "attention: width mismatch");
    detail::require(spec.heads >= 1 && q.cols() % spec.heads == 0, "attention: width not divisible by heads");
    Tape<T>& t = *q.tape;
    const int o = detail::next_id(t);
    const Index n = q.rows();
    const int dh = static_cast<int>(q.cols()) / spec.heads;
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));

    struct Saved {
        Matrix<T> q, k;
        std::vector<Matrix<T>> probs;
        std::vector<int> positions;
    };
    auto saved = std::make_shared<Saved>();
    saved->q = q.value();
    saved->k = k.value();
    if (spec.rotary) {
        saved->positions.resize(static_cast<std::size_t>(n));
        std::iota(saved->positions.begin(), saved->positions.end(), spec.position_offset);
        rotate_heads(saved->q, dh, std::span<const int>(saved->positions), spec.rotary_base);
        rotate_heads(saved->k, dh, std::span<const int>(saved->positions), spec.rotary_base);
    }

    Matrix<T> out(n, q.cols());
    saved->probs.resize(static_cast<std::size_t>(spec.heads));
    for (int h = 0; h < spec.heads; ++h) {
        Matrix<T> s = saved->q.middleCols(h * dh, dh) * saved->k.middleCols(h * dh, dh).transpose();
        for (Index i = 0; i < n; ++i) {
            T mx = -std::numeric_limits<T>::infinity();
            for (Index j = 0; j < n; ++j) {
                if (spec.mask.allowed(i, j)) {
                    s(i, j) *= inv_sqrt;
                    mx = std::max(mx, s(i, j));
                }
            }
            T z = 0;
            for (Index j = 0; j < n; ++j) {
                if (spec.mask.allowed(i, j)) {
                    s(i, j) = std::exp(s(i, j) - mx);
                    z += s(i, j);
                } else {
                    s(i, j) = T(0);
                }
            }
            s.row(i) /= z;
        }
        out.middleCols(h * dh, dh).noalias() = s * v.value().middleCols(h * dh, dh);
        saved->probs[static_cast<std::size_t>(h)] = std::move(s);
    }

    const bool rg = q.requires_grad() || k.requires_grad() || v.requires_grad();
    return t.op(std::move(out), rg, [&t, q, k, v, o, saved, dh, inv_sqrt, spec] {
        const Matrix<T>& g = t.grad(o);
        const Index rows = g.rows();
        Matrix<T> dq = Matrix<T>::Zero(rows, g.cols());
        Matrix<T> dk = Matrix<T>::Zero(rows, g.cols());
        for (int h = 0; h < spec.heads; ++h) {
            const Matrix<T>& p = saved->probs[static_cast<std::size_t>(h)];
            const auto gh = g.middleCols(h * dh, dh);
            if (v.requires_grad()) t.grad(v.id).middleCols(h * dh, dh).noalias() += p.transpose() * gh;
            if (!q.requires_grad() && !k.requires_grad()) continue;
            Matrix<T> dp = gh * v.value().middleCols(h * dh, dh).transpose();
            const auto row_dot = dp.cwiseProduct(p).rowwise().sum().eval();
            Matrix<T> ds = p.cwiseProduct(dp.colwise() - row_dot) * inv_sqrt;
            dq.middleCols(h * dh, dh).noalias() += ds * saved->k.middleCols(h * dh, dh);
            dk.middleCols(h * dh, dh).noalias() += ds.transpose() * saved->q.middleCols(h * dh, dh);
        }
        if (spec.rotary) {
            rotate_heads(dq, dh, std::span<const int>(saved->positions), spec.rotary_base, true);
            rotate_heads(dk, dh, std::span<const int>(saved->positions), spec.rotary_base, true);
        }
        if (q.requires_grad()) t.grad(q.id) += dq;
        if (k.requires_grad()) t.grad(k.id) += dk;
    });
}

/// Mean over masked rows of -log softmax(logits[r])[targets[r]].
template <class T>
Var<T> cross_entropy(Var<T> logits, const std::vector<int>& targets, const std::vector<bool>& mask) {
    detail::require(static_cast<Index>(targets.size()) == logits.rows(), "cross_entropy: targets/rows mismatch");
    detail::require(mask.size() == targets.size(), "cross_entropy: mask/rows mismatch");
    const auto active = static_cast<Index>(std::count(mask.begin(), mask.end(), true));
    if (active == 0) throw std::invalid_argument("cross_entropy: loss mask selects no position");
    Tape<T>& t = *logits.tape;
    const int o = detail::next_id(t);
    const auto& lv = logits.value();
    auto probs = std::make_shared<Matrix<T>>(Matrix<T>::Zero(lv.rows(), lv.cols()));
    T total = 0;
    for (Index r = 0; r < lv.rows(); ++r) {
        if (!mask[static_cast<std::size_t>(r)]) continue;
        const int tgt = targets[static_cast<std::size_t>(r)];
        detail::require(tgt >= 0 && tgt < lv.cols(), "cross_entropy: target out of range");
        const T mx = lv.row(r).maxCoeff();
        probs->row(r) = (lv.row(r).array() - mx).exp();
        const T z = probs->row(r).sum();
        probs->row(r) /= z;
        total += -(lv(r, tgt) - mx - std::log(z));
    }
    Matrix<T> out(1, 1);
    out(0, 0) = total / static_cast<T>(active);
    return t.op(std::move(out), logits.requires_grad(), [&t, logits, o, probs, targets, mask, active] {
        const T g = t.grad(o)(0, 0) / static_cast<T>(active);
        auto& gl = t.grad(logits.id);
        for (Index r = 0; r < gl.rows(); ++r) {
            if (!mask[static_cast<std::size_t>(r)]) continue;
            gl.row(r) += probs->row(r) * g;
            gl(r, targets[static_cast<std::size_t>(r)]) -= g;
        }
    });
}

/// Inner contrastive regulariser over a sequence of feature rows:
/// mean_i ||w_i - w_{i+1}|| + mean_i max(0, margin - ||w_i - w_{i+offset}||).
/// Needs at least offset + 1 rows.
template <class T>
Var<T> signcl(Var<T> w, T margin, int offset) {
    detail::require(offset >= 1, "signcl: offset must be >= 1");
    detail::require(w.rows() >= offset + 1, "signcl: sequence shorter than offset + 1");
    Tape<T>& t = *w.tape;
    const int o = detail::next_id(t);
    const auto& x = w.value();
    const Index n = x.rows();
    T pull = 0, push = 0;
    for (Index i = 0; i + 1 < n; ++i) pull += (x.row(i) - x.row(i + 1)).norm();
    for (Index i = 0; i + offset < n; ++i) push += std::max(T(0), margin - (x.row(i) - x.row(i + offset)).norm());
    const T n_pull = static_cast<T>(n - 1);
    const T n_push = static_cast<T>(n - offset);
    Matrix<T> out(1, 1);
    out(0, 0) = pull / n_pull + push / n_push;
    return t.op(std::move(out), w.requires_grad(), [&t, w, o, margin, offset, n_pull, n_push] {
        const T g = t.grad(o)(0, 0);
        const auto& xv = w.value();
        auto& gw = t.grad(w.id);
        for (Index i = 0; i + 1 < xv.rows(); ++i) {
            const auto d = (xv.row(i) - xv.row(i + 1)).eval();
            const T nd = d.norm();
            if (nd <= T(0)) continue;
            const auto step = (d * (g / (n_pull * nd))).eval();
            gw.row(i) += step;
            gw.row(i + 1) -= step;
        }
        for (Index i = 0; i + offset < xv.rows(); ++i) {
            const auto d = (xv.row(i) - xv.row(i + offset)).eval();
            const T nd = d.norm();
            if (nd <= T(0) || margin - nd <= T(0)) continue;
            const auto step = (d * (g / (n_push * nd))).eval();
            gw.row(i) -= step;
            gw.row(i + offset) += step;
        }
    });
}

}  // namespace slt::ops
