#pragma once

#include "llava_slt/core/tensor.hpp"

#include <cmath>
#include <map>
#include <numbers>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace slt::train {

/// Raised when a gradient or loss stops being finite.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

template <class T>
using NamedParams = std::vector<std::pair<std::string, Param<T>*>>;

template <class T>
NamedParams<T> trainable_params(ParamStore<T>& store, const std::string& prefix = {}) {
    NamedParams<T> out;
    for (auto& [name, p] : store)
        if (p.trainable) out.emplace_back(prefix + name, &p);
    return out;
}

template <class T>
double grad_norm(const NamedParams<T>& params) {
    double sq = 0;
    for (const auto& [_, p] : params)
        if (p->grad.size() != 0) sq += p->grad.template cast<double>().squaredNorm();
    return std::sqrt(sq);
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
template <class T>
double clip_grad_norm(const NamedParams<T>& params, double max_norm) {
    const double norm = grad_norm(params);
    if (max_norm > 0 && norm > max_norm) {
        const T s = static_cast<T>(max_norm / norm);
        for (const auto& [_, p] : params)
            if (p->grad.size() != 0) p->grad *= s;
    }
    return norm;
}

/// Linear warmup from 0 to max_lr over ceil(warmup * total) steps, then a
/// half cosine down to 0 at `total`.
inline double onecycle_cosine(long step, long total, double max_lr, double warmup = 0.05) {
    if (total <= 0) throw std::invalid_argument("onecycle_cosine: total_steps must be > 0");
    if (step < 0 || step > total) throw std::invalid_argument("onecycle_cosine: step outside [0, total]");
    if (warmup < 0 || warmup >= 1) throw std::invalid_argument("onecycle_cosine: warmup fraction must be in [0, 1)");
    auto warm = static_cast<long>(std::ceil(warmup * static_cast<double>(total)));
    if (warm >= total) warm = total - 1;
    if (step < warm) return max_lr * static_cast<double>(step) / static_cast<double>(warm);
    const double progress = static_cast<double>(step - warm) / static_cast<double>(total - warm);
    return max_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

struct AdamWOptions {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// AdamW with decoupled weight decay: p <- p - lr*wd*p - lr*mhat/(sqrt(vhat)+eps).
template <class T>
class AdamW {
public:
    struct Moments {
        Matrix<T> m;
        Matrix<T> v;
    };

    explicit AdamW(AdamWOptions opt = {}) : opt_(opt) {}

    void step(const NamedParams<T>& params, double lr, double weight_decay) {
        ++steps_;
        const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(steps_));
        const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(steps_));
        const T b1 = static_cast<T>(opt_.beta1), b2 = static_cast<T>(opt_.beta2);
        for (const auto& [name, p] : params) {
            if (p->grad.size() == 0) p->grad = Matrix<T>::Zero(p->value.rows(), p->value.cols());
            if (!p->grad.allFinite()) throw NumericError("non-finite gradient in " + name);
            auto& st = state_[name];
            if (st.m.size() == 0) {
                st.m = Matrix<T>::Zero(p->value.rows(), p->value.cols());
                st.v = Matrix<T>::Zero(p->value.rows(), p->value.cols());
            }
            st.m = b1 * st.m + (T(1) - b1) * p->grad;
            st.v = b2 * st.v + (T(1) - b2) * p->grad.cwiseAbs2();
            if (weight_decay != 0) p->value *= static_cast<T>(1.0 - lr * weight_decay);
            const T step_size = static_cast<T>(lr / bc1);
            const T inv_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
            const T eps = static_cast<T>(opt_.eps);
            p->value.array() -= step_size * st.m.array() / (st.v.array().sqrt() * inv_bc2 + eps);
        }
    }

    long steps() const { return steps_; }
    void set_steps(long s) { steps_ = s; }
    std::map<std::string, Moments>& state() { return state_; }
    const std::map<std::string, Moments>& state() const { return state_; }
    const AdamWOptions& options() const { return opt_; }

private:
    AdamWOptions opt_;
    long steps_ = 0;
    std::map<std::string, Moments> state_;
};

}  // namespace slt::train
