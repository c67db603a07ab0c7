#pragma once

#include "llava_slt/core/rng.hpp"
#include "llava_slt/core/tensor.hpp"

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace slt {

/// Low-rank delta on one weight matrix. Weights are stored input-major
/// (d_in x d_out, applied as x * W), so the delta added to the stored matrix
/// is ((alpha / rank) * B * A)^T with A: rank x d_in and B: d_out x rank.
template <class T>
struct LoraAdapter {
    std::string target;
    int rank = 8;
    double alpha = 16.0;
    Param<T> a;
    Param<T> b;

    double scaling() const { return alpha / rank; }

    /// Delta in the stored (d_in x d_out) layout.
    Matrix<T> delta() const { return (b.value * a.value).transpose() * static_cast<T>(scaling()); }

    Index d_in() const { return a.value.cols(); }
    Index d_out() const { return b.value.rows(); }
};

/// A set of adapters keyed by target weight name. Move-only so that merging
/// (which consumes the set) cannot be applied twice by accident.
template <class T>
class LoraSet {
public:
    LoraSet() = default;
    LoraSet(const LoraSet&) = delete;
    LoraSet& operator=(const LoraSet&) = delete;
    LoraSet(LoraSet&&) noexcept = default;
    LoraSet& operator=(LoraSet&&) noexcept = default;

    const LoraAdapter<T>* find(const std::string& target) const {
        auto it = adapters_.find(target);
        return it == adapters_.end() ? nullptr : &it->second;
    }
    LoraAdapter<T>* find(const std::string& target) {
        auto it = adapters_.find(target);
        return it == adapters_.end() ? nullptr : &it->second;
    }

    LoraAdapter<T>& insert(LoraAdapter<T> adapter) {
        auto key = adapter.target;
        auto [it, ok] = adapters_.emplace(key, std::move(adapter));
        if (!ok) throw std::invalid_argument("adapter already attached to " + key);
        return it->second;
    }

    std::size_t size() const { return adapters_.size(); }
    bool empty() const { return adapters_.empty(); }

    std::size_t trainable_count() const {
        std::size_t n = 0;
        for (const auto& [_, ad] : adapters_) n += static_cast<std::size_t>(ad.a.value.size() + ad.b.value.size());
        return n;
    }

    void zero_grad() {
        for (auto& [_, ad] : adapters_) {
            ad.a.zero_grad();
            ad.b.zero_grad();
        }
    }

    /// Exposes the adapter matrices as a parameter store ("lora.<target>.A/B")
    /// for optimisers and checkpoints.
    template <class Fn>
    void for_each_param(Fn&& fn) {
        for (auto& [name, ad] : adapters_) {
            fn("lora." + name + ".A", ad.a);
            fn("lora." + name + ".B", ad.b);
        }
    }

    typename std::map<std::string, LoraAdapter<T>>::iterator begin() { return adapters_.begin(); }
    typename std::map<std::string, LoraAdapter<T>>::iterator end() { return adapters_.end(); }
    typename std::map<std::string, LoraAdapter<T>>::const_iterator begin() const { return adapters_.begin(); }
    typename std::map<std::string, LoraAdapter<T>>::const_iterator end() const { return adapters_.end(); }

private:
    std::map<std::string, LoraAdapter<T>> adapters_;
};

/// Attaches rank-`rank` adapters to each named weight of `base` and freezes
/// every base parameter. A ~ N(0, 1/d_in), B = 0, so the initial delta is
/// exactly zero.
template <class T>
LoraSet<T> attach_lora(ParamStore<T>& base, const std::vector<std::string>& targets, int rank, double alpha,
                       Rng& rng) {
    if (rank < 1) throw std::invalid_argument("lora rank must be >= 1");
    for (const auto& name : targets)
        if (!base.contains(name)) throw std::invalid_argument("unknown lora target: " + name);
    LoraSet<T> set;
    for (const auto& name : targets) {
        const auto& w = base.at(name).value;
        LoraAdapter<T> ad;
        ad.target = name;
        ad.rank = rank;
        ad.alpha = alpha;
        const Index d_in = w.rows(), d_out = w.cols();
        ad.a.value.resize(rank, d_in);
        const double sd = 1.0 / std::sqrt(static_cast<double>(d_in));
        for (Index i = 0; i < ad.a.value.size(); ++i) ad.a.value.data()[i] = static_cast<T>(rng.normal() * sd);
        ad.b.value = Matrix<T>::Zero(d_out, rank);
        set.insert(std::move(ad));
    }
    base.set_trainable(false);
    return set;
}

/// Folds every adapter into its target weight and returns the merged store.
/// Takes the adapters by value: a merged set cannot be merged again.
template <class T>
ParamStore<T> merge_lora(ParamStore<T> base, LoraSet<T> adapters) {
    for (const auto& [name, ad] : adapters) base.at(name).value += ad.delta();
    return base;
}

}  // namespace slt
