#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace slt {

/// Row-major dense matrix. Rows are time steps / tokens, columns are features.
template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Index = Eigen::Index;

/// A named trainable tensor with its accumulated gradient.
template <class T>
struct Param {
    Matrix<T> value;
    Matrix<T> grad;
    bool trainable = true;

    void zero_grad() {
        if (grad.size() != 0) grad.setZero();
    }
    void accumulate(const Matrix<T>& g) {
        if (grad.rows() != value.rows() || grad.cols() != value.cols())
            grad = Matrix<T>::Zero(value.rows(), value.cols());
        grad += g;
    }
};

/// Ordered name -> parameter registry. Node-stable: references returned by
/// `at` stay valid until the entry is erased.
template <class T>
class ParamStore {
public:
    using Map = std::map<std::string, Param<T>>;

    Param<T>& add(const std::string& name, Matrix<T> init, bool trainable = true) {
        auto [it, inserted] = params_.try_emplace(name);
        if (!inserted) throw std::invalid_argument("duplicate parameter: " + name);
        it->second.value = std::move(init);
        it->second.trainable = trainable;
        return it->second;
    }

    Param<T>& at(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
        return it->second;
    }
    const Param<T>& at(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
        return it->second;
    }

    bool contains(const std::string& name) const { return params_.count(name) != 0; }
    void erase(const std::string& name) { params_.erase(name); }

    void zero_grad() {
        for (auto& [_, p] : params_) p.zero_grad();
    }

    void set_trainable(bool on) {
        for (auto& [_, p] : params_) p.trainable = on;
    }

    /// Sets `trainable` on every parameter whose name starts with `prefix`.
    void set_trainable(const std::string& prefix, bool on) {
        for (auto& [name, p] : params_)
            if (name.rfind(prefix, 0) == 0) p.trainable = on;
    }

    std::size_t count(bool trainable_only = false) const {
        std::size_t n = 0;
        for (const auto& [_, p] : params_)
            if (!trainable_only || p.trainable) n += static_cast<std::size_t>(p.value.size());
        return n;
    }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(params_.size());
        for (const auto& [name, _] : params_) out.push_back(name);
        return out;
    }

    /// Copies every parameter of `other` under `prefix + name`.
    void merge_from(const ParamStore& other, const std::string& prefix = {}) {
        for (const auto& [name, p] : other.params_) {
            auto& dst = params_[prefix + name];
            dst.value = p.value;
            dst.trainable = p.trainable;
            dst.grad.resize(0, 0);
        }
    }

    template <class U>
    ParamStore<U> cast() const {
        ParamStore<U> out;
        for (const auto& [name, p] : params_) out.add(name, p.value.template cast<U>(), p.trainable);
        return out;
    }

    typename Map::iterator begin() { return params_.begin(); }
    typename Map::iterator end() { return params_.end(); }
    typename Map::const_iterator begin() const { return params_.begin(); }
    typename Map::const_iterator end() const { return params_.end(); }
    std::size_t size() const { return params_.size(); }
    bool empty() const { return params_.empty(); }

private:
    Map params_;
};

}  // namespace slt
