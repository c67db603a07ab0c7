#pragma once

#include "llava_slt/core/tensor.hpp"

#include <functional>
#include <memory>
#include <stdexcept>
#include <vector>

namespace slt {

template <class T>
class Tape;

/// Handle to a node on a tape.
template <class T>
struct Var {
    Tape<T>* tape = nullptr;
    int id = -1;

    const Matrix<T>& value() const { return tape->value(id); }
    bool requires_grad() const { return tape->requires_grad(id); }
    Index rows() const { return value().rows(); }
    Index cols() const { return value().cols(); }
    T scalar() const { return value()(0, 0); }
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so walking the
/// tape backwards is a valid topological order. Nodes that do not depend on a
/// trainable leaf carry no backward closure.
template <class T>
class Tape {
public:
    using Backward = std::function<void()>;

    Tape() { nodes_.reserve(256); }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var<T> constant(Matrix<T> value) { return push(std::move(value), false, nullptr, {}); }

    /// Differentiable leaf whose gradient is read back with `grad`.
    Var<T> variable(Matrix<T> value) { return push(std::move(value), true, nullptr, {}); }

    /// Leaf bound to a parameter; gradient flows into `p.grad` on backward
    /// when the parameter is trainable and gradients are enabled.
    Var<T> param(Param<T>& p) {
        const bool rg = grad_enabled_ && p.trainable;
        return push(p.value, rg, rg ? &p : nullptr, {});
    }

    /// Appends an op result. `backward` is dropped when no input needs grad.
    Var<T> op(Matrix<T> value, bool requires_grad, Backward backward) {
        return push(std::move(value), requires_grad, nullptr, requires_grad ? std::move(backward) : Backward{});
    }

    const Matrix<T>& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

    /// Gradient buffer of a node, zero-initialised on first access.
    Matrix<T>& grad(int id) {
        auto& n = nodes_[static_cast<std::size_t>(id)];
        if (n.grad.rows() != n.value.rows() || n.grad.cols() != n.value.cols())
            n.grad = Matrix<T>::Zero(n.value.rows(), n.value.cols());
        return n.grad;
    }
    bool has_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad.size() != 0; }

    /// Back-propagates from a 1x1 root, seeding d(root) = seed.
    void backward(Var<T> root, T seed = T(1)) {
        if (root.value().size() != 1) throw std::invalid_argument("backward: root must be a scalar");
        if (!requires_grad(root.id)) return;
        grad(root.id)(0, 0) += seed;
        for (int i = root.id; i >= 0; --i) {
            auto& n = nodes_[static_cast<std::size_t>(i)];
            if (!n.requires_grad || n.grad.size() == 0) continue;
            if (n.backward) n.backward();
            if (n.param) n.param->accumulate(n.grad);
        }
    }

    /// Disables gradient tracking for parameters bound after this call.
    void set_grad_enabled(bool on) { grad_enabled_ = on; }
    bool grad_enabled() const { return grad_enabled_; }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Matrix<T> value;
        Matrix<T> grad;
        bool requires_grad = false;
        Param<T>* param = nullptr;
        Backward backward;
    };

    Var<T> push(Matrix<T> value, bool rg, Param<T>* p, Backward bw) {
        nodes_.push_back(Node{std::move(value), {}, rg, p, std::move(bw)});
        return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
    }

    std::vector<Node> nodes_;
    bool grad_enabled_ = true;
};

}  // namespace slt
