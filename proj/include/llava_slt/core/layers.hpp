#pragma once

#include "llava_slt/core/lora.hpp"
#include "llava_slt/core/ops.hpp"

#include <cmath>
#include <string>

namespace slt {

/// Gaussian init with standard deviation `sd`.
template <class T>
Matrix<T> randn(Index rows, Index cols, double sd, Rng& rng) {
    Matrix<T> m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(rng.normal() * sd);
    return m;
}

/// Registers `<name>.w` (d_in x d_out) and, optionally, a zero `<name>.b`.
template <class T>
void init_linear(ParamStore<T>& ps, const std::string& name, Index d_in, Index d_out, Rng& rng, bool bias = true,
                 double gain = 1.0) {
    ps.add(name + ".w", randn<T>(d_in, d_out, gain / std::sqrt(static_cast<double>(d_in)), rng));
    if (bias) ps.add(name + ".b", Matrix<T>::Zero(1, d_out));
}

template <class T>
void init_layer_norm(ParamStore<T>& ps, const std::string& name, Index d) {
    ps.add(name + ".g", Matrix<T>::Ones(1, d));
    ps.add(name + ".b", Matrix<T>::Zero(1, d));
}

/// x * W (+ b) (+ lora delta when an adapter targets `<name>.w`).
template <class T>
Var<T> linear(Tape<T>& t, Var<T> x, ParamStore<T>& ps, const std::string& name, LoraSet<T>* lora = nullptr) {
    const std::string wname = name + ".w";
    Var<T> y = ops::matmul(x, t.param(ps.at(wname)));
    const std::string bname = name + ".b";
    if (ps.contains(bname)) y = ops::add_row(y, t.param(ps.at(bname)));
    if (lora) {
        if (auto* ad = lora->find(wname)) {
            Var<T> low = ops::matmul_nt(x, t.param(ad->a));
            Var<T> delta = ops::matmul_nt(low, t.param(ad->b));
            y = ops::add(y, ops::scale(delta, static_cast<T>(ad->scaling())));
        }
    }
    return y;
}

template <class T>
Var<T> layer_norm(Tape<T>& t, Var<T> x, ParamStore<T>& ps, const std::string& name) {
    return ops::layer_norm(x, t.param(ps.at(name + ".g")), t.param(ps.at(name + ".b")));
}

/// Pre-norm transformer block: x + Attn(LN(x)), then + MLP(LN(x)).
struct BlockSpec {
    int heads = 1;
    ops::AttentionMask mask{};
    bool rotary = false;
};

template <class T>
void init_block(ParamStore<T>& ps, const std::string& prefix, Index d, Index d_ff, int depth, Rng& rng) {
    const double out_gain = 1.0 / std::sqrt(2.0 * std::max(depth, 1));
    init_layer_norm(ps, prefix + ".ln1", d);
    init_linear(ps, prefix + ".attn.q", d, d, rng, false);
    init_linear(ps, prefix + ".attn.k", d, d, rng, false);
    init_linear(ps, prefix + ".attn.v", d, d, rng, false);
    init_linear(ps, prefix + ".attn.o", d, d, rng, false, out_gain);
    init_layer_norm(ps, prefix + ".ln2", d);
    init_linear(ps, prefix + ".mlp.fc", d, d_ff, rng);
    init_linear(ps, prefix + ".mlp.proj", d_ff, d, rng, true, out_gain);
}

template <class T>
Var<T> transformer_block(Tape<T>& t, Var<T> x, ParamStore<T>& ps, const std::string& prefix, const BlockSpec& spec,
                         LoraSet<T>* lora = nullptr) {
    Var<T> h = layer_norm(t, x, ps, prefix + ".ln1");
    Var<T> q = linear(t, h, ps, prefix + ".attn.q", lora);
    Var<T> k = linear(t, h, ps, prefix + ".attn.k", lora);
    Var<T> v = linear(t, h, ps, prefix + ".attn.v", lora);
    ops::AttentionSpec as;
    as.heads = spec.heads;
    as.mask = spec.mask;
    as.rotary = spec.rotary;
    Var<T> a = ops::attention(q, k, v, as);
    x = ops::add(x, linear(t, a, ps, prefix + ".attn.o", lora));
    Var<T> h2 = layer_norm(t, x, ps, prefix + ".ln2");
    Var<T> m = linear(t, ops::gelu(linear(t, h2, ps, prefix + ".mlp.fc", lora)), ps, prefix + ".mlp.proj", lora);
    return ops::add(x, m);
}

}  // namespace slt
