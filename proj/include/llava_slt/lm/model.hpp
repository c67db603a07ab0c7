#pragma once

#include "llava_slt/core/layers.hpp"

#include <algorithm>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace slt::lm {

struct LmConfig {
    int vocab = 0;
    int d_model = 128;
    int n_layers = 4;
    int n_heads = 4;
    int d_ff = 0;  // 0 -> 4 * d_model

    int ff() const { return d_ff > 0 ? d_ff : 4 * d_model; }

    void validate() const {
        if (vocab < 1) throw std::invalid_argument("lm: vocab must be >= 1");
        if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0)
            throw std::invalid_argument("lm: d_model must be divisible by n_heads");
        if ((d_model / n_heads) % 2 != 0) throw std::invalid_argument("lm: head width must be even (rotary)");
        if (n_layers < 0) throw std::invalid_argument("lm: n_layers must be >= 0");
    }

    /// Model-size presets S/M/L.
    static LmConfig preset(char size, int vocab) {
        LmConfig c;
        c.vocab = vocab;
        switch (size) {
            case 'S': c.d_model = 64; break;
            case 'M': c.d_model = 128; break;
            case 'L': c.d_model = 256; break;
            default: throw std::invalid_argument("lm: unknown size preset");
        }
        return c;
    }
};

/// Decoder-only transformer with rotary positions and causal attention.
/// Parameters: embed (V x d), layers.<i>.*, final_ln, head (d x V).
template <class T>
struct LanguageModel {
    LmConfig cfg;
    ParamStore<T> params;

    static LanguageModel init(const LmConfig& cfg, Rng& rng) {
        cfg.validate();
        LanguageModel m;
        m.cfg = cfg;
        m.params.add("embed", randn<T>(cfg.vocab, cfg.d_model, 1.0, rng));
        for (int i = 0; i < cfg.n_layers; ++i)
            init_block(m.params, layer_prefix(i), cfg.d_model, cfg.ff(), cfg.n_layers, rng);
        init_layer_norm(m.params, "final_ln", cfg.d_model);
        m.params.add("head.w", randn<T>(cfg.d_model, cfg.vocab, 1.0 / std::sqrt(static_cast<double>(cfg.d_model)), rng));
        return m;
    }

    static std::string layer_prefix(int i) { return "layers." + std::to_string(i); }

    /// Names of the query and value projection weights (default adapter targets).
    std::vector<std::string> attention_qv_targets() const {
        std::vector<std::string> out;
        for (int i = 0; i < cfg.n_layers; ++i) {
            out.push_back(layer_prefix(i) + ".attn.q.w");
            out.push_back(layer_prefix(i) + ".attn.v.w");
        }
        return out;
    }

    template <class U>
    LanguageModel<U> cast() const {
        return {cfg, params.template cast<U>()};
    }
};

/// Token embeddings for `ids` (rows of the embedding table).
template <class T>
Var<T> embed(Tape<T>& t, LanguageModel<T>& m, const std::vector<int>& ids) {
    if (ids.empty()) throw std::invalid_argument("lm: empty sequence");
    for (int id : ids)
        if (id < 0 || id >= m.cfg.vocab) throw std::invalid_argument("lm: token id out of range");
    return ops::gather_rows(t.param(m.params.at("embed")), ids);
}

/// Logits (T x V) from pre-built input rows (T x d_model).
template <class T>
Var<T> forward_embeddings(Tape<T>& t, LanguageModel<T>& m, Var<T> x, LoraSet<T>* lora = nullptr) {
    if (x.rows() < 1) throw std::invalid_argument("lm: empty sequence");
    if (x.cols() != m.cfg.d_model)
        throw std::invalid_argument("lm: embedding width " + std::to_string(x.cols()) + " != d_model " +
                                    std::to_string(m.cfg.d_model));
    BlockSpec spec;
    spec.heads = m.cfg.n_heads;
    spec.mask = {ops::MaskKind::kCausal, 0};
    spec.rotary = true;
    for (int i = 0; i < m.cfg.n_layers; ++i) x = transformer_block(t, x, m.params, LanguageModel<T>::layer_prefix(i), spec, lora);
    x = layer_norm(t, x, m.params, "final_ln");
    return linear(t, x, m.params, "head", lora);
}

template <class T>
Var<T> forward(Tape<T>& t, LanguageModel<T>& m, const std::vector<int>& ids, LoraSet<T>* lora = nullptr) {
    return forward_embeddings(t, m, embed(t, m, ids), lora);
}

/// Mean next-token cross-entropy over positions where `mask` is set.
template <class T>
Var<T> ar_loss(Var<T> logits, const std::vector<int>& targets, const std::vector<bool>& mask) {
    return ops::cross_entropy(logits, targets, mask);
}

/// Inputs/targets for next-token prediction over a whole sequence:
/// position i predicts ids[i + 1].
struct NextTokenExample {
    std::vector<int> inputs;
    std::vector<int> targets;
    std::vector<bool> mask;
};

inline NextTokenExample shift_for_lm(const std::vector<int>& ids) {
    if (ids.size() < 2) throw std::invalid_argument("lm: need at least two tokens for next-token loss");
    NextTokenExample ex;
    ex.inputs.assign(ids.begin(), ids.end() - 1);
    ex.targets.assign(ids.begin() + 1, ids.end());
    ex.mask.assign(ex.targets.size(), true);
    return ex;
}

/// Greedy decoding from pre-built prefix rows. Stops at `eos` (not included)
/// or after `max_new` tokens.
template <class T>
std::vector<int> generate_from_embeddings(LanguageModel<T>& m, Matrix<T> prefix, int max_new, int eos,
                                          LoraSet<T>* lora = nullptr) {
    if (max_new < 1) throw std::invalid_argument("generate: max_new must be >= 1");
    std::vector<int> out;
    const auto& table = m.params.at("embed").value;
    for (int step = 0; step < max_new; ++step) {
        Tape<T> t;
        t.set_grad_enabled(false);
        Var<T> logits = forward_embeddings(t, m, t.constant(prefix), lora);
        Index best = 0;
        logits.value().row(logits.rows() - 1).maxCoeff(&best);
        const int next = static_cast<int>(best);
        if (next == eos) break;
        out.push_back(next);
        prefix.conservativeResize(prefix.rows() + 1, Eigen::NoChange);
        prefix.row(prefix.rows() - 1) = table.row(next);
    }
    return out;
}

template <class T>
std::vector<int> generate(LanguageModel<T>& m, const std::vector<int>& prefix_ids, int max_new, int eos,
                          LoraSet<T>* lora = nullptr) {
    if (prefix_ids.empty()) throw std::invalid_argument("generate: empty prefix");
    const auto& table = m.params.at("embed").value;
    Matrix<T> prefix(static_cast<Index>(prefix_ids.size()), m.cfg.d_model);
    for (std::size_t i = 0; i < prefix_ids.size(); ++i) prefix.row(static_cast<Index>(i)) = table.row(prefix_ids[i]);
    return generate_from_embeddings(m, std::move(prefix), max_new, eos, lora);
}

}  // namespace slt::lm
