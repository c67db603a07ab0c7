#pragma once

#include "llava_slt/core/layers.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace slt::contrastive {

struct ContrastiveConfig {
    double lambda = 1e-2;            // SignCL strength
    double temperature_init = 0.07;  // CLIP temperature, learned as log(tau)
    double margin = 1.0;             // SignCL push margin
    int push_offset = 2;             // SignCL push distance in rows
    bool freeze_text_encoder = false;

    void validate() const {
        if (lambda < 0) throw std::invalid_argument("contrastive: lambda must be >= 0");
        if (!(temperature_init > 0)) throw std::invalid_argument("contrastive: temperature must be > 0");
        if (!(margin > 0)) throw std::invalid_argument("contrastive: margin must be > 0");
        if (push_offset < 1) throw std::invalid_argument("contrastive: push_offset must be >= 1");
    }
};

struct TextEncoderConfig {
    int vocab = 0;
    int d_model = 64;
    int n_heads = 4;
    int depth = 2;
    int d_co = 64;
    int max_len = 64;
    bool causal = false;  // causal attention + last-token pooling instead of mean pooling
};

/// Small transformer text tower mapping token ids to a unit-norm co-embedding.
template <class T>
struct TextEncoder {
    TextEncoderConfig cfg;
    ParamStore<T> params;

    static TextEncoder init(const TextEncoderConfig& cfg, Rng& rng) {
        if (cfg.vocab < 1) throw std::invalid_argument("text encoder: vocab must be >= 1");
        TextEncoder e;
        e.cfg = cfg;
        e.params.add("embed", randn<T>(cfg.vocab, cfg.d_model, 1.0, rng));
        e.params.add("pos", randn<T>(cfg.max_len, cfg.d_model, 0.02, rng));
        for (int i = 0; i < cfg.depth; ++i)
            init_block(e.params, "layers." + std::to_string(i), cfg.d_model, 4 * cfg.d_model, cfg.depth, rng);
        init_layer_norm(e.params, "ln_f", cfg.d_model);
        init_linear(e.params, "proj", cfg.d_model, cfg.d_co, rng);
        return e;
    }
};

template <class T>
Var<T> text_encode(Tape<T>& t, TextEncoder<T>& e, const std::vector<int>& ids) {
    if (ids.empty()) throw std::invalid_argument("text_encode: empty text");
    if (static_cast<int>(ids.size()) > e.cfg.max_len) throw std::invalid_argument("text_encode: text longer than max_len");
    Var<T> x = ops::gather_rows(t.param(e.params.at("embed")), ids);
    x = ops::add(x, ops::slice_rows(t.param(e.params.at("pos")), 0, x.rows()));
    BlockSpec spec;
    spec.heads = e.cfg.n_heads;
    spec.mask = {e.cfg.causal ? ops::MaskKind::kCausal : ops::MaskKind::kFull, 0};
    for (int i = 0; i < e.cfg.depth; ++i) x = transformer_block(t, x, e.params, "layers." + std::to_string(i), spec);
    x = layer_norm(t, x, e.params, "ln_f");
    Var<T> pooled = e.cfg.causal ? ops::slice_rows(x, x.rows() - 1, 1) : ops::mean_rows(x);
    return ops::l2_normalize_rows(linear(t, pooled, e.params, "proj"));
}

namespace detail {

template <class T>
void require_unit_rows(const Matrix<T>& m, const char* what) {
    for (Index r = 0; r < m.rows(); ++r)
        if (std::abs(static_cast<double>(m.row(r).norm()) - 1.0) > 1e-4)
            throw std::invalid_argument(std::string("clip_loss: ") + what + " row " + std::to_string(r) + " is not unit-norm");
}

}  // namespace detail

/// Symmetric InfoNCE over a batch of matched (video, text) rows with
/// logits V T^T / tau, tau = exp(log_tau).
template <class T>
Var<T> clip_loss(Var<T> video, Var<T> text, Var<T> log_tau) {
    if (video.rows() < 1 || video.rows() != text.rows() || video.cols() != text.cols())
        throw std::invalid_argument("clip_loss: batch shapes differ");
    detail::require_unit_rows(video.value(), "video");
    detail::require_unit_rows(text.value(), "text");
    const auto b = static_cast<std::size_t>(video.rows());
    std::vector<int> diag(b);
    std::iota(diag.begin(), diag.end(), 0);
    const std::vector<bool> all(b, true);
    Var<T> inv_tau = ops::exp(ops::scale(log_tau, T(-1)));
    Var<T> logits = ops::mul_scalar(ops::matmul_nt(video, text), inv_tau);
    Var<T> v2t = ops::cross_entropy(logits, diag, all);
    Var<T> t2v = ops::cross_entropy(ops::transpose(logits), diag, all);
    return ops::scale(ops::add(v2t, t2v), T(0.5));
}

template <class T>
struct SignclResult {
    Var<T> loss;
    bool skipped = false;
};

/// Pull adjacent word rows together, push rows `push_offset` apart beyond
/// `margin`. Sequences too short for the push term are skipped (loss 0).
template <class T>
SignclResult<T> signcl_loss(Var<T> words, const ContrastiveConfig& cfg) {
    if (words.rows() < cfg.push_offset + 1) {
        Matrix<T> zero = Matrix<T>::Zero(1, 1);
        return {words.tape->constant(std::move(zero)), true};
    }
    return {ops::signcl(words, static_cast<T>(cfg.margin), cfg.push_offset), false};
}

template <class T>
struct TotalLoss {
    Var<T> total;
    Var<T> clip;
    double signcl_mean = 0;
    int skipped = 0;
};

/// clip_loss + lambda * mean over the batch of signcl_loss.
template <class T>
TotalLoss<T> total_cl_loss(Var<T> video, Var<T> text, const std::vector<Var<T>>& words, Var<T> log_tau,
                           const ContrastiveConfig& cfg) {
    TotalLoss<T> out;
    out.clip = clip_loss(video, text, log_tau);
    out.total = out.clip;
    std::vector<Var<T>> terms;
    for (const auto& w : words) {
        auto r = signcl_loss(w, cfg);
        if (r.skipped) {
            ++out.skipped;
            continue;
        }
        terms.push_back(r.loss);
    }
    if (!terms.empty() && cfg.lambda != 0) {
        Var<T> s = ops::sum(ops::concat_rows(terms));
        Var<T> mean = ops::scale(s, T(1) / static_cast<T>(terms.size()));
        out.signcl_mean = static_cast<double>(mean.scalar());
        out.total = ops::add(out.clip, ops::scale(mean, static_cast<T>(cfg.lambda)));
    } else if (!terms.empty()) {
        double acc = 0;
        for (const auto& v : terms) acc += static_cast<double>(v.scalar());
        out.signcl_mean = acc / static_cast<double>(terms.size());
    }
    return out;
}

}  // namespace slt::contrastive
