#pragma once

#include "llava_slt/core/layers.hpp"

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace slt::visual {

struct VisualConfig {
    int d_raw = 32;
    int raw_stride = 1;    // read every k-th raw feature column (coarser input)
    int frame_hidden = 0;  // frame backbone width, 0 -> d_model
    int d_model = 64;
    int n_heads = 4;
    int local_depth = 4;  // 0 removes the word-level stack (ablation)
    int full_depth = 8;
    int window = 4;       // frames each side
    int step = 4;         // nearest-neighbour downsample step
    int d_co = 64;        // co-embedding width
    int max_words = 256;  // sentence-level position table size
    bool frame_lora = false;
    int frame_lora_rank = 8;
    double frame_lora_alpha = 16.0;

    int frame_width() const { return frame_hidden > 0 ? frame_hidden : d_model; }
    int input_width() const { return (d_raw + raw_stride - 1) / raw_stride; }

    void validate() const {
        if (d_raw < 1) throw std::invalid_argument("visual: d_raw must be >= 1");
        if (raw_stride < 1 || raw_stride > d_raw) throw std::invalid_argument("visual: raw_stride must be in [1, d_raw]");
        if (frame_hidden < 0) throw std::invalid_argument("visual: frame_hidden must be >= 0");
        if (n_heads < 1 || d_model % n_heads != 0 || (d_model / n_heads) % 2 != 0)
            throw std::invalid_argument("visual: d_model must split into even-width heads");
        if (window < 1) throw std::invalid_argument("visual: window must be >= 1");
        if (step < 1) throw std::invalid_argument("visual: step must be >= 1");
        if (local_depth < 0) throw std::invalid_argument("visual: local_depth must be >= 0");
        if (full_depth < 1) throw std::invalid_argument("visual: full_depth must be >= 1");
        if (d_co < 1) throw std::invalid_argument("visual: d_co must be >= 1");
    }
};

/// True where query i may attend to key j: |i - j| <= w.
inline Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> local_attention_mask(int length, int window) {
    if (length < 1) throw std::invalid_argument("local_attention_mask: length must be >= 1");
    Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> m(length, length);
    const ops::AttentionMask band{ops::MaskKind::kBand, window};
    for (int i = 0; i < length; ++i)
        for (int j = 0; j < length; ++j) m(i, j) = band.allowed(i, j);
    return m;
}

/// Source rows of the step-s nearest-neighbour downsample: min(j*s, T-1) for
/// j in [0, ceil(T/s)).
inline std::vector<int> downsample_indices(int length, int step) {
    if (step < 1) throw std::invalid_argument("nn_downsample: step must be >= 1");
    if (length < 1) throw std::invalid_argument("nn_downsample: empty sequence");
    std::vector<int> idx;
    const int out = (length + step - 1) / step;
    for (int j = 0; j < out; ++j) idx.push_back(std::min(j * step, length - 1));
    return idx;
}

template <class T>
Var<T> nn_downsample(Var<T> seq, int step) {
    return ops::gather_rows(seq, downsample_indices(static_cast<int>(seq.rows()), step));
}

template <class T>
Matrix<T> nn_downsample(const Matrix<T>& seq, int step) {
    const auto idx = downsample_indices(static_cast<int>(seq.rows()), step);
    Matrix<T> out(static_cast<Index>(idx.size()), seq.cols());
    for (std::size_t j = 0; j < idx.size(); ++j) out.row(static_cast<Index>(j)) = seq.row(idx[j]);
    return out;
}

/// Frame encoder -> local-attention word encoder -> downsample -> sentence
/// encoder with a learnable query token projected to the co-embedding space.
template <class T>
struct VisualEncoder {
    VisualConfig cfg;
    ParamStore<T> params;
    std::optional<LoraSet<T>> frame_lora;

    static VisualEncoder init(const VisualConfig& cfg, Rng& rng) {
        cfg.validate();
        VisualEncoder e;
        e.cfg = cfg;
        const Index d = cfg.d_model;
        init_linear(e.params, "frame.fc1", cfg.input_width(), cfg.frame_width(), rng);
        init_linear(e.params, "frame.fc2", cfg.frame_width(), d, rng);
        for (int i = 0; i < cfg.local_depth; ++i) init_block(e.params, word_prefix(i), d, 4 * d, cfg.local_depth, rng);
        init_layer_norm(e.params, "word.ln_f", d);
        e.params.add("sent.query", randn<T>(1, d, 0.02, rng));
        e.params.add("sent.pos", randn<T>(cfg.max_words + 1, d, 0.02, rng));
        for (int i = 0; i < cfg.full_depth; ++i) init_block(e.params, sent_prefix(i), d, 4 * d, cfg.full_depth, rng);
        init_layer_norm(e.params, "sent.ln_f", d);
        init_linear(e.params, "sent.proj", d, cfg.d_co, rng);
        if (cfg.frame_lora) {
            // Low-rank finetuning path of the frame backbone: base frame weights frozen.
            Rng lrng = Rng::derive({rng.next_u64()});
            e.frame_lora.emplace(attach_lora(e.params, {"frame.fc1.w", "frame.fc2.w"}, cfg.frame_lora_rank,
                                             cfg.frame_lora_alpha, lrng));
            e.params.set_trainable(true);
            e.params.set_trainable("frame.", false);
        }
        return e;
    }

    static std::string word_prefix(int i) { return "word." + std::to_string(i); }
    static std::string sent_prefix(int i) { return "sent." + std::to_string(i); }

    LoraSet<T>* lora() { return frame_lora ? &*frame_lora : nullptr; }

    template <class U>
    VisualEncoder<U> cast() const {
        VisualEncoder<U> out;
        out.cfg = cfg;
        out.params = params.template cast<U>();
        return out;
    }
};

/// Row-wise two-layer map from raw frame features to d_model.
template <class T>
Var<T> frame_encode(Tape<T>& t, VisualEncoder<T>& e, Var<T> frames) {
    if (frames.rows() < 1) throw std::invalid_argument("frame_encode: empty video");
    if (frames.cols() != e.cfg.d_raw)
        throw std::invalid_argument("frame_encode: frame width " + std::to_string(frames.cols()) + " != d_raw " +
                                    std::to_string(e.cfg.d_raw));
    if (e.cfg.raw_stride > 1) {
        Matrix<T> sel(frames.rows(), e.cfg.input_width());
        for (Index c = 0; c < sel.cols(); ++c) sel.col(c) = frames.value().col(c * e.cfg.raw_stride);
        frames = frames.tape->constant(std::move(sel));
    }
    Var<T> h = ops::gelu(linear(t, frames, e.params, "frame.fc1", e.lora()));
    return linear(t, h, e.params, "frame.fc2", e.lora());
}

/// Local-attention stack before downsampling (T x d_model).
template <class T>
Var<T> word_encode_full_rate(Tape<T>& t, VisualEncoder<T>& e, Var<T> frame_feats) {
    BlockSpec spec;
    spec.heads = e.cfg.n_heads;
    spec.mask = {ops::MaskKind::kBand, e.cfg.window};
    spec.rotary = true;
    Var<T> x = frame_feats;
    for (int i = 0; i < e.cfg.local_depth; ++i) x = transformer_block(t, x, e.params, VisualEncoder<T>::word_prefix(i), spec);
    return layer_norm(t, x, e.params, "word.ln_f");
}

/// Word-level features, ceil(T / step) x d_model.
template <class T>
Var<T> word_encode(Tape<T>& t, VisualEncoder<T>& e, Var<T> frame_feats) {
    return nn_downsample(word_encode_full_rate(t, e, frame_feats), e.cfg.step);
}

/// Normalised 1 x d_model query-position state of the sentence stack.
template <class T>
Var<T> sentence_features(Tape<T>& t, VisualEncoder<T>& e, Var<T> words) {
    if (words.rows() < 1) throw std::invalid_argument("sentence_encode: no word features");
    if (words.rows() > e.cfg.max_words)
        throw std::invalid_argument("sentence_encode: more word rows than max_words");
    Var<T> x = ops::concat_rows<T>({t.param(e.params.at("sent.query")), words});
    Var<T> pos = ops::slice_rows(t.param(e.params.at("sent.pos")), 0, x.rows());
    x = ops::add(x, pos);
    BlockSpec spec;
    spec.heads = e.cfg.n_heads;
    for (int i = 0; i < e.cfg.full_depth; ++i) x = transformer_block(t, x, e.params, VisualEncoder<T>::sent_prefix(i), spec);
    return layer_norm(t, ops::slice_rows(x, 0, 1), e.params, "sent.ln_f");
}

/// Unit-norm 1 x d_co sentence embedding read from the query position.
template <class T>
Var<T> sentence_encode(Tape<T>& t, VisualEncoder<T>& e, Var<T> words) {
    return ops::l2_normalize_rows(linear(t, sentence_features(t, e, words), e.params, "sent.proj"));
}

template <class T>
struct VisualOutputs {
    Var<T> words;
    Var<T> sentence;
};

template <class T>
VisualOutputs<T> encode(Tape<T>& t, VisualEncoder<T>& e, Var<T> frames) {
    Var<T> words = word_encode(t, e, frame_encode(t, e, frames));
    return {words, sentence_encode(t, e, words)};
}

}  // namespace slt::visual
