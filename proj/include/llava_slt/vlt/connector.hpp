#pragma once

#include "llava_slt/core/layers.hpp"
#include "llava_slt/lm/model.hpp"
#include "llava_slt/text/tokenizer.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>
#include <vector>

namespace slt::vlt {

/// kWord: two-layer MLP over word-level features (default).
/// kSentence: the same MLP over the single sentence embedding.
/// kLinear: one linear map over word-level features.
enum class ConnectorMode { kWord, kSentence, kLinear };

inline const char* mode_name(ConnectorMode m) {
    switch (m) {
        case ConnectorMode::kWord: return "word";
        case ConnectorMode::kSentence: return "sentence";
        case ConnectorMode::kLinear: return "linear";
    }
    return "?";
}

inline ConnectorMode parse_mode(const std::string& s) {
    if (s == "word") return ConnectorMode::kWord;
    if (s == "sentence") return ConnectorMode::kSentence;
    if (s == "linear") return ConnectorMode::kLinear;
    throw std::invalid_argument("unknown connector mode: " + s);
}

struct ConnectorConfig {
    int d_in = 64;
    int d_lm = 64;
    int d_hidden = 0;  // 0 -> d_lm
    ConnectorMode mode = ConnectorMode::kWord;

    int hidden() const { return d_hidden > 0 ? d_hidden : d_lm; }
};

template <class T>
struct Connector {
    ConnectorConfig cfg;
    ParamStore<T> params;

    static Connector init(const ConnectorConfig& cfg, Rng& rng) {
        if (cfg.d_in < 1 || cfg.d_lm < 1) throw std::invalid_argument("connector: widths must be >= 1");
        Connector c;
        c.cfg = cfg;
        if (cfg.mode == ConnectorMode::kLinear) {
            init_linear(c.params, "fc1", cfg.d_in, cfg.d_lm, rng);
        } else {
            init_linear(c.params, "fc1", cfg.d_in, cfg.hidden(), rng);
            init_linear(c.params, "fc2", cfg.hidden(), cfg.d_lm, rng);
        }
        return c;
    }
};

/// Row-wise map of visual tokens (T' x d_in) into LM embedding space.
template <class T>
Var<T> connect(Tape<T>& t, Connector<T>& c, Var<T> tokens) {
    if (tokens.rows() < 1) throw std::invalid_argument("connect: no visual tokens");
    if (tokens.cols() != c.cfg.d_in)
        throw std::invalid_argument("connect: token width " + std::to_string(tokens.cols()) + " != " +
                                    std::to_string(c.cfg.d_in));
    if (c.cfg.mode == ConnectorMode::kLinear) return linear(t, tokens, c.params, "fc1");
    return linear(t, ops::gelu(linear(t, tokens, c.params, "fc1")), c.params, "fc2");
}

/// Embedded multimodal sequence with next-token targets and response mask.
template <class T>
struct MultimodalBatch {
    Var<T> embeddings;  // inputs: every position except the last
    std::vector<int> targets;
    std::vector<bool> mask;
    Var<T> full;        // all positions, used for generation prefixes
};

/// Copy of `chat` whose video block holds exactly `n` slots.
inline text::TokenSequence resize_video_slot(const text::TokenSequence& chat, std::size_t n) {
    if (n == 0) throw std::invalid_argument("assemble: no video rows");
    const auto [first, last] = chat.video_span();
    text::TokenSequence out;
    out.ids.assign(chat.ids.begin(), chat.ids.begin() + static_cast<std::ptrdiff_t>(first));
    out.segments.assign(chat.segments.begin(), chat.segments.begin() + static_cast<std::ptrdiff_t>(first));
    const int vid = chat.ids[first];
    out.ids.insert(out.ids.end(), n, vid);
    out.segments.insert(out.segments.end(), n, text::Segment::kVideoSlot);
    out.ids.insert(out.ids.end(), chat.ids.begin() + static_cast<std::ptrdiff_t>(last), chat.ids.end());
    out.segments.insert(out.segments.end(), chat.segments.begin() + static_cast<std::ptrdiff_t>(last), chat.segments.end());
    return out;
}

/// Embeds `chat` with the LM table, splicing `video_rows` into the video
/// block. The loss mask selects positions whose target is a response token
/// or the closing <eos>.
template <class T>
MultimodalBatch<T> assemble(Tape<T>& t, const text::TokenSequence& chat, Var<T> video_rows, lm::LanguageModel<T>& lm) {
    if (video_rows.rows() < 1) throw std::invalid_argument("assemble: no video rows");
    if (video_rows.cols() != lm.cfg.d_model)
        throw std::invalid_argument("assemble: video rows width " + std::to_string(video_rows.cols()) +
                                    " != LM width " + std::to_string(lm.cfg.d_model));
    const text::TokenSequence seq = resize_video_slot(chat, static_cast<std::size_t>(video_rows.rows()));
    const auto [first, last] = seq.video_span();
    Var<T> table = t.param(lm.params.at("embed"));
    std::vector<Var<T>> parts;
    if (first > 0) parts.push_back(ops::gather_rows(table, std::vector<int>(seq.ids.begin(), seq.ids.begin() + static_cast<std::ptrdiff_t>(first))));
    parts.push_back(video_rows);
    if (last < seq.ids.size()) parts.push_back(ops::gather_rows(table, std::vector<int>(seq.ids.begin() + static_cast<std::ptrdiff_t>(last), seq.ids.end())));
    MultimodalBatch<T> b;
    b.full = ops::concat_rows(parts);
    const std::size_t n = seq.ids.size();
    if (n >= 2) b.embeddings = ops::slice_rows(b.full, 0, static_cast<Index>(n - 1));
    // seq[last] is the assistant marker; everything after it is response + <eos>.
    b.targets.assign(seq.ids.begin() + 1, seq.ids.end());
    b.mask.assign(n - 1, false);
    for (std::size_t p = last; p + 1 < n; ++p) b.mask[p] = true;
    return b;
}

/// Next-token loss restricted to the response.
template <class T>
Var<T> vlt_loss(Tape<T>& t, lm::LanguageModel<T>& lm, const MultimodalBatch<T>& batch) {
    if (std::find(batch.mask.begin(), batch.mask.end(), true) == batch.mask.end())
        throw std::invalid_argument("vlt_loss: empty response mask");
    return lm::ar_loss(lm::forward_embeddings(t, lm, batch.embeddings), batch.targets, batch.mask);
}

}  // namespace slt::vlt
