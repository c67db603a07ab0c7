#pragma once

#include "llava_slt/lm/model.hpp"
#include "llava_slt/synth/language.hpp"
#include "llava_slt/text/tokenizer.hpp"
#include "llava_slt/train/runner.hpp"

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace slt::lm {

/// Boundary token between the gloss and text blocks of a serialised pair.
inline constexpr const char* kSeparator = "<sep>";

struct PretrainConfig {
    int context = 256;    // sliding window k over documents
    double p_perm = 0.5;  // probability of serialising a pair text-first
    train::TrainRunConfig run = train::presets::stage1();
    bool use_lora = true;
    int lora_rank = 8;
    double lora_alpha = 16.0;
    std::vector<std::string> lora_targets;  // empty: attention q/v of every layer
    bool train_embeddings = true;           // keep embed/head trainable next to the adapters
    bool merge = true;                      // fold adapters into the base after training

    void validate() const {
        if (context < 2) throw train::ConfigError("stage1.context", "must be >= 2");
        if (p_perm < 0 || p_perm > 1) throw train::ConfigError("stage1.p_perm", "must be in [0, 1]");
        if (use_lora && lora_rank < 1) throw train::ConfigError("stage1.lora_rank", "must be >= 1");
        run.validate("stage1");
    }
};

struct PretrainCorpus {
    std::vector<synth::GlossTextPair> pairs;
    std::vector<synth::Tokens> documents;
};

/// Windows of at most `window` tokens taken every `stride` tokens.
inline std::vector<synth::Tokens> chunk_document(const synth::Tokens& doc, int window, int stride) {
    if (window < 1 || stride < 1) throw std::invalid_argument("chunk_document: window and stride must be >= 1");
    std::vector<synth::Tokens> out;
    for (std::size_t start = 0; start < doc.size(); start += static_cast<std::size_t>(stride)) {
        const auto end = std::min(doc.size(), start + static_cast<std::size_t>(window));
        out.emplace_back(doc.begin() + static_cast<std::ptrdiff_t>(start), doc.begin() + static_cast<std::ptrdiff_t>(end));
        if (end == doc.size()) break;
    }
    return out;
}

/// <bos> first <sep> second <eos>, gloss-first unless `text_first`.
inline std::vector<int> serialize_pair(const text::Vocab& vocab, const synth::GlossTextPair& p, bool text_first) {
    std::vector<int> ids{vocab.id(text::Special::kBos)};
    const auto& a = text_first ? p.text : p.gloss;
    const auto& b = text_first ? p.gloss : p.text;
    for (const auto& tok : a) ids.push_back(vocab.id(tok));
    ids.push_back(vocab.id(kSeparator));
    for (const auto& tok : b) ids.push_back(vocab.id(tok));
    ids.push_back(vocab.id(text::Special::kEos));
    return ids;
}

template <class T>
struct PretrainResult {
    train::RunResult run;
    std::optional<LoraSet<T>> adapters;  // set when adapters were kept unmerged
    long n_pairs = 0;
    long n_chunks = 0;
};

/// Next-token pretraining over serialised pairs (order swapped with
/// probability p_perm) and stride-k windows of the documents.
template <class T>
PretrainResult<T> continued_pretrain(LanguageModel<T>& model, const text::Vocab& vocab, const PretrainCorpus& corpus,
                                     const PretrainConfig& cfg, const train::RunOptions& opts = {}) {
    cfg.validate();
    std::vector<std::vector<int>> chunks;
    for (const auto& doc : corpus.documents)
        for (const auto& c : chunk_document(doc, cfg.context, cfg.context)) {
            if (c.size() < 2) continue;
            chunks.push_back(vocab.encode(c));
        }
    const int n_pairs = static_cast<int>(corpus.pairs.size());
    const int n = n_pairs + static_cast<int>(chunks.size());
    if (n == 0) throw std::invalid_argument("continued_pretrain: empty corpus");

    PretrainResult<T> result;
    result.n_pairs = n_pairs;
    result.n_chunks = static_cast<long>(chunks.size());

    std::optional<LoraSet<T>> lora;
    if (cfg.use_lora) {
        Rng lrng = Rng::derive({cfg.run.seed, 0x6c6f7261ULL});
        const auto targets = cfg.lora_targets.empty() ? model.attention_qv_targets() : cfg.lora_targets;
        lora.emplace(attach_lora(model.params, targets, cfg.lora_rank, cfg.lora_alpha, lrng));
        if (cfg.train_embeddings) {
            model.params.at("embed").trainable = true;
            model.params.at("head.w").trainable = true;
        }
    }

    auto params = train::trainable_params(model.params);
    if (lora) lora->for_each_param([&](const std::string& name, Param<T>& p) { params.emplace_back(name, &p); });

    LoraSet<T>* lp = lora ? &*lora : nullptr;
    const train::StepFn step = [&](std::span<const int> batch, Rng& rng) {
        double total = 0;
        const T w = T(1) / static_cast<T>(batch.size());
        for (int idx : batch) {
            const std::vector<int> ids = idx < n_pairs
                                             ? serialize_pair(vocab, corpus.pairs[static_cast<std::size_t>(idx)], rng.bernoulli(cfg.p_perm))
                                             : chunks[static_cast<std::size_t>(idx - n_pairs)];
            const auto ex = shift_for_lm(ids);
            Tape<T> t;
            Var<T> loss = ar_loss(forward(t, model, ex.inputs, lp), ex.targets, ex.mask);
            t.backward(loss, w);
            total += static_cast<double>(loss.scalar());
        }
        return total / static_cast<double>(batch.size());
    };
    train::RunOptions o = opts;
    if (o.stage == "stage") o.stage = "stage1";
    result.run = train::run_stage<T>(cfg.run, params, n, step, o);

    if (lora) {
        if (cfg.merge) {
            model.params = merge_lora(std::move(model.params), std::move(*lora));
        } else {
            result.adapters = std::move(lora);
        }
    }
    model.params.set_trainable(true);
    return result;
}

}  // namespace slt::lm
