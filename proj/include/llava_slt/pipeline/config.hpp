#pragma once

#include "llava_slt/contrastive/losses.hpp"
#include "llava_slt/lm/model.hpp"
#include "llava_slt/lm/pretrain.hpp"
#include "llava_slt/synth/dataset.hpp"
#include "llava_slt/text/tokenizer.hpp"
#include "llava_slt/train/config.hpp"
#include "llava_slt/visual/encoder.hpp"
#include "llava_slt/vlt/connector.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace slt::pipeline {

struct PipelineConfig {
    // data
    std::uint64_t seed = 7;
    int vocab_size = 50;
    int d_raw = 32;
    synth::SplitSizes sizes{2000, 200, 200};
    double train_fraction = 1.0;
    int corpus_pairs = 4000;
    double pair_doc_ratio = 2.0;  // pair tokens : document tokens
    int document_length = 96;
    // training-time feature augmentation of stage 2 and full-tune videos
    double augment_noise = 0.0;
    double augment_resample = 0.0;

    // models
    char lm_size = 'S';
    int lm_layers = 2;
    int lm_heads = 4;
    visual::VisualConfig visual;
    int text_depth = 2;
    contrastive::ContrastiveConfig cl;
    vlt::ConnectorMode connector = vlt::ConnectorMode::kWord;

    // prompting
    text::ChatTemplate prompts;
    bool task_prompt = true;
    bool format_prompt = true;

    // stages
    bool cpt = true;
    bool full_tune = true;
    lm::PretrainConfig stage1;
    train::TrainRunConfig stage2 = train::presets::stage2();
    train::TrainRunConfig stage3 = train::presets::stage3();
    train::TrainRunConfig fulltune = train::presets::fulltune();
    int max_new_tokens = 16;
    int eval_limit = 0;  // validation sentences scored for early stopping, 0 = all

    text::ChatTemplate effective_template() const {
        text::ChatTemplate t = prompts;
        if (!task_prompt) t.task_prompt.clear();
        if (!format_prompt) t.format_prompt.clear();
        return t;
    }

    lm::LmConfig lm_config(int vocab) const {
        lm::LmConfig c = lm::LmConfig::preset(lm_size, vocab);
        c.n_layers = lm_layers;
        c.n_heads = lm_heads;
        return c;
    }

    visual::VisualConfig visual_config() const {
        visual::VisualConfig v = visual;
        v.d_raw = d_raw;
        return v;
    }

    contrastive::TextEncoderConfig text_config(int vocab) const {
        contrastive::TextEncoderConfig c;
        c.vocab = vocab;
        c.d_model = visual.d_model;
        c.n_heads = visual.n_heads;
        c.depth = text_depth;
        c.d_co = visual.d_co;
        c.max_len = 32;
        return c;
    }

    vlt::ConnectorConfig connector_config(int d_lm) const {
        vlt::ConnectorConfig c;
        c.d_in = visual.d_model;
        c.d_lm = d_lm;
        c.mode = connector;
        return c;
    }

    void validate() const {
        using train::ConfigError;
        if (vocab_size < 2) throw ConfigError("data.vocab_size", "must be >= 2");
        if (d_raw < 2) throw ConfigError("data.d_raw", "must be >= 2");
        if (sizes.train < 1) throw ConfigError("data.train", "must be >= 1");
        if (sizes.val < 1) throw ConfigError("data.val", "must be >= 1");
        if (sizes.test < 1) throw ConfigError("data.test", "must be >= 1");
        if (!(train_fraction > 0) || train_fraction > 1) throw ConfigError("data.train_fraction", "must be in (0, 1]");
        if (corpus_pairs < 0) throw ConfigError("data.corpus_pairs", "must be >= 0");
        if (!(pair_doc_ratio > 0)) throw ConfigError("data.pair_doc_ratio", "must be > 0");
        if (document_length < 2) throw ConfigError("data.document_length", "must be >= 2");
        if (augment_noise < 0) throw ConfigError("augment.noise", "must be >= 0");
        if (augment_resample < 0 || augment_resample >= 0.5) throw ConfigError("augment.resample", "must be in [0, 0.5)");
        if (lm_size != 'S' && lm_size != 'M' && lm_size != 'L') throw ConfigError("model.lm_size", "must be S, M or L");
        if (lm_layers < 1) throw ConfigError("model.lm_layers", "must be >= 1");
        try {
            lm_config(2).validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigError("model.lm_heads", e.what());
        }
        try {
            visual_config().validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigError("visual", e.what());
        }
        if (text_depth < 1) throw ConfigError("model.text_depth", "must be >= 1");
        try {
            cl.validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigError("contrastive", e.what());
        }
        if (max_new_tokens < 1) throw ConfigError("eval.max_new_tokens", "must be >= 1");
        if (eval_limit < 0) throw ConfigError("eval.limit", "must be >= 0");
        stage1.validate();
        stage2.validate("stage2");
        stage3.validate("stage3");
        fulltune.validate("fulltune");
    }
};

namespace detail {

inline void write_run(std::ostream& os, const char* section, const train::TrainRunConfig& c) {
    os << '[' << section << "]\n";
    os << "lr = " << c.max_lr << "\nweight_decay = " << c.weight_decay << "\nbatch = " << c.batch
       << "\nepochs = " << c.epochs << "\nsteps = " << c.steps << "\nwarmup = " << c.warmup << "\nseed = " << c.seed
       << "\ngrad_clip = " << c.grad_clip << "\neval_interval = " << c.eval_interval << "\npatience = " << c.patience
       << "\ncheckpoint_interval = " << c.checkpoint_interval << "\n";
}

inline bool parse_bool(const train::ConfigFile& f, const std::string& key, bool fallback) {
    const auto s = f.get<std::string>(key, fallback ? "true" : "false");
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw train::ConfigError(key, "expected true/false");
}

}  // namespace detail

/// Sectioned key-value text covering every field; round-trips through `from_file`.
inline std::string to_ini(const PipelineConfig& c) {
    std::ostringstream os;
    os.precision(17);
    os << "[data]\nseed = " << c.seed << "\nvocab_size = " << c.vocab_size << "\nd_raw = " << c.d_raw
       << "\ntrain = " << c.sizes.train << "\nval = " << c.sizes.val << "\ntest = " << c.sizes.test
       << "\ntrain_fraction = " << c.train_fraction << "\ncorpus_pairs = " << c.corpus_pairs
       << "\npair_doc_ratio = " << c.pair_doc_ratio << "\ndocument_length = " << c.document_length << "\n";
    os << "[augment]\nnoise = " << c.augment_noise << "\nresample = " << c.augment_resample << "\n";
    os << "[model]\nlm_size = " << c.lm_size << "\nlm_layers = " << c.lm_layers << "\nlm_heads = " << c.lm_heads
       << "\ntext_depth = " << c.text_depth << "\nconnector = " << vlt::mode_name(c.connector) << "\n";
    const auto& v = c.visual;
    os << "[visual]\nd_model = " << v.d_model << "\nn_heads = " << v.n_heads << "\nlocal_depth = " << v.local_depth
       << "\nfull_depth = " << v.full_depth << "\nwindow = " << v.window << "\nstep = " << v.step
       << "\nd_co = " << v.d_co << "\nmax_words = " << v.max_words << "\nraw_stride = " << v.raw_stride
       << "\nframe_hidden = " << v.frame_hidden << "\n";
    os << "[contrastive]\nlambda = " << c.cl.lambda << "\ntemperature = " << c.cl.temperature_init
       << "\nmargin = " << c.cl.margin << "\npush_offset = " << c.cl.push_offset << "\n";
    os << "[prompt]\nsystem = " << c.prompts.system << "\ntask = " << c.prompts.task_prompt
       << "\nformat = " << c.prompts.format_prompt << "\nuse_task = " << (c.task_prompt ? "true" : "false")
       << "\nuse_format = " << (c.format_prompt ? "true" : "false") << "\n";
    os << "[pipeline]\ncpt = " << (c.cpt ? "true" : "false") << "\nfull_tune = " << (c.full_tune ? "true" : "false")
       << "\n";
    os << "[eval]\nmax_new_tokens = " << c.max_new_tokens << "\nlimit = " << c.eval_limit << "\n";
    detail::write_run(os, "stage1", c.stage1.run);
    os << "context = " << c.stage1.context << "\np_perm = " << c.stage1.p_perm
       << "\nuse_lora = " << (c.stage1.use_lora ? "true" : "false") << "\nlora_rank = " << c.stage1.lora_rank
       << "\nlora_alpha = " << c.stage1.lora_alpha << "\n";
    detail::write_run(os, "stage2", c.stage2);
    detail::write_run(os, "stage3", c.stage3);
    detail::write_run(os, "fulltune", c.fulltune);
    return os.str();
}

/// Overlays the keys present in `f` onto `base`.
inline PipelineConfig from_file(const train::ConfigFile& f, PipelineConfig c) {
    c.seed = f.get("data.seed", c.seed);
    c.vocab_size = f.get("data.vocab_size", c.vocab_size);
    c.d_raw = f.get("data.d_raw", c.d_raw);
    c.sizes.train = f.get("data.train", c.sizes.train);
    c.sizes.val = f.get("data.val", c.sizes.val);
    c.sizes.test = f.get("data.test", c.sizes.test);
    c.train_fraction = f.get("data.train_fraction", c.train_fraction);
    c.corpus_pairs = f.get("data.corpus_pairs", c.corpus_pairs);
    c.pair_doc_ratio = f.get("data.pair_doc_ratio", c.pair_doc_ratio);
    c.document_length = f.get("data.document_length", c.document_length);
    c.augment_noise = f.get("augment.noise", c.augment_noise);
    c.augment_resample = f.get("augment.resample", c.augment_resample);
    const auto size = f.get<std::string>("model.lm_size", std::string(1, c.lm_size));
    if (size.size() != 1) throw train::ConfigError("model.lm_size", "must be S, M or L");
    c.lm_size = size[0];
    c.lm_layers = f.get("model.lm_layers", c.lm_layers);
    c.lm_heads = f.get("model.lm_heads", c.lm_heads);
    c.text_depth = f.get("model.text_depth", c.text_depth);
    try {
        c.connector = vlt::parse_mode(f.get<std::string>("model.connector", vlt::mode_name(c.connector)));
    } catch (const std::invalid_argument& e) {
        throw train::ConfigError("model.connector", e.what());
    }
    auto& v = c.visual;
    v.d_model = f.get("visual.d_model", v.d_model);
    v.n_heads = f.get("visual.n_heads", v.n_heads);
    v.local_depth = f.get("visual.local_depth", v.local_depth);
    v.full_depth = f.get("visual.full_depth", v.full_depth);
    v.window = f.get("visual.window", v.window);
    v.step = f.get("visual.step", v.step);
    v.d_co = f.get("visual.d_co", v.d_co);
    v.max_words = f.get("visual.max_words", v.max_words);
    v.raw_stride = f.get("visual.raw_stride", v.raw_stride);
    v.frame_hidden = f.get("visual.frame_hidden", v.frame_hidden);
    c.cl.lambda = f.get("contrastive.lambda", c.cl.lambda);
    c.cl.temperature_init = f.get("contrastive.temperature", c.cl.temperature_init);
    c.cl.margin = f.get("contrastive.margin", c.cl.margin);
    c.cl.push_offset = f.get("contrastive.push_offset", c.cl.push_offset);
    c.prompts.system = f.get("prompt.system", c.prompts.system);
    c.prompts.task_prompt = f.get("prompt.task", c.prompts.task_prompt);
    c.prompts.format_prompt = f.get("prompt.format", c.prompts.format_prompt);
    c.task_prompt = detail::parse_bool(f, "prompt.use_task", c.task_prompt);
    c.format_prompt = detail::parse_bool(f, "prompt.use_format", c.format_prompt);
    c.cpt = detail::parse_bool(f, "pipeline.cpt", c.cpt);
    c.full_tune = detail::parse_bool(f, "pipeline.full_tune", c.full_tune);
    c.max_new_tokens = f.get("eval.max_new_tokens", c.max_new_tokens);
    c.eval_limit = f.get("eval.limit", c.eval_limit);
    c.stage1.run = f.stage("stage1", c.stage1.run);
    c.stage1.context = f.get("stage1.context", c.stage1.context);
    c.stage1.p_perm = f.get("stage1.p_perm", c.stage1.p_perm);
    c.stage1.use_lora = detail::parse_bool(f, "stage1.use_lora", c.stage1.use_lora);
    c.stage1.lora_rank = f.get("stage1.lora_rank", c.stage1.lora_rank);
    c.stage1.lora_alpha = f.get("stage1.lora_alpha", c.stage1.lora_alpha);
    c.stage2 = f.stage("stage2", c.stage2);
    c.stage3 = f.stage("stage3", c.stage3);
    c.fulltune = f.stage("fulltune", c.fulltune);
    c.validate();
    return c;
}

/// Named starting points: "paper" keeps the reported hyperparameters;
/// "desk" is sized for one CPU core; "smoke" finishes in a few minutes.
inline PipelineConfig preset(const std::string& name) {
    PipelineConfig c;
    if (name == "paper") {
        c.visual.d_model = 64;
        c.stage1.run.eval_interval = 0;
        return c;
    }
    if (name != "desk" && name != "smoke") throw train::ConfigError("preset", "unknown preset '" + name + "'");
    c.augment_noise = 0.1;
    c.augment_resample = 0.1;
    c.visual.d_model = 64;
    c.visual.n_heads = 4;
    c.visual.local_depth = 2;
    c.visual.full_depth = 2;
    c.visual.d_co = 64;
    c.lm_layers = 4;
    c.stage1.context = 64;
    c.stage1.use_lora = false;
    c.stage1.run.max_lr = 2e-3;
    c.stage1.run.batch = 16;
    c.stage1.run.epochs = 40;
    c.stage2.max_lr = 1e-3;
    c.stage2.batch = 32;
    c.stage2.epochs = 20;
    c.stage3.max_lr = 1e-3;
    c.stage3.batch = 16;
    c.stage3.epochs = 3;
    c.stage3.patience = 3;
    c.fulltune.max_lr = 1e-3;
    c.fulltune.weight_decay = 0.1;
    c.fulltune.batch = 16;
    c.fulltune.epochs = 30;
    c.fulltune.patience = 10;
    c.eval_limit = 100;
    if (name == "smoke") {
        c.vocab_size = 12;
        c.sizes = {64, 16, 16};
        c.corpus_pairs = 128;
        c.stage1.run.epochs = 1;
        c.stage2.epochs = 1;
        c.stage3.epochs = 2;
        c.fulltune.epochs = 1;
        c.max_new_tokens = 12;
        c.eval_limit = 16;
    }
    c.stage3.eval_interval = -1;
    c.fulltune.eval_interval = -1;
    return c;
}

inline const std::vector<std::string>& ablation_names() {
    static const std::vector<std::string> names{
        "full",       "no-cpt",      "llm-size-S",  "llm-size-M",           "llm-size-L",       "no-local-attention",
        "small-draw", "data-50pct",  "sentence-level-feature", "linear-connector", "no-format-prompt", "no-prompt",
        "no-fulltune"};
    return names;
}

/// Applies one named ablation axis to `c`.
inline PipelineConfig apply_ablation(PipelineConfig c, const std::string& name) {
    if (name == "full") {
    } else if (name == "no-cpt") {
        c.cpt = false;
    } else if (name == "llm-size-S" || name == "llm-size-M" || name == "llm-size-L") {
        c.lm_size = name.back();
    } else if (name == "no-local-attention") {
        c.visual.local_depth = 0;
    } else if (name == "small-draw") {
        c.visual.frame_hidden = std::max(2, c.visual.d_model / 2);
        c.visual.raw_stride = 2;
    } else if (name == "data-50pct") {
        c.train_fraction = 0.5;
    } else if (name == "sentence-level-feature") {
        c.connector = vlt::ConnectorMode::kSentence;
    } else if (name == "linear-connector") {
        c.connector = vlt::ConnectorMode::kLinear;
    } else if (name == "no-format-prompt") {
        c.format_prompt = false;
    } else if (name == "no-prompt") {
        c.format_prompt = false;
        c.task_prompt = false;
    } else if (name == "no-fulltune") {
        c.full_tune = false;
    } else {
        throw train::ConfigError("ablation", "unknown ablation '" + name + "'");
    }
    c.validate();
    return c;
}

}  // namespace slt::pipeline
