#pragma once

#include "llava_slt/metrics/metrics.hpp"
#include "llava_slt/pipeline/config.hpp"
#include "llava_slt/train/checkpoint.hpp"
#include "llava_slt/train/runner.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace slt::pipeline {

namespace fs = std::filesystem;

/// Thrown when a stage is asked to run before the stages it depends on.
class StageOrderError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Example {
    std::string id;
    synth::Tokens gloss;
    synth::Tokens text;
    Matrix<float> frames;
};

/// Directory layout under one --workdir.
struct Workspace {
    fs::path root;
    fs::path bundle_dir;  // empty: <root>/bundle

    fs::path config() const { return root / "config.ini"; }
    fs::path data() const { return root / "data"; }
    fs::path manifest(synth::Split s) const { return data() / (std::string(synth::split_name(s)) + ".tsv"); }
    fs::path vocab() const { return data() / "vocab.tsv"; }
    fs::path bundle() const { return bundle_dir.empty() ? root / "bundle" : bundle_dir; }
    fs::path runs(const std::string& stage) const { return root / "runs" / stage; }
    fs::path reports() const { return root / "reports"; }
};

// ---------------------------------------------------------------------------
// key=value manifest of a bundle

using KeyValues = std::map<std::string, std::string>;

inline KeyValues read_kv(const fs::path& path) {
    KeyValues kv;
    std::ifstream is(path);
    std::string line;
    while (std::getline(is, line)) {
        const auto eq = line.find('=');
        if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return kv;
}

inline void write_kv(const fs::path& path, const KeyValues& kv) {
    fs::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    for (const auto& [k, v] : kv) os << k << '=' << v << '\n';
}

inline std::string hash_text(const std::string& s) { return train::hex64(train::fnv1a(s)); }

// ---------------------------------------------------------------------------
// component configs as text (hashed into the bundle manifest)

inline std::string describe(const lm::LmConfig& c) {
    std::ostringstream os;
    os << "vocab=" << c.vocab << "\nd_model=" << c.d_model << "\nn_layers=" << c.n_layers << "\nn_heads=" << c.n_heads
       << "\nd_ff=" << c.ff() << "\n";
    return os.str();
}

inline std::string describe(const visual::VisualConfig& v) {
    std::ostringstream os;
    os << "d_raw=" << v.d_raw << "\nraw_stride=" << v.raw_stride << "\nframe_hidden=" << v.frame_width()
       << "\nd_model=" << v.d_model << "\nn_heads=" << v.n_heads << "\nlocal_depth=" << v.local_depth
       << "\nfull_depth=" << v.full_depth << "\nwindow=" << v.window << "\nstep=" << v.step << "\nd_co=" << v.d_co
       << "\nmax_words=" << v.max_words << "\n";
    return os.str();
}

inline std::string describe(const contrastive::TextEncoderConfig& c) {
    std::ostringstream os;
    os << "vocab=" << c.vocab << "\nd_model=" << c.d_model << "\nn_heads=" << c.n_heads << "\ndepth=" << c.depth
       << "\nd_co=" << c.d_co << "\nmax_len=" << c.max_len << "\n";
    return os.str();
}

inline std::string describe(const vlt::ConnectorConfig& c) {
    std::ostringstream os;
    os << "d_in=" << c.d_in << "\nd_lm=" << c.d_lm << "\nd_hidden=" << c.hidden() << "\nmode=" << vlt::mode_name(c.mode)
       << "\n";
    return os.str();
}

// ---------------------------------------------------------------------------
// data

inline synth::SyntheticLanguage language_of(const PipelineConfig& cfg) {
    return synth::build_language(cfg.seed, cfg.vocab_size, cfg.d_raw);
}

/// Every token the pipeline can see: signs, spoken words, corpus words, the
/// pair separator and the default prompt text.
inline text::Vocab build_vocab(const synth::SyntheticLanguage& lang, const text::ChatTemplate& prompts) {
    std::vector<synth::Tokens> lists{lang.signs, lang.spoken_vocab(), synth::meta_vocabulary(),
                                     synth::Tokens{lm::kSeparator}, prompts.all_tokens(),
                                     text::ChatTemplate{}.all_tokens()};
    return text::Vocab::build(lists);
}

struct GenDataResult {
    int train = 0, val = 0, test = 0;
};

/// Writes manifests, SLTF videos, the vocabulary and the resolved config.
inline GenDataResult gen_data(const Workspace& ws, const PipelineConfig& cfg) {
    cfg.validate();
    const auto lang = language_of(cfg);
    const auto data = synth::generate_splits(lang, cfg.seed, cfg.sizes);
    fs::remove_all(ws.data());
    fs::create_directories(ws.data() / "videos");
    const auto write_split = [&](synth::Split s, const std::vector<synth::Sample>& samples) {
        for (const auto& smp : samples) synth::write_sltf(ws.data() / "videos" / (smp.id + ".sltf"), smp.video.frames);
        synth::write_manifest(ws.manifest(s), synth::to_records(samples, "videos"));
    };
    write_split(synth::Split::kTrain, data.train);
    write_split(synth::Split::kVal, data.val);
    write_split(synth::Split::kTest, data.test);
    build_vocab(lang, cfg.prompts).save(ws.vocab());
    std::ofstream(ws.config(), std::ios::trunc) << to_ini(cfg);
    return {static_cast<int>(data.train.size()), static_cast<int>(data.val.size()), static_cast<int>(data.test.size())};
}

inline std::vector<Example> load_split(const Workspace& ws, synth::Split s) {
    if (!fs::exists(ws.manifest(s)))
        throw StageOrderError("missing " + ws.manifest(s).string() + " (run gen-data first)");
    std::vector<Example> out;
    for (const auto& r : synth::read_manifest(ws.manifest(s)))
        out.push_back({r.id, r.gloss, r.text, synth::read_sltf(ws.data() / r.video_path)});
    return out;
}

inline std::vector<Example> train_subset(std::vector<Example> train, double fraction) {
    const auto n = static_cast<std::size_t>(std::ceil(static_cast<double>(train.size()) * fraction));
    train.resize(std::min(train.size(), std::max<std::size_t>(1, n)));
    return train;
}

inline text::Vocab load_vocab(const Workspace& ws) {
    if (fs::exists(ws.bundle() / "vocab.tsv")) return text::Vocab::load(ws.bundle() / "vocab.tsv");
    if (!fs::exists(ws.vocab())) throw StageOrderError("missing vocabulary (run gen-data first)");
    return text::Vocab::load(ws.vocab());
}

/// Copies what inference needs next to the weights.
inline void write_bundle_meta(const Workspace& ws, const PipelineConfig& cfg, const text::Vocab& vocab) {
    fs::create_directories(ws.bundle());
    vocab.save(ws.bundle() / "vocab.tsv");
    std::ofstream(ws.bundle() / "config.ini", std::ios::trunc) << to_ini(cfg);
    cfg.effective_template().save(ws.bundle() / "template.ini");
}

/// Resolves eval_interval < 0 to once per epoch.
inline train::TrainRunConfig with_epoch_eval(train::TrainRunConfig rc, std::size_t n_examples) {
    if (rc.eval_interval < 0) rc.eval_interval = (static_cast<long>(n_examples) + rc.batch - 1) / rc.batch;
    return rc;
}

// ---------------------------------------------------------------------------
// bundle components

inline fs::path component_dir(const Workspace& ws, const std::string& name) { return ws.bundle() / name; }

template <class T>
void save_component(const Workspace& ws, const std::string& name, const ParamStore<T>& params, const std::string& desc) {
    const auto dir = component_dir(ws, name);
    fs::remove_all(dir);
    train::save_params(dir / "params", params);
    std::ofstream(dir / "config.txt", std::ios::trunc) << desc;
    auto man = read_kv(ws.bundle() / "manifest.txt");
    man["kind"] = "model";
    man[name + ".hash"] = hash_text(desc);
    write_kv(ws.bundle() / "manifest.txt", man);
}

inline bool has_component(const Workspace& ws, const std::string& name) {
    return fs::exists(component_dir(ws, name) / "config.txt");
}

/// Loads `name` into `params`; the stored config must describe the same shapes.
template <class T>
void load_component(const Workspace& ws, const std::string& name, ParamStore<T>& params, const std::string& desc) {
    const auto dir = component_dir(ws, name);
    std::ifstream is(dir / "config.txt");
    if (!is) throw train::CheckpointMismatch("bundle has no " + name + " component");
    std::stringstream ss;
    ss << is.rdbuf();
    if (ss.str() != desc)
        throw train::CheckpointMismatch(name + " checkpoint was trained with a different configuration:\n" + ss.str());
    train::load_params(dir / "params", params);
}

inline void mark_stage(const Workspace& ws, const std::string& stage, const KeyValues& extra = {}) {
    auto man = read_kv(ws.bundle() / "manifest.txt");
    man["kind"] = "model";
    man["stage." + stage] = "done";
    for (const auto& [k, v] : extra) man[k] = v;
    write_kv(ws.bundle() / "manifest.txt", man);
}

inline bool stage_done(const Workspace& ws, const std::string& stage) {
    return read_kv(ws.bundle() / "manifest.txt").count("stage." + stage) != 0;
}

/// In-memory models of a pipeline. Training is single precision.
struct Models {
    text::Vocab vocab;
    text::ChatTemplate prompts;
    lm::LanguageModel<float> lm;
    visual::VisualEncoder<float> visual;
    vlt::Connector<float> connector;
    int max_new_tokens = 16;
};

inline std::uint64_t tag(const char* s) { return train::fnv1a(s); }

inline lm::LanguageModel<float> init_lm(const PipelineConfig& cfg, int vocab) {
    Rng rng = Rng::derive({cfg.seed, tag("lm-init")});
    return lm::LanguageModel<float>::init(cfg.lm_config(vocab), rng);
}

inline visual::VisualEncoder<float> init_visual(const PipelineConfig& cfg) {
    Rng rng = Rng::derive({cfg.seed, tag("visual-init")});
    return visual::VisualEncoder<float>::init(cfg.visual_config(), rng);
}

inline vlt::Connector<float> init_connector(const PipelineConfig& cfg, int d_lm) {
    Rng rng = Rng::derive({cfg.seed, tag("connector-init")});
    return vlt::Connector<float>::init(cfg.connector_config(d_lm), rng);
}

/// Loads whatever the bundle holds; missing components are freshly initialised
/// when `allow_random_init`, otherwise a StageOrderError names the missing stage.
inline Models load_models(const Workspace& ws, const PipelineConfig& cfg, bool need_connector, bool allow_random_init) {
    Models m;
    m.vocab = load_vocab(ws);
    m.prompts = cfg.effective_template();
    m.max_new_tokens = cfg.max_new_tokens;
    m.lm = init_lm(cfg, m.vocab.size());
    if (has_component(ws, "lm")) {
        load_component(ws, "lm", m.lm.params, describe(m.lm.cfg));
    } else if (!allow_random_init) {
        throw StageOrderError("no stage-1 language model in " + ws.bundle().string() +
                              " (run pretrain-lm or pass --allow-random-init)");
    }
    m.visual = init_visual(cfg);
    if (has_component(ws, "visual")) {
        load_component(ws, "visual", m.visual.params, describe(m.visual.cfg));
    } else if (!allow_random_init) {
        throw StageOrderError("no stage-2 visual encoder in " + ws.bundle().string() +
                              " (run pretrain-visual or pass --allow-random-init)");
    }
    m.connector = init_connector(cfg, m.lm.cfg.d_model);
    if (need_connector) {
        if (!has_component(ws, "connector")) throw StageOrderError("no stage-3 connector (run tune first)");
        const auto stored = read_kv(component_dir(ws, "connector") / "config.txt");
        if (stored.at("d_lm") != std::to_string(m.lm.cfg.d_model))
            throw train::CheckpointMismatch("connector was trained against d_lm=" + stored.at("d_lm") +
                                            " but the language model has d_model=" +
                                            std::to_string(m.lm.cfg.d_model));
        const auto man = read_kv(ws.bundle() / "manifest.txt");
        const auto check = [&](const char* comp, const std::string& desc) {
            auto it = man.find(std::string("connector.") + comp);
            if (it != man.end() && it->second != hash_text(desc))
                throw train::CheckpointMismatch(std::string("connector was tuned against a different ") + comp);
        };
        check("lm", describe(m.lm.cfg));
        check("visual", describe(m.visual.cfg));
        load_component(ws, "connector", m.connector.params, describe(m.connector.cfg));
    }
    return m;
}

// ---------------------------------------------------------------------------
// stage 1

struct StageOptions {
    bool resume = false;
    bool verbose = false;
    bool allow_random_init = false;
};

/// Fresh Gaussian feature noise plus random frame drops and repeats, each
/// with probability `resample`.
inline Matrix<float> augment(const Matrix<float>& frames, Rng& rng, double noise, double resample) {
    if (noise == 0 && resample == 0) return frames;
    std::vector<Index> rows;
    for (Index i = 0; i < frames.rows(); ++i) {
        if (resample > 0 && rng.bernoulli(resample)) continue;
        rows.push_back(i);
        if (resample > 0 && rng.bernoulli(resample)) rows.push_back(i);
    }
    if (rows.empty()) rows.push_back(0);
    Matrix<float> out(static_cast<Index>(rows.size()), frames.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) {
        out.row(static_cast<Index>(r)) = frames.row(rows[r]);
        if (noise > 0)
            for (Index c = 0; c < out.cols(); ++c) out(static_cast<Index>(r), c) += static_cast<float>(noise * rng.normal());
    }
    return out;
}

inline lm::PretrainCorpus build_corpus(const PipelineConfig& cfg, const Workspace& ws) {
    const auto lang = language_of(cfg);
    std::set<synth::Tokens> held_out;
    for (auto s : {synth::Split::kVal, synth::Split::kTest})
        for (const auto& r : synth::read_manifest(ws.manifest(s))) held_out.insert(r.gloss);
    lm::PretrainCorpus corpus;
    corpus.pairs = synth::sample_text_pairs(lang, cfg.seed, cfg.corpus_pairs, held_out);
    long pair_tokens = 0;
    for (const auto& p : corpus.pairs) pair_tokens += static_cast<long>(p.gloss.size() + p.text.size()) + 3;
    const long doc_tokens = static_cast<long>(std::llround(static_cast<double>(pair_tokens) / cfg.pair_doc_ratio));
    const long n_docs = (doc_tokens + cfg.document_length - 1) / cfg.document_length;
    for (long i = 0; i < n_docs; ++i) {
        Rng rng = Rng::derive({cfg.seed, tag("document"), static_cast<std::uint64_t>(i)});
        corpus.documents.push_back(synth::sample_document(lang, rng, cfg.document_length));
    }
    return corpus;
}

inline train::RunResult pretrain_lm(const Workspace& ws, const PipelineConfig& cfg, const StageOptions& so = {}) {
    cfg.validate();
    const auto vocab = load_vocab(ws);
    auto model = init_lm(cfg, vocab.size());
    const auto corpus = build_corpus(cfg, ws);
    lm::PretrainConfig pc = cfg.stage1;
    pc.merge = true;
    train::RunOptions opts{ws.runs("stage1"), "stage1", so.resume, -1, so.verbose, 50};
    auto res = lm::continued_pretrain(model, vocab, corpus, pc, opts);
    save_component(ws, "lm", model.params, describe(model.cfg));
    write_bundle_meta(ws, cfg, vocab);
    mark_stage(ws, "stage1", {{"stage1.pairs", std::to_string(res.n_pairs)}, {"stage1.chunks", std::to_string(res.n_chunks)}});
    return res.run;
}

// ---------------------------------------------------------------------------
// stage 2

inline train::RunResult pretrain_visual(const Workspace& ws, const PipelineConfig& cfg, const StageOptions& so = {}) {
    cfg.validate();
    const auto vocab = load_vocab(ws);
    const auto train_set = train_subset(load_split(ws, synth::Split::kTrain), cfg.train_fraction);
    auto venc = init_visual(cfg);
    Rng trng = Rng::derive({cfg.seed, tag("text-init")});
    auto tenc = contrastive::TextEncoder<float>::init(cfg.text_config(vocab.size()), trng);
    ParamStore<float> extra;
    Matrix<float> lt(1, 1);
    lt(0, 0) = static_cast<float>(std::log(cfg.cl.temperature_init));
    extra.add("log_tau", lt);
    if (cfg.cl.freeze_text_encoder) tenc.params.set_trainable(false);

    std::vector<std::vector<int>> text_ids;
    for (const auto& ex : train_set) text_ids.push_back(vocab.encode(ex.text));

    auto params = train::trainable_params(venc.params, "");
    for (auto& [n, p] : train::trainable_params(tenc.params)) params.emplace_back("text." + n, p);
    for (auto& [n, p] : train::trainable_params(extra)) params.emplace_back(n, p);

    const train::StepFn step = [&](std::span<const int> batch, Rng& rng) {
        Tape<float> t;
        std::vector<Var<float>> vids, texts, words;
        for (int i : batch) {
            const auto& ex = train_set[static_cast<std::size_t>(i)];
            auto out = visual::encode(t, venc, t.constant(augment(ex.frames, rng, cfg.augment_noise, cfg.augment_resample)));
            vids.push_back(out.sentence);
            words.push_back(out.words);
            texts.push_back(contrastive::text_encode(t, tenc, text_ids[static_cast<std::size_t>(i)]));
        }
        auto loss = contrastive::total_cl_loss(ops::concat_rows(vids), ops::concat_rows(texts), words,
                                               t.param(extra.at("log_tau")), cfg.cl);
        t.backward(loss.total);
        return static_cast<double>(loss.total.scalar());
    };
    train::RunOptions opts{ws.runs("stage2"), "stage2", so.resume, -1, so.verbose, 20};
    auto res = train::run_stage<float>(cfg.stage2, params, static_cast<int>(train_set.size()), step, opts);
    save_component(ws, "visual", venc.params, describe(venc.cfg));
    save_component(ws, "text", tenc.params, describe(tenc.cfg));
    write_bundle_meta(ws, cfg, vocab);
    mark_stage(ws, "stage2", {{"stage2.temperature", std::to_string(std::exp(extra.at("log_tau").value(0, 0)))}});
    return res;
}

// ---------------------------------------------------------------------------
// stage 3 / full-tune / inference

/// Visual tokens handed to the connector: word rows, or the one sentence row.
template <class T>
Var<T> visual_tokens(Tape<T>& t, visual::VisualEncoder<T>& v, vlt::ConnectorMode mode, Var<T> frames) {
    Var<T> words = visual::word_encode(t, v, visual::frame_encode(t, v, frames));
    if (mode == vlt::ConnectorMode::kSentence) return visual::sentence_features(t, v, words);
    return words;
}

inline Matrix<float> visual_tokens(Models& m, const Matrix<float>& frames) {
    Tape<float> t;
    t.set_grad_enabled(false);
    return visual_tokens(t, m.visual, m.connector.cfg.mode, t.constant(frames)).value();
}

/// Greedy translation from precomputed visual tokens.
inline synth::Tokens translate_tokens(Models& m, const Matrix<float>& tokens) {
    Tape<float> t;
    t.set_grad_enabled(false);
    Var<float> rows = vlt::connect(t, m.connector, t.constant(tokens));
    const auto chat = text::render_chat(m.vocab, m.prompts, static_cast<int>(tokens.rows()));
    auto batch = vlt::assemble(t, chat, rows, m.lm);
    const auto ids = lm::generate_from_embeddings(m.lm, batch.full.value(), m.max_new_tokens,
                                                  m.vocab.id(text::Special::kEos));
    return m.vocab.decode_tokens(ids);
}

inline synth::Tokens translate(Models& m, const Matrix<float>& frames) {
    if (frames.rows() < 1) throw std::invalid_argument("translate: empty video");
    return translate_tokens(m, visual_tokens(m, frames));
}

inline metrics::EvalReport score(Models& m, const std::vector<Example>& set, const std::vector<Matrix<float>>* cached,
                                 std::size_t limit = 0) {
    const std::size_t n = limit > 0 ? std::min(limit, set.size()) : set.size();
    std::vector<synth::Tokens> hyps, refs;
    for (std::size_t i = 0; i < n; ++i) {
        hyps.push_back(cached ? translate_tokens(m, (*cached)[i]) : translate(m, set[i].frames));
        refs.push_back(set[i].text);
    }
    return metrics::score_corpus(hyps, refs);
}

/// Response-masked loss of one example; gradients accumulate with weight `w`.
inline double vlt_example_loss(Models& m, Tape<float>& t, Var<float> tokens, const Example& ex, float w) {
    Var<float> rows = vlt::connect(t, m.connector, tokens);
    const auto chat = text::render_chat(m.vocab, m.prompts, static_cast<int>(tokens.rows()), synth::join(ex.text));
    auto batch = vlt::assemble(t, chat, rows, m.lm);
    Var<float> loss = vlt::vlt_loss(t, m.lm, batch);
    t.backward(loss, w);
    return static_cast<double>(loss.scalar());
}

/// Connector tuning with the language model and visual encoder frozen.
inline train::RunResult tune(const Workspace& ws, const PipelineConfig& cfg, const StageOptions& so = {}) {
    cfg.validate();
    if (!so.allow_random_init) {
        if (!stage_done(ws, "stage1"))
            throw StageOrderError("tune needs the stage-1 checkpoint (run pretrain-lm or pass --allow-random-init)");
        if (!stage_done(ws, "stage2"))
            throw StageOrderError("tune needs the stage-2 checkpoint (run pretrain-visual or pass --allow-random-init)");
    }
    Models m = load_models(ws, cfg, false, so.allow_random_init);
    m.lm.params.set_trainable(false);
    m.visual.params.set_trainable(false);
    const auto train_set = train_subset(load_split(ws, synth::Split::kTrain), cfg.train_fraction);
    const auto val_set = load_split(ws, synth::Split::kVal);
    std::vector<Matrix<float>> train_tok, val_tok;
    for (const auto& ex : train_set) train_tok.push_back(visual_tokens(m, ex.frames));
    for (const auto& ex : val_set) val_tok.push_back(visual_tokens(m, ex.frames));

    auto params = train::trainable_params(m.connector.params);
    const train::StepFn step = [&](std::span<const int> batch, Rng&) {
        double total = 0;
        const float w = 1.0f / static_cast<float>(batch.size());
        for (int i : batch) {
            Tape<float> t;
            total += vlt_example_loss(m, t, t.constant(train_tok[static_cast<std::size_t>(i)]),
                                      train_set[static_cast<std::size_t>(i)], w);
        }
        return total / static_cast<double>(batch.size());
    };
    const train::EvalFn eval = [&] {
        return score(m, val_set, &val_tok, static_cast<std::size_t>(cfg.eval_limit)).bleu4;
    };
    train::RunOptions opts{ws.runs("stage3"), "stage3", so.resume, -1, so.verbose, 50};
    auto res = train::run_stage<float>(with_epoch_eval(cfg.stage3, train_set.size()), params, static_cast<int>(train_set.size()), step, opts, eval);
    save_component(ws, "connector", m.connector.params, describe(m.connector.cfg));
    write_bundle_meta(ws, cfg, m.vocab);
    mark_stage(ws, "stage3", {{"connector.lm", hash_text(describe(m.lm.cfg))},
                              {"connector.visual", hash_text(describe(m.visual.cfg))}});
    return res;
}

/// Joint tuning of language model, visual encoder and connector.
inline train::RunResult full_tune(const Workspace& ws, const PipelineConfig& cfg, const StageOptions& so = {}) {
    cfg.validate();
    if (!stage_done(ws, "stage3")) throw StageOrderError("full-tune needs the stage-3 connector (run tune first)");
    Models m = load_models(ws, cfg, true, true);
    const auto train_set = train_subset(load_split(ws, synth::Split::kTrain), cfg.train_fraction);
    const auto val_set = load_split(ws, synth::Split::kVal);

    train::NamedParams<float> params;
    for (auto& [n, p] : train::trainable_params(m.lm.params)) params.emplace_back("lm." + n, p);
    for (auto& [n, p] : train::trainable_params(m.visual.params)) params.emplace_back("visual." + n, p);
    for (auto& [n, p] : train::trainable_params(m.connector.params)) params.emplace_back("connector." + n, p);
    const train::StepFn step = [&](std::span<const int> batch, Rng& rng) {
        double total = 0;
        const float w = 1.0f / static_cast<float>(batch.size());
        for (int i : batch) {
            const auto& ex = train_set[static_cast<std::size_t>(i)];
            const auto frames = augment(ex.frames, rng, cfg.augment_noise, cfg.augment_resample);
            Tape<float> t;
            total += vlt_example_loss(m, t, visual_tokens(t, m.visual, m.connector.cfg.mode, t.constant(frames)), ex, w);
        }
        return total / static_cast<double>(batch.size());
    };
    const train::EvalFn eval = [&] { return score(m, val_set, nullptr, static_cast<std::size_t>(cfg.eval_limit)).bleu4; };
    train::RunOptions opts{ws.runs("fulltune"), "fulltune", so.resume, -1, so.verbose, 50};
    auto res = train::run_stage<float>(with_epoch_eval(cfg.fulltune, train_set.size()), params, static_cast<int>(train_set.size()), step, opts, eval);
    save_component(ws, "lm", m.lm.params, describe(m.lm.cfg));
    save_component(ws, "visual", m.visual.params, describe(m.visual.cfg));
    save_component(ws, "connector", m.connector.params, describe(m.connector.cfg));
    mark_stage(ws, "fulltune", {{"connector.lm", hash_text(describe(m.lm.cfg))},
                                {"connector.visual", hash_text(describe(m.visual.cfg))}});
    return res;
}

// ---------------------------------------------------------------------------
// evaluation

inline bool is_echo_bundle(const fs::path& bundle) { return read_kv(bundle / "manifest.txt")["kind"] == "echo"; }

/// A bundle whose translator returns the reference text; exercises the
/// evaluation path without any model.
inline void make_echo_bundle(const fs::path& bundle) { write_kv(bundle / "manifest.txt", {{"kind", "echo"}}); }

inline metrics::EvalReport evaluate(const Workspace& ws, const PipelineConfig& cfg, synth::Split split,
                                    const fs::path& report_path = {}) {
    const auto set = load_split(ws, split);
    metrics::EvalReport r;
    if (is_echo_bundle(ws.bundle())) {
        std::vector<synth::Tokens> refs;
        for (const auto& ex : set) refs.push_back(ex.text);
        r = metrics::score_corpus(refs, refs);
    } else {
        Models m = load_models(ws, cfg, true, false);
        r = score(m, set, nullptr);
    }
    const fs::path out = report_path.empty() ? ws.reports() / (std::string(synth::split_name(split)) + ".txt") : report_path;
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    r.save(out);
    return r;
}

/// Baseline with stages 1-2 loaded and a freshly initialised connector.
inline metrics::EvalReport evaluate_untrained_connector(const Workspace& ws, const PipelineConfig& cfg, synth::Split split) {
    Models m = load_models(ws, cfg, false, true);
    return score(m, load_split(ws, split), nullptr);
}

// ---------------------------------------------------------------------------
// full runs

struct PipelineResult {
    metrics::EvalReport test;
    train::RunResult stage1, stage2, stage3, fulltune;
};

/// gen-data through evaluation on the test split.
inline PipelineResult run_all(const Workspace& ws, const PipelineConfig& cfg, bool verbose = false) {
    PipelineResult r;
    StageOptions so;
    so.verbose = verbose;
    gen_data(ws, cfg);
    fs::remove_all(ws.bundle());
    fs::remove_all(ws.root / "runs");
    if (cfg.cpt) r.stage1 = pretrain_lm(ws, cfg, so);
    r.stage2 = pretrain_visual(ws, cfg, so);
    so.allow_random_init = !cfg.cpt;
    r.stage3 = tune(ws, cfg, so);
    if (cfg.full_tune) r.fulltune = full_tune(ws, cfg, so);
    r.test = evaluate(ws, cfg, synth::Split::kTest);
    return r;
}

}  // namespace slt::pipeline
