// llava-slt: data generation, the three training stages, evaluation,
// translation and ablation presets over one working directory.

#include "llava_slt/pipeline/pipeline.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <iostream>
#include <optional>
#include <string>

namespace fs = std::filesystem;
using namespace slt;

namespace {

enum Exit { kOk = 0, kUsage = 2, kConfig = 3, kCheckpoint = 4, kNumeric = 5 };

struct Common {
    std::string workdir = ".";
    std::string config;
    std::string preset;
    bool verbose = false;
};

/// --preset / --config when given, else <workdir>/config.ini, else the desk preset.
pipeline::PipelineConfig resolve(const Common& c) {
    const pipeline::Workspace ws{c.workdir, {}};
    if (!c.preset.empty() || !c.config.empty()) {
        auto cfg = pipeline::preset(c.preset.empty() ? "desk" : c.preset);
        if (!c.config.empty()) cfg = pipeline::from_file(train::ConfigFile::load(c.config), cfg);
        return cfg;
    }
    if (fs::exists(ws.config())) return pipeline::from_file(train::ConfigFile::load(ws.config()), pipeline::preset("desk"));
    return pipeline::preset("desk");
}

void print_run(const char* stage, const train::RunResult& r) {
    std::cout << stage << ": steps=" << r.steps << " final_loss=" << r.final_loss;
    if (r.best_step >= 0) std::cout << " best_val_bleu4=" << r.best_eval << " best_step=" << r.best_step;
    if (r.early_stopped) std::cout << " early_stopped";
    std::cout << "\n";
}

synth::Split parse_split(const std::string& s) {
    if (s == "train") return synth::Split::kTrain;
    if (s == "val") return synth::Split::kVal;
    if (s == "test") return synth::Split::kTest;
    throw train::ConfigError("split", "expected train, val or test");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Sign language translation pipeline on a synthetic sign language"};
    app.require_subcommand(1);
    Common common;
    app.add_option("--workdir", common.workdir, "working directory; every path is relative to it");
    app.add_option("--config", common.config, "sectioned key-value config file");
    app.add_option("--preset", common.preset, "paper | desk | smoke");
    app.add_flag("-v,--verbose", common.verbose, "log training progress to stderr");

    auto* gen = app.add_subcommand("gen-data", "generate the language, splits and videos");
    std::optional<std::uint64_t> seed;
    std::optional<int> vocab_size, n_train, n_val, n_test;
    std::string out;
    gen->add_option("--seed", seed);
    gen->add_option("--vocab-size", vocab_size);
    gen->add_option("--train", n_train);
    gen->add_option("--val", n_val);
    gen->add_option("--test", n_test);
    gen->add_option("--out", out, "output directory (defaults to --workdir)");

    auto* s1 = app.add_subcommand("pretrain-lm", "stage 1: continued pretraining of the language model");
    std::optional<double> ratio;
    bool resume = false;
    s1->add_option("--pair-doc-ratio", ratio, "pair:document token ratio of the mixture");
    s1->add_flag("--resume", resume);

    auto* s2 = app.add_subcommand("pretrain-visual", "stage 2: contrastive visual pretraining");
    s2->add_flag("--resume", resume);

    auto* s3 = app.add_subcommand("tune", "stage 3: connector tuning with frozen encoders");
    bool allow_random = false;
    s3->add_flag("--allow-random-init", allow_random, "start from random weights when earlier stages are missing");
    s3->add_flag("--resume", resume);

    auto* ft = app.add_subcommand("full-tune", "joint tuning of every component");
    ft->add_flag("--resume", resume);

    auto* ev = app.add_subcommand("eval", "score a bundle on a split");
    std::string split = "test", bundle, report;
    ev->add_option("--split", split);
    ev->add_option("--bundle", bundle, "bundle directory (defaults to <workdir>/bundle)");
    ev->add_option("--report", report, "report path (defaults to <workdir>/reports/<split>.txt)");

    auto* stub = app.add_subcommand("stub-bundle", "write an echo bundle that returns references");
    std::string stub_out;
    stub->add_option("--out", stub_out)->required();

    auto* tr = app.add_subcommand("translate", "translate one video");
    std::string video;
    tr->add_option("--video", video)->required();
    tr->add_option("--bundle", bundle);

    auto* run = app.add_subcommand("run", "gen-data, all stages and test evaluation");

    auto* ab = app.add_subcommand("ablate", "run an ablation preset");
    std::string ablation;
    int seeds = 1;
    ab->add_option("name", ablation, "ablation preset")
        ->required()
        ->check(CLI::IsMember(pipeline::ablation_names()));
    ab->add_option("--seeds", seeds, "number of seeds (seed, seed+1, ...)")->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    try {
        pipeline::Workspace ws{common.workdir, {}};
        pipeline::StageOptions so;
        so.verbose = common.verbose;
        so.resume = resume;
        so.allow_random_init = allow_random;

        if (*gen) {
            if (!out.empty()) ws.root = out;
            if (!out.empty()) common.workdir = out;
            auto cfg = resolve(common);
            if (seed) cfg.seed = *seed;
            if (vocab_size) cfg.vocab_size = *vocab_size;
            if (n_train) cfg.sizes.train = *n_train;
            if (n_val) cfg.sizes.val = *n_val;
            if (n_test) cfg.sizes.test = *n_test;
            const auto r = pipeline::gen_data(ws, cfg);
            std::cout << "train=" << r.train << " val=" << r.val << " test=" << r.test << " -> " << ws.data().string() << "\n";
        } else if (*s1) {
            auto cfg = resolve(common);
            if (ratio) cfg.pair_doc_ratio = *ratio;
            print_run("stage1", pipeline::pretrain_lm(ws, cfg, so));
        } else if (*s2) {
            print_run("stage2", pipeline::pretrain_visual(ws, resolve(common), so));
        } else if (*s3) {
            print_run("stage3", pipeline::tune(ws, resolve(common), so));
        } else if (*ft) {
            print_run("fulltune", pipeline::full_tune(ws, resolve(common), so));
        } else if (*ev) {
            if (!bundle.empty()) ws.bundle_dir = bundle;
            auto cfg = fs::exists(ws.bundle() / "config.ini")
                           ? pipeline::from_file(train::ConfigFile::load(ws.bundle() / "config.ini"), pipeline::preset("desk"))
                           : resolve(common);
            const auto r = pipeline::evaluate(ws, cfg, parse_split(split), report);
            std::cout << r.to_text();
        } else if (*stub) {
            pipeline::make_echo_bundle(stub_out);
            std::cout << "echo bundle -> " << stub_out << "\n";
        } else if (*tr) {
            if (!bundle.empty()) ws.bundle_dir = bundle;
            if (!fs::exists(ws.bundle() / "config.ini"))
                throw train::CheckpointMismatch("no trained bundle at " + ws.bundle().string());
            auto cfg = pipeline::from_file(train::ConfigFile::load(ws.bundle() / "config.ini"), pipeline::preset("desk"));
            auto m = pipeline::load_models(ws, cfg, true, false);
            std::cout << synth::join(pipeline::translate(m, synth::read_sltf(video))) << "\n";
        } else if (*run) {
            const auto t0 = std::chrono::steady_clock::now();
            const auto r = pipeline::run_all(ws, resolve(common), common.verbose);
            print_run("stage1", r.stage1);
            print_run("stage2", r.stage2);
            print_run("stage3", r.stage3);
            print_run("fulltune", r.fulltune);
            std::cout << r.test.to_text();
            std::cout << "wallclock_s=" << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() << "\n";
        } else if (*ab) {
            const auto base = resolve(common);
            for (int k = 0; k < seeds; ++k) {
                auto cfg = pipeline::apply_ablation(base, ablation);
                cfg.seed = base.seed + static_cast<std::uint64_t>(k);
                pipeline::Workspace aws{ws.root / "ablate" / ablation / ("seed" + std::to_string(cfg.seed)), {}};
                const auto r = pipeline::run_all(aws, cfg, common.verbose);
                std::cout << ablation << " seed=" << cfg.seed << " BLEU4=" << r.test.bleu4 * 100
                          << " ROUGE=" << r.test.rouge_l * 100 << "\n";
            }
        }
    } catch (const train::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfig;
    } catch (const train::CheckpointMismatch& e) {
        std::cerr << "checkpoint mismatch: " << e.what() << "\n";
        return kCheckpoint;
    } catch (const pipeline::StageOrderError& e) {
        std::cerr << "missing stage: " << e.what() << "\n";
        return kCheckpoint;
    } catch (const train::NumericError& e) {
        std::cerr << "numeric abort: " << e.what() << "\n";
        return kNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return kOk;
}
