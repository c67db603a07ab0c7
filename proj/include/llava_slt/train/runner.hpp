#pragma once

#include "llava_slt/core/rng.hpp"
#include "llava_slt/train/checkpoint.hpp"
#include "llava_slt/train/config.hpp"
#include "llava_slt/train/optim.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <span>
#include <string>
#include <vector>

namespace slt::train {

struct MetricRecord {
    long step = 0;
    double lr = 0;
    double loss = 0;
    double wallclock = 0;

    nlohmann::json to_json() const { return {{"step", step}, {"lr", lr}, {"loss", loss}, {"wallclock", wallclock}}; }
    static MetricRecord from_json(const nlohmann::json& j) {
        return {j.at("step").get<long>(), j.at("lr").get<double>(), j.at("loss").get<double>(),
                j.at("wallclock").get<double>()};
    }
};

/// Deterministic permutation of [0, n) for one epoch.
inline std::vector<int> epoch_order(std::uint64_t seed, long epoch, int n) {
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    Rng rng = Rng::derive({seed, 0x6f72646572ULL, static_cast<std::uint64_t>(epoch)});
    for (int i = n - 1; i > 0; --i) std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(rng.uniform_int(0, i))]);
    return order;
}

/// Example indices of batch `step` (batches never straddle epochs).
inline std::vector<int> batch_indices(std::uint64_t seed, long step, int n, int batch) {
    const long per_epoch = (n + batch - 1) / batch;
    const long epoch = step / per_epoch;
    const long b = step % per_epoch;
    const auto order = epoch_order(seed, epoch, n);
    const long begin = b * batch;
    const long end = std::min<long>(begin + batch, n);
    return {order.begin() + begin, order.begin() + end};
}

struct RunOptions {
    std::filesystem::path out_dir;  // empty: no checkpoints or log files
    std::string stage = "stage";
    bool resume = false;
    long stop_after = -1;  // simulate an interruption after this many steps
    bool verbose = false;
    long print_every = 50;
};

struct RunResult {
    long steps = 0;
    double final_loss = 0;
    double best_eval = -1;
    long best_step = -1;
    bool early_stopped = false;
    std::vector<MetricRecord> log;
};

/// Loss for one batch of example indices. Implementations accumulate
/// gradients into the parameters and return the mean batch loss.
using StepFn = std::function<double(std::span<const int>, Rng&)>;
/// Validation score, higher is better.
using EvalFn = std::function<double()>;

/// Seeded optimisation loop shared by every stage: batches follow a
/// per-epoch permutation of (seed, epoch); lr follows the one-cycle cosine
/// schedule; gradients are clipped to `grad_clip`; state is checkpointed so
/// that a resumed run continues identically.
template <class T>
RunResult run_stage(const TrainRunConfig& cfg, const NamedParams<T>& params, int n_examples, const StepFn& step_fn,
                    const RunOptions& opts = {}, const EvalFn& eval_fn = {}) {
    cfg.validate();
    if (n_examples < 1) throw std::invalid_argument("run_stage: no training examples");
    namespace fs = std::filesystem;
    const long total = cfg.total_steps(n_examples);
    const std::string cfg_hash = hex64(fnv1a(cfg.canonical()));
    AdamW<T> opt;
    Rng rng = Rng::derive({cfg.seed, 0x72756eULL});
    RunResult result;
    long start = 0;
    int bad_evals = 0;
    std::vector<Matrix<T>> best;

    const bool persist = !opts.out_dir.empty();
    const fs::path ckpt = opts.out_dir / "checkpoint";
    const fs::path log_path = opts.out_dir / "metrics.jsonl";

    const auto param_store_view = [&](auto&& fn) {
        for (const auto& [name, p] : params) fn(name, *p);
    };

    const auto save_state = [&](long step) {
        ParamStore<T> snapshot;
        param_store_view([&](const std::string& name, Param<T>& p) { snapshot.add(name, p.value); });
        fs::remove_all(ckpt);
        save_params(ckpt / "params", snapshot);
        save_optimizer(ckpt / "optim", opt);
        if (!best.empty()) {
            ParamStore<T> bs;
            for (std::size_t i = 0; i < params.size(); ++i) bs.add(params[i].first, best[i]);
            save_params(ckpt / "best", bs);
        }
        CheckpointMeta meta;
        meta.stage = opts.stage;
        meta.step = step;
        meta.config_hash = cfg_hash;
        meta.rng_state = rng.state();
        meta.extra["best_eval"] = std::to_string(result.best_eval);
        meta.extra["best_step"] = std::to_string(result.best_step);
        meta.extra["bad_evals"] = std::to_string(bad_evals);
        meta.save(ckpt / "meta.txt");
    };

    if (persist) fs::create_directories(opts.out_dir);
    if (persist && opts.resume && fs::exists(ckpt / "meta.txt")) {
        const auto meta = CheckpointMeta::load(ckpt / "meta.txt");
        if (meta.config_hash != cfg_hash) throw CheckpointMismatch("resume: config hash differs from checkpoint");
        if (meta.stage != opts.stage) throw CheckpointMismatch("resume: checkpoint belongs to stage " + meta.stage);
        ParamStore<T> snapshot;
        param_store_view([&](const std::string& name, Param<T>& p) { snapshot.add(name, p.value); });
        load_params(ckpt / "params", snapshot);
        param_store_view([&](const std::string& name, Param<T>& p) { p.value = snapshot.at(name).value; });
        load_optimizer(ckpt / "optim", opt);
        rng.set_state(meta.rng_state);
        start = meta.step;
        result.best_eval = std::stod(meta.extra.at("best_eval"));
        result.best_step = std::stol(meta.extra.at("best_step"));
        bad_evals = std::stoi(meta.extra.at("bad_evals"));
        if (fs::exists(ckpt / "best")) {
            ParamStore<T> bs;
            param_store_view([&](const std::string& name, Param<T>& p) { bs.add(name, p.value); });
            load_params(ckpt / "best", bs);
            for (const auto& [name, _] : params) best.push_back(bs.at(name).value);
        }
        std::ifstream is(log_path);
        std::string line;
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            auto rec = MetricRecord::from_json(nlohmann::json::parse(line));
            if (rec.step < start) result.log.push_back(rec);
        }
    }
    if (persist) {
        std::ofstream os(log_path, std::ios::trunc);
        for (const auto& r : result.log) os << r.to_json().dump() << '\n';
    }

    const auto t0 = std::chrono::steady_clock::now();
    long step = start;
    for (; step < total; ++step) {
        if (opts.stop_after >= 0 && step >= opts.stop_after) break;
        for (const auto& [_, p] : params) p->zero_grad();
        const auto idx = batch_indices(cfg.seed, step, n_examples, cfg.batch);
        const double loss = step_fn(std::span<const int>(idx), rng);
        if (!std::isfinite(loss)) throw NumericError(opts.stage + ": non-finite loss at step " + std::to_string(step));
        clip_grad_norm(params, cfg.grad_clip);
        const double lr = onecycle_cosine(step + 1, total + 1, cfg.max_lr, cfg.warmup);
        opt.step(params, lr, cfg.weight_decay);
        const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        MetricRecord rec{step, lr, loss, wall};
        result.log.push_back(rec);
        result.final_loss = loss;
        if (persist) std::ofstream(log_path, std::ios::app) << rec.to_json().dump() << '\n';
        if (opts.verbose && (step % opts.print_every == 0 || step + 1 == total))
            std::cerr << "[" << opts.stage << "] step " << step + 1 << "/" << total << " lr " << lr << " loss " << loss
                      << "\n";

        if (eval_fn && cfg.eval_interval > 0 && ((step + 1) % cfg.eval_interval == 0 || step + 1 == total)) {
            const double score = eval_fn();
            if (opts.verbose) std::cerr << "[" << opts.stage << "] eval@" << step + 1 << " = " << score << "\n";
            if (score > result.best_eval) {
                result.best_eval = score;
                result.best_step = step + 1;
                bad_evals = 0;
                best.clear();
                for (const auto& [_, p] : params) best.push_back(p->value);
            } else if (++bad_evals >= cfg.patience) {
                result.early_stopped = true;
                ++step;
                break;
            }
        }
        if (persist && cfg.checkpoint_interval > 0 && (step + 1) % cfg.checkpoint_interval == 0) save_state(step + 1);
    }
    result.steps = step;
    if (!best.empty() && (result.early_stopped || step >= total)) {
        for (std::size_t i = 0; i < params.size(); ++i) params[i].second->value = best[i];
    }
    if (persist) save_state(step);
    return result;
}

}  // namespace slt::train
