#pragma once

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>

namespace slt::train {

/// Invalid configuration value; `key()` names the offending entry.
class ConfigError : public std::invalid_argument {
public:
    ConfigError(std::string key, const std::string& what)
        : std::invalid_argument("config key '" + key + "': " + what), key_(std::move(key)) {}
    const std::string& key() const { return key_; }

private:
    std::string key_;
};

struct TrainRunConfig {
    double max_lr = 2e-4;
    double weight_decay = 0.0;
    int batch = 64;
    int epochs = 1;
    long steps = 0;  // overrides epochs when > 0
    double warmup = 0.05;
    std::uint64_t seed = 0;
    double grad_clip = 1.0;
    long eval_interval = 0;  // 0 disables evaluation / early stopping
    int patience = 3;
    long checkpoint_interval = 0;

    void validate(const std::string& section = {}) const {
        const auto key = [&](const char* k) { return section.empty() ? std::string(k) : section + "." + k; };
        if (!(max_lr > 0)) throw ConfigError(key("lr"), "must be > 0");
        if (weight_decay < 0) throw ConfigError(key("weight_decay"), "must be >= 0");
        if (batch < 1) throw ConfigError(key("batch"), "must be >= 1");
        if (epochs < 1 && steps <= 0) throw ConfigError(key("epochs"), "must be >= 1");
        if (warmup < 0 || warmup >= 1) throw ConfigError(key("warmup"), "must be in [0, 1)");
        if (grad_clip < 0) throw ConfigError(key("grad_clip"), "must be >= 0");
        if (patience < 1) throw ConfigError(key("patience"), "must be >= 1");
    }

    long total_steps(long n_examples) const {
        if (steps > 0) return steps;
        const long per_epoch = (n_examples + batch - 1) / batch;
        return per_epoch * epochs;
    }

    std::string canonical() const {
        std::ostringstream os;
        os.precision(17);
        os << "lr=" << max_lr << ";wd=" << weight_decay << ";batch=" << batch << ";epochs=" << epochs
           << ";steps=" << steps << ";warmup=" << warmup << ";seed=" << seed << ";clip=" << grad_clip
           << ";eval=" << eval_interval << ";patience=" << patience;
        return os.str();
    }

    /// Reads the known keys from one ini section, keeping defaults for absent keys.
    static TrainRunConfig from_ptree(const boost::property_tree::ptree& pt, TrainRunConfig base,
                                     const std::string& section = {}) {
        const auto get = [&](const char* k, auto fallback) {
            if (!pt.get_child_optional(k)) return fallback;
            try {
                return pt.get<decltype(fallback)>(k);
            } catch (const boost::property_tree::ptree_bad_data&) {
                throw ConfigError(section.empty() ? k : section + "." + k, "not a valid value");
            }
        };
        base.max_lr = get("lr", base.max_lr);
        base.weight_decay = get("weight_decay", base.weight_decay);
        base.batch = get("batch", base.batch);
        base.epochs = get("epochs", base.epochs);
        base.steps = get("steps", base.steps);
        base.warmup = get("warmup", base.warmup);
        base.seed = get("seed", base.seed);
        base.grad_clip = get("grad_clip", base.grad_clip);
        base.eval_interval = get("eval_interval", base.eval_interval);
        base.patience = get("patience", base.patience);
        base.checkpoint_interval = get("checkpoint_interval", base.checkpoint_interval);
        base.validate(section);
        return base;
    }
};

/// Hyperparameters reported for the full-scale runs.
namespace presets {

inline TrainRunConfig stage1() {
    TrainRunConfig c;
    c.epochs = 1;
    c.batch = 64;
    c.weight_decay = 0.0;
    c.max_lr = 2e-4;
    return c;
}

inline TrainRunConfig stage2() {
    TrainRunConfig c;
    c.epochs = 200;
    c.batch = 128;
    c.weight_decay = 1e-5;
    c.max_lr = 2e-4;
    return c;
}

inline TrainRunConfig stage3() {
    TrainRunConfig c;
    c.batch = 64;
    c.weight_decay = 1e-3;
    c.max_lr = 1e-3;
    return c;
}

inline TrainRunConfig fulltune() {
    TrainRunConfig c = stage3();
    c.max_lr = 1e-5;
    return c;
}

}  // namespace presets

/// Sectioned key-value configuration ([stage1] / [stage2] / [stage3] / [fulltune] ...).
class ConfigFile {
public:
    ConfigFile() = default;

    static ConfigFile load(const std::filesystem::path& path) {
        ConfigFile f;
        try {
            boost::property_tree::read_ini(path.string(), f.tree_);
        } catch (const boost::property_tree::ini_parser_error& e) {
            throw ConfigError(path.string(), e.message());
        }
        return f;
    }

    static ConfigFile parse(const std::string& text) {
        ConfigFile f;
        std::istringstream is(text);
        boost::property_tree::read_ini(is, f.tree_);
        return f;
    }

    bool has_section(const std::string& s) const { return tree_.get_child_optional(s).has_value(); }

    TrainRunConfig stage(const std::string& section, const TrainRunConfig& base) const {
        auto child = tree_.get_child_optional(section);
        if (!child) return base;
        return TrainRunConfig::from_ptree(*child, base, section);
    }

    template <class V>
    V get(const std::string& dotted, V fallback) const {
        if (!tree_.get_child_optional(dotted)) return fallback;
        try {
            return tree_.get<V>(dotted);
        } catch (const boost::property_tree::ptree_bad_data&) {
            throw ConfigError(dotted, "not a valid value");
        }
    }

    const boost::property_tree::ptree& tree() const { return tree_; }

private:
    boost::property_tree::ptree tree_;
};

}  // namespace slt::train
