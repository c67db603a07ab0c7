#pragma once

#include "llava_slt/core/rng.hpp"
#include "llava_slt/core/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace slt::synth {

inline constexpr int kMinGloss = 2;
inline constexpr int kMaxGloss = 8;
inline constexpr int kMinSignFrames = 4;
inline constexpr int kMaxSignFrames = 12;
inline constexpr double kDefaultNoise = 0.1;
inline constexpr double kDefaultJitter = 0.25;

using Tokens = std::vector<std::string>;

/// Word-order rule for one gloss length: the content words are permuted
/// (text slot k takes gloss position order[k]) and function words are then
/// inserted one by one at the listed text positions.
struct GrammarRule {
    int length = 0;
    std::vector<int> order;
    std::vector<std::pair<int, std::string>> inserts;
};

struct SyntheticLanguage {
    std::uint64_t seed = 0;
    int d_raw = 0;
    int keyposes = 0;
    Tokens signs;
    Tokens content_words;
    Tokens function_words;
    std::vector<Matrix<float>> prototypes;  // per sign, L_i x d_raw
    std::map<int, GrammarRule> grammar;     // keyed by gloss length

    int vocab_size() const { return static_cast<int>(signs.size()); }

    int sign_index(const std::string& id) const {
        auto it = std::lower_bound(signs.begin(), signs.end(), id);
        if (it == signs.end() || *it != id) throw std::invalid_argument("unknown sign id: " + id);
        return static_cast<int>(it - signs.begin());
    }

    bool is_sign(const std::string& id) const { return std::binary_search(signs.begin(), signs.end(), id); }

    /// Spoken tokens: content words followed by function words.
    Tokens spoken_vocab() const {
        Tokens v = content_words;
        v.insert(v.end(), function_words.begin(), function_words.end());
        return v;
    }

    /// Deterministic gloss -> text mapping.
    Tokens translate(const Tokens& gloss) const {
        auto it = grammar.find(static_cast<int>(gloss.size()));
        if (it == grammar.end()) throw std::invalid_argument("no grammar rule for gloss length " + std::to_string(gloss.size()));
        const GrammarRule& rule = it->second;
        Tokens text;
        text.reserve(gloss.size() + rule.inserts.size());
        for (int src : rule.order) text.push_back(content_words[static_cast<std::size_t>(sign_index(gloss[static_cast<std::size_t>(src)]))]);
        for (const auto& [pos, word] : rule.inserts) text.insert(text.begin() + pos, word);
        return text;
    }
};

inline std::string sign_id(int i) {
    std::ostringstream os;
    os << 's' << std::setw(3) << std::setfill('0') << i;
    return os.str();
}

inline std::string content_word(int i) {
    std::ostringstream os;
    os << 'w' << std::setw(3) << std::setfill('0') << i;
    return os.str();
}

inline const Tokens& default_function_words() {
    static const Tokens words{"le", "de", "ma", "ne", "ba", "zi"};
    return words;
}

/// Linear-interpolation resampling of a trajectory to `frames` rows. When
/// frames == rows the source rows are reproduced exactly.
inline Matrix<float> resample(const Matrix<float>& src, int frames) {
    const Index n = src.rows();
    Matrix<float> out(frames, src.cols());
    for (int t = 0; t < frames; ++t) {
        const double pos = frames == 1 ? 0.5 * static_cast<double>(n - 1)
                                       : static_cast<double>(t) * static_cast<double>(n - 1) / (frames - 1);
        const auto lo = static_cast<Index>(std::floor(pos));
        const double frac = pos - static_cast<double>(lo);
        if (frac == 0.0 || lo + 1 >= n) {
            out.row(t) = src.row(std::min(lo, n - 1));
        } else {
            out.row(t) = src.row(lo) * static_cast<float>(1.0 - frac) + src.row(lo + 1) * static_cast<float>(frac);
        }
    }
    return out;
}

/// Per-frame RMS distance between two prototypes after resampling both to
/// the longest sign length.
inline double prototype_distance(const Matrix<float>& a, const Matrix<float>& b) {
    const Matrix<float> ra = resample(a, kMaxSignFrames);
    const Matrix<float> rb = resample(b, kMaxSignFrames);
    return std::sqrt((ra - rb).cast<double>().squaredNorm() / kMaxSignFrames);
}

inline double min_prototype_distance(const SyntheticLanguage& lang) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < lang.prototypes.size(); ++i)
        for (std::size_t j = i + 1; j < lang.prototypes.size(); ++j)
            best = std::min(best, prototype_distance(lang.prototypes[i], lang.prototypes[j]));
    return best;
}

namespace detail {

inline GrammarRule make_rule(int length, const Tokens& function_words, Rng& rng) {
    GrammarRule rule;
    rule.length = length;
    rule.order.resize(static_cast<std::size_t>(length));
    std::iota(rule.order.begin(), rule.order.end(), 0);
    const auto is_identity = [&] {
        for (int i = 0; i < length; ++i)
            if (rule.order[static_cast<std::size_t>(i)] != i) return false;
        return true;
    };
    do {
        for (int i = length - 1; i > 0; --i) std::swap(rule.order[static_cast<std::size_t>(i)], rule.order[static_cast<std::size_t>(rng.uniform_int(0, i))]);
    } while (length > 1 && is_identity());
    const int n_inserts = rng.uniform_int(1, 2);
    int current = length;
    for (int k = 0; k < n_inserts; ++k) {
        const int pos = rng.uniform_int(0, current);
        const auto& word = function_words[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(function_words.size()) - 1))];
        rule.inserts.emplace_back(pos, word);
        ++current;
    }
    return rule;
}

/// Keypose sequence of 2 or 3 entries with distinct neighbours.
inline std::vector<int> make_keypose_path(int bank, Rng& rng) {
    const int len = rng.uniform_int(2, 3);
    std::vector<int> path;
    while (static_cast<int>(path.size()) < len) {
        const int k = rng.uniform_int(0, bank - 1);
        if (!path.empty() && path.back() == k) continue;
        path.push_back(k);
    }
    return path;
}

inline Matrix<float> trajectory(const std::vector<Matrix<float>>& bank, const std::vector<int>& path, int frames) {
    Matrix<float> keys(static_cast<Index>(path.size()), bank.front().cols());
    for (std::size_t i = 0; i < path.size(); ++i) keys.row(static_cast<Index>(i)) = bank[static_cast<std::size_t>(path[i])].row(0);
    return resample(keys, frames);
}

}  // namespace detail

/// Builds a reproducible synthetic sign language. Each sign is a smooth
/// trajectory through 2-3 keyposes drawn from a shared bank, so a single frame
/// rarely identifies a sign while the local frame sequence does.
inline SyntheticLanguage build_language(std::uint64_t seed, int vocab_size, int d_raw, int keyposes = 16,
                                        double noise = kDefaultNoise) {
    if (vocab_size < 2) throw std::invalid_argument("vocab_size must be >= 2");
    if (d_raw < 2) throw std::invalid_argument("d_raw must be >= 2");
    if (keyposes < 2) throw std::invalid_argument("keyposes must be >= 2");
    const long long distinct_paths = static_cast<long long>(keyposes) * (keyposes - 1) * keyposes;
    if (distinct_paths < vocab_size) throw std::invalid_argument("keypose bank too small for vocab_size");

    for (std::uint64_t attempt = 0;; ++attempt) {
        Rng rng = Rng::derive({seed, 0x6c616e67ULL, attempt});
        SyntheticLanguage lang;
        lang.seed = seed;
        lang.d_raw = d_raw;
        lang.keyposes = keyposes;
        lang.function_words = default_function_words();
        for (int i = 0; i < vocab_size; ++i) {
            lang.signs.push_back(sign_id(i));
            lang.content_words.push_back(content_word(i));
        }
        std::vector<Matrix<float>> bank;
        for (int k = 0; k < keyposes; ++k) {
            Matrix<float> row(1, d_raw);
            for (Index j = 0; j < row.size(); ++j) row.data()[j] = static_cast<float>(rng.normal());
            bank.push_back(std::move(row));
        }
        std::set<std::vector<int>> used;
        for (int i = 0; i < vocab_size; ++i) {
            std::vector<int> path;
            do {
                path = detail::make_keypose_path(keyposes, rng);
            } while (!used.insert(path).second);
            const int frames = rng.uniform_int(kMinSignFrames, kMaxSignFrames);
            lang.prototypes.push_back(detail::trajectory(bank, path, frames));
        }
        for (int n = 1; n <= kMaxGloss; ++n) lang.grammar.emplace(n, detail::make_rule(n, lang.function_words, rng));
        if (min_prototype_distance(lang) > 4.0 * noise) return lang;
    }
}

struct GlossTextPair {
    Tokens gloss;
    Tokens text;

    friend bool operator==(const GlossTextPair&, const GlossTextPair&) = default;
};

/// Gloss of uniform length in [kMinGloss, kMaxGloss] with i.i.d. signs.
inline GlossTextPair sample_pair(const SyntheticLanguage& lang, Rng& rng) {
    const int n = rng.uniform_int(kMinGloss, kMaxGloss);
    GlossTextPair p;
    for (int i = 0; i < n; ++i) p.gloss.push_back(lang.signs[static_cast<std::size_t>(rng.uniform_int(0, lang.vocab_size() - 1))]);
    p.text = lang.translate(p.gloss);
    return p;
}

struct RenderOptions {
    double jitter = kDefaultJitter;  // duration scale drawn from [1 - jitter, 1 + jitter]
    double noise = kDefaultNoise;
};

/// A rendered "video": one row of raw features per frame.
struct FeatureSequence {
    Matrix<float> frames;
    Tokens source_gloss;   // diagnostics only
    std::vector<int> durations;
};

inline FeatureSequence render_video(const SyntheticLanguage& lang, const Tokens& gloss, Rng& rng,
                                    const RenderOptions& opt = {}) {
    if (gloss.empty()) throw std::invalid_argument("render_video: empty gloss");
    std::vector<Matrix<float>> pieces;
    FeatureSequence out;
    out.source_gloss = gloss;
    Index total = 0;
    for (const auto& id : gloss) {
        const auto& proto = lang.prototypes[static_cast<std::size_t>(lang.sign_index(id))];
        const double len = static_cast<double>(proto.rows());
        const double scale = opt.jitter > 0 ? rng.uniform(1.0 - opt.jitter, 1.0 + opt.jitter) : 1.0;
        const int dur = std::max(1, static_cast<int>(std::lround(len * scale)));
        pieces.push_back(resample(proto, dur));
        out.durations.push_back(dur);
        total += dur;
    }
    out.frames.resize(total, lang.d_raw);
    Index r = 0;
    for (auto& p : pieces) {
        out.frames.middleRows(r, p.rows()) = p;
        r += p.rows();
    }
    if (opt.noise > 0)
        for (Index i = 0; i < out.frames.size(); ++i) out.frames.data()[i] += static_cast<float>(rng.normal() * opt.noise);
    return out;
}

/// Tokens of the descriptive corpus beyond the spoken vocabulary.
inline const Tokens& meta_vocabulary() {
    static const Tokens words{"sign", "means", "rule", ":", "order", "add", "at", "example", "gives", ".",
                              "0",    "1",     "2",    "3", "4",     "5",   "6",  "7",       "8",     "9"};
    return words;
}

namespace detail {

inline void describe_rule(const GrammarRule& rule, Tokens& out) {
    out.insert(out.end(), {"rule", std::to_string(rule.length), ":", "order"});
    for (int i : rule.order) out.push_back(std::to_string(i));
    for (const auto& [pos, word] : rule.inserts) out.insert(out.end(), {"add", word, "at", std::to_string(pos)});
    out.push_back(".");
}

}  // namespace detail

/// Descriptive text about the language: lexicon entries, grammar rules and
/// worked examples, truncated to exactly `length` tokens.
inline Tokens sample_document(const SyntheticLanguage& lang, Rng& rng, int length) {
    if (length < 1) throw std::invalid_argument("sample_document: length must be >= 1");
    Tokens doc;
    while (static_cast<int>(doc.size()) < length) {
        const double u = rng.uniform();
        if (u < 0.4) {
            const int i = rng.uniform_int(0, lang.vocab_size() - 1);
            doc.insert(doc.end(), {"sign", lang.signs[static_cast<std::size_t>(i)], "means", lang.content_words[static_cast<std::size_t>(i)], "."});
        } else if (u < 0.7) {
            const int n = rng.uniform_int(1, kMaxGloss);
            detail::describe_rule(lang.grammar.at(n), doc);
        } else {
            const GlossTextPair p = sample_pair(lang, rng);
            doc.push_back("example");
            doc.insert(doc.end(), p.gloss.begin(), p.gloss.end());
            doc.push_back("gives");
            doc.insert(doc.end(), p.text.begin(), p.text.end());
            doc.push_back(".");
        }
    }
    doc.resize(static_cast<std::size_t>(length));
    return doc;
}

inline std::string join(const Tokens& toks, char sep = ' ') {
    std::string out;
    for (std::size_t i = 0; i < toks.size(); ++i) {
        if (i) out += sep;
        out += toks[i];
    }
    return out;
}

inline Tokens split(const std::string& s) {
    Tokens out;
    std::istringstream is(s);
    std::string tok;
    while (is >> tok) out.push_back(tok);
    return out;
}

}  // namespace slt::synth
