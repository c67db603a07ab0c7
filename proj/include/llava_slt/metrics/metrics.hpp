#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace slt::metrics {

using Tokens = std::vector<std::string>;

namespace detail {

inline std::map<Tokens, int> ngram_counts(const Tokens& s, int n) {
    std::map<Tokens, int> counts;
    if (static_cast<int>(s.size()) < n) return counts;
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= s.size(); ++i)
        ++counts[Tokens(s.begin() + static_cast<std::ptrdiff_t>(i), s.begin() + static_cast<std::ptrdiff_t>(i) + n)];
    return counts;
}

}  // namespace detail

/// Corpus totals of clipped n-gram matches and candidate n-grams.
struct NgramStats {
    std::vector<long> matches;
    std::vector<long> totals;
    long cand_len = 0;
    long ref_len = 0;
};

inline NgramStats ngram_stats(const std::vector<Tokens>& candidates, const std::vector<Tokens>& references, int max_n) {
    if (candidates.size() != references.size()) throw std::invalid_argument("bleu: candidate/reference count mismatch");
    if (candidates.empty()) throw std::invalid_argument("bleu: empty corpus");
    if (max_n < 1 || max_n > 4) throw std::invalid_argument("bleu: max_n must be in [1, 4]");
    NgramStats st;
    st.matches.assign(static_cast<std::size_t>(max_n), 0);
    st.totals.assign(static_cast<std::size_t>(max_n), 0);
    for (std::size_t s = 0; s < candidates.size(); ++s) {
        const auto& c = candidates[s];
        const auto& r = references[s];
        st.cand_len += static_cast<long>(c.size());
        st.ref_len += static_cast<long>(r.size());
        for (int n = 1; n <= max_n; ++n) {
            const auto cc = detail::ngram_counts(c, n);
            const auto rc = detail::ngram_counts(r, n);
            for (const auto& [gram, cnt] : cc) {
                auto it = rc.find(gram);
                if (it != rc.end()) st.matches[static_cast<std::size_t>(n - 1)] += std::min(cnt, it->second);
                st.totals[static_cast<std::size_t>(n - 1)] += cnt;
            }
        }
    }
    return st;
}

/// Brevity penalty min(1, exp(1 - r/c)); zero for an empty candidate corpus.
inline double brevity_penalty(long cand_len, long ref_len) {
    if (cand_len == 0) return 0.0;
    if (cand_len >= ref_len) return 1.0;
    return std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(cand_len));
}

/// Corpus BLEU-N: geometric mean of clipped n-gram precisions p_1..p_N times
/// the brevity penalty. Without smoothing any zero precision gives 0; with
/// `add_one` the precisions for n >= 2 become (m + 1) / (t + 1).
inline double bleu(const std::vector<Tokens>& candidates, const std::vector<Tokens>& references, int max_n = 4,
                   bool add_one = false) {
    const auto st = ngram_stats(candidates, references, max_n);
    double log_sum = 0;
    for (int n = 0; n < max_n; ++n) {
        double m = static_cast<double>(st.matches[static_cast<std::size_t>(n)]);
        double t = static_cast<double>(st.totals[static_cast<std::size_t>(n)]);
        if (add_one && n > 0) {
            m += 1;
            t += 1;
        }
        if (t == 0 || m == 0) return 0.0;
        log_sum += std::log(m / t);
    }
    return brevity_penalty(st.cand_len, st.ref_len) * std::exp(log_sum / max_n);
}

inline std::size_t lcs_length(const Tokens& a, const Tokens& b) {
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j)
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

/// Sentence ROUGE-L F-measure with recall weight beta.
inline double rouge_l(const Tokens& candidate, const Tokens& reference, double beta = 1.2) {
    if (reference.empty()) throw std::invalid_argument("rouge_l: empty reference");
    const auto l = static_cast<double>(lcs_length(candidate, reference));
    if (l == 0) return 0.0;
    const double p = l / static_cast<double>(candidate.size());
    const double r = l / static_cast<double>(reference.size());
    const double b2 = beta * beta;
    return (1 + b2) * p * r / (r + b2 * p);
}

/// Mean sentence ROUGE-L over a corpus.
inline double rouge_l(const std::vector<Tokens>& candidates, const std::vector<Tokens>& references, double beta = 1.2) {
    if (candidates.size() != references.size() || candidates.empty())
        throw std::invalid_argument("rouge_l: candidate/reference count mismatch");
    double acc = 0;
    for (std::size_t i = 0; i < candidates.size(); ++i) acc += rouge_l(candidates[i], references[i], beta);
    return acc / static_cast<double>(candidates.size());
}

struct EvalReport {
    double bleu1 = 0, bleu2 = 0, bleu3 = 0, bleu4 = 0;
    double rouge_l = 0;
    double exact_match = 0;
    int n_sentences = 0;

    /// Sectioned key-value text; scores scaled by 100.
    std::string to_text() const {
        std::ostringstream os;
        os << std::fixed << std::setprecision(2);
        os << "[metrics]\n";
        os << "BLEU1 = " << bleu1 * 100 << '\n' << "BLEU2 = " << bleu2 * 100 << '\n';
        os << "BLEU3 = " << bleu3 * 100 << '\n' << "BLEU4 = " << bleu4 * 100 << '\n';
        os << "ROUGE = " << rouge_l * 100 << '\n';
        os << "EXACT = " << exact_match * 100 << '\n';
        os << "[corpus]\n" << "sentences = " << n_sentences << '\n';
        return os.str();
    }

    void save(const std::filesystem::path& path) const {
        std::ofstream os(path, std::ios::trunc);
        if (!os) throw std::runtime_error("cannot write " + path.string());
        os << to_text();
    }
};

inline EvalReport score_corpus(const std::vector<Tokens>& candidates, const std::vector<Tokens>& references) {
    EvalReport r;
    r.bleu1 = bleu(candidates, references, 1);
    r.bleu2 = bleu(candidates, references, 2);
    r.bleu3 = bleu(candidates, references, 3);
    r.bleu4 = bleu(candidates, references, 4);
    r.rouge_l = rouge_l(candidates, references);
    int exact = 0;
    for (std::size_t i = 0; i < candidates.size(); ++i) exact += candidates[i] == references[i] ? 1 : 0;
    r.exact_match = static_cast<double>(exact) / static_cast<double>(candidates.size());
    r.n_sentences = static_cast<int>(candidates.size());
    return r;
}

}  // namespace slt::metrics
