#pragma once

#include "llava_slt/synth/language.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace slt::synth {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// SLTF video files: "SLTF", u32 LE rows, u32 LE cols, rows*cols f32 LE.

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    const std::array<char, 4> b{static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                                static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
    os.write(b.data(), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
    std::array<unsigned char, 4> b{};
    if (!is.read(reinterpret_cast<char*>(b.data()), 4)) throw std::runtime_error("unexpected end of file");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f32(std::ostream& os, float f) { put_u32(os, std::bit_cast<std::uint32_t>(f)); }
inline float get_f32(std::istream& is) { return std::bit_cast<float>(get_u32(is)); }

}  // namespace detail

inline void write_sltf(const fs::path& path, const Matrix<float>& frames) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os.write("SLTF", 4);
    detail::put_u32(os, static_cast<std::uint32_t>(frames.rows()));
    detail::put_u32(os, static_cast<std::uint32_t>(frames.cols()));
    for (Index i = 0; i < frames.size(); ++i) detail::put_f32(os, frames.data()[i]);
}

inline Matrix<float> read_sltf(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    std::array<char, 4> magic{};
    if (!is.read(magic.data(), 4) || std::memcmp(magic.data(), "SLTF", 4) != 0)
        throw std::runtime_error(path.string() + ": bad SLTF magic");
    const auto rows = detail::get_u32(is);
    const auto cols = detail::get_u32(is);
    if (rows == 0 || cols == 0) throw std::runtime_error(path.string() + ": empty SLTF tensor");
    Matrix<float> m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) {
        m.data()[i] = detail::get_f32(is);
        if (!std::isfinite(m.data()[i])) throw std::runtime_error(path.string() + ": non-finite value");
    }
    return m;
}

// ---------------------------------------------------------------------------
// Manifests: one record per line, id<TAB>gloss<TAB>text<TAB>video_path.

struct ManifestRecord {
    std::string id;
    Tokens gloss;
    Tokens text;
    std::string video_path;  // relative to the manifest's directory

    friend bool operator==(const ManifestRecord&, const ManifestRecord&) = default;
};

inline void write_manifest(const fs::path& path, const std::vector<ManifestRecord>& records) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    for (const auto& r : records) os << r.id << '\t' << join(r.gloss) << '\t' << join(r.text) << '\t' << r.video_path << '\n';
}

inline std::vector<ManifestRecord> read_manifest(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    std::vector<ManifestRecord> out;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::size_t start = 0;
        for (;;) {
            const auto tab = line.find('\t', start);
            fields.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
            if (tab == std::string::npos) break;
            start = tab + 1;
        }
        if (fields.size() != 4)
            throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": expected 4 tab-separated fields");
        out.push_back({fields[0], split(fields[1]), split(fields[2]), fields[3]});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Split generation.

enum class Split : std::uint64_t { kTrain = 1, kVal = 2, kTest = 3, kCorpus = 4 };

inline const char* split_name(Split s) {
    switch (s) {
        case Split::kTrain: return "train";
        case Split::kVal: return "val";
        case Split::kTest: return "test";
        case Split::kCorpus: return "corpus";
    }
    return "?";
}

struct Sample {
    std::string id;
    GlossTextPair pair;
    FeatureSequence video;
    std::uint64_t attempt = 0;  // rejection index used to keep splits disjoint
};

/// Sample `index` of `split` as a pure function of (seed, split, index), with
/// glosses in `exclude` rejected so that splits stay disjoint.
inline Sample make_sample(const SyntheticLanguage& lang, std::uint64_t seed, Split split, std::uint64_t index,
                          const std::set<Tokens>& exclude, const RenderOptions& opt = {}) {
    for (std::uint64_t attempt = 0;; ++attempt) {
        Rng rng = Rng::derive({seed, static_cast<std::uint64_t>(split), index, attempt});
        GlossTextPair pair = sample_pair(lang, rng);
        if (exclude.count(pair.gloss)) continue;
        Sample s;
        s.id = std::string(split_name(split)) + "-" + std::to_string(index);
        s.video = render_video(lang, pair.gloss, rng, opt);
        s.pair = std::move(pair);
        s.attempt = attempt;
        return s;
    }
}

struct SplitSizes {
    int train = 0;
    int val = 0;
    int test = 0;
};

struct GeneratedData {
    std::vector<Sample> train, val, test;
};

/// Train, then val excluding train glosses, then test excluding both.
inline GeneratedData generate_splits(const SyntheticLanguage& lang, std::uint64_t seed, const SplitSizes& sizes,
                                     const RenderOptions& opt = {}) {
    GeneratedData d;
    std::set<Tokens> seen;
    const std::set<Tokens> none;
    for (int i = 0; i < sizes.train; ++i) d.train.push_back(make_sample(lang, seed, Split::kTrain, static_cast<std::uint64_t>(i), none, opt));
    for (const auto& s : d.train) seen.insert(s.pair.gloss);
    for (int i = 0; i < sizes.val; ++i) d.val.push_back(make_sample(lang, seed, Split::kVal, static_cast<std::uint64_t>(i), seen, opt));
    for (const auto& s : d.val) seen.insert(s.pair.gloss);
    for (int i = 0; i < sizes.test; ++i) d.test.push_back(make_sample(lang, seed, Split::kTest, static_cast<std::uint64_t>(i), seen, opt));
    return d;
}

/// Text-only gloss/text pairs for linguistic pretraining, avoiding glosses in
/// `exclude` (the held-out splits).
inline std::vector<GlossTextPair> sample_text_pairs(const SyntheticLanguage& lang, std::uint64_t seed, int count,
                                                    const std::set<Tokens>& exclude) {
    std::vector<GlossTextPair> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        for (std::uint64_t attempt = 0;; ++attempt) {
            Rng rng = Rng::derive({seed, static_cast<std::uint64_t>(Split::kCorpus), static_cast<std::uint64_t>(i), attempt});
            GlossTextPair p = sample_pair(lang, rng);
            if (exclude.count(p.gloss)) continue;
            out.push_back(std::move(p));
            break;
        }
    }
    return out;
}

inline std::vector<ManifestRecord> to_records(const std::vector<Sample>& samples, const std::string& video_dir) {
    std::vector<ManifestRecord> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back({s.id, s.pair.gloss, s.pair.text, video_dir + "/" + s.id + ".sltf"});
    return out;
}

}  // namespace slt::synth
