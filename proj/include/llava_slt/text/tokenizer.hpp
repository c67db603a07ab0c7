#pragma once

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <array>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace slt::text {

using Tokens = std::vector<std::string>;

enum class Special { kPad, kBos, kEos, kSys, kUsr, kAst, kVid };

inline constexpr std::array<const char*, 7> kSpecialNames{"<pad>", "<bos>", "<eos>", "<sys>",
                                                          "<usr>", "<ast>", "<vid>"};

inline Tokens whitespace_split(const std::string& s) {
    Tokens out;
    std::istringstream is(s);
    std::string tok;
    while (is >> tok) out.push_back(tok);
    return out;
}

/// Closed whitespace vocabulary. Corpus tokens come first (by descending
/// frequency, ties lexicographic), followed by the seven special tokens.
class Vocab {
public:
    Vocab() = default;

    static Vocab build(const std::vector<Tokens>& corpus) {
        std::map<std::string, std::size_t> freq;
        for (const auto& line : corpus)
            for (const auto& tok : line) ++freq[tok];
        if (freq.empty()) throw std::invalid_argument("build_vocab: empty corpus");
        for (const char* name : kSpecialNames)
            if (freq.count(name)) throw std::invalid_argument(std::string("build_vocab: corpus contains reserved token ") + name);
        std::vector<std::pair<std::string, std::size_t>> items(freq.begin(), freq.end());
        std::stable_sort(items.begin(), items.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
        Vocab v;
        for (const auto& [tok, _] : items) v.push(tok);
        for (const char* name : kSpecialNames) v.push(name);
        return v;
    }

    static Vocab build(const std::vector<std::string>& lines) {
        std::vector<Tokens> corpus;
        corpus.reserve(lines.size());
        for (const auto& l : lines) corpus.push_back(whitespace_split(l));
        return build(corpus);
    }

    int size() const { return static_cast<int>(tokens_.size()); }

    int id(Special s) const { return special_base_ + static_cast<int>(s); }
    bool is_special(int id) const { return id >= special_base_ && id < size(); }

    bool contains(const std::string& tok) const { return ids_.count(tok) != 0; }

    int id(const std::string& tok) const {
        auto it = ids_.find(tok);
        if (it == ids_.end()) throw std::invalid_argument("out-of-vocabulary token: " + tok);
        return it->second;
    }

    const std::string& token(int id) const {
        if (id < 0 || id >= size()) throw std::out_of_range("token id out of range: " + std::to_string(id));
        return tokens_[static_cast<std::size_t>(id)];
    }

    std::vector<int> encode(const Tokens& toks) const {
        std::vector<int> out;
        out.reserve(toks.size());
        for (const auto& t : toks) out.push_back(id(t));
        return out;
    }
    std::vector<int> encode(const std::string& text) const { return encode(whitespace_split(text)); }

    /// Space-joined tokens; special ids are skipped.
    std::string decode(const std::vector<int>& ids) const {
        std::string out;
        for (int i : ids) {
            const auto& tok = token(i);
            if (is_special(i)) continue;
            if (!out.empty()) out += ' ';
            out += tok;
        }
        return out;
    }
    Tokens decode_tokens(const std::vector<int>& ids) const {
        Tokens out;
        for (int i : ids)
            if (!is_special(i)) out.push_back(token(i));
        return out;
    }

    /// Line-delimited token<TAB>id.
    void save(const std::filesystem::path& path) const {
        std::ofstream os(path, std::ios::trunc);
        if (!os) throw std::runtime_error("cannot write " + path.string());
        for (int i = 0; i < size(); ++i) os << tokens_[static_cast<std::size_t>(i)] << '\t' << i << '\n';
    }

    static Vocab load(const std::filesystem::path& path) {
        std::ifstream is(path);
        if (!is) throw std::runtime_error("cannot open " + path.string());
        std::vector<std::pair<int, std::string>> rows;
        std::string line;
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            const auto tab = line.rfind('\t');
            if (tab == std::string::npos) throw std::runtime_error(path.string() + ": malformed vocab line");
            rows.emplace_back(std::stoi(line.substr(tab + 1)), line.substr(0, tab));
        }
        std::sort(rows.begin(), rows.end());
        Vocab v;
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (rows[i].first != static_cast<int>(i)) throw std::runtime_error(path.string() + ": ids are not dense");
            v.push(rows[i].second);
        }
        const int base = v.size() - static_cast<int>(kSpecialNames.size());
        for (std::size_t k = 0; k < kSpecialNames.size(); ++k)
            if (base < 0 || v.token(base + static_cast<int>(k)) != kSpecialNames[k])
                throw std::runtime_error(path.string() + ": special tokens missing or out of order");
        return v;
    }

    friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

private:
    void push(const std::string& tok) {
        ids_.emplace(tok, size());
        tokens_.push_back(tok);
        if (tok == kSpecialNames[0]) special_base_ = size() - 1;
    }

    Tokens tokens_;
    std::unordered_map<std::string, int> ids_;
    int special_base_ = 0;
};

enum class Segment { kSystem, kUserText, kVideoSlot, kResponse, kSpecial };

struct TokenSequence {
    std::vector<int> ids;
    std::vector<Segment> segments;

    std::size_t size() const { return ids.size(); }

    /// [first, last) of the video block; throws when absent.
    std::pair<std::size_t, std::size_t> video_span() const {
        const auto first = std::find(segments.begin(), segments.end(), Segment::kVideoSlot);
        if (first == segments.end()) throw std::invalid_argument("token sequence has no video slot");
        const auto last = std::find_if(first, segments.end(), [](Segment s) { return s != Segment::kVideoSlot; });
        return {static_cast<std::size_t>(first - segments.begin()), static_cast<std::size_t>(last - segments.begin())};
    }
};

/// System, task and format prompt strings of the instruction template.
struct ChatTemplate {
    std::string system = "You are a helpful assistant.";
    std::string task_prompt = "Use your expertise to provide the most precise translation.";
    std::string format_prompt = "Answer with one single sentence.";

    Tokens all_tokens() const {
        Tokens out = whitespace_split(system);
        for (const auto* s : {&task_prompt, &format_prompt}) {
            auto t = whitespace_split(*s);
            out.insert(out.end(), t.begin(), t.end());
        }
        return out;
    }

    static ChatTemplate load(const std::filesystem::path& path) {
        boost::property_tree::ptree pt;
        boost::property_tree::read_ini(path.string(), pt);
        ChatTemplate t;
        t.system = pt.get<std::string>("system", t.system);
        t.task_prompt = pt.get<std::string>("task_prompt", t.task_prompt);
        t.format_prompt = pt.get<std::string>("format_prompt", t.format_prompt);
        return t;
    }

    void save(const std::filesystem::path& path) const {
        boost::property_tree::ptree pt;
        pt.put("system", system);
        pt.put("task_prompt", task_prompt);
        pt.put("format_prompt", format_prompt);
        boost::property_tree::write_ini(path.string(), pt);
    }
};

/// <sys> system task format <usr> <vid>*n <ast> [response <eos>]
inline TokenSequence render_chat(const Vocab& vocab, const std::string& system, const std::string& task_prompt,
                                 const std::string& format_prompt, int n_video_tokens,
                                 const std::optional<std::string>& response = std::nullopt) {
    if (n_video_tokens < 1) throw std::invalid_argument("render_chat: n_video_tokens must be >= 1");
    TokenSequence seq;
    const auto push = [&](int id, Segment s) {
        seq.ids.push_back(id);
        seq.segments.push_back(s);
    };
    push(vocab.id(Special::kSys), Segment::kSpecial);
    for (const auto* part : {&system, &task_prompt, &format_prompt})
        for (int id : vocab.encode(*part)) push(id, Segment::kSystem);
    push(vocab.id(Special::kUsr), Segment::kSpecial);
    for (int i = 0; i < n_video_tokens; ++i) push(vocab.id(Special::kVid), Segment::kVideoSlot);
    push(vocab.id(Special::kAst), Segment::kSpecial);
    if (response) {
        for (int id : vocab.encode(*response)) push(id, Segment::kResponse);
        push(vocab.id(Special::kEos), Segment::kSpecial);
    }
    return seq;
}

inline TokenSequence render_chat(const Vocab& vocab, const ChatTemplate& tpl, int n_video_tokens,
                                 const std::optional<std::string>& response = std::nullopt) {
    return render_chat(vocab, tpl.system, tpl.task_prompt, tpl.format_prompt, n_video_tokens, response);
}

}  // namespace slt::text
