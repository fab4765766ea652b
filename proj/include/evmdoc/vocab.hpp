#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "evmdoc/corpus.hpp"
#include "evmdoc/errors.hpp"

namespace evmdoc {

// Shared token table for comment words and CFG mnemonics. Ids 0..4 are
// reserved; everything else is assigned by descending training frequency.
struct Vocabulary {
    static constexpr int kPad = 0;
    static constexpr int kUnk = 1;
    static constexpr int kStart = 2;
    static constexpr int kEnd = 3;
    static constexpr int kSep = 4;
    static constexpr size_t kNumSpecials = 5;

    std::vector<std::string> id_to_token;
    std::unordered_map<std::string, int> token_to_id;

    size_t size() const { return id_to_token.size(); }

    int id_of(const std::string& token) const {
        auto it = token_to_id.find(token);
        return it == token_to_id.end() ? kUnk : it->second;
    }

    const std::string& token_of(size_t id) const {
        if (id >= id_to_token.size())
            throw ShapeError("token id " + std::to_string(id) +
                             " outside vocabulary of " +
                             std::to_string(id_to_token.size()));
        return id_to_token[id];
    }

    static bool is_special(int id) {
        return id >= 0 && id < static_cast<int>(kNumSpecials);
    }
};

namespace detail {

inline const std::vector<std::string>& special_tokens() {
    static const std::vector<std::string> specials = {"[PAD]", "[UNK]", "[START]",
                                                      "[END]", "[SEP]"};
    return specials;
}

inline Vocabulary vocab_from_tokens(const std::vector<std::string>& ordered) {
    Vocabulary v;
    for (const std::string& s : special_tokens()) {
        v.token_to_id.emplace(s, static_cast<int>(v.id_to_token.size()));
        v.id_to_token.push_back(s);
    }
    for (const std::string& t : ordered) {
        if (v.token_to_id.count(t)) continue;
        v.token_to_id.emplace(t, static_cast<int>(v.id_to_token.size()));
        v.id_to_token.push_back(t);
    }
    return v;
}

}  // namespace detail

// Counts every CFG and comment token of the training entries and keeps the
// `cap` most frequent, ties resolved by lexicographic order so the table is
// independent of entry order.
inline Vocabulary build_vocabulary(const std::vector<CorpusEntry>& train,
                                   size_t cap = 30000) {
    std::map<std::string, uint64_t> freq;
    for (const CorpusEntry& e : train) {
        for (const std::string& t : e.cfg_tokens) ++freq[t];
        for (const std::string& t : e.comment_tokens) ++freq[t];
    }
    const auto& specials = detail::special_tokens();
    std::vector<std::pair<std::string, uint64_t>> items;
    items.reserve(freq.size());
    for (const auto& [tok, n] : freq) {
        if (std::find(specials.begin(), specials.end(), tok) != specials.end())
            continue;
        items.emplace_back(tok, n);
    }
    std::stable_sort(items.begin(), items.end(),
                     [](const auto& a, const auto& b) {
                         if (a.second != b.second) return a.second > b.second;
                         return a.first < b.first;
                     });
    if (items.size() > cap) items.resize(cap);
    std::vector<std::string> ordered;
    ordered.reserve(items.size());
    for (const auto& [tok, n] : items) ordered.push_back(tok);
    return detail::vocab_from_tokens(ordered);
}

inline std::vector<int> encode_tokens(const Vocabulary& vocab,
                                      const std::vector<std::string>& tokens) {
    std::vector<int> ids;
    ids.reserve(tokens.size());
    for (const std::string& t : tokens) ids.push_back(vocab.id_of(t));
    return ids;
}

// One token per line; the five reserved tokens lead the file and double as a
// format check on load.
inline void save_vocabulary(const Vocabulary& vocab, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write vocabulary file " + path);
    for (const std::string& t : vocab.id_to_token) out << t << '\n';
}

inline Vocabulary load_vocabulary(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read vocabulary file " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(line);
    }
    const auto& specials = detail::special_tokens();
    if (lines.size() < specials.size())
        throw ConfigError("vocabulary file " + path + " is truncated");
    for (size_t i = 0; i < specials.size(); ++i) {
        if (lines[i] != specials[i])
            throw ConfigError("vocabulary file " + path +
                              " has a bad reserved-token header at line " +
                              std::to_string(i + 1));
    }
    Vocabulary v;
    for (const std::string& t : lines) {
        if (t.empty())
            throw ConfigError("vocabulary file " + path +
                              " contains an empty token line");
        if (v.token_to_id.count(t))
            throw ConfigError("vocabulary file " + path +
                              " repeats token '" + t + "'");
        v.token_to_id.emplace(t, static_cast<int>(v.id_to_token.size()));
        v.id_to_token.push_back(t);
    }
    return v;
}

}  // namespace evmdoc
