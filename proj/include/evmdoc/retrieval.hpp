#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "evmdoc/corpus.hpp"
#include "evmdoc/errors.hpp"

namespace evmdoc {

inline constexpr double kDefaultK1 = 1.2;
inline constexpr double kDefaultB = 0.75;
inline const std::string kSepToken = "[SEP]";

struct Bm25Index {
    // token -> (entry_id, term frequency), entry ids ascending
    std::map<std::string, std::vector<std::pair<std::string, int>>> postings;
    std::map<std::string, int> doc_len;
    double avgdl = 0.0;
    size_t N = 0;
    double k1 = kDefaultK1;
    double b = kDefaultB;
};

struct RetrievalResult {
    std::vector<std::pair<std::string, double>> ranked;  // (entry_id, score)
};

inline Bm25Index build_index(const std::vector<CorpusEntry>& entries,
                             double k1 = kDefaultK1, double b = kDefaultB) {
    if (entries.empty()) throw EmptyCodebase("no entries to index");
    Bm25Index index;
    index.k1 = k1;
    index.b = b;
    index.N = entries.size();
    size_t total_len = 0;
    for (const auto& e : entries) {
        index.doc_len[e.entry_id] = static_cast<int>(e.cfg_tokens.size());
        total_len += e.cfg_tokens.size();
        std::map<std::string, int> tf;
        for (const auto& t : e.cfg_tokens) ++tf[t];
        for (const auto& [token, count] : tf)
            index.postings[token].emplace_back(e.entry_id, count);
    }
    for (auto& [token, list] : index.postings)
        std::sort(list.begin(), list.end());
    index.avgdl = static_cast<double>(total_len) / static_cast<double>(index.N);
    return index;
}

namespace detail {

inline RetrievalResult rank_scores(std::map<std::string, double> scores,
                                   size_t k) {
    RetrievalResult out;
    out.ranked.assign(scores.begin(), scores.end());
    std::sort(out.ranked.begin(), out.ranked.end(),
              [](const auto& a, const auto& b) {
                  if (a.second != b.second) return a.second > b.second;
                  return a.first < b.first;
              });
    if (out.ranked.size() > k) out.ranked.resize(k);
    return out;
}

}  // namespace detail

// Okapi scoring; the sum runs over the query tokens as given, so a repeated
// query token contributes once per occurrence. Documents that match nothing
// keep score 0 and still take part in the deterministic tie order.
inline RetrievalResult query(const Bm25Index& index,
                             const std::vector<std::string>& q, size_t k) {
    std::map<std::string, double> scores;
    for (const auto& [id, len] : index.doc_len) scores[id] = 0.0;
    if (k == 0) return {};
    for (const auto& token : q) {
        auto it = index.postings.find(token);
        if (it == index.postings.end()) continue;
        double n = static_cast<double>(it->second.size());
        double N = static_cast<double>(index.N);
        double idf = std::log((N - n + 0.5) / (n + 0.5) + 1.0);
        for (const auto& [id, tf] : it->second) {
            double dl = index.doc_len.at(id);
            double denom =
                tf + index.k1 * (1.0 - index.b + index.b * dl / index.avgdl);
            scores[id] += idf * tf * (index.k1 + 1.0) / denom;
        }
    }
    return detail::rank_scores(std::move(scores), k);
}

// Cosine similarity between token-count vectors, same ordering rules.
inline RetrievalResult bow_cosine_query(const std::vector<CorpusEntry>& entries,
                                        const std::vector<std::string>& q,
                                        size_t k) {
    if (entries.empty()) throw EmptyCodebase("no entries to compare");
    if (k == 0) return {};
    std::map<std::string, int> qc;
    for (const auto& t : q) ++qc[t];
    double qnorm = 0.0;
    for (const auto& [t, c] : qc) qnorm += double(c) * c;
    qnorm = std::sqrt(qnorm);

    std::map<std::string, double> scores;
    for (const auto& e : entries) {
        std::map<std::string, int> dc;
        for (const auto& t : e.cfg_tokens) ++dc[t];
        double dot = 0.0, dnorm = 0.0;
        for (const auto& [t, c] : dc) {
            dnorm += double(c) * c;
            auto it = qc.find(t);
            if (it != qc.end()) dot += double(c) * it->second;
        }
        dnorm = std::sqrt(dnorm);
        scores[e.entry_id] =
            (qnorm == 0.0 || dnorm == 0.0) ? 0.0 : dot / (qnorm * dnorm);
    }
    return detail::rank_scores(std::move(scores), k);
}

enum class Retriever { Bm25, BowCosine };

// Indexed corpus plus comment lookup, the unit the model consumes.
struct Codebase {
    std::vector<CorpusEntry> entries;
    Bm25Index index;

    const CorpusEntry* find(const std::string& entry_id) const {
        for (const auto& e : entries)
            if (e.entry_id == entry_id) return &e;
        return nullptr;
    }
};

inline Codebase build_codebase(const std::vector<CorpusEntry>& entries,
                               double k1 = kDefaultK1, double b = kDefaultB) {
    Codebase cb;
    cb.entries = entries;
    cb.index = build_index(entries, k1, b);
    return cb;
}

// Model input: comments of the top-k hits in rank order, one [SEP], then the
// query's own CFG tokens. exclude_self drops a hit that IS the query entry
// (leave-one-out for training so the label never leaks into the input).
inline std::vector<std::string> attach_retrieved(
    const CorpusEntry& query_entry, const Codebase& codebase, size_t k,
    bool exclude_self, Retriever retriever = Retriever::Bm25) {
    std::vector<std::string> out;
    if (k > 0) {
        size_t want = k + (exclude_self ? 1 : 0);
        RetrievalResult res =
            retriever == Retriever::Bm25
                ? query(codebase.index, query_entry.cfg_tokens, want)
                : bow_cosine_query(codebase.entries, query_entry.cfg_tokens,
                                   want);
        size_t taken = 0;
        for (const auto& [id, score] : res.ranked) {
            if (taken == k) break;
            if (exclude_self && id == query_entry.entry_id) continue;
            const CorpusEntry* hit = codebase.find(id);
            if (!hit) continue;
            out.insert(out.end(), hit->comment_tokens.begin(),
                       hit->comment_tokens.end());
            ++taken;
        }
    }
    out.push_back(kSepToken);
    out.insert(out.end(), query_entry.cfg_tokens.begin(),
               query_entry.cfg_tokens.end());
    return out;
}

// ---------------------------------------------------------------------------
// Index persistence.

inline nlohmann::json index_to_json(const Bm25Index& index) {
    nlohmann::json postings = nlohmann::json::object();
    for (const auto& [token, list] : index.postings) {
        nlohmann::json rows = nlohmann::json::array();
        for (const auto& [id, tf] : list) rows.push_back({id, tf});
        postings[token] = std::move(rows);
    }
    return {{"format", "bm25-index"}, {"version", 1},
            {"k1", index.k1},         {"b", index.b},
            {"N", index.N},           {"avgdl", index.avgdl},
            {"doc_len", index.doc_len}, {"postings", postings}};
}

inline Bm25Index index_from_json(const nlohmann::json& j) {
    if (!j.is_object() || j.value("format", "") != "bm25-index")
        throw ConfigError("not a bm25 index file");
    if (j.value("version", 0) != 1)
        throw ConfigError("unsupported index version");
    Bm25Index index;
    index.k1 = j.at("k1").get<double>();
    index.b = j.at("b").get<double>();
    index.N = j.at("N").get<size_t>();
    index.avgdl = j.at("avgdl").get<double>();
    j.at("doc_len").get_to(index.doc_len);
    for (const auto& [token, rows] : j.at("postings").items()) {
        auto& list = index.postings[token];
        for (const auto& row : rows)
            list.emplace_back(row.at(0).get<std::string>(), row.at(1).get<int>());
    }
    return index;
}

}  // namespace evmdoc
