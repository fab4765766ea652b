#pragma once

#include <cctype>
#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "evmdoc/cfg.hpp"
#include "evmdoc/disasm.hpp"
#include "evmdoc/errors.hpp"

namespace evmdoc {

struct CorpusEntry {
    std::string entry_id;  // 16 hex chars, content hash of both token lists
    std::string contract_id;
    std::string selector;  // "0x" + 8 hex chars, or "FALLBACK"
    std::vector<std::string> cfg_tokens;
    std::vector<std::string> comment_tokens;
};

struct RawRecord {
    std::string bytecode_hex;
    std::string comment;
    std::string contract_id;
    std::optional<std::string> selector;
};

struct IngestResult {
    std::vector<CorpusEntry> entries;
    size_t skipped = 0;  // records that produced no entry
    std::vector<std::string> diagnostics;
};

struct DatasetSplit {
    uint64_t seed = 0;
    std::vector<CorpusEntry> train;
    std::vector<CorpusEntry> valid;
    std::vector<CorpusEntry> test;
};

namespace detail {

inline bool is_word_char(char c) {
    unsigned char u = static_cast<unsigned char>(c);
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
           (c >= '0' && c <= '9') || c == '_' || u >= 0x80;
}

inline std::string first_nonblank_line(const std::string& text) {
    size_t pos = 0;
    while (pos < text.size()) {
        size_t eol = text.find('\n', pos);
        std::string line = text.substr(pos, eol == std::string::npos
                                                ? std::string::npos
                                                : eol - pos);
        for (char c : line)
            if (!std::isspace(static_cast<unsigned char>(c))) return line;
        if (eol == std::string::npos) break;
        pos = eol + 1;
    }
    return "";
}

}  // namespace detail

// Lowercases, splits on whitespace, detaches punctuation as single-character
// tokens. "@tag" markers stay whole; underscores stay inside words. Only the
// first non-blank line of a multi-line comment is used.
inline std::vector<std::string> tokenize_comment(const std::string& text) {
    std::string line = detail::first_nonblank_line(text);
    std::vector<std::string> tokens;
    size_t i = 0;
    auto lower = [](char c) {
        return (c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : c;
    };
    while (i < line.size()) {
        char c = line[i];
        if (std::isspace(static_cast<unsigned char>(c))) {
            ++i;
        } else if (detail::is_word_char(c)) {
            std::string word;
            while (i < line.size() && detail::is_word_char(line[i]))
                word.push_back(lower(line[i++]));
            tokens.push_back(std::move(word));
        } else if (c == '@' && i + 1 < line.size() &&
                   detail::is_word_char(line[i + 1])) {
            std::string tag = "@";
            ++i;
            while (i < line.size() && detail::is_word_char(line[i]))
                tag.push_back(lower(line[i++]));
            tokens.push_back(std::move(tag));
        } else {
            tokens.push_back(std::string(1, c));
            ++i;
        }
    }
    if (tokens.empty()) throw EmptyComment("comment has no tokens");
    return tokens;
}

// 64-bit FNV-1a over both token lists, with unit and group separators so that
// token boundaries cannot collide across the two lists.
inline std::string entry_hash(const std::vector<std::string>& cfg_tokens,
                              const std::vector<std::string>& comment_tokens) {
    uint64_t h = 14695981039346656037ull;
    auto feed = [&](const char* data, size_t n) {
        for (size_t i = 0; i < n; ++i) {
            h ^= static_cast<uint8_t>(data[i]);
            h *= 1099511628211ull;
        }
    };
    for (const auto& t : cfg_tokens) {
        feed(t.data(), t.size());
        feed("\x1f", 1);
    }
    feed("\x1e", 1);
    for (const auto& t : comment_tokens) {
        feed(t.data(), t.size());
        feed("\x1f", 1);
    }
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[i] = digits[h & 0xf];
        h >>= 4;
    }
    return s;
}

namespace detail {

inline std::optional<FunctionSelector> parse_selector(const std::string& text) {
    if (text == "FALLBACK" || text == "fallback") {
        return FunctionSelector::make_fallback();
    }
    std::string hex = text;
    if (hex.rfind("0x", 0) == 0 || hex.rfind("0X", 0) == 0) hex = hex.substr(2);
    if (hex.size() != 8) return std::nullopt;
    uint32_t v = 0;
    for (char c : hex) {
        int d = hex_digit(c);
        if (d < 0) return std::nullopt;
        v = v << 4 | static_cast<uint32_t>(d);
    }
    return FunctionSelector::make(v);
}

}  // namespace detail

// Full per-record pipeline: strip the metadata trailer, disassemble, recover
// the CFG, extract functions and serialize each. A record with a selector
// contributes only that function; otherwise every function shares the
// record's comment. Failures skip the record, never abort the run.
inline IngestResult ingest(const std::vector<RawRecord>& records) {
    IngestResult out;
    for (size_t idx = 0; idx < records.size(); ++idx) {
        const RawRecord& rec = records[idx];
        auto skip = [&](const std::string& why) {
            ++out.skipped;
            out.diagnostics.push_back("record " + std::to_string(idx) + " (" +
                                      rec.contract_id + "): " + why);
        };
        try {
            if (rec.bytecode_hex.empty()) {
                skip("empty bytecode");
                continue;
            }
            std::vector<std::string> comment = tokenize_comment(rec.comment);
            RawBytecode code = strip_metadata(parse_hex(rec.bytecode_hex));
            auto instructions = disassemble(code);
            if (instructions.empty()) {
                skip("no instructions");
                continue;
            }
            auto graph = resolve_jumps(split_blocks(instructions));
            auto functions = extract_functions(graph);

            std::optional<FunctionSelector> wanted;
            if (rec.selector) {
                wanted = detail::parse_selector(*rec.selector);
                if (!wanted) {
                    skip("unparseable selector '" + *rec.selector + "'");
                    continue;
                }
            }
            size_t emitted = 0;
            for (const auto& fn : functions) {
                if (wanted && !(fn.selector == *wanted)) continue;
                CorpusEntry entry;
                entry.contract_id = rec.contract_id;
                entry.selector = fn.selector.text();
                entry.cfg_tokens = serialize_cfg(fn);
                if (entry.cfg_tokens.empty()) continue;
                entry.comment_tokens = comment;
                entry.entry_id = entry_hash(entry.cfg_tokens, entry.comment_tokens);
                out.entries.push_back(std::move(entry));
                ++emitted;
            }
            if (emitted == 0)
                skip(wanted ? "selector not found in bytecode"
                            : "no function produced a sequence");
        } catch (const Error& e) {
            skip(std::string(e.category()) + ": " + e.what());
        }
    }
    return out;
}

// First occurrence per entry_id wins; order otherwise untouched.
inline std::vector<CorpusEntry> dedup(const std::vector<CorpusEntry>& entries) {
    std::vector<CorpusEntry> out;
    std::set<std::string> seen;
    for (const auto& e : entries)
        if (seen.insert(e.entry_id).second) out.push_back(e);
    return out;
}

// Seeded Fisher-Yates shuffle, then an 80/10/10 cut. The two small partitions
// take floor(N/10) each and the remainder trains.
inline DatasetSplit split_corpus(const std::vector<CorpusEntry>& entries,
                                 uint64_t seed) {
    if (entries.size() < 3)
        throw InsufficientData("need at least 3 entries, have " +
                               std::to_string(entries.size()));
    std::vector<size_t> order(entries.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::mt19937_64 rng(seed);
    for (size_t i = order.size() - 1; i > 0; --i) {
        size_t j = static_cast<size_t>(rng() % (i + 1));
        std::swap(order[i], order[j]);
    }
    size_t n = entries.size();
    size_t n_valid = n / 10;
    size_t n_test = n / 10;
    size_t n_train = n - n_valid - n_test;

    DatasetSplit split;
    split.seed = seed;
    for (size_t i = 0; i < n; ++i) {
        const CorpusEntry& e = entries[order[i]];
        if (i < n_train)
            split.train.push_back(e);
        else if (i < n_train + n_valid)
            split.valid.push_back(e);
        else
            split.test.push_back(e);
    }
    return split;
}

// ---------------------------------------------------------------------------
// JSON-lines corpus files and the split manifest.

inline void to_json(nlohmann::json& j, const CorpusEntry& e) {
    j = {{"entry_id", e.entry_id},
         {"contract_id", e.contract_id},
         {"selector", e.selector},
         {"cfg_tokens", e.cfg_tokens},
         {"comment_tokens", e.comment_tokens}};
}

inline void from_json(const nlohmann::json& j, CorpusEntry& e) {
    j.at("entry_id").get_to(e.entry_id);
    j.at("contract_id").get_to(e.contract_id);
    j.at("selector").get_to(e.selector);
    j.at("cfg_tokens").get_to(e.cfg_tokens);
    j.at("comment_tokens").get_to(e.comment_tokens);
}

struct RecordReadResult {
    std::vector<RawRecord> records;
    std::vector<std::string> diagnostics;  // unparseable lines
};

inline RecordReadResult read_records_jsonl(std::istream& in) {
    RecordReadResult out;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        bool blank = true;
        for (char c : line)
            if (!std::isspace(static_cast<unsigned char>(c))) blank = false;
        if (blank) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object() || !j.contains("bytecode_hex") ||
            !j.contains("comment") || !j.contains("contract_id") ||
            !j["bytecode_hex"].is_string() || !j["comment"].is_string() ||
            !j["contract_id"].is_string()) {
            out.diagnostics.push_back("line " + std::to_string(lineno) +
                                      ": not a valid record");
            continue;
        }
        RawRecord rec;
        rec.bytecode_hex = j["bytecode_hex"].get<std::string>();
        rec.comment = j["comment"].get<std::string>();
        rec.contract_id = j["contract_id"].get<std::string>();
        if (j.contains("selector") && j["selector"].is_string())
            rec.selector = j["selector"].get<std::string>();
        out.records.push_back(std::move(rec));
    }
    return out;
}

inline void write_corpus_jsonl(std::ostream& os,
                               const std::vector<CorpusEntry>& entries) {
    for (const auto& e : entries) {
        nlohmann::json j = e;
        os << j.dump() << '\n';
    }
}

inline std::vector<CorpusEntry> read_corpus_jsonl(std::istream& in) {
    std::vector<CorpusEntry> out;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded())
            throw ConfigError("corpus line " + std::to_string(lineno) +
                              " is not valid JSON");
        out.push_back(j.get<CorpusEntry>());
    }
    return out;
}

inline nlohmann::json split_manifest(const DatasetSplit& split) {
    auto ids = [](const std::vector<CorpusEntry>& v) {
        std::vector<std::string> out;
        out.reserve(v.size());
        for (const auto& e : v) out.push_back(e.entry_id);
        return out;
    };
    return {{"seed", split.seed},
            {"train", ids(split.train)},
            {"valid", ids(split.valid)},
            {"test", ids(split.test)}};
}

// Rebuilds a split from its manifest against a loaded corpus.
inline DatasetSplit load_split(const nlohmann::json& manifest,
                               const std::vector<CorpusEntry>& entries) {
    std::map<std::string, const CorpusEntry*> by_id;
    for (const auto& e : entries) by_id[e.entry_id] = &e;
    DatasetSplit split;
    split.seed = manifest.at("seed").get<uint64_t>();
    auto fill = [&](const char* key, std::vector<CorpusEntry>& dst) {
        for (const auto& id : manifest.at(key)) {
            auto it = by_id.find(id.get<std::string>());
            if (it == by_id.end())
                throw ConfigError("split manifest names unknown entry " +
                                  id.get<std::string>());
            dst.push_back(*it->second);
        }
    };
    fill("train", split.train);
    fill("valid", split.valid);
    fill("test", split.test);
    return split;
}

}  // namespace evmdoc
