#pragma once

// End-to-end pipeline commands behind the CLI: configuration loading with
// file/flag precedence, corpus preparation, index building, training,
// generation, and evaluation. Each command is a plain function over streams
// so the test suite can drive it without spawning processes.

#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "evmdoc/cfg.hpp"
#include "evmdoc/corpus.hpp"
#include "evmdoc/disasm.hpp"
#include "evmdoc/errors.hpp"
#include "evmdoc/metrics.hpp"
#include "evmdoc/model.hpp"
#include "evmdoc/retrieval.hpp"
#include "evmdoc/vocab.hpp"

namespace evmdoc {

struct PipelineConfig {
    // paths
    std::string input;       // raw records jsonl, or hex file for disasm/cfg
    std::string corpus;      // prepared corpus jsonl
    std::string splits;      // split manifest json
    std::string index;       // persisted retrieval index json
    std::string checkpoint;  // model checkpoint (vocabulary sidecar .vocab)
    std::string report;      // evaluation report json
    std::string log;         // training log jsonl; empty = stdout

    Hyperparams hp;

    // retrieval
    double k1 = kDefaultK1;
    double b = kDefaultB;
    size_t topk = 1;
    bool exclude_self = true;
    Retriever retriever = Retriever::Bm25;

    // behavior
    bool strip = true;          // drop the metadata trailer before decoding
    std::string select = "best";  // which trained weights to persist
    std::string split = "test";   // which split cmd_evaluate scores

    void validate() const {
        hp.validate();
        if (k1 <= 0 || b < 0 || b > 1)
            throw ConfigError("retrieval parameters out of range");
        if (select != "best" && select != "last")
            throw ConfigError("select must be best or last");
        if (split != "train" && split != "valid" && split != "test")
            throw ConfigError("split must be train, valid, or test");
    }
};

// ---------------------------------------------------------------------------
// key=value configuration files; '#' starts a comment, blank lines ignored.

namespace detail {

inline std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t z = s.find_last_not_of(" \t\r\n");
    return s.substr(a, z - a + 1);
}

inline bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("configuration key " + key + " expects a boolean, got " +
                      v);
}

template <typename T>
T parse_number(const std::string& v, const std::string& key) {
    std::istringstream in(v);
    T out;
    in >> out;
    if (!in || !in.eof())
        throw ConfigError("configuration key " + key +
                          " has a malformed value " + v);
    return out;
}

inline Retriever parse_retriever(const std::string& v) {
    if (v == "bm25") return Retriever::Bm25;
    if (v == "bow") return Retriever::BowCosine;
    throw ConfigError("retriever must be bm25 or bow, got " + v);
}

}  // namespace detail

inline void apply_config_entry(PipelineConfig& cfg, const std::string& key,
                               const std::string& value) {
    using detail::parse_bool;
    using detail::parse_number;
    if (key == "input") cfg.input = value;
    else if (key == "corpus") cfg.corpus = value;
    else if (key == "splits") cfg.splits = value;
    else if (key == "index") cfg.index = value;
    else if (key == "checkpoint") cfg.checkpoint = value;
    else if (key == "report") cfg.report = value;
    else if (key == "log") cfg.log = value;
    else if (key == "embed_dim")
        cfg.hp.embed_dim = parse_number<Eigen::Index>(value, key);
    else if (key == "hidden_dim")
        cfg.hp.hidden_dim = parse_number<Eigen::Index>(value, key);
    else if (key == "enc_max_len")
        cfg.hp.enc_max_len = parse_number<size_t>(value, key);
    else if (key == "dec_max_len")
        cfg.hp.dec_max_len = parse_number<size_t>(value, key);
    else if (key == "batch") cfg.hp.batch = parse_number<size_t>(value, key);
    else if (key == "dropout")
        cfg.hp.dropout = parse_number<Real>(value, key);
    else if (key == "epochs") cfg.hp.epochs = parse_number<size_t>(value, key);
    else if (key == "lambda")
        cfg.hp.coverage_weight = parse_number<Real>(value, key);
    else if (key == "beam") cfg.hp.beam_k = parse_number<size_t>(value, key);
    else if (key == "vocab_cap")
        cfg.hp.vocab_cap = parse_number<size_t>(value, key);
    else if (key == "seed") cfg.hp.seed = parse_number<uint64_t>(value, key);
    else if (key == "copy_enabled")
        cfg.hp.copy_enabled = parse_bool(value, key);
    else if (key == "coverage_enabled")
        cfg.hp.coverage_enabled = parse_bool(value, key);
    else if (key == "base_lr") cfg.hp.base_lr = parse_number<Real>(value, key);
    else if (key == "warmup")
        cfg.hp.warmup = parse_number<size_t>(value, key);
    else if (key == "k1") cfg.k1 = parse_number<double>(value, key);
    else if (key == "b") cfg.b = parse_number<double>(value, key);
    else if (key == "topk") cfg.topk = parse_number<size_t>(value, key);
    else if (key == "exclude_self") cfg.exclude_self = parse_bool(value, key);
    else if (key == "retriever")
        cfg.retriever = detail::parse_retriever(value);
    else if (key == "strip") cfg.strip = parse_bool(value, key);
    else if (key == "select") cfg.select = value;
    else if (key == "split") cfg.split = value;
    else
        throw ConfigError("unknown configuration key " + key);
}

inline void apply_config_file(PipelineConfig& cfg, std::istream& in) {
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        std::string text = detail::trim(line);
        if (text.empty()) continue;
        size_t eq = text.find('=');
        if (eq == std::string::npos)
            throw ConfigError("configuration line " + std::to_string(lineno) +
                              " is not key=value");
        std::string key = detail::trim(text.substr(0, eq));
        std::string value = detail::trim(text.substr(eq + 1));
        if (key.empty())
            throw ConfigError("configuration line " + std::to_string(lineno) +
                              " has an empty key");
        apply_config_entry(cfg, key, value);
    }
}

inline void load_config_file(PipelineConfig& cfg, const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open configuration file " + path);
    apply_config_file(cfg, in);
}

// ---------------------------------------------------------------------------
// shared plumbing

namespace detail {

inline std::string read_stream_text(std::istream& in) {
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

inline std::string read_file_text(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open input file " + path);
    return read_stream_text(in);
}

// hex text from the configured input path, or stdin when none is given
inline std::string read_hex_input(const PipelineConfig& cfg,
                                  std::istream& stdin_stream) {
    std::string text = cfg.input.empty() ? read_stream_text(stdin_stream)
                                         : read_file_text(cfg.input);
    return trim(text);
}

inline RawBytecode decode_input(const PipelineConfig& cfg,
                                const std::string& hex) {
    RawBytecode code = parse_hex(hex);
    return cfg.strip ? strip_metadata(code) : code;
}

inline std::vector<CorpusEntry> load_corpus_file(const std::string& path) {
    if (path.empty()) throw ConfigError("no corpus path configured");
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open corpus file " + path);
    return read_corpus_jsonl(in);
}

inline nlohmann::json load_json_file(const std::string& path,
                                     const char* what) {
    std::ifstream in(path);
    if (!in)
        throw ConfigError(std::string("cannot open ") + what + " file " +
                          path);
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded())
        throw ConfigError(std::string(what) + " file " + path +
                          " is not valid JSON");
    return j;
}

// The retrieval codebase: the entries named by the manifest's train list
// paired with the persisted index. Falls back to the whole corpus when no
// manifest is configured.
inline std::vector<CorpusEntry> load_codebase_entries(
    const PipelineConfig& cfg) {
    std::vector<CorpusEntry> entries = load_corpus_file(cfg.corpus);
    if (cfg.splits.empty()) return entries;
    nlohmann::json manifest = load_json_file(cfg.splits, "split manifest");
    return load_split(manifest, entries).train;
}

inline Codebase load_codebase(const PipelineConfig& cfg) {
    Codebase cb;
    cb.entries = load_codebase_entries(cfg);
    cb.index = index_from_json(load_json_file(cfg.index, "index"));
    if (cb.index.N != cb.entries.size())
        throw ConfigError("index covers " + std::to_string(cb.index.N) +
                          " documents but the codebase has " +
                          std::to_string(cb.entries.size()));
    return cb;
}

// Generation needs no index at all when retrieval is off (topk = 0).
inline Codebase load_codebase_if_needed(const PipelineConfig& cfg) {
    if (cfg.topk == 0) return Codebase{};
    if (cfg.index.empty())
        throw ConfigError("retrieval requested (topk > 0) without an index");
    return load_codebase(cfg);
}

struct LoadedModel {
    ModelParams params;
    Hyperparams hp;
    Vocabulary vocab;
    uint64_t step = 0;
};

// Checkpoint hyperparameters are authoritative for the architecture; the
// caller's generation-time knobs (beam width, coverage weight for scoring)
// stay from the live configuration.
inline LoadedModel load_model(const PipelineConfig& cfg) {
    if (cfg.checkpoint.empty()) throw ConfigError("no checkpoint configured");
    LoadedModel m;
    m.params = load_checkpoint(cfg.checkpoint, m.hp, m.step);
    m.hp.beam_k = cfg.hp.beam_k;
    m.vocab = load_vocabulary(cfg.checkpoint + ".vocab");
    if (static_cast<Eigen::Index>(m.vocab.size()) != m.params.vocab_size)
        throw ConfigError("vocabulary sidecar does not match the checkpoint");
    return m;
}

inline std::vector<TrainingExample> build_examples(
    const std::vector<CorpusEntry>& entries, const Codebase& cb,
    const PipelineConfig& cfg) {
    std::vector<TrainingExample> out;
    out.reserve(entries.size());
    for (const CorpusEntry& e : entries) {
        TrainingExample ex;
        ex.input_tokens =
            attach_retrieved(e, cb, cfg.topk, cfg.exclude_self, cfg.retriever);
        ex.gold_tokens = e.comment_tokens;
        out.push_back(std::move(ex));
    }
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// commands

inline int cmd_disasm(const PipelineConfig& cfg, std::istream& in,
                      std::ostream& out) {
    RawBytecode code =
        detail::decode_input(cfg, detail::read_hex_input(cfg, in));
    out << render_listing(disassemble(code));
    return 0;
}

inline int cmd_cfg(const PipelineConfig& cfg, std::istream& in,
                   std::ostream& out) {
    RawBytecode code =
        detail::decode_input(cfg, detail::read_hex_input(cfg, in));
    ControlFlowGraph graph = resolve_jumps(split_blocks(disassemble(code)));
    out << dump_cfg(graph);
    for (const FunctionCfg& fn : extract_functions(graph))
        out << fn.selector.text() << '\t' << join_tokens(serialize_cfg(fn))
            << '\n';
    return 0;
}

inline int cmd_prepare(const PipelineConfig& cfg, std::istream& in,
                       std::ostream& out) {
    std::ifstream file;
    std::istream* source = &in;
    if (!cfg.input.empty()) {
        file.open(cfg.input);
        if (!file) throw ConfigError("cannot open input file " + cfg.input);
        source = &file;
    }
    RecordReadResult raw = read_records_jsonl(*source);
    IngestResult ingested = ingest(raw.records);
    std::vector<CorpusEntry> entries = dedup(ingested.entries);
    DatasetSplit split = split_corpus(entries, cfg.hp.seed);

    if (cfg.corpus.empty()) throw ConfigError("no corpus output path");
    std::ofstream corpus_out(cfg.corpus);
    if (!corpus_out)
        throw ConfigError("cannot write corpus file " + cfg.corpus);
    write_corpus_jsonl(corpus_out, entries);

    if (cfg.splits.empty()) throw ConfigError("no splits output path");
    std::ofstream splits_out(cfg.splits);
    if (!splits_out)
        throw ConfigError("cannot write splits file " + cfg.splits);
    splits_out << split_manifest(split).dump(2) << '\n';

    nlohmann::json diagnostics = nlohmann::json::array();
    for (const auto& d : raw.diagnostics) diagnostics.push_back(d);
    for (const auto& d : ingested.diagnostics) diagnostics.push_back(d);
    out << nlohmann::json{{"entries", entries.size()},
                          {"duplicates",
                           ingested.entries.size() - entries.size()},
                          {"skipped_records", ingested.skipped},
                          {"train", split.train.size()},
                          {"valid", split.valid.size()},
                          {"test", split.test.size()},
                          {"seed", cfg.hp.seed},
                          {"diagnostics", diagnostics}}
               .dump()
        << '\n';
    return 0;
}

inline int cmd_index(const PipelineConfig& cfg, std::ostream& out) {
    std::vector<CorpusEntry> entries = detail::load_codebase_entries(cfg);
    Bm25Index index = build_index(entries, cfg.k1, cfg.b);
    if (cfg.index.empty()) throw ConfigError("no index output path");
    std::ofstream index_out(cfg.index);
    if (!index_out) throw ConfigError("cannot write index file " + cfg.index);
    index_out << index_to_json(index).dump() << '\n';
    out << nlohmann::json{{"documents", index.N},
                          {"vocabulary", index.postings.size()},
                          {"avgdl", index.avgdl}}
               .dump()
        << '\n';
    return 0;
}

inline int cmd_train(const PipelineConfig& cfg, std::ostream& out,
                     std::ostream& log_fallback) {
    std::vector<CorpusEntry> entries = detail::load_corpus_file(cfg.corpus);
    DatasetSplit split;
    if (!cfg.splits.empty()) {
        split = load_split(detail::load_json_file(cfg.splits, "split manifest"),
                           entries);
    } else {
        split.train = entries;
    }
    Codebase cb;
    if (cfg.topk > 0) cb = build_codebase(split.train, cfg.k1, cfg.b);
    std::vector<TrainingExample> train_set =
        detail::build_examples(split.train, cb, cfg);
    std::vector<TrainingExample> valid_set =
        detail::build_examples(split.valid, cb, cfg);
    Vocabulary vocab = build_vocabulary(split.train, cfg.hp.vocab_cap);

    std::ofstream log_file;
    std::ostream* log_stream = &log_fallback;
    if (!cfg.log.empty()) {
        log_file.open(cfg.log);
        if (!log_file) throw ConfigError("cannot write log file " + cfg.log);
        log_stream = &log_file;
    }
    TrainLogger logger = [&](const nlohmann::json& event) {
        (*log_stream) << event.dump() << '\n';
    };

    TrainResult result = train(train_set, valid_set, vocab, cfg.hp, logger);

    if (cfg.checkpoint.empty()) throw ConfigError("no checkpoint path");
    const ModelParams& chosen =
        cfg.select == "last" ? result.last : result.best;
    save_checkpoint(cfg.checkpoint, chosen, cfg.hp, result.steps);
    save_vocabulary(vocab, cfg.checkpoint + ".vocab");

    out << nlohmann::json{{"epochs", result.history.size()},
                          {"steps", result.steps},
                          {"best_epoch", result.best_epoch},
                          {"selected", cfg.select},
                          {"aborted", result.aborted},
                          {"checkpoint", cfg.checkpoint}}
               .dump()
        << '\n';
    if (result.aborted) throw NumericFault("training diverged before finishing");
    return 0;
}

inline int cmd_generate(const PipelineConfig& cfg, std::istream& in,
                        std::ostream& out) {
    detail::LoadedModel model = detail::load_model(cfg);
    Codebase cb = detail::load_codebase_if_needed(cfg);
    RawBytecode code =
        detail::decode_input(cfg, detail::read_hex_input(cfg, in));
    ControlFlowGraph graph = resolve_jumps(split_blocks(disassemble(code)));
    for (const FunctionCfg& fn : extract_functions(graph)) {
        CorpusEntry query;
        query.selector = fn.selector.text();
        query.cfg_tokens = serialize_cfg(fn);
        std::vector<std::string> input = attach_retrieved(
            query, cb, cfg.topk, cfg.exclude_self, cfg.retriever);
        std::vector<std::string> comment = generate_tokens(
            model.params, model.hp, model.vocab, input, model.hp.beam_k);
        out << fn.selector.text() << '\t' << join_tokens(comment) << '\n';
    }
    return 0;
}

inline int cmd_evaluate(const PipelineConfig& cfg, std::ostream& out) {
    detail::LoadedModel model = detail::load_model(cfg);
    std::vector<CorpusEntry> entries = detail::load_corpus_file(cfg.corpus);
    std::vector<CorpusEntry> chosen;
    if (!cfg.splits.empty()) {
        DatasetSplit split = load_split(
            detail::load_json_file(cfg.splits, "split manifest"), entries);
        if (cfg.split == "train") chosen = split.train;
        else if (cfg.split == "valid") chosen = split.valid;
        else chosen = split.test;
    } else {
        chosen = entries;
    }
    Codebase cb = detail::load_codebase_if_needed(cfg);
    std::vector<TokenSeq> outputs, references;
    for (const CorpusEntry& e : chosen) {
        std::vector<std::string> input = attach_retrieved(
            e, cb, cfg.topk, cfg.exclude_self, cfg.retriever);
        outputs.push_back(generate_tokens(model.params, model.hp, model.vocab,
                                          input, model.hp.beam_k));
        references.push_back(e.comment_tokens);
    }
    EvalReport rep = evaluate(outputs, references);
    nlohmann::json j = report_json(rep);
    j["num_examples"] = chosen.size();
    j["split"] = cfg.splits.empty() ? "all" : cfg.split;
    out << j.dump() << '\n';
    if (!cfg.report.empty()) {
        std::ofstream rep_out(cfg.report);
        if (!rep_out)
            throw ConfigError("cannot write report file " + cfg.report);
        rep_out << j.dump(2) << '\n';
    }
    return 0;
}

}  // namespace evmdoc
