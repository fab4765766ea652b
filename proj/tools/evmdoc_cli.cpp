// Command-line front end for the bytecode-to-comment pipeline.
//
// Subcommands: disasm, cfg, prepare, index, train, generate, evaluate.
// Settings resolve as: command-line flag > configuration file > default.
// Exit codes: 0 success, 2 input error, 3 numeric fault. Failures print a
// single JSON line {"error": <category>, "message": ...} on stderr.

#include <cstdint>
#include <functional>
#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "evmdoc/pipeline.hpp"

using namespace evmdoc;

namespace {

// Records every flag together with how it lands in the config, so file
// settings load first and explicitly passed flags overwrite them after.
struct OverrideSet {
    std::vector<std::pair<CLI::Option*, std::function<void(PipelineConfig&)>>>
        entries;

    void apply(PipelineConfig& cfg) const {
        for (const auto& [opt, setter] : entries)
            if (opt->count() > 0) setter(cfg);
    }
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"translate EVM runtime bytecode into function comments"};
    app.require_subcommand(1);

    std::string config_path;
    app.add_option("--config", config_path,
                   "key=value configuration file (# comments allowed)");

    OverrideSet overrides;
    auto add = [&overrides](CLI::App* target, const std::string& name,
                            auto& slot, const std::string& help,
                            auto assign) {
        CLI::Option* opt = target->add_option(name, slot, help);
        overrides.entries.emplace_back(
            opt, [&slot, assign](PipelineConfig& cfg) { assign(cfg, slot); });
        return opt;
    };
    auto add_flag = [&overrides](CLI::App* target, const std::string& name,
                                 const std::string& help, auto assign) {
        CLI::Option* opt = target->add_flag(name, help);
        overrides.entries.emplace_back(
            opt, [assign](PipelineConfig& cfg) { assign(cfg); });
        return opt;
    };

    static uint64_t seed;
    static size_t topk, beam;
    static double lambda, k1, b;
    static std::string retriever, select;
    add(&app, "--seed", seed, "random seed for splits and training",
        [](PipelineConfig& c, uint64_t v) { c.hp.seed = v; });
    add(&app, "--topk", topk, "retrieved comments attached to each input",
        [](PipelineConfig& c, size_t v) { c.topk = v; });
    add(&app, "--lambda", lambda, "coverage loss weight",
        [](PipelineConfig& c, double v) { c.hp.coverage_weight = v; });
    add(&app, "--beam", beam, "beam width for generation",
        [](PipelineConfig& c, size_t v) { c.hp.beam_k = v; });
    add(&app, "--k1", k1, "retrieval term-frequency saturation",
        [](PipelineConfig& c, double v) { c.k1 = v; });
    add(&app, "--b", b, "retrieval length normalization",
        [](PipelineConfig& c, double v) { c.b = v; });
    add(&app, "--retriever", retriever, "retrieval scorer: bm25 or bow",
        [](PipelineConfig& c, const std::string& v) {
            c.retriever = detail::parse_retriever(v);
        });
    add(&app, "--select", select, "weights to persist: best or last",
        [](PipelineConfig& c, const std::string& v) { c.select = v; });
    add_flag(&app, "--no-exclude-self",
             "let an entry retrieve its own comment",
             [](PipelineConfig& c) { c.exclude_self = false; });
    add_flag(&app, "--no-strip", "keep the metadata trailer before decoding",
             [](PipelineConfig& c) { c.strip = false; });

    // path plumbing shared by several subcommands
    static std::string input, corpus, splits, index_path, checkpoint, report,
        log_path, eval_split;
    auto add_path = [&](CLI::App* sub, const char* name, std::string& slot,
                        const char* help, auto assign) {
        add(sub, name, slot, help, assign);
    };
    auto corpus_opt = [&](CLI::App* sub) {
        add_path(sub, "--corpus", corpus, "prepared corpus jsonl",
                 [](PipelineConfig& c, const std::string& v) { c.corpus = v; });
    };
    auto splits_opt = [&](CLI::App* sub) {
        add_path(sub, "--splits", splits, "split manifest json",
                 [](PipelineConfig& c, const std::string& v) { c.splits = v; });
    };
    auto index_opt = [&](CLI::App* sub) {
        add_path(sub, "--index", index_path, "persisted retrieval index",
                 [](PipelineConfig& c, const std::string& v) { c.index = v; });
    };
    auto checkpoint_opt = [&](CLI::App* sub) {
        add_path(sub, "--checkpoint", checkpoint, "model checkpoint path",
                 [](PipelineConfig& c, const std::string& v) {
                     c.checkpoint = v;
                 });
    };
    auto input_positional = [&](CLI::App* sub, const char* help) {
        add_path(sub, "input", input, help,
                 [](PipelineConfig& c, const std::string& v) { c.input = v; });
    };

    CLI::App* disasm = app.add_subcommand(
        "disasm", "disassemble runtime bytecode to a listing");
    input_positional(disasm, "hex file (stdin when omitted)");

    CLI::App* cfg_cmd = app.add_subcommand(
        "cfg", "recover the control flow graph and per-function sequences");
    input_positional(cfg_cmd, "hex file (stdin when omitted)");

    CLI::App* prepare = app.add_subcommand(
        "prepare", "build the deduplicated corpus and split manifest");
    add_path(prepare, "--input", input, "raw records jsonl (stdin if absent)",
             [](PipelineConfig& c, const std::string& v) { c.input = v; });
    corpus_opt(prepare);
    splits_opt(prepare);

    CLI::App* index_cmd = app.add_subcommand(
        "index", "build and persist the retrieval index over the train split");
    corpus_opt(index_cmd);
    splits_opt(index_cmd);
    index_opt(index_cmd);

    CLI::App* train_cmd =
        app.add_subcommand("train", "train the translation model");
    corpus_opt(train_cmd);
    splits_opt(train_cmd);
    checkpoint_opt(train_cmd);
    add_path(train_cmd, "--log", log_path, "training log jsonl (stdout if absent)",
             [](PipelineConfig& c, const std::string& v) { c.log = v; });

    CLI::App* generate = app.add_subcommand(
        "generate", "emit one comment per recovered function");
    input_positional(generate, "hex file (stdin when omitted)");
    corpus_opt(generate);
    splits_opt(generate);
    index_opt(generate);
    checkpoint_opt(generate);

    CLI::App* evaluate_cmd = app.add_subcommand(
        "evaluate", "score generated comments against gold references");
    corpus_opt(evaluate_cmd);
    splits_opt(evaluate_cmd);
    index_opt(evaluate_cmd);
    checkpoint_opt(evaluate_cmd);
    add_path(evaluate_cmd, "--report", report, "report json output path",
             [](PipelineConfig& c, const std::string& v) { c.report = v; });
    add(evaluate_cmd, "--split", eval_split,
        "which split to score: train, valid, or test",
        [](PipelineConfig& c, const std::string& v) { c.split = v; });

    // let global flags appear after the subcommand name too
    for (CLI::App* sub : app.get_subcommands(nullptr)) sub->fallthrough();

    CLI11_PARSE(app, argc, argv);

    try {
        PipelineConfig cfg;
        if (!config_path.empty()) load_config_file(cfg, config_path);
        overrides.apply(cfg);
        cfg.validate();

        if (disasm->parsed()) return cmd_disasm(cfg, std::cin, std::cout);
        if (cfg_cmd->parsed()) return cmd_cfg(cfg, std::cin, std::cout);
        if (prepare->parsed()) return cmd_prepare(cfg, std::cin, std::cout);
        if (index_cmd->parsed()) return cmd_index(cfg, std::cout);
        if (train_cmd->parsed())
            return cmd_train(cfg, std::cout, std::cout);
        if (generate->parsed()) return cmd_generate(cfg, std::cin, std::cout);
        if (evaluate_cmd->parsed()) return cmd_evaluate(cfg, std::cout);
        throw ConfigError("no subcommand selected");
    } catch (const NumericFault& e) {
        std::cerr << nlohmann::json{{"error", e.category()},
                                    {"message", e.what()}}
                         .dump()
                  << std::endl;
        return 3;
    } catch (const Error& e) {
        std::cerr << nlohmann::json{{"error", e.category()},
                                    {"message", e.what()}}
                         .dump()
                  << std::endl;
        return 2;
    } catch (const std::exception& e) {
        std::cerr << nlohmann::json{{"error", "InternalError"},
                                    {"message", e.what()}}
                         .dump()
                  << std::endl;
        return 2;
    }
}
