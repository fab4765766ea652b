#include <catch2/catch_amalgamated.hpp>

#include <sys/stat.h>
#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "evmdoc/pipeline.hpp"

using namespace evmdoc;

namespace {

std::string cli_path() {
    const char* p = std::getenv("EVMDOC_CLI");
    if (!p) FAIL("EVMDOC_CLI environment variable is not set");
    return p;
}

std::string fresh_dir(const std::string& name) {
    std::string dir = "/tmp/evmdoc_cli_" + name;
    std::string cmd = "rm -rf " + dir + " && mkdir -p " + dir;
    REQUIRE(std::system(cmd.c_str()) == 0);
    return dir;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

void spit(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    out << content;
    REQUIRE(out.good());
}

struct RunResult {
    int exit_code = -1;
    std::string out;
    std::string err;
};

RunResult run_cli(const std::string& dir, const std::string& args,
                  const std::string& stdin_text = "") {
    spit(dir + "/stdin.txt", stdin_text);
    std::string cmd = "cd " + dir + " && " + cli_path() + " " + args +
                      " < stdin.txt > stdout.txt 2> stderr.txt";
    int rc = std::system(cmd.c_str());
    RunResult r;
    r.exit_code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
    r.out = slurp(dir + "/stdout.txt");
    r.err = slurp(dir + "/stderr.txt");
    return r;
}

// ten synthetic single-selector contracts with distinct bodies and comments
std::string toy_records(size_t n) {
    static const char* comments[] = {
        "transfers tokens to the recipient",
        "mints new shares",
        "burns the caller balance",
        "approves a spender",
        "checks the owner",
        "updates the oracle price",
        "returns the total supply",
        "sets the exchange rate",
        "reads the vault state",
        "locks pending funds",
        "pauses all trading",
        "swaps between two assets",
    };
    std::ostringstream out;
    for (size_t i = 0; i < n; ++i) {
        char sel[9];
        std::snprintf(sel, sizeof sel, "%08zx", 0x10203040 + i * 0x01010101);
        std::string body = "60";
        char byte[3];
        std::snprintf(byte, sizeof byte, "%02zx", 0x20 + i);
        body += byte;
        body += "01";  // PUSH1 k, ADD
        if (i % 3 == 0) body += "600202";  // PUSH1 2, MUL
        nlohmann::json rec = {
            {"contract_id", "0xc" + std::to_string(i)},
            {"bytecode_hex",
             "60003560e01c8063" + std::string(sel) + "14601157005b" + body +
                 "00"},
            {"selector", "0x" + std::string(sel)},
            {"comment", comments[i % 12]},
        };
        out << rec.dump() << '\n';
    }
    return out.str();
}

}  // namespace

TEST_CASE("configuration file parsing") {
    PipelineConfig cfg;
    std::istringstream in(
        "# model size\n"
        "embed_dim = 48\n"
        "hidden_dim=32   # inline comment\n"
        "\n"
        "lambda = 0.25\n"
        "copy_enabled = false\n"
        "retriever = bow\n"
        "checkpoint = /tmp/m.ckpt\n");
    apply_config_file(cfg, in);
    REQUIRE(cfg.hp.embed_dim == 48);
    REQUIRE(cfg.hp.hidden_dim == 32);
    REQUIRE(cfg.hp.coverage_weight == 0.25);
    REQUIRE(cfg.hp.copy_enabled == false);
    REQUIRE(cfg.retriever == Retriever::BowCosine);
    REQUIRE(cfg.checkpoint == "/tmp/m.ckpt");
    // untouched keys keep their defaults
    REQUIRE(cfg.hp.dropout == 0.1);
    REQUIRE(cfg.topk == 1);
    REQUIRE(cfg.exclude_self == true);
}

TEST_CASE("configuration file rejects bad input") {
    PipelineConfig cfg;
    std::istringstream unknown("no_such_knob = 3\n");
    REQUIRE_THROWS_AS(apply_config_file(cfg, unknown), ConfigError);
    std::istringstream malformed("embed_dim 48\n");
    REQUIRE_THROWS_AS(apply_config_file(cfg, malformed), ConfigError);
    std::istringstream badnum("epochs = soon\n");
    REQUIRE_THROWS_AS(apply_config_file(cfg, badnum), ConfigError);
    std::istringstream badbool("strip = maybe\n");
    REQUIRE_THROWS_AS(apply_config_file(cfg, badbool), ConfigError);
    std::istringstream nokey("= 5\n");
    REQUIRE_THROWS_AS(apply_config_file(cfg, nokey), ConfigError);
}

TEST_CASE("config validation catches contradictory settings") {
    PipelineConfig cfg;
    cfg.select = "newest";
    REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
    cfg = PipelineConfig{};
    cfg.split = "holdout";
    REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
    cfg = PipelineConfig{};
    cfg.k1 = -1;
    REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("disasm subcommand reads stdin and files") {
    std::string dir = fresh_dir("disasm");
    RunResult r = run_cli(dir, "disasm", "6070604001");
    REQUIRE(r.exit_code == 0);
    REQUIRE(r.out == "0 PUSH1 0x70\n2 PUSH1 0x40\n4 ADD\n");

    spit(dir + "/code.hex", "0x6070604001\n");
    RunResult from_file = run_cli(dir, "disasm code.hex");
    REQUIRE(from_file.exit_code == 0);
    REQUIRE(from_file.out == r.out);
}

TEST_CASE("failures exit 2 with a machine-readable category") {
    std::string dir = fresh_dir("errors");
    RunResult bad_hex = run_cli(dir, "disasm", "xyz");
    REQUIRE(bad_hex.exit_code == 2);
    nlohmann::json err = nlohmann::json::parse(bad_hex.err);
    REQUIRE(err["error"] == "MalformedHex");
    REQUIRE(err.contains("message"));

    // empty bytecode disassembles to an empty listing, but has no graph
    RunResult empty = run_cli(dir, "disasm", "");
    REQUIRE(empty.exit_code == 0);
    REQUIRE(empty.out.empty());
    RunResult empty_cfg = run_cli(dir, "cfg", "");
    REQUIRE(empty_cfg.exit_code == 2);
    REQUIRE(nlohmann::json::parse(empty_cfg.err)["error"] == "EmptyCode");

    RunResult no_ckpt = run_cli(dir, "evaluate --corpus missing.jsonl");
    REQUIRE(no_ckpt.exit_code == 2);
    REQUIRE(nlohmann::json::parse(no_ckpt.err)["error"] == "ConfigError");

    spit(dir + "/bad.cfg", "mystery = 1\n");
    RunResult bad_cfg = run_cli(dir, "disasm --config bad.cfg", "00");
    REQUIRE(bad_cfg.exit_code == 2);
    REQUIRE(nlohmann::json::parse(bad_cfg.err)["error"] == "ConfigError");
}

TEST_CASE("cfg subcommand prints blocks, edges, and function lines") {
    std::string dir = fresh_dir("cfg");
    RunResult r = run_cli(
        dir, "cfg",
        "60003560e01c8063a9059cbb14601b57806370a0823114601f57005b602a005b3400");
    REQUIRE(r.exit_code == 0);
    REQUIRE(r.out.find("BLOCK 0 0..16 JumpI\n") != std::string::npos);
    REQUIRE(r.out.find("EDGE 0 3 Taken\n") != std::string::npos);
    REQUIRE(r.out.find("0xa9059cbb\tJUMPDEST PUSH1 STOP\n") !=
            std::string::npos);
    REQUIRE(r.out.find("0x70a08231\tJUMPDEST CALLVALUE STOP\n") !=
            std::string::npos);
    REQUIRE(r.out.find("FALLBACK\tSTOP\n") != std::string::npos);
}

TEST_CASE("prepare is idempotent and honors the seed override") {
    std::string dir = fresh_dir("prepare");
    spit(dir + "/raw.jsonl", toy_records(10));
    spit(dir + "/pipe.cfg", "corpus = corpus.jsonl\nsplits = splits.json\nseed = 5\n");

    RunResult first = run_cli(
        dir, "prepare --config pipe.cfg --input raw.jsonl");
    REQUIRE(first.exit_code == 0);
    nlohmann::json summary = nlohmann::json::parse(first.out);
    REQUIRE(summary["entries"] == 10);
    REQUIRE(summary["seed"] == 5);
    REQUIRE(summary["train"] == 8);
    REQUIRE(summary["valid"] == 1);
    REQUIRE(summary["test"] == 1);
    std::string corpus1 = slurp(dir + "/corpus.jsonl");
    std::string splits1 = slurp(dir + "/splits.json");

    RunResult second = run_cli(
        dir, "prepare --config pipe.cfg --input raw.jsonl");
    REQUIRE(second.exit_code == 0);
    REQUIRE(slurp(dir + "/corpus.jsonl") == corpus1);
    REQUIRE(slurp(dir + "/splits.json") == splits1);

    // a flag beats the file: the manifest must record the overridden seed
    RunResult forced = run_cli(
        dir, "prepare --config pipe.cfg --input raw.jsonl --seed 9");
    REQUIRE(forced.exit_code == 0);
    nlohmann::json manifest =
        nlohmann::json::parse(slurp(dir + "/splits.json"));
    REQUIRE(manifest["seed"] == 9);
    REQUIRE(slurp(dir + "/corpus.jsonl") == corpus1);  // corpus is split-free

    // stdin works in place of --input
    RunResult piped = run_cli(dir, "prepare --config pipe.cfg",
                              toy_records(10));
    REQUIRE(piped.exit_code == 0);
    REQUIRE(nlohmann::json::parse(piped.out)["entries"] == 10);
}

TEST_CASE("prepare refuses a corpus too small to split") {
    std::string dir = fresh_dir("prepare_tiny");
    spit(dir + "/pipe.cfg", "corpus = corpus.jsonl\nsplits = splits.json\n");
    RunResult r = run_cli(dir, "prepare --config pipe.cfg", toy_records(2));
    REQUIRE(r.exit_code == 2);
    REQUIRE(nlohmann::json::parse(r.err)["error"] == "InsufficientData");
}

TEST_CASE("the full pipeline chain runs and reproduces byte-for-byte") {
    std::string dir = fresh_dir("chain");
    spit(dir + "/raw.jsonl", toy_records(10));
    spit(dir + "/pipe.cfg",
         "corpus = corpus.jsonl\n"
         "splits = splits.json\n"
         "index = index.json\n"
         "checkpoint = model.ckpt\n"
         "embed_dim = 12\n"
         "hidden_dim = 12\n"
         "batch = 8\n"
         "epochs = 2\n"
         "dropout = 0.0\n"
         "warmup = 10\n"
         "beam = 2\n"
         "seed = 3\n"
         "topk = 1\n");

    REQUIRE(run_cli(dir, "prepare --config pipe.cfg --input raw.jsonl")
                .exit_code == 0);
    RunResult idx = run_cli(dir, "index --config pipe.cfg");
    REQUIRE(idx.exit_code == 0);
    REQUIRE(nlohmann::json::parse(idx.out)["documents"] == 8);

    RunResult tr = run_cli(dir, "train --config pipe.cfg --log train.log");
    REQUIRE(tr.exit_code == 0);
    nlohmann::json tr_summary = nlohmann::json::parse(tr.out);
    REQUIRE(tr_summary["aborted"] == false);
    REQUIRE(tr_summary["epochs"] == 2);

    // the log is line-delimited JSON with step and epoch events
    std::istringstream log(slurp(dir + "/train.log"));
    std::string line;
    size_t steps = 0, epochs = 0;
    while (std::getline(log, line)) {
        nlohmann::json event = nlohmann::json::parse(line);
        if (event["event"] == "step") {
            ++steps;
            REQUIRE(event.contains("loss"));
            REQUIRE(event.contains("lr"));
        } else if (event["event"] == "epoch") {
            ++epochs;
            REQUIRE(event.contains("valid_bleu4"));
        }
    }
    REQUIRE(epochs == 2);
    REQUIRE(steps == 2);  // 8 examples in one batch of 8, two epochs

    std::string hex =
        "60003560e01c8063102030401460115700"
        "5b60200160020200";
    RunResult gen1 = run_cli(dir, "generate --config pipe.cfg", hex);
    REQUIRE(gen1.exit_code == 0);
    REQUIRE(gen1.out.find("0x10203040\t") != std::string::npos);
    REQUIRE(gen1.out.find("FALLBACK\t") != std::string::npos);
    RunResult gen2 = run_cli(dir, "generate --config pipe.cfg", hex);
    REQUIRE(gen2.out == gen1.out);

    RunResult ev = run_cli(dir,
                           "evaluate --config pipe.cfg --split test "
                           "--report report.json");
    REQUIRE(ev.exit_code == 0);
    nlohmann::json rep = nlohmann::json::parse(ev.out);
    REQUIRE(rep.contains("bleu_4"));
    REQUIRE(rep.contains("rouge_l"));
    REQUIRE(rep["num_examples"] == 1);
    REQUIRE(rep["examples"].is_array());  // per-example scores survive
    nlohmann::json file_rep = nlohmann::json::parse(slurp(dir + "/report.json"));
    REQUIRE(file_rep["bleu_4"] == rep["bleu_4"]);

    RunResult ev2 = run_cli(dir,
                            "evaluate --config pipe.cfg --split test "
                            "--report report.json");
    REQUIRE(ev2.out == ev.out);
}

TEST_CASE("generation works with retrieval disabled and no index") {
    std::string dir = fresh_dir("no_index");
    spit(dir + "/raw.jsonl", toy_records(10));
    spit(dir + "/pipe.cfg",
         "corpus = corpus.jsonl\n"
         "splits = splits.json\n"
         "checkpoint = model.ckpt\n"
         "embed_dim = 8\nhidden_dim = 8\nbatch = 8\nepochs = 1\n"
         "dropout = 0.0\ntopk = 0\n");
    REQUIRE(run_cli(dir, "prepare --config pipe.cfg --input raw.jsonl")
                .exit_code == 0);
    REQUIRE(run_cli(dir, "train --config pipe.cfg --log train.log")
                .exit_code == 0);
    RunResult gen = run_cli(dir, "generate --config pipe.cfg", "6001600201");
    REQUIRE(gen.exit_code == 0);
    REQUIRE(gen.out.find("FALLBACK\t") != std::string::npos);

    // retrieval without an index is a configuration error
    RunResult broken = run_cli(dir, "generate --config pipe.cfg --topk 1",
                               "6001600201");
    REQUIRE(broken.exit_code == 2);
    REQUIRE(nlohmann::json::parse(broken.err)["error"] == "ConfigError");
}

TEST_CASE("a diverging run exits with the numeric fault code") {
    std::string dir = fresh_dir("fault");
    spit(dir + "/raw.jsonl", toy_records(3));
    spit(dir + "/pipe.cfg",
         "corpus = corpus.jsonl\n"
         "splits = splits.json\n"
         "checkpoint = model.ckpt\n"
         "embed_dim = 6\nhidden_dim = 6\nbatch = 1\nepochs = 6\n"
         "dropout = 0.0\nbase_lr = 1e200\nwarmup = 1\ntopk = 0\n");
    REQUIRE(run_cli(dir, "prepare --config pipe.cfg --input raw.jsonl")
                .exit_code == 0);
    RunResult tr = run_cli(dir, "train --config pipe.cfg --log train.log");
    REQUIRE(tr.exit_code == 3);
    REQUIRE(nlohmann::json::parse(tr.err)["error"] == "NumericFault");
    REQUIRE(nlohmann::json::parse(tr.out)["aborted"] == true);
}
