#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "evmdoc/metrics.hpp"

using namespace evmdoc;
using Catch::Matchers::WithinAbs;

namespace {

TokenSeq seq(std::initializer_list<const char*> xs) {
    TokenSeq out;
    for (const char* x : xs) out.emplace_back(x);
    return out;
}

}  // namespace

TEST_CASE("identical sequences score 100 at every order") {
    auto s = seq({"a", "b", "c"});
    BleuScores b = sentence_bleu(s, s);
    for (int k = 0; k < 4; ++k) REQUIRE_THAT(b.bleu[k], WithinAbs(1.0, 1e-12));
    REQUIRE_THAT(rouge_n(s, s, 1), WithinAbs(1.0, 1e-12));
    REQUIRE_THAT(rouge_n(s, s, 2), WithinAbs(1.0, 1e-12));
    REQUIRE_THAT(rouge_l(s, s), WithinAbs(1.0, 1e-12));
}

TEST_CASE("bleu worked example with one substitution") {
    // hyp a b c d vs ref a b x d:
    //   p1 = 3/4, p2 = (1+1)/(3+1), p3 = (0+1)/(2+1), p4 = (0+1)/(1+1)
    auto hyp = seq({"a", "b", "c", "d"});
    auto ref = seq({"a", "b", "x", "d"});
    BleuScores b = sentence_bleu(hyp, ref);
    REQUIRE_THAT(b.bleu[0], WithinAbs(0.75, 1e-12));
    REQUIRE_THAT(b.bleu[1], WithinAbs(std::sqrt(0.375), 1e-12));
    REQUIRE_THAT(b.bleu[2], WithinAbs(0.5, 1e-12));   // (0.125)^(1/3)
    REQUIRE_THAT(b.bleu[3], WithinAbs(0.5, 1e-12));   // (0.0625)^(1/4)
}

TEST_CASE("no unigram overlap zeroes every order despite smoothing") {
    BleuScores b = sentence_bleu(seq({"x", "y"}), seq({"a", "b"}));
    for (int k = 0; k < 4; ++k) REQUIRE(b.bleu[k] == 0.0);
}

TEST_CASE("empty hypothesis scores zero") {
    BleuScores b = sentence_bleu({}, seq({"a"}));
    for (int k = 0; k < 4; ++k) REQUIRE(b.bleu[k] == 0.0);
}

TEST_CASE("brevity penalty applies only when hypothesis is shorter") {
    // hyp [a] vs ref [a b]: all precisions 1 after smoothing, BP = e^(1-2)
    BleuScores shorter = sentence_bleu(seq({"a"}), seq({"a", "b"}));
    REQUIRE_THAT(shorter.bleu[3], WithinAbs(std::exp(-1.0), 1e-12));
    // hyp [a b] vs ref [a]: longer hypothesis, no penalty
    BleuScores longer = sentence_bleu(seq({"a", "b"}), seq({"a"}));
    REQUIRE_THAT(longer.bleu[0], WithinAbs(0.5, 1e-12));
}

TEST_CASE("clipping caps repeated hypothesis tokens") {
    // hyp a a a vs ref a: unigram matches clip at 1 -> p1 = 1/3
    BleuScores b = sentence_bleu(seq({"a", "a", "a"}), seq({"a"}));
    REQUIRE_THAT(b.bleu[0], WithinAbs(1.0 / 3.0, 1e-12));
}

TEST_CASE("rouge-1 worked example") {
    // hyp a b c vs ref a c: P = 2/3, R = 1 -> F1 = 0.8
    REQUIRE_THAT(rouge_n(seq({"a", "b", "c"}), seq({"a", "c"}), 1),
                 WithinAbs(0.8, 1e-12));
}

TEST_CASE("rouge-2 worked example") {
    // hyp a b c vs ref b c d: one shared bigram, P = R = 1/2
    REQUIRE_THAT(rouge_n(seq({"a", "b", "c"}), seq({"b", "c", "d"}), 2),
                 WithinAbs(0.5, 1e-12));
}

TEST_CASE("rouge-l respects order") {
    // hyp a x b vs ref a b: LCS 2, P = 2/3, R = 1 -> 0.8
    REQUIRE_THAT(rouge_l(seq({"a", "x", "b"}), seq({"a", "b"})),
                 WithinAbs(0.8, 1e-12));
    // reversal drops the LCS to 1
    REQUIRE_THAT(rouge_l(seq({"a", "b"}), seq({"b", "a"})),
                 WithinAbs(0.5, 1e-12));
}

TEST_CASE("lcs_length on handpicked pairs") {
    REQUIRE(lcs_length(seq({"a", "b", "c", "d"}), seq({"a", "x", "c"})) == 2);
    REQUIRE(lcs_length({}, seq({"a"})) == 0);
    REQUIRE(lcs_length(seq({"a", "b"}), seq({"a", "b"})) == 2);
}

TEST_CASE("rouge rejects an empty reference") {
    REQUIRE_THROWS_AS(rouge_n(seq({"a"}), {}, 1), UndefinedReference);
    REQUIRE_THROWS_AS(rouge_l(seq({"a"}), {}), UndefinedReference);
    try {
        rouge_l(seq({"a"}), {});
        FAIL("expected throw");
    } catch (const UndefinedReference& e) {
        REQUIRE(std::string(e.category()) == "UndefinedReference");
    }
}

TEST_CASE("rouge zero when hypothesis shares nothing") {
    REQUIRE(rouge_n(seq({"x"}), seq({"a"}), 1) == 0.0);
    REQUIRE(rouge_l(seq({"x"}), seq({"a"})) == 0.0);
    REQUIRE(rouge_n({}, seq({"a"}), 1) == 0.0);
    REQUIRE(rouge_l({}, seq({"a"})) == 0.0);
}

TEST_CASE("rouge f1 is symmetric in hypothesis and reference") {
    std::mt19937_64 rng(4242);
    const char* alphabet[] = {"a", "b", "c", "d", "e"};
    for (int trial = 0; trial < 30; ++trial) {
        TokenSeq x, y;
        size_t nx = 1 + rng() % 6, ny = 1 + rng() % 6;
        for (size_t i = 0; i < nx; ++i) x.push_back(alphabet[rng() % 5]);
        for (size_t i = 0; i < ny; ++i) y.push_back(alphabet[rng() % 5]);
        REQUIRE_THAT(rouge_n(x, y, 1), WithinAbs(rouge_n(y, x, 1), 1e-12));
        REQUIRE_THAT(rouge_n(x, y, 2), WithinAbs(rouge_n(y, x, 2), 1e-12));
        REQUIRE_THAT(rouge_l(x, y), WithinAbs(rouge_l(y, x), 1e-12));
    }
}

TEST_CASE("all scores stay inside the unit interval") {
    std::mt19937_64 rng(991133);
    const char* alphabet[] = {"a", "b", "c"};
    for (int trial = 0; trial < 100; ++trial) {
        TokenSeq hyp, ref;
        size_t nh = rng() % 8, nr = 1 + rng() % 8;
        for (size_t i = 0; i < nh; ++i) hyp.push_back(alphabet[rng() % 3]);
        for (size_t i = 0; i < nr; ++i) ref.push_back(alphabet[rng() % 3]);
        BleuScores b = sentence_bleu(hyp, ref);
        for (int k = 0; k < 4; ++k) {
            REQUIRE(b.bleu[k] >= 0.0);
            REQUIRE(b.bleu[k] <= 1.0 + 1e-12);
        }
        for (size_t n = 1; n <= 2; ++n) {
            double f = rouge_n(hyp, ref, n);
            REQUIRE(f >= 0.0);
            REQUIRE(f <= 1.0 + 1e-12);
        }
        double l = rouge_l(hyp, ref);
        REQUIRE(l >= 0.0);
        REQUIRE(l <= 1.0 + 1e-12);
    }
}

TEST_CASE("evaluate averages sentence scores") {
    std::vector<TokenSeq> outputs = {seq({"a", "b", "c", "d"}), seq({"x", "y"})};
    std::vector<TokenSeq> refs = {seq({"a", "b", "x", "d"}), seq({"a", "b"})};
    EvalReport r = evaluate(outputs, refs);
    REQUIRE(r.per_example.size() == 2);
    // first sentence 50, second 0 -> mean 25
    REQUIRE_THAT(r.bleu[3], WithinAbs(25.0, 1e-9));
    REQUIRE_THAT(r.per_example[0].bleu[3], WithinAbs(50.0, 1e-9));
    REQUIRE(r.per_example[1].bleu[3] == 0.0);
    // rouge-1: 75 and 0 -> 37.5
    REQUIRE_THAT(r.rouge1, WithinAbs(37.5, 1e-9));
}

TEST_CASE("evaluate rejects misaligned inputs") {
    REQUIRE_THROWS_AS(evaluate({seq({"a"})}, {}), AlignmentError);
    REQUIRE_THROWS_AS(evaluate({}, {seq({"a"})}), AlignmentError);
    REQUIRE_THROWS_AS(evaluate({}, {}), AlignmentError);
    try {
        evaluate({seq({"a"})}, {seq({"a"}), seq({"b"})});
        FAIL("expected throw");
    } catch (const AlignmentError& e) {
        REQUIRE(std::string(e.category()) == "AlignmentError");
    }
}

TEST_CASE("pooled bleu uses one corpus-wide count pool") {
    std::vector<TokenSeq> outputs = {seq({"a"}), seq({"a"})};
    std::vector<TokenSeq> refs = {seq({"a"}), seq({"a", "b"})};
    EvalReport mean = evaluate(outputs, refs, false);
    EvalReport pooled = evaluate(outputs, refs, true);
    // sentence mean: (100 + 100 e^-1) / 2; pooled: BP over 2 vs 3 tokens
    REQUIRE_THAT(mean.bleu[3], WithinAbs(50.0 * (1.0 + std::exp(-1.0)), 1e-9));
    REQUIRE_THAT(pooled.bleu[3], WithinAbs(100.0 * std::exp(-0.5), 1e-9));
    REQUIRE(pooled.pooled);
    // rouge stays a sentence mean either way
    REQUIRE_THAT(pooled.rouge1, WithinAbs(mean.rouge1, 1e-12));
}

TEST_CASE("report table renders two-decimal percentages") {
    EvalReport r = evaluate({seq({"a", "b", "c", "d"})},
                            {seq({"a", "b", "x", "d"})});
    std::string table = report_table(r);
    REQUIRE(table ==
            "BLEU-1\tBLEU-2\tBLEU-3\tBLEU-4\tROUGE-1\tROUGE-2\tROUGE-L\n"
            "75.00\t61.24\t50.00\t50.00\t75.00\t33.33\t75.00\n");
}

TEST_CASE("report json carries aggregate and per-example scores") {
    EvalReport r = evaluate({seq({"a", "b"}), seq({"a", "b"})},
                            {seq({"a", "b"}), seq({"a", "b"})});
    nlohmann::json j = report_json(r);
    REQUIRE_THAT(j.at("bleu_4").get<double>(), WithinAbs(100.0, 1e-9));
    REQUIRE_THAT(j.at("rouge_l").get<double>(), WithinAbs(100.0, 1e-9));
    REQUIRE(j.at("pooled").get<bool>() == false);
    REQUIRE(j.at("examples").size() == 2);
    REQUIRE_THAT(j.at("examples")[0].at("bleu_1").get<double>(),
                 WithinAbs(100.0, 1e-9));
}

TEST_CASE("format_pct rounds halves up through printf") {
    REQUIRE(format_pct(50.0) == "50.00");
    REQUIRE(format_pct(33.333333) == "33.33");
    REQUIRE(format_pct(0.0) == "0.00");
    REQUIRE(format_pct(100.0) == "100.00");
}

TEST_CASE("metric evaluation is deterministic") {
    std::vector<TokenSeq> outputs = {seq({"a", "c", "b"}), seq({"d"})};
    std::vector<TokenSeq> refs = {seq({"a", "b", "c"}), seq({"d", "e"})};
    EvalReport r1 = evaluate(outputs, refs);
    EvalReport r2 = evaluate(outputs, refs);
    REQUIRE(report_table(r1) == report_table(r2));
    REQUIRE(report_json(r1).dump() == report_json(r2).dump());
}
