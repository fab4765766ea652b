#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "evmdoc/errors.hpp"

namespace evmdoc {

using TokenSeq = std::vector<std::string>;

namespace detail {

inline std::map<std::vector<std::string>, int> ngram_counts(const TokenSeq& s,
                                                            size_t n) {
    std::map<std::vector<std::string>, int> counts;
    if (s.size() < n) return counts;
    for (size_t i = 0; i + n <= s.size(); ++i)
        ++counts[std::vector<std::string>(s.begin() + i, s.begin() + i + n)];
    return counts;
}

inline int clipped_matches(const TokenSeq& hyp, const TokenSeq& ref, size_t n) {
    auto hc = ngram_counts(hyp, n);
    auto rc = ngram_counts(ref, n);
    int matched = 0;
    for (const auto& [gram, count] : hc) {
        auto it = rc.find(gram);
        if (it != rc.end()) matched += std::min(count, it->second);
    }
    return matched;
}

}  // namespace detail

// Sentence BLEU-1..4 in [0,1]. Smooth2 adds one to both the matched and total
// n-gram counts for n >= 2; unigram precision is left raw, so a hypothesis
// sharing no unigram with the reference scores 0 at every order.
struct BleuScores {
    double bleu[4] = {0, 0, 0, 0};  // bleu[k-1] = BLEU-k
};

inline BleuScores sentence_bleu(const TokenSeq& hyp, const TokenSeq& ref) {
    BleuScores out;
    if (hyp.empty()) return out;
    double log_p[4];
    double p1 = 0;
    for (size_t n = 1; n <= 4; ++n) {
        double matched = detail::clipped_matches(hyp, ref, n);
        double total = hyp.size() >= n ? double(hyp.size() - n + 1) : 0.0;
        double p;
        if (n == 1) {
            p = total > 0 ? matched / total : 0.0;
            p1 = p;
        } else {
            p = (matched + 1.0) / (total + 1.0);
        }
        log_p[n - 1] = p > 0 ? std::log(p) : 0.0;
    }
    double bp = hyp.size() < ref.size()
                    ? std::exp(1.0 - double(ref.size()) / double(hyp.size()))
                    : 1.0;
    for (size_t k = 1; k <= 4; ++k) {
        if (p1 == 0.0) {
            out.bleu[k - 1] = 0.0;
            continue;
        }
        double acc = 0;
        for (size_t n = 1; n <= k; ++n) acc += log_p[n - 1];
        out.bleu[k - 1] = bp * std::exp(acc / double(k));
    }
    return out;
}

// F1 over clipped n-gram overlap, in [0,1].
inline double rouge_n(const TokenSeq& hyp, const TokenSeq& ref, size_t n) {
    if (ref.empty()) throw UndefinedReference("rouge reference is empty");
    double matched = detail::clipped_matches(hyp, ref, n);
    double hyp_total = hyp.size() >= n ? double(hyp.size() - n + 1) : 0.0;
    double ref_total = ref.size() >= n ? double(ref.size() - n + 1) : 0.0;
    double precision = hyp_total > 0 ? matched / hyp_total : 0.0;
    double recall = ref_total > 0 ? matched / ref_total : 0.0;
    if (precision + recall == 0.0) return 0.0;
    return 2.0 * precision * recall / (precision + recall);
}

inline size_t lcs_length(const TokenSeq& a, const TokenSeq& b) {
    std::vector<size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (size_t i = 1; i <= a.size(); ++i) {
        for (size_t j = 1; j <= b.size(); ++j) {
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1
                                          : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

inline double rouge_l(const TokenSeq& hyp, const TokenSeq& ref) {
    if (ref.empty()) throw UndefinedReference("rouge reference is empty");
    if (hyp.empty()) return 0.0;
    double lcs = double(lcs_length(hyp, ref));
    double precision = lcs / double(hyp.size());
    double recall = lcs / double(ref.size());
    if (precision + recall == 0.0) return 0.0;
    return 2.0 * precision * recall / (precision + recall);
}

struct ExampleScores {
    double bleu[4] = {0, 0, 0, 0};
    double rouge1 = 0, rouge2 = 0, rougel = 0;
};

struct EvalReport {
    double bleu[4] = {0, 0, 0, 0};  // percentages
    double rouge1 = 0, rouge2 = 0, rougel = 0;
    std::vector<ExampleScores> per_example;
    // corpus-pooled BLEU variant (single count pool instead of sentence mean)
    bool pooled = false;
};

// Sentence scores averaged over the corpus; `pooled` switches BLEU to a
// single corpus-wide count pool (same smoothing, BP from pooled lengths).
inline EvalReport evaluate(const std::vector<TokenSeq>& outputs,
                           const std::vector<TokenSeq>& references,
                           bool pooled = false) {
    if (outputs.size() != references.size())
        throw AlignmentError("outputs and references differ in length: " +
                             std::to_string(outputs.size()) + " vs " +
                             std::to_string(references.size()));
    if (outputs.empty())
        throw AlignmentError("nothing to evaluate");
    EvalReport report;
    report.pooled = pooled;
    for (size_t i = 0; i < outputs.size(); ++i) {
        ExampleScores ex;
        BleuScores b = sentence_bleu(outputs[i], references[i]);
        for (int k = 0; k < 4; ++k) ex.bleu[k] = 100.0 * b.bleu[k];
        ex.rouge1 = 100.0 * rouge_n(outputs[i], references[i], 1);
        ex.rouge2 = 100.0 * rouge_n(outputs[i], references[i], 2);
        ex.rougel = 100.0 * rouge_l(outputs[i], references[i]);
        report.per_example.push_back(ex);
    }
    for (const auto& ex : report.per_example) {
        for (int k = 0; k < 4; ++k) report.bleu[k] += ex.bleu[k];
        report.rouge1 += ex.rouge1;
        report.rouge2 += ex.rouge2;
        report.rougel += ex.rougel;
    }
    double n = double(report.per_example.size());
    for (int k = 0; k < 4; ++k) report.bleu[k] /= n;
    report.rouge1 /= n;
    report.rouge2 /= n;
    report.rougel /= n;

    if (pooled) {
        size_t hyp_len = 0, ref_len = 0;
        double matched[4] = {0, 0, 0, 0}, total[4] = {0, 0, 0, 0};
        for (size_t i = 0; i < outputs.size(); ++i) {
            hyp_len += outputs[i].size();
            ref_len += references[i].size();
            for (size_t ng = 1; ng <= 4; ++ng) {
                matched[ng - 1] +=
                    detail::clipped_matches(outputs[i], references[i], ng);
                total[ng - 1] += outputs[i].size() >= ng
                                     ? double(outputs[i].size() - ng + 1)
                                     : 0.0;
            }
        }
        double bp = (hyp_len < ref_len && hyp_len > 0)
                        ? std::exp(1.0 - double(ref_len) / double(hyp_len))
                        : 1.0;
        double p1 = total[0] > 0 ? matched[0] / total[0] : 0.0;
        for (size_t k = 1; k <= 4; ++k) {
            if (p1 == 0.0 || hyp_len == 0) {
                report.bleu[k - 1] = 0.0;
                continue;
            }
            double acc = 0;
            for (size_t ng = 1; ng <= k; ++ng) {
                double p = ng == 1 ? p1
                                   : (matched[ng - 1] + 1.0) /
                                         (total[ng - 1] + 1.0);
                acc += std::log(p);
            }
            report.bleu[k - 1] = 100.0 * bp * std::exp(acc / double(k));
        }
    }
    return report;
}

inline std::string format_pct(double v) {
    char buf[32];
    snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

inline std::string report_table(const EvalReport& r) {
    std::ostringstream os;
    os << "BLEU-1\tBLEU-2\tBLEU-3\tBLEU-4\tROUGE-1\tROUGE-2\tROUGE-L\n";
    os << format_pct(r.bleu[0]) << '\t' << format_pct(r.bleu[1]) << '\t'
       << format_pct(r.bleu[2]) << '\t' << format_pct(r.bleu[3]) << '\t'
       << format_pct(r.rouge1) << '\t' << format_pct(r.rouge2) << '\t'
       << format_pct(r.rougel) << '\n';
    return os.str();
}

inline nlohmann::json report_json(const EvalReport& r) {
    nlohmann::json per = nlohmann::json::array();
    for (const auto& ex : r.per_example) {
        per.push_back({{"bleu_1", ex.bleu[0]},
                       {"bleu_2", ex.bleu[1]},
                       {"bleu_3", ex.bleu[2]},
                       {"bleu_4", ex.bleu[3]},
                       {"rouge_1", ex.rouge1},
                       {"rouge_2", ex.rouge2},
                       {"rouge_l", ex.rougel}});
    }
    return {{"bleu_1", r.bleu[0]},   {"bleu_2", r.bleu[1]},
            {"bleu_3", r.bleu[2]},   {"bleu_4", r.bleu[3]},
            {"rouge_1", r.rouge1},   {"rouge_2", r.rouge2},
            {"rouge_l", r.rougel},   {"pooled", r.pooled},
            {"examples", per}};
}

}  // namespace evmdoc
