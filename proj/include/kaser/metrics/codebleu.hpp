#pragma once

#include <cmath>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>

#include "kaser/common.hpp"
#include "kaser/metrics/bleu.hpp"
#include "kaser/metrics/dataflow.hpp"
#include "kaser/metrics/source_clean.hpp"
#include "kaser/metrics/syntax.hpp"
#include "kaser/metrics/tokenize.hpp"

namespace kaser::metrics {

struct CodeBleuWeights {
    double ngram = 0.25;
    double weighted_ngram = 0.25;
    double syntax = 0.25;
    double dataflow = 0.25;

    void validate() const {
        for (double w : {ngram, weighted_ngram, syntax, dataflow})
            if (!(w >= 0) || !std::isfinite(w)) throw ConfigError("CodeBLEU weights must be finite and >= 0");
        if (std::abs(ngram + weighted_ngram + syntax + dataflow - 1.0) > 1e-9)
            throw ConfigError("CodeBLEU weights must sum to 1");
    }
};

struct CodeBleuOptions {
    CodeBleuWeights weights;
    double keyword_weight = 5.0;
    std::size_t max_n = 4;
    Smoothing smoothing;
    SubtreeCounting subtrees = SubtreeCounting::membership;
    /// Whitespace tokens for the n-gram components (reference behaviour) or
    /// the lexical tokenizer.
    enum class Tokens { whitespace, lexical } tokens = Tokens::whitespace;
    /// A dataflow score of 0 (no reference edges, or none matched) enters the
    /// combination as 1, as the reference implementation does.
    bool zero_dataflow_as_one = true;

    std::string fingerprint() const {
        return std::to_string(weights.ngram) + "," + std::to_string(weights.weighted_ngram) + "," +
               std::to_string(weights.syntax) + "," + std::to_string(weights.dataflow) + "|" +
               std::to_string(keyword_weight) + "|" + std::to_string(max_n) + "|" +
               std::to_string(static_cast<int>(smoothing.kind)) + ":" + std::to_string(smoothing.epsilon) + "|" +
               std::to_string(static_cast<int>(subtrees)) + std::to_string(static_cast<int>(tokens)) +
               std::to_string(zero_dataflow_as_one);
    }
};

struct CodeBleuScore {
    double ngram = 0;
    double weighted_ngram = 0;
    double syntax = 0;
    /// |matched| / |reference edges|, 1 when the reference has no edges.
    double dataflow_match = 0;
    /// The dataflow term that enters `combined`.
    double dataflow = 0;
    double combined = 0;
    CodeBleuWeights weights;
    bool parsed = true;

    static double combine(const CodeBleuWeights& w, double ngram, double weighted, double syntax, double dataflow) {
        return w.ngram * ngram + w.weighted_ngram * weighted + w.syntax * syntax + w.dataflow * dataflow;
    }
};

inline CodeBleuScore codebleu(std::string_view hyp, std::string_view ref, Language lang,
                              const CodeBleuOptions& opt = {}) {
    opt.weights.validate();
    const std::string h(py_strip(hyp)), r(py_strip(ref));

    Tokens ht, rt;
    if (opt.tokens == CodeBleuOptions::Tokens::whitespace) {
        ht = py_split(h);
        rt = py_split(r);
    } else {
        ht = tokenize(h, lang).lexemes();
        rt = tokenize(r, lang).lexemes();
    }

    CodeBleuScore s;
    s.weights = opt.weights;
    s.ngram = ngram_match(ht, rt, opt.max_n, opt.smoothing);
    s.weighted_ngram = weighted_ngram_match(ht, rt, keyword_set(lang), opt.keyword_weight, opt.max_n, opt.smoothing);

    const SyntaxTree th(strip_comments(h, lang), lang);
    const SyntaxTree tr(strip_comments(r, lang), lang);
    if (!th.ok() || !tr.ok()) {
        s.parsed = false;
        s.syntax = 0;
        s.dataflow_match = 0;
        s.dataflow = 0;
    } else {
        s.syntax = syntax_match(th, tr, opt.subtrees);
        const DataflowTally t = dataflow_tally(dataflow_graph(th), dataflow_graph(tr));
        s.dataflow_match = t.total ? static_cast<double>(t.matched) / static_cast<double>(t.total) : 1.0;
        s.dataflow = (opt.zero_dataflow_as_one && t.matched == 0) ? 1.0 : s.dataflow_match;
    }
    s.combined = CodeBleuScore::combine(s.weights, s.ngram, s.weighted_ngram, s.syntax, s.dataflow);
    return s;
}

/// Memoizes codebleu() by (hyp, ref, language, options). Thread-safe.
class CodeBleuCache {
public:
    explicit CodeBleuCache(CodeBleuOptions opt = {}) : opt_(std::move(opt)) {}

    CodeBleuScore operator()(std::string_view hyp, std::string_view ref, Language lang) {
        std::string key;
        key.reserve(hyp.size() + ref.size() + 8);
        key.append(to_string(lang)).push_back('\0');
        key.append(hyp).push_back('\0');
        key.append(ref);
        {
            std::lock_guard lock(mu_);
            if (auto it = memo_.find(key); it != memo_.end()) {
                ++hits_;
                return it->second;
            }
        }
        CodeBleuScore s = codebleu(hyp, ref, lang, opt_);
        std::lock_guard lock(mu_);
        memo_.emplace(std::move(key), s);
        return s;
    }

    const CodeBleuOptions& options() const { return opt_; }
    std::size_t hits() const {
        std::lock_guard lock(mu_);
        return hits_;
    }

private:
    CodeBleuOptions opt_;
    mutable std::mutex mu_;
    std::unordered_map<std::string, CodeBleuScore> memo_;
    std::size_t hits_ = 0;
};

}  // namespace kaser::metrics
