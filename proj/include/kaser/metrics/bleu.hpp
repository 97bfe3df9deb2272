#pragma once

// Sentence-level BLEU as used inside CodeBLEU, plus its keyword-weighted
// recall variant. Both score a single hypothesis against a single reference.

#include <cmath>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "kaser/common.hpp"

namespace kaser::metrics {

using Tokens = std::vector<std::string>;

/// Zero-count handling for n-gram precisions.
struct Smoothing {
    enum class Kind { epsilon, add_one, none } kind = Kind::epsilon;
    double epsilon = 0.1;
};

namespace detail {

// Counts in first-occurrence order (the order a Counter iterates).
class NgramCounts {
public:
    NgramCounts(const Tokens& toks, std::size_t n) {
        if (toks.size() < n) return;
        for (std::size_t i = 0; i + n <= toks.size(); ++i) {
            std::string key;
            for (std::size_t k = 0; k < n; ++k) {
                if (k) key.push_back('\x1f');
                key += toks[i + k];
            }
            auto [it, fresh] = index_.emplace(key, entries_.size());
            if (fresh)
                entries_.push_back({std::move(key), toks[i], 1});
            else
                ++entries_[it->second].count;
        }
    }
    struct Entry {
        std::string key;
        std::string head;
        long count;
    };
    const std::vector<Entry>& entries() const { return entries_; }
    long count(const std::string& key) const {
        auto it = index_.find(key);
        return it == index_.end() ? 0 : entries_[it->second].count;
    }
    long total() const {
        long t = 0;
        for (const auto& e : entries_) t += e.count;
        return t;
    }

private:
    std::unordered_map<std::string, std::size_t> index_;
    std::vector<Entry> entries_;
};

inline double brevity_penalty(double ref_len, double hyp_len) {
    if (hyp_len > ref_len) return 1.0;
    if (hyp_len == 0) return 0.0;
    return std::exp(1.0 - ref_len / hyp_len);
}

inline double combine(const std::vector<std::pair<double, double>>& p, double bp, const Smoothing& sm) {
    if (p.empty() || p[0].first == 0) return 0.0;
    const double w = 1.0 / static_cast<double>(p.size());
    double s = 0.0;
    for (auto [num, den] : p) {
        switch (sm.kind) {
            case Smoothing::Kind::epsilon:
                if (num == 0) num += sm.epsilon;
                break;
            case Smoothing::Kind::add_one:
                if (num == 0) {
                    num += 1;
                    den += 1;
                }
                break;
            case Smoothing::Kind::none:
                if (num == 0) return 0.0;
                break;
        }
        s += w * std::log(num / den);
    }
    return bp * std::exp(s);
}

}  // namespace detail

/// Geometric mean of clipped n-gram precisions (n = 1..max_n) times the
/// brevity penalty. Returns 0 when no unigram matches.
inline double ngram_match(const Tokens& hyp, const Tokens& ref, std::size_t max_n = 4, Smoothing sm = {}) {
    if (max_n < 1) throw ConfigError("ngram_match: max_n must be >= 1");
    std::vector<std::pair<double, double>> p;
    for (std::size_t n = 1; n <= max_n; ++n) {
        const detail::NgramCounts h(hyp, n), r(ref, n);
        long num = 0;
        for (const auto& e : h.entries()) num += std::min(e.count, r.count(e.key));
        p.emplace_back(static_cast<double>(num), static_cast<double>(std::max(1L, h.total())));
    }
    return detail::combine(p, detail::brevity_penalty(static_cast<double>(ref.size()), static_cast<double>(hyp.size())),
                           sm);
}

/// Keyword-weighted n-gram recall. Unigram counts of the reference are
/// weighted 1 for keywords and 1/keyword_weight otherwise; higher orders are
/// unweighted. The brevity penalty compares the hypothesis length against a
/// fixed reference length of 2, as the reference implementation does.
inline double weighted_ngram_match(const Tokens& hyp, const Tokens& ref,
                                   const std::unordered_set<std::string_view>& keywords, double keyword_weight = 5.0,
                                   std::size_t max_n = 4, Smoothing sm = {}) {
    if (max_n < 1) throw ConfigError("weighted_ngram_match: max_n must be >= 1");
    if (!(keyword_weight > 0)) throw ConfigError("weighted_ngram_match: keyword_weight must be positive");
    const double other = 1.0 / keyword_weight;
    std::vector<std::pair<double, double>> p;
    for (std::size_t n = 1; n <= max_n; ++n) {
        const detail::NgramCounts h(hyp, n), r(ref, n);
        double num = 0, den = 0;
        for (const auto& e : r.entries()) {
            const long clipped = std::min(e.count, h.count(e.key));
            const double w = n == 1 ? (keywords.count(e.head) ? 1.0 : other) : 1.0;
            num += static_cast<double>(clipped) * w;
            den += static_cast<double>(e.count) * w;
        }
        p.emplace_back(num, std::max(1.0, den));
    }
    return detail::combine(p, detail::brevity_penalty(2.0, static_cast<double>(hyp.size())), sm);
}

}  // namespace kaser::metrics
