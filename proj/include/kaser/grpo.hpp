#pragma once

// Group-relative policy optimization over the toy policy: hybrid rewards
// (similarity to the student's code, judged error match, group diversity),
// z-scored advantages, PPO-style clipped surrogate and a k3 KL penalty.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "kaser/common.hpp"
#include "kaser/corpus.hpp"
#include "kaser/errors.hpp"
#include "kaser/metrics/codebleu.hpp"
#include "kaser/parallel.hpp"
#include "kaser/policy.hpp"

namespace kaser::grpo {

using json = nlohmann::ordered_json;
using errors::ErrorSet;
using policy::Prompt;

// ---------------------------------------------------------------------------
// Rewards
// ---------------------------------------------------------------------------

struct RewardWeights {
    double sim = 1.0;
    double err = 1.0;
    double div = 1.0;

    void validate() const {
        for (double w : {sim, err, div})
            if (!(w >= 0) || !std::isfinite(w)) throw ConfigError("reward weights must be finite and >= 0");
    }
};

inline void to_json(json& j, const RewardWeights& w) { j = {{"sim", w.sim}, {"error", w.err}, {"div", w.div}}; }
inline void from_json(const json& j, RewardWeights& w) {
    w.sim = j.value("sim", w.sim);
    w.err = j.value("error", w.err);
    w.div = j.value("div", w.div);
}

struct RewardBreakdown {
    double r_sim = 0;
    double r_error = 0;
    double r_div = 0;
    double total = 0;
    RewardWeights weights;

    static RewardBreakdown make(double sim, double err, double div, const RewardWeights& w) {
        return {sim, err, div, w.sim * sim + w.err * err + w.div * div, w};
    }
};

/// 1 - max over j != i of CodeBLEU(codes[i] against codes[j]); 1 for a
/// single candidate.
inline double diversity_reward(const std::vector<std::string>& codes, std::size_t i, Language lang,
                               metrics::CodeBleuCache& cb) {
    if (i >= codes.size()) throw ShapeError("diversity_reward: index out of range");
    double mx = 0;
    for (std::size_t j = 0; j < codes.size(); ++j)
        if (j != i) mx = std::max(mx, cb(codes[i], codes[j], lang).combined);
    return 1.0 - mx;
}

inline double diversity_reward(const std::vector<std::string>& codes, std::size_t i, Language lang) {
    metrics::CodeBleuCache cb;
    return diversity_reward(codes, i, lang, cb);
}

/// Error sets predicted for code; throws on judge failure.
using Judge = std::function<ErrorSet(const std::string& code, const corpus::Problem& problem)>;

inline Judge cached_judge(errors::JudgeCache& cache) {
    return [&cache](const std::string& code, const corpus::Problem& p) { return cache(code, p).errors; };
}

/// Rewards from already-judged error sets.
inline std::vector<RewardBreakdown> group_rewards(const std::vector<std::string>& codes,
                                                  const std::vector<ErrorSet>& judged, const std::string& truth_code,
                                                  const ErrorSet& truth_errors, Language lang,
                                                  const RewardWeights& w, metrics::CodeBleuCache& cb,
                                                  std::size_t threads = 1) {
    w.validate();
    if (judged.size() != codes.size()) throw ShapeError("group_rewards: one judged set per candidate required");
    std::vector<RewardBreakdown> out(codes.size());
    parallel_for(codes.size(), threads, [&](std::size_t i) {
        out[i] = RewardBreakdown::make(cb(codes[i], truth_code, lang).combined,
                                       errors::error_match_reward(judged[i], truth_errors),
                                       diversity_reward(codes, i, lang, cb), w);
    });
    return out;
}

/// Judges every candidate first; any failure aborts the whole group.
inline std::vector<RewardBreakdown> compute_group_rewards(const std::vector<std::string>& codes,
                                                          const corpus::Problem& problem,
                                                          const std::string& truth_code, const ErrorSet& truth_errors,
                                                          const Judge& judge, const RewardWeights& w,
                                                          metrics::CodeBleuCache& cb, std::size_t threads = 1,
                                                          std::vector<ErrorSet>* judged_out = nullptr) {
    std::vector<ErrorSet> judged(codes.size());
    parallel_for(codes.size(), threads, [&](std::size_t i) { judged[i] = judge(codes[i], problem); });
    auto r = group_rewards(codes, judged, truth_code, truth_errors, problem.language, w, cb, threads);
    if (judged_out) *judged_out = std::move(judged);
    return r;
}

// ---------------------------------------------------------------------------
// Advantages
// ---------------------------------------------------------------------------

/// (r - mean) / max(std, eps) with the population std. The last entry is
/// set to minus the left-to-right sum of the others, so the advantages of a
/// group sum to exactly zero in that order.
inline std::vector<double> normalize_advantages(const std::vector<double>& r, double eps = 1e-8) {
    if (r.empty()) return {};
    const auto [lo, hi] = std::minmax_element(r.begin(), r.end());
    if (*lo == *hi) return std::vector<double>(r.size(), 0.0);
    const double n = static_cast<double>(r.size());
    double mean = 0;
    for (double v : r) mean += v;
    mean /= n;
    double var = 0;
    for (double v : r) var += (v - mean) * (v - mean);
    const double sd = std::max(std::sqrt(var / n), eps);
    std::vector<double> a(r.size());
    double acc = 0;
    for (std::size_t i = 0; i + 1 < r.size(); ++i) {
        a[i] = (r[i] - mean) / sd;
        acc += a[i];
    }
    a.back() = -acc;
    return a;
}

// ---------------------------------------------------------------------------
// Objective pieces, in terms of per-token new-policy logprobs
// ---------------------------------------------------------------------------

enum class RatioMode { token, sequence };

inline std::string_view to_string(RatioMode m) { return m == RatioMode::token ? "token" : "sequence"; }
inline RatioMode parse_ratio_mode(std::string_view s) {
    if (s == "token") return RatioMode::token;
    if (s == "sequence") return RatioMode::sequence;
    throw ConfigError("ratio mode must be 'token' or 'sequence'");
}

using TokenMatrix = std::vector<std::vector<double>>;  // [candidate][token]

struct Term {
    double value = 0;
    TokenMatrix grad;  // d value / d new logprob
    double clip_fraction = 0;
};

inline void check_same_shape(const TokenMatrix& a, const TokenMatrix& b, const char* what) {
    if (a.size() != b.size()) throw ShapeError(std::string(what) + ": candidate count mismatch");
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i].size() != b[i].size() || a[i].empty())
            throw ShapeError(std::string(what) + ": token count mismatch for candidate " + std::to_string(i));
}

/// min(rho*A, clip(rho, 1-eps, 1+eps)*A) averaged per sequence (token mode)
/// and over candidates.
inline Term clipped_surrogate(const TokenMatrix& l_new, const TokenMatrix& l_old, const std::vector<double>& adv,
                              double clip_eps, RatioMode mode = RatioMode::token) {
    check_same_shape(l_new, l_old, "clipped_surrogate");
    if (adv.size() != l_new.size()) throw ShapeError("clipped_surrogate: one advantage per candidate required");
    if (!(clip_eps > 0)) throw ConfigError("clip epsilon must be > 0");
    const double G = static_cast<double>(l_new.size());
    Term t;
    t.grad.resize(l_new.size());
    std::size_t clipped = 0, units = 0;
    // Contribution and d/d(log rho) of one ratio.
    auto piece = [&](double log_rho, double A, double& value, double& dlog) {
        const double rho = std::exp(log_rho);
        const double unclipped = rho * A;
        const double clipped_v = std::clamp(rho, 1.0 - clip_eps, 1.0 + clip_eps) * A;
        ++units;
        if (unclipped <= clipped_v) {
            value = unclipped;
            dlog = rho * A;
        } else {
            value = clipped_v;
            dlog = 0;
            ++clipped;
        }
    };
    for (std::size_t i = 0; i < l_new.size(); ++i) {
        const std::size_t n = l_new[i].size();
        t.grad[i].assign(n, 0.0);
        if (mode == RatioMode::token) {
            for (std::size_t k = 0; k < n; ++k) {
                double v, d;
                piece(l_new[i][k] - l_old[i][k], adv[i], v, d);
                t.value += v / (G * static_cast<double>(n));
                t.grad[i][k] = d / (G * static_cast<double>(n));
            }
        } else {
            double lr = 0;
            for (std::size_t k = 0; k < n; ++k) lr += l_new[i][k] - l_old[i][k];
            double v, d;
            piece(lr, adv[i], v, d);
            t.value += v / G;
            for (std::size_t k = 0; k < n; ++k) t.grad[i][k] = d / G;
        }
    }
    t.clip_fraction = units ? static_cast<double>(clipped) / static_cast<double>(units) : 0.0;
    return t;
}

/// k3 estimator exp(x) - x - 1 with x = l_ref - l_new, aggregated like the
/// surrogate.
inline Term kl_penalty(const TokenMatrix& l_new, const TokenMatrix& l_ref, RatioMode mode = RatioMode::token) {
    check_same_shape(l_new, l_ref, "kl_penalty");
    const double G = static_cast<double>(l_new.size());
    Term t;
    t.grad.resize(l_new.size());
    for (std::size_t i = 0; i < l_new.size(); ++i) {
        const std::size_t n = l_new[i].size();
        t.grad[i].assign(n, 0.0);
        if (mode == RatioMode::token) {
            for (std::size_t k = 0; k < n; ++k) {
                const double x = l_ref[i][k] - l_new[i][k];
                t.value += (std::expm1(x) - x) / (G * static_cast<double>(n));
                t.grad[i][k] = -std::expm1(x) / (G * static_cast<double>(n));
            }
        } else {
            double x = 0;
            for (std::size_t k = 0; k < n; ++k) x += l_ref[i][k] - l_new[i][k];
            t.value += (std::expm1(x) - x) / G;
            for (std::size_t k = 0; k < n; ++k) t.grad[i][k] = -std::expm1(x) / G;
        }
    }
    return t;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct GrpoConfig {
    std::size_t G = 5;
    double clip_eps = 0.2;
    double beta = 0.1;
    double lr = 0.1;
    std::size_t iterations = 0;  // 0: one pass over the items
    std::size_t batch_size = 1;
    std::size_t updates_per_group = 1;
    std::uint64_t seed = 0;
    double adv_eps = 1e-8;
    RatioMode ratio = RatioMode::token;
    RewardWeights weights;
    std::size_t threads = 1;

    void validate() const {
        if (G < 2) throw ConfigError("GRPO group size G must be >= 2 (got " + std::to_string(G) + ")");
        if (!(clip_eps > 0)) throw ConfigError("GRPO clip epsilon must be > 0");
        if (!(beta >= 0) || !std::isfinite(beta)) throw ConfigError("GRPO beta must be finite and >= 0");
        if (!(lr > 0)) throw ConfigError("GRPO learning rate must be > 0");
        if (batch_size < 1 || updates_per_group < 1) throw ConfigError("GRPO batch and update counts must be >= 1");
        if (!(adv_eps > 0)) throw ConfigError("GRPO advantage epsilon must be > 0");
        weights.validate();
    }
};

inline void to_json(json& j, const GrpoConfig& c) {
    j = {{"G", c.G},
         {"clip_eps", c.clip_eps},
         {"beta", c.beta},
         {"lr", c.lr},
         {"iterations", c.iterations},
         {"batch_size", c.batch_size},
         {"updates_per_group", c.updates_per_group},
         {"seed", c.seed},
         {"adv_eps", c.adv_eps},
         {"ratio", to_string(c.ratio)},
         {"weights", c.weights},
         {"threads", c.threads}};
}
inline void from_json(const json& j, GrpoConfig& c) {
    c.G = j.value("G", c.G);
    c.clip_eps = j.value("clip_eps", c.clip_eps);
    c.beta = j.value("beta", c.beta);
    c.lr = j.value("lr", c.lr);
    c.iterations = j.value("iterations", c.iterations);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.updates_per_group = j.value("updates_per_group", c.updates_per_group);
    c.seed = j.value("seed", c.seed);
    c.adv_eps = j.value("adv_eps", c.adv_eps);
    c.ratio = parse_ratio_mode(j.value("ratio", std::string(to_string(c.ratio))));
    if (j.contains("weights")) c.weights = j.at("weights").get<RewardWeights>();
    c.threads = j.value("threads", c.threads);
}

struct TrainItem {
    Prompt prompt;
    const corpus::Problem* problem = nullptr;
    std::string truth_code;
    ErrorSet truth_errors;
};

struct TraceRecord {
    std::size_t iteration = 0;
    double mean_reward = 0;
    double mean_r_sim = 0;
    double mean_r_error = 0;
    double mean_r_div = 0;
    double kl = 0;
    double clip_fraction = 0;
    double entropy = 0;
};

using TrainTrace = std::vector<TraceRecord>;

inline std::string trace_csv(const TrainTrace& t) {
    std::string s = "iteration,mean_reward,mean_r_sim,mean_r_error,mean_r_div,kl,clip_fraction,entropy\n";
    char buf[256];
    for (const auto& r : t) {
        std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.iteration, r.mean_reward,
                      r.mean_r_sim, r.mean_r_error, r.mean_r_div, r.kl, r.clip_fraction, r.entropy);
        s += buf;
    }
    return s;
}

/// Objective J = surrogate - beta * KL for one group and its gradient with
/// respect to the toy logits.
struct GroupObjective {
    double surrogate = 0;
    double kl = 0;
    double objective = 0;
    double clip_fraction = 0;
    policy::RowGrad grad;
};

inline TokenMatrix token_logprobs(const policy::ToyPolicy& pol, const policy::ToyPolicyParams& theta,
                                  const Prompt& p, const std::vector<policy::Completion>& cands) {
    TokenMatrix out;
    for (const auto& c : cands) out.push_back(pol.logprobs(theta, p, c.tokens));
    return out;
}

inline GroupObjective group_objective(const policy::ToyPolicy& pol, const policy::ToyPolicyParams& theta,
                                      const Prompt& p, const std::vector<policy::Completion>& cands,
                                      const TokenMatrix& l_old, const TokenMatrix& l_ref,
                                      const std::vector<double>& adv, double clip_eps, double beta, RatioMode mode) {
    const TokenMatrix l_new = token_logprobs(pol, theta, p, cands);
    const Term s = clipped_surrogate(l_new, l_old, adv, clip_eps, mode);
    const Term k = kl_penalty(l_new, l_ref, mode);
    GroupObjective g;
    g.surrogate = s.value;
    g.kl = k.value;
    g.objective = s.value - beta * k.value;
    g.clip_fraction = s.clip_fraction;
    for (std::size_t i = 0; i < cands.size(); ++i) {
        std::vector<double> w(l_new[i].size());
        for (std::size_t n = 0; n < w.size(); ++n) w[n] = s.grad[i][n] - beta * k.grad[i][n];
        policy::add_to(g.grad, pol.logprob_grad(theta, p, cands[i].tokens, w));
    }
    return g;
}

/// Mean per-slot entropy (nats) of the policy at a prompt.
inline double policy_entropy(const policy::ToyPolicy& pol, const policy::ToyPolicyParams& theta, const Prompt& p) {
    const std::size_t slots = pol.task().problem(p.problem_id).slots.size();
    double h = 0;
    for (std::size_t s = 0; s < slots; ++s)
        for (double q : pol.row(theta, p, s).probs())
            if (q > 0) h -= q * std::log(q);
    return h / static_cast<double>(slots);
}

/// Exact distribution over whole completions (product over slots).
inline std::map<std::vector<std::size_t>, double> joint_distribution(const policy::ToyPolicy& pol,
                                                                      const policy::ToyPolicyParams& theta,
                                                                      const Prompt& p) {
    const std::size_t slots = pol.task().problem(p.problem_id).slots.size();
    std::vector<policy::Row> rows;
    std::vector<std::vector<double>> probs;
    for (std::size_t s = 0; s < slots; ++s) {
        rows.push_back(pol.row(theta, p, s));
        probs.push_back(rows.back().probs());
    }
    std::map<std::vector<std::size_t>, double> out;
    std::vector<std::size_t> idx(slots, 0);
    while (true) {
        std::vector<std::size_t> toks(slots);
        double pr = 1;
        for (std::size_t s = 0; s < slots; ++s) {
            toks[s] = rows[s].support[idx[s]];
            pr *= probs[s][idx[s]];
        }
        out[toks] = pr;
        std::size_t s = 0;
        while (s < slots && ++idx[s] == rows[s].support.size()) idx[s++] = 0;
        if (s == slots) break;
    }
    return out;
}

inline double total_variation(const policy::ToyPolicy& pol, const policy::ToyPolicyParams& a,
                              const policy::ToyPolicyParams& b, const Prompt& p) {
    const auto pa = joint_distribution(pol, a, p), pb = joint_distribution(pol, b, p);
    double tv = 0;
    for (const auto& [k, v] : pa) tv += std::abs(v - pb.at(k));
    return 0.5 * tv;
}

struct StepResult {
    policy::ToyPolicyParams theta;
    TraceRecord record;
};

/// One ascent step on J averaged over a batch of items. theta_old is the
/// policy before sampling; theta_ref stays fixed for the whole run.
inline StepResult grpo_step(const policy::ToyPolicy& pol, policy::ToyPolicyParams theta,
                            const policy::ToyPolicyParams& theta_ref, const std::vector<const TrainItem*>& batch,
                            const Judge& judge, const GrpoConfig& cfg, metrics::CodeBleuCache& cb,
                            std::uint64_t step_seed) {
    cfg.validate();
    if (batch.empty()) throw ConfigError("grpo_step: empty batch");
    const policy::ToyPolicyParams theta_old = theta;

    struct Group {
        std::vector<policy::Completion> cands;
        TokenMatrix l_old, l_ref;
        std::vector<double> adv;
        std::vector<RewardBreakdown> rewards;
    };
    std::vector<Group> groups(batch.size());
    StepResult out;
    out.record.iteration = 0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const TrainItem& it = *batch[b];
        if (!it.problem) throw ConfigError("grpo_step: item without a problem");
        Group& g = groups[b];
        g.cands = pol.sample(theta_old, it.prompt, cfg.G, step_seed + 0x9E3779B97F4A7C15ULL * (b + 1));
        for (const auto& c : g.cands) g.l_old.push_back(c.logprobs);
        g.l_ref = token_logprobs(pol, theta_ref, it.prompt, g.cands);
        std::vector<std::string> codes;
        for (const auto& c : g.cands) codes.push_back(c.text);
        g.rewards = compute_group_rewards(codes, *it.problem, it.truth_code, it.truth_errors, judge, cfg.weights, cb,
                                          cfg.threads);
        std::vector<double> totals;
        for (const auto& r : g.rewards) totals.push_back(r.total);
        g.adv = normalize_advantages(totals, cfg.adv_eps);
        for (const auto& r : g.rewards) {
            out.record.mean_reward += r.total;
            out.record.mean_r_sim += r.r_sim;
            out.record.mean_r_error += r.r_error;
            out.record.mean_r_div += r.r_div;
        }
        pol.touch(theta, it.prompt);
    }
    const double denom = static_cast<double>(batch.size() * cfg.G);
    out.record.mean_reward /= denom;
    out.record.mean_r_sim /= denom;
    out.record.mean_r_error /= denom;
    out.record.mean_r_div /= denom;

    for (std::size_t u = 0; u < cfg.updates_per_group; ++u) {
        policy::RowGrad total;
        double kl = 0, clip = 0;
        for (std::size_t b = 0; b < batch.size(); ++b) {
            const Group& g = groups[b];
            const GroupObjective o = group_objective(pol, theta, batch[b]->prompt, g.cands, g.l_old, g.l_ref, g.adv,
                                                     cfg.clip_eps, cfg.beta, cfg.ratio);
            if (!std::isfinite(o.objective)) {
                json dump = {{"prompt", batch[b]->prompt.text}, {"advantages", g.adv}, {"old_logprobs", g.l_old}};
                json codes = json::array();
                for (const auto& c : g.cands) codes.push_back(c.text);
                dump["candidates"] = codes;
                throw NumericError("GRPO objective is not finite for group: " + dump.dump());
            }
            policy::add_to(total, o.grad, 1.0 / static_cast<double>(batch.size()));
            kl += o.kl;
            clip += o.clip_fraction;
        }
        if (u == 0) {
            out.record.kl = kl / static_cast<double>(batch.size());
            out.record.clip_fraction = clip / static_cast<double>(batch.size());
        }
        theta = policy::ToyPolicy::apply(std::move(theta), total, cfg.lr);
    }
    double h = 0;
    for (const TrainItem* it : batch) h += policy_entropy(pol, theta, it->prompt);
    out.record.entropy = h / static_cast<double>(batch.size());
    out.theta = std::move(theta);
    return out;
}

struct TrainResult {
    policy::ToyPolicyParams theta;
    TrainTrace trace;
};

/// Iterates grpo_step over shuffled items. The reference policy is the
/// starting policy unless given.
inline TrainResult grpo_train(const policy::ToyPolicy& pol, policy::ToyPolicyParams theta,
                              const std::vector<TrainItem>& items, const Judge& judge, const GrpoConfig& cfg,
                              const policy::ToyPolicyParams* theta_ref = nullptr,
                              const std::function<void(const TraceRecord&, const policy::ToyPolicyParams&)>& on_step = {}) {
    cfg.validate();
    if (items.empty()) throw ConfigError("grpo_train: no training items");
    for (const auto& it : items) pol.touch(theta, it.prompt);
    const policy::ToyPolicyParams ref = theta_ref ? *theta_ref : theta;
    metrics::CodeBleuCache cb;
    Rng rng(cfg.seed);
    const std::size_t per_pass = (items.size() + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t steps = cfg.iterations ? cfg.iterations : per_pass;
    std::vector<std::size_t> order;
    std::size_t cursor = 0;
    TrainResult out;
    for (std::size_t step = 0; step < steps; ++step) {
        std::vector<const TrainItem*> batch;
        while (batch.size() < std::min(cfg.batch_size, items.size())) {
            if (cursor == order.size()) {
                order.resize(items.size());
                std::iota(order.begin(), order.end(), 0);
                fisher_yates(order, rng);
                cursor = 0;
            }
            batch.push_back(&items[order[cursor++]]);
        }
        StepResult r = grpo_step(pol, std::move(theta), ref, batch, judge, cfg, cb, rng());
        r.record.iteration = step;
        theta = std::move(r.theta);
        if (on_step) on_step(r.record, theta);
        out.trace.push_back(r.record);
    }
    out.theta = std::move(theta);
    return out;
}

}  // namespace kaser::grpo
