#pragma once

// Generative policies: the knowledge-guided prompt, a tabular softmax policy
// over snippet slots (trainable, used for desk-scale GRPO), and a sampler for
// remote OpenAI-compatible endpoints.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "kaser/common.hpp"
#include "kaser/corpus.hpp"
#include "kaser/llm.hpp"
#include "kaser/parallel.hpp"
#include "kaser/prompts.hpp"

namespace kaser::policy {

using json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Prompt
// ---------------------------------------------------------------------------

struct MasteryEntry {
    std::string kc_id;
    std::string name;
    double value = 0;
};

struct Prompt {
    std::string text;
    std::string problem_id;
    Language language = Language::java;
    std::vector<MasteryEntry> mastery;  // the problem's KCs in catalog order
};

/// Two decimals, round-half-even on the exact binary value (printf rules).
inline std::string format_mastery(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

/// `mastery` maps KC id to value; only the problem's KCs are rendered.
inline Prompt build_knowledge_prompt(const corpus::Problem& problem, const std::map<std::string, double>& mastery,
                                     const std::vector<corpus::KnowledgeComponent>& catalog) {
    Prompt p;
    p.problem_id = problem.id;
    p.language = problem.language;
    for (const auto& kc : catalog) {
        if (std::find(problem.kc_ids.begin(), problem.kc_ids.end(), kc.id) == problem.kc_ids.end()) continue;
        auto it = mastery.find(kc.id);
        if (it == mastery.end())
            throw NotFoundError("no mastery value for KC '" + kc.id + "' of problem '" + problem.id + "'");
        if (!(it->second >= 0.0 && it->second <= 1.0))
            throw ConfigError("mastery for KC '" + kc.id + "' is outside [0, 1]");
        p.mastery.push_back({kc.id, kc.name, it->second});
    }
    if (p.mastery.size() != problem.kc_ids.size())
        throw NotFoundError("problem '" + problem.id + "' references KCs missing from the catalog");
    std::string s = "Problem:\n" + problem.statement + "\n\nStudent information:\n";
    for (std::size_t i = 0; i < p.mastery.size(); ++i) {
        const auto& m = p.mastery[i];
        s += "KC " + std::to_string(i + 1) + ": " + m.name + ". The student's mastery level on " + m.name + " is " +
             format_mastery(m.value) + ".\n";
    }
    s += "\nSimulate the student written code:";
    p.text = std::move(s);
    return p;
}

// ---------------------------------------------------------------------------
// Completions and handles
// ---------------------------------------------------------------------------

struct Completion {
    std::vector<std::size_t> tokens;       // vocabulary ids (toy policy)
    std::vector<std::string> token_texts;  // as returned by the producer
    std::string text;
    std::vector<double> logprobs;  // per token; empty when unscored
    bool scored = false;
    bool refused = false;

    double total_logprob() const {
        double s = 0;
        for (double l : logprobs) s += l;
        return s;
    }
};

enum class PolicyKind { toy, remote };

struct Capabilities {
    bool can_sample = false;
    bool can_score = false;
    bool can_update = false;
};

struct PolicyHandle {
    PolicyKind kind = PolicyKind::toy;
    Capabilities caps;

    static PolicyHandle toy() { return {PolicyKind::toy, {true, true, true}}; }
    static PolicyHandle remote(bool endpoint_returns_logprobs) {
        return {PolicyKind::remote, {true, endpoint_returns_logprobs, false}};
    }
};

// ---------------------------------------------------------------------------
// Toy task: per-problem code templates with option slots
// ---------------------------------------------------------------------------

/// Placeholder for slot i in a template is "<<i>>".
inline std::string slot_marker(std::size_t i) { return "<<" + std::to_string(i) + ">>"; }

struct SlotTemplate {
    std::string code;
    std::vector<std::vector<std::string>> slots;  // options per slot
};

enum class ContextMode {
    prompt,          // one table row set per distinct prompt text
    mastery_bucket,  // problem id plus per-KC mastery bucket
};

class ToyTask {
public:
    ToyTask() = default;
    ToyTask(Language lang, std::map<std::string, SlotTemplate> problems, ContextMode mode = ContextMode::prompt,
            int buckets = 2)
        : language_(lang), problems_(std::move(problems)), mode_(mode), buckets_(buckets) {
        if (buckets_ < 1) throw ConfigError("toy task: buckets must be >= 1");
        for (const auto& [id, t] : problems_) {
            if (t.slots.empty()) throw ConfigError("toy task: problem '" + id + "' has no slots");
            for (std::size_t i = 0; i < t.slots.size(); ++i) {
                if (t.code.find(slot_marker(i)) == std::string::npos)
                    throw ConfigError("toy task: template of '" + id + "' lacks " + slot_marker(i));
                if (t.slots[i].empty()) throw ConfigError("toy task: empty slot in '" + id + "'");
                std::set<std::string> seen;
                for (const auto& o : t.slots[i]) {
                    if (!seen.insert(o).second) throw ConfigError("toy task: duplicate option in '" + id + "'");
                    if (std::find(vocab_.begin(), vocab_.end(), o) == vocab_.end()) vocab_.push_back(o);
                }
            }
        }
    }

    Language language() const { return language_; }
    const std::vector<std::string>& vocabulary() const { return vocab_; }
    const std::map<std::string, SlotTemplate>& problems() const { return problems_; }
    ContextMode context_mode() const { return mode_; }

    const SlotTemplate& problem(const std::string& id) const {
        auto it = problems_.find(id);
        if (it == problems_.end()) throw NotFoundError("toy task has no template for problem '" + id + "'");
        return it->second;
    }

    std::size_t token_id(const std::string& s) const {
        auto it = std::find(vocab_.begin(), vocab_.end(), s);
        if (it == vocab_.end()) throw NotFoundError("token '" + s + "' is not in the toy vocabulary");
        return static_cast<std::size_t>(it - vocab_.begin());
    }

    /// Vocabulary ids allowed in each slot of a problem.
    std::vector<std::vector<std::size_t>> supports(const std::string& problem_id) const {
        std::vector<std::vector<std::size_t>> out;
        for (const auto& opts : problem(problem_id).slots) {
            std::vector<std::size_t> ids;
            for (const auto& o : opts) ids.push_back(token_id(o));
            out.push_back(std::move(ids));
        }
        return out;
    }

    std::string render(const std::string& problem_id, const std::vector<std::size_t>& tokens) const {
        const SlotTemplate& t = problem(problem_id);
        if (tokens.size() != t.slots.size()) throw ShapeError("toy render: wrong number of tokens");
        std::string code = t.code;
        for (std::size_t i = 0; i < tokens.size(); ++i)
            code = prompts::replace_all(code, slot_marker(i), vocab_.at(tokens[i]));
        return code;
    }

    /// Tokens whose rendering equals `code`, if any.
    std::optional<std::vector<std::size_t>> encode(const std::string& problem_id, const std::string& code) const {
        const auto sup = supports(problem_id);
        std::vector<std::size_t> idx(sup.size(), 0), tokens(sup.size());
        while (true) {
            for (std::size_t i = 0; i < sup.size(); ++i) tokens[i] = sup[i][idx[i]];
            if (render(problem_id, tokens) == code) return tokens;
            std::size_t i = 0;
            while (i < sup.size() && ++idx[i] == sup[i].size()) idx[i++] = 0;
            if (i == sup.size()) return std::nullopt;
        }
    }

    std::string context_key(const Prompt& p) const {
        if (mode_ == ContextMode::prompt) return hex64(fnv1a64(p.text));
        std::string key = p.problem_id + "|";
        for (const auto& m : p.mastery) {
            const int b = std::min(buckets_ - 1, static_cast<int>(std::floor(m.value * buckets_)));
            key += std::to_string(b);
        }
        return key;
    }

private:
    Language language_ = Language::java;
    std::map<std::string, SlotTemplate> problems_;
    std::vector<std::string> vocab_;
    ContextMode mode_ = ContextMode::prompt;
    int buckets_ = 2;

    friend json to_json(const ToyTask& t);
    friend ToyTask parse_toy_task(const json& j);
};

inline json to_json(const ToyTask& t) {
    json probs = json::object();
    for (const auto& [id, tpl] : t.problems_) probs[id] = {{"template", tpl.code}, {"slots", tpl.slots}};
    return {{"language", to_string(t.language_)},
            {"context", t.mode_ == ContextMode::prompt ? "prompt" : "mastery_bucket"},
            {"buckets", t.buckets_},
            {"problems", probs}};
}

inline ToyTask parse_toy_task(const json& j) {
    try {
        const std::string ctx = j.value("context", std::string("prompt"));
        if (ctx != "prompt" && ctx != "mastery_bucket") throw ConfigError("toy task: unknown context mode '" + ctx + "'");
        std::map<std::string, SlotTemplate> problems;
        for (const auto& [id, p] : j.at("problems").items())
            problems[id] = {p.at("template").get<std::string>(), p.at("slots").get<std::vector<std::vector<std::string>>>()};
        return ToyTask(parse_language(j.at("language").get<std::string>()), std::move(problems),
                       ctx == "prompt" ? ContextMode::prompt : ContextMode::mastery_bucket, j.value("buckets", 2));
    } catch (const json::exception& e) {
        throw SchemaError(std::string("toy task: ") + e.what());
    }
}

inline ToyTask load_toy_task(const std::filesystem::path& path) {
    try {
        return parse_toy_task(json::parse(read_file(path)));
    } catch (const json::parse_error& e) {
        throw SchemaError(path.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Toy policy
// ---------------------------------------------------------------------------

inline constexpr double logit_bound = 30.0;

/// One softmax row: logits over a subset of the vocabulary.
struct Row {
    std::vector<std::size_t> support;
    std::vector<double> logits;
    bool operator==(const Row&) const = default;

    std::vector<double> probs() const {
        const double mx = *std::max_element(logits.begin(), logits.end());
        std::vector<double> p(logits.size());
        double z = 0;
        for (std::size_t i = 0; i < p.size(); ++i) z += (p[i] = std::exp(logits[i] - mx));
        for (double& v : p) v /= z;
        return p;
    }
    double log_normalizer() const {
        const double mx = *std::max_element(logits.begin(), logits.end());
        double z = 0;
        for (double l : logits) z += std::exp(l - mx);
        return mx + std::log(z);
    }
    std::size_t position(std::size_t token) const {
        auto it = std::find(support.begin(), support.end(), token);
        if (it == support.end()) throw NotFoundError("token id " + std::to_string(token) + " is outside this slot");
        return static_cast<std::size_t>(it - support.begin());
    }
};

/// Sparse gradient (or update direction) keyed like the parameter table.
using RowGrad = std::map<std::string, std::vector<double>>;

inline void add_to(RowGrad& acc, const RowGrad& g, double scale = 1.0) {
    for (const auto& [k, v] : g) {
        auto& dst = acc[k];
        if (dst.empty()) dst.assign(v.size(), 0.0);
        for (std::size_t i = 0; i < v.size(); ++i) dst[i] += scale * v[i];
    }
}

struct ToyPolicyParams {
    std::vector<std::string> vocabulary;
    std::map<std::string, Row> rows;  // "<context>#<slot>"
};

inline std::string row_key(const std::string& context, std::size_t slot) {
    return context + "#" + std::to_string(slot);
}

/// Stateless operations over a task; parameters are passed explicitly.
class ToyPolicy {
public:
    explicit ToyPolicy(const ToyTask& task, bool strict = false) : task_(&task), strict_(strict) {}

    const ToyTask& task() const { return *task_; }
    bool strict() const { return strict_; }

    ToyPolicyParams init() const { return {task_->vocabulary(), {}}; }

    /// Row for slot i of the prompt's context; a uniform row when absent
    /// (strict mode: error).
    Row row(const ToyPolicyParams& theta, const Prompt& p, std::size_t slot) const {
        const auto sup = task_->supports(p.problem_id);
        if (slot >= sup.size()) throw ShapeError("toy policy: slot index out of range");
        auto it = theta.rows.find(row_key(task_->context_key(p), slot));
        if (it != theta.rows.end()) {
            if (it->second.support != sup[slot]) throw ShapeError("toy policy: stored row does not match the slot");
            return it->second;
        }
        if (strict_) throw NotFoundError("toy policy: unknown context for problem '" + p.problem_id + "'");
        return {sup[slot], std::vector<double>(sup[slot].size(), 0.0)};
    }

    /// Ensures rows exist for the prompt (materializing uniform rows).
    void touch(ToyPolicyParams& theta, const Prompt& p) const {
        const auto sup = task_->supports(p.problem_id);
        const std::string ctx = task_->context_key(p);
        for (std::size_t s = 0; s < sup.size(); ++s)
            theta.rows.try_emplace(row_key(ctx, s), Row{sup[s], std::vector<double>(sup[s].size(), 0.0)});
    }

    std::vector<Completion> sample(const ToyPolicyParams& theta, const Prompt& p, std::size_t G,
                                   std::uint64_t seed) const {
        if (G < 1) throw ConfigError("toy_sample: G must be >= 1");
        const std::size_t slots = task_->problem(p.problem_id).slots.size();
        std::vector<Row> rows;
        std::vector<std::vector<double>> probs;
        for (std::size_t s = 0; s < slots; ++s) {
            rows.push_back(row(theta, p, s));
            probs.push_back(rows.back().probs());
        }
        Rng rng(seed);
        std::vector<Completion> out(G);
        for (auto& c : out) {
            for (std::size_t s = 0; s < slots; ++s) {
                const double u = uniform01(rng);
                std::size_t pick = probs[s].size() - 1;
                double acc = 0;
                for (std::size_t i = 0; i < probs[s].size(); ++i) {
                    acc += probs[s][i];
                    if (u < acc) {
                        pick = i;
                        break;
                    }
                }
                const std::size_t tok = rows[s].support[pick];
                c.tokens.push_back(tok);
                c.token_texts.push_back(task_->vocabulary()[tok]);
                c.logprobs.push_back(rows[s].logits[pick] - rows[s].log_normalizer());
            }
            c.text = task_->render(p.problem_id, c.tokens);
            c.scored = true;
        }
        return out;
    }

    /// Per-token log-probabilities of `tokens` under theta.
    std::vector<double> logprobs(const ToyPolicyParams& theta, const Prompt& p,
                                 const std::vector<std::size_t>& tokens) const {
        const std::size_t slots = task_->problem(p.problem_id).slots.size();
        if (tokens.size() != slots) throw ShapeError("toy_logprob: completion has the wrong number of tokens");
        std::vector<double> out;
        for (std::size_t s = 0; s < slots; ++s) {
            if (tokens[s] >= theta.vocabulary.size()) throw NotFoundError("toy_logprob: out-of-vocabulary token");
            const Row r = row(theta, p, s);
            out.push_back(r.logits[r.position(tokens[s])] - r.log_normalizer());
        }
        return out;
    }

    /// d logprob(token at slot s) / d logits, per slot; weights w_s scale
    /// each slot's contribution.
    RowGrad logprob_grad(const ToyPolicyParams& theta, const Prompt& p, const std::vector<std::size_t>& tokens,
                         const std::vector<double>& w) const {
        if (w.size() != tokens.size()) throw ShapeError("logprob_grad: weight count mismatch");
        const std::string ctx = task_->context_key(p);
        RowGrad g;
        for (std::size_t s = 0; s < tokens.size(); ++s) {
            if (w[s] == 0.0) continue;
            const Row r = row(theta, p, s);
            const auto pr = r.probs();
            const std::size_t at = r.position(tokens[s]);
            std::vector<double> d(pr.size());
            for (std::size_t i = 0; i < pr.size(); ++i) d[i] = w[s] * ((i == at ? 1.0 : 0.0) - pr[i]);
            add_to(g, {{row_key(ctx, s), std::move(d)}});
        }
        return g;
    }

    /// theta <- theta + lr * grad (ascent), with |logit| clipped to 30.
    ToyPolicyParams update(ToyPolicyParams theta, const Prompt& p, const RowGrad& grad, double lr) const {
        touch(theta, p);
        return apply(std::move(theta), grad, lr);
    }

    static ToyPolicyParams apply(ToyPolicyParams theta, const RowGrad& grad, double lr) {
        for (const auto& [k, v] : grad)
            for (double x : v)
                if (!std::isfinite(x)) throw NumericError("toy_update: non-finite gradient for row '" + k + "'");
        for (const auto& [k, v] : grad) {
            auto it = theta.rows.find(k);
            if (it == theta.rows.end()) throw NotFoundError("toy_update: gradient for unknown row '" + k + "'");
            if (it->second.logits.size() != v.size()) throw ShapeError("toy_update: row width mismatch");
            for (std::size_t i = 0; i < v.size(); ++i)
                it->second.logits[i] = std::clamp(it->second.logits[i] + lr * v[i], -logit_bound, logit_bound);
        }
        return theta;
    }

private:
    const ToyTask* task_;
    bool strict_;
};

struct SftResult {
    double loss = 0;
    RowGrad grad;  // d loss / d logits
};

/// Token-level cross-entropy -sum log P(token | context) and its gradient.
inline SftResult sft_loss(const ToyPolicy& pol, const ToyPolicyParams& theta, const Prompt& p,
                          const std::vector<std::size_t>& target) {
    SftResult r;
    for (double l : pol.logprobs(theta, p, target)) r.loss -= l;
    r.grad = pol.logprob_grad(theta, p, target, std::vector<double>(target.size(), -1.0));
    return r;
}

struct SftConfig {
    int epochs = 50;
    double lr = 0.5;
};

inline void to_json(json& j, const SftConfig& c) { j = {{"epochs", c.epochs}, {"lr", c.lr}}; }
inline void from_json(const json& j, SftConfig& c) {
    c.epochs = j.value("epochs", c.epochs);
    c.lr = j.value("lr", c.lr);
}

/// Full-batch gradient descent on the mean SFT loss over (prompt, target)
/// pairs. Returns the parameters and the loss curve.
inline std::pair<ToyPolicyParams, std::vector<double>> sft_train(
    const ToyPolicy& pol, ToyPolicyParams theta, const std::vector<std::pair<Prompt, std::vector<std::size_t>>>& data,
    const SftConfig& cfg) {
    std::vector<double> curve;
    if (data.empty()) return {std::move(theta), curve};
    for (const auto& [p, t] : data) pol.touch(theta, p);
    for (int e = 0; e < cfg.epochs; ++e) {
        RowGrad g;
        double loss = 0;
        for (const auto& [p, t] : data) {
            auto r = sft_loss(pol, theta, p, t);
            loss += r.loss;
            add_to(g, r.grad);
        }
        curve.push_back(loss / static_cast<double>(data.size()));
        theta = ToyPolicy::apply(std::move(theta), g, -cfg.lr / static_cast<double>(data.size()));
    }
    return {std::move(theta), curve};
}

inline json to_json(const ToyPolicyParams& t) {
    json contexts = json::object();
    for (const auto& [k, r] : t.rows) contexts[k] = {{"support", r.support}, {"logits", r.logits}};
    return {{"vocabulary", t.vocabulary}, {"contexts", contexts}};
}

inline ToyPolicyParams toy_params_from_json(const json& j) {
    try {
        ToyPolicyParams t;
        t.vocabulary = j.at("vocabulary").get<std::vector<std::string>>();
        for (const auto& [k, r] : j.at("contexts").items()) {
            Row row{r.at("support").get<std::vector<std::size_t>>(), r.at("logits").get<std::vector<double>>()};
            if (row.support.size() != row.logits.size() || row.support.empty())
                throw SchemaError("toy policy: row '" + k + "' has mismatched support and logits");
            for (double l : row.logits)
                if (!std::isfinite(l)) throw SchemaError("toy policy: row '" + k + "' has non-finite logits");
            t.rows.emplace(k, std::move(row));
        }
        return t;
    } catch (const json::exception& e) {
        throw SchemaError(std::string("toy policy: ") + e.what());
    }
}

// ---------------------------------------------------------------------------
// Remote policy
// ---------------------------------------------------------------------------

struct DecodeParams {
    double temperature = 0.7;
    double top_p = 1.0;
    int top_k = 40;
    bool request_logprobs = true;
    std::optional<int> max_tokens;
};

inline void to_json(json& j, const DecodeParams& d) {
    j = {{"temperature", d.temperature}, {"top_p", d.top_p}, {"top_k", d.top_k}, {"logprobs", d.request_logprobs}};
    if (d.max_tokens) j["max_tokens"] = *d.max_tokens;
}
inline void from_json(const json& j, DecodeParams& d) {
    d.temperature = j.value("temperature", d.temperature);
    d.top_p = j.value("top_p", d.top_p);
    d.top_k = j.value("top_k", d.top_k);
    d.request_logprobs = j.value("logprobs", d.request_logprobs);
    if (j.contains("max_tokens")) d.max_tokens = j.at("max_tokens").get<int>();
}

/// Replies that are prose rather than code.
inline bool looks_like_refusal(std::string_view reply) {
    const std::string low = ascii_lower(py_strip(reply));
    if (low.empty()) return true;
    for (std::string_view lead : {"i'm sorry", "i am sorry", "i cannot", "i can't", "as an ai", "sorry,"})
        if (low.rfind(lead, 0) == 0) return true;
    return low.find_first_of("{}();=:") == std::string::npos;
}

inline llm::ChatRequest simulate_request(const Prompt& p, std::size_t G, const DecodeParams& d) {
    llm::ChatRequest req;
    req.messages = {{"system", prompts::simulate_system(p.language)}, {"user", p.text}};
    req.n = static_cast<int>(G);
    req.temperature = d.temperature;
    req.top_p = d.top_p;
    req.top_k = d.top_k;
    req.logprobs = d.request_logprobs;
    req.max_tokens = d.max_tokens;
    return req;
}

struct RemoteSample {
    std::vector<Completion> completions;
    PolicyHandle handle;
    int retries = 0;
};

inline RemoteSample remote_sample(llm::ChatClient& client, const Prompt& p, std::size_t G, const DecodeParams& d) {
    if (G < 1) throw ConfigError("remote_sample: G must be >= 1");
    const llm::ChatRequest req = simulate_request(p, G, d);
    const int retries = client.config().retries;
    std::string last;
    for (int k = 0; k <= retries; ++k) {
        try {
            auto choices = client.chat(req);
            if (choices.size() != G) {
                last = "expected " + std::to_string(G) + " choices, got " + std::to_string(choices.size());
                continue;
            }
            RemoteSample out;
            out.retries = k;
            bool all_scored = true;
            for (auto& ch : choices) {
                Completion c;
                c.text = llm::strip_code_fence(ch.content);
                c.refused = looks_like_refusal(ch.content);
                if (ch.logprobs) {
                    for (const auto& t : *ch.logprobs) {
                        c.token_texts.push_back(t.token);
                        c.logprobs.push_back(t.logprob);
                    }
                    c.scored = true;
                }
                all_scored = all_scored && c.scored;
                out.completions.push_back(std::move(c));
            }
            out.handle = PolicyHandle::remote(all_scored);
            return out;
        } catch (const TransportError& e) {
            last = e.what();
        }
    }
    throw TransportError("remote_sample failed after " + std::to_string(retries + 1) + " attempts: " + last);
}

}  // namespace kaser::policy
