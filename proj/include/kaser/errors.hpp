#pragma once

// Error-set algebra (IoU, chi-squared distance, the error-match reward), the
// error catalog, and the LLM judge / annotator built on the chat client.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "kaser/common.hpp"
#include "kaser/corpus.hpp"
#include "kaser/llm.hpp"
#include "kaser/parallel.hpp"
#include "kaser/prompts.hpp"

namespace kaser::errors {

using json = nlohmann::ordered_json;

enum class Category { syntax, runtime, logical };

inline std::string_view to_string(Category c) {
    switch (c) {
        case Category::syntax: return "Syntax";
        case Category::runtime: return "Runtime";
        case Category::logical: return "Logical";
    }
    return "?";
}

/// Accepts "Syntax", "syntax error", "RUNTIME", ...
inline std::optional<Category> parse_category(std::string_view s) {
    std::string lower(py_strip(s));
    std::transform(lower.begin(), lower.end(), lower.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (lower.rfind("syntax", 0) == 0) return Category::syntax;
    if (lower.rfind("runtime", 0) == 0) return Category::runtime;
    if (lower.rfind("logic", 0) == 0) return Category::logical;
    return std::nullopt;
}

struct ErrorLabel {
    std::string id;
    std::string description;
    Category category = Category::logical;
    bool operator==(const ErrorLabel&) const = default;
};

using ErrorSet = std::set<std::string>;
using ErrorDistribution = std::map<std::string, double>;

// ---------------------------------------------------------------------------
// Set algebra
// ---------------------------------------------------------------------------

/// |a ∩ b| / |a ∪ b|; 1 when both are empty.
inline double iou(const ErrorSet& a, const ErrorSet& b) {
    if (a.empty() && b.empty()) return 1.0;
    std::size_t inter = 0;
    for (const auto& x : a) inter += b.count(x);
    return static_cast<double>(inter) / static_cast<double>(a.size() + b.size() - inter);
}

inline double error_match_reward(const ErrorSet& pred, const ErrorSet& truth) {
    if (pred.empty() && truth.empty()) return 1.0;
    return iou(pred, truth);
}

inline ErrorDistribution count_errors(const std::vector<ErrorSet>& sets) {
    ErrorDistribution d;
    for (const auto& s : sets)
        for (const auto& e : s) d[e] += 1;
    return d;
}

/// Σ (p_i - q_i)² / (p_i + q_i) over the label union, skipping zero-mass
/// labels. With `normalized`, both sides are divided by their totals first.
inline double chi_squared_distance(const ErrorDistribution& p, const ErrorDistribution& q, bool normalized = false) {
    double tp = 0, tq = 0;
    for (const auto& [k, v] : p) {
        if (!(v >= 0) || !std::isfinite(v)) throw ConfigError("chi_squared_distance: counts must be finite and >= 0");
        tp += v;
    }
    for (const auto& [k, v] : q) {
        if (!(v >= 0) || !std::isfinite(v)) throw ConfigError("chi_squared_distance: counts must be finite and >= 0");
        tq += v;
    }
    if (p.empty() && q.empty()) throw ConfigError("chi_squared_distance: both distributions are empty");
    const double sp = normalized && tp > 0 ? tp : 1.0;
    const double sq = normalized && tq > 0 ? tq : 1.0;
    std::set<std::string> keys;
    for (const auto& [k, _] : p) keys.insert(k);
    for (const auto& [k, _] : q) keys.insert(k);
    double out = 0;
    for (const auto& k : keys) {
        const auto ip = p.find(k);
        const auto iq = q.find(k);
        const double a = ip == p.end() ? 0.0 : ip->second / sp;
        const double b = iq == q.end() ? 0.0 : iq->second / sq;
        if (a + b == 0) continue;
        out += (a - b) * (a - b) / (a + b);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Catalog
// ---------------------------------------------------------------------------

inline std::string normalize_label(std::string_view s) {
    std::string out;
    bool space = false;
    for (unsigned char c : py_strip(s)) {
        if (is_py_space(c)) {
            space = true;
            continue;
        }
        if (space && !out.empty()) out.push_back(' ');
        space = false;
        out.push_back(static_cast<char>(std::tolower(c)));
    }
    while (!out.empty() && (out.back() == '.')) out.pop_back();
    return out;
}

class ErrorCatalog {
public:
    ErrorCatalog() = default;
    explicit ErrorCatalog(std::vector<ErrorLabel> labels) : labels_(std::move(labels)) {
        for (std::size_t i = 0; i < labels_.size(); ++i) {
            const auto& l = labels_[i];
            if (l.id.empty()) throw IntegrityError("error label with empty id");
            if (py_strip(l.description).empty()) throw IntegrityError("error label '" + l.id + "' has no description");
            if (!by_id_.emplace(l.id, i).second) throw IntegrityError("duplicate error label id '" + l.id + "'");
            by_text_.emplace(normalize_label(l.description), i);
        }
    }

    const std::vector<ErrorLabel>& labels() const { return labels_; }
    bool empty() const { return labels_.empty(); }
    std::size_t size() const { return labels_.size(); }
    bool contains(const std::string& id) const { return by_id_.count(id) > 0; }
    const ErrorLabel& at(const std::string& id) const {
        auto it = by_id_.find(id);
        if (it == by_id_.end()) throw NotFoundError("unknown error label '" + id + "'");
        return labels_[it->second];
    }
    /// Resolves a judge's answer: an id, or a description (case- and
    /// whitespace-insensitive).
    std::optional<std::string> resolve(std::string_view answer) const {
        if (auto it = by_id_.find(std::string(py_strip(answer))); it != by_id_.end()) return labels_[it->second].id;
        if (auto it = by_text_.find(normalize_label(answer)); it != by_text_.end()) return labels_[it->second].id;
        return std::nullopt;
    }
    std::vector<std::string> descriptions() const {
        std::vector<std::string> out;
        for (const auto& l : labels_) out.push_back(l.description);
        return out;
    }
    std::string fingerprint() const {
        std::string s;
        for (const auto& l : labels_) s += l.id + '\x1f' + l.description + '\x1f' + std::string(to_string(l.category)) + '\n';
        return sha256_hex(s);
    }

private:
    std::vector<ErrorLabel> labels_;
    std::unordered_map<std::string, std::size_t> by_id_;
    std::unordered_map<std::string, std::size_t> by_text_;
};

inline json to_json(const ErrorCatalog& c) {
    json arr = json::array();
    for (const auto& l : c.labels())
        arr.push_back({{"id", l.id}, {"description", l.description}, {"category", std::string(to_string(l.category))}});
    return arr;
}

inline ErrorCatalog parse_catalog(const json& j, const std::string& source = "<catalog>") {
    if (!j.is_array()) throw SchemaError(source + ": error catalog must be a JSON array");
    std::vector<ErrorLabel> labels;
    for (std::size_t i = 0; i < j.size(); ++i) {
        const std::string where = source + "[" + std::to_string(i) + "]";
        const json& e = j[i];
        if (!e.is_object() || !e.contains("id") || !e.contains("description") || !e.contains("category") ||
            !e["id"].is_string() || !e["description"].is_string() || !e["category"].is_string())
            throw SchemaError(where + ": expected {id, description, category} strings");
        auto cat = parse_category(e["category"].get<std::string>());
        if (!cat) throw SchemaError(where + ": category must be Syntax, Runtime or Logical");
        labels.push_back({e["id"].get<std::string>(), e["description"].get<std::string>(), *cat});
    }
    return ErrorCatalog(std::move(labels));
}

inline ErrorCatalog load_catalog(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw NotFoundError("catalog file not found: " + path.string());
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw SchemaError(path.string() + ": " + e.what());
    }
    return parse_catalog(j, path.string());
}

inline void save_catalog(const ErrorCatalog& c, const std::filesystem::path& path) {
    write_file_atomic(path, to_json(c).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Judge
// ---------------------------------------------------------------------------

struct JudgeConfig {
    llm::EndpointConfig endpoint;
    std::string prompt = "judge";
};

struct JudgeResult {
    ErrorSet errors;
    int retries = 0;
    int dropped = 0;  // answers not in the catalog
    std::string raw_reply;
    std::string request_hash;
};

namespace detail {

/// Runs `attempt` up to 1 + retries times; attempt returns nullopt on a
/// malformed reply. Transport errors and malformed replies both consume a
/// retry; the last failure is surfaced.
template <typename T, typename F>
T with_retries(int retries, int& used, F&& attempt, const std::string& what) {
    std::string last;
    for (int k = 0; k <= retries; ++k) {
        used = k;
        try {
            if (std::optional<T> r = attempt()) return std::move(*r);
            last = "malformed reply";
        } catch (const TransportError& e) {
            last = e.what();
        }
    }
    throw TransportError(what + " failed after " + std::to_string(retries + 1) + " attempts: " + last);
}

}  // namespace detail

inline llm::ChatRequest judge_request(std::string_view code, const corpus::Problem& problem,
                                      const ErrorCatalog& catalog) {
    llm::ChatRequest req;
    req.messages = {{"system", std::string(prompts::judge_system)},
                    {"user", prompts::judge_user(problem.statement, code, catalog.descriptions())}};
    req.temperature = 0.0;
    return req;
}

/// Parses {"errors": [..]} into catalog ids; nullopt when the reply does not
/// satisfy the contract.
inline std::optional<std::pair<ErrorSet, int>> parse_judge_reply(std::string_view reply, const ErrorCatalog& catalog) {
    auto j = llm::parse_json_reply(reply);
    if (!j) return std::nullopt;
    auto it = j->find("errors");
    if (it == j->end() || !it->is_array()) return std::nullopt;
    ErrorSet out;
    int dropped = 0;
    for (const json& e : *it) {
        if (!e.is_string()) return std::nullopt;
        if (auto id = catalog.resolve(e.get<std::string>()))
            out.insert(*id);
        else
            ++dropped;
    }
    return std::make_pair(std::move(out), dropped);
}

inline JudgeResult judge_errors(std::string_view code, const corpus::Problem& problem, const ErrorCatalog& catalog,
                                const JudgeConfig& cfg, llm::ChatClient& client) {
    if (catalog.empty()) throw ConfigError("judge_errors: catalog is empty");
    const llm::ChatRequest req = judge_request(code, problem, catalog);
    JudgeResult r;
    r.request_hash = llm::request_hash(cfg.endpoint.model, req);
    auto parsed = detail::with_retries<std::pair<ErrorSet, int>>(
        cfg.endpoint.retries, r.retries,
        [&]() -> std::optional<std::pair<ErrorSet, int>> {
            auto choices = client.chat(req);
            if (choices.empty()) return std::nullopt;
            r.raw_reply = choices.front().content;
            return parse_judge_reply(r.raw_reply, catalog);
        },
        "judge");
    r.errors = std::move(parsed.first);
    r.dropped = parsed.second;
    return r;
}

/// Memoizes judge verdicts by (problem, code, catalog). Thread-safe.
class JudgeCache {
public:
    JudgeCache(JudgeConfig cfg, llm::ChatClient& client, const ErrorCatalog& catalog)
        : cfg_(std::move(cfg)), client_(&client), catalog_(&catalog), catalog_fp_(catalog.fingerprint()) {}

    JudgeResult operator()(std::string_view code, const corpus::Problem& problem) {
        const std::string key = sha256_hex(problem.id + '\0' + std::string(code) + '\0' + catalog_fp_);
        {
            std::lock_guard lock(mu_);
            if (auto it = memo_.find(key); it != memo_.end()) {
                ++hits_;
                return it->second;
            }
        }
        JudgeResult r = judge_errors(code, problem, *catalog_, cfg_, *client_);
        std::lock_guard lock(mu_);
        ++misses_;
        dropped_ += r.dropped;
        retries_ += r.retries;
        memo_.emplace(key, r);
        return r;
    }

    std::size_t hits() const {
        std::lock_guard lock(mu_);
        return hits_;
    }
    std::size_t misses() const {
        std::lock_guard lock(mu_);
        return misses_;
    }
    std::size_t dropped() const {
        std::lock_guard lock(mu_);
        return dropped_;
    }
    std::size_t retries() const {
        std::lock_guard lock(mu_);
        return retries_;
    }
    const JudgeConfig& config() const { return cfg_; }

private:
    JudgeConfig cfg_;
    llm::ChatClient* client_;
    const ErrorCatalog* catalog_;
    std::string catalog_fp_;
    mutable std::mutex mu_;
    std::unordered_map<std::string, JudgeResult> memo_;
    std::size_t hits_ = 0, misses_ = 0, dropped_ = 0, retries_ = 0;
};

// ---------------------------------------------------------------------------
// Annotation
// ---------------------------------------------------------------------------

struct RawError {
    std::string label;
    Category category = Category::logical;
    std::string reasoning;
};

struct AnnotationRecord {
    std::string student_id;
    std::string problem_id;
    std::string run_id;
    std::string request_hash;
    std::string raw_reply;
    std::vector<RawError> parsed;
    int retries = 0;
    bool ok = true;
    std::string error;  // failure message when !ok

    std::string key() const { return run_id + "/" + student_id + "/" + problem_id; }
};

inline json to_json(const AnnotationRecord& r) {
    json parsed = json::array();
    for (const auto& e : r.parsed)
        parsed.push_back({{"Label", e.label}, {"Category", std::string(to_string(e.category))}, {"Reasoning", e.reasoning}});
    json j = {{"key", {{"student_id", r.student_id}, {"problem_id", r.problem_id}, {"run_id", r.run_id}}},
              {"request_hash", r.request_hash},
              {"raw_reply", r.raw_reply},
              {"parsed_errors", std::move(parsed)},
              {"retries", r.retries}};
    if (!r.ok) j["failure"] = r.error;
    return j;
}

inline AnnotationRecord annotation_from_json(const json& j) {
    AnnotationRecord r;
    try {
        const json& k = j.at("key");
        r.student_id = k.at("student_id").get<std::string>();
        r.problem_id = k.at("problem_id").get<std::string>();
        r.run_id = k.at("run_id").get<std::string>();
        r.request_hash = j.at("request_hash").get<std::string>();
        r.raw_reply = j.at("raw_reply").get<std::string>();
        r.retries = j.at("retries").get<int>();
        for (const json& e : j.at("parsed_errors")) {
            auto cat = parse_category(e.at("Category").get<std::string>());
            r.parsed.push_back({e.at("Label").get<std::string>(), cat.value_or(Category::logical),
                                e.value("Reasoning", std::string())});
        }
        if (j.contains("failure")) {
            r.ok = false;
            r.error = j["failure"].get<std::string>();
        }
    } catch (const json::exception& e) {
        throw SchemaError(std::string("audit record: ") + e.what());
    }
    return r;
}

inline std::vector<AnnotationRecord> load_audit(const std::filesystem::path& path) {
    std::vector<AnnotationRecord> out;
    if (!std::filesystem::exists(path)) return out;
    const std::string text = read_file(path);
    for (std::string_view line : split_lines(text)) {
        if (py_strip(line).empty()) continue;
        try {
            out.push_back(annotation_from_json(json::parse(line)));
        } catch (const json::parse_error& e) {
            throw SchemaError(path.string() + ": " + e.what());
        }
    }
    return out;
}

inline llm::ChatRequest annotation_request(const corpus::Problem& problem, std::string_view code) {
    llm::ChatRequest req;
    req.messages = {{"system", prompts::annotate_system(problem.language)},
                    {"user", prompts::annotate_user(problem.statement, code)}};
    req.temperature = 0.0;
    return req;
}

/// Parses {"errors": [{"Reasoning", "Category", "Label"}, ...]}.
inline std::optional<std::vector<RawError>> parse_annotation_reply(std::string_view reply) {
    auto j = llm::parse_json_reply(reply);
    if (!j) return std::nullopt;
    auto it = j->find("errors");
    if (it == j->end() || !it->is_array()) return std::nullopt;
    std::vector<RawError> out;
    for (const json& e : *it) {
        if (!e.is_object()) return std::nullopt;
        auto label = e.find("Label");
        auto cat = e.find("Category");
        if (label == e.end() || !label->is_string() || py_strip(label->get<std::string>()).empty()) return std::nullopt;
        if (cat == e.end() || !cat->is_string()) return std::nullopt;
        auto c = parse_category(cat->get<std::string>());
        if (!c) return std::nullopt;
        out.push_back({std::string(py_strip(label->get<std::string>())), *c, e.value("Reasoning", std::string())});
    }
    return out;
}

struct AnnotateOptions {
    std::string run_id = "run0";
    /// Reuse successful audit records of the same run and request.
    bool resume = false;
    std::filesystem::path audit_path;  // empty = no audit file
};

struct AnnotationOutcome {
    corpus::Dataset dataset;
    std::vector<AnnotationRecord> records;  // one per judged submission, dataset order
    std::vector<std::string> failures;      // submission keys left unannotated
    std::size_t reused = 0;
};

/// Correct submissions get an empty error set without a request; the
/// annotation prompt presupposes at least one error. Labels are stored raw
/// (before clustering), de-duplicated in reply order.
inline AnnotationOutcome annotate_dataset(const corpus::Dataset& data, const llm::EndpointConfig& endpoint,
                                          llm::ChatClient& client, const AnnotateOptions& opt = {}) {
    const auto& subs = data.submissions();
    std::map<std::string, AnnotationRecord> previous;
    if (opt.resume && !opt.audit_path.empty())
        for (auto& r : load_audit(opt.audit_path))
            if (r.ok && r.run_id == opt.run_id) previous[r.key()] = std::move(r);

    std::vector<std::size_t> todo;
    for (std::size_t i = 0; i < subs.size(); ++i)
        if (!subs[i].correct) todo.push_back(i);

    std::vector<AnnotationRecord> records(todo.size());
    std::vector<char> reused(todo.size(), 0);
    parallel_for(todo.size(), static_cast<std::size_t>(endpoint.max_parallel), [&](std::size_t k) {
        const corpus::Submission& s = subs[todo[k]];
        const corpus::Problem& p = data.problem(s.problem_id);
        const llm::ChatRequest req = annotation_request(p, s.code);
        AnnotationRecord& r = records[k];
        r.student_id = s.student_id;
        r.problem_id = s.problem_id;
        r.run_id = opt.run_id;
        r.request_hash = llm::request_hash(endpoint.model, req);
        if (auto it = previous.find(r.key()); it != previous.end() && it->second.request_hash == r.request_hash) {
            r = it->second;
            reused[k] = 1;
            return;
        }
        try {
            r.parsed = detail::with_retries<std::vector<RawError>>(
                endpoint.retries, r.retries,
                [&]() -> std::optional<std::vector<RawError>> {
                    auto choices = client.chat(req);
                    if (choices.empty()) return std::nullopt;
                    r.raw_reply = choices.front().content;
                    return parse_annotation_reply(r.raw_reply);
                },
                "annotation of " + s.key());
        } catch (const TransportError& e) {
            r.ok = false;
            r.error = e.what();
        }
    });

    AnnotationOutcome out;
    std::vector<std::optional<std::vector<std::string>>> errs(subs.size());
    for (std::size_t i = 0; i < subs.size(); ++i)
        if (subs[i].correct) errs[i] = std::vector<std::string>{};
    for (std::size_t k = 0; k < todo.size(); ++k) {
        const AnnotationRecord& r = records[k];
        out.reused += reused[k];
        if (!r.ok) {
            out.failures.push_back(subs[todo[k]].key());
            continue;
        }
        std::vector<std::string> labels;
        for (const auto& e : r.parsed)
            if (std::find(labels.begin(), labels.end(), e.label) == labels.end()) labels.push_back(e.label);
        errs[todo[k]] = std::move(labels);
    }
    if (!opt.audit_path.empty()) {
        std::string text;
        for (const auto& r : records) text += to_json(r).dump() + "\n";
        write_file_atomic(opt.audit_path, text);
    }
    out.records = std::move(records);
    out.dataset = data.with_errors(errs);
    return out;
}

/// Micro-averaged F1 between two annotation runs over (submission, label)
/// pairs, comparing normalized label text. Only submissions present and
/// successful in both runs count.
inline double annotation_f1(const std::vector<AnnotationRecord>& a, const std::vector<AnnotationRecord>& b) {
    auto index = [](const std::vector<AnnotationRecord>& rs) {
        std::map<std::pair<std::string, std::string>, std::set<std::string>> m;
        for (const auto& r : rs) {
            if (!r.ok) continue;
            auto& s = m[{r.student_id, r.problem_id}];
            for (const auto& e : r.parsed) s.insert(normalize_label(e.label));
        }
        return m;
    };
    const auto ia = index(a), ib = index(b);
    double tp = 0, na = 0, nb = 0;
    for (const auto& [k, sa] : ia) {
        auto it = ib.find(k);
        if (it == ib.end()) continue;
        const auto& sb = it->second;
        na += static_cast<double>(sa.size());
        nb += static_cast<double>(sb.size());
        for (const auto& x : sa) tp += static_cast<double>(sb.count(x));
    }
    if (na + nb == 0) return 1.0;
    return 2 * tp / (na + nb);
}

}  // namespace kaser::errors
