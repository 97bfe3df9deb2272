#pragma once

// Offline stand-in for the chat and embeddings endpoints. Requests are routed
// by the system prompt to the annotator, summarizer, judge or simulator role.
// Recorded request hashes replay stored bodies; everything else goes through
// a regex rule engine, so answers are a pure function of the request.

#include <atomic>
#include <cmath>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <regex>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "kaser/common.hpp"
#include "kaser/errors.hpp"
#include "kaser/prompts.hpp"

namespace kaser::mock {

using json = nlohmann::ordered_json;

struct Rule {
    std::string pattern;
    std::string label;
    std::string category = "Logical";
    std::string reasoning;
    std::regex re;
};

struct MockConfig {
    std::vector<Rule> rules;
    /// request hash -> response body, replayed byte for byte
    std::map<std::string, std::string> fixtures;
    /// Malformed replies for the first N attempts of every distinct request.
    int malformed_first = 0;
    bool logprobs = true;
    bool refuse = false;
    std::size_t embedding_dim = 256;
    /// Problem statement -> canned student codes for the simulator role.
    std::map<std::string, std::vector<std::string>> simulate;
    std::string fallback_label = "Unspecified logic error";
};

inline MockConfig parse_mock_config(const json& j) {
    MockConfig c;
    try {
        for (const json& r : j.value("rules", json::array())) {
            Rule rule;
            rule.pattern = r.at("pattern").get<std::string>();
            rule.label = r.at("label").get<std::string>();
            rule.category = r.value("category", rule.category);
            rule.reasoning = r.value("reasoning", "The code matches the pattern for " + rule.label + ".");
            try {
                rule.re = std::regex(rule.pattern, std::regex::ECMAScript);
            } catch (const std::regex_error& e) {
                throw ConfigError("mock rule '" + rule.label + "': bad pattern: " + e.what());
            }
            c.rules.push_back(std::move(rule));
        }
        if (j.contains("fixtures"))
            for (const auto& [k, v] : j.at("fixtures").items())
                c.fixtures[k] = v.is_string() ? v.get<std::string>() : v.dump();
        c.malformed_first = j.value("malformed_first", 0);
        c.logprobs = j.value("logprobs", true);
        c.refuse = j.value("refuse", false);
        c.embedding_dim = j.value("embedding_dim", c.embedding_dim);
        if (c.embedding_dim < 2) throw ConfigError("mock: embedding_dim must be >= 2");
        if (j.contains("simulate")) c.simulate = j.at("simulate").get<std::map<std::string, std::vector<std::string>>>();
        c.fallback_label = j.value("fallback_label", c.fallback_label);
    } catch (const json::exception& e) {
        throw SchemaError(std::string("mock config: ") + e.what());
    }
    return c;
}

inline MockConfig load_mock_config(const std::filesystem::path& p) {
    try {
        return parse_mock_config(json::parse(read_file(p)));
    } catch (const json::parse_error& e) {
        throw SchemaError(p.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Pure responders
// ---------------------------------------------------------------------------

inline std::vector<const Rule*> matching_rules(const MockConfig& c, const std::string& code) {
    std::vector<const Rule*> out;
    for (const auto& r : c.rules)
        if (std::regex_search(code, r.re)) out.push_back(&r);
    return out;
}

/// Identifier runs and punctuation runs, lowercased.
inline std::vector<std::string> bag_tokens(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    int kind = 0;  // 1 word, 2 punct
    auto flush = [&] {
        if (!cur.empty()) out.push_back(cur);
        cur.clear();
    };
    for (unsigned char ch : text) {
        const int k = (std::isalnum(ch) || ch == '_') ? 1 : std::isspace(ch) ? 0 : 2;
        if (k != kind) flush();
        kind = k;
        if (k) cur += static_cast<char>(std::tolower(ch));
    }
    flush();
    return out;
}

/// Hashed bag of tokens. Counts are non-negative, so the vector is zero only
/// for token-free text, which maps to the first basis vector.
inline std::vector<double> hashed_embedding(std::string_view text, std::size_t dim) {
    std::vector<double> v(dim, 0.0);
    const auto toks = bag_tokens(text);
    for (const auto& t : toks) v[fnv1a64(t) % dim] += 1.0;
    if (toks.empty()) v[0] = 1.0;
    return v;
}

inline double word_jaccard(const std::string& a, const std::string& b) {
    std::set<std::string> x, y;
    for (auto& t : bag_tokens(a)) x.insert(t);
    for (auto& t : bag_tokens(b)) y.insert(t);
    std::size_t inter = 0;
    for (const auto& t : x) inter += y.count(t);
    const std::size_t uni = x.size() + y.size() - inter;
    return uni ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

enum class Role { annotate, summarize, judge, simulate, unknown };

inline Role route(const std::string& system) {
    if (system.rfind(prompts::annotate_system_prefix, 0) == 0) return Role::annotate;
    if (system.rfind("You are an experienced computer science teacher", 0) == 0) return Role::summarize;
    if (system.rfind("You are an experienced code reviewer", 0) == 0) return Role::judge;
    if (system.rfind("You are a student code simulator", 0) == 0) return Role::simulate;
    return Role::unknown;
}

inline std::string between(const std::string& s, const std::string& open, const std::string& close) {
    const auto b = s.find(open);
    if (b == std::string::npos) throw ConfigError("mock: request lacks '" + open + "'");
    const auto start = b + open.size();
    if (close.empty()) return s.substr(start);
    const auto e = s.rfind(close);
    if (e == std::string::npos || e < start) throw ConfigError("mock: request lacks '" + close + "'");
    return s.substr(start, e - start);
}

inline std::string annotate_reply(const MockConfig& c, const std::string& user) {
    const std::string code = between(user, "\n\nCode:\n", "");
    json errs = json::array();
    for (const Rule* r : matching_rules(c, code))
        errs.push_back({{"Reasoning", r->reasoning}, {"Category", r->category}, {"Label", r->label}});
    if (errs.empty())
        errs.push_back({{"Reasoning", "The output differs from the expected behaviour."},
                        {"Category", "Logical"},
                        {"Label", c.fallback_label}});
    return json{{"errors", errs}}.dump();
}

inline std::string judge_reply(const MockConfig& c, const std::string& user) {
    const std::string code = between(user, "\n\nCode: ", "\n\nError list: ");
    const auto list = json::parse(between(user, "\n\nError list: ", "")).get<std::vector<std::string>>();
    std::set<std::size_t> picked;
    for (const Rule* r : matching_rules(c, code)) {
        std::optional<std::size_t> best;
        double best_score = 0;
        for (std::size_t i = 0; i < list.size(); ++i) {
            if (errors::normalize_label(list[i]) == errors::normalize_label(r->label)) {
                best = i;
                break;
            }
            const double s = word_jaccard(list[i], r->label);
            if (s > best_score) best_score = s, best = i;
        }
        if (best) picked.insert(*best);
    }
    json out = json::array();
    for (auto i : picked) out.push_back(list[i]);
    return json{{"errors", out}}.dump();
}

inline std::string summarize_reply(const std::string& user) {
    const auto list =
        json::parse(between(user, "The error list is: ", "\n\nNow follow")).get<std::vector<std::string>>();
    if (list.empty()) throw ConfigError("mock: empty error list");
    std::map<std::string, std::size_t> count;
    for (const auto& e : list) ++count[errors::normalize_label(e)];
    std::size_t best = 0;
    for (std::size_t i = 1; i < list.size(); ++i)
        if (count[errors::normalize_label(list[i])] > count[errors::normalize_label(list[best])]) best = i;
    return json{{"Reasoning", "Most entries describe the same underlying mistake."},
                {"Representative_error", list[best]}}
        .dump();
}

inline json choice_json(const std::string& content, bool with_logprobs, std::size_t index) {
    json ch = {{"index", index}, {"message", {{"role", "assistant"}, {"content", content}}}, {"finish_reason", "stop"}};
    if (with_logprobs) {
        json toks = json::array();
        const auto words = py_split(content);
        for (std::size_t i = 0; i < words.size(); ++i)
            toks.push_back({{"token", words[i]}, {"logprob", -0.05 * static_cast<double>(1 + (i % 5))}});
        ch["logprobs"] = {{"content", toks}};
    } else {
        ch["logprobs"] = nullptr;
    }
    return ch;
}

inline json completion_body(const std::string& model, std::vector<json> choices) {
    return {{"id", "mock"}, {"object", "chat.completion"}, {"model", model}, {"choices", choices}};
}

// ---------------------------------------------------------------------------
// Server
// ---------------------------------------------------------------------------

class MockServer {
public:
    explicit MockServer(MockConfig cfg) : cfg_(std::move(cfg)) { install(); }
    MockServer(const MockServer&) = delete;
    MockServer& operator=(const MockServer&) = delete;
    ~MockServer() { stop(); }

    /// Binds 127.0.0.1:port (0 picks a free port) and serves in a thread.
    int start(int port = 0, const std::string& host = "127.0.0.1") {
        port_ = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
        if (port_ < 0) throw TransportError("mock server: cannot bind " + host + ":" + std::to_string(port));
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
        return port_;
    }

    /// Serves on the calling thread until stop().
    void run(int port, const std::string& host = "127.0.0.1") {
        if (!server_.bind_to_port(host, port))
            throw TransportError("mock server: cannot bind " + host + ":" + std::to_string(port));
        port_ = port;
        server_.listen_after_bind();
    }

    void stop() {
        server_.stop();
        if (thread_.joinable()) thread_.join();
    }

    int port() const { return port_; }
    std::string url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1"; }

    std::size_t chat_requests() const { return chat_count_.load(); }
    std::size_t embedding_requests() const { return embed_count_.load(); }
    std::vector<std::string> request_log() const {
        std::lock_guard lock(mu_);
        return log_;
    }

    /// Response body for a chat request body (used by the HTTP handler and
    /// by tests that bypass the socket).
    std::string respond_chat(const std::string& body_text) {
        const json body = json::parse(body_text);
        const std::string hash = sha256_hex(body.dump());
        if (auto it = cfg_.fixtures.find(hash); it != cfg_.fixtures.end()) return it->second;
        const std::string model = body.value("model", "mock");
        const auto& msgs = body.at("messages");
        std::string system, user;
        for (const json& m : msgs) {
            const std::string role = m.at("role").get<std::string>();
            if (role == "system") system = m.at("content").get<std::string>();
            if (role == "user") user = m.at("content").get<std::string>();
        }
        const Role role = route(system);
        const std::size_t n = body.value("n", 1);
        bool malformed = false;
        {
            std::lock_guard lock(mu_);
            malformed = attempts_[hash]++ < cfg_.malformed_first;
        }
        if (malformed) {
            if (role == Role::simulate) return completion_body(model, {}).dump();
            return completion_body(model, {choice_json("Sure! Here is my answer: {not json", false, 0)}).dump();
        }
        std::vector<json> choices;
        switch (role) {
            case Role::annotate: choices.push_back(choice_json(annotate_reply(cfg_, user), false, 0)); break;
            case Role::judge: choices.push_back(choice_json(judge_reply(cfg_, user), false, 0)); break;
            case Role::summarize: choices.push_back(choice_json(summarize_reply(user), false, 0)); break;
            case Role::simulate: {
                const bool lp = body.value("logprobs", false) && cfg_.logprobs;
                std::vector<std::string> pool{"return 0;"};
                const std::string statement = user.rfind("Problem:\n", 0) == 0
                                                  ? between(user, "Problem:\n", "\n\nStudent information:")
                                                  : user;
                if (auto it = cfg_.simulate.find(statement); it != cfg_.simulate.end() && !it->second.empty())
                    pool = it->second;
                Rng rng(fnv1a64(hash));
                for (std::size_t i = 0; i < n; ++i) {
                    const std::string content = cfg_.refuse ? "I'm sorry, but I can't help with that."
                                                            : "```\n" + pool[uniform_index(rng, pool.size())] + "\n```";
                    choices.push_back(choice_json(content, lp, i));
                }
                break;
            }
            case Role::unknown: throw ConfigError("mock: unrecognized system prompt");
        }
        return completion_body(model, std::move(choices)).dump();
    }

    std::string respond_embeddings(const std::string& body_text) const {
        const json body = json::parse(body_text);
        const json& input = body.at("input");
        std::vector<std::string> texts =
            input.is_string() ? std::vector<std::string>{input.get<std::string>()} : input.get<std::vector<std::string>>();
        json data = json::array();
        for (std::size_t i = 0; i < texts.size(); ++i)
            data.push_back({{"object", "embedding"}, {"index", i}, {"embedding", hashed_embedding(texts[i], cfg_.embedding_dim)}});
        return json{{"object", "list"}, {"data", data}, {"model", body.value("model", "mock")}}.dump();
    }

private:
    void install() {
        auto chat = [this](const httplib::Request& req, httplib::Response& res) {
            ++chat_count_;
            {
                std::lock_guard lock(mu_);
                log_.push_back(req.body);
            }
            try {
                res.set_content(respond_chat(req.body), "application/json");
            } catch (const std::exception& e) {
                res.status = 400;
                res.set_content(json{{"error", {{"message", e.what()}}}}.dump(), "application/json");
            }
        };
        auto embed = [this](const httplib::Request& req, httplib::Response& res) {
            ++embed_count_;
            try {
                res.set_content(respond_embeddings(req.body), "application/json");
            } catch (const std::exception& e) {
                res.status = 400;
                res.set_content(json{{"error", {{"message", e.what()}}}}.dump(), "application/json");
            }
        };
        server_.Post("/v1/chat/completions", chat);
        server_.Post("/chat/completions", chat);
        server_.Post("/v1/embeddings", embed);
        server_.Post("/embeddings", embed);
    }

    MockConfig cfg_;
    httplib::Server server_;
    std::thread thread_;
    int port_ = -1;
    std::atomic<std::size_t> chat_count_{0}, embed_count_{0};
    mutable std::mutex mu_;
    std::map<std::string, int> attempts_;
    std::vector<std::string> log_;
};

}  // namespace kaser::mock
