#pragma once

// Minimal OpenAI-compatible client: chat completions (with optional token
// logprobs) and embeddings. One HTTP connection per call, so a client object
// can be shared across worker threads.

#include <chrono>
#include <cstdlib>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "kaser/common.hpp"

namespace kaser::llm {

using json = nlohmann::ordered_json;

struct EndpointConfig {
    /// Base URL including the API prefix, e.g. "http://127.0.0.1:8089/v1".
    std::string url = "http://127.0.0.1:8089/v1";
    std::string model = "mock";
    /// Name of an environment variable holding a bearer token; empty = none.
    std::string api_key_env;
    double timeout_s = 60;
    int retries = 3;
    int max_parallel = 4;

    void validate() const {
        if (url.empty()) throw ConfigError("endpoint url is empty");
        if (max_parallel < 1) throw ConfigError("endpoint max_parallel must be >= 1");
        if (retries < 0) throw ConfigError("endpoint retries must be >= 0");
        if (!(timeout_s > 0)) throw ConfigError("endpoint timeout must be positive");
    }
};

inline void to_json(json& j, const EndpointConfig& c) {
    j = {{"url", c.url},
         {"model", c.model},
         {"api_key_env", c.api_key_env},
         {"timeout_s", c.timeout_s},
         {"retries", c.retries},
         {"max_parallel", c.max_parallel}};
}
inline void from_json(const json& j, EndpointConfig& c) {
    c.url = j.value("url", c.url);
    c.model = j.value("model", c.model);
    c.api_key_env = j.value("api_key_env", c.api_key_env);
    c.timeout_s = j.value("timeout_s", c.timeout_s);
    c.retries = j.value("retries", c.retries);
    c.max_parallel = j.value("max_parallel", c.max_parallel);
}

struct ChatMessage {
    std::string role;
    std::string content;
};

struct ChatRequest {
    std::vector<ChatMessage> messages;
    int n = 1;
    std::optional<double> temperature;
    std::optional<double> top_p;
    std::optional<int> top_k;
    std::optional<int> max_tokens;
    bool logprobs = false;
    std::optional<std::uint64_t> seed;

    json body(const std::string& model) const {
        json msgs = json::array();
        for (const auto& m : messages) msgs.push_back({{"role", m.role}, {"content", m.content}});
        json j = {{"model", model}, {"messages", std::move(msgs)}};
        if (n != 1) j["n"] = n;
        if (temperature) j["temperature"] = *temperature;
        if (top_p) j["top_p"] = *top_p;
        if (top_k) j["top_k"] = *top_k;
        if (max_tokens) j["max_tokens"] = *max_tokens;
        if (logprobs) j["logprobs"] = true;
        if (seed) j["seed"] = *seed;
        return j;
    }
};

struct TokenLogprob {
    std::string token;
    double logprob = 0;
};

struct ChatChoice {
    std::string content;
    /// Present only when requested and returned by the endpoint.
    std::optional<std::vector<TokenLogprob>> logprobs;
    std::string finish_reason;
};

/// Stable identity of a request (model + body), used for caching and audit.
inline std::string request_hash(const std::string& model, const ChatRequest& req) {
    return sha256_hex(req.body(model).dump());
}

class ChatClient {
public:
    virtual ~ChatClient() = default;
    /// One attempt; throws TransportError on network or protocol failure.
    virtual std::vector<ChatChoice> chat(const ChatRequest& req) = 0;
    virtual const EndpointConfig& config() const = 0;
};

class EmbeddingClient {
public:
    virtual ~EmbeddingClient() = default;
    virtual std::vector<std::vector<double>> embed(const std::vector<std::string>& texts) = 0;
    virtual const EndpointConfig& config() const = 0;
};

namespace detail {

struct ParsedUrl {
    std::string origin;  // scheme://host[:port]
    std::string prefix;  // path without trailing slash
};

inline ParsedUrl parse_url(const std::string& url) {
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) throw ConfigError("endpoint url needs a scheme: " + url);
    const auto path_start = url.find('/', scheme_end + 3);
    ParsedUrl p;
    p.origin = url.substr(0, path_start);
    p.prefix = path_start == std::string::npos ? "" : url.substr(path_start);
    while (!p.prefix.empty() && p.prefix.back() == '/') p.prefix.pop_back();
    return p;
}

inline json post_json(const EndpointConfig& cfg, const std::string& route, const json& body) {
    const ParsedUrl u = parse_url(cfg.url);
    httplib::Client cli(u.origin);
    const auto timeout = std::chrono::duration<double>(cfg.timeout_s);
    cli.set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
    cli.set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
    cli.set_write_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
    httplib::Headers headers;
    if (!cfg.api_key_env.empty()) {
        const char* key = std::getenv(cfg.api_key_env.c_str());
        if (!key || !*key) throw ConfigError("environment variable " + cfg.api_key_env + " is not set");
        headers.emplace("Authorization", std::string("Bearer ") + key);
    }
    auto res = cli.Post(u.prefix + route, headers, body.dump(), "application/json");
    if (!res) throw TransportError(cfg.url + route + ": " + httplib::to_string(res.error()));
    if (res->status != 200)
        throw TransportError(cfg.url + route + ": HTTP " + std::to_string(res->status) + ": " +
                             res->body.substr(0, 200));
    try {
        return json::parse(res->body);
    } catch (const json::parse_error&) {
        throw TransportError(cfg.url + route + ": response body is not JSON");
    }
}

}  // namespace detail

class HttpChatClient final : public ChatClient {
public:
    explicit HttpChatClient(EndpointConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

    std::vector<ChatChoice> chat(const ChatRequest& req) override {
        const json reply = detail::post_json(cfg_, "/chat/completions", req.body(cfg_.model));
        std::vector<ChatChoice> out;
        try {
            for (const json& c : reply.at("choices")) {
                ChatChoice choice;
                const json& msg = c.at("message");
                choice.content = msg.at("content").is_null() ? "" : msg.at("content").get<std::string>();
                choice.finish_reason = c.value("finish_reason", "");
                if (auto lp = c.find("logprobs"); lp != c.end() && lp->is_object()) {
                    if (auto content = lp->find("content"); content != lp->end() && content->is_array()) {
                        std::vector<TokenLogprob> toks;
                        for (const json& t : *content)
                            toks.push_back({t.at("token").get<std::string>(), t.at("logprob").get<double>()});
                        choice.logprobs = std::move(toks);
                    }
                }
                out.push_back(std::move(choice));
            }
        } catch (const json::exception& e) {
            throw TransportError(cfg_.url + ": unexpected chat completion shape: " + e.what());
        }
        return out;
    }
    const EndpointConfig& config() const override { return cfg_; }

private:
    EndpointConfig cfg_;
};

class HttpEmbeddingClient final : public EmbeddingClient {
public:
    explicit HttpEmbeddingClient(EndpointConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

    std::vector<std::vector<double>> embed(const std::vector<std::string>& texts) override {
        const json reply = detail::post_json(cfg_, "/embeddings", {{"model", cfg_.model}, {"input", texts}});
        std::vector<std::vector<double>> out(texts.size());
        try {
            const json& data = reply.at("data");
            if (data.size() != texts.size()) throw TransportError(cfg_.url + ": embeddings count mismatch");
            for (std::size_t i = 0; i < data.size(); ++i) {
                const std::size_t idx = data[i].value("index", i);
                if (idx >= out.size()) throw TransportError(cfg_.url + ": embedding index out of range");
                out[idx] = data[i].at("embedding").get<std::vector<double>>();
            }
        } catch (const json::exception& e) {
            throw TransportError(cfg_.url + ": unexpected embeddings shape: " + e.what());
        }
        return out;
    }
    const EndpointConfig& config() const override { return cfg_; }

private:
    EndpointConfig cfg_;
};

/// Strips a surrounding Markdown code fence (```lang ... ```), if any.
inline std::string strip_code_fence(std::string_view text) {
    std::string_view s = py_strip(text);
    if (s.substr(0, 3) != "```") return std::string(s);
    const auto first_nl = s.find('\n');
    if (first_nl == std::string_view::npos) return std::string(s);
    std::string_view body = s.substr(first_nl + 1);
    const auto close = body.rfind("```");
    if (close != std::string_view::npos) body = body.substr(0, close);
    while (!body.empty() && (body.back() == '\n' || body.back() == '\r')) body.remove_suffix(1);
    return std::string(body);
}

/// Parses a JSON object out of an LLM reply: as-is first, then after removing
/// code fences and surrounding prose (text outside the outermost braces).
inline std::optional<json> parse_json_reply(std::string_view text) {
    auto attempt = [](std::string_view s) -> std::optional<json> {
        try {
            json j = json::parse(s);
            if (j.is_object()) return j;
        } catch (const json::parse_error&) {
        }
        return std::nullopt;
    };
    if (auto j = attempt(text)) return j;
    const std::string unfenced = strip_code_fence(text);
    if (auto j = attempt(unfenced)) return j;
    const auto b = unfenced.find('{');
    const auto e = unfenced.rfind('}');
    if (b != std::string::npos && e != std::string::npos && e > b) return attempt(std::string_view(unfenced).substr(b, e - b + 1));
    return std::nullopt;
}

}  // namespace kaser::llm
