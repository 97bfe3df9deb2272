#pragma once

// Shared fixtures for the unit and acceptance tests.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <random>
#include <string>
#include <vector>

#include "kaser/clustering.hpp"
#include "kaser/eval.hpp"
#include "kaser/grpo.hpp"
#include "kaser/mock_server.hpp"
#include "kaser/pipeline.hpp"

namespace kt {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

inline fs::path source_dir() { return KASER_SOURCE_DIR; }
inline fs::path test_data() { return KASER_TEST_DATA; }
inline fs::path toy_dir() { return source_dir() / "data" / "toy"; }

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag = "kaser") {
        static std::atomic<int> counter{0};
        std::random_device rd;
        path_ = fs::temp_directory_path() /
                (tag + "-" + std::to_string(rd()) + "-" + std::to_string(counter++));
        fs::create_directories(path_);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    const fs::path& path() const { return path_; }
    fs::path operator/(const std::string& s) const { return path_ / s; }

private:
    fs::path path_;
};

/// Chat client driven by a callback; records every request.
class ScriptedChat final : public kaser::llm::ChatClient {
public:
    using Fn = std::function<std::vector<kaser::llm::ChatChoice>(const kaser::llm::ChatRequest&, int call)>;

    explicit ScriptedChat(Fn fn, kaser::llm::EndpointConfig cfg = {}) : fn_(std::move(fn)), cfg_(std::move(cfg)) {}

    std::vector<kaser::llm::ChatChoice> chat(const kaser::llm::ChatRequest& req) override {
        int call;
        {
            std::lock_guard lock(mu_);
            seen_.push_back(req);
            call = calls_++;
        }
        return fn_(req, call);
    }
    const kaser::llm::EndpointConfig& config() const override { return cfg_; }

    std::vector<kaser::llm::ChatRequest> seen() const {
        std::lock_guard lock(mu_);
        return seen_;
    }
    int calls() const {
        std::lock_guard lock(mu_);
        return calls_;
    }

private:
    Fn fn_;
    kaser::llm::EndpointConfig cfg_;
    mutable std::mutex mu_;
    std::vector<kaser::llm::ChatRequest> seen_;
    int calls_ = 0;
};

inline std::vector<kaser::llm::ChatChoice> reply(const std::string& content) { return {{content, std::nullopt, "stop"}}; }

/// The mock server's responder called in-process, without a socket.
class InProcessMock final : public kaser::llm::ChatClient, public kaser::llm::EmbeddingClient {
public:
    explicit InProcessMock(kaser::mock::MockConfig cfg, kaser::llm::EndpointConfig ep = {})
        : server_(std::move(cfg)), ep_(std::move(ep)) {}

    std::vector<kaser::llm::ChatChoice> chat(const kaser::llm::ChatRequest& req) override {
        const json body = json::parse(server_.respond_chat(req.body(ep_.model).dump()));
        std::vector<kaser::llm::ChatChoice> out;
        for (const json& c : body.at("choices")) {
            kaser::llm::ChatChoice ch;
            ch.content = c.at("message").at("content").get<std::string>();
            if (c.contains("logprobs") && c.at("logprobs").is_object()) {
                std::vector<kaser::llm::TokenLogprob> lp;
                for (const json& t : c.at("logprobs").at("content"))
                    lp.push_back({t.at("token").get<std::string>(), t.at("logprob").get<double>()});
                ch.logprobs = std::move(lp);
            }
            out.push_back(std::move(ch));
        }
        return out;
    }
    std::vector<std::vector<double>> embed(const std::vector<std::string>& texts) override {
        const json body = json::parse(server_.respond_embeddings(json{{"model", ep_.model}, {"input", texts}}.dump()));
        std::vector<std::vector<double>> out;
        for (const json& d : body.at("data")) out.push_back(d.at("embedding").get<std::vector<double>>());
        return out;
    }
    const kaser::llm::EndpointConfig& config() const override { return ep_; }
    kaser::mock::MockServer& server() { return server_; }

private:
    kaser::mock::MockServer server_;
    kaser::llm::EndpointConfig ep_;
};

inline kaser::mock::MockConfig toy_mock_config() {
    return kaser::mock::load_mock_config(toy_dir() / "mock_rules.json");
}

/// |a - b| / max(|a|, |b|, floor)
inline double rel_err(double a, double b, double floor = 1e-6) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// O(n^3) agglomeration: every step recomputes all pairwise cluster distances
/// from the original points (mean / max / min of member distances). Ties go to
/// the pair with the lowest (min leaf, min leaf).
inline std::vector<kaser::clustering::Merge> brute_hac(const std::vector<std::vector<double>>& pts,
                                                      kaser::clustering::Linkage link) {
    using kaser::clustering::Linkage;
    const std::size_t n = pts.size();
    std::vector<std::vector<double>> d(n, std::vector<double>(n));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double uv = 0, uu = 0, vv = 0;
            for (std::size_t t = 0; t < pts[i].size(); ++t) {
                uv += pts[i][t] * pts[j][t];
                uu += pts[i][t] * pts[i][t];
                vv += pts[j][t] * pts[j][t];
            }
            d[i][j] = 1.0 - std::clamp(uv / (std::sqrt(uu) * std::sqrt(vv)), -1.0, 1.0);
        }
    struct Cl {
        std::size_t id;
        std::vector<std::size_t> leaves;
    };
    std::vector<Cl> cls;
    for (std::size_t i = 0; i < n; ++i) cls.push_back({i, {i}});
    auto dist = [&](const Cl& a, const Cl& b) {
        double s = 0, mx = -1, mn = 1e300;
        for (auto i : a.leaves)
            for (auto j : b.leaves) {
                s += d[i][j];
                mx = std::max(mx, d[i][j]);
                mn = std::min(mn, d[i][j]);
            }
        if (link == Linkage::average) return s / static_cast<double>(a.leaves.size() * b.leaves.size());
        return link == Linkage::complete ? mx : mn;
    };
    auto min_leaf = [](const Cl& c) { return *std::min_element(c.leaves.begin(), c.leaves.end()); };
    std::vector<kaser::clustering::Merge> out;
    for (std::size_t step = 0; step + 1 < n; ++step) {
        std::size_t bi = 0, bj = 0;
        double best = 1e300;
        std::pair<std::size_t, std::size_t> best_key{SIZE_MAX, SIZE_MAX};
        for (std::size_t i = 0; i < cls.size(); ++i)
            for (std::size_t j = i + 1; j < cls.size(); ++j) {
                const double v = dist(cls[i], cls[j]);
                const std::pair<std::size_t, std::size_t> key = std::minmax(min_leaf(cls[i]), min_leaf(cls[j]));
                if (v < best || (v == best && key < best_key)) {
                    best = v;
                    best_key = key;
                    bi = i;
                    bj = j;
                }
            }
        Cl merged{n + step, cls[bi].leaves};
        merged.leaves.insert(merged.leaves.end(), cls[bj].leaves.begin(), cls[bj].leaves.end());
        out.push_back({std::min(cls[bi].id, cls[bj].id), std::max(cls[bi].id, cls[bj].id), best, merged.leaves.size()});
        cls.erase(cls.begin() + static_cast<std::ptrdiff_t>(bj));
        cls.erase(cls.begin() + static_cast<std::ptrdiff_t>(bi));
        cls.push_back(std::move(merged));
    }
    return out;
}

/// True when the merge sequences agree (ids and sizes exactly, heights within tol).
inline bool same_merges(const std::vector<kaser::clustering::Merge>& a, const std::vector<kaser::clustering::Merge>& b,
                        double tol = 1e-9) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i].a != b[i].a || a[i].b != b[i].b || a[i].size != b[i].size ||
            std::abs(a[i].distance - b[i].distance) > tol)
            return false;
    return true;
}

/// Synthetic response corpus where mastery of K1 alone decides correctness.
/// Each student masters K1 with probability 1/2 and attempts `steps` distinct
/// problems; every problem is tagged K1 plus zero or one distractor KC.
inline kaser::corpus::Dataset planted_ke_corpus(int students, int steps, std::uint64_t seed) {
    std::mt19937_64 g(seed);
    json kcs = json::array(), probs = json::array();
    for (int k = 1; k <= 3; ++k) kcs.push_back({{"id", "K" + std::to_string(k)}, {"name", "skill " + std::to_string(k)}});
    const int n_problems = std::max(steps, 6);
    for (int p = 0; p < n_problems; ++p) {
        std::vector<std::string> tags{"K1"};
        if (p % 3) tags.push_back("K" + std::to_string(1 + p % 3));
        probs.push_back({{"id", "P" + std::to_string(p)},
                         {"statement", "problem " + std::to_string(p)},
                         {"language", "java"},
                         {"kc_ids", tags}});
    }
    std::string text = json{{"kcs", kcs}, {"problems", probs}}.dump() + "\n";
    std::vector<int> order(static_cast<std::size_t>(n_problems));
    for (int p = 0; p < n_problems; ++p) order[static_cast<std::size_t>(p)] = p;
    for (int s = 0; s < students; ++s) {
        const bool knows = g() % 2 == 0;
        std::shuffle(order.begin(), order.end(), g);
        for (int t = 0; t < steps; ++t) {
            json sub = {{"student_id", "S" + std::to_string(1000 + s)},
                        {"problem_id", "P" + std::to_string(order[static_cast<std::size_t>(t)])},
                        {"order_index", t},
                        {"code", "int x;"},
                        {"correct", knows ? 1 : 0}};
            sub["errors"] = knows ? json::array() : json::array({"E1"});
            text += sub.dump() + "\n";
        }
    }
    return kaser::corpus::parse_dataset(text);
}

// ---------------------------------------------------------------------------
// Planted toy task: one prompt, one slot with four candidate expressions.
// Only the first candidate carries the truth's error set (and is the truth).
// ---------------------------------------------------------------------------

struct Planted {
    kaser::corpus::Problem problem;
    std::vector<kaser::corpus::KnowledgeComponent> kcs;
    kaser::policy::ToyTask task;
    kaser::policy::Prompt prompt;
    std::string truth_code;
    kaser::errors::ErrorSet truth_errors;
    std::map<std::string, kaser::errors::ErrorSet> verdicts;  // rendered code -> judged errors
    std::size_t optimum = 0;                                  // vocabulary id of the planted candidate

    kaser::grpo::Judge judge() const {
        return [this](const std::string& code, const kaser::corpus::Problem&) { return verdicts.at(code); };
    }
    kaser::grpo::TrainItem item() const { return {prompt, &problem, truth_code, truth_errors}; }
};

inline Planted planted_task() {
    using namespace kaser;
    Planted p;
    p.kcs = {{"K1", "Conditional logic"}};
    p.problem = {"PL", "Return true when x equals y.", Language::java, {"K1"}};
    const std::string tpl = "public boolean same(int x, int y) {\n    return <<0>>;\n}";
    const std::vector<std::string> opts = {"x = y", "x == y", "x != y", "x >= y"};
    p.task = policy::ToyTask(Language::java, {{"PL", {tpl, {opts}}}});
    p.prompt = policy::build_knowledge_prompt(p.problem, {{"K1", 0.3}}, p.kcs);
    const std::vector<errors::ErrorSet> sets = {{"E1"}, {}, {"E2"}, {"E2", "E3"}};
    for (std::size_t i = 0; i < opts.size(); ++i) p.verdicts[p.task.render("PL", {p.task.token_id(opts[i])})] = sets[i];
    p.optimum = p.task.token_id(opts[0]);
    p.truth_code = p.task.render("PL", {p.optimum});
    p.truth_errors = sets[0];
    return p;
}

/// Probability of token `tok` in slot 0 of the prompt's row.
inline double slot_probability(const kaser::policy::ToyPolicy& pol, const kaser::policy::ToyPolicyParams& theta,
                               const kaser::policy::Prompt& p, std::size_t tok) {
    const auto row = pol.row(theta, p, 0);
    return row.probs()[row.position(tok)];
}

/// Random logits for every row the prompt touches.
inline kaser::policy::ToyPolicyParams random_params(const kaser::policy::ToyPolicy& pol,
                                                    const kaser::policy::Prompt& p, kaser::Rng& rng,
                                                    double scale = 1.0) {
    auto theta = pol.init();
    pol.touch(theta, p);
    for (auto& [k, row] : theta.rows)
        for (double& l : row.logits) l = scale * kaser::standard_normal(rng);
    return theta;
}

/// Two slots of three options each; used for gradient checks.
inline kaser::policy::ToyTask two_slot_task() {
    return kaser::policy::ToyTask(kaser::Language::java,
                                  {{"PL", {"return <<0>> <<1>> y;", {{"x", "a", "b"}, {"==", "=", "!="}}}}});
}

// ---------------------------------------------------------------------------
// Evaluation fixtures over the bundled toy dataset.
// ---------------------------------------------------------------------------

/// Error labels as a pure function of the code text.
inline kaser::errors::ErrorSet code_labels(const std::string& code) {
    const std::size_t h = std::hash<std::string>{}(code);
    if (h % 5 == 0) return {};
    kaser::errors::ErrorSet s{"E" + std::to_string(1 + h % 4)};
    if (h % 3 == 0) s.insert("E" + std::to_string(1 + (h / 7) % 4));
    return s;
}

/// code_labels, except that code submitted as correct anywhere has no errors.
inline kaser::errors::ErrorSet toy_labels(const kaser::corpus::Dataset& d, const std::string& code) {
    for (const auto& s : d.submissions())
        if (s.correct && s.code == code) return {};
    return code_labels(code);
}

/// The toy dataset annotated with toy_labels.
inline kaser::corpus::Dataset annotated_toy() {
    const auto d = kaser::corpus::load_dataset(toy_dir() / "dataset.jsonl");
    std::vector<std::optional<std::vector<std::string>>> errs;
    for (const auto& s : d.submissions()) {
        const auto e = toy_labels(d, s.code);
        errs.emplace_back(std::vector<std::string>(e.begin(), e.end()));
    }
    return d.with_errors(errs);
}

/// Judge that agrees with the annotation of `d` (which must outlive it).
inline kaser::grpo::Judge code_judge(const kaser::corpus::Dataset& d) {
    return [&d](const std::string& code, const kaser::corpus::Problem&) { return toy_labels(d, code); };
}

inline kaser::grpo::Judge code_judge() {
    return [](const std::string& code, const kaser::corpus::Problem&) { return code_labels(code); };
}

/// Every submission predicted by `copies` copies of its own code.
inline kaser::eval::Predictions ceiling_predictions(const kaser::corpus::Dataset& d, std::size_t copies) {
    kaser::eval::Predictions p;
    for (const auto& s : d.submissions()) p[{s.student_id, s.problem_id}] = std::vector<std::string>(copies, s.code);
    return p;
}

/// The bundled toy config, merge-patched, with its output redirected to `out`.
inline kaser::pipeline::RunConfig toy_run_config(const fs::path& out, const json& patch = json::object()) {
    json j = json::parse(kaser::read_file(toy_dir() / "config.json"));
    j.merge_patch(patch);
    j["out"] = out.string();
    return kaser::pipeline::parse_run_config(j, toy_dir());
}

/// Runs the whole toy pipeline against a mock server on an ephemeral port.
inline kaser::pipeline::PipelineResult run_toy_pipeline(kaser::pipeline::RunConfig cfg) {
    kaser::mock::MockServer server(kaser::mock::load_mock_config(cfg.resolve(cfg.mock)));
    server.start();
    cfg.endpoints.set_url(server.url());
    auto clients = kaser::pipeline::Clients::http(cfg.endpoints);
    return kaser::pipeline::run_pipeline(cfg, clients);
}

/// sha256 of every regular file under `dir`, keyed by relative path, skipping manifest.json.
inline std::map<std::string, std::string> tree_digest(const fs::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        const auto rel = fs::relative(e.path(), dir).generic_string();
        if (rel == "manifest.json") continue;
        out[rel] = kaser::sha256_hex(kaser::read_file(e.path()));
    }
    return out;
}

struct FdOutcome {
    double max_rel_err = 0;
    std::size_t checked = 0;
};

/// One random configuration: theta near a random theta_old, random reference,
/// random G, rewards, beta and ratio mode. Compares the analytic gradient of
/// surrogate - beta * KL with central differences of the objective.
inline FdOutcome objective_fd_check(std::mt19937_64& g, double step = 1e-5, double floor = 1e-6) {
    using namespace kaser;
    static const policy::ToyTask task = two_slot_task();
    const policy::ToyPolicy pol(task);
    const Planted pl = planted_task();
    policy::Prompt prompt = pl.prompt;
    std::uniform_real_distribution<double> U(0.0, 1.0);
    Rng rng(g());
    const auto old = random_params(pol, prompt, rng, 1.0);
    const auto ref = random_params(pol, prompt, rng, 1.0);
    auto theta = old;
    for (auto& [k, row] : theta.rows)
        for (double& l : row.logits) l += 0.3 * standard_normal(rng);
    const std::size_t G = 2 + g() % 5;
    const auto cands = pol.sample(old, prompt, G, g());
    grpo::TokenMatrix l_old, l_ref = grpo::token_logprobs(pol, ref, prompt, cands);
    for (const auto& c : cands) l_old.push_back(c.logprobs);
    std::vector<double> r(G);
    for (double& v : r) v = 3.0 * U(g);
    const auto adv = grpo::normalize_advantages(r);
    const double beta = U(g);
    const auto mode = g() % 2 ? grpo::RatioMode::token : grpo::RatioMode::sequence;
    const double eps = 0.2;
    auto objective = [&](const policy::ToyPolicyParams& t) {
        return grpo::group_objective(pol, t, prompt, cands, l_old, l_ref, adv, eps, beta, mode).objective;
    };
    const auto an = grpo::group_objective(pol, theta, prompt, cands, l_old, l_ref, adv, eps, beta, mode);
    FdOutcome out;
    for (auto& [key, row] : theta.rows)
        for (std::size_t i = 0; i < row.logits.size(); ++i) {
            const double keep = row.logits[i];
            row.logits[i] = keep + step;
            const double up = objective(theta);
            row.logits[i] = keep - step;
            const double down = objective(theta);
            row.logits[i] = keep;
            const double fd = (up - down) / (2 * step);
            const auto it = an.grad.find(key);
            const double a = it == an.grad.end() ? 0.0 : it->second[i];
            out.max_rel_err = std::max(out.max_rel_err, rel_err(fd, a, floor));
            ++out.checked;
        }
    return out;
}

}  // namespace kt
