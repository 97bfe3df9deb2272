#pragma once

// Run configuration and the staged pipeline: annotate -> cluster -> per-fold
// knowledge estimator -> toy SFT -> toy GRPO -> generation -> evaluation.
// Every stage writes into a directory named by the hash of its parameters
// and input contents; out/manifest.json records what has been produced.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "kaser/clustering.hpp"
#include "kaser/common.hpp"
#include "kaser/corpus.hpp"
#include "kaser/errors.hpp"
#include "kaser/eval.hpp"
#include "kaser/grpo.hpp"
#include "kaser/knowledge.hpp"
#include "kaser/llm.hpp"
#include "kaser/policy.hpp"

namespace kaser::pipeline {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

inline constexpr int config_schema_version = 1;
inline constexpr std::string_view version = "0.1.0";

inline std::uint64_t derive_seed(std::uint64_t base, std::string_view tag) {
    return fnv1a64(tag, fnv1a64(std::to_string(base)));
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct Endpoints {
    llm::EndpointConfig annotator, summarizer, judge, eval_judge, embeddings, generator;

    void set_url(const std::string& url) {
        for (auto* e : {&annotator, &summarizer, &judge, &eval_judge, &embeddings, &generator}) e->url = url;
    }
};

struct RunConfig {
    fs::path base_dir;  // relative paths resolve against this
    fs::path dataset;
    fs::path out = "out";
    std::uint64_t seed = 0;
    int folds = 5;
    double val_ratio = 0.1;
    double test_ratio = 0.1;
    std::vector<eval::Level> levels{eval::Level::pair};
    Endpoints endpoints;
    std::optional<std::size_t> k_c;
    clustering::Linkage linkage = clustering::Linkage::average;
    knowledge::KeHyper ke;
    std::string generator = "toy";  // toy | remote
    fs::path toy_task;
    fs::path mock;  // rules for the in-process mock services
    policy::SftConfig sft;
    grpo::GrpoConfig grpo;
    policy::DecodeParams decode;
    eval::EvalConfig eval;
    std::string run_id = "run0";
    json raw;  // as loaded, for hashing

    fs::path resolve(const fs::path& p) const { return p.empty() || p.is_absolute() ? p : base_dir / p; }

    void validate() const {
        if (!fs::exists(resolve(dataset))) throw ConfigError("dataset not found: " + resolve(dataset).string());
        if (generator != "toy" && generator != "remote") throw ConfigError("generator must be 'toy' or 'remote'");
        if (generator == "toy" && !fs::exists(resolve(toy_task)))
            throw ConfigError("toy task not found: " + resolve(toy_task).string());
        if (!mock.empty() && !fs::exists(resolve(mock))) throw ConfigError("mock rules not found: " + resolve(mock).string());
        if (levels.empty()) throw ConfigError("at least one evaluation level required");
        if (k_c && *k_c < 1) throw ConfigError("k_c must be >= 1");
        grpo.validate();
        eval.validate();
        for (const auto* e : {&endpoints.annotator, &endpoints.summarizer, &endpoints.judge, &endpoints.eval_judge,
                              &endpoints.embeddings, &endpoints.generator})
            e->validate();
    }

    corpus::SplitPlan plan(corpus::SplitAxis axis) const {
        return {axis, folds, val_ratio, test_ratio, derive_seed(seed, "split")};
    }
};

inline RunConfig parse_run_config(const json& j, const fs::path& base_dir = {}) {
    RunConfig c;
    c.raw = j;
    c.base_dir = base_dir;
    try {
        const int v = j.value("schema_version", config_schema_version);
        if (v != config_schema_version)
            throw ConfigError("config schema_version " + std::to_string(v) + " is not supported (expected " +
                              std::to_string(config_schema_version) + ")");
        static const std::set<std::string> known{"schema_version", "dataset", "out",   "seed",      "split",
                                                 "levels",         "endpoints", "clustering", "ke", "generator",
                                                 "toy_task",       "mock",    "sft",   "grpo",      "decode",
                                                 "eval",           "run_id"};
        for (const auto& [k, _] : j.items())
            if (!known.count(k)) throw ConfigError("config: unknown key '" + k + "'");
        c.dataset = j.at("dataset").get<std::string>();
        c.out = j.value("out", c.out.string());
        c.seed = j.value("seed", c.seed);
        if (j.contains("split")) {
            const json& s = j.at("split");
            c.folds = s.value("folds", c.folds);
            c.val_ratio = s.value("val_ratio", c.val_ratio);
            c.test_ratio = s.value("test_ratio", c.test_ratio);
        }
        if (j.contains("levels")) {
            c.levels.clear();
            for (const auto& l : j.at("levels")) c.levels.push_back(eval::parse_level(l.get<std::string>()));
        }
        if (j.contains("endpoints")) {
            const json& e = j.at("endpoints");
            llm::EndpointConfig def = e.value("default", json::object()).get<llm::EndpointConfig>();
            auto role = [&](const char* name) {
                json merged;
                to_json(merged, def);
                if (e.contains(name)) merged.update(e.at(name));
                return merged.get<llm::EndpointConfig>();
            };
            c.endpoints = {role("annotator"), role("summarizer"), role("judge"),
                           role("eval_judge"), role("embeddings"), role("generator")};
        }
        if (j.contains("clustering")) {
            const json& cl = j.at("clustering");
            if (cl.contains("k_c")) c.k_c = cl.at("k_c").get<std::size_t>();
            c.linkage = clustering::parse_linkage(cl.value("linkage", std::string("average")));
        }
        if (j.contains("ke")) c.ke = j.at("ke").get<knowledge::KeHyper>();
        c.generator = j.value("generator", c.generator);
        c.toy_task = j.value("toy_task", std::string());
        c.mock = j.value("mock", std::string());
        if (j.contains("sft")) c.sft = j.at("sft").get<policy::SftConfig>();
        if (j.contains("grpo")) c.grpo = j.at("grpo").get<grpo::GrpoConfig>();
        if (j.contains("decode")) c.decode = j.at("decode").get<policy::DecodeParams>();
        if (j.contains("eval")) c.eval = j.at("eval").get<eval::EvalConfig>();
        c.run_id = j.value("run_id", c.run_id);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    return c;
}

inline RunConfig load_run_config(const fs::path& path) {
    if (!fs::exists(path)) throw NotFoundError("config file not found: " + path.string());
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return parse_run_config(j, fs::absolute(path).parent_path());
}

/// Default number of error clusters per language.
inline std::size_t default_k_c(Language lang) { return lang == Language::java ? 50 : 60; }

// ---------------------------------------------------------------------------
// Stage functions
// ---------------------------------------------------------------------------

inline std::string file_sha(const fs::path& p) { return sha256_hex(read_file(p)); }

/// Labels the dataset; writes annotated.jsonl and audit.jsonl into dir.
inline errors::AnnotationOutcome run_annotate(const RunConfig& cfg, const corpus::Dataset& d, llm::ChatClient& client,
                                              const fs::path& dir, bool resume) {
    fs::create_directories(dir);
    errors::AnnotateOptions opt;
    opt.run_id = cfg.run_id;
    opt.resume = resume;
    opt.audit_path = dir / "audit.jsonl";
    auto outcome = errors::annotate_dataset(d, cfg.endpoints.annotator, client, opt);
    corpus::save_dataset(outcome.dataset, dir / "annotated.jsonl");
    return outcome;
}

/// The prompts an annotation run would send, one JSON request body per line.
inline std::string annotate_dry_run(const RunConfig& cfg, const corpus::Dataset& d) {
    std::string out;
    for (const auto& s : d.submissions())
        if (!s.correct)
            out += errors::annotation_request(d.problem(s.problem_id), s.code).body(cfg.endpoints.annotator.model).dump() +
                   "\n";
    return out;
}

struct ClusterOutput {
    clustering::ClusterSummary summary;
    corpus::Dataset dataset;
};

/// Clusters the unique raw labels of an annotated dataset; writes
/// catalog.json, clusters.json, embeddings.jsonl and dataset.jsonl.
inline ClusterOutput run_cluster(const RunConfig& cfg, const corpus::Dataset& annotated,
                                 const std::vector<errors::AnnotationRecord>& audit, llm::ChatClient& chat,
                                 llm::EmbeddingClient& embed, const fs::path& dir) {
    fs::create_directories(dir);
    std::map<std::string, std::map<errors::Category, std::size_t>> cats;
    for (const auto& r : audit)
        if (r.ok)
            for (const auto& e : r.parsed) ++cats[e.label][e.category];
    std::vector<std::string> labels;
    for (const auto& s : annotated.submissions())
        if (s.errors)
            for (const auto& l : *s.errors) labels.push_back(l);
    std::sort(labels.begin(), labels.end());
    labels.erase(std::unique(labels.begin(), labels.end()), labels.end());
    if (labels.empty()) throw ConfigError("cluster: the annotated dataset has no errors");
    std::size_t k = cfg.k_c.value_or(default_k_c(annotated.problems().front().language));
    if (k > labels.size()) {
        if (cfg.k_c)
            throw ConfigError("cluster: k_c = " + std::to_string(k) + " exceeds the " + std::to_string(labels.size()) +
                              " unique raw errors");
        k = labels.size();
    }
    std::vector<errors::Category> categories;
    for (const auto& l : labels) {
        errors::Category best = errors::Category::logical;
        std::size_t n = 0;
        for (const auto& [c, cnt] : cats[l])
            if (cnt > n) best = c, n = cnt;
        categories.push_back(best);
    }
    clustering::EmbeddingStore store(cfg.endpoints.embeddings.model);
    const auto points = store.embed(labels, &embed);
    store.save(dir / "embeddings.jsonl");
    const auto dg = clustering::hac(points, cfg.linkage);
    const auto assignment = clustering::cut(dg, k);
    ClusterOutput out{clustering::summarize_clusters(assignment, points, categories, cfg.endpoints.summarizer, chat),
                      corpus::Dataset{}};
    out.dataset = clustering::remap_dataset(annotated, out.summary.mapping);
    errors::save_catalog(out.summary.catalog, dir / "catalog.json");
    write_file_atomic(dir / "clusters.json", clustering::cluster_report(out.summary).dump(2) + "\n");
    corpus::save_dataset(out.dataset, dir / "dataset.jsonl");
    return out;
}

inline std::vector<knowledge::Sequence> role_sequences(const corpus::Dataset& d, const corpus::Fold& f,
                                                       corpus::Role role) {
    return knowledge::build_sequences(d, knowledge::catalog_kc_ids(d),
                                      [&](std::size_t i) { return f.role_of(d.submissions()[i]) == role; });
}

/// Trains the estimator on the fold's train units (val units for the
/// validation curve). Inputs are full histories; only losses are masked.
inline knowledge::TrainResult run_ke(const RunConfig& cfg, const corpus::Dataset& d, const corpus::Fold& f,
                                     const fs::path& dir) {
    fs::create_directories(dir);
    knowledge::KeHyper hp = cfg.ke;
    hp.seed = derive_seed(cfg.seed, "ke/" + std::string(corpus::to_string(f.axis)) + "/" + std::to_string(f.index));
    auto r = knowledge::train_ke(role_sequences(d, f, corpus::Role::train), role_sequences(d, f, corpus::Role::val),
                                 knowledge::catalog_kc_ids(d), hp);
    json meta = {{"hyper", hp}, {"fold", f.index}, {"axis", corpus::to_string(f.axis)}};
    write_file_atomic(dir / "ke.json", knowledge::to_json(r.params, meta).dump() + "\n");
    std::string curve = "epoch,train_loss,val_loss\n";
    for (std::size_t e = 0; e < r.train_loss.size(); ++e)
        curve += std::to_string(e) + "," + eval::fmt(r.train_loss[e]) + "," +
                 (e < r.val_loss.size() ? eval::fmt(r.val_loss[e]) : std::string()) + "\n";
    write_file_atomic(dir / "loss.csv", curve);
    return r;
}

inline std::map<std::string, double> mastery_map(const corpus::Dataset& d, const corpus::Submission& s,
                                                 const knowledge::KeParameters& ke) {
    const auto m = knowledge::mastery_profile(d, s.student_id, s.order_index, ke);
    std::map<std::string, double> out;
    for (std::size_t i = 0; i < ke.kc_ids.size(); ++i) out[ke.kc_ids[i]] = m[static_cast<Eigen::Index>(i)];
    return out;
}

inline policy::Prompt prompt_for(const corpus::Dataset& d, const corpus::Submission& s,
                                 const knowledge::KeParameters& ke) {
    return policy::build_knowledge_prompt(d.problem(s.problem_id), mastery_map(d, s, ke), d.kcs());
}

inline policy::ToyPolicyParams run_sft(const RunConfig& cfg, const policy::ToyTask& task, const corpus::Dataset& d,
                                       const corpus::Fold& f, const knowledge::KeParameters& ke, const fs::path& dir) {
    fs::create_directories(dir);
    const policy::ToyPolicy pol(task);
    std::vector<std::pair<policy::Prompt, std::vector<std::size_t>>> data;
    for (auto i : f.select(d, corpus::Role::train)) {
        const auto& s = d.submissions()[i];
        if (!task.problems().count(s.problem_id)) continue;
        if (auto toks = task.encode(s.problem_id, s.code)) data.emplace_back(prompt_for(d, s, ke), *toks);
    }
    auto [theta, curve] = policy::sft_train(pol, pol.init(), data, cfg.sft);
    write_file_atomic(dir / "policy.json", policy::to_json(theta).dump() + "\n");
    std::string c = "epoch,loss\n";
    for (std::size_t e = 0; e < curve.size(); ++e) c += std::to_string(e) + "," + eval::fmt(curve[e]) + "\n";
    write_file_atomic(dir / "sft_loss.csv", c);
    return theta;
}

inline policy::ToyPolicyParams run_grpo(const RunConfig& cfg, const policy::ToyTask& task, const corpus::Dataset& d,
                                        const corpus::Fold& f, const knowledge::KeParameters& ke,
                                        policy::ToyPolicyParams init, const grpo::Judge& judge, const fs::path& dir) {
    fs::create_directories(dir);
    const policy::ToyPolicy pol(task);
    std::vector<grpo::TrainItem> items;
    for (auto i : f.select(d, corpus::Role::train)) {
        const auto& s = d.submissions()[i];
        if (!task.problems().count(s.problem_id)) continue;
        items.push_back({prompt_for(d, s, ke), &d.problem(s.problem_id), s.code, eval::truth_errors_of(s)});
    }
    grpo::GrpoConfig gc = cfg.grpo;
    gc.seed = derive_seed(cfg.seed, "grpo/" + std::string(corpus::to_string(f.axis)) + "/" + std::to_string(f.index));
    auto r = grpo::grpo_train(pol, std::move(init), items, judge, gc);
    write_file_atomic(dir / "policy.json", policy::to_json(r.theta).dump() + "\n");
    write_file_atomic(dir / "trace.csv", grpo::trace_csv(r.trace));
    return r.theta;
}

/// K candidates for every test submission of the fold.
inline std::vector<eval::Prediction> run_generate_toy(const RunConfig& cfg, const policy::ToyTask& task,
                                                      const corpus::Dataset& d, const corpus::Fold& f,
                                                      const knowledge::KeParameters& ke,
                                                      const policy::ToyPolicyParams& theta) {
    const policy::ToyPolicy pol(task);
    std::vector<eval::Prediction> out;
    for (auto i : f.select(d, corpus::Role::test)) {
        const auto& s = d.submissions()[i];
        const auto cands = pol.sample(theta, prompt_for(d, s, ke), cfg.eval.max_k(),
                                      derive_seed(cfg.seed, "generate/" + s.key()));
        eval::Prediction p{s.student_id, s.problem_id, {}};
        for (const auto& c : cands) p.candidates.push_back(c.text);
        out.push_back(std::move(p));
    }
    return out;
}

inline std::vector<eval::Prediction> run_generate_remote(const RunConfig& cfg, llm::ChatClient& client,
                                                         const corpus::Dataset& d, const corpus::Fold& f,
                                                         const knowledge::KeParameters& ke) {
    const auto test = f.select(d, corpus::Role::test);
    std::vector<eval::Prediction> out(test.size());
    parallel_for(test.size(), static_cast<std::size_t>(cfg.endpoints.generator.max_parallel), [&](std::size_t k) {
        const auto& s = d.submissions()[test[k]];
        auto r = policy::remote_sample(client, prompt_for(d, s, ke), cfg.eval.max_k(), cfg.decode);
        out[k] = {s.student_id, s.problem_id, {}};
        for (const auto& c : r.completions) out[k].candidates.push_back(c.text);
    });
    return out;
}

// ---------------------------------------------------------------------------
// Manifest and runner
// ---------------------------------------------------------------------------

struct StageRecord {
    std::string name;
    std::string key;
    std::string dir;  // relative to out
    std::map<std::string, std::string> outputs;  // relative path -> sha256
    std::string started, finished;
};

inline std::string utc_now() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

struct Manifest {
    std::string config_hash;
    std::map<std::string, StageRecord> stages;

    json to_json() const {
        json st = json::array();
        for (const auto& [_, r] : stages)
            st.push_back({{"name", r.name},
                          {"key", r.key},
                          {"dir", r.dir},
                          {"outputs", r.outputs},
                          {"started", r.started},
                          {"finished", r.finished}});
        return {{"schema_version", 1},
                {"config_hash", config_hash},
                {"versions", {{"kaser", version}}},
                {"stages", st}};
    }

    static Manifest from_json(const json& j) {
        Manifest m;
        m.config_hash = j.value("config_hash", "");
        for (const auto& s : j.value("stages", json::array())) {
            StageRecord r{s.at("name"), s.at("key"), s.at("dir"),
                          s.at("outputs").get<std::map<std::string, std::string>>(), s.value("started", ""),
                          s.value("finished", "")};
            m.stages[r.name] = std::move(r);
        }
        return m;
    }
};

struct StageEvent {
    std::string name;
    bool executed = false;
};

class Runner {
public:
    Runner(fs::path out, std::string config_hash, std::ostream* log = nullptr)
        : out_(std::move(out)), log_(log) {
        fs::create_directories(out_);
        if (fs::exists(manifest_path())) {
            try {
                manifest_ = Manifest::from_json(json::parse(read_file(manifest_path())));
            } catch (const std::exception&) {
                manifest_ = {};
            }
        }
        manifest_.config_hash = std::move(config_hash);
    }

    fs::path manifest_path() const { return out_ / "manifest.json"; }
    const fs::path& out() const { return out_; }
    const std::vector<StageEvent>& events() const { return events_; }

    /// Runs `body(dir)` unless a previous run recorded the same key with
    /// intact outputs and no earlier stage had to run in this invocation.
    /// Returns the stage directory.
    fs::path stage(const std::string& name, const json& params, const std::vector<fs::path>& inputs,
                   const std::function<void(const fs::path&)>& body) {
        json material = {{"stage", name}, {"params", params}};
        json in = json::array();
        for (const auto& p : inputs) in.push_back(file_sha(p));
        material["inputs"] = in;
        const std::string key = sha256_hex(material.dump());
        std::string slug = name;
        std::replace(slug.begin(), slug.end(), '/', '_');
        const std::string rel = "stages/" + slug + "-" + key.substr(0, 12);
        const fs::path dir = out_ / rel;

        if (!dirty_) {
            if (auto it = manifest_.stages.find(name); it != manifest_.stages.end() && it->second.key == key &&
                                                        intact(it->second)) {
                events_.push_back({name, false});
                if (log_) *log_ << "[skip] " << name << "\n";
                return dir;
            }
        }
        dirty_ = true;
        if (log_) *log_ << "[run]  " << name << "\n";
        StageRecord rec{name, key, rel, {}, utc_now(), {}};
        fs::remove_all(dir);
        fs::create_directories(dir);
        manifest_.stages.erase(name);
        body(dir);
        for (const auto& e : fs::recursive_directory_iterator(dir))
            if (e.is_regular_file()) rec.outputs[fs::relative(e.path(), dir).generic_string()] = file_sha(e.path());
        rec.finished = utc_now();
        manifest_.stages[name] = std::move(rec);
        write_file_atomic(manifest_path(), manifest_.to_json().dump(2) + "\n");
        events_.push_back({name, true});
        return dir;
    }

private:
    bool intact(const StageRecord& r) const {
        const fs::path dir = out_ / r.dir;
        if (!fs::is_directory(dir)) return false;
        for (const auto& [rel, sha] : r.outputs) {
            const fs::path p = dir / rel;
            if (!fs::exists(p) || file_sha(p) != sha) return false;
        }
        return true;
    }

    fs::path out_;
    std::ostream* log_;
    Manifest manifest_;
    bool dirty_ = false;
    std::vector<StageEvent> events_;
};

// ---------------------------------------------------------------------------
// End-to-end
// ---------------------------------------------------------------------------

struct Clients {
    std::unique_ptr<llm::ChatClient> annotator, summarizer, judge, eval_judge, generator;
    std::unique_ptr<llm::EmbeddingClient> embeddings;

    static Clients http(const Endpoints& e) {
        Clients c;
        c.annotator = std::make_unique<llm::HttpChatClient>(e.annotator);
        c.summarizer = std::make_unique<llm::HttpChatClient>(e.summarizer);
        c.judge = std::make_unique<llm::HttpChatClient>(e.judge);
        c.eval_judge = std::make_unique<llm::HttpChatClient>(e.eval_judge);
        c.generator = std::make_unique<llm::HttpChatClient>(e.generator);
        c.embeddings = std::make_unique<llm::HttpEmbeddingClient>(e.embeddings);
        return c;
    }
};

struct PipelineResult {
    std::vector<StageEvent> events;
    std::map<eval::Level, eval::EvalRun> runs;
    fs::path report_dir;
};

inline std::string config_hash(const RunConfig& cfg) {
    json j = cfg.raw;
    j.erase("out");
    if (j.contains("endpoints"))
        for (auto& [_, e] : j["endpoints"].items()) e.erase("url");
    return sha256_hex(j.dump());
}

inline eval::Embed embed_fn(clustering::EmbeddingStore& store, llm::EmbeddingClient& client) {
    return [&store, &client](const std::vector<std::string>& texts) {
        std::vector<std::string> nonempty;
        for (const auto& t : texts) nonempty.push_back(py_strip(t).empty() ? std::string("<empty>") : t);
        std::vector<clustering::Vector> out;
        for (auto& e : store.embed(nonempty, &client)) out.push_back(std::move(e.vector));
        return out;
    };
}

inline PipelineResult run_pipeline(const RunConfig& cfg, Clients& clients, std::ostream* log = nullptr) {
    cfg.validate();
    const fs::path out = cfg.resolve(cfg.out);
    Runner runner(out, config_hash(cfg), log);
    const fs::path dataset_path = cfg.resolve(cfg.dataset);
    const corpus::Dataset raw = corpus::load_dataset(dataset_path);

    json annotate_params = {{"annotator", cfg.endpoints.annotator.model}, {"run_id", cfg.run_id}};
    const fs::path ann_dir = runner.stage("annotate", annotate_params, {dataset_path}, [&](const fs::path& dir) {
        auto outcome = run_annotate(cfg, raw, *clients.annotator, dir, false);
        if (!outcome.failures.empty())
            throw TransportError("annotation failed for " + std::to_string(outcome.failures.size()) +
                                 " submissions, first: " + outcome.failures.front());
    });

    json cluster_params = {{"k_c", cfg.k_c ? json(*cfg.k_c) : json(nullptr)},
                           {"linkage", clustering::to_string(cfg.linkage)},
                           {"summarizer", cfg.endpoints.summarizer.model},
                           {"embeddings", cfg.endpoints.embeddings.model}};
    const fs::path cl_dir = runner.stage(
        "cluster", cluster_params, {ann_dir / "annotated.jsonl", ann_dir / "audit.jsonl"}, [&](const fs::path& dir) {
            run_cluster(cfg, corpus::load_dataset(ann_dir / "annotated.jsonl"),
                        errors::load_audit(ann_dir / "audit.jsonl"), *clients.summarizer, *clients.embeddings, dir);
        });

    const corpus::Dataset d = corpus::load_dataset(cl_dir / "dataset.jsonl");
    const errors::ErrorCatalog catalog = errors::load_catalog(cl_dir / "catalog.json");
    std::optional<policy::ToyTask> task;
    if (cfg.generator == "toy") task = policy::load_toy_task(cfg.resolve(cfg.toy_task));
    errors::JudgeCache train_judge({cfg.endpoints.judge, "judge"}, *clients.judge, catalog);
    errors::JudgeCache eval_judge({cfg.endpoints.eval_judge, "judge"}, *clients.eval_judge, catalog);
    clustering::EmbeddingStore code_vectors(cfg.endpoints.embeddings.model);

    PipelineResult result;
    for (const eval::Level level : cfg.levels) {
        const auto axis = eval::axis_for(level);
        const auto folds = corpus::split(d, cfg.plan(axis));
        std::vector<fs::path> pred_files;
        for (const auto& f : folds) {
            const std::string tag = std::string(corpus::to_string(axis)) + "/" + std::to_string(f.index);
            json fold_params = {{"axis", corpus::to_string(axis)},
                                {"fold", f.index},
                                {"folds", cfg.folds},
                                {"ratios", {cfg.val_ratio, cfg.test_ratio}},
                                {"seed", cfg.seed}};
            json ke_params = fold_params;
            ke_params["ke"] = cfg.ke;
            const fs::path ke_dir = runner.stage("ke/" + tag, ke_params, {cl_dir / "dataset.jsonl"},
                                                 [&](const fs::path& dir) { run_ke(cfg, d, f, dir); });
            const auto ke = knowledge::parameters_from_json(json::parse(read_file(ke_dir / "ke.json")));

            fs::path gen_dir;
            json gen_params = fold_params;
            gen_params["ks"] = cfg.eval.ks;
            if (cfg.generator == "toy") {
                json sft_params = fold_params;
                sft_params["sft"] = cfg.sft;
                const fs::path toy_path = cfg.resolve(cfg.toy_task);
                const fs::path sft_dir =
                    runner.stage("sft/" + tag, sft_params, {cl_dir / "dataset.jsonl", ke_dir / "ke.json", toy_path},
                                 [&](const fs::path& dir) { run_sft(cfg, *task, d, f, ke, dir); });
                json grpo_params = fold_params;
                grpo_params["grpo"] = cfg.grpo;
                grpo_params["judge"] = cfg.endpoints.judge.model;
                const fs::path grpo_dir = runner.stage(
                    "grpo/" + tag, grpo_params,
                    {cl_dir / "dataset.jsonl", cl_dir / "catalog.json", ke_dir / "ke.json", sft_dir / "policy.json"},
                    [&](const fs::path& dir) {
                        auto init = policy::toy_params_from_json(json::parse(read_file(sft_dir / "policy.json")));
                        run_grpo(cfg, *task, d, f, ke, std::move(init), grpo::cached_judge(train_judge), dir);
                    });
                gen_dir = runner.stage("generate/" + tag, gen_params,
                                       {cl_dir / "dataset.jsonl", ke_dir / "ke.json", grpo_dir / "policy.json"},
                                       [&](const fs::path& dir) {
                                           auto theta = policy::toy_params_from_json(
                                               json::parse(read_file(grpo_dir / "policy.json")));
                                           write_file_atomic(dir / "predictions.jsonl",
                                                             eval::predictions_jsonl(
                                                                 run_generate_toy(cfg, *task, d, f, ke, theta)));
                                       });
            } else {
                gen_params["generator"] = cfg.endpoints.generator.model;
                gen_params["decode"] = cfg.decode;
                gen_dir = runner.stage("generate/" + tag, gen_params, {cl_dir / "dataset.jsonl", ke_dir / "ke.json"},
                                       [&](const fs::path& dir) {
                                           write_file_atomic(dir / "predictions.jsonl",
                                                             eval::predictions_jsonl(run_generate_remote(
                                                                 cfg, *clients.generator, d, f, ke)));
                                       });
            }
            pred_files.push_back(gen_dir / "predictions.jsonl");
        }

        json eval_params = {{"level", eval::to_string(level)},
                            {"eval", cfg.eval},
                            {"judge", cfg.endpoints.eval_judge.model},
                            {"embeddings", cfg.endpoints.embeddings.model}};
        std::vector<fs::path> eval_inputs{cl_dir / "dataset.jsonl", cl_dir / "catalog.json"};
        eval_inputs.insert(eval_inputs.end(), pred_files.begin(), pred_files.end());
        const fs::path eval_dir =
            runner.stage("eval/" + std::string(eval::to_string(level)), eval_params, eval_inputs,
                         [&](const fs::path& dir) {
                             eval::Predictions preds;
                             for (const auto& p : pred_files) preds.merge(eval::load_predictions(p));
                             eval::Services svc{grpo::cached_judge(eval_judge),
                                                embed_fn(code_vectors, *clients.embeddings)};
                             auto run = eval::run_eval(d, folds, preds, level, svc, cfg.eval, cfg.generator);
                             eval::write_report(run, dir);
                             result.runs[level] = std::move(run);
                         });
        fs::create_directories(out / "report");
        for (const char* suffix : {"_items.csv", "_summary.json"}) {
            const std::string name = std::string(eval::to_string(level)) + suffix;
            write_file_atomic(out / "report" / name, read_file(eval_dir / name));
        }
    }
    result.events = runner.events();
    result.report_dir = out / "report";
    return result;
}

}  // namespace kaser::pipeline
