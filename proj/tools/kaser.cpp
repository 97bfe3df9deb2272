// kaser command-line interface.

#include <cstdio>
#include <csignal>
#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "kaser/mock_server.hpp"
#include "kaser/pipeline.hpp"

namespace fs = std::filesystem;
using namespace kaser;
using json = nlohmann::ordered_json;

namespace {

struct Globals {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    bool resume = false;
    bool dry_run = false;
    bool mock = false;
};

struct FoldArgs {
    std::string axis = "by_student";
    int fold = 0;
};

pipeline::RunConfig load(const Globals& g) {
    if (g.config.empty()) throw ConfigError("--config is required");
    auto cfg = pipeline::load_run_config(g.config);
    if (g.seed) cfg.seed = *g.seed;
    if (!g.out.empty()) cfg.out = fs::absolute(g.out);
    return cfg;
}

fs::path out_dir(const pipeline::RunConfig& cfg, const std::string& sub) {
    const fs::path p = cfg.resolve(cfg.out) / sub;
    fs::create_directories(p);
    return p;
}

/// Starts the in-process mock services when requested and points every
/// endpoint at them.
std::unique_ptr<mock::MockServer> maybe_mock(const Globals& g, pipeline::RunConfig& cfg) {
    if (!g.mock) return nullptr;
    if (cfg.mock.empty()) throw ConfigError("--mock needs a 'mock' rules file in the config");
    auto server = std::make_unique<mock::MockServer>(mock::load_mock_config(cfg.resolve(cfg.mock)));
    server->start(0);
    cfg.endpoints.set_url(server->url());
    return server;
}

corpus::Dataset dataset_arg(const pipeline::RunConfig& cfg, const std::string& path) {
    return corpus::load_dataset(path.empty() ? cfg.resolve(cfg.dataset) : fs::path(path));
}

corpus::Fold fold_of(const pipeline::RunConfig& cfg, const corpus::Dataset& d, const FoldArgs& fa) {
    const auto folds = corpus::split(d, cfg.plan(corpus::parse_split_axis(fa.axis)));
    if (fa.fold < 0 || fa.fold >= static_cast<int>(folds.size()))
        throw ConfigError("--fold must be in [0, " + std::to_string(folds.size() - 1) + "]");
    return folds[static_cast<std::size_t>(fa.fold)];
}

knowledge::KeParameters ke_arg(const std::string& path) {
    if (path.empty()) throw ConfigError("--ke is required");
    return knowledge::parameters_from_json(json::parse(read_file(path)));
}

void add_fold_options(CLI::App* c, FoldArgs& fa) {
    c->add_option("--axis", fa.axis, "Split axis: by_student or by_problem")->capture_default_str();
    c->add_option("--fold", fa.fold, "Fold index")->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Knowledge-aware student code simulation: data, training and evaluation tools"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--config", g.config, "Run configuration (JSON)");
    app.add_option("--seed", g.seed, "Override the configured seed");
    app.add_option("--out", g.out, "Output directory");
    app.add_flag("--resume", g.resume, "Reuse finished work from a previous run");
    app.add_flag("--dry-run", g.dry_run, "Print what would be sent without contacting endpoints");
    app.add_flag("--mock", g.mock, "Serve the configured mock rules in-process and use them for every endpoint");

    int rc = 0;

    // annotate -------------------------------------------------------------
    auto* annotate = app.add_subcommand("annotate", "Label the errors of every incorrect submission");
    annotate->callback([&] {
        auto cfg = load(g);
        const auto d = dataset_arg(cfg, "");
        if (g.dry_run) {
            std::cout << pipeline::annotate_dry_run(cfg, d);
            return;
        }
        auto server = maybe_mock(g, cfg);
        llm::HttpChatClient client(cfg.endpoints.annotator);
        const auto outcome = pipeline::run_annotate(cfg, d, client, out_dir(cfg, "annotate"), g.resume);
        std::cerr << "annotated " << outcome.records.size() << " submissions (" << outcome.reused << " reused, "
                  << outcome.failures.size() << " failed)\n";
        if (!outcome.failures.empty()) rc = 3;
    });

    // cluster --------------------------------------------------------------
    std::string ann_dir;
    std::optional<std::size_t> k_c;
    auto* cluster = app.add_subcommand("cluster", "Cluster raw error labels into a catalog");
    cluster->add_option("--annotated", ann_dir, "Directory with annotated.jsonl and audit.jsonl")->required();
    cluster->add_option("--k-c", k_c, "Number of error clusters");
    cluster->callback([&] {
        auto cfg = load(g);
        if (k_c) cfg.k_c = k_c;
        auto server = maybe_mock(g, cfg);
        llm::HttpChatClient chat(cfg.endpoints.summarizer);
        llm::HttpEmbeddingClient emb(cfg.endpoints.embeddings);
        const auto r = pipeline::run_cluster(cfg, corpus::load_dataset(fs::path(ann_dir) / "annotated.jsonl"),
                                             errors::load_audit(fs::path(ann_dir) / "audit.jsonl"), chat, emb,
                                             out_dir(cfg, "cluster"));
        std::cerr << "catalog with " << r.summary.catalog.size() << " errors\n";
    });

    // ke-train / ke-profile -------------------------------------------------
    std::string data_path, ke_path;
    FoldArgs fa;
    auto* ke_train = app.add_subcommand("ke-train", "Train the knowledge estimator on one fold");
    ke_train->add_option("--dataset", data_path, "Dataset with catalog error ids (default: config dataset)");
    add_fold_options(ke_train, fa);
    ke_train->callback([&] {
        const auto cfg = load(g);
        const auto d = dataset_arg(cfg, data_path);
        const auto r = pipeline::run_ke(cfg, d, fold_of(cfg, d, fa), out_dir(cfg, "ke"));
        if (!r.train_loss.empty()) std::cerr << "final train loss " << r.train_loss.back() << "\n";
    });

    std::string student;
    int t = 0;
    auto* ke_profile = app.add_subcommand("ke-profile", "Print a student's mastery vector after t submissions");
    ke_profile->add_option("--dataset", data_path, "Dataset (default: config dataset)");
    ke_profile->add_option("--ke", ke_path, "Estimator parameter file")->required();
    ke_profile->add_option("--student", student, "Student id")->required();
    ke_profile->add_option("--t", t, "Number of prior submissions")->required();
    ke_profile->callback([&] {
        const auto cfg = load(g);
        const auto d = dataset_arg(cfg, data_path);
        const auto ke = ke_arg(ke_path);
        if (!d.has_student(student)) throw NotFoundError("unknown student '" + student + "'");
        const auto m = knowledge::mastery_profile(d, student, t, ke);
        json out = json::object();
        for (std::size_t i = 0; i < ke.kc_ids.size(); ++i) out[ke.kc_ids[i]] = m[static_cast<Eigen::Index>(i)];
        std::cout << out.dump(2) << "\n";
    });

    // sft-toy --------------------------------------------------------------
    auto* sft = app.add_subcommand("sft-toy", "Fit the toy policy to the training students' code");
    sft->add_option("--dataset", data_path, "Dataset (default: config dataset)");
    sft->add_option("--ke", ke_path, "Estimator parameter file")->required();
    add_fold_options(sft, fa);
    sft->callback([&] {
        const auto cfg = load(g);
        const auto d = dataset_arg(cfg, data_path);
        const auto task = policy::load_toy_task(cfg.resolve(cfg.toy_task));
        pipeline::run_sft(cfg, task, d, fold_of(cfg, d, fa), ke_arg(ke_path), out_dir(cfg, "sft"));
    });

    // grpo-train -----------------------------------------------------------
    std::string policy_kind = "toy", catalog_path, init_path;
    auto* grpo_cmd = app.add_subcommand("grpo-train", "Train a policy with group-relative policy optimization");
    grpo_cmd->add_option("--policy", policy_kind, "toy or remote-scored")->capture_default_str();
    grpo_cmd->add_option("--dataset", data_path, "Dataset with catalog error ids");
    grpo_cmd->add_option("--catalog", catalog_path, "Error catalog")->required();
    grpo_cmd->add_option("--ke", ke_path, "Estimator parameter file")->required();
    grpo_cmd->add_option("--init", init_path, "Starting toy policy (default: uniform)");
    add_fold_options(grpo_cmd, fa);
    grpo_cmd->callback([&] {
        auto cfg = load(g);
        if (policy_kind == "remote-scored")
            throw ConfigError("remote policies cannot be updated; GRPO needs a trainable policy (use --policy toy)");
        if (policy_kind != "toy") throw ConfigError("--policy must be toy or remote-scored");
        auto server = maybe_mock(g, cfg);
        const auto d = dataset_arg(cfg, data_path);
        const auto catalog = errors::load_catalog(catalog_path);
        const auto task = policy::load_toy_task(cfg.resolve(cfg.toy_task));
        llm::HttpChatClient client(cfg.endpoints.judge);
        errors::JudgeCache judge({cfg.endpoints.judge, "judge"}, client, catalog);
        auto init = init_path.empty() ? policy::ToyPolicy(task).init()
                                      : policy::toy_params_from_json(json::parse(read_file(init_path)));
        pipeline::run_grpo(cfg, task, d, fold_of(cfg, d, fa), ke_arg(ke_path), std::move(init),
                           grpo::cached_judge(judge), out_dir(cfg, "grpo"));
        std::cerr << "judge cache: " << judge.hits() << " hits, " << judge.misses() << " misses\n";
    });

    // generate -------------------------------------------------------------
    std::string policy_path;
    auto* generate = app.add_subcommand("generate", "Generate K candidates for every test submission of a fold");
    generate->add_option("--dataset", data_path, "Dataset");
    generate->add_option("--ke", ke_path, "Estimator parameter file")->required();
    generate->add_option("--policy-file", policy_path, "Toy policy parameters (toy generator)");
    add_fold_options(generate, fa);
    generate->callback([&] {
        auto cfg = load(g);
        const auto d = dataset_arg(cfg, data_path);
        const auto fold = fold_of(cfg, d, fa);
        const auto ke = ke_arg(ke_path);
        std::vector<eval::Prediction> preds;
        if (cfg.generator == "toy") {
            if (policy_path.empty()) throw ConfigError("--policy-file is required for the toy generator");
            const auto task = policy::load_toy_task(cfg.resolve(cfg.toy_task));
            preds = pipeline::run_generate_toy(cfg, task, d, fold, ke,
                                               policy::toy_params_from_json(json::parse(read_file(policy_path))));
        } else {
            if (g.dry_run) {
                for (auto i : fold.select(d, corpus::Role::test))
                    std::cout << policy::simulate_request(pipeline::prompt_for(d, d.submissions()[i], ke),
                                                          cfg.eval.max_k(), cfg.decode)
                                     .body(cfg.endpoints.generator.model)
                                     .dump()
                              << "\n";
                return;
            }
            auto server = maybe_mock(g, cfg);
            llm::HttpChatClient client(cfg.endpoints.generator);
            preds = pipeline::run_generate_remote(cfg, client, d, fold, ke);
        }
        write_file_atomic(out_dir(cfg, "generate") / "predictions.jsonl", eval::predictions_jsonl(preds));
    });

    // eval -----------------------------------------------------------------
    std::vector<std::string> pred_paths;
    std::string level = "pair";
    std::vector<int> eval_folds;
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate canned predictions against the test submissions");
    eval_cmd->add_option("--dataset", data_path, "Dataset with catalog error ids");
    eval_cmd->add_option("--catalog", catalog_path, "Error catalog")->required();
    eval_cmd->add_option("--predictions", pred_paths, "Prediction JSONL files")->required();
    eval_cmd->add_option("--level", level, "pair or problem")->capture_default_str();
    eval_cmd->add_option("--folds", eval_folds, "Fold indices to evaluate (default: all)");
    eval_cmd->callback([&] {
        auto cfg = load(g);
        auto server = maybe_mock(g, cfg);
        const auto d = dataset_arg(cfg, data_path);
        const auto lv = eval::parse_level(level);
        auto folds = corpus::split(d, cfg.plan(eval::axis_for(lv)));
        if (!eval_folds.empty()) {
            std::vector<corpus::Fold> keep;
            for (int f : eval_folds) keep.push_back(folds.at(static_cast<std::size_t>(f)));
            folds = std::move(keep);
        }
        eval::Predictions preds;
        for (const auto& p : pred_paths) preds.merge(eval::load_predictions(p));
        const auto catalog = errors::load_catalog(catalog_path);
        llm::HttpChatClient judge_client(cfg.endpoints.eval_judge);
        llm::HttpEmbeddingClient emb(cfg.endpoints.embeddings);
        errors::JudgeCache judge({cfg.endpoints.eval_judge, "judge"}, judge_client, catalog);
        clustering::EmbeddingStore store(cfg.endpoints.embeddings.model);
        eval::Services svc{grpo::cached_judge(judge), pipeline::embed_fn(store, emb)};
        const auto run = eval::run_eval(d, folds, preds, lv, svc, cfg.eval, cfg.generator);
        eval::write_report(run, out_dir(cfg, "eval"));
        std::cout << eval::summary_json(run).dump(2) << "\n";
    });

    // pipeline -------------------------------------------------------------
    auto* pipe = app.add_subcommand("pipeline", "Run every stage, skipping those already recorded in the manifest");
    pipe->callback([&] {
        auto cfg = load(g);
        auto server = maybe_mock(g, cfg);
        auto clients = pipeline::Clients::http(cfg.endpoints);
        const auto r = pipeline::run_pipeline(cfg, clients, &std::cerr);
        for (const auto& [lv, run] : r.runs) std::cout << eval::summary_json(run).dump(2) << "\n";
        std::cerr << "reports in " << r.report_dir.string() << "\n";
    });

    // mock-serve -----------------------------------------------------------
    std::string rules_path;
    int port = 8089;
    auto* serve = app.add_subcommand("mock-serve", "Serve the mock chat and embeddings endpoints");
    serve->add_option("--rules", rules_path, "Mock rules file")->required();
    serve->add_option("--port", port, "Port")->capture_default_str();
    serve->callback([&] {
        mock::MockServer server(mock::load_mock_config(rules_path));
        std::cerr << "mock services on http://127.0.0.1:" << port << "/v1\n";
        server.run(port);
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const kaser::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return rc;
}
