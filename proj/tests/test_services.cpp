#include <catch_amalgamated.hpp>

#include "support.hpp"

using namespace kaser;

namespace {

const corpus::Problem kProblem{"P1", "Return 1 if x is zero and 0 otherwise.", Language::java, {"K1"}};

errors::ErrorCatalog toy_catalog() {
    return errors::ErrorCatalog({{"E01", "incorrect comparison logic", errors::Category::syntax},
                                 {"E02", "missing return statement", errors::Category::syntax},
                                 {"E03", "array index out of bounds", errors::Category::runtime}});
}

// Small enough for a unit test; the acceptance run uses the full config.
const kt::json kQuick = {{"levels", {"pair"}},
                         {"ke", {{"epochs", 10}}},
                         {"sft", {{"epochs", 5}}},
                         {"grpo", {{"iterations", 5}}}};

}  // namespace

TEST_CASE("mock responders", "[services]") {
    SECTION("fixtures replay byte for byte") {
        auto cfg = kt::toy_mock_config();
        const llm::ChatRequest req = errors::judge_request("int x;", kProblem, toy_catalog());
        const std::string body = req.body("mock").dump();
        cfg.fixtures[sha256_hex(kt::json::parse(body).dump())] = R"({"canned": true})";
        mock::MockServer server(cfg);
        CHECK(server.respond_chat(body) == R"({"canned": true})");
    }
    SECTION("judge rules map onto the catalog") {
        kt::InProcessMock mock(kt::toy_mock_config());
        const auto cat = toy_catalog();
        const auto hit = errors::judge_errors("if (x = 0) { return 1; }", kProblem, cat, {}, mock);
        CHECK(hit.errors == errors::ErrorSet{"E01"});
        const auto clean = errors::judge_errors("return x == 0 ? 1 : 0;", kProblem, cat, {}, mock);
        CHECK(clean.errors.empty());
    }
    SECTION("malformed first replies are retried") {
        auto cfg = kt::toy_mock_config();
        cfg.malformed_first = 2;
        kt::InProcessMock mock(cfg);
        errors::JudgeConfig jc;
        jc.endpoint.retries = 3;
        const auto r = errors::judge_errors("if (x = 0) { return 1; }", kProblem, toy_catalog(), jc, mock);
        CHECK(r.retries == 2);
        CHECK(r.errors == errors::ErrorSet{"E01"});

        cfg.malformed_first = 5;
        kt::InProcessMock worse(cfg);
        CHECK_THROWS_AS(errors::judge_errors("x", kProblem, toy_catalog(), jc, worse), TransportError);
    }
    SECTION("hashed embeddings") {
        kt::InProcessMock mock(kt::toy_mock_config());
        const auto v = mock.embed({"a b", "B A", "c"});
        CHECK(v[0] == v[1]);
        CHECK(clustering::cosine_distance(v[0], v[2]) == 1.0);
        CHECK(v[0].size() == 256);
    }
}

TEST_CASE("mock server over HTTP", "[services]") {
    auto cfg = kt::toy_mock_config();
    cfg.simulate[kProblem.statement] = {"return 0;"};
    mock::MockServer server(cfg);
    const int port = server.start();
    REQUIRE(port > 0);
    llm::EndpointConfig ep;
    ep.url = server.url();
    ep.retries = 0;

    llm::HttpChatClient chat(ep);
    const auto prompt = policy::build_knowledge_prompt(kProblem, {{"K1", 0.5}}, {{"K1", "Conditional logic"}});
    policy::DecodeParams d;
    d.temperature = 0.7;
    const auto r = policy::remote_sample(chat, prompt, 3, d);
    CHECK(r.completions.size() == 3);
    CHECK(r.completions[0].text == "return 0;");
    REQUIRE(server.chat_requests() == 1);
    const auto body = kt::json::parse(server.request_log().front());
    CHECK(body.at("temperature").get<double>() == 0.7);
    CHECK(body.at("n").get<int>() == 3);

    llm::HttpEmbeddingClient emb(ep);
    CHECK(emb.embed({"x", "y"}).size() == 2);
    CHECK(server.embedding_requests() == 1);

    server.stop();
    CHECK_THROWS_AS(chat.chat(errors::judge_request("x", kProblem, toy_catalog())), TransportError);
}

TEST_CASE("run configuration", "[services]") {
    kt::TempDir tmp;
    const auto cfg = kt::toy_run_config(tmp.path());
    CHECK_NOTHROW(cfg.validate());
    CHECK(cfg.grpo.G == 5);
    CHECK(cfg.grpo.beta == 0.1);
    CHECK(cfg.eval.ks == std::vector<std::size_t>{1, 5});

    CHECK_THROWS_AS(kt::toy_run_config(tmp.path(), {{"bogus", 1}}), ConfigError);
    CHECK_THROWS_AS(kt::toy_run_config(tmp.path(), {{"schema_version", 2}}), ConfigError);
    CHECK_THROWS_AS(kt::toy_run_config(tmp.path(), {{"dataset", "missing.jsonl"}}).validate(), ConfigError);
    CHECK_THROWS_AS(kt::toy_run_config(tmp.path(), {{"grpo", {{"G", 1}}}}).validate(), ConfigError);
    CHECK_THROWS_AS(kt::toy_run_config(tmp.path(), {{"levels", {"triple"}}}), ConfigError);

    // Moving the output directory or the endpoint does not change the hash.
    auto moved = kt::toy_run_config(tmp / "elsewhere", {{"endpoints", {{"default", {{"url", "http://h:1/v1"}}}}}});
    CHECK(pipeline::config_hash(moved) == pipeline::config_hash(cfg));
    CHECK(pipeline::config_hash(kt::toy_run_config(tmp.path(), {{"seed", 8}})) != pipeline::config_hash(cfg));
}

TEST_CASE("pipeline", "[services]") {
    kt::TempDir tmp;

    SECTION("resume skips finished stages and reruns damaged ones") {
        const auto cfg = kt::toy_run_config(tmp / "out", kQuick);
        const auto first = kt::run_toy_pipeline(cfg);
        for (const auto& e : first.events) CHECK(e.executed);
        const auto before = kt::tree_digest(tmp / "out");
        CHECK(before.count("report/pair_items.csv"));
        CHECK(before.count("report/pair_summary.json"));

        const auto second = kt::run_toy_pipeline(cfg);
        REQUIRE(second.events.size() == first.events.size());
        for (const auto& e : second.events) CHECK_FALSE(e.executed);
        CHECK(kt::tree_digest(tmp / "out") == before);

        // Damage one fold's knowledge estimator: it and everything after it rerun.
        std::string victim;
        for (const auto& [rel, _] : before)
            if (rel.find("ke_by_student_2") != std::string::npos && rel.ends_with("ke.json")) victim = rel;
        REQUIRE(!victim.empty());
        write_file_atomic(tmp / "out" / victim, "{}");
        const auto third = kt::run_toy_pipeline(cfg);
        bool reached = false;
        for (const auto& e : third.events) {
            if (e.name == "ke/by_student/2") reached = true;
            CAPTURE(e.name);
            CHECK(e.executed == reached);
        }
        CHECK(reached);
        CHECK(kt::tree_digest(tmp / "out") == before);
    }
    SECTION("more clusters than labels is rejected") {
        auto patch = kQuick;
        patch["clustering"] = {{"k_c", 1000}};
        CHECK_THROWS_AS(kt::run_toy_pipeline(kt::toy_run_config(tmp / "out", patch)), ConfigError);
    }
    SECTION("remote generation against the simulator") {
        auto patch = kQuick;
        patch["generator"] = "remote";
        const auto res = kt::run_toy_pipeline(kt::toy_run_config(tmp / "out", patch));
        REQUIRE(res.runs.count(eval::Level::pair));
        for (const auto& f : res.runs.at(eval::Level::pair).folds)
            for (const auto& p : f.pairs) CHECK(p.at.size() == 2);
    }
}
