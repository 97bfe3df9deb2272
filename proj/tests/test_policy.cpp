#include <catch_amalgamated.hpp>

#include "support.hpp"

using namespace kaser;
using namespace kaser::policy;

namespace {

const corpus::Problem kTwoKc{"P2", "Sum the array.", Language::java, {"K2", "K1"}};
const std::vector<corpus::KnowledgeComponent> kCatalog = {{"K1", "Loops"}, {"K2", "Arrays"}, {"K3", "Strings"}};

Prompt one_kc(double m) {
    return build_knowledge_prompt({"P1", "Return x.", Language::java, {"K1"}}, {{"K1", m}}, kCatalog);
}

}  // namespace

TEST_CASE("knowledge prompt", "[policy]") {
    SECTION("single KC line") {
        const auto p = one_kc(0.70);
        CHECK(p.text ==
              "Problem:\nReturn x.\n\nStudent information:\n"
              "KC 1: Loops. The student's mastery level on Loops is 0.70.\n\n"
              "Simulate the student written code:");
    }
    SECTION("two decimals") {
        CHECK(format_mastery(0.705) == "0.70");
        CHECK(format_mastery(0.125) == "0.12");
        CHECK(format_mastery(1.0) == "1.00");
        CHECK(one_kc(0.705).text.find("is 0.70.") != std::string::npos);
    }
    SECTION("catalog order, whatever the map order") {
        const auto p = build_knowledge_prompt(kTwoKc, {{"K2", 0.9}, {"K1", 0.1}, {"K3", 0.5}}, kCatalog);
        const auto k1 = p.text.find("KC 1: Loops");
        const auto k2 = p.text.find("KC 2: Arrays");
        REQUIRE(k1 != std::string::npos);
        REQUIRE(k2 != std::string::npos);
        CHECK(k1 < k2);
        CHECK(p.text.find("Strings") == std::string::npos);
        CHECK(build_knowledge_prompt(kTwoKc, {{"K1", 0.1}, {"K2", 0.9}}, kCatalog).text == p.text);
    }
    SECTION("missing or invalid mastery") {
        CHECK_THROWS_AS(build_knowledge_prompt(kTwoKc, {{"K1", 0.1}}, kCatalog), NotFoundError);
        CHECK_THROWS_AS(build_knowledge_prompt(kTwoKc, {{"K1", 0.1}, {"K2", 1.5}}, kCatalog), ConfigError);
    }
}

TEST_CASE("toy sampling", "[policy]") {
    SECTION("one-token vocabulary") {
        const ToyTask task(Language::java, {{"P1", {"return <<0>>;", {{"0"}}}}});
        const ToyPolicy pol(task);
        const auto out = pol.sample(pol.init(), one_kc(0.5), 8, 1);
        for (const auto& c : out) {
            CHECK(c.text == "return 0;");
            CHECK(c.logprobs == std::vector<double>{0.0});
        }
    }
    SECTION("uniform logits hit every option at 1/V") {
        const std::vector<std::string> opts = {"a", "b", "c", "d", "e"};
        const ToyTask task(Language::java, {{"P1", {"<<0>>", {opts}}}});
        const ToyPolicy pol(task);
        constexpr int N = 10000;
        const auto out = pol.sample(pol.init(), one_kc(0.5), N, 2024);
        std::vector<int> count(opts.size(), 0);
        for (const auto& c : out) ++count[c.tokens[0]];
        const double p = 1.0 / static_cast<double>(opts.size());
        const double sigma = std::sqrt(N * p * (1 - p));
        for (int c : count) CHECK(std::abs(c - N * p) <= 3 * sigma);
    }
    SECTION("seeded") {
        const auto pl = kt::planted_task();
        const ToyPolicy pol(pl.task);
        Rng rng(3);
        const auto theta = kt::random_params(pol, pl.prompt, rng);
        const auto a = pol.sample(theta, pl.prompt, 20, 9), b = pol.sample(theta, pl.prompt, 20, 9);
        for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].tokens == b[i].tokens);
        CHECK_THROWS_AS(pol.sample(theta, pl.prompt, 0, 9), ConfigError);
    }
    SECTION("strict mode rejects unknown contexts") {
        const auto pl = kt::planted_task();
        const ToyPolicy strict(pl.task, true);
        CHECK_THROWS_AS(strict.sample(strict.init(), pl.prompt, 1, 0), NotFoundError);
    }
}

TEST_CASE("toy log-probabilities", "[policy]") {
    const ToyTask task(Language::java, {{"P1", {"<<0>> <<1>> <<2>>", {{"a", "b", "c"}, {"a", "b", "c"}, {"a", "b", "c"}}}}});
    const ToyPolicy pol(task);
    const auto p = one_kc(0.4);
    const auto lp = pol.logprobs(pol.init(), p, {0, 1, 2});
    CHECK(std::accumulate(lp.begin(), lp.end(), 0.0) == Catch::Approx(-3 * std::log(3.0)).epsilon(1e-14));

    auto theta = pol.init();
    pol.touch(theta, p);
    theta.rows.at(row_key(task.context_key(p), 0)).logits = {30.0, -30.0, -30.0};
    CHECK(pol.logprobs(theta, p, {0, 0, 0})[0] > -1e-20);
    CHECK_THROWS_AS(pol.logprobs(theta, p, {0, 9, 0}), NotFoundError);
    CHECK_THROWS_AS(pol.logprobs(theta, p, {0, 0}), ShapeError);

    Rng rng(12);
    const auto pl = kt::planted_task();
    const ToyPolicy pp(pl.task);
    const auto th = kt::random_params(pp, pl.prompt, rng, 2.0);
    for (const auto& c : pp.sample(th, pl.prompt, 30, 4)) CHECK(pp.logprobs(th, pl.prompt, c.tokens) == c.logprobs);
}

TEST_CASE("sft loss", "[policy]") {
    const ToyTask task(Language::java, {{"P1", {"<<0>>(<<1>>)", {{"f", "g", "h", "k"}, {"x", "y", "z", "w"}}}}});
    const ToyPolicy pol(task);
    const auto p = one_kc(0.3);
    const std::vector<std::size_t> target = {task.token_id("g"), task.token_id("z")};

    CHECK(sft_loss(pol, pol.init(), p, target).loss == Catch::Approx(2 * std::log(4.0)).epsilon(1e-14));

    Rng rng(5);
    auto theta = kt::random_params(pol, p, rng);
    const auto lp = pol.logprobs(theta, p, target);
    CHECK(sft_loss(pol, theta, p, target).loss == Catch::Approx(-(lp[0] + lp[1])).epsilon(1e-14));

    SECTION("gradient matches central differences") {
        const auto r = sft_loss(pol, theta, p, target);
        constexpr double h = 1e-6;
        for (auto& [key, row] : theta.rows)
            for (std::size_t i = 0; i < row.logits.size(); ++i) {
                const double keep = row.logits[i];
                row.logits[i] = keep + h;
                const double up = sft_loss(pol, theta, p, target).loss;
                row.logits[i] = keep - h;
                const double down = sft_loss(pol, theta, p, target).loss;
                row.logits[i] = keep;
                const double fd = (up - down) / (2 * h);
                CHECK(kt::rel_err(fd, r.grad.at(key)[i]) <= 1e-5);
            }
    }
    SECTION("deterministic policy at its own output") {
        auto sharp = pol.init();
        pol.touch(sharp, p);
        for (std::size_t s = 0; s < 2; ++s) {
            auto& row = sharp.rows.at(row_key(task.context_key(p), s));
            for (std::size_t i = 0; i < row.logits.size(); ++i) row.logits[i] = row.support[i] == target[s] ? 30 : -30;
        }
        CHECK(sft_loss(pol, sharp, p, target).loss < 1e-20);
    }
    SECTION("training lowers the loss") {
        const auto [trained, curve] = sft_train(pol, pol.init(), {{p, target}}, {30, 0.5});
        REQUIRE(curve.size() == 30);
        CHECK(curve.back() < curve.front());
        CHECK(sft_loss(pol, trained, p, target).loss < curve.front());
    }
}

TEST_CASE("toy update", "[policy]") {
    const auto pl = kt::planted_task();
    const ToyPolicy pol(pl.task);
    Rng rng(1);
    const auto theta = kt::random_params(pol, pl.prompt, rng);
    const std::string key = row_key(pl.task.context_key(pl.prompt), 0);

    CHECK(pol.update(theta, pl.prompt, {{key, std::vector<double>(4, 0.0)}}, 1.0).rows.at(key).logits ==
          theta.rows.at(key).logits);

    const auto g = pol.logprob_grad(theta, pl.prompt, {pl.optimum}, {1.0});
    const auto next = pol.update(theta, pl.prompt, g, 0.5);
    CHECK(kt::slot_probability(pol, next, pl.prompt, pl.optimum) >
          kt::slot_probability(pol, theta, pl.prompt, pl.optimum));
    const auto probs = next.rows.at(key).probs();
    CHECK(std::accumulate(probs.begin(), probs.end(), 0.0) == Catch::Approx(1.0).margin(1e-12));

    auto big = theta;
    for (int i = 0; i < 50; ++i) big = pol.update(big, pl.prompt, {{key, {10.0, -10.0, 0.0, 0.0}}}, 1.0);
    CHECK(big.rows.at(key).logits[0] == 30.0);
    CHECK(big.rows.at(key).logits[1] == -30.0);

    CHECK_THROWS_AS(pol.update(theta, pl.prompt, {{key, {NAN, 0, 0, 0}}}, 1.0), NumericError);
    CHECK_THROWS_AS(pol.update(theta, pl.prompt, {{key, {1.0}}}, 1.0), ShapeError);

    const auto back = toy_params_from_json(json::parse(to_json(next).dump()));
    CHECK(back.rows.at(key).logits == next.rows.at(key).logits);
}

TEST_CASE("remote sampling", "[policy]") {
    auto cfg = kt::toy_mock_config();
    cfg.simulate["Return x."] = {"return x;"};
    const auto prompt = one_kc(0.6);
    DecodeParams d;
    d.temperature = 0.7;

    SECTION("G completions with logprobs") {
        kt::InProcessMock mock(cfg);
        const auto r = remote_sample(mock, prompt, 4, d);
        REQUIRE(r.completions.size() == 4);
        for (const auto& c : r.completions) {
            CHECK(c.text == "return x;");
            CHECK(c.scored);
            CHECK(!c.refused);
        }
        CHECK(r.handle.caps.can_score);
        CHECK(!r.handle.caps.can_update);
    }
    SECTION("no logprobs means unscored") {
        cfg.logprobs = false;
        kt::InProcessMock mock(cfg);
        const auto r = remote_sample(mock, prompt, 2, d);
        CHECK(!r.handle.caps.can_score);
        for (const auto& c : r.completions) CHECK(!c.scored);
    }
    SECTION("refusals are flagged") {
        cfg.refuse = true;
        kt::InProcessMock mock(cfg);
        for (const auto& c : remote_sample(mock, prompt, 2, d).completions) CHECK(c.refused);
    }
    SECTION("decode parameters on the wire") {
        kt::ScriptedChat chat([](const llm::ChatRequest& req, int) {
            return std::vector<llm::ChatChoice>(static_cast<std::size_t>(req.n), {"return 1;", std::nullopt, "stop"});
        });
        remote_sample(chat, prompt, 3, d);
        const json body = chat.seen().front().body("m");
        CHECK(body.at("temperature").get<double>() == 0.7);
        CHECK(body.at("top_p").get<double>() == 1.0);
        CHECK(body.at("top_k").get<int>() == 40);
        CHECK(body.at("n").get<int>() == 3);
    }
    SECTION("wrong choice count is retried") {
        kt::ScriptedChat chat([](const llm::ChatRequest& req, int call) {
            return std::vector<llm::ChatChoice>(call == 0 ? 1 : static_cast<std::size_t>(req.n), {"x = 1;", std::nullopt, "stop"});
        });
        const auto r = remote_sample(chat, prompt, 2, d);
        CHECK(r.retries == 1);
    }
}
