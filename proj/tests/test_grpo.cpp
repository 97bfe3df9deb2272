#include <catch_amalgamated.hpp>

#include "kaser/metrics/codebleu.hpp"
#include "support.hpp"

using namespace kaser;
using namespace kaser::grpo;

namespace {

const std::vector<std::string> kSnippets = {
    "public int f(int x) {\n    return x + 1;\n}",
    "public int f(int x) {\n    int y = x;\n    return y + 1;\n}",
    "public int f(int x) {\n    if (x > 0) {\n        return x;\n    }\n    return 0;\n}",
};

/// Monte-Carlo mean and standard error of the group-mean total reward.
std::pair<double, double> mc_reward(const policy::ToyPolicy& pol, const policy::ToyPolicyParams& theta,
                                    const kt::Planted& pl, std::size_t groups, std::uint64_t seed) {
    metrics::CodeBleuCache cb;
    std::vector<double> means;
    for (std::size_t k = 0; k < groups; ++k) {
        const auto cands = pol.sample(theta, pl.prompt, 5, seed + k);
        std::vector<std::string> codes;
        for (const auto& c : cands) codes.push_back(c.text);
        const auto r = compute_group_rewards(codes, pl.problem, pl.truth_code, pl.truth_errors, pl.judge(), {}, cb);
        double s = 0;
        for (const auto& x : r) s += x.total;
        means.push_back(s / 5.0);
    }
    double m = 0, v = 0;
    for (double x : means) m += x;
    m /= static_cast<double>(groups);
    for (double x : means) v += (x - m) * (x - m);
    v /= static_cast<double>(groups - 1);
    return {m, std::sqrt(v / static_cast<double>(groups))};
}

}  // namespace

TEST_CASE("diversity reward", "[grpo]") {
    const auto lang = Language::java;
    const std::vector<std::string> same(4, kSnippets[0]);
    for (std::size_t i = 0; i < same.size(); ++i) CHECK(diversity_reward(same, i, lang) == Catch::Approx(0.0).margin(1e-12));

    const std::vector<std::string> two = {kSnippets[0], kSnippets[1]};
    const double c01 = metrics::codebleu(kSnippets[0], kSnippets[1], lang).combined;
    const double c10 = metrics::codebleu(kSnippets[1], kSnippets[0], lang).combined;
    CHECK(diversity_reward(two, 0, lang) == Catch::Approx(1.0 - c01).margin(1e-15));
    CHECK(diversity_reward(two, 1, lang) == Catch::Approx(1.0 - c10).margin(1e-15));

    for (std::size_t i = 0; i < 3; ++i) {
        double mx = 0;
        for (std::size_t j = 0; j < 3; ++j)
            if (j != i) mx = std::max(mx, metrics::codebleu(kSnippets[i], kSnippets[j], lang).combined);
        const double d = diversity_reward(kSnippets, i, lang);
        CHECK(d == Catch::Approx(1.0 - mx).margin(1e-15));
        CHECK(d >= 0.0);
        CHECK(d <= 1.0);
    }
    CHECK(diversity_reward({kSnippets[0]}, 0, lang) == 1.0);
}

TEST_CASE("group rewards", "[grpo]") {
    const auto pl = kt::planted_task();
    metrics::CodeBleuCache cb;
    const auto& opts = pl.task.problem("PL").slots[0];
    std::vector<std::string> codes;
    for (const auto& o : opts) codes.push_back(pl.task.render("PL", {pl.task.token_id(o)}));
    codes.push_back(codes[2]);

    SECTION("component-by-component assembly") {
        std::vector<errors::ErrorSet> judged;
        const auto r = compute_group_rewards(codes, pl.problem, pl.truth_code, pl.truth_errors, pl.judge(), {}, cb, 1,
                                             &judged);
        REQUIRE(r.size() == 5);
        for (std::size_t i = 0; i < codes.size(); ++i) {
            const double sim = metrics::codebleu(codes[i], pl.truth_code, Language::java).combined;
            const double err = errors::error_match_reward(pl.verdicts.at(codes[i]), pl.truth_errors);
            double mx = 0;
            for (std::size_t j = 0; j < codes.size(); ++j)
                if (j != i) mx = std::max(mx, metrics::codebleu(codes[i], codes[j], Language::java).combined);
            CHECK(r[i].r_sim == Catch::Approx(sim).margin(1e-15));
            CHECK(r[i].r_error == err);
            CHECK(r[i].r_div == Catch::Approx(1.0 - mx).margin(1e-15));
            CHECK(r[i].total == Catch::Approx(sim + err + 1.0 - mx).margin(1e-15));
            CHECK(judged[i] == pl.verdicts.at(codes[i]));
        }
        CHECK(r[0].r_sim == Catch::Approx(1.0).margin(1e-12));
        CHECK(r[0].r_error == 1.0);
        CHECK(r[2].r_div == Catch::Approx(0.0).margin(1e-12));
    }
    SECTION("all candidates equal the truth") {
        const std::vector<std::string> truth(5, pl.truth_code);
        for (const auto& x : compute_group_rewards(truth, pl.problem, pl.truth_code, pl.truth_errors, pl.judge(), {}, cb))
            CHECK(x.total == Catch::Approx(2.0).margin(1e-12));
    }
    SECTION("weights") {
        const RewardWeights w{0.5, 2.0, 0.0};
        const auto a = compute_group_rewards(codes, pl.problem, pl.truth_code, pl.truth_errors, pl.judge(), {}, cb);
        const auto b = compute_group_rewards(codes, pl.problem, pl.truth_code, pl.truth_errors, pl.judge(), w, cb);
        for (std::size_t i = 0; i < a.size(); ++i)
            CHECK(b[i].total == Catch::Approx(0.5 * a[i].r_sim + 2.0 * a[i].r_error).margin(1e-15));
        CHECK_THROWS_AS(compute_group_rewards(codes, pl.problem, pl.truth_code, pl.truth_errors, pl.judge(),
                                              RewardWeights{-1, 1, 1}, cb),
                        ConfigError);
    }
    SECTION("reordering permutes the rewards") {
        const auto a = compute_group_rewards(codes, pl.problem, pl.truth_code, pl.truth_errors, pl.judge(), {}, cb);
        std::vector<std::size_t> perm = {3, 0, 4, 2, 1};
        std::vector<std::string> shuffled;
        for (auto i : perm) shuffled.push_back(codes[i]);
        const auto b = compute_group_rewards(shuffled, pl.problem, pl.truth_code, pl.truth_errors, pl.judge(), {}, cb);
        std::vector<double> ta, tb;
        for (std::size_t k = 0; k < perm.size(); ++k) {
            CHECK(b[k].total == a[perm[k]].total);
            ta.push_back(a[perm[k]].total);
            tb.push_back(b[k].total);
        }
        const auto aa = normalize_advantages(ta), ab = normalize_advantages(tb);
        for (std::size_t k = 0; k < aa.size(); ++k) CHECK(aa[k] == ab[k]);
    }
    SECTION("an extra error never helps") {
        std::mt19937_64 g(6);
        const std::vector<std::string> pool = {"E1", "E2", "E3", "E4", "E5"};
        for (int trial = 0; trial < 200; ++trial) {
            std::vector<errors::ErrorSet> judged(codes.size());
            for (auto& s : judged)
                for (const auto& e : pool)
                    if (g() % 3 == 0) s.insert(e);
            errors::ErrorSet truth;
            for (const auto& e : pool)
                if (g() % 2) truth.insert(e);
            const std::size_t i = g() % codes.size();
            std::string extra;
            for (const auto& e : pool)
                if (!truth.count(e) && !judged[i].count(e)) extra = e;
            if (extra.empty()) continue;
            const auto before = group_rewards(codes, judged, pl.truth_code, truth, Language::java, {}, cb);
            judged[i].insert(extra);
            const auto after = group_rewards(codes, judged, pl.truth_code, truth, Language::java, {}, cb);
            CHECK(after[i].total <= before[i].total);
            for (std::size_t j = 0; j < codes.size(); ++j)
                if (j != i) CHECK(after[j].total == before[j].total);
        }
    }
    SECTION("judge failure aborts the group") {
        Judge broken = [](const std::string& code, const corpus::Problem&) -> errors::ErrorSet {
            if (code.find("!=") != std::string::npos) throw TransportError("judge down");
            return {};
        };
        CHECK_THROWS_AS(compute_group_rewards(codes, pl.problem, pl.truth_code, pl.truth_errors, broken, {}, cb),
                        TransportError);
    }
}

TEST_CASE("advantages", "[grpo]") {
    const auto a = normalize_advantages({1, 2, 3});
    CHECK(a[0] == Catch::Approx(-1.224744871391589).epsilon(1e-12));
    CHECK(a[1] == Catch::Approx(0.0).margin(1e-15));
    CHECK(a[2] == Catch::Approx(1.224744871391589).epsilon(1e-12));
    CHECK(normalize_advantages({0.7, 0.7, 0.7}) == std::vector<double>(3, 0.0));

    std::mt19937_64 g(1);
    std::uniform_real_distribution<double> U(0.0, 3.0);
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<double> r(2 + g() % 8);
        for (double& v : r) v = U(g);
        const auto adv = normalize_advantages(r);
        double s = 0, sq = 0;
        for (double v : adv) s += v;
        CHECK(s == 0.0);
        for (double v : adv) sq += v * v;
        CHECK(std::abs(sq / static_cast<double>(adv.size()) - 1.0) < 1e-9);
    }
}

TEST_CASE("clipped surrogate", "[grpo]") {
    CHECK(clipped_surrogate({{std::log(1.5)}}, {{0.0}}, {1.0}, 0.2).value == Catch::Approx(1.2).epsilon(1e-14));
    const auto t = clipped_surrogate({{std::log(0.5)}}, {{0.0}}, {-1.0}, 0.2);
    CHECK(t.value == Catch::Approx(-0.8).epsilon(1e-14));
    CHECK(t.clip_fraction == 1.0);
    CHECK(t.grad[0][0] == 0.0);

    const auto adv = normalize_advantages({0.3, 1.9, 1.1, 0.4});
    const TokenMatrix l = {{-1, -2}, {-0.5, -0.1}, {-3, -1}, {-2, -2}};
    const auto same = clipped_surrogate(l, l, adv, 0.2);
    CHECK(same.value == Catch::Approx(0.0).margin(1e-15));
    CHECK(same.clip_fraction == 0.0);
    CHECK_THROWS_AS(clipped_surrogate(l, l, {1.0}, 0.2), ShapeError);
    CHECK_THROWS_AS(clipped_surrogate(l, l, adv, 0.0), ConfigError);

    SECTION("token and sequence modes agree at the old policy") {
        const auto tok = clipped_surrogate(l, l, adv, 0.2, RatioMode::token);
        const auto seq = clipped_surrogate(l, l, adv, 0.2, RatioMode::sequence);
        for (std::size_t i = 0; i < l.size(); ++i)
            for (std::size_t k = 0; k < 2; ++k) CHECK(seq.grad[i][k] == Catch::Approx(2.0 * tok.grad[i][k]));
    }
}

TEST_CASE("KL penalty", "[grpo]") {
    const TokenMatrix l = {{-1, -2}, {-0.5, -0.1}};
    CHECK(kl_penalty(l, l).value == 0.0);
    const TokenMatrix lr = {{-1 + std::log(2.0), -2 + std::log(2.0)}, {-0.5 + std::log(2.0), -0.1 + std::log(2.0)}};
    CHECK(kl_penalty(l, lr).value == Catch::Approx(1.0 - std::log(2.0)).epsilon(1e-14));
    CHECK(kl_penalty(l, lr).value == Catch::Approx(0.3069).margin(1e-4));

    std::mt19937_64 g(2);
    std::normal_distribution<double> N(0.0, 3.0);
    for (int i = 0; i < 1000; ++i) {
        const TokenMatrix a = {{N(g), N(g)}}, b = {{N(g), N(g)}};
        CHECK(kl_penalty(a, b, RatioMode::token).value >= 0.0);
        CHECK(kl_penalty(a, b, RatioMode::sequence).value >= 0.0);
    }
}

TEST_CASE("objective gradient", "[grpo]") {
    std::mt19937_64 g(77);
    for (int i = 0; i < 20; ++i) {
        const auto r = kt::objective_fd_check(g);
        CHECK(r.checked > 0);
        CHECK(r.max_rel_err < 1e-4);
    }
}

TEST_CASE("grpo step", "[grpo]") {
    const auto pl = kt::planted_task();
    const policy::ToyPolicy pol(pl.task);
    metrics::CodeBleuCache cb;
    const auto item = pl.item();

    SECTION("G = 1 is rejected") {
        GrpoConfig cfg;
        cfg.G = 1;
        CHECK_THROWS_AS(cfg.validate(), ConfigError);
        CHECK_THROWS_AS(grpo_train(pol, pol.init(), {item}, pl.judge(), cfg), ConfigError);
    }
    SECTION("equal rewards leave only the KL pull") {
        GrpoConfig cfg;
        cfg.weights = {0, 0, 0};
        cfg.beta = 0;
        Rng rng(4);
        const auto theta = kt::random_params(pol, pl.prompt, rng);
        const auto ref = pol.init();
        auto r = grpo_step(pol, theta, ref, {&item}, pl.judge(), cfg, cb, 11);
        CHECK(r.theta.rows == theta.rows);

        cfg.beta = 0.5;
        auto pulled = theta;
        for (int i = 0; i < 20; ++i) pulled = grpo_step(pol, pulled, ref, {&item}, pl.judge(), cfg, cb, 100 + i).theta;
        auto refp = ref;
        pol.touch(refp, pl.prompt);
        CHECK(total_variation(pol, pulled, refp, pl.prompt) < total_variation(pol, theta, refp, pl.prompt));
    }
    SECTION("trace records") {
        GrpoConfig cfg;
        cfg.iterations = 12;
        cfg.seed = 3;
        const auto res = grpo_train(pol, pol.init(), {item}, pl.judge(), cfg);
        REQUIRE(res.trace.size() == 12);
        for (std::size_t i = 0; i < res.trace.size(); ++i) {
            const auto& t = res.trace[i];
            CHECK(t.iteration == i);
            for (double v : {t.mean_reward, t.mean_r_sim, t.mean_r_error, t.mean_r_div, t.kl, t.clip_fraction, t.entropy})
                CHECK(std::isfinite(v));
            CHECK(t.mean_reward == Catch::Approx(t.mean_r_sim + t.mean_r_error + t.mean_r_div).margin(1e-12));
            CHECK(t.clip_fraction >= 0.0);
            CHECK(t.clip_fraction <= 1.0);
        }
        const std::string csv = trace_csv(res.trace);
        CHECK(csv.rfind("iteration,mean_reward,mean_r_sim,mean_r_error,mean_r_div,kl,clip_fraction", 0) == 0);
        CHECK(std::count(csv.begin(), csv.end(), '\n') == 13);

        const auto again = grpo_train(pol, pol.init(), {item}, pl.judge(), cfg);
        CHECK(again.theta.rows == res.theta.rows);
    }
    SECTION("without KL the expected reward does not fall") {
        GrpoConfig cfg;
        cfg.beta = 0;
        cfg.iterations = 200;
        cfg.seed = 8;
        std::vector<policy::ToyPolicyParams> checkpoints = {[&] {
            auto t = pol.init();
            pol.touch(t, pl.prompt);
            return t;
        }()};
        grpo_train(pol, pol.init(), {item}, pl.judge(), cfg, nullptr,
                   [&](const TraceRecord& r, const policy::ToyPolicyParams& t) {
                       if ((r.iteration + 1) % 50 == 0) checkpoints.push_back(t);
                   });
        REQUIRE(checkpoints.size() == 5);
        auto prev = mc_reward(pol, checkpoints[0], pl, 300, 1);
        const double start = prev.first;
        for (std::size_t c = 1; c < checkpoints.size(); ++c) {
            const auto cur = mc_reward(pol, checkpoints[c], pl, 300, 1000 * c);
            CAPTURE(c, prev.first, cur.first);
            CHECK(cur.first >= prev.first - 3 * std::hypot(prev.second, cur.second));
            prev = cur;
        }
        CHECK(prev.first > start);
    }
}
