#include <catch_amalgamated.hpp>

#include "support.hpp"

using namespace kaser;
using namespace kaser::eval;

namespace {

Services toy_services(const corpus::Dataset& d, kt::InProcessMock& mock) {
    return {kt::code_judge(d), [&mock](const std::vector<std::string>& t) { return mock.embed(t); }};
}

double column_mean(const EvalRun& run, const std::string& col) {
    for (const auto& [name, a] : run.aggregates)
        if (name == col) return a.mean;
    throw std::out_of_range(col);
}

}  // namespace

TEST_CASE("best of K", "[eval]") {
    const std::vector<double> cb = {0.3, 0.9, 0.5, 0.9, 0.1};
    const std::vector<ErrorSet> judged = {{"E1"}, {}, {"E1", "E2"}, {"E3"}, {"E1", "E2"}};
    const ErrorSet truth = {"E1", "E2"};

    const auto one = best_of_k(cb, judged, truth, 1);
    CHECK(one.codebleu == 0.3);
    CHECK(one.iou == 0.5);
    const auto five = best_of_k(cb, judged, truth, 5);
    CHECK(five.codebleu == 0.9);
    CHECK(five.best_codebleu == 1);
    CHECK(five.iou == 1.0);
    CHECK(five.best_iou == 2);

    const auto joint = best_of_k(cb, judged, truth, 5, true);
    CHECK(joint.best_codebleu == joint.best_iou);
    CHECK(joint.best_codebleu == 2);
    CHECK_THROWS_AS(best_of_k(cb, judged, truth, 0), ConfigError);
    CHECK_THROWS_AS(best_of_k(cb, judged, truth, 6), ConfigError);

    SECTION("monotone in K on random inputs") {
        std::mt19937_64 g(5);
        std::uniform_real_distribution<double> U;
        for (int trial = 0; trial < 300; ++trial) {
            std::vector<double> s(8);
            std::vector<ErrorSet> j(8);
            for (std::size_t i = 0; i < 8; ++i) {
                s[i] = U(g);
                for (const char* e : {"E1", "E2", "E3"})
                    if (g() % 2) j[i].insert(e);
            }
            double pc = -1, pi = -1;
            for (std::size_t k = 1; k <= 8; ++k) {
                const auto r = best_of_k(s, j, truth, k);
                CHECK(r.codebleu >= pc);
                CHECK(r.iou >= pi);
                pc = r.codebleu;
                pi = r.iou;
            }
        }
    }
    SECTION("one exact copy of the truth") {
        const corpus::Problem p{"P", "s", Language::java, {"K1"}};
        const std::string truth_code = "int f() {\n    return 1;\n}";
        const std::vector<std::string> cands = {"int g;", "x = 2;", truth_code, "return;", "int f() {}"};
        metrics::CodeBleuCache cache;
        const auto r = pair_report("S", p, cands, truth_code, kt::code_labels(truth_code), kt::code_judge(), {}, cache);
        REQUIRE(r.at.size() == 2);
        CHECK(r.at[1].k == 5);
        CHECK(r.at[1].codebleu == Catch::Approx(1.0).margin(1e-12));
        CHECK(r.at[1].iou == 1.0);
        CHECK(r.at[0].codebleu == Catch::Approx(metrics::codebleu(cands[0], truth_code, Language::java).combined));
        CHECK_THROWS_AS(pair_report("S", p, {"a"}, truth_code, {}, kt::code_judge(), {}, cache), ConfigError);
    }
}

TEST_CASE("problem coverage", "[eval]") {
    const std::vector<ErrorSet> truth = {{"E1"}, {"E1", "E2"}, {}};
    auto [iou, chi] = problem_coverage(truth, truth);
    CHECK(iou == 1.0);
    CHECK(chi == 0.0);
    std::tie(iou, chi) = problem_coverage({{"E1"}}, truth);
    CHECK(iou == 0.5);
    // counts [3,1,0] vs [1,1,2]
    std::tie(iou, chi) = problem_coverage({{"A"}, {"A"}, {"A", "B"}}, {{"A", "B"}, {"C"}, {"C"}});
    CHECK(chi == Catch::Approx(3.0).epsilon(1e-15));
    std::tie(iou, chi) = problem_coverage({{}}, {{}});
    CHECK(iou == 1.0);
    CHECK(chi == 0.0);
    CHECK_THROWS_AS(problem_coverage(truth, {}), ConfigError);
}

TEST_CASE("problem diversity", "[eval]") {
    metrics::CodeBleuCache cb;
    kt::InProcessMock mock(kt::toy_mock_config());
    const Embed embed = [&](const std::vector<std::string>& t) { return mock.embed(t); };
    const std::string code = "int f(int x) {\n    return x;\n}";

    auto [cos, comp] = problem_diversity({code, code, code}, Language::java, embed, cb);
    CHECK(cos == Catch::Approx(0.0).margin(1e-12));
    CHECK(comp == Catch::Approx(0.0).margin(1e-12));

    const Embed axes = [](const std::vector<std::string>& t) {
        std::vector<clustering::Vector> v;
        for (std::size_t i = 0; i < t.size(); ++i) {
            clustering::Vector e(t.size(), 0.0);
            e[i] = 1.0;
            v.push_back(e);
        }
        return v;
    };
    std::tie(cos, comp) = problem_diversity({"a = 1;", "b = 2;"}, Language::java, axes, cb);
    CHECK(cos == 1.0);

    const std::vector<std::string> three = {code, "int f(int y) {\n    return y + 1;\n}", "while (true) { x++; }"};
    const auto vecs = mock.embed(three);
    double bc = 0, bd = 0;
    for (std::size_t i = 0; i < 3; ++i) {
        double mx = 0;
        for (std::size_t j = 0; j < 3; ++j) {
            if (j == i) continue;
            mx = std::max(mx, metrics::codebleu(three[i], three[j], Language::java).combined);
            if (j > i) bc += clustering::cosine_distance(vecs[i], vecs[j]);
        }
        bd += 1.0 - mx;
    }
    std::tie(cos, comp) = problem_diversity(three, Language::java, embed, cb);
    CHECK(cos == Catch::Approx(bc / 3.0).epsilon(1e-14));
    CHECK(comp == Catch::Approx(bd / 3.0).epsilon(1e-14));

    const std::vector<std::string> rev(three.rbegin(), three.rend());
    const auto [cos2, comp2] = problem_diversity(rev, Language::java, embed, cb);
    CHECK(cos2 == Catch::Approx(cos).epsilon(1e-14));
    CHECK(comp2 == Catch::Approx(comp).epsilon(1e-14));
    CHECK_THROWS_AS(problem_diversity({code}, Language::java, embed, cb), ConfigError);
}

TEST_CASE("evaluation runs", "[eval]") {
    const auto d = kt::annotated_toy();
    kt::InProcessMock mock(kt::toy_mock_config());
    const auto svc = toy_services(d, mock);
    const auto pair_folds = corpus::split(d, {corpus::SplitAxis::by_student, 5, 0.1, 0.1, 3});
    const auto prob_folds = corpus::split(d, {corpus::SplitAxis::by_problem, 5, 0.1, 0.1, 3});

    SECTION("ceiling run") {
        const auto run = run_eval(d, pair_folds, kt::ceiling_predictions(d, 5), Level::pair, svc, {});
        for (const auto& f : run.folds)
            for (const auto& p : f.pairs)
                for (const auto& a : p.at) {
                    CHECK(a.codebleu == Catch::Approx(1.0).margin(1e-12));
                    CHECK(a.iou == 1.0);
                }
        CHECK(column_mean(run, "CodeBLEU@1") == Catch::Approx(1.0).margin(1e-12));
        CHECK(column_mean(run, "IoU@5") == 1.0);

        const auto prun = run_eval(d, prob_folds, kt::ceiling_predictions(d, 1), Level::problem, svc, {});
        for (const auto& f : prun.folds)
            for (const auto& p : f.problems) {
                CHECK(p.coverage_iou == 1.0);
                CHECK(p.chi_sq == 0.0);
                CHECK(p.n_candidates == p.n_truth);
            }
    }
    SECTION("shuffled-truth control scores lower") {
        const auto ceiling = run_eval(d, pair_folds, kt::ceiling_predictions(d, 1), Level::pair, svc, {{1}});
        Predictions shuffled;
        for (const auto& p : d.problems()) {
            std::vector<const corpus::Submission*> subs;
            for (const auto& s : d.submissions())
                if (s.problem_id == p.id) subs.push_back(&s);
            for (std::size_t i = 0; i < subs.size(); ++i)
                shuffled[{subs[i]->student_id, p.id}] = {subs[(i + 1) % subs.size()]->code};
        }
        const auto control = run_eval(d, pair_folds, shuffled, Level::pair, svc, {{1}});
        CHECK(column_mean(control, "CodeBLEU@1") < column_mean(ceiling, "CodeBLEU@1"));
    }
    SECTION("axis and level must agree") {
        CHECK_THROWS_AS(run_eval(d, prob_folds, kt::ceiling_predictions(d, 5), Level::pair, svc, {}), ConfigError);
        CHECK_THROWS_AS(run_eval(d, pair_folds, kt::ceiling_predictions(d, 1), Level::problem, svc, {}), ConfigError);
        CHECK_THROWS_AS(run_eval(d, pair_folds, {}, Level::pair, svc, {}), NotFoundError);
        CHECK_THROWS_AS(run_eval(kaser::corpus::load_dataset(kt::toy_dir() / "dataset.jsonl"), pair_folds,
                                 kt::ceiling_predictions(d, 5), Level::pair, svc, {}),
                        ConfigError);
    }
    SECTION("reports recompute from their items") {
        Predictions noisy;
        std::mt19937_64 g(12);
        std::vector<std::string> pool;
        for (const auto& s : d.submissions()) pool.push_back(s.code);
        for (const auto& s : d.submissions()) {
            std::vector<std::string> c;
            for (int i = 0; i < 5; ++i) c.push_back(pool[g() % pool.size()]);
            noisy[{s.student_id, s.problem_id}] = c;
        }
        for (auto [level, folds] : {std::pair{Level::pair, pair_folds}, std::pair{Level::problem, prob_folds}}) {
            const auto run = run_eval(d, folds, noisy, level, svc, {}, "noisy");
            const auto again = aggregates_from_csv(items_csv(run), columns(level, run.cfg));
            REQUIRE(again.size() == run.aggregates.size());
            for (std::size_t i = 0; i < again.size(); ++i) {
                CHECK(again[i].first == run.aggregates[i].first);
                CHECK(again[i].second.mean == Catch::Approx(run.aggregates[i].second.mean).epsilon(1e-12));
                CHECK(again[i].second.std == Catch::Approx(run.aggregates[i].second.std).epsilon(1e-12).margin(1e-15));
            }
            if (level == Level::pair)
                for (const auto& f : run.folds)
                    for (const auto& p : f.pairs) {
                        CHECK(p.at[0].codebleu <= p.at[1].codebleu);
                        CHECK(p.at[0].iou <= p.at[1].iou);
                    }

            kt::TempDir tmp;
            write_report(run, tmp.path());
            const std::string stem(to_string(level));
            CHECK(std::filesystem::exists(tmp / (stem + "_items.csv")));
            const auto summary = kt::json::parse(read_file(tmp / (stem + "_summary.json")));
            CHECK(summary.at("model") == "noisy");
            CHECK(summary.at("folds") == 5);

            auto tampered = run;
            tampered.aggregates[0].second.mean += 0.01;
            kt::TempDir tmp2;
            CHECK_THROWS_AS(write_report(tampered, tmp2.path()), IntegrityError);
            CHECK(!std::filesystem::exists(tmp2 / (stem + "_items.csv")));
        }
    }
}

TEST_CASE("paired t-test", "[eval]") {
    // differences 1, 2, 3, 4 -> mean 2.5, sd 1.2909944, t = 3.8729833, df 3
    const auto r = paired_t_test({2, 4, 6, 8}, {1, 2, 3, 4});
    CHECK(r.mean_diff == 2.5);
    CHECK(r.df == 3);
    CHECK(r.t == Catch::Approx(3.872983346207417).epsilon(1e-12));
    CHECK(r.p_value == Catch::Approx(0.030466291662170977).epsilon(1e-6));
    CHECK(paired_t_test({1, 2}, {1, 2}).p_value == 1.0);
    CHECK_THROWS_AS(paired_t_test({1}, {1}), ConfigError);
    CHECK_THROWS_AS(paired_t_test({1, 2}, {1}), ShapeError);
}
