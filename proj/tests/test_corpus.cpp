#include <catch_amalgamated.hpp>

#include <set>

#include "support.hpp"

using namespace kaser;
using namespace kaser::corpus;

namespace {

std::string header(int n_problems, int n_kcs) {
    json kcs = json::array(), probs = json::array();
    for (int k = 0; k < n_kcs; ++k) kcs.push_back({{"id", "K" + std::to_string(k)}, {"name", "kc " + std::to_string(k)}});
    for (int p = 0; p < n_problems; ++p)
        probs.push_back({{"id", "P" + std::to_string(p)},
                         {"statement", "problem " + std::to_string(p)},
                         {"language", "java"},
                         {"kc_ids", {"K" + std::to_string(p % n_kcs)}}});
    return json{{"kcs", kcs}, {"problems", probs}}.dump() + "\n";
}

std::string line(const std::string& s, const std::string& p, int order, bool correct,
                 std::optional<std::vector<std::string>> errs = std::nullopt) {
    json j = {{"student_id", s}, {"problem_id", p}, {"order_index", order}, {"code", "int a;"}, {"correct", correct ? 1 : 0}};
    if (errs) j["errors"] = *errs;
    return j.dump() + "\n";
}

// Independent restatement of the documented fold rule: sort, Fisher-Yates with
// mt19937_64 drawing j = draw % (i + 1), consecutive test slices.
std::vector<std::vector<std::string>> oracle_test_slices(std::vector<std::string> units, int folds, double ratio,
                                                         std::uint64_t seed) {
    std::sort(units.begin(), units.end());
    std::mt19937_64 g(seed);
    for (std::size_t i = units.size() - 1; i > 0; --i) std::swap(units[i], units[g() % (i + 1)]);
    const auto s = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(units.size())));
    std::vector<std::vector<std::string>> out;
    for (int f = 0; f < folds; ++f) {
        std::vector<std::string> v(units.begin() + f * s, units.begin() + (f + 1) * s);
        std::sort(v.begin(), v.end());
        out.push_back(v);
    }
    return out;
}

}  // namespace

TEST_CASE("minimal dataset loads", "[corpus]") {
    const auto d = parse_dataset(header(1, 1) + line("S1", "P0", 0, true));
    CHECK(d.kcs().size() == 1);
    CHECK(d.problems().size() == 1);
    CHECK(d.submissions().size() == 1);
}

TEST_CASE("correct submission with errors is rejected", "[corpus]") {
    CHECK_THROWS_AS(parse_dataset(header(1, 1) + line("S1", "P0", 0, true, std::vector<std::string>{"E1"})),
                    IntegrityError);
}

TEST_CASE("schema violations name the line", "[corpus]") {
    CHECK_THROWS_AS(parse_dataset(header(1, 1) + "{\"student_id\": \"S1\"}\n"), SchemaError);
    CHECK_THROWS_AS(parse_dataset(header(1, 1) + line("S1", "P9", 0, false)), Error);
    CHECK_THROWS_AS(parse_dataset(header(1, 1) + "not json\n"), SchemaError);
}

TEST_CASE("CodeWorkout-scale header is accepted", "[corpus]") {
    std::string text = header(50, 50);
    for (int s = 0; s < 246; ++s) text += line("S" + std::to_string(s), "P" + std::to_string(s % 50), 0, false);
    const auto d = parse_dataset(text);
    CHECK(d.students().size() == 246);
    CHECK(d.problems().size() == 50);
    CHECK(d.kcs().size() == 50);
}

TEST_CASE("dataset round-trips through its serialization", "[corpus]") {
    const auto d = load_dataset(kt::toy_dir() / "dataset.jsonl");
    const auto again = parse_dataset(serialize(d));
    CHECK(again.submissions() == d.submissions());
    CHECK(again.problems() == d.problems());
    CHECK(again.kcs() == d.kcs());
}

TEST_CASE("history prefixes", "[corpus]") {
    std::string text = header(5, 1);
    for (int i = 0; i < 5; ++i) text += line("S1", "P" + std::to_string(i), i, i % 2 == 0);
    const auto d = parse_dataset(text);
    CHECK(history(d, "S1", 0).empty());
    const auto h3 = history(d, "S1", 3);
    REQUIRE(h3.size() == 3);
    for (int i = 0; i < 3; ++i) CHECK(h3[static_cast<std::size_t>(i)]->order_index == i);
    CHECK(history(d, "S1", 99).size() == 5);
}

TEST_CASE("splits", "[corpus]") {
    std::vector<std::string> students;
    for (int i = 0; i < 10; ++i) students.push_back("S" + std::to_string(i));

    SECTION("10 students give one test student per fold") {
        const auto folds = split(students, {SplitAxis::by_student, 5, 0.1, 0.1, 3});
        REQUIRE(folds.size() == 5);
        std::set<std::string> tested;
        for (const auto& f : folds) {
            CHECK(f.test.size() == 1);
            CHECK(f.val.size() == 1);
            CHECK(f.train.size() == 8);
            tested.insert(f.test.begin(), f.test.end());
        }
        CHECK(tested.size() == 5);
    }
    SECTION("same seed, same folds") {
        const auto a = split(students, {SplitAxis::by_student, 5, 0.1, 0.1, 11});
        const auto b = split(students, {SplitAxis::by_student, 5, 0.1, 0.1, 11});
        for (std::size_t f = 0; f < a.size(); ++f) {
            CHECK(a[f].test == b[f].test);
            CHECK(a[f].val == b[f].val);
            CHECK(a[f].train == b[f].train);
        }
    }
    SECTION("50 problems: test folds of five, matching the enumerated assignment") {
        std::vector<std::string> problems;
        for (int i = 0; i < 50; ++i) problems.push_back("P" + std::to_string(100 + i));
        for (std::uint64_t seed : {0ULL, 1ULL, 42ULL, 20240611ULL}) {
            const auto folds = split(problems, {SplitAxis::by_problem, 5, 0.1, 0.1, seed});
            const auto expect = oracle_test_slices(problems, 5, 0.1, seed);
            for (std::size_t f = 0; f < 5; ++f) {
                CHECK(folds[f].test.size() == 5);
                CHECK(folds[f].test == expect[f]);
                CHECK(folds[f].val == expect[(f + 1) % 5]);
            }
        }
    }
    SECTION("roles partition the units") {
        const auto folds = split(students, {SplitAxis::by_student, 5, 0.1, 0.1, 5});
        for (const auto& f : folds) {
            std::set<std::string> all(f.train.begin(), f.train.end());
            all.insert(f.val.begin(), f.val.end());
            all.insert(f.test.begin(), f.test.end());
            CHECK(all.size() == students.size());
            CHECK(f.train.size() + f.val.size() + f.test.size() == students.size());
        }
    }
    SECTION("bad plans are rejected") {
        CHECK_THROWS_AS(split(students, {SplitAxis::by_student, 1, 0.1, 0.1, 0}), ConfigError);
        CHECK_THROWS_AS(split(students, {SplitAxis::by_student, 5, 0.2, 0.1, 0}), ConfigError);
        CHECK_THROWS_AS(split(std::vector<std::string>{"a", "b"}, {SplitAxis::by_student, 2, 0.1, 0.1, 0}),
                        ConfigError);
    }
}
