#include <catch_amalgamated.hpp>

#include "support.hpp"

using namespace kaser;
using namespace kaser::errors;

namespace {

ErrorCatalog small_catalog() {
    return ErrorCatalog({{"E1", "incorrect comparison logic", Category::logical},
                         {"E2", "missing return statement", Category::syntax},
                         {"E3", "array index out of bounds", Category::runtime}});
}

JudgeConfig judge_cfg(int retries = 3) {
    JudgeConfig c;
    c.endpoint.retries = retries;
    return c;
}

const corpus::Problem kProblem{"P1", "Return true when x equals y.", Language::java, {"K1"}};

std::string three_wrong() {
    json header = {{"kcs", {{{"id", "K1"}, {"name", "Conditional logic"}}}},
                   {"problems", {{{"id", "P1"}, {"statement", "Return x."}, {"language", "java"}, {"kc_ids", {"K1"}}}}}};
    std::string text = header.dump() + "\n";
    for (int i = 1; i <= 3; ++i)
        text += json{{"student_id", "S" + std::to_string(i)},
                     {"problem_id", "P1"},
                     {"order_index", 0},
                     {"code", "int f() { return " + std::to_string(i) + "; }"},
                     {"correct", 0}}
                    .dump() +
                "\n";
    return text;
}

std::string annotation_reply(const std::vector<std::string>& labels) {
    json errs = json::array();
    for (const auto& l : labels) errs.push_back({{"Reasoning", "because"}, {"Category", "Logical"}, {"Label", l}});
    return json{{"errors", errs}}.dump();
}

bool mentions(const llm::ChatRequest& r, const std::string& s) {
    return r.messages.back().content.find(s) != std::string::npos;
}

}  // namespace

TEST_CASE("set algebra", "[errors]") {
    CHECK(iou({}, {}) == 1.0);
    CHECK(iou({"E1"}, {"E1", "E2"}) == 0.5);
    CHECK(iou({"E1"}, {"E2"}) == 0.0);

    CHECK(error_match_reward({}, {}) == 1.0);
    CHECK(error_match_reward({"E1", "E2", "E3"}, {"E1"}) == Catch::Approx(1.0 / 3.0).epsilon(1e-15));
    CHECK(error_match_reward({}, {"E1"}) == 0.0);
    CHECK(error_match_reward({"E1"}, {}) == 0.0);

    // Extraneous errors never raise the reward.
    std::mt19937_64 g(5);
    const std::vector<std::string> ids = {"E1", "E2", "E3", "E4", "E5", "E6"};
    auto draw = [&] {
        ErrorSet s;
        for (const auto& id : ids)
            if (g() % 2) s.insert(id);
        return s;
    };
    for (int i = 0; i < 500; ++i) {
        const ErrorSet pred = draw(), truth = draw();
        for (const auto& extra : ids) {
            if (truth.count(extra) || pred.count(extra)) continue;
            ErrorSet more = pred;
            more.insert(extra);
            CHECK(error_match_reward(more, truth) <= error_match_reward(pred, truth));
        }
        const double r = error_match_reward(pred, truth);
        CHECK(r >= 0.0);
        CHECK(r <= 1.0);
        CHECK(r == error_match_reward(truth, pred));
    }
}

TEST_CASE("chi-squared distance", "[errors]") {
    CHECK(chi_squared_distance({{"E1", 3}, {"E2", 1}}, {{"E1", 3}, {"E2", 1}}) == 0.0);
    CHECK(chi_squared_distance({{"E1", 2}, {"E2", 0}}, {{"E1", 0}, {"E2", 2}}) == 4.0);
    // (3-1)^2/4 + 0 + (0-2)^2/2
    CHECK(chi_squared_distance({{"A", 3}, {"B", 1}}, {{"A", 1}, {"B", 1}, {"C", 2}}) == Catch::Approx(3.0));
    CHECK(chi_squared_distance({{"A", 2}}, {{"A", 4}}, true) == 0.0);
    CHECK_THROWS_AS(chi_squared_distance({}, {}), ConfigError);

    const auto d = count_errors({{"E1"}, {"E1", "E2"}, {}});
    CHECK(d.at("E1") == 2.0);
    CHECK(d.at("E2") == 1.0);
}

TEST_CASE("catalog", "[errors]") {
    const auto c = small_catalog();
    CHECK(c.resolve("E2") == "E2");
    CHECK(c.resolve("  Incorrect   comparison logic. ") == "E1");
    CHECK(!c.resolve("something else"));
    CHECK_THROWS_AS(ErrorCatalog({{"E1", "a", Category::logical}, {"E1", "b", Category::logical}}), IntegrityError);
    CHECK_THROWS_AS(ErrorCatalog({{"E1", "  ", Category::logical}}), IntegrityError);
    CHECK(parse_catalog(to_json(c)).labels() == c.labels());
}

TEST_CASE("judge", "[errors]") {
    const auto cat = small_catalog();

    SECTION("parses a verdict") {
        kt::ScriptedChat chat([](auto&, int) { return kt::reply(R"({"errors":["E1"]})"); });
        const auto r = judge_errors("x = y", kProblem, cat, judge_cfg(), chat);
        CHECK(r.errors == ErrorSet{"E1"});
        CHECK(r.retries == 0);
        CHECK(chat.seen().front().temperature == 0.0);
    }
    SECTION("retries malformed replies") {
        kt::ScriptedChat chat([](auto&, int call) {
            return kt::reply(call < 2 ? "I think it is wrong." : R"({"errors":["E1","E3"]})");
        });
        const auto r = judge_errors("x = y", kProblem, cat, judge_cfg(), chat);
        CHECK(r.errors == ErrorSet{"E1", "E3"});
        CHECK(r.retries == 2);
        CHECK(chat.calls() == 3);
    }
    SECTION("drops labels outside the catalog") {
        kt::ScriptedChat chat([](auto&, int) { return kt::reply(R"({"errors":["NOT_IN_CATALOG"]})"); });
        const auto r = judge_errors("x = y", kProblem, cat, judge_cfg(), chat);
        CHECK(r.errors.empty());
        CHECK(r.dropped == 1);
    }
    SECTION("persistent failure is surfaced") {
        kt::ScriptedChat garbage([](auto&, int) { return kt::reply("nope"); });
        CHECK_THROWS_AS(judge_errors("x", kProblem, cat, judge_cfg(2), garbage), TransportError);
        CHECK(garbage.calls() == 3);
        kt::ScriptedChat down([](auto&, int) -> std::vector<llm::ChatChoice> { throw TransportError("refused"); });
        CHECK_THROWS_AS(judge_errors("x", kProblem, cat, judge_cfg(1), down), TransportError);
    }
    SECTION("cache") {
        kt::ScriptedChat chat([](auto&, int) { return kt::reply(R"({"errors":["E2", "nope"]})"); });
        JudgeCache cache(judge_cfg(), chat, cat);
        CHECK(cache("a", kProblem).errors == ErrorSet{"E2"});
        CHECK(cache("a", kProblem).errors == ErrorSet{"E2"});
        cache("b", kProblem);
        CHECK(chat.calls() == 2);
        CHECK(cache.hits() == 1);
        CHECK(cache.dropped() == 2);
    }
}

TEST_CASE("annotation", "[errors]") {
    const auto data = corpus::parse_dataset(three_wrong());
    llm::EndpointConfig ep;
    ep.retries = 1;
    ep.max_parallel = 2;
    kt::TempDir tmp;

    SECTION("three submissions") {
        kt::ScriptedChat chat([](const llm::ChatRequest& r, int) {
            if (mentions(r, "return 1;")) return kt::reply(annotation_reply({"wrong constant", "wrong constant"}));
            if (mentions(r, "return 2;")) return kt::reply(annotation_reply({"off by one"}));
            return kt::reply(annotation_reply({"wrong constant", "missing check"}));
        });
        const auto out = annotate_dataset(data, ep, chat, {"r1", false, tmp / "audit.jsonl"});
        CHECK(out.failures.empty());
        REQUIRE(out.records.size() == 3);
        for (const auto& s : out.dataset.submissions()) {
            REQUIRE(s.errors);
            CHECK(!s.errors->empty());
        }
        CHECK(out.dataset.submissions()[0].errors->size() == 1);
        CHECK(load_audit(tmp / "audit.jsonl").size() == 3);

        SECTION("resume reuses the audit") {
            kt::ScriptedChat none([](auto&, int) -> std::vector<llm::ChatChoice> { throw TransportError("offline"); });
            const auto again = annotate_dataset(data, ep, none, {"r1", true, tmp / "audit.jsonl"});
            CHECK(again.reused == 3);
            CHECK(again.failures.empty());
            CHECK(none.calls() == 0);
            CHECK(annotation_f1(out.records, again.records) == 1.0);
        }
    }
    SECTION("outage on one item") {
        kt::ScriptedChat chat([](const llm::ChatRequest& r, int) {
            if (mentions(r, "return 2;")) throw TransportError("503");
            return kt::reply(annotation_reply({"wrong constant"}));
        });
        const auto out = annotate_dataset(data, ep, chat, {"r1", false, {}});
        REQUIRE(out.failures.size() == 1);
        CHECK(out.failures[0].find("S2") != std::string::npos);
        const auto& subs = out.dataset.submissions();
        CHECK(subs[0].errors.has_value());
        CHECK(!subs[1].errors.has_value());
        CHECK(subs[2].errors.has_value());
    }
    SECTION("agreement between runs") {
        AnnotationRecord a{"S1", "P1", "r1", "", "", {{"Wrong constant.", Category::logical, ""}}, 0, true, ""};
        AnnotationRecord b = a;
        b.parsed.push_back({"missing check", Category::logical, ""});
        // 2 * 1 / (1 + 2)
        CHECK(annotation_f1({a}, {b}) == Catch::Approx(2.0 / 3.0));
        CHECK(annotation_f1({a}, {a}) == 1.0);
    }
}
