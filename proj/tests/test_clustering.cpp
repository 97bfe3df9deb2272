#include <catch_amalgamated.hpp>

#include <set>

#include "support.hpp"

using namespace kaser;
using namespace kaser::clustering;

namespace {

std::vector<Vector> random_points(std::mt19937_64& g, std::size_t n, std::size_t dim) {
    std::normal_distribution<double> N;
    std::vector<Vector> pts(n, Vector(dim));
    for (auto& p : pts)
        for (double& x : p) x = N(g);
    return pts;
}

std::vector<std::set<std::size_t>> groups(const ClusterAssignment& a) {
    std::vector<std::set<std::size_t>> out;
    for (const auto& m : a.members()) out.emplace_back(m.begin(), m.end());
    return out;
}

const std::vector<std::string> kConditional = {"incorrect conditional structure", "conditional logic error",
                                               "missing conditional logic", "incorrect conditional logic"};

}  // namespace

TEST_CASE("cosine distance", "[clustering]") {
    CHECK(cosine_distance({1, 2, 3}, {1, 2, 3}) == Catch::Approx(0.0).margin(1e-15));
    CHECK(cosine_distance({1, 0}, {0, 1}) == 1.0);
    CHECK(cosine_distance({1, 0}, {-1, 0}) == 2.0);
    CHECK_THROWS_AS(cosine_distance({0, 0}, {1, 0}), NumericError);
    CHECK_THROWS_AS(cosine_distance({1}, {1, 0}), ShapeError);
}

TEST_CASE("agglomerative clustering", "[clustering]") {
    const std::vector<Vector> three = {{1, 0, 0}, {1, 0, 0}, {0, 0, 1}};

    SECTION("identical pair merges first") {
        for (auto link : {Linkage::average, Linkage::complete, Linkage::single}) {
            const auto dg = hac(three, link);
            REQUIRE(dg.merges.size() == 2);
            CHECK(dg.merges[0] == Merge{0, 1, 0.0, 2});
            CHECK(dg.merges[1].a == 2);
            CHECK(dg.merges[1].b == 3);
            CHECK(dg.merges[1].distance == Catch::Approx(1.0));
        }
    }
    SECTION("two points") {
        const auto dg = hac({{1, 0}, {1, 1}});
        REQUIRE(dg.merges.size() == 1);
        CHECK(dg.merges[0].distance == Catch::Approx(1.0 - 1.0 / std::sqrt(2.0)).epsilon(1e-14));
    }
    SECTION("matches the brute-force agglomeration") {
        std::mt19937_64 g(17);
        for (auto link : {Linkage::average, Linkage::complete, Linkage::single})
            for (std::size_t n = 2; n <= 8; ++n)
                for (int rep = 0; rep < 10; ++rep) {
                    const auto pts = random_points(g, n, 4);
                    const auto dg = hac(pts, link);
                    CHECK(kt::same_merges(dg.merges, kt::brute_hac(pts, link)));
                    for (std::size_t s = 1; s < dg.merges.size(); ++s)
                        CHECK(dg.merges[s].distance >= dg.merges[s - 1].distance - 1e-12);
                }
    }
    SECTION("errors") {
        CHECK_THROWS_AS(hac(std::vector<Vector>{{1, 0}}), ConfigError);
        CHECK_THROWS_AS(hac(std::vector<Vector>{{1, 0}, {1, 0, 0}}), ShapeError);
    }
}

TEST_CASE("cutting the dendrogram", "[clustering]") {
    const std::vector<Vector> three = {{1, 0, 0}, {1, 0, 0}, {0, 0, 1}};
    const auto dg = hac(three);
    CHECK(cut(dg, 3).labels == std::vector<std::size_t>{0, 1, 2});
    CHECK(cut(dg, 1).labels == std::vector<std::size_t>{0, 0, 0});
    const auto two = groups(cut(dg, 2));
    CHECK(two == std::vector<std::set<std::size_t>>{{0, 1}, {2}});
    CHECK_THROWS_AS(cut(dg, 0), ConfigError);
    CHECK_THROWS_AS(cut(dg, 4), ConfigError);

    std::mt19937_64 g(3);
    const auto pts = random_points(g, 12, 3);
    const auto big = hac(pts);
    for (std::size_t k = 1; k <= 12; ++k) {
        const auto a = cut(big, k);
        CHECK(std::set<std::size_t>(a.labels.begin(), a.labels.end()).size() == k);
    }
}

TEST_CASE("cluster representatives", "[clustering]") {
    llm::EndpointConfig ep;
    ep.retries = 2;

    SECTION("closed choice from the cluster's list") {
        kt::ScriptedChat chat([](const llm::ChatRequest& r, int) {
            CHECK(r.messages.back().content.find("[\"incorrect conditional structure\", \"conditional logic error\"") !=
                  std::string::npos);
            return kt::reply(R"({"Reasoning": "Most are about conditions.", "Representative_error": "incorrect conditional logic"})");
        });
        std::vector<EmbeddedError> pts;
        for (std::size_t i = 0; i < kConditional.size(); ++i) pts.push_back({kConditional[i], {1.0, 0.1 * i}});
        ClusterAssignment one{1, {0, 0, 0, 0}};
        const auto s = summarize_clusters(one, pts, std::vector(4, errors::Category::logical), ep, chat);
        REQUIRE(s.catalog.size() == 1);
        CHECK(s.catalog.labels()[0].description == "incorrect conditional logic");
        CHECK(std::find(kConditional.begin(), kConditional.end(), s.catalog.labels()[0].description) !=
              kConditional.end());
        for (const auto& t : kConditional) CHECK(s.mapping.at(t) == "E01");
    }
    SECTION("descriptions outside the cluster are retried") {
        kt::ScriptedChat chat([](auto&, int call) {
            return kt::reply(call == 0 ? R"({"Representative_error": "some new error"})"
                                       : R"({"Representative_error": "conditional logic error"})");
        });
        std::vector<EmbeddedError> pts;
        for (const auto& t : kConditional) pts.push_back({t, {1.0, 0.0}});
        const auto s = summarize_clusters({1, {0, 0, 0, 0}}, pts, std::vector(4, errors::Category::logical), ep, chat);
        CHECK(s.retries == 1);
        CHECK(s.catalog.labels()[0].description == "conditional logic error");

        kt::ScriptedChat stubborn([](auto&, int) { return kt::reply(R"({"Representative_error": "nope"})"); });
        CHECK_THROWS_AS(
            summarize_clusters({1, {0, 0, 0, 0}}, pts, std::vector(4, errors::Category::logical), ep, stubborn),
            TransportError);
    }
    SECTION("singleton cluster keeps its member") {
        kt::ScriptedChat chat([](auto&, int) { return kt::reply(R"({"Representative_error": "off by one"})"); });
        const auto s = summarize_clusters({1, {0}}, {{"off by one", {1.0}}}, {errors::Category::logical}, ep, chat);
        CHECK(s.catalog.labels()[0].description == "off by one");
    }
}

TEST_CASE("embedding store", "[clustering]") {
    kt::InProcessMock mock(kt::toy_mock_config());
    EmbeddingStore store("mock");
    const auto a = store.embed({"missing return", "missing return", "off by one"}, &mock);
    CHECK(a[0].vector == a[1].vector);
    CHECK(a[0].vector != a[2].vector);
    CHECK(store.hits() == 0);
    store.embed({"missing return"}, &mock);
    CHECK(store.hits() == 1);
    CHECK_THROWS_AS(store.embed({"  "}, &mock), ConfigError);
    CHECK_THROWS_AS(EmbeddingStore().embed({"unknown"}), NotFoundError);

    kt::TempDir tmp;
    const auto path = tmp / "vectors.jsonl";
    write_file_atomic(path, "{\"text\": \"x\", \"vector\": [0.25, -1.5]}\n");
    EmbeddingStore pre;
    pre.load_precomputed(path);
    CHECK(pre.embed({"x"})[0].vector == Vector{0.25, -1.5});
    store.save(tmp / "saved.jsonl");
    EmbeddingStore back("mock");
    back.load_precomputed(tmp / "saved.jsonl");
    CHECK(back.embed({"off by one"})[0].vector == a[2].vector);
}
