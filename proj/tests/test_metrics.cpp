#include <catch_amalgamated.hpp>

#include <fstream>
#include <set>

#include "kaser/metrics/codebleu.hpp"
#include "support.hpp"

using namespace kaser;
using kt::json;
using namespace kaser::metrics;

namespace {

struct ConformanceRow {
    std::string hyp, ref;
    Language lang;
    bool identity;
    json expected;
};

std::vector<ConformanceRow> conformance_rows() {
    std::ifstream in(kt::test_data() / "codebleu_conformance.jsonl");
    std::vector<ConformanceRow> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const json j = json::parse(line);
        rows.push_back({j.at("hyp"), j.at("ref"), parse_language(j.at("language").get<std::string>()),
                        j.at("identity").get<bool>(), j.at("expected")});
    }
    return rows;
}

// Independent enumeration: recursive walk with a tree cursor, every node that
// has children contributes its serialized form.
void enumerate_subtrees(TSTreeCursor* cur, std::vector<std::string>& out) {
    TSNode n = ts_tree_cursor_current_node(cur);
    if (ts_node_child_count(n) == 0) return;
    char* s = ts_node_string(n);
    out.emplace_back(s);
    std::free(s);
    if (ts_tree_cursor_goto_first_child(cur)) {
        do enumerate_subtrees(cur, out);
        while (ts_tree_cursor_goto_next_sibling(cur));
        ts_tree_cursor_goto_parent(cur);
    }
}

double brute_syntax(const std::string& hyp, const std::string& ref, Language lang) {
    const SyntaxTree th(hyp, lang), tr(ref, lang);
    std::vector<std::string> hs, rs;
    TSTreeCursor c1 = ts_tree_cursor_new(th.root());
    enumerate_subtrees(&c1, hs);
    ts_tree_cursor_delete(&c1);
    TSTreeCursor c2 = ts_tree_cursor_new(tr.root());
    enumerate_subtrees(&c2, rs);
    ts_tree_cursor_delete(&c2);
    const std::set<std::string> have(hs.begin(), hs.end());
    std::size_t m = 0;
    for (const auto& s : rs) m += have.count(s);
    return static_cast<double>(m) / static_cast<double>(rs.size());
}

std::size_t tree_size(TSNode n) {
    std::size_t k = 1;
    for (uint32_t i = 0; i < ts_node_child_count(n); ++i) k += tree_size(ts_node_child(n, i));
    return k;
}

const std::string kJava =
    "public int f(int x) {\n    int y = x + 1;\n    return y;\n}";
const std::string kJavaRenamed =
    "public int g(int q) {\n    int w = q + 1;\n    return w;\n}";

}  // namespace

TEST_CASE("tokenize", "[metrics]") {
    SECTION("empty input") {
        CHECK(tokenize("", Language::java).tokens.empty());
        CHECK(tokenize("", Language::python).lexemes().empty());
    }
    SECTION("java lexical classes") {
        const auto ts = tokenize("int a=1;", Language::java);
        const std::vector<std::pair<std::string, TokenKind>> want = {{"int", TokenKind::keyword},
                                                                      {"a", TokenKind::identifier},
                                                                      {"=", TokenKind::op},
                                                                      {"1", TokenKind::literal},
                                                                      {";", TokenKind::punct}};
        REQUIRE(ts.tokens.size() == want.size());
        for (std::size_t i = 0; i < want.size(); ++i) {
            CHECK(ts.tokens[i].lexeme == want[i].first);
            CHECK(ts.tokens[i].kind == want[i].second);
        }
    }
    SECTION("python indentation structure") {
        // CPython's tokenize: NAME NAME OP NEWLINE INDENT NAME OP NUMBER NEWLINE DEDENT
        const auto ts = tokenize("if x:\n  y=1", Language::python);
        const std::vector<std::string> want = {"if", "x", ":", "\n", "  ", "y", "=", "1", "", ""};
        REQUIRE(ts.tokens.size() == want.size());
        for (std::size_t i = 0; i < want.size(); ++i) CHECK(ts.tokens[i].lexeme == want[i]);
        CHECK(ts.tokens[0].kind == TokenKind::keyword);
        CHECK(ts.tokens[4].kind == TokenKind::punct);
        CHECK(ts.tokens[7].kind == TokenKind::literal);
    }
    SECTION("lossless on every conformance source") {
        for (const auto& r : conformance_rows())
            for (const auto* src : {&r.hyp, &r.ref}) CHECK(tokenize(*src, r.lang).reconstruct() == *src);
    }
    SECTION("garbage is tolerated") {
        const std::string junk = "int # @ \x01 \"unterminated\n'x";
        CHECK(tokenize(junk, Language::java).reconstruct() == junk);
        CHECK(tokenize("def (:\n\t  ]]]", Language::python).reconstruct() == "def (:\n\t  ]]]");
    }
}

TEST_CASE("n-gram components", "[metrics]") {
    const Tokens a = {"int", "total", "=", "a", "+", "b", ";"};
    const Tokens b = {"int", "result", "=", "b", "*", "c", ";"};
    CHECK(ngram_match(a, a) == Catch::Approx(1.0).epsilon(1e-12));
    CHECK(ngram_match({}, a) == 0.0);
    CHECK_THROWS_AS(ngram_match(a, a, 0), ConfigError);

    // Reference implementation value for this pair (no shared 4-gram).
    const double ng = ngram_match(a, b);
    CHECK(ng > 0.0);
    CHECK(ng < 1.0);
    CHECK(std::abs(ng - 0.046713797772820004) < 1e-9);
    const double wn = weighted_ngram_match(a, b, keyword_set(Language::java));
    CHECK(std::abs(wn - 0.049616830003403625) < 1e-6);

    const auto& kw = keyword_set(Language::java);
    CHECK(weighted_ngram_match(a, a, kw) == Catch::Approx(1.0).epsilon(1e-12));
    const Tokens ref = {"public", "static", "int", "f", "(", "int", "x", ")", "{", "return", "x", ";", "}"};
    Tokens ident = ref, keyword = ref;
    ident[3] = "g";
    keyword[1] = "final";
    // Reference implementation values.
    CHECK(std::abs(weighted_ngram_match(keyword, ref, kw) - 0.8248038209476285) < 1e-12);
    CHECK(std::abs(weighted_ngram_match(ident, ref, kw) - 0.7705943778799352) < 1e-12);
}

TEST_CASE("syntax match", "[metrics]") {
    CHECK(syntax_match(SyntaxTree(kJava, Language::java), SyntaxTree(kJava, Language::java)) == 1.0);

    SECTION("hypothesis is a strict subtree of the reference") {
        const std::string ref = "y = x + 1\n";
        const std::string hyp = "x + 1\n";
        const SyntaxTree tr(ref, Language::python);
        REQUIRE(tree_size(tr.root()) <= 15);
        const double got = syntax_match(SyntaxTree(hyp, Language::python), tr);
        const double want = brute_syntax(hyp, ref, Language::python);
        CHECK(got == want);
        CHECK(got > 0.0);
        CHECK(got < 1.0);
    }
    SECTION("single-node trees with different labels") {
        CHECK(subtree_tally({"(a)"}, {"(b)"}).score() == 0.0);
        CHECK(subtree_tally({"(a)"}, {"(a)"}).score() == 1.0);
    }
    SECTION("membership vs clipped counting") {
        const std::vector<std::string> hyp = {"(x)"}, ref = {"(x)", "(x)"};
        CHECK(subtree_tally(hyp, ref, SubtreeCounting::membership).matched == 2);
        CHECK(subtree_tally(hyp, ref, SubtreeCounting::clipped).matched == 1);
    }
    SECTION("enumeration agrees with the brute-force walk on the corpus") {
        for (const auto& r : conformance_rows()) {
            if (r.hyp.empty() || r.ref.empty()) continue;
            const SyntaxTree th(r.hyp, r.lang), tr(r.ref, r.lang);
            CHECK(syntax_match(th, tr) == Catch::Approx(brute_syntax(r.hyp, r.ref, r.lang)).margin(1e-12));
        }
    }
}

TEST_CASE("dataflow match", "[metrics]") {
    const SyntaxTree a(kJava, Language::java), b(kJavaRenamed, Language::java);
    const auto ga = dataflow_graph(a), gb = dataflow_graph(b);
    REQUIRE(!ga.edges.empty());
    CHECK(dataflow_match(ga, ga) == 1.0);
    CHECK(dataflow_match(gb, ga) == 1.0);
    CHECK(dataflow_match(ga, DataflowGraph{}) == 1.0);
    CHECK(dataflow_match(DataflowGraph{}, ga) == 0.0);

    const SyntaxTree p(std::string("def f(x):\n    y = x + 1\n    return y\n"), Language::python);
    const SyntaxTree q(std::string("def g(a):\n    b = a + 1\n    return b\n"), Language::python);
    CHECK(dataflow_match(dataflow_graph(q), dataflow_graph(p)) == 1.0);
}

TEST_CASE("codebleu", "[metrics]") {
    SECTION("conformance against the reference implementation") {
        const auto rows = conformance_rows();
        REQUIRE(rows.size() == 50);
        for (const auto& r : rows) {
            CAPTURE(r.hyp, r.ref);
            const auto s = codebleu(r.hyp, r.ref, r.lang);
            const json& e = r.expected;
            CHECK(std::abs(s.combined - e.at("combined").get<double>()) < 1e-4);
            CHECK(std::abs(s.ngram - e.at("ngram").get<double>()) < 1e-6);
            CHECK(std::abs(s.weighted_ngram - e.at("weighted_ngram").get<double>()) < 1e-6);
            CHECK(std::abs(s.syntax - e.at("syntax").get<double>()) < 1e-6);
            const double df = e.at("dataflow").get<double>();
            if (df == 0.0)
                CHECK(s.dataflow == 1.0);
            else
                CHECK(std::abs(s.dataflow_match - df) < 1e-6);
            if (r.identity) CHECK(s.combined == Catch::Approx(1.0).margin(1e-12));
        }
    }
    SECTION("renamed variables") {
        // Reference: 0.5571742919347804
        CHECK(std::abs(codebleu(kJavaRenamed, kJava, Language::java).combined - 0.5571742919347804) < 1e-9);
    }
    SECTION("empty hypothesis") {
        // No tokens: both n-gram terms are 0. The empty program shares no
        // subtree with the reference, and zero matched dataflow edges enter
        // the combination as 1, so combined = 0.25 * 0 + 0.25 * 1.
        for (auto lang : {Language::java, Language::python}) {
            const std::string ref =
                lang == Language::java ? kJava : std::string("def f(x):\n    y = x + 1\n    return y");
            const auto s = codebleu("", ref, lang);
            CHECK(s.ngram == 0.0);
            CHECK(s.weighted_ngram == 0.0);
            CHECK(s.syntax == 0.0);
            CHECK(s.dataflow == 1.0);
            CHECK(s.combined == Catch::Approx(0.25).margin(1e-12));
        }
    }
    SECTION("weights") {
        CodeBleuOptions bad;
        bad.weights = {0.5, 0.5, 0.5, 0.0};
        CHECK_THROWS_AS(codebleu(kJava, kJava, Language::java, bad), ConfigError);
        bad.weights = {1.5, -0.5, 0.0, 0.0};
        CHECK_THROWS_AS(codebleu(kJava, kJava, Language::java, bad), ConfigError);

        // combined is linear in the weights for fixed components
        const auto base = codebleu(kJavaRenamed, kJava, Language::java);
        CodeBleuOptions o;
        o.weights = {0.1, 0.2, 0.3, 0.4};
        const auto s = codebleu(kJavaRenamed, kJava, Language::java, o);
        CHECK(s.combined == Catch::Approx(0.1 * base.ngram + 0.2 * base.weighted_ngram + 0.3 * base.syntax +
                                          0.4 * base.dataflow)
                                .margin(1e-12));
    }
    SECTION("cache returns the computed score") {
        CodeBleuCache cache;
        const auto a = cache(kJavaRenamed, kJava, Language::java);
        const auto b = cache(kJavaRenamed, kJava, Language::java);
        CHECK(a.combined == b.combined);
        CHECK(cache.hits() == 1);
    }
}

TEST_CASE("codebleu range under token mutations", "[metrics]") {
    const auto rows = conformance_rows();
    std::mt19937_64 g(99);
    const std::vector<std::string> junk = {"{", "}", ";", "(", "if", "x", "=", "\n", "return", "0", "\"", "#"};
    for (int it = 0; it < 60; ++it) {
        const auto& r = rows[g() % rows.size()];
        auto ts = tokenize(r.ref, r.lang);
        std::string hyp;
        for (std::size_t i = 0; i < ts.tokens.size(); ++i) {
            hyp += ts.separators[i];
            switch (g() % 6) {
                case 0: break;  // drop
                case 1: hyp += junk[g() % junk.size()]; break;
                default: hyp += ts.tokens[i].lexeme;
            }
        }
        const auto s = codebleu(hyp, r.ref, r.lang);
        for (double v : {s.ngram, s.weighted_ngram, s.syntax, s.dataflow_match, s.dataflow, s.combined}) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
        CHECK(s.combined == Catch::Approx(CodeBleuScore::combine(s.weights, s.ngram, s.weighted_ngram, s.syntax,
                                                                 s.dataflow))
                                .margin(1e-15));
    }
}
