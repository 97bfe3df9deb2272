#include <catch_amalgamated.hpp>

#include "support.hpp"

using namespace kaser;
using namespace kaser::knowledge;

namespace {

// d = 2, one KC (feature width 3).
KeParameters fixture() {
    KeParameters p = zero_parameters(2, {"K1"});
    p.A << 0.5, -0.2, 0.1, 0.3;
    p.B << 0.2, 0.0, -0.4, 0.1, 0.5, 0.3;
    p.h0 << 0.1, -0.2;
    p.Wm << 1.0, -1.0;
    p.bm << 0.0;
    return p;
}

std::vector<Sequence> random_sequences(std::mt19937_64& g, int n, Eigen::Index k) {
    std::vector<Sequence> out;
    for (int s = 0; s < n; ++s) {
        Sequence seq;
        const int T = 2 + static_cast<int>(g() % 4);
        for (int t = 0; t < T; ++t) {
            Step st;
            for (Eigen::Index i = 0; i < k; ++i)
                if (g() % 2) st.kcs.push_back(i);
            if (st.kcs.empty()) st.kcs.push_back(static_cast<Eigen::Index>(g() % static_cast<std::uint64_t>(k)));
            st.correct = static_cast<int>(g() % 2);
            st.n_errors = st.correct ? 0 : g() % 3;
            st.target = g() % 4 != 0;
            seq.push_back(st);
        }
        out.push_back(seq);
    }
    return out;
}

}  // namespace

TEST_CASE("forward pieces", "[knowledge]") {
    SECTION("update_state") {
        auto p = zero_parameters(3, {"K1", "K2"});
        const Vec h = Vec::Constant(3, 0.7), x = Vec::Ones(4);
        CHECK(update_state(h, x, p).isZero(0));

        const KeParameters f = fixture();
        Vec h2(2), x2(3);
        h2 << 1.0, -1.0;
        x2 << 1.0, 1.0, 0.5;
        const Vec out = update_state(h2, x2, f);
        CHECK(out[0] == Catch::Approx(0.6043677771171636).epsilon(1e-14));
        CHECK(out[1] == Catch::Approx(0.5005202111902353).epsilon(1e-14));
        CHECK_THROWS_AS(update_state(Vec::Zero(3), x2, f), ShapeError);

        p.B.setConstant(50.0);
        const Vec big = update_state(h, x, p);
        CHECK((big.array().abs() <= 1.0).all());
    }
    SECTION("mastery") {
        const auto p0 = zero_parameters(2, {"K1", "K2", "K3"});
        CHECK(mastery(Vec::Constant(2, 3.0), p0).isApproxToConstant(0.5));

        KeParameters p = zero_parameters(2, {"K1", "K2"});
        p.Wm << 1.0, -2.0, 0.5, 0.0;
        p.bm << 0.1, -0.3;
        Vec h(2);
        h << 0.4, 0.2;
        const Vec m = mastery(h, p);
        CHECK(m[0] == Catch::Approx(0.52497918747894).epsilon(1e-13));
        CHECK(m[1] == Catch::Approx(0.47502081252106).epsilon(1e-13));

        double prev = 0;
        for (double b : {0.0, 1.0, 5.0, 20.0, 40.0}) {
            p.bm[0] = b;
            const double v = mastery(h, p)[0];
            CHECK(v > prev);
            CHECK(v <= 1.0);
            prev = v;
        }
    }
    SECTION("masked mean") {
        Vec m(3);
        m << 0.2, 0.8, 0.5;
        CHECK(predict_correctness(m, {0, 1}) == Catch::Approx(0.5));
        CHECK(predict_correctness(m, {1, 0}) == predict_correctness(m, {0, 1}));
        CHECK(predict_correctness(m, {0, 1, 2}) == Catch::Approx(0.5));
        Vec one(1);
        one << 0.7;
        CHECK(predict_correctness(one, {0}) == 0.7);
        CHECK_THROWS_AS(predict_correctness(m, {}), ConfigError);

        Vec other = m;
        other[2] = 0.01;  // KC not on the problem
        CHECK(predict_correctness(other, {0, 1}) == predict_correctness(m, {0, 1}));
    }
    SECTION("bce") {
        CHECK(bce_loss(0.5, 1) == Catch::Approx(std::log(2.0)));
        CHECK(bce_loss(0.9, 0) == Catch::Approx(2.302585092994046));
        CHECK(bce_loss(1.0 - 1e-9, 1) < 1e-8);
        CHECK(std::isfinite(bce_loss(0.0, 1)));
        CHECK(std::isfinite(bce_loss(1.0, 0)));
        CHECK_THROWS_AS(bce_loss(0.5, 2), ConfigError);
    }
}

TEST_CASE("gradient matches central differences", "[knowledge]") {
    std::mt19937_64 g(4);
    for (int trial = 0; trial < 5; ++trial) {
        const std::vector<std::string> kcs = {"K1", "K2", "K3"};
        const KeParameters p = init_parameters(4, kcs, 100 + static_cast<std::uint64_t>(trial), 0.5);
        const auto seqs = random_sequences(g, 3, 3);
        const LossGrad lg = batch_loss_grad(seqs, p);
        CHECK(lg.loss_sum == Catch::Approx(mean_loss(seqs, p)).epsilon(1e-12));
        const auto grad = lg.grad.flat();
        auto theta = p.flat();
        KeParameters q = p;
        constexpr double h = 1e-5;
        for (std::size_t i = 0; i < theta.size(); ++i) {
            const double keep = theta[i];
            theta[i] = keep + h;
            q.set_flat(theta);
            const double up = mean_loss(seqs, q);
            theta[i] = keep - h;
            q.set_flat(theta);
            const double down = mean_loss(seqs, q);
            theta[i] = keep;
            const double fd = (up - down) / (2 * h);
            CAPTURE(trial, i, fd, grad[i]);
            CHECK(kt::rel_err(fd, grad[i]) < 1e-4);
        }
    }
}

TEST_CASE("reduction order does not depend on threads", "[knowledge]") {
    std::mt19937_64 g(8);
    const auto seqs = random_sequences(g, 40, 3);
    const auto p = init_parameters(5, {"K1", "K2", "K3"}, 3);
    CHECK(batch_loss_grad(seqs, p, 1).grad.flat() == batch_loss_grad(seqs, p, 4).grad.flat());
}

TEST_CASE("training", "[knowledge]") {
    const auto data = kt::planted_ke_corpus(60, 10, 21);
    const auto kcs = catalog_kc_ids(data);

    SECTION("zero epochs return the seeded initialization") {
        KeHyper hp;
        hp.d = 6;
        hp.epochs = 0;
        hp.seed = 5;
        const auto r = train_ke(build_sequences(data, kcs), {}, kcs, hp);
        CHECK(r.params.flat() == init_parameters(6, kcs, 5).flat());
        CHECK(r.train_loss.empty());
    }
    SECTION("small steps never increase the training loss") {
        KeHyper hp;
        hp.d = 6;
        hp.epochs = 40;
        hp.lr = 1e-3;
        hp.optimizer = Optimizer::gd;
        const auto r = train_ke(build_sequences(data, kcs), {}, kcs, hp);
        for (std::size_t e = 1; e < r.train_loss.size(); ++e) CHECK(r.train_loss[e] <= r.train_loss[e - 1]);
    }
    SECTION("deterministic given the seed") {
        KeHyper hp;
        hp.d = 4;
        hp.epochs = 5;
        hp.seed = 9;
        const auto seqs = build_sequences(data, kcs);
        CHECK(train_ke(seqs, {}, kcs, hp).params.flat() == train_ke(seqs, {}, kcs, hp).params.flat());
    }
    SECTION("all-correct corpus drives the loss to zero") {
        std::mt19937_64 g(2);
        auto seqs = random_sequences(g, 10, 3);
        for (auto& s : seqs)
            for (auto& st : s) {
                st.correct = 1;
                st.n_errors = 0;
                st.target = true;
            }
        KeHyper hp;
        hp.d = 4;
        hp.epochs = 300;
        hp.lr = 0.05;
        const auto r = train_ke(seqs, {}, kcs, hp);
        CHECK(r.train_loss.back() < 0.01);
        for (const auto& s : seqs)
            for (double y : predict_sequence(s, r.params)) CHECK(y > 0.99);
    }
    SECTION("held-out AUC on a planted corpus") {
        const auto fold = corpus::split(data, {corpus::SplitAxis::by_student, 5, 0.1, 0.1, 1}).front();
        auto role = [&](corpus::Role r) {
            return build_sequences(data, kcs, [&](std::size_t i) { return fold.role_of(data.submissions()[i]) == r; });
        };
        KeHyper hp;
        hp.d = 8;
        hp.epochs = 150;
        hp.lr = 0.05;
        const auto r = train_ke(role(corpus::Role::train), role(corpus::Role::val), kcs, hp);
        std::vector<double> scores;
        std::vector<int> labels;
        for (const auto& seq : role(corpus::Role::test)) {
            const auto y = predict_sequence(seq, r.params);
            for (std::size_t t = 0; t < seq.size(); ++t) {
                scores.push_back(y[t]);
                labels.push_back(seq[t].correct);
            }
        }
        CHECK(roc_auc(scores, labels) > 0.9);
    }
}

TEST_CASE("mastery profile", "[knowledge]") {
    const std::string text =
        R"({"kcs": [{"id": "K1", "name": "Conditional logic"}], "problems": [{"id": "P1", "statement": "s", "language": "java", "kc_ids": ["K1"]}, {"id": "P2", "statement": "s", "language": "java", "kc_ids": ["K1"]}, {"id": "P3", "statement": "s", "language": "java", "kc_ids": ["K1"]}]})"
        "\n"
        R"({"student_id": "S1", "problem_id": "P1", "order_index": 0, "code": "a", "correct": 0, "errors": ["E1", "E2"]})"
        "\n"
        R"({"student_id": "S1", "problem_id": "P2", "order_index": 1, "code": "b", "correct": 1, "errors": []})"
        "\n"
        R"({"student_id": "S1", "problem_id": "P3", "order_index": 2, "code": "c", "correct": 1, "errors": []})"
        "\n"
        R"({"student_id": "S2", "problem_id": "P1", "order_index": 0, "code": "d", "correct": 1, "errors": []})"
        "\n";
    const auto d = corpus::parse_dataset(text);
    const auto p = fixture();
    // h0 = (0.1, -0.2) folded through x = (1, 0, 2/3), (1, 1, 0), (1, 1, 0).
    CHECK(mastery_profile(d, "S1", 3, p)[0] == Catch::Approx(0.37788775056449175).epsilon(1e-13));
    // t = 0 is the shared prior sigmoid(0.1 + 0.2)
    CHECK(mastery_profile(d, "S1", 0, p)[0] == Catch::Approx(0.574442516811659).epsilon(1e-13));
    CHECK(mastery_profile(d, "S2", 0, p)[0] == mastery_profile(d, "S1", 0, p)[0]);
    CHECK(mastery_profile(d, "S1", 2, p)[0] != mastery_profile(d, "S1", 0, p)[0]);

    KeParameters frozen = p;
    frozen.A.setZero();
    frozen.B.setZero();
    frozen.h0.setZero();
    CHECK(mastery_profile(d, "S1", 3, frozen)[0] == mastery_profile(d, "S1", 0, frozen)[0]);
    CHECK_THROWS_AS(mastery_profile(d, "nobody", 1, p), Error);
}

TEST_CASE("parameter file round trip", "[knowledge]") {
    const auto p = init_parameters(3, {"K1", "K2"}, 77);
    const auto back = parameters_from_json(json::parse(to_json(p).dump()));
    CHECK(back.flat() == p.flat());
    CHECK(back.kc_ids == p.kc_ids);
}
