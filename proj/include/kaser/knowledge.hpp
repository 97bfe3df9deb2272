#pragma once

// Knowledge estimator: a linear-tanh recurrence over a student's responses,
// a sigmoid mastery head per KC, compensatory (masked-mean) correctness
// prediction and BCE training with analytic gradients.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

// <resolv.h> (reached through the HTTP client) defines _res as a macro, which
// collides with parameter names inside Eigen.
#pragma push_macro("_res")
#undef _res
#include <Eigen/Dense>
#pragma pop_macro("_res")
#include <json.hpp>

#include "kaser/common.hpp"
#include "kaser/corpus.hpp"
#include "kaser/parallel.hpp"

namespace kaser::knowledge {

using json = nlohmann::ordered_json;
using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

inline constexpr double prob_clamp = 1e-12;

inline double sigmoid(double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

struct KeParameters {
    Mat A;   // d x d
    Mat B;   // d x f
    Vec h0;  // d
    Mat Wm;  // k x d
    Vec bm;  // k
    /// KC ids in mastery-dimension order (catalog order).
    std::vector<std::string> kc_ids;

    Eigen::Index d() const { return A.rows(); }
    Eigen::Index k() const { return Wm.rows(); }
    Eigen::Index f() const { return B.cols(); }

    void check() const {
        const auto dd = A.rows();
        if (A.cols() != dd || B.rows() != dd || h0.size() != dd || Wm.cols() != dd || bm.size() != Wm.rows())
            throw ShapeError("knowledge estimator parameters have inconsistent shapes");
        if (static_cast<Eigen::Index>(kc_ids.size()) != Wm.rows())
            throw ShapeError("knowledge estimator: one KC id per mastery dimension required");
        if (B.cols() != Wm.rows() + 2) throw ShapeError("knowledge estimator: feature width must be k + 2");
        for (const Mat* m : {&A, &B, &Wm})
            if (!m->allFinite()) throw NumericError("knowledge estimator parameters are not finite");
        if (!h0.allFinite() || !bm.allFinite()) throw NumericError("knowledge estimator parameters are not finite");
    }

    /// Flat view used by optimizers and gradient checks:
    /// A, B, h0, Wm, bm, each column-major.
    std::size_t size() const {
        return static_cast<std::size_t>(A.size() + B.size() + h0.size() + Wm.size() + bm.size());
    }
    template <typename F>
    void for_each_block(F&& f) {
        f(A.data(), A.size());
        f(B.data(), B.size());
        f(h0.data(), h0.size());
        f(Wm.data(), Wm.size());
        f(bm.data(), bm.size());
    }
    std::vector<double> flat() const {
        std::vector<double> out;
        out.reserve(size());
        auto put = [&](const double* p, Eigen::Index n) { out.insert(out.end(), p, p + n); };
        put(A.data(), A.size());
        put(B.data(), B.size());
        put(h0.data(), h0.size());
        put(Wm.data(), Wm.size());
        put(bm.data(), bm.size());
        return out;
    }
    void set_flat(const std::vector<double>& v) {
        if (v.size() != size()) throw ShapeError("set_flat: size mismatch");
        std::size_t at = 0;
        for_each_block([&](double* p, Eigen::Index n) {
            std::copy(v.begin() + static_cast<std::ptrdiff_t>(at), v.begin() + static_cast<std::ptrdiff_t>(at + n), p);
            at += static_cast<std::size_t>(n);
        });
    }
};

inline KeParameters zero_parameters(Eigen::Index d, const std::vector<std::string>& kc_ids) {
    const auto k = static_cast<Eigen::Index>(kc_ids.size());
    KeParameters p;
    p.A = Mat::Zero(d, d);
    p.B = Mat::Zero(d, k + 2);
    p.h0 = Vec::Zero(d);
    p.Wm = Mat::Zero(k, d);
    p.bm = Vec::Zero(k);
    p.kc_ids = kc_ids;
    return p;
}

inline KeParameters init_parameters(Eigen::Index d, const std::vector<std::string>& kc_ids, std::uint64_t seed,
                                    double scale = 0.1) {
    if (d < 1) throw ConfigError("knowledge estimator: d must be >= 1");
    KeParameters p = zero_parameters(d, kc_ids);
    Rng rng(seed);
    p.for_each_block([&](double* v, Eigen::Index n) {
        for (Eigen::Index i = 0; i < n; ++i) v[i] = scale * standard_normal(rng);
    });
    return p;
}

// ---------------------------------------------------------------------------
// Forward pieces
// ---------------------------------------------------------------------------

/// x = multi-hot KCs of the problem (k) ⊕ correctness ⊕ |E| / (1 + |E|).
inline Vec response_features(const std::vector<Eigen::Index>& kc_positions, bool correct, std::size_t n_errors,
                             Eigen::Index k) {
    Vec x = Vec::Zero(k + 2);
    for (auto i : kc_positions) x[i] = 1.0;
    x[k] = correct ? 1.0 : 0.0;
    x[k + 1] = static_cast<double>(n_errors) / (1.0 + static_cast<double>(n_errors));
    return x;
}

inline Vec update_state(const Vec& h, const Vec& x, const KeParameters& p) {
    if (h.size() != p.A.cols() || x.size() != p.B.cols())
        throw ShapeError("update_state: h has " + std::to_string(h.size()) + " entries, x has " +
                         std::to_string(x.size()) + "; expected " + std::to_string(p.A.cols()) + " and " +
                         std::to_string(p.B.cols()));
    Vec h2 = (p.A * h + p.B * x).array().tanh().matrix();
    if (!h2.allFinite()) throw NumericError("update_state produced non-finite values");
    return h2;
}

inline Vec mastery(const Vec& h, const KeParameters& p) {
    if (h.size() != p.Wm.cols()) throw ShapeError("mastery: state dimension mismatch");
    Vec z = p.Wm * h + p.bm;
    for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = sigmoid(z[i]);
    return z;
}

/// Masked mean of m over the problem's KCs.
inline double predict_correctness(const Vec& m, const std::vector<Eigen::Index>& kc_positions) {
    if (kc_positions.empty()) throw ConfigError("predict_correctness: problem has no KCs");
    double s = 0;
    for (auto i : kc_positions) {
        if (i < 0 || i >= m.size()) throw ShapeError("predict_correctness: KC position out of range");
        s += m[i];
    }
    return s / static_cast<double>(kc_positions.size());
}

inline double bce_loss(double y_hat, int a) {
    if (a != 0 && a != 1) throw ConfigError("bce_loss: label must be 0 or 1");
    const double y = std::clamp(y_hat, prob_clamp, 1.0 - prob_clamp);
    return a == 1 ? -std::log(y) : -std::log(1.0 - y);
}

// ---------------------------------------------------------------------------
// Sequences
// ---------------------------------------------------------------------------

struct Step {
    std::vector<Eigen::Index> kcs;  // positions in the mastery vector
    int correct = 0;
    std::size_t n_errors = 0;
    bool target = true;  // contributes to the loss
    std::size_t submission = 0;
};

using Sequence = std::vector<Step>;

inline std::vector<Eigen::Index> kc_positions(const corpus::Problem& prob, const std::vector<std::string>& kc_ids) {
    std::vector<Eigen::Index> out;
    for (const auto& id : prob.kc_ids) {
        auto it = std::find(kc_ids.begin(), kc_ids.end(), id);
        if (it == kc_ids.end()) throw NotFoundError("KC '" + id + "' is not a mastery dimension");
        out.push_back(static_cast<Eigen::Index>(it - kc_ids.begin()));
    }
    std::sort(out.begin(), out.end());
    return out;
}

inline std::vector<std::string> catalog_kc_ids(const corpus::Dataset& d) {
    std::vector<std::string> out;
    for (const auto& k : d.kcs()) out.push_back(k.id);
    return out;
}

/// One sequence per student (sorted ids); `is_target(submission index)`
/// selects loss positions. Students without targets are dropped.
template <typename Pred>
std::vector<Sequence> build_sequences(const corpus::Dataset& d, const std::vector<std::string>& kc_ids,
                                      Pred&& is_target) {
    std::vector<Sequence> out;
    for (const auto& student : d.students()) {
        Sequence seq;
        bool any = false;
        for (std::size_t i : d.sequence(student)) {
            const auto& s = d.submissions()[i];
            Step st;
            st.kcs = kc_positions(d.problem(s.problem_id), kc_ids);
            st.correct = s.correct ? 1 : 0;
            st.n_errors = s.errors ? s.errors->size() : 0;
            st.target = is_target(i);
            st.submission = i;
            any = any || st.target;
            seq.push_back(std::move(st));
        }
        if (any) out.push_back(std::move(seq));
    }
    return out;
}

inline std::vector<Sequence> build_sequences(const corpus::Dataset& d, const std::vector<std::string>& kc_ids) {
    return build_sequences(d, kc_ids, [](std::size_t) { return true; });
}

/// Predicted correctness for every step of a sequence.
inline std::vector<double> predict_sequence(const Sequence& seq, const KeParameters& p) {
    std::vector<double> out;
    Vec h = p.h0;
    for (std::size_t t = 0; t < seq.size(); ++t) {
        out.push_back(predict_correctness(mastery(h, p), seq[t].kcs));
        if (t + 1 < seq.size())
            h = update_state(h, response_features(seq[t].kcs, seq[t].correct, seq[t].n_errors, p.k()), p);
    }
    return out;
}

struct LossGrad {
    double loss_sum = 0;
    std::size_t count = 0;
    KeParameters grad;  // of loss_sum
};

/// Summed BCE over target steps and its gradient (backpropagation through
/// the recurrence). The clamp is treated as identity inside (0, 1) and
/// as constant outside.
inline LossGrad sequence_loss_grad(const Sequence& seq, const KeParameters& p) {
    const Eigen::Index k = p.k();
    LossGrad out;
    out.grad = zero_parameters(p.d(), p.kc_ids);
    const std::size_t T = seq.size();
    if (T == 0) return out;
    std::vector<Vec> h(T), m(T), x(T);
    h[0] = p.h0;
    for (std::size_t t = 0; t < T; ++t) {
        m[t] = mastery(h[t], p);
        x[t] = response_features(seq[t].kcs, seq[t].correct, seq[t].n_errors, k);
        if (t + 1 < T) h[t + 1] = (p.A * h[t] + p.B * x[t]).array().tanh().matrix();
    }
    Vec gh = Vec::Zero(p.d());  // dL/dh_{t+1} flowing back
    for (std::size_t tt = T; tt-- > 0;) {
        Vec g = Vec::Zero(p.d());
        if (tt + 1 < T) {
            const Vec du = gh.array() * (1.0 - h[tt + 1].array().square());
            out.grad.A.noalias() += du * h[tt].transpose();
            out.grad.B.noalias() += du * x[tt].transpose();
            g.noalias() += p.A.transpose() * du;
        }
        const Step& st = seq[tt];
        if (st.target) {
            const double y_raw = predict_correctness(m[tt], st.kcs);
            out.loss_sum += bce_loss(y_raw, st.correct);
            ++out.count;
            if (y_raw > prob_clamp && y_raw < 1.0 - prob_clamp) {
                const double dy = st.correct ? -1.0 / y_raw : 1.0 / (1.0 - y_raw);
                Vec dz = Vec::Zero(k);
                const double w = dy / static_cast<double>(st.kcs.size());
                for (auto i : st.kcs) dz[i] += w * m[tt][i] * (1.0 - m[tt][i]);
                out.grad.Wm.noalias() += dz * h[tt].transpose();
                out.grad.bm += dz;
                g.noalias() += p.Wm.transpose() * dz;
            }
        }
        gh = g;
    }
    out.grad.h0 = gh;
    return out;
}

/// Mean BCE over all target steps and its gradient. Per-sequence results are
/// reduced in sequence order, so the result does not depend on `threads`.
inline LossGrad batch_loss_grad(const std::vector<Sequence>& seqs, const KeParameters& p, std::size_t threads = 1) {
    std::vector<LossGrad> parts(seqs.size());
    parallel_for(seqs.size(), threads, [&](std::size_t i) { parts[i] = sequence_loss_grad(seqs[i], p); });
    LossGrad total;
    total.grad = zero_parameters(p.d(), p.kc_ids);
    for (auto& part : parts) {
        total.loss_sum += part.loss_sum;
        total.count += part.count;
        total.grad.A += part.grad.A;
        total.grad.B += part.grad.B;
        total.grad.h0 += part.grad.h0;
        total.grad.Wm += part.grad.Wm;
        total.grad.bm += part.grad.bm;
    }
    if (total.count) {
        const double s = 1.0 / static_cast<double>(total.count);
        total.loss_sum *= s;
        total.grad.A *= s;
        total.grad.B *= s;
        total.grad.h0 *= s;
        total.grad.Wm *= s;
        total.grad.bm *= s;
    }
    return total;  // loss_sum now holds the mean
}

inline double mean_loss(const std::vector<Sequence>& seqs, const KeParameters& p) {
    double s = 0;
    std::size_t n = 0;
    for (const auto& seq : seqs) {
        const auto y = predict_sequence(seq, p);
        for (std::size_t t = 0; t < seq.size(); ++t)
            if (seq[t].target) {
                s += bce_loss(y[t], seq[t].correct);
                ++n;
            }
    }
    return n ? s / static_cast<double>(n) : 0.0;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

enum class Optimizer { gd, adam };

struct KeHyper {
    int d = 32;
    double lr = 0.01;
    int epochs = 300;
    std::uint64_t seed = 0;
    double init_scale = 0.1;
    Optimizer optimizer = Optimizer::adam;
    std::size_t threads = 1;
};

inline void to_json(json& j, const KeHyper& h) {
    j = {{"d", h.d},
         {"lr", h.lr},
         {"epochs", h.epochs},
         {"seed", h.seed},
         {"init_scale", h.init_scale},
         {"optimizer", h.optimizer == Optimizer::adam ? "adam" : "gd"},
         {"threads", h.threads}};
}
inline void from_json(const json& j, KeHyper& h) {
    h.d = j.value("d", h.d);
    h.lr = j.value("lr", h.lr);
    h.epochs = j.value("epochs", h.epochs);
    h.seed = j.value("seed", h.seed);
    h.init_scale = j.value("init_scale", h.init_scale);
    const std::string opt = j.value("optimizer", std::string(h.optimizer == Optimizer::adam ? "adam" : "gd"));
    if (opt != "adam" && opt != "gd") throw ConfigError("ke optimizer must be 'adam' or 'gd'");
    h.optimizer = opt == "adam" ? Optimizer::adam : Optimizer::gd;
    h.threads = j.value("threads", h.threads);
}

struct TrainResult {
    KeParameters params;
    std::vector<double> train_loss;  // per epoch, before the update
    std::vector<double> val_loss;
};

inline TrainResult train_ke(const std::vector<Sequence>& train, const std::vector<Sequence>& val,
                            const std::vector<std::string>& kc_ids, const KeHyper& hp) {
    if (hp.epochs < 0) throw ConfigError("train_ke: epochs must be >= 0");
    if (!(hp.lr > 0)) throw ConfigError("train_ke: learning rate must be positive");
    TrainResult out;
    out.params = init_parameters(hp.d, kc_ids, hp.seed, hp.init_scale);
    KeParameters& p = out.params;
    const std::size_t n = p.size();
    std::vector<double> m1(n, 0.0), m2(n, 0.0);
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    for (int epoch = 0; epoch < hp.epochs; ++epoch) {
        const LossGrad lg = batch_loss_grad(train, p, hp.threads);
        if (!std::isfinite(lg.loss_sum))
            throw NumericError("train_ke: loss is not finite at epoch " + std::to_string(epoch) +
                               (out.train_loss.empty() ? "" : " (previous " + std::to_string(out.train_loss.back()) + ")"));
        out.train_loss.push_back(lg.loss_sum);
        if (!val.empty()) out.val_loss.push_back(mean_loss(val, p));
        std::vector<double> theta = p.flat();
        const std::vector<double> g = lg.grad.flat();
        if (hp.optimizer == Optimizer::gd) {
            for (std::size_t i = 0; i < n; ++i) theta[i] -= hp.lr * g[i];
        } else {
            const double c1 = 1.0 - std::pow(b1, epoch + 1), c2 = 1.0 - std::pow(b2, epoch + 1);
            for (std::size_t i = 0; i < n; ++i) {
                m1[i] = b1 * m1[i] + (1 - b1) * g[i];
                m2[i] = b2 * m2[i] + (1 - b2) * g[i] * g[i];
                theta[i] -= hp.lr * (m1[i] / c1) / (std::sqrt(m2[i] / c2) + eps);
            }
        }
        p.set_flat(theta);
    }
    return out;
}

/// Mastery after folding h0 through the student's first t responses.
inline Vec mastery_profile(const corpus::Dataset& d, const std::string& student, int t, const KeParameters& p) {
    Vec h = p.h0;
    for (const corpus::Submission* s : corpus::history(d, student, t)) {
        const auto kcs = kc_positions(d.problem(s->problem_id), p.kc_ids);
        h = update_state(h, response_features(kcs, s->correct, s->errors ? s->errors->size() : 0, p.k()), p);
    }
    return mastery(h, p);
}

/// Area under the ROC curve (Mann-Whitney U, ties count one half).
inline double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) throw ShapeError("roc_auc: scores and labels differ in length");
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double pos = 0, neg = 0, rank_sum = 0;
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
        const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
        for (std::size_t k = i; k < j; ++k)
            if (labels[idx[k]]) rank_sum += avg_rank;
        i = j;
    }
    for (int l : labels) (l ? pos : neg) += 1;
    if (pos == 0 || neg == 0) throw ConfigError("roc_auc: both classes must be present");
    return (rank_sum - pos * (pos + 1) / 2) / (pos * neg);
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

inline json matrix_json(const Mat& m) {
    json rows = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        json row = json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        rows.push_back(std::move(row));
    }
    return rows;
}

inline Mat matrix_from_json(const json& j, Eigen::Index rows, Eigen::Index cols, const char* name) {
    if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != rows)
        throw SchemaError(std::string("KE parameter file: ") + name + " has the wrong number of rows");
    Mat m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
        const json& row = j[static_cast<std::size_t>(r)];
        if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols)
            throw SchemaError(std::string("KE parameter file: ") + name + " has the wrong number of columns");
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = row[static_cast<std::size_t>(c)].get<double>();
    }
    return m;
}

inline json to_json(const KeParameters& p, const json& meta = json::object()) {
    auto vec = [](const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
    return {{"d", p.d()},       {"k", p.k()},         {"f", p.f()},        {"kc_ids", p.kc_ids},
            {"A", matrix_json(p.A)}, {"B", matrix_json(p.B)}, {"h0", vec(p.h0)}, {"W_m", matrix_json(p.Wm)},
            {"b_m", vec(p.bm)}, {"meta", meta}};
}

inline KeParameters parameters_from_json(const json& j) {
    try {
        const auto d = j.at("d").get<Eigen::Index>();
        const auto k = j.at("k").get<Eigen::Index>();
        const auto f = j.at("f").get<Eigen::Index>();
        KeParameters p;
        p.kc_ids = j.at("kc_ids").get<std::vector<std::string>>();
        p.A = matrix_from_json(j.at("A"), d, d, "A");
        p.B = matrix_from_json(j.at("B"), d, f, "B");
        p.Wm = matrix_from_json(j.at("W_m"), k, d, "W_m");
        auto h0 = j.at("h0").get<std::vector<double>>();
        auto bm = j.at("b_m").get<std::vector<double>>();
        p.h0 = Eigen::Map<Vec>(h0.data(), static_cast<Eigen::Index>(h0.size()));
        p.bm = Eigen::Map<Vec>(bm.data(), static_cast<Eigen::Index>(bm.size()));
        p.check();
        return p;
    } catch (const json::exception& e) {
        throw SchemaError(std::string("KE parameter file: ") + e.what());
    }
}

}  // namespace kaser::knowledge
