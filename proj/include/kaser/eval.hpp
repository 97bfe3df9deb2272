#pragma once

// Two-level evaluation: best-of-K metrics per student-problem pair and
// coverage / chi-squared / diversity per problem, aggregated over folds.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>
#include <json.hpp>

#include "kaser/clustering.hpp"
#include "kaser/common.hpp"
#include "kaser/corpus.hpp"
#include "kaser/errors.hpp"
#include "kaser/grpo.hpp"
#include "kaser/metrics/codebleu.hpp"
#include "kaser/parallel.hpp"

namespace kaser::eval {

using json = nlohmann::ordered_json;
using errors::ErrorSet;

enum class Level { pair, problem };

inline std::string_view to_string(Level l) { return l == Level::pair ? "pair" : "problem"; }
inline Level parse_level(std::string_view s) {
    if (s == "pair") return Level::pair;
    if (s == "problem") return Level::problem;
    throw ConfigError("evaluation level must be 'pair' or 'problem'");
}
inline corpus::SplitAxis axis_for(Level l) {
    return l == Level::pair ? corpus::SplitAxis::by_student : corpus::SplitAxis::by_problem;
}

struct EvalConfig {
    std::vector<std::size_t> ks{1, 5};
    bool joint_best = false;
    bool chi_normalized = false;
    std::size_t threads = 1;

    void validate() const {
        if (ks.empty()) throw ConfigError("eval: at least one K required");
        for (auto k : ks)
            if (k < 1) throw ConfigError("eval: K must be >= 1");
    }
    std::size_t max_k() const { return *std::max_element(ks.begin(), ks.end()); }
};

inline void to_json(json& j, const EvalConfig& c) {
    j = {{"ks", c.ks}, {"joint_best", c.joint_best}, {"chi_normalized", c.chi_normalized}, {"threads", c.threads}};
}
inline void from_json(const json& j, EvalConfig& c) {
    c.ks = j.value("ks", c.ks);
    c.joint_best = j.value("joint_best", c.joint_best);
    c.chi_normalized = j.value("chi_normalized", c.chi_normalized);
    c.threads = j.value("threads", c.threads);
}

// ---------------------------------------------------------------------------
// Pair level
// ---------------------------------------------------------------------------

struct AtK {
    std::size_t k = 0;
    double codebleu = 0;
    double iou = 0;
    std::size_t best_codebleu = 0;
    std::size_t best_iou = 0;
};

struct PairReport {
    std::string student_id;
    std::string problem_id;
    std::vector<AtK> at;  // one per configured K, in order
};

/// Best-of-K over the first K candidates given their CodeBLEU scores and
/// judged error sets. Ties keep the lowest index.
inline AtK best_of_k(const std::vector<double>& codebleu, const std::vector<ErrorSet>& judged,
                     const ErrorSet& truth_errors, std::size_t K, bool joint = false) {
    if (K < 1) throw ConfigError("best_of_k: K must be >= 1");
    if (codebleu.size() < K || judged.size() < K)
        throw ConfigError("best_of_k: need " + std::to_string(K) + " candidates, have " +
                          std::to_string(std::min(codebleu.size(), judged.size())));
    AtK r;
    r.k = K;
    std::vector<double> iou(K);
    for (std::size_t i = 0; i < K; ++i) iou[i] = errors::iou(judged[i], truth_errors);
    if (joint) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < K; ++i)
            if (codebleu[i] + iou[i] > codebleu[best] + iou[best]) best = i;
        r.best_codebleu = r.best_iou = best;
    } else {
        for (std::size_t i = 1; i < K; ++i) {
            if (codebleu[i] > codebleu[r.best_codebleu]) r.best_codebleu = i;
            if (iou[i] > iou[r.best_iou]) r.best_iou = i;
        }
    }
    r.codebleu = codebleu[r.best_codebleu];
    r.iou = iou[r.best_iou];
    return r;
}

/// Judges and scores candidates, then evaluates every configured K.
inline PairReport pair_report(const std::string& student, const corpus::Problem& problem,
                              const std::vector<std::string>& candidates, const std::string& truth_code,
                              const ErrorSet& truth_errors, const grpo::Judge& judge, const EvalConfig& cfg,
                              metrics::CodeBleuCache& cb) {
    const std::size_t n = cfg.max_k();
    if (candidates.size() < n)
        throw ConfigError("pair " + student + "/" + problem.id + ": " + std::to_string(candidates.size()) +
                          " candidates, " + std::to_string(n) + " required");
    std::vector<double> scores(n);
    std::vector<ErrorSet> judged(n);
    for (std::size_t i = 0; i < n; ++i) {
        scores[i] = cb(candidates[i], truth_code, problem.language).combined;
        judged[i] = judge(candidates[i], problem);
    }
    PairReport r{student, problem.id, {}};
    for (auto k : cfg.ks) r.at.push_back(best_of_k(scores, judged, truth_errors, k, cfg.joint_best));
    return r;
}

// ---------------------------------------------------------------------------
// Problem level
// ---------------------------------------------------------------------------

struct ProblemReport {
    std::string problem_id;
    double coverage_iou = 0;
    double chi_sq = 0;
    double mean_pairwise_cosine = 0;
    double codebleu_complement_max = 0;
    std::size_t n_candidates = 0;
    std::size_t n_truth = 0;
};

inline std::pair<double, double> problem_coverage(const std::vector<ErrorSet>& predicted,
                                                  const std::vector<ErrorSet>& truth, bool normalized = false) {
    if (truth.empty()) throw ConfigError("problem_coverage: no truth submissions");
    ErrorSet up, ut;
    for (const auto& s : predicted) up.insert(s.begin(), s.end());
    for (const auto& s : truth) ut.insert(s.begin(), s.end());
    const auto cp = errors::count_errors(predicted), ct = errors::count_errors(truth);
    const double chi = (cp.empty() && ct.empty()) ? 0.0 : errors::chi_squared_distance(cp, ct, normalized);
    return {errors::iou(up, ut), chi};
}

using Embed = std::function<std::vector<clustering::Vector>(const std::vector<std::string>&)>;

/// Mean pairwise cosine distance of the embeddings and the mean over
/// candidates of 1 - max CodeBLEU against the others.
inline std::pair<double, double> problem_diversity(const std::vector<std::string>& codes, Language lang,
                                                   const Embed& embed, metrics::CodeBleuCache& cb) {
    if (codes.size() < 2) throw ConfigError("problem_diversity: at least 2 codes required");
    const auto vecs = embed(codes);
    if (vecs.size() != codes.size()) throw ShapeError("problem_diversity: one embedding per code required");
    double cos = 0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < codes.size(); ++i)
        for (std::size_t j = i + 1; j < codes.size(); ++j, ++pairs) cos += clustering::cosine_distance(vecs[i], vecs[j]);
    double comp = 0;
    for (std::size_t i = 0; i < codes.size(); ++i) comp += grpo::diversity_reward(codes, i, lang, cb);
    return {cos / static_cast<double>(pairs), comp / static_cast<double>(codes.size())};
}

// ---------------------------------------------------------------------------
// Predictions
// ---------------------------------------------------------------------------

struct Prediction {
    std::string student_id;
    std::string problem_id;
    std::vector<std::string> candidates;
};

using Predictions = std::map<std::pair<std::string, std::string>, std::vector<std::string>>;

inline std::string predictions_jsonl(const std::vector<Prediction>& ps) {
    std::string s;
    for (const auto& p : ps)
        s += json{{"student_id", p.student_id}, {"problem_id", p.problem_id}, {"candidates", p.candidates}}.dump() +
             "\n";
    return s;
}

inline Predictions parse_predictions(std::string_view text, const std::string& source = "<predictions>") {
    Predictions out;
    std::size_t line_no = 0;
    for (auto line : split_lines(text)) {
        ++line_no;
        if (py_strip(line).empty()) continue;
        try {
            const json j = json::parse(line);
            auto key = std::make_pair(j.at("student_id").get<std::string>(), j.at("problem_id").get<std::string>());
            auto cands = j.at("candidates").get<std::vector<std::string>>();
            if (cands.empty()) throw SchemaError(source + ":" + std::to_string(line_no) + ": no candidates");
            if (!out.emplace(std::move(key), std::move(cands)).second)
                throw SchemaError(source + ":" + std::to_string(line_no) + ": duplicate student/problem pair");
        } catch (const json::exception& e) {
            throw SchemaError(source + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

inline Predictions load_predictions(const std::filesystem::path& p) { return parse_predictions(read_file(p), p.string()); }

// ---------------------------------------------------------------------------
// Runs and aggregates
// ---------------------------------------------------------------------------

struct FoldEval {
    std::size_t fold = 0;
    std::vector<PairReport> pairs;
    std::vector<ProblemReport> problems;
};

struct Aggregate {
    double mean = 0;
    double std = 0;  // sample std across folds; 0 for a single fold
    std::vector<double> per_fold;
};

struct EvalRun {
    Level level = Level::pair;
    corpus::SplitAxis axis = corpus::SplitAxis::by_student;
    std::string model_tag;
    EvalConfig cfg;
    std::vector<FoldEval> folds;
    std::vector<std::pair<std::string, Aggregate>> aggregates;  // table column order
};

inline std::vector<std::string> columns(Level level, const EvalConfig& cfg) {
    std::vector<std::string> c;
    if (level == Level::pair) {
        for (auto k : cfg.ks) c.push_back("CodeBLEU@" + std::to_string(k));
        for (auto k : cfg.ks) c.push_back("IoU@" + std::to_string(k));
    } else {
        c = {"IoU", "ChiSq", "CosDist", "CodeBLEU_comp_max"};
    }
    return c;
}

inline Aggregate aggregate(const std::vector<double>& per_fold) {
    Aggregate a;
    a.per_fold = per_fold;
    if (per_fold.empty()) return a;
    for (double v : per_fold) a.mean += v;
    a.mean /= static_cast<double>(per_fold.size());
    if (per_fold.size() > 1) {
        double ss = 0;
        for (double v : per_fold) ss += (v - a.mean) * (v - a.mean);
        a.std = std::sqrt(ss / static_cast<double>(per_fold.size() - 1));
    }
    return a;
}

/// Column value of every item of one fold.
inline std::vector<double> column_values(const FoldEval& f, Level level, const EvalConfig& cfg,
                                         const std::string& col) {
    std::vector<double> v;
    if (level == Level::pair) {
        const bool cb = col.rfind("CodeBLEU@", 0) == 0;
        const std::size_t k = std::stoul(col.substr(col.find('@') + 1));
        const auto pos = static_cast<std::size_t>(std::find(cfg.ks.begin(), cfg.ks.end(), k) - cfg.ks.begin());
        for (const auto& p : f.pairs) v.push_back(cb ? p.at.at(pos).codebleu : p.at.at(pos).iou);
    } else {
        for (const auto& p : f.problems) {
            if (col == "IoU") v.push_back(p.coverage_iou);
            else if (col == "ChiSq") v.push_back(p.chi_sq);
            else if (col == "CosDist") v.push_back(p.mean_pairwise_cosine);
            else v.push_back(p.codebleu_complement_max);
        }
    }
    return v;
}

inline void compute_aggregates(EvalRun& run) {
    run.aggregates.clear();
    for (const auto& col : columns(run.level, run.cfg)) {
        std::vector<double> per_fold;
        for (const auto& f : run.folds) {
            const auto v = column_values(f, run.level, run.cfg, col);
            if (v.empty()) continue;
            double s = 0;
            for (double x : v) s += x;
            per_fold.push_back(s / static_cast<double>(v.size()));
        }
        run.aggregates.emplace_back(col, aggregate(per_fold));
    }
}

/// Judge and embedder used by run_eval.
struct Services {
    grpo::Judge judge;
    Embed embed;
};

inline ErrorSet truth_errors_of(const corpus::Submission& s) {
    if (!s.annotated()) throw ConfigError("submission " + s.key() + " has no error annotation");
    return ErrorSet(s.errors->begin(), s.errors->end());
}

inline EvalRun run_eval(const corpus::Dataset& d, const std::vector<corpus::Fold>& folds, const Predictions& preds,
                        Level level, const Services& svc, const EvalConfig& cfg, std::string model_tag = "model") {
    cfg.validate();
    if (folds.empty()) throw ConfigError("run_eval: no folds");
    for (const auto& f : folds)
        if (f.axis != axis_for(level))
            throw ConfigError("run_eval: " + std::string(to_string(level)) + "-level evaluation needs a " +
                              std::string(corpus::to_string(axis_for(level))) + " split, got " +
                              std::string(corpus::to_string(f.axis)));
    EvalRun run;
    run.level = level;
    run.axis = axis_for(level);
    run.model_tag = std::move(model_tag);
    run.cfg = cfg;
    metrics::CodeBleuCache cb;
    auto candidates_of = [&](const corpus::Submission& s) -> const std::vector<std::string>& {
        auto it = preds.find({s.student_id, s.problem_id});
        if (it == preds.end()) throw NotFoundError("no predictions for " + s.key());
        return it->second;
    };
    for (const auto& f : folds) {
        FoldEval fe;
        fe.fold = f.index;
        const auto test = f.select(d, corpus::Role::test);
        if (level == Level::pair) {
            fe.pairs.resize(test.size());
            parallel_for(test.size(), cfg.threads, [&](std::size_t i) {
                const auto& s = d.submissions()[test[i]];
                fe.pairs[i] = pair_report(s.student_id, d.problem(s.problem_id), candidates_of(s), s.code,
                                          truth_errors_of(s), svc.judge, cfg, cb);
            });
        } else {
            std::map<std::string, std::vector<std::size_t>> by_problem;
            for (auto i : test) by_problem[d.submissions()[i].problem_id].push_back(i);
            std::vector<std::string> ids;
            for (const auto& [id, _] : by_problem) ids.push_back(id);
            fe.problems.resize(ids.size());
            parallel_for(ids.size(), cfg.threads, [&](std::size_t k) {
                const corpus::Problem& prob = d.problem(ids[k]);
                std::vector<ErrorSet> truth, pred;
                std::vector<std::string> codes;
                for (auto i : by_problem[ids[k]]) {
                    const auto& s = d.submissions()[i];
                    truth.push_back(truth_errors_of(s));
                    for (const auto& c : candidates_of(s)) {
                        codes.push_back(c);
                        pred.push_back(svc.judge(c, prob));
                    }
                }
                ProblemReport r;
                r.problem_id = ids[k];
                std::tie(r.coverage_iou, r.chi_sq) = problem_coverage(pred, truth, cfg.chi_normalized);
                std::tie(r.mean_pairwise_cosine, r.codebleu_complement_max) =
                    problem_diversity(codes, prob.language, svc.embed, cb);
                r.n_candidates = codes.size();
                r.n_truth = truth.size();
                fe.problems[k] = std::move(r);
            });
        }
        run.folds.push_back(std::move(fe));
    }
    compute_aggregates(run);
    return run;
}

// ---------------------------------------------------------------------------
// Report files
// ---------------------------------------------------------------------------

inline std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

inline std::string items_csv(const EvalRun& run) {
    std::string s;
    const auto cols = columns(run.level, run.cfg);
    if (run.level == Level::pair) {
        s = "fold,student_id,problem_id";
        for (const auto& c : cols) s += "," + c;
        for (auto k : run.cfg.ks) s += ",best_codebleu@" + std::to_string(k) + ",best_iou@" + std::to_string(k);
        s += "\n";
        for (const auto& f : run.folds)
            for (const auto& p : f.pairs) {
                s += std::to_string(f.fold) + "," + csv_field(p.student_id) + "," + csv_field(p.problem_id);
                for (const auto& a : p.at) s += "," + fmt(a.codebleu);
                for (const auto& a : p.at) s += "," + fmt(a.iou);
                for (const auto& a : p.at) s += "," + std::to_string(a.best_codebleu) + "," + std::to_string(a.best_iou);
                s += "\n";
            }
    } else {
        s = "fold,problem_id,IoU,ChiSq,CosDist,CodeBLEU_comp_max,n_candidates,n_truth\n";
        for (const auto& f : run.folds)
            for (const auto& p : f.problems)
                s += std::to_string(f.fold) + "," + csv_field(p.problem_id) + "," + fmt(p.coverage_iou) + "," +
                     fmt(p.chi_sq) + "," + fmt(p.mean_pairwise_cosine) + "," + fmt(p.codebleu_complement_max) + "," +
                     std::to_string(p.n_candidates) + "," + std::to_string(p.n_truth) + "\n";
    }
    return s;
}

inline json summary_json(const EvalRun& run) {
    json cols = json::object();
    for (const auto& [name, a] : run.aggregates)
        cols[name] = {{"mean", a.mean}, {"std", a.std}, {"per_fold", a.per_fold}};
    std::size_t items = 0;
    for (const auto& f : run.folds) items += run.level == Level::pair ? f.pairs.size() : f.problems.size();
    return {{"model", run.model_tag},   {"level", to_string(run.level)}, {"split_axis", corpus::to_string(run.axis)},
            {"folds", run.folds.size()}, {"items", items},                 {"config", run.cfg},
            {"columns", cols}};
}

/// Mean/std table recomputed from an items CSV as written by items_csv.
inline std::vector<std::pair<std::string, Aggregate>> aggregates_from_csv(std::string_view csv,
                                                                          const std::vector<std::string>& cols) {
    const auto lines = split_lines(csv);
    if (lines.empty()) throw SchemaError("items CSV is empty");
    auto split = [](std::string_view line) {
        std::vector<std::string> out(1);
        bool quoted = false;
        for (std::size_t i = 0; i < line.size(); ++i) {
            const char c = line[i];
            if (quoted) {
                if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') out.back() += '"', ++i;
                else if (c == '"') quoted = false;
                else out.back() += c;
            } else if (c == '"') quoted = true;
            else if (c == ',') out.emplace_back();
            else out.back() += c;
        }
        return out;
    };
    const auto header = split(lines[0]);
    std::map<std::string, std::map<std::size_t, std::pair<double, std::size_t>>> sums;
    for (std::size_t l = 1; l < lines.size(); ++l) {
        if (lines[l].empty()) continue;
        const auto row = split(lines[l]);
        const std::size_t fold = std::stoul(row.at(0));
        for (const auto& c : cols) {
            const auto at = static_cast<std::size_t>(std::find(header.begin(), header.end(), c) - header.begin());
            if (at >= header.size()) throw SchemaError("items CSV lacks column " + c);
            auto& [s, n] = sums[c][fold];
            s += std::stod(row.at(at));
            ++n;
        }
    }
    std::vector<std::pair<std::string, Aggregate>> out;
    for (const auto& c : cols) {
        std::vector<double> per_fold;
        for (const auto& [fold, sn] : sums[c]) per_fold.push_back(sn.first / static_cast<double>(sn.second));
        out.emplace_back(c, aggregate(per_fold));
    }
    return out;
}

/// Writes <dir>/<level>_items.csv and <dir>/<level>_summary.json after
/// checking that the aggregates match a recomputation from the CSV.
inline void write_report(const EvalRun& run, const std::filesystem::path& dir) {
    const std::string csv = items_csv(run);
    const auto cols = columns(run.level, run.cfg);
    const auto again = aggregates_from_csv(csv, cols);
    for (std::size_t i = 0; i < cols.size(); ++i) {
        const Aggregate &a = run.aggregates.at(i).second, &b = again.at(i).second;
        const auto close = [](double x, double y) { return std::abs(x - y) <= 1e-12 * std::max(1.0, std::abs(x)); };
        if (a.per_fold.size() != b.per_fold.size() || !close(a.mean, b.mean) || !close(a.std, b.std))
            throw IntegrityError("report aggregate " + cols[i] + " does not match the per-item records");
    }
    std::filesystem::create_directories(dir);
    const std::string stem(to_string(run.level));
    write_file_atomic(dir / (stem + "_items.csv"), csv);
    write_file_atomic(dir / (stem + "_summary.json"), summary_json(run).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Paired t-test on per-item records
// ---------------------------------------------------------------------------

struct TTest {
    double t = 0;
    double df = 0;
    double p_value = 1;  // two-sided
    double mean_diff = 0;
};

inline TTest paired_t_test(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw ShapeError("paired_t_test: samples differ in length");
    if (a.size() < 2) throw ConfigError("paired_t_test: at least 2 pairs required");
    const double n = static_cast<double>(a.size());
    double mean = 0;
    for (std::size_t i = 0; i < a.size(); ++i) mean += a[i] - b[i];
    mean /= n;
    double ss = 0;
    for (std::size_t i = 0; i < a.size(); ++i) ss += (a[i] - b[i] - mean) * (a[i] - b[i] - mean);
    TTest r;
    r.mean_diff = mean;
    r.df = n - 1;
    const double se = std::sqrt(ss / (n - 1) / n);
    if (se == 0) {
        r.t = mean == 0 ? 0.0 : std::copysign(INFINITY, mean);
        r.p_value = mean == 0 ? 1.0 : 0.0;
        return r;
    }
    r.t = mean / se;
    const boost::math::students_t dist(r.df);
    r.p_value = 2 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t)));
    return r;
}

}  // namespace kaser::eval
