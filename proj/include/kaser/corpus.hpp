#pragma once

// Data model for student-submission corpora: knowledge components, problems,
// first-attempt submissions, JSONL ingestion with validation, and seeded
// cross-validation splits along students or problems.

#include <algorithm>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "kaser/common.hpp"

namespace kaser::corpus {

using json = nlohmann::ordered_json;

struct KnowledgeComponent {
    std::string id;
    std::string name;
    bool operator==(const KnowledgeComponent&) const = default;
};

struct Problem {
    std::string id;
    std::string statement;
    Language language = Language::java;
    std::vector<std::string> kc_ids;  // file order, no duplicates
    bool operator==(const Problem&) const = default;
};

struct Submission {
    std::string student_id;
    std::string problem_id;
    int order_index = 0;
    std::string code;
    bool correct = false;
    /// Error label ids; nullopt until the submission has been annotated.
    std::optional<std::vector<std::string>> errors;
    bool operator==(const Submission&) const = default;

    bool annotated() const { return errors.has_value(); }
    std::string key() const { return student_id + "/" + problem_id; }
};

namespace detail {

[[noreturn]] inline void schema_fail(const std::string& where, const std::string& what) {
    throw SchemaError(where + ": " + what);
}

inline const json& field(const json& obj, const char* name, const std::string& where) {
    auto it = obj.find(name);
    if (it == obj.end()) schema_fail(where, std::string("missing field '") + name + "'");
    return *it;
}

inline std::string string_field(const json& obj, const char* name, const std::string& where,
                                bool allow_empty = false) {
    const json& v = field(obj, name, where);
    if (!v.is_string()) schema_fail(where, std::string("field '") + name + "' must be a string");
    std::string s = v.get<std::string>();
    if (!allow_empty && s.empty()) schema_fail(where, std::string("field '") + name + "' must be non-empty");
    return s;
}

inline std::vector<std::string> string_list(const json& v, const std::string& where, const char* name) {
    if (!v.is_array()) schema_fail(where, std::string("field '") + name + "' must be an array of strings");
    std::vector<std::string> out;
    for (const json& e : v) {
        if (!e.is_string()) schema_fail(where, std::string("field '") + name + "' must be an array of strings");
        out.push_back(e.get<std::string>());
    }
    return out;
}

inline void reject_unknown(const json& obj, std::initializer_list<std::string_view> known, const std::string& where) {
    for (auto it = obj.begin(); it != obj.end(); ++it)
        if (std::find(known.begin(), known.end(), it.key()) == known.end())
            schema_fail(where, "unknown field '" + it.key() + "'");
}

}  // namespace detail

/// Immutable after construction; safe for concurrent readers.
class Dataset {
public:
    Dataset() = default;

    /// Validates every invariant and re-indexes order_index densely (0..n-1)
    /// per student, preserving relative order.
    Dataset(std::vector<KnowledgeComponent> kcs, std::vector<Problem> problems, std::vector<Submission> subs)
        : kcs_(std::move(kcs)), problems_(std::move(problems)), subs_(std::move(subs)) {
        for (std::size_t i = 0; i < kcs_.size(); ++i) {
            if (kcs_[i].id.empty()) throw IntegrityError("KC with empty id");
            if (kcs_[i].name.empty()) throw IntegrityError("KC '" + kcs_[i].id + "' has an empty name");
            if (!kc_index_.emplace(kcs_[i].id, i).second) throw IntegrityError("duplicate KC id '" + kcs_[i].id + "'");
        }
        for (std::size_t i = 0; i < problems_.size(); ++i) {
            const Problem& p = problems_[i];
            if (p.id.empty()) throw IntegrityError("problem with empty id");
            if (!problem_index_.emplace(p.id, i).second) throw IntegrityError("duplicate problem id '" + p.id + "'");
            if (p.kc_ids.empty()) throw IntegrityError("problem '" + p.id + "' has no KCs");
            std::unordered_set<std::string> seen;
            for (const auto& k : p.kc_ids) {
                if (!kc_index_.count(k)) throw IntegrityError("problem '" + p.id + "' references unknown KC '" + k + "'");
                if (!seen.insert(k).second) throw IntegrityError("problem '" + p.id + "' lists KC '" + k + "' twice");
            }
        }
        std::set<std::pair<std::string, std::string>> firsts;
        for (std::size_t i = 0; i < subs_.size(); ++i) {
            const Submission& s = subs_[i];
            const std::string where = "submission " + std::to_string(i + 1) + " (" + s.key() + ")";
            if (s.student_id.empty()) throw IntegrityError(where + ": empty student_id");
            if (!problem_index_.count(s.problem_id)) throw IntegrityError(where + ": unknown problem '" + s.problem_id + "'");
            if (s.order_index < 0) throw IntegrityError(where + ": negative order_index");
            if (s.code.empty()) throw IntegrityError(where + ": empty code");
            if (s.correct && s.errors && !s.errors->empty())
                throw IntegrityError(where + ": correct submission must have no errors");
            if (!firsts.emplace(s.student_id, s.problem_id).second)
                throw IntegrityError(where + ": duplicate first submission for (student, problem)");
            by_student_[s.student_id].push_back(i);
        }
        for (auto& [student, idx] : by_student_) {
            std::stable_sort(idx.begin(), idx.end(),
                             [&](std::size_t a, std::size_t b) { return subs_[a].order_index < subs_[b].order_index; });
            for (std::size_t k = 1; k < idx.size(); ++k)
                if (subs_[idx[k]].order_index == subs_[idx[k - 1]].order_index)
                    throw IntegrityError("student '" + student + "': order_index " +
                                         std::to_string(subs_[idx[k]].order_index) + " is not strictly increasing");
            for (std::size_t k = 0; k < idx.size(); ++k) subs_[idx[k]].order_index = static_cast<int>(k);
        }
    }

    const std::vector<KnowledgeComponent>& kcs() const { return kcs_; }
    const std::vector<Problem>& problems() const { return problems_; }
    const std::vector<Submission>& submissions() const { return subs_; }

    const KnowledgeComponent& kc(const std::string& id) const { return kcs_.at(lookup(kc_index_, id, "KC")); }
    const Problem& problem(const std::string& id) const {
        return problems_.at(lookup(problem_index_, id, "problem"));
    }
    /// Position of a KC in catalog (header) order.
    std::size_t kc_position(const std::string& id) const { return lookup(kc_index_, id, "KC"); }
    bool has_student(const std::string& id) const { return by_student_.count(id) > 0; }

    /// Sorted student ids.
    std::vector<std::string> students() const {
        std::vector<std::string> out;
        for (const auto& [s, _] : by_student_) out.push_back(s);
        return out;
    }
    /// Submission indices of one student in order_index order.
    const std::vector<std::size_t>& sequence(const std::string& student) const {
        auto it = by_student_.find(student);
        if (it == by_student_.end()) throw NotFoundError("unknown student '" + student + "'");
        return it->second;
    }

    /// A copy with every error set replaced (one entry per submission).
    Dataset with_errors(const std::vector<std::optional<std::vector<std::string>>>& errors) const {
        if (errors.size() != subs_.size()) throw ShapeError("with_errors: one entry per submission required");
        std::vector<Submission> subs = subs_;
        for (std::size_t i = 0; i < subs.size(); ++i) subs[i].errors = errors[i];
        return Dataset(kcs_, problems_, std::move(subs));
    }

private:
    static std::size_t lookup(const std::unordered_map<std::string, std::size_t>& m, const std::string& id,
                              const char* what) {
        auto it = m.find(id);
        if (it == m.end()) throw NotFoundError(std::string("unknown ") + what + " '" + id + "'");
        return it->second;
    }

    std::vector<KnowledgeComponent> kcs_;
    std::vector<Problem> problems_;
    std::vector<Submission> subs_;
    std::unordered_map<std::string, std::size_t> kc_index_;
    std::unordered_map<std::string, std::size_t> problem_index_;
    std::map<std::string, std::vector<std::size_t>> by_student_;
};

// ---------------------------------------------------------------------------
// JSONL serialization
// ---------------------------------------------------------------------------

inline json to_json(const Submission& s) {
    json j;
    j["student_id"] = s.student_id;
    j["problem_id"] = s.problem_id;
    j["order_index"] = s.order_index;
    j["code"] = s.code;
    j["correct"] = s.correct ? 1 : 0;
    if (s.errors) j["errors"] = *s.errors;
    return j;
}

inline json header_json(const Dataset& d) {
    json kcs = json::array(), problems = json::array();
    for (const auto& k : d.kcs()) kcs.push_back({{"id", k.id}, {"name", k.name}});
    for (const auto& p : d.problems())
        problems.push_back({{"id", p.id},
                            {"statement", p.statement},
                            {"language", std::string(display_name(p.language))},
                            {"kc_ids", p.kc_ids}});
    return {{"kcs", std::move(kcs)}, {"problems", std::move(problems)}};
}

/// Header line followed by one line per submission in storage order.
inline std::string serialize(const Dataset& d) {
    std::string out = header_json(d).dump() + "\n";
    for (const auto& s : d.submissions()) out += to_json(s).dump() + "\n";
    return out;
}

inline Submission parse_submission(const json& j, const std::string& where) {
    using namespace detail;
    if (!j.is_object()) schema_fail(where, "expected a JSON object");
    reject_unknown(j, {"student_id", "problem_id", "order_index", "code", "correct", "errors"}, where);
    Submission s;
    s.student_id = string_field(j, "student_id", where);
    s.problem_id = string_field(j, "problem_id", where);
    const json& t = field(j, "order_index", where);
    if (!t.is_number_integer() || t.get<long long>() < 0)
        schema_fail(where, "field 'order_index' must be a non-negative integer");
    s.order_index = t.get<int>();
    s.code = string_field(j, "code", where, /*allow_empty=*/true);
    const json& c = field(j, "correct", where);
    if (c.is_boolean())
        s.correct = c.get<bool>();
    else if (c.is_number_integer() && (c.get<long long>() == 0 || c.get<long long>() == 1))
        s.correct = c.get<long long>() == 1;
    else
        schema_fail(where, "field 'correct' must be 0 or 1");
    if (auto it = j.find("errors"); it != j.end() && !it->is_null()) s.errors = string_list(*it, where, "errors");
    return s;
}

inline Dataset parse_dataset(std::string_view text, const std::string& source = "<dataset>") {
    using namespace detail;
    std::vector<KnowledgeComponent> kcs;
    std::vector<Problem> problems;
    std::vector<Submission> subs;
    bool have_header = false;
    std::size_t lineno = 0;
    for (std::string_view line : split_lines(text)) {
        ++lineno;
        if (py_strip(line).empty()) continue;
        const std::string where = source + ":" + std::to_string(lineno);
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            schema_fail(where, std::string("invalid JSON: ") + e.what());
        }
        if (!have_header) {
            have_header = true;
            if (!j.is_object()) schema_fail(where, "header must be a JSON object");
            reject_unknown(j, {"kcs", "problems"}, where);
            const json& jk = field(j, "kcs", where);
            if (!jk.is_array()) schema_fail(where, "field 'kcs' must be an array");
            for (const json& k : jk) {
                if (!k.is_object()) schema_fail(where, "kcs entries must be objects");
                reject_unknown(k, {"id", "name"}, where + " kcs");
                kcs.push_back({string_field(k, "id", where + " kcs"), string_field(k, "name", where + " kcs")});
            }
            const json& jp = field(j, "problems", where);
            if (!jp.is_array()) schema_fail(where, "field 'problems' must be an array");
            for (const json& p : jp) {
                if (!p.is_object()) schema_fail(where, "problems entries must be objects");
                const std::string pw = where + " problems";
                reject_unknown(p, {"id", "statement", "language", "kc_ids"}, pw);
                Problem pr;
                pr.id = string_field(p, "id", pw);
                pr.statement = string_field(p, "statement", pw, true);
                pr.language = parse_language(string_field(p, "language", pw));
                pr.kc_ids = string_list(field(p, "kc_ids", pw), pw, "kc_ids");
                problems.push_back(std::move(pr));
            }
            continue;
        }
        subs.push_back(parse_submission(j, where));
    }
    if (!have_header) throw SchemaError(source + ": missing header line");
    return Dataset(std::move(kcs), std::move(problems), std::move(subs));
}

inline Dataset load_dataset(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw NotFoundError("dataset file not found: " + path.string());
    return parse_dataset(read_file(path), path.string());
}

inline void save_dataset(const Dataset& d, const std::filesystem::path& path) {
    write_file_atomic(path, serialize(d));
}

// ---------------------------------------------------------------------------
// History
// ---------------------------------------------------------------------------

/// Submissions of `student` with order_index < t, ascending. t beyond the
/// sequence length yields the full sequence.
inline std::vector<const Submission*> history(const Dataset& d, const std::string& student, int t) {
    const auto& seq = d.sequence(student);
    std::vector<const Submission*> out;
    for (std::size_t i : seq) {
        const Submission& s = d.submissions()[i];
        if (s.order_index >= t) break;
        out.push_back(&s);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

enum class SplitAxis { by_student, by_problem };

inline std::string_view to_string(SplitAxis a) { return a == SplitAxis::by_student ? "by_student" : "by_problem"; }

inline SplitAxis parse_split_axis(std::string_view s) {
    if (s == "by_student" || s == "student") return SplitAxis::by_student;
    if (s == "by_problem" || s == "problem") return SplitAxis::by_problem;
    throw ConfigError("unknown split axis '" + std::string(s) + "'");
}

struct SplitPlan {
    SplitAxis axis = SplitAxis::by_student;
    int folds = 5;
    double val_ratio = 0.1;
    double test_ratio = 0.1;
    std::uint64_t seed = 0;
};

enum class Role { train, val, test };

/// One fold: a partition of the axis units into train/val/test.
struct Fold {
    SplitAxis axis = SplitAxis::by_student;
    int index = 0;
    std::vector<std::string> train, val, test;  // each sorted

    Role role_of(const std::string& unit) const {
        if (std::binary_search(test.begin(), test.end(), unit)) return Role::test;
        if (std::binary_search(val.begin(), val.end(), unit)) return Role::val;
        return Role::train;
    }
    Role role_of(const Submission& s) const {
        return role_of(axis == SplitAxis::by_student ? s.student_id : s.problem_id);
    }
    /// Indices of submissions whose unit has the given role.
    std::vector<std::size_t> select(const Dataset& d, Role r) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < d.submissions().size(); ++i)
            if (role_of(d.submissions()[i]) == r) out.push_back(i);
        return out;
    }
};

inline std::vector<std::string> split_units(const Dataset& d, SplitAxis axis) {
    if (axis == SplitAxis::by_student) return d.students();
    std::vector<std::string> out;
    for (const auto& p : d.problems()) out.push_back(p.id);
    std::sort(out.begin(), out.end());
    return out;
}

/// Sorted unit ids are shuffled with seeded Fisher-Yates. With
/// s = max(1, round(test_ratio * n)), fold f tests on slice f of the
/// permutation ([f*s, (f+1)*s)) and validates on slice (f+1) mod folds;
/// everything else trains. Test slices are pairwise disjoint.
inline std::vector<Fold> split(const std::vector<std::string>& units_in, const SplitPlan& plan) {
    if (plan.folds < 2) throw ConfigError("split: at least 2 folds required");
    if (std::abs(plan.val_ratio - plan.test_ratio) > 1e-12)
        throw ConfigError("split: val and test ratios must be equal (validation reuses the next test slice)");
    std::vector<std::string> units = units_in;
    std::sort(units.begin(), units.end());
    units.erase(std::unique(units.begin(), units.end()), units.end());
    const std::size_t n = units.size();
    if (n < 10) throw ConfigError("split: need at least 10 units along the split axis, have " + std::to_string(n));
    const std::size_t s = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(plan.test_ratio * double(n))));
    if (s * static_cast<std::size_t>(plan.folds) > n)
        throw ConfigError("split: folds * test slice exceeds the number of units");
    Rng rng(plan.seed);
    fisher_yates(units, rng);
    auto slice = [&](std::size_t f) {
        std::vector<std::string> v(units.begin() + static_cast<std::ptrdiff_t>(f * s),
                                   units.begin() + static_cast<std::ptrdiff_t>((f + 1) * s));
        std::sort(v.begin(), v.end());
        return v;
    };
    std::vector<Fold> out;
    for (int f = 0; f < plan.folds; ++f) {
        Fold fold;
        fold.axis = plan.axis;
        fold.index = f;
        fold.test = slice(static_cast<std::size_t>(f));
        fold.val = slice(static_cast<std::size_t>((f + 1) % plan.folds));
        for (const auto& u : units)
            if (!std::binary_search(fold.test.begin(), fold.test.end(), u) &&
                !std::binary_search(fold.val.begin(), fold.val.end(), u))
                fold.train.push_back(u);
        std::sort(fold.train.begin(), fold.train.end());
        out.push_back(std::move(fold));
    }
    return out;
}

inline std::vector<Fold> split(const Dataset& d, const SplitPlan& plan) { return split(split_units(d, plan.axis), plan); }

}  // namespace kaser::corpus
