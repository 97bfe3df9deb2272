#pragma once

// Variable dataflow extraction over tree-sitter trees (Java and Python), name
// normalization, and the dataflow match. Where the original algorithm
// iterates a hash set of names, the order is that of CPython with a fixed
// hash seed (see pyset_order.hpp).

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <tuple>
#include <unordered_map>
#include <utility>
#include <vector>

#include "kaser/common.hpp"
#include "kaser/metrics/pyset_order.hpp"
#include "kaser/metrics/syntax.hpp"

namespace kaser::metrics {

/// One dataflow record: `name` at token position `idx` comes from / is
/// computed from `parents` at `parent_idx`.
struct DfgItem {
    std::string name;
    int idx = 0;
    std::string relation;
    std::vector<std::string> parents;
    std::vector<int> parent_idx;
};

/// A normalized edge: variables renamed var_0, var_1, ... in first-occurrence order.
struct DataflowEdge {
    std::string var;
    std::string relation;
    std::vector<std::string> parents;
    friend bool operator==(const DataflowEdge&, const DataflowEdge&) = default;
};

struct DataflowGraph {
    std::vector<DfgItem> items;
    std::vector<DataflowEdge> edges;
};

namespace detail {

using SpanKey = std::tuple<uint32_t, uint32_t, uint32_t, uint32_t>;

inline SpanKey span_key(TSNode n) {
    const TSPoint a = ts_node_start_point(n), b = ts_node_end_point(n);
    return {a.row, a.column, b.row, b.column};
}

struct DfgAbort {};

inline TSNode need(TSNode n) {
    if (ts_node_is_null(n)) throw DfgAbort{};
    return n;
}

inline std::string_view node_type(TSNode n) { return ts_node_type(n); }

inline TSNode field(TSNode n, std::string_view name) {
    return ts_node_child_by_field_name(need(n), name.data(), static_cast<uint32_t>(name.size()));
}

inline std::vector<TSNode> children(TSNode n) {
    need(n);
    const uint32_t c = ts_node_child_count(n);
    std::vector<TSNode> out;
    out.reserve(c);
    for (uint32_t i = 0; i < c; ++i) out.push_back(ts_node_child(n, i));
    return out;
}

inline bool token_leaf(TSNode n) {
    const std::string_view t = node_type(n);
    return (ts_node_child_count(n) == 0 || t == "string_literal" || t == "string" || t == "character_literal") &&
           t != "comment";
}

inline void token_index(TSNode n, std::vector<SpanKey>& out) {
    if (token_leaf(n)) {
        out.push_back(span_key(n));
        return;
    }
    const uint32_t c = ts_node_child_count(n);
    for (uint32_t i = 0; i < c; ++i) token_index(ts_node_child(n, i), out);
}

// Slices a UTF-8 line by code-point indices [a, b), clamped like a Python slice.
inline std::string cp_slice(std::string_view line, std::size_t a, std::size_t b = std::string_view::npos) {
    bool ascii = true;
    for (unsigned char c : line)
        if (c >= 0x80) {
            ascii = false;
            break;
        }
    if (ascii) {
        if (a >= line.size() || a >= b) return {};
        return std::string(line.substr(a, std::min(b, line.size()) - a));
    }
    std::vector<std::size_t> starts;
    for (std::size_t i = 0; i < line.size(); ++i)
        if ((static_cast<unsigned char>(line[i]) & 0xC0) != 0x80) starts.push_back(i);
    const std::size_t n = starts.size();
    a = std::min(a, n);
    b = std::min(b, n);
    if (a >= b) return {};
    const std::size_t from = starts[a], to = b < n ? starts[b] : line.size();
    return std::string(line.substr(from, to - from));
}

struct TokenTable {
    std::map<SpanKey, std::pair<int, std::string>> at;
    const std::pair<int, std::string>& operator[](const SpanKey& k) const {
        auto it = at.find(k);
        if (it == at.end()) throw DfgAbort{};
        return it->second;
    }
};

inline std::vector<SpanKey> variable_index(TSNode n, const TokenTable& tt) {
    need(n);
    std::vector<SpanKey> out;
    auto rec = [&](auto&& self, TSNode x) -> void {
        if (token_leaf(x)) {
            const SpanKey k = span_key(x);
            if (node_type(x) != tt[k].second) out.push_back(k);
            return;
        }
        const uint32_t c = ts_node_child_count(x);
        for (uint32_t i = 0; i < c; ++i) self(self, ts_node_child(x, i));
    };
    rec(rec, n);
    return out;
}

using States = std::unordered_map<std::string, std::vector<int>>;
using Dfg = std::vector<DfgItem>;

inline void sort_by_idx(Dfg& d) {
    std::stable_sort(d.begin(), d.end(), [](const DfgItem& a, const DfgItem& b) { return a.idx < b.idx; });
}

inline void append(Dfg& d, Dfg&& more) {
    d.insert(d.end(), std::make_move_iterator(more.begin()), std::make_move_iterator(more.end()));
}

inline std::vector<std::string> name_union(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    std::vector<std::string> all(a);
    all.insert(all.end(), b.begin(), b.end());
    return py_set_order(all);
}

inline std::vector<int> idx_union(const std::vector<int>& a, const std::vector<int>& b) {
    std::set<int> s(a.begin(), a.end());
    s.insert(b.begin(), b.end());
    return {s.begin(), s.end()};
}

// Collapses records sharing (name, idx, relation), as done after loop bodies.
inline Dfg merge_loop_records(const Dfg& d) {
    std::vector<DfgItem> order;
    std::map<std::tuple<std::string, int, std::string>, std::size_t> pos;
    for (const DfgItem& x : d) {
        auto key = std::make_tuple(x.name, x.idx, x.relation);
        auto it = pos.find(key);
        if (it == pos.end()) {
            pos.emplace(key, order.size());
            order.push_back(x);
        } else {
            DfgItem& y = order[it->second];
            y.parents = name_union(y.parents, x.parents);
            y.parent_idx = idx_union(y.parent_idx, x.parent_idx);
        }
    }
    sort_by_idx(order);
    return order;
}

inline States merge_states(const std::vector<States>& all) {
    States out;
    for (const States& s : all)
        for (const auto& [k, v] : s) {
            auto& dst = out[k];
            dst.insert(dst.end(), v.begin(), v.end());
        }
    for (auto& [k, v] : out) {
        std::sort(v.begin(), v.end());
        v.erase(std::unique(v.begin(), v.end()), v.end());
    }
    return out;
}

struct Extractor {
    const TokenTable& tt;
    Language lang;

    std::pair<Dfg, States> leaf(TSNode n, States states) const {
        const auto& [idx, code] = tt[span_key(n)];
        if (node_type(n) == code) return {{}, std::move(states)};
        auto it = states.find(code);
        if (it != states.end()) return {{DfgItem{code, idx, "comesFrom", {code}, it->second}}, std::move(states)};
        if (node_type(n) == "identifier") states[code] = {idx};
        return {{DfgItem{code, idx, "comesFrom", {}, {}}}, std::move(states)};
    }

    std::pair<Dfg, States> declarator(TSNode n, States states) const {
        TSNode name = field(n, "name");
        TSNode value = field(n, "value");
        Dfg dfg;
        if (ts_node_is_null(value)) {
            for (const auto& k : variable_index(name, tt)) {
                const auto& [idx, code] = tt[k];
                dfg.push_back({code, idx, "comesFrom", {}, {}});
                states[code] = {idx};
            }
            sort_by_idx(dfg);
            return {std::move(dfg), std::move(states)};
        }
        const auto name_idx = variable_index(name, tt);
        const auto value_idx = variable_index(value, tt);
        auto [temp, st] = run(value, std::move(states));
        states = std::move(st);
        append(dfg, std::move(temp));
        for (const auto& k1 : name_idx) {
            const auto& [idx1, code1] = tt[k1];
            for (const auto& k2 : value_idx) {
                const auto& [idx2, code2] = tt[k2];
                dfg.push_back({code1, idx1, "comesFrom", {code2}, {idx2}});
            }
            states[code1] = {idx1};
        }
        sort_by_idx(dfg);
        return {std::move(dfg), std::move(states)};
    }

    // left := right with one record per right-hand variable.
    void pairwise(TSNode left, TSNode right, Dfg& dfg, States& states) const {
        const auto name_idx = variable_index(left, tt);
        const auto value_idx = variable_index(right, tt);
        for (const auto& k1 : name_idx) {
            const auto& [idx1, code1] = tt[k1];
            for (const auto& k2 : value_idx) {
                const auto& [idx2, code2] = tt[k2];
                dfg.push_back({code1, idx1, "computedFrom", {code2}, {idx2}});
            }
            states[code1] = {idx1};
        }
    }

    // left := right with one record listing all right-hand variables.
    void grouped(TSNode left, TSNode right, Dfg& dfg, States& states) const {
        const auto left_idx = variable_index(left, tt);
        const auto right_idx = variable_index(right, tt);
        std::vector<std::string> names;
        std::vector<int> idxs;
        for (const auto& k : right_idx) {
            names.push_back(tt[k].second);
            idxs.push_back(tt[k].first);
        }
        for (const auto& k1 : left_idx) {
            const auto& [idx1, code1] = tt[k1];
            dfg.push_back({code1, idx1, "computedFrom", names, idxs});
            states[code1] = {idx1};
        }
    }

    std::pair<Dfg, States> generic(TSNode n, States states, std::string_view do_first) const {
        Dfg dfg;
        const auto kids = children(n);
        for (TSNode c : kids)
            if (!do_first.empty() && node_type(c) == do_first) {
                auto [t, s] = run(c, std::move(states));
                append(dfg, std::move(t));
                states = std::move(s);
            }
        for (TSNode c : kids)
            if (do_first.empty() || node_type(c) != do_first) {
                auto [t, s] = run(c, std::move(states));
                append(dfg, std::move(t));
                states = std::move(s);
            }
        sort_by_idx(dfg);
        return {std::move(dfg), std::move(states)};
    }

    std::pair<Dfg, States> twice_children(TSNode n, States states) const {
        Dfg dfg;
        const auto kids = children(n);
        for (int pass = 0; pass < 2; ++pass)
            for (TSNode c : kids) {
                auto [t, s] = run(c, std::move(states));
                append(dfg, std::move(t));
                states = std::move(s);
            }
        return {merge_loop_records(dfg), std::move(states)};
    }

    std::pair<Dfg, States> run(TSNode n, States states) const {
        need(n);
        if (token_leaf(n)) return leaf(n, std::move(states));
        return lang == Language::java ? java(n, std::move(states)) : python(n, std::move(states));
    }

    std::pair<Dfg, States> java(TSNode n, States states) const {
        const std::string_view type = node_type(n);
        if (type == "variable_declarator") return declarator(n, std::move(states));
        if (type == "assignment_expression") {
            TSNode left = field(n, "left"), right = field(n, "right");
            Dfg dfg;
            auto [t, s] = run(right, std::move(states));
            append(dfg, std::move(t));
            states = std::move(s);
            pairwise(left, right, dfg, states);
            sort_by_idx(dfg);
            return {std::move(dfg), std::move(states)};
        }
        if (type == "update_expression") {
            Dfg dfg;
            const auto idxs = variable_index(n, tt);
            for (const auto& k1 : idxs) {
                const auto& [idx1, code1] = tt[k1];
                for (const auto& k2 : idxs) {
                    const auto& [idx2, code2] = tt[k2];
                    dfg.push_back({code1, idx1, "computedFrom", {code2}, {idx2}});
                }
                states[code1] = {idx1};
            }
            sort_by_idx(dfg);
            return {std::move(dfg), std::move(states)};
        }
        if (type == "if_statement" || type == "else") {
            Dfg dfg;
            States current = states;
            std::vector<States> others;
            bool flag = false;
            bool tag = type.find("else") != std::string_view::npos;
            for (TSNode c : children(n)) {
                const std::string_view ct = node_type(c);
                if (ct.find("else") != std::string_view::npos) tag = true;
                if (ct != "if_statement" && ct != "else" && !flag) {
                    auto [t, s] = run(c, std::move(current));
                    append(dfg, std::move(t));
                    current = std::move(s);
                } else {
                    flag = true;
                    auto [t, s] = run(c, states);
                    append(dfg, std::move(t));
                    others.push_back(std::move(s));
                }
            }
            others.push_back(std::move(current));
            if (!tag) others.push_back(states);
            sort_by_idx(dfg);
            return {std::move(dfg), merge_states(others)};
        }
        if (type == "for_statement") {
            Dfg dfg;
            const auto kids = children(n);
            for (TSNode c : kids) {
                auto [t, s] = run(c, std::move(states));
                append(dfg, std::move(t));
                states = std::move(s);
            }
            bool flag = false;
            for (TSNode c : kids) {
                if (flag) {
                    auto [t, s] = run(c, std::move(states));
                    append(dfg, std::move(t));
                    states = std::move(s);
                } else if (node_type(c) == "local_variable_declaration") {
                    flag = true;
                }
            }
            return {merge_loop_records(dfg), std::move(states)};
        }
        if (type == "enhanced_for_statement") {
            TSNode name = field(n, "name"), value = field(n, "value"), body = field(n, "body");
            Dfg dfg;
            for (int pass = 0; pass < 2; ++pass) {
                auto [t, s] = run(value, std::move(states));
                append(dfg, std::move(t));
                states = std::move(s);
                pairwise(name, value, dfg, states);
                auto [t2, s2] = run(body, std::move(states));
                append(dfg, std::move(t2));
                states = std::move(s2);
            }
            return {merge_loop_records(dfg), std::move(states)};
        }
        if (type == "while_statement") return twice_children(n, std::move(states));
        return generic(n, std::move(states), {});
    }

    // Splits an assignment side into comma-separated parts.
    static std::vector<TSNode> parts(TSNode side) {
        std::vector<TSNode> out;
        for (TSNode c : children(side))
            if (node_type(c) != ",") out.push_back(c);
        return out;
    }

    void zip_sides(TSNode n, std::vector<TSNode>& left, std::vector<TSNode>& right) const {
        TSNode l = field(n, "left"), r = field(n, "right");
        left = parts(l);
        right = parts(r);
        if (left.size() != right.size()) {
            left = {l};
            right = {r};
        }
        if (left.empty()) left = {l};
        if (right.empty()) right = {r};
    }

    std::pair<Dfg, States> python(TSNode n, States states) const {
        const std::string_view type = node_type(n);
        if (type == "default_parameter") return declarator(n, std::move(states));
        if (type == "assignment" || type == "augmented_assignment" || type == "for_in_clause") {
            std::vector<TSNode> left, right;
            if (type == "for_in_clause") {
                const auto kids = children(n);
                if (kids.empty()) throw DfgAbort{};
                right = {kids.back()};
                left = {field(n, "left")};
            } else {
                if (ts_node_is_null(field(n, "right"))) return {{}, std::move(states)};
                zip_sides(n, left, right);
            }
            Dfg dfg;
            for (TSNode r : right) {
                auto [t, s] = run(r, std::move(states));
                append(dfg, std::move(t));
                states = std::move(s);
            }
            for (std::size_t i = 0; i < std::min(left.size(), right.size()); ++i)
                grouped(left[i], right[i], dfg, states);
            sort_by_idx(dfg);
            return {std::move(dfg), std::move(states)};
        }
        if (type == "if_statement") {
            Dfg dfg;
            States current = states;
            std::vector<States> others;
            bool tag = false;
            for (TSNode c : children(n)) {
                const std::string_view ct = node_type(c);
                if (ct.find("else") != std::string_view::npos) tag = true;
                if (ct != "elif_clause" && ct != "else_clause") {
                    auto [t, s] = run(c, std::move(current));
                    append(dfg, std::move(t));
                    current = std::move(s);
                } else {
                    auto [t, s] = run(c, states);
                    append(dfg, std::move(t));
                    others.push_back(std::move(s));
                }
            }
            others.push_back(std::move(current));
            if (!tag) others.push_back(states);
            sort_by_idx(dfg);
            return {std::move(dfg), merge_states(others)};
        }
        if (type == "for_statement") {
            Dfg dfg;
            for (int pass = 0; pass < 2; ++pass) {
                std::vector<TSNode> left, right;
                zip_sides(n, left, right);
                for (TSNode r : right) {
                    auto [t, s] = run(r, std::move(states));
                    append(dfg, std::move(t));
                    states = std::move(s);
                }
                for (std::size_t i = 0; i < std::min(left.size(), right.size()); ++i)
                    grouped(left[i], right[i], dfg, states);
                const auto kids = children(n);
                if (!kids.empty() && node_type(kids.back()) == "block") {
                    auto [t, s] = run(kids.back(), std::move(states));
                    append(dfg, std::move(t));
                    states = std::move(s);
                }
            }
            return {merge_loop_records(dfg), std::move(states)};
        }
        if (type == "while_statement") return twice_children(n, std::move(states));
        return generic(n, std::move(states), "for_in_clause");
    }
};

}  // namespace detail

/// Raw dataflow records of a (comment-stripped) source after filtering
/// isolated tokens and merging records that share a token position.
inline std::vector<DfgItem> extract_dataflow(const SyntaxTree& tree) {
    using namespace detail;
    std::vector<DfgItem> dfg;
    if (!tree.ok()) return dfg;
    try {
        const TSNode root = tree.root();
        std::vector<SpanKey> tokens;
        token_index(root, tokens);
        const auto lines = split_lines(tree.source());
        TokenTable tt;
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            const auto [sr, sc, er, ec] = tokens[i];
            if (sr >= lines.size() || er >= lines.size()) throw DfgAbort{};
            std::string text;
            if (sr == er) {
                text = cp_slice(lines[sr], sc, ec);
            } else {
                text = cp_slice(lines[sr], sc);
                for (uint32_t r = sr + 1; r < er; ++r) text.append(lines[r]);
                text += cp_slice(lines[er], 0, ec);
            }
            tt.at[tokens[i]] = {static_cast<int>(i), std::move(text)};
        }
        try {
            dfg = Extractor{tt, tree.language()}.run(root, {}).first;
        } catch (const DfgAbort&) {
            dfg.clear();
        }
    } catch (const DfgAbort&) {
        return {};
    }
    sort_by_idx(dfg);
    std::set<int> linked;
    for (const DfgItem& d : dfg) {
        if (!d.parent_idx.empty()) linked.insert(d.idx);
        linked.insert(d.parent_idx.begin(), d.parent_idx.end());
    }
    std::vector<DfgItem> kept;
    for (DfgItem& d : dfg)
        if (linked.count(d.idx)) kept.push_back(std::move(d));

    std::vector<DfgItem> merged;
    std::map<int, std::size_t> at;
    for (DfgItem& d : kept) {
        auto it = at.find(d.idx);
        if (it == at.end()) {
            at.emplace(d.idx, merged.size());
            merged.push_back(std::move(d));
        } else {
            DfgItem& m = merged[it->second];
            m.parents = detail::name_union(m.parents, d.parents);
            m.parent_idx = detail::idx_union(m.parent_idx, d.parent_idx);
            m.name = std::move(d.name);
            m.relation = std::move(d.relation);
        }
    }
    return merged;
}

inline std::vector<DataflowEdge> normalize_dataflow(const std::vector<DfgItem>& items) {
    std::unordered_map<std::string, std::string> names;
    auto norm = [&](const std::string& n) -> const std::string& {
        auto it = names.find(n);
        if (it == names.end()) it = names.emplace(n, "var_" + std::to_string(names.size())).first;
        return it->second;
    };
    std::vector<DataflowEdge> out;
    out.reserve(items.size());
    for (const DfgItem& d : items) {
        DataflowEdge e;
        for (const auto& p : d.parents) norm(p);
        e.var = norm(d.name);
        e.relation = d.relation;
        for (const auto& p : d.parents) e.parents.push_back(norm(p));
        out.push_back(std::move(e));
    }
    return out;
}

inline DataflowGraph dataflow_graph(const SyntaxTree& tree) {
    DataflowGraph g;
    g.items = extract_dataflow(tree);
    g.edges = normalize_dataflow(g.items);
    return g;
}

struct DataflowTally {
    std::size_t matched = 0;
    std::size_t total = 0;
};

/// Each reference edge consumes at most one equal hypothesis edge.
inline DataflowTally dataflow_tally(const DataflowGraph& hyp, const DataflowGraph& ref) {
    DataflowTally t;
    t.total = ref.edges.size();
    std::vector<DataflowEdge> pool = hyp.edges;
    for (const DataflowEdge& e : ref.edges) {
        auto it = std::find(pool.begin(), pool.end(), e);
        if (it != pool.end()) {
            ++t.matched;
            pool.erase(it);
        }
    }
    return t;
}

/// |matched| / |reference edges|; 1.0 when the reference has no edges.
inline double dataflow_match(const DataflowGraph& hyp, const DataflowGraph& ref) {
    const DataflowTally t = dataflow_tally(hyp, ref);
    return t.total ? static_cast<double>(t.matched) / static_cast<double>(t.total) : 1.0;
}

}  // namespace kaser::metrics
