#pragma once

// RAII wrapper over the tree-sitter C runtime and the AST subtree match.

#include <cstdlib>
#include <memory>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <tree_sitter/api.h>

#include "kaser/common.hpp"

extern "C" {
const TSLanguage* tree_sitter_java(void);
const TSLanguage* tree_sitter_python(void);
}

namespace kaser::metrics {

inline const TSLanguage* ts_language(Language lang) {
    return lang == Language::java ? tree_sitter_java() : tree_sitter_python();
}

/// A parsed source buffer. Owns both the tree and the bytes it points into.
class SyntaxTree {
public:
    SyntaxTree() = default;

    /// Error-recovering parse; `ok()` is false only if the runtime returned no tree.
    SyntaxTree(std::string source, Language lang) : source_(std::move(source)), lang_(lang) {
        thread_local std::unique_ptr<TSParser, decltype(&ts_parser_delete)> parsers[2] = {
            {nullptr, ts_parser_delete}, {nullptr, ts_parser_delete}};
        auto& parser = parsers[lang == Language::java ? 0 : 1];
        if (!parser) {
            parser.reset(ts_parser_new());
            if (!ts_parser_set_language(parser.get(), ts_language(lang)))
                throw Error("tree-sitter language version mismatch");
        }
        ts_parser_reset(parser.get());
        tree_.reset(ts_parser_parse_string(parser.get(), nullptr, source_.data(),
                                           static_cast<uint32_t>(source_.size())));
    }

    bool ok() const { return tree_ != nullptr; }
    TSNode root() const { return ts_tree_root_node(tree_.get()); }
    const std::string& source() const { return source_; }
    Language language() const { return lang_; }

private:
    struct TreeDeleter {
        void operator()(TSTree* t) const { ts_tree_delete(t); }
    };
    std::string source_;
    Language lang_ = Language::java;
    std::unique_ptr<TSTree, TreeDeleter> tree_;
};

/// S-expression of a node: kind labels and field names, no lexemes.
inline std::string sexp(TSNode node) {
    char* raw = ts_node_string(node);
    std::string s(raw);
    std::free(raw);
    return s;
}

/// Serialized subtrees of the root and of every descendant that has children,
/// in the order of a depth-first stack walk.
inline std::vector<std::string> subtree_sexps(const SyntaxTree& tree) {
    std::vector<std::string> out;
    if (!tree.ok()) return out;
    std::vector<TSNode> stack{tree.root()};
    while (!stack.empty()) {
        TSNode cur = stack.back();
        stack.pop_back();
        out.push_back(sexp(cur));
        const uint32_t n = ts_node_child_count(cur);
        for (uint32_t i = 0; i < n; ++i) {
            TSNode c = ts_node_child(cur, i);
            if (ts_node_child_count(c) != 0) stack.push_back(c);
        }
    }
    return out;
}

enum class SubtreeCounting {
    membership,  // a reference subtree counts if it occurs anywhere in the hypothesis
    clipped,     // multiset intersection: each hypothesis subtree is used at most once
};

struct SubtreeTally {
    std::size_t matched = 0;
    std::size_t total = 0;
    double score() const { return total ? static_cast<double>(matched) / static_cast<double>(total) : 0.0; }
};

inline SubtreeTally subtree_tally(const std::vector<std::string>& hyp, const std::vector<std::string>& ref,
                                  SubtreeCounting mode = SubtreeCounting::membership) {
    std::unordered_map<std::string_view, std::size_t> avail;
    for (const auto& s : hyp) ++avail[s];
    SubtreeTally t;
    t.total = ref.size();
    for (const auto& s : ref) {
        auto it = avail.find(s);
        if (it == avail.end() || it->second == 0) continue;
        ++t.matched;
        if (mode == SubtreeCounting::clipped) --it->second;
    }
    return t;
}

/// Fraction of reference subtrees found in the hypothesis.
inline double syntax_match(const SyntaxTree& hyp, const SyntaxTree& ref,
                           SubtreeCounting mode = SubtreeCounting::membership) {
    if (!hyp.ok() || !ref.ok()) return 0.0;
    return subtree_tally(subtree_sexps(hyp), subtree_sexps(ref), mode).score();
}

}  // namespace kaser::metrics
