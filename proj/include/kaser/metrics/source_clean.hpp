#pragma once

// Comment and docstring removal applied before the syntax and dataflow
// components. Blank lines are dropped from the result.

#include <optional>
#include <string>
#include <string_view>

#include "kaser/common.hpp"
#include "kaser/metrics/python_lexer.hpp"

namespace kaser::metrics {

namespace detail {

inline std::string drop_blank_lines(std::string_view text) {
    std::string out;
    bool first = true;
    for (std::string_view line : split_lines(text)) {
        if (py_strip(line).empty()) continue;
        if (!first) out.push_back('\n');
        out.append(line);
        first = false;
    }
    return out;
}

// Left-to-right scan equivalent to substituting
//   //.*?$ | /\*.*?\*/ | '(?:\\.|[^\\'])*' | "(?:\\.|[^\\"])*"
// (dot matches newline) where comments become a single space and string or
// character literals are copied through.
inline std::string blank_c_comments(std::string_view s) {
    std::string out;
    out.reserve(s.size());
    std::size_t i = 0;
    auto quoted_end = [&](std::size_t j, char q) -> std::size_t {
        ++j;
        while (j < s.size()) {
            if (s[j] == q) return j + 1;
            if (s[j] == '\\') {
                if (j + 1 >= s.size()) return std::string_view::npos;
                j += 2;
                continue;
            }
            ++j;
        }
        return std::string_view::npos;
    };
    while (i < s.size()) {
        if (s[i] == '/' && i + 1 < s.size() && s[i + 1] == '/') {
            std::size_t e = s.find('\n', i);
            if (e == std::string_view::npos) e = s.size();
            out.push_back(' ');
            i = e;
            continue;
        }
        if (s[i] == '/' && i + 1 < s.size() && s[i + 1] == '*') {
            const std::size_t e = s.find("*/", i + 2);
            if (e != std::string_view::npos) {
                out.push_back(' ');
                i = e + 2;
                continue;
            }
        }
        if (s[i] == '\'' || s[i] == '"') {
            const std::size_t e = quoted_end(i, s[i]);
            if (e != std::string_view::npos) {
                out.append(s.substr(i, e - i));
                i = e;
                continue;
            }
        }
        out.push_back(s[i]);
        ++i;
    }
    return out;
}

inline std::string strip_python(std::string_view source) {
    const auto toks = python_lex(source);  // throws on lexing errors
    std::string out;
    PyTok prev = PyTok::indent;
    int last_lineno = -1, last_col = 0;
    for (const PyToken& t : toks) {
        if (t.start_line > last_lineno) last_col = 0;
        if (t.start_col > last_col) out.append(static_cast<std::size_t>(t.start_col - last_col), ' ');
        if (t.type == PyTok::comment) {
            // dropped
        } else if (t.type == PyTok::string) {
            // A string right after INDENT or NEWLINE, or at column 0, is a docstring.
            if (prev != PyTok::indent && prev != PyTok::newline && t.start_col > 0) out += t.text;
        } else {
            out += t.text;
        }
        prev = t.type;
        last_col = t.end_col;
        last_lineno = t.end_line;
    }
    return drop_blank_lines(out);
}

}  // namespace detail

/// Removes comments (and Python docstrings). Returns nullopt when the Python
/// lexer rejects the source; callers then use the source unchanged.
inline std::optional<std::string> try_strip_comments(std::string_view source, Language lang) {
    if (lang == Language::python) {
        try {
            return detail::strip_python(source);
        } catch (const PyLexError&) {
            return std::nullopt;
        }
    }
    return detail::drop_blank_lines(detail::blank_c_comments(source));
}

inline std::string strip_comments(std::string_view source, Language lang) {
    auto r = try_strip_comments(source, lang);
    return r ? std::move(*r) : std::string(source);
}

}  // namespace kaser::metrics
