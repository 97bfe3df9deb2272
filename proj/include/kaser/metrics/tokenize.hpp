#pragma once

// Lossless lexical token streams for Java and Python source.

#include <algorithm>
#include <array>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "kaser/common.hpp"
#include "kaser/metrics/keyword_lists.hpp"
#include "kaser/metrics/python_lexer.hpp"

namespace kaser::metrics {

enum class TokenKind { keyword, identifier, literal, op, punct };

inline std::string_view to_string(TokenKind k) {
    switch (k) {
        case TokenKind::keyword: return "keyword";
        case TokenKind::identifier: return "identifier";
        case TokenKind::literal: return "literal";
        case TokenKind::op: return "operator";
        case TokenKind::punct: return "punct";
    }
    return "?";
}

struct Token {
    std::string lexeme;
    TokenKind kind;
    std::size_t offset;  // byte offset of the lexeme in the source
};

/// tokens[i] is preceded by separators[i]; separators.back() is the trailing
/// text. Python indentation appears as INDENT (the leading whitespace),
/// DEDENT and NEWLINE tokens of kind punct; DEDENT and an implicit final
/// NEWLINE are zero-length.
struct TokenStream {
    Language language = Language::java;
    std::vector<Token> tokens;
    std::vector<std::string> separators{""};

    std::string reconstruct() const {
        std::string out;
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            out += separators[i];
            out += tokens[i].lexeme;
        }
        out += separators.back();
        return out;
    }
    std::vector<std::string> lexemes(bool skip_empty = true) const {
        std::vector<std::string> out;
        for (const auto& t : tokens)
            if (!skip_empty || !t.lexeme.empty()) out.push_back(t.lexeme);
        return out;
    }
};

inline const std::unordered_set<std::string_view>& keyword_set(Language lang) {
    static const std::unordered_set<std::string_view> java(std::begin(detail::java_keywords),
                                                           std::end(detail::java_keywords));
    static const std::unordered_set<std::string_view> python(std::begin(detail::python_keywords),
                                                             std::end(detail::python_keywords));
    return lang == Language::java ? java : python;
}

namespace detail {

class StreamBuilder {
public:
    StreamBuilder(std::string_view src, Language lang) : src_(src) { ts_.language = lang; }

    void add(std::size_t begin, std::size_t end, TokenKind kind) {
        if (begin < cursor_ || end < begin || end > src_.size()) return;
        ts_.separators.back() = std::string(src_.substr(cursor_, begin - cursor_));
        ts_.tokens.push_back(Token{std::string(src_.substr(begin, end - begin)), kind, begin});
        ts_.separators.emplace_back();
        cursor_ = end;
    }
    TokenStream finish() {
        ts_.separators.back() = std::string(src_.substr(cursor_));
        return std::move(ts_);
    }

private:
    std::string_view src_;
    std::size_t cursor_ = 0;
    TokenStream ts_;
};

inline bool java_ident_start(unsigned char c) {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c == '_' || c == '$' || c >= 0x80;
}
inline bool java_ident_part(unsigned char c) { return java_ident_start(c) || (c >= '0' && c <= '9'); }

inline constexpr std::array<std::string_view, 49> java_symbols = {
    ">>>=", "<<=", ">>=", ">>>", "...", "->", "::", "++", "--", "&&", "||", "==", "!=", "<=", ">=", "+=", "-=",
    "*=",   "/=",  "&=",  "|=",  "^=",  "%=", "<<", ">>", "(",  ")",  "{",  "}",  "[",  "]",  ";",  ",",  ".",
    "@",    "=",   ">",   "<",   "!",   "~",  "?",  ":",  "+",  "-",  "*",  "/",  "&",  "|",  "^"};

inline bool java_punct(std::string_view s) {
    return s == "(" || s == ")" || s == "{" || s == "}" || s == "[" || s == "]" || s == ";" || s == "," ||
           s == "." || s == "..." || s == "@" || s == "::";
}

inline std::size_t utf8_len(unsigned char c) {
    if (c < 0x80) return 1;
    if ((c >> 5) == 0x6) return 2;
    if ((c >> 4) == 0xE) return 3;
    if ((c >> 3) == 0x1E) return 4;
    return 1;
}

inline TokenStream lex_java(std::string_view s) {
    StreamBuilder b(s, Language::java);
    const auto& kw = keyword_set(Language::java);
    std::size_t i = 0;
    const std::size_t n = s.size();
    auto at = [&](std::size_t k) -> char { return k < n ? s[k] : '\0'; };
    auto is_d = [](char c) { return c >= '0' && c <= '9'; };
    auto is_x = [&](char c) { return is_d(c) || (c >= 'a' && c <= 'f') || (c >= 'A' && c <= 'F'); };
    while (i < n) {
        const char c = s[i];
        if (c == ' ' || c == '\t' || c == '\f' || c == '\n' || c == '\r') {
            ++i;
            continue;
        }
        if (c == '/' && at(i + 1) == '/') {
            while (i < n && s[i] != '\n') ++i;
            continue;
        }
        if (c == '/' && at(i + 1) == '*') {
            const std::size_t e = s.find("*/", i + 2);
            i = e == std::string_view::npos ? n : e + 2;
            continue;
        }
        const std::size_t start = i;
        if (java_ident_start(static_cast<unsigned char>(c))) {
            while (i < n && java_ident_part(static_cast<unsigned char>(s[i]))) ++i;
            const std::string_view w = s.substr(start, i - start);
            const TokenKind k = kw.count(w)                                   ? TokenKind::keyword
                                : (w == "true" || w == "false" || w == "null") ? TokenKind::literal
                                                                                : TokenKind::identifier;
            b.add(start, i, k);
            continue;
        }
        if (is_d(c) || (c == '.' && is_d(at(i + 1)))) {
            if (c == '0' && (at(i + 1) == 'x' || at(i + 1) == 'X')) {
                i += 2;
                while (i < n && (is_x(s[i]) || s[i] == '_' || s[i] == '.')) ++i;
                if (at(i) == 'p' || at(i) == 'P') {
                    ++i;
                    if (at(i) == '+' || at(i) == '-') ++i;
                    while (i < n && (is_d(s[i]) || s[i] == '_')) ++i;
                }
            } else if (c == '0' && (at(i + 1) == 'b' || at(i + 1) == 'B')) {
                i += 2;
                while (i < n && (s[i] == '0' || s[i] == '1' || s[i] == '_')) ++i;
            } else {
                while (i < n && (is_d(s[i]) || s[i] == '_')) ++i;
                if (at(i) == '.' && is_d(at(i + 1))) {
                    ++i;
                    while (i < n && (is_d(s[i]) || s[i] == '_')) ++i;
                } else if (at(i) == '.' && !java_ident_start(static_cast<unsigned char>(at(i + 1)))) {
                    ++i;  // "1." is a floating literal; "1.f" is not handled specially
                }
                if (at(i) == 'e' || at(i) == 'E') {
                    std::size_t j = i + 1;
                    if (at(j) == '+' || at(j) == '-') ++j;
                    if (is_d(at(j))) {
                        i = j;
                        while (i < n && (is_d(s[i]) || s[i] == '_')) ++i;
                    }
                }
            }
            if (i < n && std::string_view("lLfFdD").find(s[i]) != std::string_view::npos) ++i;
            b.add(start, i, TokenKind::literal);
            continue;
        }
        if (c == '"' && at(i + 1) == '"' && at(i + 2) == '"') {
            const std::size_t e = s.find("\"\"\"", i + 3);
            i = e == std::string_view::npos ? n : e + 3;
            b.add(start, i, TokenKind::literal);
            continue;
        }
        if (c == '"' || c == '\'') {
            ++i;
            while (i < n && s[i] != c && s[i] != '\n') i += (s[i] == '\\' && i + 1 < n && s[i + 1] != '\n') ? 2 : 1;
            if (i < n && s[i] == c) ++i;
            b.add(start, i, TokenKind::literal);
            continue;
        }
        bool matched = false;
        for (std::string_view sym : java_symbols) {
            if (s.substr(i, sym.size()) == sym) {
                i += sym.size();
                b.add(start, i, java_punct(sym) ? TokenKind::punct : TokenKind::op);
                matched = true;
                break;
            }
        }
        if (matched) continue;
        i += std::min(utf8_len(static_cast<unsigned char>(c)), n - i);
        b.add(start, i, TokenKind::punct);
    }
    return b.finish();
}

inline bool python_punct(std::string_view s) {
    return s == "(" || s == ")" || s == "[" || s == "]" || s == "{" || s == "}" || s == "," || s == ":" ||
           s == ";" || s == "." || s == "...";
}

inline TokenStream lex_python(std::string_view s) {
    StreamBuilder b(s, Language::python);
    const auto& kw = keyword_set(Language::python);
    std::vector<std::size_t> line_start{0};
    for (std::size_t i = 0; i < s.size(); ++i)
        if (s[i] == '\n') line_start.push_back(i + 1);
    auto offset = [&](int line, int col) -> std::size_t {
        const std::size_t l = static_cast<std::size_t>(std::max(line, 1) - 1);
        if (l >= line_start.size()) return s.size();
        return std::min(line_start[l] + static_cast<std::size_t>(col), s.size());
    };
    for (const PyToken& t : python_lex(s, /*tolerant=*/true)) {
        const std::size_t begin = offset(t.start_line, t.start_col);
        const std::size_t end = begin + t.text.size();
        switch (t.type) {
            case PyTok::name:
                b.add(begin, end, kw.count(t.text) ? TokenKind::keyword : TokenKind::identifier);
                break;
            case PyTok::number:
            case PyTok::string:
                b.add(begin, end, TokenKind::literal);
                break;
            case PyTok::op:
                b.add(begin, end, python_punct(t.text) ? TokenKind::punct : TokenKind::op);
                break;
            case PyTok::newline:
            case PyTok::indent:
            case PyTok::dedent:
                b.add(begin, std::min(end, s.size()), TokenKind::punct);
                break;
            case PyTok::errortoken:
                if (py_strip(t.text).empty()) break;
                b.add(begin, end,
                      (t.text[0] == '\'' || t.text[0] == '"') ? TokenKind::literal : TokenKind::punct);
                break;
            default:
                break;  // comments, blank-line NL and the end marker are separators
        }
    }
    return b.finish();
}

}  // namespace detail

/// Total function: never throws on malformed code. Unknown characters become
/// single-character punct tokens.
inline TokenStream tokenize(std::string_view code, Language lang) {
    return lang == Language::java ? detail::lex_java(code) : detail::lex_python(code);
}

}  // namespace kaser::metrics
