#pragma once

// Line-oriented Python lexer with the token stream and error behaviour of the
// CPython 3.10 pure-Python tokenizer (generate_tokens). Columns are byte
// offsets into the line; bytes >= 0x80 are treated as identifier characters.

#include <algorithm>
#include <array>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "kaser/common.hpp"

namespace kaser::metrics {

enum class PyTok { endmarker, name, number, string, newline, indent, dedent, op, comment, nl, errortoken };

struct PyToken {
    PyTok type;
    std::string text;
    int start_line;  // 1-based
    int start_col;
    int end_line;
    int end_col;
};

/// Raised where CPython raises TokenError or IndentationError.
struct PyLexError : Error {
    using Error::Error;
};

namespace detail {

inline bool py_word(unsigned char c) {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_' ||
           c >= 0x80;
}
inline bool py_ident_start(unsigned char c) {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c == '_' || c >= 0x80;
}
inline bool is_digit(char c) { return c >= '0' && c <= '9'; }

// [0-9](?:_?[0-9])* with an arbitrary digit class.
template <typename Pred>
std::size_t digit_run(std::string_view s, std::size_t i, Pred is_d) {
    if (i >= s.size() || !is_d(s[i])) return std::string_view::npos;
    ++i;
    for (;;) {
        if (i < s.size() && is_d(s[i])) {
            ++i;
        } else if (i + 1 < s.size() && s[i] == '_' && is_d(s[i + 1])) {
            i += 2;
        } else {
            return i;
        }
    }
}

inline std::size_t dec_run(std::string_view s, std::size_t i) { return digit_run(s, i, is_digit); }

inline std::size_t exponent(std::string_view s, std::size_t i) {
    if (i >= s.size() || (s[i] != 'e' && s[i] != 'E')) return std::string_view::npos;
    ++i;
    if (i < s.size() && (s[i] == '+' || s[i] == '-')) ++i;
    return dec_run(s, i);
}

inline std::size_t opt_exponent(std::string_view s, std::size_t i) {
    const std::size_t e = exponent(s, i);
    return e == std::string_view::npos ? i : e;
}

inline std::size_t pointfloat(std::string_view s, std::size_t i) {
    constexpr auto npos = std::string_view::npos;
    std::size_t d = dec_run(s, i);
    if (d != npos && d < s.size() && s[d] == '.') {
        std::size_t j = d + 1;
        const std::size_t frac = dec_run(s, j);
        if (frac != npos) j = frac;
        return opt_exponent(s, j);
    }
    if (i < s.size() && s[i] == '.') {
        d = dec_run(s, i + 1);
        if (d != npos) return opt_exponent(s, d);
    }
    return npos;
}

inline std::size_t floatnumber(std::string_view s, std::size_t i) {
    constexpr auto npos = std::string_view::npos;
    if (const std::size_t p = pointfloat(s, i); p != npos) return p;
    const std::size_t d = dec_run(s, i);
    if (d == npos) return npos;
    return exponent(s, d);
}

inline std::size_t intnumber(std::string_view s, std::size_t i) {
    constexpr auto npos = std::string_view::npos;
    if (i + 1 < s.size() && s[i] == '0') {
        const char x = s[i + 1];
        auto radix = [&](auto pred) -> std::size_t {
            // 0[xX](?:_?[0-9a-fA-F])+
            std::size_t j = i + 2, n = 0;
            for (;;) {
                if (j < s.size() && pred(s[j])) {
                    ++j, ++n;
                } else if (j + 1 < s.size() && s[j] == '_' && pred(s[j + 1])) {
                    j += 2, ++n;
                } else {
                    break;
                }
            }
            return n ? j : npos;
        };
        std::size_t r = npos;
        if (x == 'x' || x == 'X')
            r = radix([](char c) {
                return is_digit(c) || (c >= 'a' && c <= 'f') || (c >= 'A' && c <= 'F');
            });
        else if (x == 'b' || x == 'B')
            r = radix([](char c) { return c == '0' || c == '1'; });
        else if (x == 'o' || x == 'O')
            r = radix([](char c) { return c >= '0' && c <= '7'; });
        if (r != npos) return r;
    }
    if (i < s.size() && s[i] == '0') {
        std::size_t j = i + 1;
        for (;;) {
            if (j < s.size() && s[j] == '0') {
                ++j;
            } else if (j + 1 < s.size() && s[j] == '_' && s[j + 1] == '0') {
                j += 2;
            } else {
                return j;
            }
        }
    }
    if (i < s.size() && s[i] >= '1' && s[i] <= '9') return dec_run(s, i);
    return npos;
}

inline std::size_t number(std::string_view s, std::size_t i) {
    constexpr auto npos = std::string_view::npos;
    // Imagnumber, Floatnumber, Intnumber in alternation order.
    if (std::size_t d = dec_run(s, i); d != npos && d < s.size() && (s[d] == 'j' || s[d] == 'J'))
        return d + 1;
    if (std::size_t f = floatnumber(s, i); f != npos && f < s.size() && (s[f] == 'j' || s[f] == 'J'))
        return f + 1;
    if (std::size_t f = floatnumber(s, i); f != npos) return f;
    return intnumber(s, i);
}

inline constexpr std::array<std::string_view, 47> py_operators = {
    "**=", "...", "//=", "<<=", ">>=", "!=", "%=", "&=", "**", "*=", "+=", "-=", "->", "//", "/=", ":=",
    "<<",  "<=",  "==",  ">=",  ">>",  "@=", "^=", "|=", "%",  "&",  "(",  ")",  "*",  "+",  ",",  "-",
    ".",   "/",   ":",   ";",   "<",   "=",  ">",  "@",  "[",  "]",  "^",  "{",  "|",  "}",  "~"};

inline std::size_t special(std::string_view s, std::size_t i) {
    for (std::string_view op : py_operators)
        if (s.substr(i, op.size()) == op) return i + op.size();
    return std::string_view::npos;
}

// Length of a valid string prefix (b r u f br rb fr rf, any case) at i.
inline std::size_t string_prefix_len(std::string_view s, std::size_t i) {
    auto lower = [](char c) { return static_cast<char>(c | 0x20); };
    auto is_q = [&](std::size_t j) { return j < s.size() && (s[j] == '\'' || s[j] == '"'); };
    if (is_q(i)) return 0;
    if (i < s.size()) {
        const char a = lower(s[i]);
        if ((a == 'b' || a == 'r' || a == 'u' || a == 'f') && is_q(i + 1)) return 1;
        if (i + 1 < s.size()) {
            const char b = lower(s[i + 1]);
            const bool two = (a == 'b' && b == 'r') || (a == 'r' && b == 'b') || (a == 'f' && b == 'r') ||
                             (a == 'r' && b == 'f');
            if (two && is_q(i + 2)) return 2;
        }
    }
    return std::string_view::npos;
}

inline std::size_t triple_open(std::string_view s, std::size_t i) {
    const std::size_t p = string_prefix_len(s, i);
    if (p == std::string_view::npos) return p;
    const std::size_t q = i + p;
    if (s.substr(q, 3) == "'''" || s.substr(q, 3) == "\"\"\"") return q + 3;
    return std::string_view::npos;
}

// StringPrefix + quote + body + (quote | backslash-newline).
inline std::size_t cont_str(std::string_view s, std::size_t i) {
    constexpr auto npos = std::string_view::npos;
    const std::size_t p = string_prefix_len(s, i);
    if (p == npos) return npos;
    std::size_t j = i + p;
    const char q = s[j++];
    while (j < s.size()) {
        const char c = s[j];
        if (c == q) return j + 1;
        if (c == '\n') return npos;
        if (c == '\\') {
            if (j + 1 >= s.size()) return npos;
            if (s[j + 1] == '\n') return j + 2;
            if (s[j + 1] == '\r' && j + 2 < s.size() && s[j + 2] == '\n') return j + 3;
            j += 2;
            continue;
        }
        ++j;
    }
    return npos;
}

// Tail-of-string matchers: Single, Double, Single3, Double3.
inline std::size_t end_single(std::string_view s, std::size_t i, char q) {
    while (i < s.size()) {
        if (s[i] == q) return i + 1;
        if (s[i] == '\\') {
            // \\. : '.' excludes newline; a lone backslash-newline stops the run.
            if (i + 1 < s.size() && s[i + 1] != '\n') {
                i += 2;
                continue;
            }
            return std::string_view::npos;
        }
        ++i;
    }
    return std::string_view::npos;
}

inline std::size_t end_triple(std::string_view s, std::size_t i, char q) {
    while (i < s.size()) {
        if (s[i] == '\\') {
            if (i + 1 < s.size() && s[i + 1] != '\n') {
                i += 2;
                continue;
            }
            return std::string_view::npos;
        }
        if (s[i] == q) {
            if (i + 2 < s.size() && s[i + 1] == q && s[i + 2] == q) return i + 3;
        }
        ++i;
    }
    return std::string_view::npos;
}

struct EndPat {
    char quote = 0;
    bool triple = false;
    std::size_t match(std::string_view s, std::size_t i) const {
        return triple ? end_triple(s, i, quote) : end_single(s, i, quote);
    }
};

struct Pseudo {
    std::size_t start, end;
};

// Whitespace + group(PseudoExtras, Number, Funny, ContStr, Name)
inline bool pseudo_match(std::string_view line, std::size_t pos, Pseudo& out) {
    constexpr auto npos = std::string_view::npos;
    std::size_t i = pos;
    while (i < line.size() && (line[i] == ' ' || line[i] == '\f' || line[i] == '\t')) ++i;
    out.start = i;
    auto done = [&](std::size_t e) {
        out.end = e;
        return true;
    };
    if (line.substr(i, 2) == "\\\n") return done(i + 2);
    if (line.substr(i, 3) == "\\\r\n") return done(i + 3);
    if (i == line.size()) return done(i);
    if (line[i] == '#') {
        std::size_t e = i;
        while (e < line.size() && line[e] != '\r' && line[e] != '\n') ++e;
        return done(e);
    }
    if (std::size_t e = triple_open(line, i); e != npos) return done(e);
    if (std::size_t e = number(line, i); e != npos) return done(e);
    if (line[i] == '\n') return done(i + 1);
    if (line.substr(i, 2) == "\r\n") return done(i + 2);
    if (std::size_t e = special(line, i); e != npos) return done(e);
    if (std::size_t e = cont_str(line, i); e != npos) return done(e);
    if (py_word(static_cast<unsigned char>(line[i]))) {
        std::size_t e = i;
        while (e < line.size() && py_word(static_cast<unsigned char>(line[e]))) ++e;
        return done(e);
    }
    return false;
}

}  // namespace detail

/// Tokenizes `source` exactly as CPython 3.10 generate_tokens does. Throws
/// PyLexError on "EOF in multi-line string", "EOF in multi-line statement"
/// and unindent mismatches unless `tolerant` is set, in which case the
/// remaining text is emitted as an error token and lexing stops cleanly.
inline std::vector<PyToken> python_lex(std::string_view source, bool tolerant = false) {
    using namespace detail;
    std::vector<std::string_view> lines;
    {
        std::size_t b = 0;
        for (std::size_t i = 0; i < source.size(); ++i)
            if (source[i] == '\n') {
                lines.push_back(source.substr(b, i + 1 - b));
                b = i + 1;
            }
        if (b < source.size()) lines.push_back(source.substr(b));
    }

    std::vector<PyToken> toks;
    auto emit = [&](PyTok t, std::string text, int sl, int sc, int el, int ec) {
        toks.push_back(PyToken{t, std::move(text), sl, sc, el, ec});
    };

    int lnum = 0, parenlev = 0;
    bool continued = false;
    std::string contstr;
    bool needcont = false;
    int strstart_line = 0, strstart_col = 0;
    EndPat endprog;
    std::vector<int> indents{0};
    std::string_view last_line, line;
    std::size_t next_line = 0;
    constexpr auto npos = std::string_view::npos;
    constexpr int tabsize = 8;

    for (;;) {
        last_line = line;
        line = next_line < lines.size() ? lines[next_line++] : std::string_view{};
        ++lnum;
        std::size_t pos = 0, max = line.size();

        if (!contstr.empty()) {
            if (line.empty()) {
                if (!tolerant) throw PyLexError("EOF in multi-line string");
                emit(PyTok::errortoken, contstr, strstart_line, strstart_col, lnum - 1,
                     static_cast<int>(last_line.size()));
                contstr.clear();
                break;
            }
            const std::size_t end = endprog.match(line, 0);
            if (end != npos) {
                pos = end;
                emit(PyTok::string, contstr + std::string(line.substr(0, end)), strstart_line, strstart_col,
                     lnum, static_cast<int>(end));
                contstr.clear();
                needcont = false;
            } else if (needcont && !line.ends_with("\\\n") && !line.ends_with("\\\r\n")) {
                emit(PyTok::errortoken, contstr + std::string(line), strstart_line, strstart_col, lnum,
                     static_cast<int>(line.size()));
                contstr.clear();
                continue;
            } else {
                contstr += line;
                continue;
            }
        } else if (parenlev == 0 && !continued) {
            if (line.empty()) break;
            int column = 0;
            while (pos < max) {
                if (line[pos] == ' ')
                    ++column;
                else if (line[pos] == '\t')
                    column = (column / tabsize + 1) * tabsize;
                else if (line[pos] == '\f')
                    column = 0;
                else
                    break;
                ++pos;
            }
            if (pos == max) break;

            const char c = line[pos];
            if (c == '#' || c == '\r' || c == '\n') {
                if (c == '#') {
                    std::string_view rest = line.substr(pos);
                    while (!rest.empty() && (rest.back() == '\r' || rest.back() == '\n')) rest.remove_suffix(1);
                    emit(PyTok::comment, std::string(rest), lnum, static_cast<int>(pos), lnum,
                         static_cast<int>(pos + rest.size()));
                    pos += rest.size();
                }
                emit(PyTok::nl, std::string(line.substr(pos)), lnum, static_cast<int>(pos), lnum,
                     static_cast<int>(line.size()));
                continue;
            }

            if (column > indents.back()) {
                indents.push_back(column);
                emit(PyTok::indent, std::string(line.substr(0, pos)), lnum, 0, lnum, static_cast<int>(pos));
            }
            while (column < indents.back()) {
                if (std::find(indents.begin(), indents.end(), column) == indents.end()) {
                    if (!tolerant) throw PyLexError("unindent does not match any outer indentation level");
                    // Tolerant mode: treat the line as sitting at the enclosing level.
                    indents.pop_back();
                    emit(PyTok::dedent, "", lnum, static_cast<int>(pos), lnum, static_cast<int>(pos));
                    if (column > indents.back()) {
                        indents.push_back(column);
                        break;
                    }
                    continue;
                }
                indents.pop_back();
                emit(PyTok::dedent, "", lnum, static_cast<int>(pos), lnum, static_cast<int>(pos));
            }
        } else {
            if (line.empty()) {
                if (!tolerant) throw PyLexError("EOF in multi-line statement");
                break;
            }
            continued = false;
        }

        while (pos < max) {
            Pseudo pm{};
            if (!pseudo_match(line, pos, pm)) {
                emit(PyTok::errortoken, std::string(1, line[pos]), lnum, static_cast<int>(pos), lnum,
                     static_cast<int>(pos + 1));
                ++pos;
                continue;
            }
            const std::size_t start = pm.start, end = pm.end;
            pos = end;
            if (start == end) continue;
            const std::string_view token = line.substr(start, end - start);
            const char initial = line[start];
            const int sc = static_cast<int>(start), ec = static_cast<int>(end);

            if (is_digit(initial) || (initial == '.' && token != "." && token != "...")) {
                emit(PyTok::number, std::string(token), lnum, sc, lnum, ec);
            } else if (initial == '\r' || initial == '\n') {
                emit(parenlev > 0 ? PyTok::nl : PyTok::newline, std::string(token), lnum, sc, lnum, ec);
            } else if (initial == '#') {
                emit(PyTok::comment, std::string(token), lnum, sc, lnum, ec);
            } else if (const std::size_t pl = string_prefix_len(token, 0);
                       pl != npos && token.size() == pl + 3 &&
                       (token.substr(pl) == "'''" || token.substr(pl) == "\"\"\"")) {
                endprog = EndPat{token.back(), true};
                const std::size_t e = endprog.match(line, pos);
                if (e != npos) {
                    pos = e;
                    emit(PyTok::string, std::string(line.substr(start, pos - start)), lnum, sc, lnum,
                         static_cast<int>(pos));
                } else {
                    strstart_line = lnum;
                    strstart_col = sc;
                    contstr = std::string(line.substr(start));
                    break;
                }
            } else if (const std::size_t sp = string_prefix_len(token, 0); sp != npos && sp <= 2) {
                if (token.back() == '\n') {
                    strstart_line = lnum;
                    strstart_col = sc;
                    endprog = EndPat{token[sp], false};
                    contstr = std::string(line.substr(start));
                    needcont = true;
                    break;
                }
                emit(PyTok::string, std::string(token), lnum, sc, lnum, ec);
            } else if (py_ident_start(static_cast<unsigned char>(initial))) {
                emit(PyTok::name, std::string(token), lnum, sc, lnum, ec);
            } else if (initial == '\\') {
                continued = true;
            } else {
                if (initial == '(' || initial == '[' || initial == '{')
                    ++parenlev;
                else if (initial == ')' || initial == ']' || initial == '}')
                    --parenlev;
                emit(PyTok::op, std::string(token), lnum, sc, lnum, ec);
            }
        }
    }

    if (!last_line.empty() && last_line.back() != '\r' && last_line.back() != '\n' &&
        !py_strip(last_line).starts_with("#")) {
        emit(PyTok::newline, "", lnum - 1, static_cast<int>(last_line.size()), lnum - 1,
             static_cast<int>(last_line.size()) + 1);
    }
    for (std::size_t k = 1; k < indents.size(); ++k) emit(PyTok::dedent, "", lnum, 0, lnum, 0);
    emit(PyTok::endmarker, "", lnum, 0, lnum, 0);
    return toks;
}

}  // namespace kaser::metrics
