#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <openssl/evp.h>

namespace kaser {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Malformed input document (bad JSON, missing or mistyped field).
struct SchemaError : Error {
    using Error::Error;
};
/// Dangling id, duplicate key, or a violated cross-record invariant.
struct IntegrityError : Error {
    using Error::Error;
};
/// Lookup of an id that does not exist (unknown student, problem, KC).
struct NotFoundError : Error {
    using Error::Error;
};
/// Vector/matrix dimensions that do not agree.
struct ShapeError : Error {
    using Error::Error;
};
/// Invalid argument or configuration value.
struct ConfigError : Error {
    using Error::Error;
};
/// NaN/inf where finite values are required.
struct NumericError : Error {
    using Error::Error;
};
/// Network failure, timeout, or an unusable reply after all retries.
struct TransportError : Error {
    using Error::Error;
};

// ---------------------------------------------------------------------------
// Languages
// ---------------------------------------------------------------------------

inline std::string ascii_lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

enum class Language { java, python };

inline std::string_view to_string(Language lang) {
    return lang == Language::java ? "java" : "python";
}

inline Language parse_language(std::string_view s) {
    const std::string lower = ascii_lower(s);
    if (lower == "java") return Language::java;
    if (lower == "python") return Language::python;
    throw SchemaError("unknown language '" + std::string(s) + "' (expected Java or Python)");
}

/// Display name used in prompts ("Java", "Python").
inline std::string_view display_name(Language lang) {
    return lang == Language::java ? "Java" : "Python";
}

// ---------------------------------------------------------------------------
// Text helpers with Python str semantics (strip/split on ASCII whitespace
// including \v \f and the \x1c-\x1f separators).
// ---------------------------------------------------------------------------

inline bool is_py_space(unsigned char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f' ||
           (c >= 0x1c && c <= 0x1f);
}

inline std::string_view py_strip(std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && is_py_space(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && is_py_space(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

inline std::vector<std::string> py_split(std::string_view s) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < s.size()) {
        while (i < s.size() && is_py_space(static_cast<unsigned char>(s[i]))) ++i;
        std::size_t j = i;
        while (j < s.size() && !is_py_space(static_cast<unsigned char>(s[j]))) ++j;
        if (j > i) out.emplace_back(s.substr(i, j - i));
        i = j;
    }
    return out;
}

inline std::vector<std::string_view> split_lines(std::string_view s) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] == '\n') {
            out.push_back(s.substr(start, i - start));
            start = i + 1;
        }
    }
    out.push_back(s.substr(start));
    return out;
}

// ---------------------------------------------------------------------------
// Hashing
// ---------------------------------------------------------------------------

inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline std::string sha256_hex(std::string_view data) {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), md.data(), &len, EVP_sha256(), nullptr) != 1)
        throw Error("sha256 digest failed");
    static constexpr char digits[] = "0123456789abcdef";
    std::string out;
    out.reserve(2 * len);
    for (unsigned i = 0; i < len; ++i) {
        out.push_back(digits[md[i] >> 4]);
        out.push_back(digits[md[i] & 0xf]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Randomness
//
// std::mt19937_64 has a standardized output sequence, but the std
// distributions do not. Everything that must reproduce across platforms draws
// through the helpers below.
// ---------------------------------------------------------------------------

using Rng = std::mt19937_64;

/// Uniform index in [0, n) as `rng() % n`.
inline std::size_t uniform_index(Rng& rng, std::size_t n) {
    return static_cast<std::size_t>(rng() % static_cast<std::uint64_t>(n));
}

/// Uniform double in [0, 1) from the top 53 bits.
inline double uniform01(Rng& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

/// Standard normal via Box-Muller (one draw per call, second value discarded).
inline double standard_normal(Rng& rng) {
    double u1 = uniform01(rng);
    while (u1 <= 0.0) u1 = uniform01(rng);
    const double u2 = uniform01(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

/// Fisher-Yates: for i = n-1 down to 1, swap v[i] with v[rng() % (i+1)].
template <typename T>
void fisher_yates(std::vector<T>& v, Rng& rng) {
    if (v.size() < 2) return;
    for (std::size_t i = v.size() - 1; i > 0; --i) {
        const std::size_t j = uniform_index(rng, i + 1);
        using std::swap;
        swap(v[i], v[j]);
    }
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// Writes through a temporary sibling and renames it into place.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view content) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot write " + tmp.string());
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!out) throw Error("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace kaser
