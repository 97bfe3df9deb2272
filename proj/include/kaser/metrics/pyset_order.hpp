#pragma once

// Iteration order of a CPython 3.10 `set` of str built from a list, with
// hash randomization disabled (PYTHONHASHSEED=0: SipHash-2-4, zero key).
// The dataflow merge step turns name lists into sets; reproducing that order
// makes the dataflow component deterministic and equal to the reference.

#include <algorithm>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace kaser::metrics::detail {

inline std::uint64_t siphash24(const unsigned char* data, std::size_t len, std::uint64_t k0 = 0,
                               std::uint64_t k1 = 0) {
    auto rotl = [](std::uint64_t x, int b) { return (x << b) | (x >> (64 - b)); };
    std::uint64_t v0 = k0 ^ 0x736f6d6570736575ULL;
    std::uint64_t v1 = k1 ^ 0x646f72616e646f6dULL;
    std::uint64_t v2 = k0 ^ 0x6c7967656e657261ULL;
    std::uint64_t v3 = k1 ^ 0x7465646279746573ULL;
    auto round = [&] {
        v0 += v1;
        v1 = rotl(v1, 13);
        v1 ^= v0;
        v0 = rotl(v0, 32);
        v2 += v3;
        v3 = rotl(v3, 16);
        v3 ^= v2;
        v0 += v3;
        v3 = rotl(v3, 21);
        v3 ^= v0;
        v2 += v1;
        v1 = rotl(v1, 17);
        v1 ^= v2;
        v2 = rotl(v2, 32);
    };
    const std::size_t blocks = len / 8;
    for (std::size_t b = 0; b < blocks; ++b) {
        std::uint64_t m = 0;
        for (int k = 7; k >= 0; --k) m = (m << 8) | data[b * 8 + static_cast<std::size_t>(k)];
        v3 ^= m;
        round();
        round();
        v0 ^= m;
    }
    std::uint64_t t = static_cast<std::uint64_t>(len & 0xff) << 56;
    const unsigned char* tail = data + blocks * 8;
    for (std::size_t k = 0; k < (len & 7); ++k) t |= static_cast<std::uint64_t>(tail[k]) << (8 * k);
    v3 ^= t;
    round();
    round();
    v0 ^= t;
    v2 ^= 0xff;
    round();
    round();
    round();
    round();
    return v0 ^ v1 ^ v2 ^ v3;
}

/// hash(str) for a UTF-8 encoded string under the fixed zero key.
inline std::int64_t py_str_hash(std::string_view utf8) {
    if (utf8.empty()) return 0;
    std::vector<std::uint32_t> cps;
    std::uint32_t maxcp = 0;
    for (std::size_t i = 0; i < utf8.size();) {
        const unsigned char c = static_cast<unsigned char>(utf8[i]);
        std::uint32_t cp = c;
        std::size_t n = 1;
        if (c >= 0xF0) {
            cp = c & 0x07, n = 4;
        } else if (c >= 0xE0) {
            cp = c & 0x0F, n = 3;
        } else if (c >= 0xC0) {
            cp = c & 0x1F, n = 2;
        }
        for (std::size_t k = 1; k < n && i + k < utf8.size(); ++k)
            cp = (cp << 6) | (static_cast<unsigned char>(utf8[i + k]) & 0x3F);
        i += n;
        cps.push_back(cp);
        maxcp = std::max(maxcp, cp);
    }
    const std::size_t width = maxcp < 0x100 ? 1 : maxcp < 0x10000 ? 2 : 4;
    std::vector<unsigned char> buf;
    buf.reserve(cps.size() * width);
    for (std::uint32_t cp : cps)
        for (std::size_t k = 0; k < width; ++k) buf.push_back(static_cast<unsigned char>(cp >> (8 * k)));
    auto h = static_cast<std::int64_t>(siphash24(buf.data(), buf.size()));
    return h == -1 ? -2 : h;
}

/// list(set(items)) for a list of str.
inline std::vector<std::string> py_set_order(const std::vector<std::string>& items) {
    struct Slot {
        const std::string* key = nullptr;
        std::int64_t hash = 0;
    };
    constexpr std::size_t linear_probes = 9;
    constexpr int perturb_shift = 5;
    std::vector<Slot> table(8);
    std::size_t mask = 7, fill = 0, used = 0;

    auto insert_clean = [](std::vector<Slot>& tab, std::size_t m, const std::string* key, std::int64_t hash) {
        auto perturb = static_cast<std::size_t>(hash);
        std::size_t i = static_cast<std::size_t>(hash) & m;
        for (;;) {
            if (!tab[i].key) {
                tab[i] = {key, hash};
                return;
            }
            if (i + linear_probes <= m) {
                for (std::size_t j = 1; j <= linear_probes; ++j)
                    if (!tab[i + j].key) {
                        tab[i + j] = {key, hash};
                        return;
                    }
            }
            perturb >>= perturb_shift;
            i = (i * 5 + 1 + perturb) & m;
        }
    };

    for (const std::string& s : items) {
        const std::int64_t hash = py_str_hash(s);
        auto perturb = static_cast<std::size_t>(hash);
        std::size_t i = static_cast<std::size_t>(hash) & mask;
        std::size_t target = SIZE_MAX;
        bool present = false;
        if (!table[i].key) {
            target = i;
        } else {
            for (;;) {
                if (table[i].hash == hash && *table[i].key == s) {
                    present = true;
                    break;
                }
                if (i + linear_probes <= mask) {
                    bool done = false;
                    for (std::size_t j = 1; j <= linear_probes; ++j) {
                        const Slot& e = table[i + j];
                        if (!e.key) {
                            target = i + j;
                            done = true;
                            break;
                        }
                        if (e.hash == hash && *e.key == s) {
                            present = done = true;
                            break;
                        }
                    }
                    if (done) break;
                }
                perturb >>= perturb_shift;
                i = (i * 5 + 1 + perturb) & mask;
                if (!table[i].key) {
                    target = i;
                    break;
                }
            }
        }
        if (present) continue;
        table[target] = {&s, hash};
        ++fill;
        ++used;
        if (fill * 5 < mask * 3) continue;
        const std::size_t minused = used > 50000 ? used * 2 : used * 4;
        std::size_t newsize = 8;
        while (newsize <= minused) newsize <<= 1;
        std::vector<Slot> bigger(newsize);
        for (const Slot& e : table)
            if (e.key) insert_clean(bigger, newsize - 1, e.key, e.hash);
        table = std::move(bigger);
        mask = newsize - 1;
        fill = used;
    }
    std::vector<std::string> out;
    out.reserve(used);
    for (const Slot& e : table)
        if (e.key) out.push_back(*e.key);
    return out;
}

}  // namespace kaser::metrics::detail
