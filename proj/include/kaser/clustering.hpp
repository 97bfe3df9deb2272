#pragma once

// Embedding, agglomerative clustering and representative labelling of raw
// error descriptions.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "kaser/common.hpp"
#include "kaser/corpus.hpp"
#include "kaser/errors.hpp"
#include "kaser/llm.hpp"
#include "kaser/parallel.hpp"
#include "kaser/prompts.hpp"

namespace kaser::clustering {

using json = nlohmann::ordered_json;
using Vector = std::vector<double>;

inline double cosine_distance(const Vector& u, const Vector& v) {
    if (u.size() != v.size())
        throw ShapeError("cosine_distance: dimensions " + std::to_string(u.size()) + " and " +
                         std::to_string(v.size()) + " differ");
    double uv = 0, uu = 0, vv = 0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        uv += u[i] * v[i];
        uu += u[i] * u[i];
        vv += v[i] * v[i];
    }
    if (uu == 0 || vv == 0) throw NumericError("cosine_distance: zero-norm vector");
    const double c = uv / (std::sqrt(uu) * std::sqrt(vv));
    return 1.0 - std::clamp(c, -1.0, 1.0);
}

// ---------------------------------------------------------------------------
// Embeddings
// ---------------------------------------------------------------------------

struct EmbeddedError {
    std::string text;
    Vector vector;
};

/// Vectors keyed by (model, sha256(text)); filled from a precomputed JSONL
/// file ({text, vector}) and/or an embeddings endpoint. Thread-safe.
class EmbeddingStore {
public:
    explicit EmbeddingStore(std::string model = "default") : model_(std::move(model)) {}

    void load_precomputed(const std::filesystem::path& path) {
        if (!std::filesystem::exists(path)) throw NotFoundError("embedding file not found: " + path.string());
        std::size_t lineno = 0;
        const std::string text = read_file(path);
        for (std::string_view line : split_lines(text)) {
            ++lineno;
            if (py_strip(line).empty()) continue;
            try {
                const json j = json::parse(line);
                put(j.at("text").get<std::string>(), j.at("vector").get<Vector>());
            } catch (const json::exception& e) {
                throw SchemaError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
            }
        }
    }

    void save(const std::filesystem::path& path) const {
        std::lock_guard lock(mu_);
        std::string out;
        for (const auto& [text, v] : texts_) out += json{{"text", text}, {"vector", cache_.at(key(text))}}.dump() + "\n";
        write_file_atomic(path, out);
    }

    void put(const std::string& text, Vector v) {
        check_vector(text, v);
        std::lock_guard lock(mu_);
        if (dim_ && *dim_ != v.size())
            throw ShapeError("embedding dimension " + std::to_string(v.size()) + " differs from " + std::to_string(*dim_));
        dim_ = v.size();
        cache_[key(text)] = std::move(v);
        texts_[text] = true;
    }

    /// One vector per text. Unknown texts are requested from `client` in
    /// batches; without a client they are an error.
    std::vector<EmbeddedError> embed(const std::vector<std::string>& texts, llm::EmbeddingClient* client = nullptr,
                                     std::size_t batch = 64) {
        for (const auto& t : texts)
            if (py_strip(t).empty()) throw ConfigError("embed: empty description");
        std::vector<std::string> missing;
        {
            std::lock_guard lock(mu_);
            for (const auto& t : texts) {
                if (cache_.count(key(t)))
                    ++hits_;
                else if (std::find(missing.begin(), missing.end(), t) == missing.end())
                    missing.push_back(t);
            }
        }
        if (!missing.empty()) {
            if (!client) throw NotFoundError("no embedding for '" + missing.front() + "' and no endpoint configured");
            for (std::size_t b = 0; b < missing.size(); b += batch) {
                std::vector<std::string> chunk(missing.begin() + static_cast<std::ptrdiff_t>(b),
                                               missing.begin() + static_cast<std::ptrdiff_t>(std::min(missing.size(), b + batch)));
                auto vecs = client->embed(chunk);
                if (vecs.size() != chunk.size()) throw TransportError("embeddings: count mismatch");
                for (std::size_t i = 0; i < chunk.size(); ++i) put(chunk[i], std::move(vecs[i]));
            }
        }
        std::vector<EmbeddedError> out;
        std::lock_guard lock(mu_);
        for (const auto& t : texts) out.push_back({t, cache_.at(key(t))});
        return out;
    }

    std::size_t hits() const {
        std::lock_guard lock(mu_);
        return hits_;
    }
    std::optional<std::size_t> dimension() const {
        std::lock_guard lock(mu_);
        return dim_;
    }
    const std::string& model() const { return model_; }

private:
    std::string key(const std::string& text) const { return model_ + '\0' + sha256_hex(text); }

    static void check_vector(const std::string& text, const Vector& v) {
        if (v.empty()) throw ShapeError("empty embedding for '" + text + "'");
        double n = 0;
        for (double x : v) {
            if (!std::isfinite(x)) throw NumericError("non-finite embedding for '" + text + "'");
            n += x * x;
        }
        if (n == 0) throw NumericError("zero-norm embedding for '" + text + "'");
    }

    std::string model_;
    mutable std::mutex mu_;
    std::unordered_map<std::string, Vector> cache_;
    std::map<std::string, bool> texts_;
    std::optional<std::size_t> dim_;
    std::size_t hits_ = 0;
};

// ---------------------------------------------------------------------------
// Hierarchical agglomerative clustering
// ---------------------------------------------------------------------------

enum class Linkage { average, complete, single };

inline std::string_view to_string(Linkage l) {
    switch (l) {
        case Linkage::average: return "average";
        case Linkage::complete: return "complete";
        case Linkage::single: return "single";
    }
    return "?";
}

inline Linkage parse_linkage(std::string_view s) {
    if (s == "average") return Linkage::average;
    if (s == "complete") return Linkage::complete;
    if (s == "single") return Linkage::single;
    throw ConfigError("unknown linkage '" + std::string(s) + "'");
}

/// Cluster ids follow the usual convention: leaves are 0..n-1 and the
/// cluster formed by merge s is n+s. In each merge a < b.
struct Merge {
    std::size_t a = 0;
    std::size_t b = 0;
    double distance = 0;
    std::size_t size = 0;
    bool operator==(const Merge&) const = default;
};

struct Dendrogram {
    std::size_t n = 0;
    Linkage linkage = Linkage::average;
    std::vector<Merge> merges;
};

inline std::vector<std::vector<double>> distance_matrix(const std::vector<Vector>& points) {
    const std::size_t n = points.size();
    std::vector<std::vector<double>> d(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) d[i][j] = d[j][i] = cosine_distance(points[i], points[j]);
    return d;
}

/// Agglomerates from a precomputed symmetric distance matrix. Each step
/// merges the closest pair of active clusters; among equal distances the pair
/// with the lowest (smaller min-leaf, larger min-leaf) wins. Lance-Williams
/// updates with per-row nearest-neighbour caching.
inline Dendrogram hac_from_distances(std::vector<std::vector<double>> d, Linkage linkage) {
    const std::size_t n = d.size();
    if (n < 2) throw ConfigError("hac: need at least 2 points");
    for (const auto& row : d)
        if (row.size() != n) throw ShapeError("hac: distance matrix is not square");

    // Rows are indexed by the cluster's smallest leaf.
    std::vector<char> active(n, 1);
    std::vector<std::size_t> size(n, 1), id(n);
    std::iota(id.begin(), id.end(), 0);
    constexpr std::size_t none = std::numeric_limits<std::size_t>::max();
    std::vector<std::size_t> nn(n, none);
    std::vector<double> nn_d(n, std::numeric_limits<double>::infinity());

    auto rescan = [&](std::size_t i) {
        nn[i] = none;
        nn_d[i] = std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j)
            if (j != i && active[j] && d[i][j] < nn_d[i]) {
                nn_d[i] = d[i][j];
                nn[i] = j;
            }
    };
    for (std::size_t i = 0; i < n; ++i) rescan(i);

    Dendrogram out;
    out.n = n;
    out.linkage = linkage;
    for (std::size_t step = 0; step + 1 < n; ++step) {
        std::size_t bi = none, bj = none;
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < n; ++i) {
            if (!active[i] || nn[i] == none) continue;
            const std::size_t lo = std::min(i, nn[i]), hi = std::max(i, nn[i]);
            if (nn_d[i] < best || (nn_d[i] == best && std::pair(lo, hi) < std::pair(bi, bj))) {
                best = nn_d[i];
                bi = lo;
                bj = hi;
            }
        }
        const std::size_t ia = id[bi], ib = id[bj];
        out.merges.push_back({std::min(ia, ib), std::max(ia, ib), best, size[bi] + size[bj]});

        // Merge bj into bi (bi has the smaller leaf).
        for (std::size_t k = 0; k < n; ++k) {
            if (!active[k] || k == bi || k == bj) continue;
            double v = 0;
            switch (linkage) {
                case Linkage::single: v = std::min(d[k][bi], d[k][bj]); break;
                case Linkage::complete: v = std::max(d[k][bi], d[k][bj]); break;
                case Linkage::average:
                    v = (static_cast<double>(size[bi]) * d[k][bi] + static_cast<double>(size[bj]) * d[k][bj]) /
                        static_cast<double>(size[bi] + size[bj]);
                    break;
            }
            d[k][bi] = d[bi][k] = v;
        }
        active[bj] = 0;
        size[bi] += size[bj];
        id[bi] = n + step;

        for (std::size_t k = 0; k < n; ++k) {
            if (!active[k]) continue;
            if (k == bi || nn[k] == bi || nn[k] == bj) {
                rescan(k);
            } else if (d[k][bi] < nn_d[k] || (d[k][bi] == nn_d[k] && bi < nn[k])) {
                nn_d[k] = d[k][bi];
                nn[k] = bi;
            }
        }
    }
    return out;
}

inline Dendrogram hac(const std::vector<Vector>& points, Linkage linkage = Linkage::average) {
    if (points.size() < 2) throw ConfigError("hac: need at least 2 points");
    for (const auto& p : points)
        if (p.size() != points.front().size()) throw ShapeError("hac: points have different dimensions");
    return hac_from_distances(distance_matrix(points), linkage);
}

inline Dendrogram hac(const std::vector<EmbeddedError>& points, Linkage linkage = Linkage::average) {
    std::vector<Vector> v;
    for (const auto& p : points) v.push_back(p.vector);
    return hac(v, linkage);
}

struct ClusterAssignment {
    std::size_t k = 0;
    /// labels[i] = cluster of point i; clusters numbered by first appearance.
    std::vector<std::size_t> labels;

    std::vector<std::vector<std::size_t>> members() const {
        std::vector<std::vector<std::size_t>> out(k);
        for (std::size_t i = 0; i < labels.size(); ++i) out[labels[i]].push_back(i);
        return out;
    }
};

/// Undoes the last k-1 merges.
inline ClusterAssignment cut(const Dendrogram& dg, std::size_t k) {
    if (k < 1 || k > dg.n) throw ConfigError("cut: k must be in [1, " + std::to_string(dg.n) + "]");
    std::vector<std::size_t> parent(2 * dg.n);
    std::iota(parent.begin(), parent.end(), 0);
    auto find = [&](std::size_t x) {
        while (parent[x] != x) x = parent[x] = parent[parent[x]];
        return x;
    };
    for (std::size_t s = 0; s < dg.n - k; ++s) {
        const Merge& m = dg.merges.at(s);
        parent[find(m.a)] = dg.n + s;
        parent[find(m.b)] = dg.n + s;
    }
    ClusterAssignment out;
    out.k = k;
    out.labels.resize(dg.n);
    std::map<std::size_t, std::size_t> number;
    for (std::size_t i = 0; i < dg.n; ++i) {
        auto [it, fresh] = number.emplace(find(i), number.size());
        out.labels[i] = it->second;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Representatives
// ---------------------------------------------------------------------------

inline llm::ChatRequest summarize_request(const std::vector<std::string>& members) {
    llm::ChatRequest req;
    req.messages = {{"system", std::string(prompts::summarize_system)}, {"user", prompts::summarize_user(members)}};
    req.temperature = 0.0;
    return req;
}

/// The representative must be one of the listed errors (closed choice).
inline std::optional<std::string> parse_summary_reply(std::string_view reply, const std::vector<std::string>& members) {
    auto j = llm::parse_json_reply(reply);
    if (!j) return std::nullopt;
    auto it = j->find("Representative_error");
    if (it == j->end() || !it->is_string()) return std::nullopt;
    const std::string want = errors::normalize_label(it->get<std::string>());
    for (const auto& m : members)
        if (errors::normalize_label(m) == want) return m;
    return std::nullopt;
}

struct ClusterSummary {
    errors::ErrorCatalog catalog;
    /// Raw description -> catalog id.
    std::map<std::string, std::string> mapping;
    std::vector<std::vector<std::string>> members;  // per catalog entry
    std::vector<double> medoid_distance;            // mean member distance to the medoid
    std::size_t retries = 0;
};

/// `points[i]` carries a unique raw description; `categories[i]` its majority
/// category. Catalog ids are E01, E02, ... in cluster order.
inline ClusterSummary summarize_clusters(const ClusterAssignment& a, const std::vector<EmbeddedError>& points,
                                         const std::vector<errors::Category>& categories,
                                         const llm::EndpointConfig& endpoint, llm::ChatClient& client) {
    if (a.labels.size() != points.size() || categories.size() != points.size())
        throw ShapeError("summarize_clusters: assignment, points and categories must align");
    const auto groups = a.members();
    for (const auto& g : groups)
        if (g.empty()) throw ConfigError("summarize_clusters: empty cluster");
    std::vector<std::string> rep(groups.size());
    std::vector<int> retries(groups.size(), 0);
    parallel_for(groups.size(), static_cast<std::size_t>(endpoint.max_parallel), [&](std::size_t c) {
        std::vector<std::string> texts;
        for (std::size_t i : groups[c]) texts.push_back(points[i].text);
        const llm::ChatRequest req = summarize_request(texts);
        rep[c] = errors::detail::with_retries<std::string>(
            endpoint.retries, retries[c],
            [&]() -> std::optional<std::string> {
                auto choices = client.chat(req);
                if (choices.empty()) return std::nullopt;
                return parse_summary_reply(choices.front().content, texts);
            },
            "cluster summarization");
    });

    const int width = std::max<int>(2, static_cast<int>(std::to_string(groups.size()).size()));
    ClusterSummary out;
    std::vector<errors::ErrorLabel> labels;
    for (std::size_t c = 0; c < groups.size(); ++c) {
        std::string id = std::to_string(c + 1);
        id = "E" + std::string(static_cast<std::size_t>(std::max(0, width - static_cast<int>(id.size()))), '0') + id;
        std::size_t rep_point = groups[c].front();
        for (std::size_t i : groups[c])
            if (points[i].text == rep[c]) rep_point = i;
        labels.push_back({id, rep[c], categories[rep_point]});
        std::vector<std::string> mem;
        for (std::size_t i : groups[c]) {
            mem.push_back(points[i].text);
            out.mapping[points[i].text] = id;
        }
        out.members.push_back(std::move(mem));

        double best = std::numeric_limits<double>::infinity();
        for (std::size_t i : groups[c]) {
            double s = 0;
            for (std::size_t j : groups[c]) s += i == j ? 0.0 : cosine_distance(points[i].vector, points[j].vector);
            best = std::min(best, s);
        }
        out.medoid_distance.push_back(best / static_cast<double>(groups[c].size()));
        out.retries += static_cast<std::size_t>(retries[c]);
    }
    out.catalog = errors::ErrorCatalog(std::move(labels));
    return out;
}

/// Replaces raw labels by catalog ids (sorted, de-duplicated).
inline corpus::Dataset remap_dataset(const corpus::Dataset& d, const std::map<std::string, std::string>& mapping) {
    std::vector<std::optional<std::vector<std::string>>> errs;
    for (const auto& s : d.submissions()) {
        if (!s.errors) {
            errs.emplace_back();
            continue;
        }
        std::set<std::string> ids;
        for (const auto& raw : *s.errors) {
            auto it = mapping.find(raw);
            if (it == mapping.end()) throw IntegrityError(s.key() + ": raw error '" + raw + "' has no cluster");
            ids.insert(it->second);
        }
        errs.emplace_back(std::vector<std::string>(ids.begin(), ids.end()));
    }
    return d.with_errors(errs);
}

inline json cluster_report(const ClusterSummary& s) {
    json clusters = json::array();
    for (std::size_t c = 0; c < s.members.size(); ++c) {
        const auto& l = s.catalog.labels()[c];
        clusters.push_back({{"id", l.id},
                            {"representative", l.description},
                            {"category", std::string(errors::to_string(l.category))},
                            {"members", s.members[c]},
                            {"medoid_distance", s.medoid_distance[c]}});
    }
    return {{"k_c", s.members.size()}, {"clusters", std::move(clusters)}};
}

}  // namespace kaser::clustering
