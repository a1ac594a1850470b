#pragma once

#include "tgmn/common.hpp"
#include "tgmn/datasets.hpp"
#include "tgmn/rng.hpp"

#include <cstdint>
#include <deque>
#include <fstream>
#include <optional>
#include <unordered_map>
#include <vector>

namespace tgmn {

enum class NodeType { question, kc };

/// Question-KC membership graph. Immutable once built; queries are pure.
struct BipartiteGraph {
    std::int32_t num_questions = 0;
    std::int32_t num_kcs = 0;
    std::vector<std::vector<std::int32_t>> q_to_c;  // question -> sorted KC ids
    std::vector<std::vector<std::int32_t>> c_to_q;  // kc -> sorted question ids

    std::int32_t count(NodeType t) const {
        return t == NodeType::question ? num_questions : num_kcs;
    }
};

inline BipartiteGraph build_bipartite(const CanonicalDataset& ds) {
    ds.validate();
    BipartiteGraph g;
    g.num_questions = ds.num_questions;
    g.num_kcs = ds.num_kcs;
    g.q_to_c = ds.question_kcs;
    g.c_to_q.resize(ds.num_kcs);
    for (std::int32_t q = 0; q < ds.num_questions; ++q)
        for (auto kc : g.q_to_c[q]) g.c_to_q[kc].push_back(q);
    return g;
}

/// Edge-count distances from one node to every node of the same type, by
/// breadth-first search over the unweighted bipartite graph. Same-type paths
/// always have even edge count, so the hop count (number of intermediate
/// other-type nodes) is edge distance / 2. Unreachable nodes get nullopt.
inline std::vector<std::optional<std::int32_t>> hop_distances_from(const BipartiteGraph& g,
                                                                   std::int32_t source,
                                                                   NodeType type) {
    require(source >= 0 && source < g.count(type), "hop_distances_from: node id out of range");
    const bool from_q = type == NodeType::question;
    // Frontier alternates between node types; track edge distance per side.
    std::vector<std::int32_t> dist_q(g.num_questions, -1), dist_c(g.num_kcs, -1);
    (from_q ? dist_q : dist_c)[source] = 0;
    std::deque<std::pair<std::int32_t, bool>> queue;  // (id, is_question)
    queue.emplace_back(source, from_q);
    while (!queue.empty()) {
        auto [id, is_q] = queue.front();
        queue.pop_front();
        std::int32_t d = (is_q ? dist_q : dist_c)[id];
        const auto& nbrs = is_q ? g.q_to_c[id] : g.c_to_q[id];
        auto& other_dist = is_q ? dist_c : dist_q;
        for (auto nb : nbrs)
            if (other_dist[nb] < 0) {
                other_dist[nb] = d + 1;
                queue.emplace_back(nb, !is_q);
            }
    }
    const auto& same = from_q ? dist_q : dist_c;
    std::vector<std::optional<std::int32_t>> out(same.size());
    for (std::size_t i = 0; i < same.size(); ++i)
        if (same[i] >= 0) out[i] = same[i] / 2;
    return out;
}

inline std::optional<std::int32_t> hop_distance(const BipartiteGraph& g, std::int32_t a,
                                                std::int32_t b, NodeType type) {
    require(b >= 0 && b < g.count(type), "hop_distance: node id out of range");
    return hop_distances_from(g, a, type)[b];
}

/// Same-type node pair with its hop-distance label.
struct HopPair {
    std::int32_t node_a = 0;
    std::int32_t node_b = 0;
    NodeType node_type = NodeType::question;
    std::int32_t hops = 0;

    bool operator==(const HopPair&) const = default;
};

/// Uniformly sample distinct same-type pairs with replacement, keeping only
/// reachable pairs whose hop distance is within max_hops. Remote and
/// disconnected pairs carry no similarity signal worth regressing on.
inline std::vector<HopPair> sample_hop_pairs(const BipartiteGraph& g, NodeType type,
                                             std::size_t count, std::int32_t max_hops,
                                             std::uint64_t seed) {
    require(count >= 1, "sample_hop_pairs: count must be >= 1");
    require(max_hops >= 1, "sample_hop_pairs: max_hops must be >= 1");
    const auto n = static_cast<std::uint64_t>(g.count(type));
    require(n >= 2, "sample_hop_pairs: need at least 2 nodes of the requested type");

    Rng rng(seed);
    std::unordered_map<std::int32_t, std::vector<std::optional<std::int32_t>>> bfs_cache;
    auto distances = [&](std::int32_t node) -> const std::vector<std::optional<std::int32_t>>& {
        auto it = bfs_cache.find(node);
        if (it == bfs_cache.end())
            it = bfs_cache.emplace(node, hop_distances_from(g, node, type)).first;
        return it->second;
    };

    std::vector<HopPair> out;
    out.reserve(count);
    std::size_t attempts = 0;
    const std::size_t max_attempts = 1000 + 200 * count;
    while (out.size() < count) {
        if (++attempts > max_attempts)
            throw data_error("sample_hop_pairs: no admissible pairs within max_hops=" +
                             std::to_string(max_hops));
        auto a = static_cast<std::int32_t>(rng.integer(n));
        auto b = static_cast<std::int32_t>(rng.integer(n));
        if (a == b) continue;
        auto d = distances(a)[b];
        if (!d || *d > max_hops) continue;
        out.push_back({a, b, type, *d});
    }
    return out;
}

/// Edge-list export for inspection: header then one `question_id,kc_id` row
/// per membership edge, in (question, kc) order.
inline void write_graph_edges(const BipartiteGraph& g, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw data_error("cannot open for writing: " + path);
    out << "question_id,kc_id\n";
    for (std::int32_t q = 0; q < g.num_questions; ++q)
        for (auto kc : g.q_to_c[q]) out << q << ',' << kc << '\n';
    if (!out) throw data_error("write failed: " + path);
}

}  // namespace tgmn
