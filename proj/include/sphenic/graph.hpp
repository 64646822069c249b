#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "error.hpp"

namespace sphenic {

struct WeightedEdge {
    int u = 0;
    int v = 0;
    double w = 0.0;
};

// Undirected weighted graph; edges stored once with u < v.
struct WeightedGraph {
    int n = 0;
    std::vector<WeightedEdge> edges;

    void validate() const {
        std::vector<std::vector<int>> seen(static_cast<std::size_t>(n));
        for (const auto& e : edges) {
            if (e.u < 0 || e.v < 0 || e.u >= n || e.v >= n)
                throw GraphError("edge endpoint out of range: " + std::to_string(e.u) + "-" +
                                 std::to_string(e.v));
            if (e.u == e.v) throw GraphError("self loop at vertex " + std::to_string(e.u));
            if (e.u > e.v) throw GraphError("edge not normalized: " + std::to_string(e.u) + ">" +
                                            std::to_string(e.v));
            if (!(e.w >= 0.0) || !std::isfinite(e.w))
                throw GraphError("edge weight must be finite and nonnegative");
            for (int other : seen[static_cast<std::size_t>(e.u)])
                if (other == e.v) throw GraphError("duplicate edge " + std::to_string(e.u) + "-" +
                                                   std::to_string(e.v));
            seen[static_cast<std::size_t>(e.u)].push_back(e.v);
        }
    }

    std::vector<std::vector<std::pair<int, double>>> adjacency() const {
        std::vector<std::vector<std::pair<int, double>>> adj(static_cast<std::size_t>(n));
        for (const auto& e : edges) {
            adj[static_cast<std::size_t>(e.u)].push_back({e.v, e.w});
            adj[static_cast<std::size_t>(e.v)].push_back({e.u, e.w});
        }
        return adj;
    }
};

class DisjointSet {
public:
    explicit DisjointSet(std::size_t n) : parent_(n), rank_(n, 0) {
        std::iota(parent_.begin(), parent_.end(), std::size_t{0});
    }

    std::size_t find(std::size_t x) {
        while (parent_[x] != x) {
            parent_[x] = parent_[parent_[x]];
            x = parent_[x];
        }
        return x;
    }

    // Returns the surviving root after union by rank.
    std::size_t unite(std::size_t a, std::size_t b) {
        a = find(a);
        b = find(b);
        if (a == b) return a;
        if (rank_[a] < rank_[b]) std::swap(a, b);
        parent_[b] = a;
        if (rank_[a] == rank_[b]) ++rank_[a];
        return a;
    }

private:
    std::vector<std::size_t> parent_;
    std::vector<std::uint8_t> rank_;
};

} // namespace sphenic
