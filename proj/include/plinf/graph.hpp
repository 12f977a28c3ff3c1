#pragma once

// Cross-user playlist graph built from song overlap, its symmetric normalized
// propagation operator, and node duplication.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"
#include "plinf/dataset.hpp"
#include "plinf/error.hpp"
#include "plinf/matrix.hpp"

namespace plinf {

using NodeId = std::uint32_t;

struct PlaylistGraph {
  std::vector<std::string> node_ids;                 // node -> playlist id
  std::unordered_map<std::string, NodeId> index;      // playlist id -> node
  std::vector<std::string> owner;                     // node -> user id
  std::vector<std::vector<NodeId>> neighbors;         // sorted, no self entries
  Matrix features;                                    // N x D, row i = node i

  std::size_t size() const { return node_ids.size(); }
  std::size_t degree(NodeId i) const { return neighbors[i].size(); }
  std::size_t edge_count() const {
    std::size_t twice = 0;
    for (const auto& n : neighbors) twice += n.size();
    return twice / 2;
  }
  bool has_edge(NodeId a, NodeId b) const {
    return std::binary_search(neighbors[a].begin(), neighbors[a].end(), b);
  }

  NodeId node(const std::string& playlist_id) const {
    auto it = index.find(playlist_id);
    if (it == index.end()) throw DataError("graph has no node for playlist '" + playlist_id + "'");
    return it->second;
  }

  // Nodes grouped by owner, each list in ascending node order.
  std::unordered_map<std::string, std::vector<NodeId>> nodes_by_owner() const {
    std::unordered_map<std::string, std::vector<NodeId>> out;
    for (NodeId i = 0; i < size(); ++i) out[owner[i]].push_back(i);
    return out;
  }
};

namespace detail {
inline PlaylistGraph graph_nodes_from(const Dataset& ds) {
  PlaylistGraph g;
  const std::size_t n = ds.playlists().size();
  g.node_ids.reserve(n);
  g.owner.reserve(n);
  g.features.resize(static_cast<Index>(n), static_cast<Index>(ds.dim()));
  for (std::size_t p = 0; p < n; ++p) {
    const auto& pl = ds.playlist(p);
    g.index.emplace(pl.id, static_cast<NodeId>(p));
    g.node_ids.push_back(pl.id);
    g.owner.push_back(pl.owner);
    for (std::size_t f = 0; f < ds.dim(); ++f) g.features(static_cast<Index>(p), static_cast<Index>(f)) = pl.embedding[f];
  }
  g.neighbors.assign(n, {});
  return g;
}
}  // namespace detail

// Nodes and features only; used by models that ignore graph structure.
inline PlaylistGraph edgeless_graph(const Dataset& ds) { return detail::graph_nodes_from(ds); }

/// Edge (i, j), i != j, iff the playlists share more than `tau` songs.
inline PlaylistGraph build_graph(const Dataset& ds, int tau) {
  if (tau < 0) throw ConfigError("tau must be nonnegative");
  PlaylistGraph g = detail::graph_nodes_from(ds);
  const std::size_t n = g.size();
  std::unordered_map<std::string, std::uint32_t> song_code;
  std::vector<std::vector<std::uint32_t>> songs(n);
  for (std::size_t p = 0; p < n; ++p) {
    const auto& pl = ds.playlist(p);
    if (pl.song_ids.empty())
      throw DataError("user '" + pl.owner + "' playlist '" + pl.id + "' has no songs; cannot build the playlist graph");
    for (const auto& s : pl.song_ids) {
      auto [it, inserted] = song_code.emplace(s, static_cast<std::uint32_t>(song_code.size()));
      songs[p].push_back(it->second);
    }
  }
  std::vector<std::vector<NodeId>> postings(song_code.size());
  for (std::size_t p = 0; p < n; ++p)
    for (auto s : songs[p]) postings[s].push_back(static_cast<NodeId>(p));

  std::vector<int> shared(n, 0);
  std::vector<NodeId> touched;
  for (NodeId i = 0; i < n; ++i) {
    touched.clear();
    for (auto s : songs[i]) {
      for (NodeId j : postings[s]) {
        if (j <= i) continue;
        if (shared[j]++ == 0) touched.push_back(j);
      }
    }
    for (NodeId j : touched) {
      if (shared[j] > tau) {
        g.neighbors[i].push_back(j);
        g.neighbors[j].push_back(i);
      }
      shared[j] = 0;
    }
  }
  for (auto& nb : g.neighbors) std::sort(nb.begin(), nb.end());
  return g;
}

// ---------------------------------------------------------------------------
// Adjacency views. An adjacency exposes size(), degree(i) and
// for_each_neighbor(i, f) with neighbors visited in ascending order.

struct GraphAdjacency {
  const PlaylistGraph& graph;

  std::size_t size() const { return graph.size(); }
  std::size_t degree(NodeId i) const { return graph.neighbors[i].size(); }
  template <typename F>
  void for_each_neighbor(NodeId i, F&& f) const {
    for (NodeId j : graph.neighbors[i]) f(j);
  }
};

// `graph` plus one virtual node (id = graph.size()) that duplicates `source`.
struct DuplicateAdjacency {
  const PlaylistGraph& graph;
  NodeId source;

  NodeId virtual_node() const { return static_cast<NodeId>(graph.size()); }
  std::size_t size() const { return graph.size() + 1; }
  bool touches_source(NodeId i) const { return i < graph.size() && graph.has_edge(source, i); }
  std::size_t degree(NodeId i) const {
    if (i == virtual_node()) return graph.degree(source);
    return graph.degree(i) + (touches_source(i) ? 1 : 0);
  }
  template <typename F>
  void for_each_neighbor(NodeId i, F&& f) const {
    if (i == virtual_node()) {
      for (NodeId j : graph.neighbors[source]) f(j);
      return;
    }
    for (NodeId j : graph.neighbors[i]) f(j);
    if (touches_source(i)) f(virtual_node());
  }
};

/// S = D^{-1/2} (A + I) D^{-1/2}, D the degree matrix of A + I; CSR storage.
struct Propagator {
  std::size_t n = 0;
  std::vector<std::size_t> row_begin;  // size n + 1
  std::vector<NodeId> col;
  std::vector<double> val;

  double at(NodeId i, NodeId j) const {
    for (std::size_t e = row_begin[i]; e < row_begin[i + 1]; ++e)
      if (col[e] == j) return val[e];
    return 0.0;
  }
};

template <typename Adjacency>
Propagator normalize(const Adjacency& adj) {
  Propagator s;
  s.n = adj.size();
  // 1 / sqrt(d_i d_j) rather than a product of two inverse roots, so regular
  // cases such as a single edge come out exact.
  std::vector<double> deg(s.n);
  for (NodeId i = 0; i < s.n; ++i) deg[i] = static_cast<double>(adj.degree(i)) + 1.0;
  s.row_begin.reserve(s.n + 1);
  s.row_begin.push_back(0);
  for (NodeId i = 0; i < s.n; ++i) {
    std::vector<NodeId> cols;
    cols.push_back(i);
    adj.for_each_neighbor(i, [&](NodeId j) { cols.push_back(j); });
    std::sort(cols.begin(), cols.end());
    for (NodeId j : cols) {
      s.col.push_back(j);
      s.val.push_back(1.0 / std::sqrt(deg[i] * deg[j]));
    }
    s.row_begin.push_back(s.col.size());
  }
  return s;
}

inline Propagator normalize(const PlaylistGraph& g) { return normalize(GraphAdjacency{g}); }

/// S^k X by k successive sparse products.
inline Matrix propagate(const Propagator& s, const Matrix& x, int k) {
  if (static_cast<std::size_t>(x.rows()) != s.n)
    throw DataError("propagate: feature matrix has " + std::to_string(x.rows()) + " rows, graph has " +
                    std::to_string(s.n) + " nodes");
  if (k < 0) throw ConfigError("propagation depth must be nonnegative");
  Matrix cur = x;
  Matrix next(x.rows(), x.cols());
  for (int step = 0; step < k; ++step) {
    for (std::size_t i = 0; i < s.n; ++i) {
      auto out = next.row(static_cast<Index>(i));
      out.setZero();
      for (std::size_t e = s.row_begin[i]; e < s.row_begin[i + 1]; ++e)
        out.noalias() += s.val[e] * cur.row(static_cast<Index>(s.col[e]));
    }
    std::swap(cur, next);
  }
  return cur;
}

/// Rows `rows` of S^k as a dense |rows| x N coefficient matrix C, so that
/// (S^k X)[rows] = C X and, S being symmetric, d/dX of a loss on those rows is
/// C^T times the row gradient.
template <typename Adjacency>
Matrix row_coefficients(const Adjacency& adj, std::span<const NodeId> rows, int k) {
  const std::size_t n = adj.size();
  std::vector<double> dinv(n);
  for (NodeId i = 0; i < n; ++i) dinv[i] = 1.0 / std::sqrt(static_cast<double>(adj.degree(i)) + 1.0);
  Matrix c = Matrix::Zero(static_cast<Index>(rows.size()), static_cast<Index>(n));
  for (std::size_t r = 0; r < rows.size(); ++r) c(static_cast<Index>(r), rows[r]) = 1.0;
  std::vector<double> cur(n), next(n);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t i = 0; i < n; ++i) cur[i] = c(static_cast<Index>(r), static_cast<Index>(i));
    for (int step = 0; step < k; ++step) {
      std::fill(next.begin(), next.end(), 0.0);
      for (NodeId i = 0; i < n; ++i) {
        const double ci = cur[i];
        if (ci == 0.0) continue;
        next[i] += ci * dinv[i] * dinv[i];
        const double w = ci * dinv[i];
        adj.for_each_neighbor(i, [&](NodeId j) { next[j] += w * dinv[j]; });
      }
      std::swap(cur, next);
    }
    for (std::size_t i = 0; i < n; ++i) c(static_cast<Index>(r), static_cast<Index>(i)) = cur[i];
  }
  return c;
}

/// Appends a node owned by `new_owner` whose edge set equals the source's.
/// Existing rows and edges among existing nodes are left untouched.
inline NodeId append_duplicate(PlaylistGraph& g, NodeId source, const std::string& new_id,
                               const std::string& new_owner, std::span<const double> new_embedding) {
  if (source >= g.size()) throw DataError("duplicate_node: unknown source node " + std::to_string(source));
  if (static_cast<Index>(new_embedding.size()) != g.features.cols())
    throw DataError("duplicate_node: embedding dimension mismatch");
  if (g.index.count(new_id)) throw DataError("duplicate_node: node id '" + new_id + "' already exists");
  const auto id = static_cast<NodeId>(g.size());
  const std::vector<NodeId> copied = g.neighbors[source];
  g.node_ids.push_back(new_id);
  g.index.emplace(new_id, id);
  g.owner.push_back(new_owner);
  g.neighbors.push_back(copied);
  for (NodeId j : copied) g.neighbors[j].push_back(id);  // id is the largest, order preserved
  g.features.conservativeResize(g.features.rows() + 1, Eigen::NoChange);
  for (Index f = 0; f < g.features.cols(); ++f) g.features(id, f) = new_embedding[static_cast<std::size_t>(f)];
  return id;
}

inline std::pair<PlaylistGraph, NodeId> duplicate_node(const PlaylistGraph& g, NodeId source,
                                                       const std::string& new_id, const std::string& new_owner,
                                                       std::span<const double> new_embedding) {
  PlaylistGraph copy = g;
  const NodeId id = append_duplicate(copy, source, new_id, new_owner, new_embedding);
  return {std::move(copy), id};
}

// Debug export: "a b" per undirected edge (a < b) plus a JSON node map.
inline void export_graph(const PlaylistGraph& g, const std::string& edge_path, const std::string& node_map_path) {
  std::ofstream edges(edge_path, std::ios::trunc);
  if (!edges) throw RuntimeFailure("cannot write '" + edge_path + "'");
  for (NodeId i = 0; i < g.size(); ++i)
    for (NodeId j : g.neighbors[i])
      if (i < j) edges << i << ' ' << j << '\n';
  nlohmann::json nodes = nlohmann::json::array();
  for (NodeId i = 0; i < g.size(); ++i)
    nodes.push_back({{"node", i}, {"playlist", g.node_ids[i]}, {"owner", g.owner[i]}, {"degree", g.degree(i)}});
  std::ofstream map(node_map_path, std::ios::trunc);
  if (!map) throw RuntimeFailure("cannot write '" + node_map_path + "'");
  map << nlohmann::json{{"nodes", nodes}, {"edges", g.edge_count()}}.dump(1) << '\n';
}

}  // namespace plinf
