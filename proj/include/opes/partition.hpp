#pragma once

#include <opes/graph.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <stdexcept>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace opes {

class PartitionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PartitionAssignment {
  std::uint32_t num_parts = 0;
  std::vector<std::uint32_t> part_of;

  std::vector<std::uint64_t> part_sizes() const {
    std::vector<std::uint64_t> sizes(num_parts, 0);
    for (auto p : part_of) ++sizes[p];
    return sizes;
  }
  bool operator==(const PartitionAssignment&) const = default;
};

/// Largest part size the partitioner is allowed to produce.
inline std::uint64_t balance_cap(std::uint64_t num_nodes, std::uint32_t k) {
  const auto scaled = static_cast<std::uint64_t>(std::ceil(1.05 * static_cast<double>(num_nodes) / k - 1e-9));
  return std::max<std::uint64_t>(scaled, (num_nodes + k - 1) / k);
}

/// Number of directed edge entries whose endpoints lie in different parts.
inline std::uint64_t edge_cut(const Graph& g, const PartitionAssignment& pa) {
  std::uint64_t cut = 0;
  for (NodeId u = 0; u < g.num_nodes; ++u)
    for (NodeId v : g.neighbors(u))
      if (pa.part_of[u] != pa.part_of[v]) ++cut;
  return cut;
}

inline void validate_assignment(const Graph& g, const PartitionAssignment& pa) {
  if (pa.num_parts == 0) throw PartitionError("assignment has zero parts");
  if (pa.part_of.size() != g.num_nodes) throw PartitionError("assignment length != num_nodes");
  for (auto p : pa.part_of)
    if (p >= pa.num_parts) throw PartitionError("part index out of range: " + std::to_string(p));
}

/// Seeded greedy BFS region growing into exactly balanced parts, followed by
/// boundary refinement passes that move a vertex to the part holding most of
/// its neighbors while respecting the 5% balance slack.
inline PartitionAssignment partition(const Graph& g, std::uint32_t k, std::uint64_t seed,
                                     int refine_passes = 8) {
  const std::uint64_t n = g.num_nodes;
  if (k < 1 || k > n) throw PartitionError("k out of range: " + std::to_string(k));
  constexpr auto unassigned = std::numeric_limits<std::uint32_t>::max();

  PartitionAssignment pa{k, std::vector<std::uint32_t>(n, unassigned)};
  Rng rng(derive_seed(seed, {0x9a27}));
  std::vector<NodeId> order(n);
  for (NodeId v = 0; v < n; ++v) order[v] = v;
  rng.shuffle(std::span<NodeId>(order));

  std::vector<std::uint64_t> sizes(k, 0);
  std::size_t cursor = 0;
  for (std::uint32_t p = 0; p < k; ++p) {
    const std::uint64_t target = n / k + (p < n % k ? 1 : 0);
    std::deque<NodeId> queue;
    while (sizes[p] < target) {
      if (queue.empty()) {
        while (pa.part_of[order[cursor]] != unassigned) ++cursor;
        pa.part_of[order[cursor]] = p;
        ++sizes[p];
        queue.push_back(order[cursor]);
        continue;
      }
      const NodeId u = queue.front();
      queue.pop_front();
      for (NodeId v : g.neighbors(u)) {
        if (sizes[p] >= target) break;
        if (pa.part_of[v] != unassigned) continue;
        pa.part_of[v] = p;
        ++sizes[p];
        queue.push_back(v);
      }
    }
  }

  const std::uint64_t cap = balance_cap(n, k);
  std::vector<std::uint64_t> counts(k, 0);
  for (int pass = 0; pass < refine_passes && k > 1; ++pass) {
    rng.shuffle(std::span<NodeId>(order));
    std::uint64_t moved = 0;
    for (NodeId v : order) {
      const auto cur = pa.part_of[v];
      std::fill(counts.begin(), counts.end(), 0);
      for (NodeId u : g.neighbors(v)) ++counts[pa.part_of[u]];
      std::uint32_t best = cur;
      for (std::uint32_t p = 0; p < k; ++p)
        if (counts[p] > counts[best] && sizes[p] + 1 <= cap) best = p;
      if (best != cur && sizes[cur] > 1) {
        pa.part_of[v] = best;
        --sizes[cur];
        ++sizes[best];
        ++moved;
      }
    }
    if (moved == 0) break;
  }
  return pa;
}

/// Partition file: one part index per line, one line per vertex.
inline PartitionAssignment read_partition_file(const std::filesystem::path& path, std::uint64_t num_nodes,
                                               std::uint32_t num_parts = 0) {
  std::ifstream in(path);
  if (!in) throw IoError("missing partition file: " + path.string());
  PartitionAssignment pa;
  pa.part_of.reserve(num_nodes);
  std::string line;
  std::uint32_t max_part = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::size_t pos = 0;
    unsigned long value = 0;
    try {
      value = std::stoul(line, &pos);
    } catch (const std::logic_error&) {
      throw PartitionError("bad partition line " + std::to_string(pa.part_of.size() + 1) + ": " + line);
    }
    if (pos != line.size() || value > std::numeric_limits<std::uint32_t>::max() - 1)
      throw PartitionError("bad partition line " + std::to_string(pa.part_of.size() + 1) + ": " + line);
    pa.part_of.push_back(static_cast<std::uint32_t>(value));
    max_part = std::max(max_part, static_cast<std::uint32_t>(value));
  }
  if (pa.part_of.size() != num_nodes)
    throw PartitionError("partition file has " + std::to_string(pa.part_of.size()) + " lines, expected " +
                         std::to_string(num_nodes));
  pa.num_parts = num_parts == 0 ? max_part + 1 : num_parts;
  for (auto p : pa.part_of)
    if (p >= pa.num_parts) throw PartitionError("part index out of range: " + std::to_string(p));
  return pa;
}

inline void write_partition_file(const std::filesystem::path& path, const PartitionAssignment& pa) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  for (auto p : pa.part_of) out << p << '\n';
}

// ---------------------------------------------------------------------------
// Client subgraphs

/// One client's view: local vertices, the 1-hop remote halo, and adjacency
/// over both. Subgraph indices [0, num_local) are local vertices in ascending
/// global order, followed by remote vertices in ascending global order.
/// Every adjacency row is ordered by ascending global id.
struct PartitionedSubgraph {
  std::uint32_t client_id = 0;
  std::uint32_t num_clients = 1;
  std::uint32_t feature_dim = 0;
  std::uint32_t num_classes = 0;
  std::uint32_t num_local = 0;
  std::vector<NodeId> node_ids;          // subgraph index -> global id
  std::vector<std::uint64_t> offsets{0}; // size node_ids.size() + 1
  std::vector<std::uint32_t> targets;    // subgraph indices
  std::vector<NodeId> push_nodes;        // ascending
  std::vector<NodeId> pull_nodes;        // ascending; equals remote_nodes()
  std::vector<float> features;           // num_local rows only
  std::vector<std::uint32_t> labels;     // num_local
  std::vector<Split> split;              // num_local

  std::uint32_t size() const noexcept { return static_cast<std::uint32_t>(node_ids.size()); }
  std::uint32_t num_remote() const noexcept { return size() - num_local; }
  bool is_remote(std::uint32_t idx) const noexcept { return idx >= num_local; }

  std::span<const NodeId> local_nodes() const { return {node_ids.data(), num_local}; }
  std::span<const NodeId> remote_nodes() const { return {node_ids.data() + num_local, num_remote()}; }

  std::span<const std::uint32_t> neighbors(std::uint32_t idx) const {
    return {targets.data() + offsets[idx], targets.data() + offsets[idx + 1]};
  }
  std::span<const float> feature_row(std::uint32_t local_idx) const {
    return {features.data() + static_cast<std::size_t>(local_idx) * feature_dim, feature_dim};
  }

  std::vector<std::uint32_t> local_train_indices() const {
    std::vector<std::uint32_t> out;
    for (std::uint32_t i = 0; i < num_local; ++i)
      if (split[i] == Split::train) out.push_back(i);
    return out;
  }

  /// Subgraph index of a global id, if present. Binary search over the two
  /// sorted ranges.
  std::optional<std::uint32_t> index_of(NodeId global) const {
    auto find_in = [&](std::size_t lo, std::size_t hi) -> std::optional<std::uint32_t> {
      auto first = node_ids.begin() + static_cast<std::ptrdiff_t>(lo);
      auto last = node_ids.begin() + static_cast<std::ptrdiff_t>(hi);
      auto it = std::lower_bound(first, last, global);
      if (it != last && *it == global) return static_cast<std::uint32_t>(it - node_ids.begin());
      return std::nullopt;
    };
    if (auto hit = find_in(0, num_local)) return hit;
    return find_in(num_local, node_ids.size());
  }

  std::uint64_t num_edges() const noexcept { return targets.size(); }

  bool operator==(const PartitionedSubgraph&) const = default;

  void validate() const;
};

struct CrossEdge {
  NodeId local = 0;
  NodeId remote = 0;
  std::uint32_t owner = 0;
  bool operator==(const CrossEdge&) const = default;
  auto operator<=>(const CrossEdge&) const = default;
};

/// Per-client list of cross-client edges, as known to the embedding server.
struct CrossEdgeManifest {
  std::vector<std::vector<CrossEdge>> per_client;

  std::uint32_t num_clients() const { return static_cast<std::uint32_t>(per_client.size()); }
  bool operator==(const CrossEdgeManifest&) const = default;
};

inline void PartitionedSubgraph::validate() const {
  const auto n = node_ids.size();
  if (num_local > n) throw PartitionError("num_local exceeds subgraph size");
  if (offsets.size() != n + 1 || offsets.front() != 0 || offsets.back() != targets.size())
    throw PartitionError("subgraph offsets malformed");
  for (std::size_t i = 0; i < n; ++i)
    if (offsets[i] > offsets[i + 1]) throw PartitionError("subgraph offsets decreasing");
  if (!std::is_sorted(node_ids.begin(), node_ids.begin() + num_local) ||
      !std::is_sorted(node_ids.begin() + num_local, node_ids.end()))
    throw PartitionError("subgraph id map not sorted");
  for (std::uint32_t i = 0; i < n; ++i) {
    bool touches_local = false;
    for (auto t : neighbors(i)) {
      if (t >= n) throw PartitionError("subgraph edge target out of range");
      if (is_remote(i) && is_remote(t)) throw PartitionError("remote-remote edge in subgraph");
      touches_local = touches_local || !is_remote(t);
    }
    if (is_remote(i) && !touches_local) throw PartitionError("remote vertex without local neighbor");
  }
  if (!std::equal(pull_nodes.begin(), pull_nodes.end(), remote_nodes().begin(), remote_nodes().end()))
    throw PartitionError("pull set differs from remote set");
  for (auto p : push_nodes)
    if (auto idx = index_of(p); !idx || is_remote(*idx)) throw PartitionError("push node is not local");
  if (features.size() != static_cast<std::size_t>(num_local) * feature_dim || labels.size() != num_local ||
      split.size() != num_local)
    throw PartitionError("local attribute shape mismatch");
}

struct SubgraphSet {
  std::vector<PartitionedSubgraph> subgraphs;
  CrossEdgeManifest manifest;
};

/// Fraction of global vertices that have at least one cross-client neighbor.
inline double boundary_fraction(const Graph& g, const PartitionAssignment& pa) {
  if (g.num_nodes == 0) return 0.0;
  std::uint64_t boundary = 0;
  for (NodeId u = 0; u < g.num_nodes; ++u) {
    for (NodeId v : g.neighbors(u)) {
      if (pa.part_of[v] != pa.part_of[u]) {
        ++boundary;
        break;
      }
    }
  }
  return static_cast<double>(boundary) / static_cast<double>(g.num_nodes);
}

/// Expands every part by its 1-hop remote halo and collects the cross-edge
/// manifest.
inline SubgraphSet build_subgraphs(const Graph& g, const PartitionAssignment& pa) {
  validate_assignment(g, pa);
  const std::uint32_t k = pa.num_parts;
  SubgraphSet out;
  out.subgraphs.resize(k);
  out.manifest.per_client.resize(k);

  std::vector<std::vector<NodeId>> locals(k);
  for (NodeId v = 0; v < g.num_nodes; ++v) locals[pa.part_of[v]].push_back(v);

  for (std::uint32_t c = 0; c < k; ++c) {
    auto& sub = out.subgraphs[c];
    auto& manifest = out.manifest.per_client[c];
    sub.client_id = c;
    sub.num_clients = k;
    sub.feature_dim = g.feature_dim;
    sub.num_classes = g.num_classes;
    sub.num_local = static_cast<std::uint32_t>(locals[c].size());

    std::vector<NodeId> remotes;
    for (NodeId u : locals[c]) {
      bool boundary = false;
      for (NodeId v : g.neighbors(u)) {
        if (pa.part_of[v] == c) continue;
        boundary = true;
        remotes.push_back(v);
        manifest.push_back({u, v, pa.part_of[v]});
      }
      if (boundary) sub.push_nodes.push_back(u);
    }
    std::sort(remotes.begin(), remotes.end());
    remotes.erase(std::unique(remotes.begin(), remotes.end()), remotes.end());

    sub.node_ids = locals[c];
    sub.node_ids.insert(sub.node_ids.end(), remotes.begin(), remotes.end());
    sub.pull_nodes = remotes;

    std::unordered_map<NodeId, std::uint32_t> index;
    index.reserve(sub.node_ids.size());
    for (std::uint32_t i = 0; i < sub.node_ids.size(); ++i) index.emplace(sub.node_ids[i], i);

    sub.offsets.assign(1, 0);
    for (std::uint32_t i = 0; i < sub.node_ids.size(); ++i) {
      const NodeId u = sub.node_ids[i];
      const bool remote = i >= sub.num_local;
      for (NodeId v : g.neighbors(u)) {  // ascending global order
        const bool v_local = pa.part_of[v] == c;
        if (remote && !v_local) continue;
        sub.targets.push_back(index.at(v));
      }
      sub.offsets.push_back(sub.targets.size());
    }

    sub.features.reserve(static_cast<std::size_t>(sub.num_local) * g.feature_dim);
    for (NodeId u : locals[c]) {
      auto row = g.feature_row(u);
      sub.features.insert(sub.features.end(), row.begin(), row.end());
      sub.labels.push_back(g.labels[u]);
      sub.split.push_back(g.split[u]);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Subgraph directory format: graph files (attributes for local rows only)
// plus remote.bin, idmap.bin and push.bin.

inline void save_subgraph(const PartitionedSubgraph& sub, const std::filesystem::path& dir) {
  sub.validate();
  std::filesystem::create_directories(dir);
  detail::write_meta(dir / "meta.txt", {{"num_nodes", std::to_string(sub.size())},
                                        {"num_edges", std::to_string(sub.num_edges())},
                                        {"feature_dim", std::to_string(sub.feature_dim)},
                                        {"num_classes", std::to_string(sub.num_classes)},
                                        {"num_local", std::to_string(sub.num_local)},
                                        {"num_push", std::to_string(sub.push_nodes.size())},
                                        {"client_id", std::to_string(sub.client_id)},
                                        {"num_clients", std::to_string(sub.num_clients)}});
  std::vector<std::uint64_t> targets(sub.targets.begin(), sub.targets.end());
  write_le_array<std::uint64_t>(dir / "offsets.bin", sub.offsets);
  write_le_array<std::uint64_t>(dir / "targets.bin", targets);
  write_le_array<float>(dir / "features.bin", sub.features);
  write_le_array<std::uint32_t>(dir / "labels.bin", sub.labels);
  std::vector<std::uint8_t> masks(sub.split.size());
  std::transform(sub.split.begin(), sub.split.end(), masks.begin(),
                 [](Split s) { return static_cast<std::uint8_t>(s); });
  write_le_array<std::uint8_t>(dir / "masks.bin", masks);
  std::vector<std::uint8_t> remote(sub.size());
  for (std::uint32_t i = 0; i < sub.size(); ++i) remote[i] = sub.is_remote(i) ? 1 : 0;
  write_le_array<std::uint8_t>(dir / "remote.bin", remote);
  write_le_array<std::uint64_t>(dir / "idmap.bin", sub.node_ids);
  write_le_array<std::uint64_t>(dir / "push.bin", sub.push_nodes);
}

inline PartitionedSubgraph load_subgraph(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("missing subgraph directory: " + dir.string());
  const auto meta = read_key_values(dir / "meta.txt");
  PartitionedSubgraph sub;
  const auto n = require_u64(meta, "num_nodes", "meta.txt");
  const auto m = require_u64(meta, "num_edges", "meta.txt");
  if (n > std::numeric_limits<std::uint32_t>::max()) throw IoError("subgraph too large");
  sub.feature_dim = static_cast<std::uint32_t>(require_u64(meta, "feature_dim", "meta.txt"));
  sub.num_classes = static_cast<std::uint32_t>(require_u64(meta, "num_classes", "meta.txt"));
  sub.num_local = static_cast<std::uint32_t>(require_u64(meta, "num_local", "meta.txt"));
  sub.client_id = static_cast<std::uint32_t>(require_u64(meta, "client_id", "meta.txt"));
  sub.num_clients = static_cast<std::uint32_t>(require_u64(meta, "num_clients", "meta.txt"));
  if (sub.num_local > n) throw IoError("meta.txt: num_local > num_nodes");
  sub.offsets = read_le_array<std::uint64_t>(dir / "offsets.bin", n + 1);
  for (auto t : read_le_array<std::uint64_t>(dir / "targets.bin", m)) {
    if (t >= n) throw PartitionError("subgraph edge target out of range");
    sub.targets.push_back(static_cast<std::uint32_t>(t));
  }
  sub.features = read_le_array<float>(dir / "features.bin", std::uint64_t{sub.num_local} * sub.feature_dim);
  sub.labels = read_le_array<std::uint32_t>(dir / "labels.bin", sub.num_local);
  for (auto b : read_le_array<std::uint8_t>(dir / "masks.bin", sub.num_local)) {
    if (b > 3) throw GraphError("invalid mask value");
    sub.split.push_back(static_cast<Split>(b));
  }
  const auto remote = read_le_array<std::uint8_t>(dir / "remote.bin", n);
  for (std::uint64_t i = 0; i < n; ++i)
    if ((remote[i] != 0) != (i >= sub.num_local)) throw PartitionError("remote flags disagree with layout");
  sub.node_ids = read_le_array<std::uint64_t>(dir / "idmap.bin", n);
  sub.push_nodes = read_le_array<std::uint64_t>(dir / "push.bin", require_u64(meta, "num_push", "meta.txt"));
  sub.pull_nodes.assign(sub.node_ids.begin() + sub.num_local, sub.node_ids.end());
  sub.validate();
  return sub;
}

}  // namespace opes
