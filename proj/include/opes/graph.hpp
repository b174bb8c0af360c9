#pragma once

#include <opes/binary_io.hpp>
#include <opes/rng.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace opes {

/// Global vertex identifier shared by every client and server.
using NodeId = std::uint64_t;

enum class Split : std::uint8_t { none = 0, train = 1, val = 2, test = 3 };

class GraphError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Undirected graph stored as symmetric CSR (two directed entries per edge,
/// no self-loops) plus per-node features, labels and split.
struct Graph {
  std::uint64_t num_nodes = 0;
  std::uint32_t feature_dim = 0;
  std::uint32_t num_classes = 0;
  std::vector<std::uint64_t> offsets{0};
  std::vector<NodeId> targets;
  std::vector<float> features;       // num_nodes x feature_dim, row-major
  std::vector<std::uint32_t> labels; // num_classes marks "unlabeled"
  std::vector<Split> split;

  std::uint64_t num_edges() const noexcept { return targets.size(); }
  std::uint32_t unlabeled() const noexcept { return num_classes; }

  std::span<const NodeId> neighbors(NodeId v) const {
    if (v >= num_nodes) throw GraphError("node id out of range: " + std::to_string(v));
    return {targets.data() + offsets[v], targets.data() + offsets[v + 1]};
  }
  std::uint64_t degree(NodeId v) const { return neighbors(v).size(); }

  std::span<const float> feature_row(NodeId v) const {
    return {features.data() + v * feature_dim, feature_dim};
  }

  std::vector<NodeId> nodes_in(Split s) const {
    std::vector<NodeId> out;
    for (NodeId v = 0; v < num_nodes; ++v)
      if (split[v] == s) out.push_back(v);
    return out;
  }

  bool operator==(const Graph&) const = default;

  /// Throws GraphError on the first violated invariant.
  void validate() const;
};

inline std::span<const NodeId> neighbors(const Graph& g, NodeId v) { return g.neighbors(v); }

inline void Graph::validate() const {
  if (offsets.size() != num_nodes + 1) throw GraphError("offsets length != num_nodes + 1");
  if (offsets.front() != 0) throw GraphError("offsets[0] != 0");
  for (std::uint64_t v = 0; v < num_nodes; ++v)
    if (offsets[v] > offsets[v + 1]) throw GraphError("offsets not non-decreasing at " + std::to_string(v));
  if (offsets.back() != targets.size()) throw GraphError("offsets[num_nodes] != num_edges");
  if (features.size() != num_nodes * feature_dim) throw GraphError("feature shape mismatch");
  if (labels.size() != num_nodes) throw GraphError("labels length mismatch");
  if (split.size() != num_nodes) throw GraphError("masks length mismatch");

  std::vector<std::pair<NodeId, NodeId>> fwd;
  std::vector<std::pair<NodeId, NodeId>> rev;
  fwd.reserve(targets.size());
  rev.reserve(targets.size());
  for (NodeId u = 0; u < num_nodes; ++u) {
    for (auto k = offsets[u]; k < offsets[u + 1]; ++k) {
      const NodeId v = targets[k];
      if (v >= num_nodes) throw GraphError("edge target out of range at node " + std::to_string(u));
      if (v == u) throw GraphError("self-loop at node " + std::to_string(u));
      fwd.emplace_back(u, v);
      rev.emplace_back(v, u);
    }
  }
  std::sort(fwd.begin(), fwd.end());
  std::sort(rev.begin(), rev.end());
  if (std::adjacent_find(fwd.begin(), fwd.end()) != fwd.end()) throw GraphError("duplicate edge entry");
  if (fwd != rev) throw GraphError("asymmetric adjacency");

  for (NodeId v = 0; v < num_nodes; ++v) {
    const auto s = static_cast<std::uint8_t>(split[v]);
    if (s > 3) throw GraphError("mask overlap/invalid mask value at node " + std::to_string(v));
    if (labels[v] > num_classes) throw GraphError("label out of range at node " + std::to_string(v));
    if (split[v] != Split::none && labels[v] == num_classes)
      throw GraphError("masked node without label: " + std::to_string(v));
  }
  for (float x : features)
    if (!std::isfinite(x)) throw GraphError("non-finite feature value");
}

/// Builds a canonical graph: symmetrized, self-loops and duplicates removed,
/// neighbor lists sorted ascending. Features default to zero, labels to
/// unlabeled, split to none.
inline Graph make_graph(std::uint64_t num_nodes, std::span<const std::pair<NodeId, NodeId>> edges,
                        std::uint32_t feature_dim = 0, std::uint32_t num_classes = 0) {
  std::vector<std::pair<NodeId, NodeId>> entries;
  entries.reserve(edges.size() * 2);
  for (auto [u, v] : edges) {
    if (u >= num_nodes || v >= num_nodes) throw GraphError("edge endpoint out of range");
    if (u == v) continue;
    entries.emplace_back(u, v);
    entries.emplace_back(v, u);
  }
  std::sort(entries.begin(), entries.end());
  entries.erase(std::unique(entries.begin(), entries.end()), entries.end());

  Graph g;
  g.num_nodes = num_nodes;
  g.feature_dim = feature_dim;
  g.num_classes = num_classes;
  g.offsets.assign(num_nodes + 1, 0);
  g.targets.reserve(entries.size());
  for (auto [u, v] : entries) {
    ++g.offsets[u + 1];
    g.targets.push_back(v);
  }
  for (std::uint64_t v = 0; v < num_nodes; ++v) g.offsets[v + 1] += g.offsets[v];
  g.features.assign(num_nodes * feature_dim, 0.0f);
  g.labels.assign(num_nodes, num_classes);
  g.split.assign(num_nodes, Split::none);
  return g;
}

inline Graph make_graph(std::uint64_t num_nodes, std::initializer_list<std::pair<NodeId, NodeId>> edges,
                        std::uint32_t feature_dim = 0, std::uint32_t num_classes = 0) {
  return make_graph(num_nodes, std::span<const std::pair<NodeId, NodeId>>(edges.begin(), edges.size()),
                    feature_dim, num_classes);
}

// ---------------------------------------------------------------------------
// Dataset directory format

namespace detail {

inline void write_meta(const std::filesystem::path& path, const KeyValueText& kv) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  for (const auto& [k, v] : kv) out << k << '=' << v << '\n';
}

}  // namespace detail

inline KeyValueText graph_meta(const Graph& g) {
  return {{"num_nodes", std::to_string(g.num_nodes)},
          {"num_edges", std::to_string(g.num_edges())},
          {"feature_dim", std::to_string(g.feature_dim)},
          {"num_classes", std::to_string(g.num_classes)}};
}

inline void save_graph_arrays(const Graph& g, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_le_array<std::uint64_t>(dir / "offsets.bin", g.offsets);
  write_le_array<std::uint64_t>(dir / "targets.bin", g.targets);
  write_le_array<float>(dir / "features.bin", g.features);
  write_le_array<std::uint32_t>(dir / "labels.bin", g.labels);
  std::vector<std::uint8_t> masks(g.split.size());
  std::transform(g.split.begin(), g.split.end(), masks.begin(),
                 [](Split s) { return static_cast<std::uint8_t>(s); });
  write_le_array<std::uint8_t>(dir / "masks.bin", masks);
}

inline void save_graph(const Graph& g, const std::filesystem::path& dir) {
  g.validate();
  std::filesystem::create_directories(dir);
  detail::write_meta(dir / "meta.txt", graph_meta(g));
  save_graph_arrays(g, dir);
}

inline Graph load_graph(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("missing dataset directory: " + dir.string());
  const auto meta = read_key_values(dir / "meta.txt");
  Graph g;
  g.num_nodes = require_u64(meta, "num_nodes", "meta.txt");
  const auto num_edges = require_u64(meta, "num_edges", "meta.txt");
  const auto fdim = require_u64(meta, "feature_dim", "meta.txt");
  const auto ncls = require_u64(meta, "num_classes", "meta.txt");
  if (fdim > std::numeric_limits<std::uint32_t>::max() || ncls >= std::numeric_limits<std::uint32_t>::max())
    throw IoError("meta.txt: header value out of range");
  g.feature_dim = static_cast<std::uint32_t>(fdim);
  g.num_classes = static_cast<std::uint32_t>(ncls);
  g.offsets = read_le_array<std::uint64_t>(dir / "offsets.bin", g.num_nodes + 1);
  g.targets = read_le_array<std::uint64_t>(dir / "targets.bin", num_edges);
  g.features = read_le_array<float>(dir / "features.bin", g.num_nodes * g.feature_dim);
  g.labels = read_le_array<std::uint32_t>(dir / "labels.bin", g.num_nodes);
  const auto masks = read_le_array<std::uint8_t>(dir / "masks.bin", g.num_nodes);
  g.split.resize(masks.size());
  for (std::size_t i = 0; i < masks.size(); ++i) {
    if (masks[i] > 3) throw GraphError("mask overlap/invalid mask value at node " + std::to_string(i));
    g.split[i] = static_cast<Split>(masks[i]);
  }
  g.validate();
  return g;
}

// ---------------------------------------------------------------------------
// Stochastic block model

struct SbmSpec {
  std::uint64_t blocks = 2;
  std::uint64_t nodes_per_block = 100;
  double p_intra = 0.1;
  double p_inter = 0.01;
  std::uint32_t feature_dim = 16;
  std::uint32_t num_classes = 0;  // 0: one class per block
  std::uint64_t seed = 0;
  double class_separation = 1.0;  // scale of the per-class mean vectors
  double feature_noise = 1.0;     // std-dev of the isotropic noise
};

/// Stochastic-block-model graph. Label = block id (mod num_classes); features
/// are the class mean plus Gaussian noise; masks split 60/20/20.
inline Graph synth_graph(const SbmSpec& spec) {
  auto valid_p = [](double p) { return p >= 0.0 && p <= 1.0; };
  if (!valid_p(spec.p_intra) || !valid_p(spec.p_inter)) throw GraphError("edge probability outside [0,1]");
  if (spec.blocks < 1 || spec.nodes_per_block < 1) throw GraphError("block counts must be >= 1");
  if (spec.feature_noise < 0.0) throw GraphError("negative feature noise");
  constexpr std::uint64_t max_nodes = std::numeric_limits<std::uint32_t>::max();
  if (spec.nodes_per_block > max_nodes / spec.blocks) throw GraphError("node count overflow");
  const std::uint64_t n = spec.blocks * spec.nodes_per_block;
  const std::uint32_t classes =
      spec.num_classes == 0 ? static_cast<std::uint32_t>(std::min<std::uint64_t>(spec.blocks, max_nodes - 1))
                            : spec.num_classes;

  Rng edge_rng(derive_seed(spec.seed, {1}));
  std::vector<std::pair<NodeId, NodeId>> edges;
  auto block_of = [&](NodeId v) { return v / spec.nodes_per_block; };
  for (NodeId i = 0; i < n; ++i) {
    for (std::uint64_t b = block_of(i); b < spec.blocks; ++b) {
      const double p = b == block_of(i) ? spec.p_intra : spec.p_inter;
      const NodeId first = b == block_of(i) ? i + 1 : b * spec.nodes_per_block;
      const NodeId end = (b + 1) * spec.nodes_per_block;
      if (p <= 0.0 || first >= end) continue;
      if (p >= 1.0) {
        for (NodeId j = first; j < end; ++j) edges.emplace_back(i, j);
        continue;
      }
      // Geometric skipping: gap to the next success of a Bernoulli(p) stream.
      const double log_q = std::log1p(-p);
      NodeId j = first;
      while (true) {
        const double u = 1.0 - edge_rng.uniform();  // (0, 1]
        const double skip = std::floor(std::log(u) / log_q);
        if (skip >= static_cast<double>(end - j)) break;
        j += static_cast<NodeId>(skip);
        edges.emplace_back(i, j);
        ++j;
        if (j >= end) break;
      }
    }
  }

  Graph g = make_graph(n, edges, spec.feature_dim, classes);

  Rng feat_rng(derive_seed(spec.seed, {2}));
  std::vector<double> centers(static_cast<std::size_t>(classes) * spec.feature_dim);
  for (auto& c : centers) c = spec.class_separation * feat_rng.normal();
  for (NodeId v = 0; v < n; ++v) {
    const auto label = static_cast<std::uint32_t>(block_of(v) % classes);
    g.labels[v] = label;
    for (std::uint32_t d = 0; d < spec.feature_dim; ++d) {
      g.features[v * spec.feature_dim + d] = static_cast<float>(
          centers[static_cast<std::size_t>(label) * spec.feature_dim + d] + spec.feature_noise * feat_rng.normal());
    }
  }

  Rng mask_rng(derive_seed(spec.seed, {3}));
  std::vector<NodeId> order(n);
  for (NodeId v = 0; v < n; ++v) order[v] = v;
  mask_rng.shuffle(std::span<NodeId>(order));
  const std::uint64_t n_train = n * 6 / 10;
  const std::uint64_t n_val = n * 2 / 10;
  for (std::uint64_t i = 0; i < n; ++i) {
    g.split[order[i]] = i < n_train ? Split::train : (i < n_train + n_val ? Split::val : Split::test);
  }
  return g;
}

}  // namespace opes
