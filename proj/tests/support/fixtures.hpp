#pragma once

// Shared test fixtures and independent oracles.

#include <opes/gnn.hpp>
#include <opes/graph.hpp>
#include <opes/partition.hpp>
#include <opes/sampler.hpp>

#include <cmath>
#include <filesystem>
#include <limits>
#include <map>
#include <random>
#include <unistd.h>
#include <set>
#include <string>
#include <vector>

namespace opes::testing {

inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("opes_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline Graph path_graph(std::uint64_t n, std::uint32_t feature_dim = 0) {
  std::vector<std::pair<NodeId, NodeId>> edges;
  for (NodeId v = 0; v + 1 < n; ++v) edges.emplace_back(v, v + 1);
  return make_graph(n, edges, feature_dim);
}

inline Graph clique(std::uint64_t n) {
  std::vector<std::pair<NodeId, NodeId>> edges;
  for (NodeId u = 0; u < n; ++u)
    for (NodeId v = u + 1; v < n; ++v) edges.emplace_back(u, v);
  return make_graph(n, edges);
}

/// Labels every vertex, assigns the given split to all, fills features from
/// a seeded Gaussian.
inline void decorate(Graph& g, std::uint32_t feature_dim, std::uint32_t num_classes, std::uint64_t seed,
                     Split split = Split::train) {
  Rng rng(seed);
  g.feature_dim = feature_dim;
  g.num_classes = num_classes;
  g.features.assign(g.num_nodes * feature_dim, 0.0f);
  for (auto& x : g.features) x = static_cast<float>(rng.normal());
  g.labels.assign(g.num_nodes, 0);
  for (auto& l : g.labels) l = static_cast<std::uint32_t>(rng.below(num_classes));
  g.split.assign(g.num_nodes, split);
}

/// Three-client toy topology. Client 0 = {A,B,C,D}, client 1 = {E,H,I},
/// client 2 = {F,G,J}; cross edges A-E, B-F, E-G, H-F.
struct Figure3 {
  enum : NodeId { A = 0, B, C, D, E, H, I, F, G, J };
  Graph graph;
  PartitionAssignment parts;
};

inline Figure3 figure3_topology() {
  using F3 = Figure3;
  Figure3 f;
  f.graph = make_graph(10, {{F3::A, F3::C}, {F3::A, F3::D}, {F3::C, F3::D}, {F3::B, F3::C},
                            {F3::E, F3::I}, {F3::H, F3::I}, {F3::F, F3::G}, {F3::G, F3::J},
                            {F3::A, F3::E}, {F3::B, F3::F}, {F3::E, F3::G}, {F3::H, F3::F}});
  decorate(f.graph, 4, 2, 3);
  f.parts = {3, {0, 0, 0, 0, 1, 1, 1, 2, 2, 2}};
  return f;
}

/// Random connected-ish labelled graph used by numeric property tests.
inline Graph random_graph(std::uint64_t n, double p, std::uint32_t feature_dim, std::uint32_t num_classes,
                          std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::pair<NodeId, NodeId>> edges;
  for (NodeId u = 0; u < n; ++u)
    for (NodeId v = u + 1; v < n; ++v)
      if (rng.uniform() < p) edges.emplace_back(u, v);
  Graph g = make_graph(n, edges);
  decorate(g, feature_dim, num_classes, seed ^ 0xabcdef);
  return g;
}

/// Independent checker for the sampler's structural rules. Returns a list of
/// human-readable violations (empty = all rules hold).
inline std::vector<std::string> audit_sampler_rules(const ComputationGraph& cg, const PartitionedSubgraph& sub,
                                                    const Fanout& fanout) {
  std::vector<std::string> bad;
  const auto L = cg.num_layers();
  if (L != fanout.hops()) bad.push_back("depth != fanout hops");
  // (d) root frontier = local train vertices
  for (auto t : cg.targets)
    if (t >= sub.num_local || sub.split[t] != Split::train) bad.push_back("target not local train");
  if (!cg.blocks.empty()) {
    std::vector<std::uint32_t> last_dst;
    for (const auto& d : cg.blocks.back().dst) last_dst.push_back(d.index);
    if (last_dst != cg.targets) bad.push_back("last block dst != targets");
  }
  for (std::uint32_t b = 0; b < L; ++b) {
    const Block& blk = cg.blocks[b];
    const std::uint32_t hop = L - b;  // hop distance of this block's sources
    for (std::uint32_t s = 0; s < blk.num_src(); ++s) {
      const auto& node = blk.src[s];
      if (node.remote != sub.is_remote(node.index)) bad.push_back("remote flag mismatch");
      if (node.global != sub.node_ids[node.index]) bad.push_back("global id mismatch");
      if (node.remote) {
        // (a) no remote at the outermost hop
        if (hop == L) bad.push_back("remote source at outermost hop");
        // (c) cache layer annotation
        const auto layer = blk.cache_layer(s);
        if (layer != b || layer < 1 || layer + 1 > L) bad.push_back("bad cache layer");
      }
    }
    // (b) remote vertices are never destinations
    for (const auto& d : blk.dst)
      if (sub.is_remote(d.index) || d.remote) bad.push_back("remote destination");
    // (e) fanout bound and that sampled sources are real neighbors
    for (std::uint32_t j = 0; j < blk.num_dst(); ++j) {
      const auto limit = fanout.at_hop(hop);
      if (blk.sampled_count(j) > limit) bad.push_back("fanout exceeded");
      const auto nbrs = sub.neighbors(blk.dst[j].index);
      std::set<std::uint32_t> nbr_set(nbrs.begin(), nbrs.end());
      bool saw_self = false;
      for (auto e = blk.agg_offsets[j]; e < blk.agg_offsets[j + 1]; ++e) {
        const auto idx = blk.src[blk.agg_src[e]].index;
        if (idx == blk.dst[j].index) {
          saw_self = true;
        } else if (!nbr_set.count(idx)) {
          bad.push_back("sampled source is not a neighbor");
        }
      }
      if (!saw_self) bad.push_back("missing self term");
    }
    // chaining: local sources of block b+1 are block b's destinations
    if (b + 1 < L) {
      const Block& next = cg.blocks[b + 1];
      std::vector<CgNode> locals(next.src.begin(), next.src.begin() + next.num_local_src);
      if (locals != blk.dst) bad.push_back("block chaining broken");
      for (std::uint32_t s = next.num_local_src; s < next.num_src(); ++s)
        if (!next.src[s].remote) bad.push_back("local source after remote section");
    }
  }
  return bad;
}

/// Central finite-difference gradient of the minibatch loss, perturbing one
/// scalar at a time. Independent of the analytic backward pass.
inline ModelParams<double> finite_difference_grads(const ModelParams<double>& params, const ComputationGraph& cg,
                                                   const PartitionedSubgraph& sub, const EmbeddingCache* cache,
                                                   double h) {
  std::vector<std::uint32_t> labels;
  for (auto t : cg.targets) labels.push_back(sub.labels[t]);
  auto loss_at = [&](const ModelParams<double>& p) {
    auto trace = minibatch_forward(p, cg, sub, cache);
    return softmax_cross_entropy<double>(trace.logits(), labels, nullptr);
  };
  ModelParams<double> grads = zeros_like(params);
  ModelParams<double> work = params;
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    auto probe = [&](double& slot, double& out) {
      const double orig = slot;
      slot = orig + h;
      const double up = loss_at(work);
      slot = orig - h;
      const double down = loss_at(work);
      slot = orig;
      out = (up - down) / (2.0 * h);
    };
    for (std::size_t i = 0; i < work.layers[l].weight.data.size(); ++i)
      probe(work.layers[l].weight.data[i], grads.layers[l].weight.data[i]);
    for (std::size_t i = 0; i < work.layers[l].bias.size(); ++i)
      probe(work.layers[l].bias[i], grads.layers[l].bias[i]);
  }
  return grads;
}

/// Smallest |pre-activation| over hidden layers. Central differences are
/// only meaningful when this exceeds the probe step by a wide margin.
inline double min_hidden_preactivation(const ModelParams<double>& params, const ComputationGraph& cg,
                                       const PartitionedSubgraph& sub, const EmbeddingCache* cache) {
  const auto trace = minibatch_forward(params, cg, sub, cache);
  double lo = std::numeric_limits<double>::infinity();
  for (std::size_t l = 0; l + 1 < trace.layers.size(); ++l)
    for (double x : trace.layers[l].pre_activation.data) lo = std::min(lo, std::abs(x));
  return lo;
}

inline double max_relative_error(const ModelParams<double>& a, const ModelParams<double>& b) {
  double worst = 0.0;
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    auto cmp = [&](const std::vector<double>& x, const std::vector<double>& y) {
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double denom = std::max({std::abs(x[i]), std::abs(y[i]), 1e-7});
        worst = std::max(worst, std::abs(x[i] - y[i]) / denom);
      }
    };
    cmp(a.layers[l].weight.data, b.layers[l].weight.data);
    cmp(a.layers[l].bias, b.layers[l].bias);
  }
  return worst;
}

/// Fills a cache with seeded random vectors for every remote vertex and each
/// layer 1..L-1.
inline EmbeddingCache random_remote_cache(const PartitionedSubgraph& sub, std::uint32_t dim, std::uint32_t num_layers,
                                          std::uint64_t seed) {
  EmbeddingCache cache(dim);
  Rng rng(seed);
  std::vector<float> v(dim);
  for (auto node : sub.remote_nodes())
    for (std::uint32_t l = 1; l < num_layers; ++l) {
      for (auto& x : v) x = static_cast<float>(std::abs(rng.normal()));
      cache.put(node, l, v);
    }
  return cache;
}

}  // namespace opes::testing
