#pragma once

#include <opes/computation_graph.hpp>
#include <opes/partition.hpp>
#include <opes/rng.hpp>

#include <algorithm>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace opes {

class SamplerError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Retention limit meaning "keep every remote neighbor" (P-infinity).
inline constexpr std::uint32_t retain_all = std::numeric_limits<std::uint32_t>::max();

/// Caps every local vertex at `retain` remote neighbors, chosen uniformly at
/// random per vertex. Remote vertices left without edges leave the halo.
/// Local edges and the push set are untouched.
inline PartitionedSubgraph prune(const PartitionedSubgraph& sub, std::uint32_t retain, std::uint64_t seed) {
  if (retain == retain_all) return sub;

  const std::uint32_t n_local = sub.num_local;
  std::vector<std::vector<std::uint32_t>> kept(n_local);
  std::vector<std::uint32_t> candidates;
  for (std::uint32_t i = 0; i < n_local; ++i) {
    candidates.clear();
    for (auto t : sub.neighbors(i))
      if (sub.is_remote(t)) candidates.push_back(t);
    if (candidates.size() > retain) {
      Rng rng(derive_seed(seed, {0x9e11, sub.client_id, sub.node_ids[i]}));
      rng.sample_front(std::span<std::uint32_t>(candidates), retain);
      candidates.resize(retain);
      std::sort(candidates.begin(), candidates.end());
    }
    kept[i] = candidates;
  }

  std::vector<std::vector<std::uint32_t>> remote_rows(sub.num_remote());
  for (std::uint32_t i = 0; i < n_local; ++i)
    for (auto r : kept[i]) remote_rows[r - n_local].push_back(i);

  // Surviving remotes keep their relative (ascending global) order.
  std::vector<std::uint32_t> remap(sub.size(), std::numeric_limits<std::uint32_t>::max());
  PartitionedSubgraph out;
  out.client_id = sub.client_id;
  out.num_clients = sub.num_clients;
  out.feature_dim = sub.feature_dim;
  out.num_classes = sub.num_classes;
  out.num_local = n_local;
  out.features = sub.features;
  out.labels = sub.labels;
  out.split = sub.split;
  out.push_nodes = sub.push_nodes;
  out.node_ids.assign(sub.node_ids.begin(), sub.node_ids.begin() + n_local);
  for (std::uint32_t i = 0; i < n_local; ++i) remap[i] = i;
  for (std::uint32_t r = 0; r < sub.num_remote(); ++r) {
    if (remote_rows[r].empty()) continue;
    remap[n_local + r] = static_cast<std::uint32_t>(out.node_ids.size());
    out.node_ids.push_back(sub.node_ids[n_local + r]);
  }
  out.pull_nodes.assign(out.node_ids.begin() + n_local, out.node_ids.end());

  out.offsets.assign(1, 0);
  for (std::uint32_t i = 0; i < n_local; ++i) {
    auto kept_it = kept[i].begin();
    for (auto t : sub.neighbors(i)) {
      if (!sub.is_remote(t)) {
        out.targets.push_back(t);
      } else if (kept_it != kept[i].end() && *kept_it == t) {
        out.targets.push_back(remap[t]);
        ++kept_it;
      }
    }
    out.offsets.push_back(out.targets.size());
  }
  for (std::uint32_t r = 0; r < sub.num_remote(); ++r) {
    if (remote_rows[r].empty()) continue;
    out.targets.insert(out.targets.end(), remote_rows[r].begin(), remote_rows[r].end());
    out.offsets.push_back(out.targets.size());
  }
  return out;
}

/// Remote vertices whose embeddings a client needs for a round.
inline std::vector<NodeId> required_pull_set(const PartitionedSubgraph& sub) { return sub.pull_nodes; }

/// Boundary-aware neighborhood sampler. Targets must be distinct local train
/// vertices. Remote vertices are leaves (never expanded) and are never
/// sampled at the outermost hop, where only features can be used.
inline ComputationGraph sample_minibatch(const PartitionedSubgraph& sub, std::span<const std::uint32_t> targets,
                                         const Fanout& fanout, std::uint64_t seed) {
  if (targets.empty()) throw SamplerError("empty minibatch");
  const std::uint32_t hops = fanout.hops();
  if (hops == 0) throw SamplerError("fanout must cover at least one hop");
  for (auto f : fanout.per_hop)
    if (f == 0) throw SamplerError("fanout entries must be >= 1");

  std::vector<std::uint32_t> position(sub.size(), std::numeric_limits<std::uint32_t>::max());
  ComputationGraph cg;
  cg.blocks.resize(hops);
  cg.targets.assign(targets.begin(), targets.end());

  std::vector<CgNode> frontier;
  for (auto t : targets) {
    if (t >= sub.num_local) throw SamplerError("target is not a local vertex: " + std::to_string(t));
    if (sub.split[t] != Split::train) throw SamplerError("target is not a train vertex: " + std::to_string(t));
    if (position[t] != std::numeric_limits<std::uint32_t>::max()) throw SamplerError("duplicate target");
    position[t] = 0;
    frontier.push_back({sub.node_ids[t], t, false});
  }
  for (auto t : targets) position[t] = std::numeric_limits<std::uint32_t>::max();

  Rng rng(derive_seed(seed, {0x5a3b}));
  std::vector<std::uint32_t> candidates;
  std::vector<std::vector<std::uint32_t>> sampled;
  for (std::uint32_t hop = 1; hop <= hops; ++hop) {
    Block& block = cg.blocks[hops - hop];
    block.layer = hops - hop + 1;
    block.dst = std::move(frontier);
    const bool outermost = hop == hops;
    const std::uint32_t limit = fanout.at_hop(hop);

    sampled.assign(block.dst.size(), {});
    for (std::size_t j = 0; j < block.dst.size(); ++j) {
      candidates.clear();
      for (auto t : sub.neighbors(block.dst[j].index))
        if (!(outermost && sub.is_remote(t))) candidates.push_back(t);
      if (candidates.size() > limit) {
        rng.sample_front(std::span<std::uint32_t>(candidates), limit);
        candidates.resize(limit);
      }
      sampled[j] = candidates;
    }

    std::vector<std::uint32_t> members;
    for (const auto& d : block.dst) members.push_back(d.index);
    for (const auto& s : sampled) members.insert(members.end(), s.begin(), s.end());
    std::sort(members.begin(), members.end());  // locals precede remotes; each ascending global id
    members.erase(std::unique(members.begin(), members.end()), members.end());

    block.src.clear();
    block.num_local_src = 0;
    for (auto m : members) {
      position[m] = static_cast<std::uint32_t>(block.src.size());
      block.src.push_back({sub.node_ids[m], m, sub.is_remote(m)});
      if (!sub.is_remote(m)) ++block.num_local_src;
    }

    block.agg_offsets.assign(1, 0);
    block.dst_self.clear();
    block.agg_src.clear();
    std::vector<std::uint32_t> agg;
    for (std::size_t j = 0; j < block.dst.size(); ++j) {
      agg.clear();
      agg.push_back(position[block.dst[j].index]);
      for (auto s : sampled[j]) agg.push_back(position[s]);
      std::sort(agg.begin(), agg.end(),
                [&](std::uint32_t a, std::uint32_t b) { return block.src[a].global < block.src[b].global; });
      block.dst_self.push_back(position[block.dst[j].index]);
      block.agg_src.insert(block.agg_src.end(), agg.begin(), agg.end());
      block.agg_offsets.push_back(block.agg_src.size());
    }

    for (auto m : members) position[m] = std::numeric_limits<std::uint32_t>::max();
    frontier.assign(block.src.begin(), block.src.begin() + block.num_local_src);
  }
  return cg;
}

}  // namespace opes
