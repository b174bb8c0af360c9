#pragma once

#include <opes/graph.hpp>

#include <cstdint>
#include <limits>
#include <vector>

namespace opes {

/// A vertex as it appears in a sampled block. `index` is the vertex's
/// position in the client's subgraph.
struct CgNode {
  NodeId global = 0;
  std::uint32_t index = 0;
  bool remote = false;
  bool operator==(const CgNode&) const = default;
};

/// Bipartite frontier consumed by one GNN layer. Sources are ordered local
/// first then remote, each by ascending global id. The destinations of block
/// b are exactly the local sources of block b+1, in the same order.
struct Block {
  std::uint32_t layer = 1;                // 1-based GNN layer this block feeds
  std::vector<CgNode> dst;
  std::vector<CgNode> src;
  std::uint32_t num_local_src = 0;
  std::vector<std::uint32_t> dst_self;    // src position of each destination
  std::vector<std::uint64_t> agg_offsets; // num_dst + 1
  std::vector<std::uint32_t> agg_src;     // src positions incl. self, ascending global id

  std::uint32_t num_dst() const noexcept { return static_cast<std::uint32_t>(dst.size()); }
  std::uint32_t num_src() const noexcept { return static_cast<std::uint32_t>(src.size()); }

  /// Embedding layer a remote source must be read from (h^{layer-1}); 0 for
  /// local sources.
  std::uint32_t cache_layer(std::uint32_t src_pos) const noexcept {
    return src[src_pos].remote ? layer - 1 : 0;
  }

  /// Sampled neighbor count of destination j, excluding its self term.
  std::uint64_t sampled_count(std::uint32_t j) const noexcept { return agg_offsets[j + 1] - agg_offsets[j] - 1; }

  bool operator==(const Block&) const = default;
};

/// blocks[0] feeds layer 1 (outermost hop); blocks.back() produces the
/// targets' logits.
struct ComputationGraph {
  std::vector<Block> blocks;
  std::vector<std::uint32_t> targets;  // subgraph indices

  std::uint32_t num_layers() const noexcept { return static_cast<std::uint32_t>(blocks.size()); }
  bool operator==(const ComputationGraph&) const = default;
};

/// Per-hop neighbor limits; fanout[0] applies to hop 1 (nearest the targets).
struct Fanout {
  static constexpr std::uint32_t full = std::numeric_limits<std::uint32_t>::max();
  std::vector<std::uint32_t> per_hop;

  static Fanout all(std::uint32_t hops) { return Fanout{std::vector<std::uint32_t>(hops, full)}; }
  std::uint32_t hops() const noexcept { return static_cast<std::uint32_t>(per_hop.size()); }
  std::uint32_t at_hop(std::uint32_t hop) const { return per_hop.at(hop - 1); }
};

}  // namespace opes
