#pragma once

#include <opes/graph.hpp>

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace opes {

class MissingEmbedding : public std::runtime_error {
 public:
  MissingEmbedding(NodeId node, std::uint32_t layer)
      : std::runtime_error("missing embedding for node " + std::to_string(node) + " layer " + std::to_string(layer)),
        node(node),
        layer(layer) {}
  NodeId node;
  std::uint32_t layer;
};

/// Client-side cache of pulled remote embeddings, keyed by (node, layer).
class EmbeddingCache {
 public:
  explicit EmbeddingCache(std::uint32_t dim = 0) : dim_(dim) {}

  std::uint32_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return index_.size(); }

  void clear() {
    index_.clear();
    values_.clear();
  }

  void put(NodeId node, std::uint32_t layer, std::span<const float> vec) {
    if (vec.size() != dim_) throw std::invalid_argument("embedding dimension mismatch");
    const auto key = make_key(node, layer);
    auto [it, inserted] = index_.try_emplace(key, values_.size());
    if (inserted) {
      values_.insert(values_.end(), vec.begin(), vec.end());
    } else {
      std::copy(vec.begin(), vec.end(), values_.begin() + static_cast<std::ptrdiff_t>(it->second));
    }
  }

  bool contains(NodeId node, std::uint32_t layer) const { return index_.contains(make_key(node, layer)); }

  std::span<const float> get(NodeId node, std::uint32_t layer) const {
    auto it = index_.find(make_key(node, layer));
    if (it == index_.end()) throw MissingEmbedding(node, layer);
    return {values_.data() + it->second, dim_};
  }

 private:
  // Layers fit in 8 bits on the wire; node ids in the remaining 56.
  static std::uint64_t make_key(NodeId node, std::uint32_t layer) { return (node << 8) | (layer & 0xffu); }

  std::uint32_t dim_;
  std::unordered_map<std::uint64_t, std::size_t> index_;
  std::vector<float> values_;
};

}  // namespace opes
