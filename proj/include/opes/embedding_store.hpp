#pragma once

#include <opes/embedding_cache.hpp>
#include <opes/partition.hpp>
#include <opes/transport.hpp>
#include <opes/wire.hpp>

#include <atomic>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <unordered_map>
#include <vector>

namespace opes {

struct EmbeddingKey {
  NodeId node = 0;
  std::uint32_t layer = 0;
  bool operator==(const EmbeddingKey&) const = default;
};

struct EmbeddingRecord {
  EmbeddingKey key;
  std::uint32_t version = 0;
  std::vector<float> vector;
  bool operator==(const EmbeddingRecord&) const = default;
};

struct StoreStats {
  std::uint64_t num_keys = 0;
  std::uint64_t bytes_resident = 0;
  bool operator==(const StoreStats&) const = default;
};

/// Counters the service bumps per request; read by tests and metrics.
struct StoreCounters {
  std::atomic<std::uint64_t> request_frames{0};
  std::atomic<std::uint64_t> get_frames{0};
  std::atomic<std::uint64_t> set_frames{0};
  std::atomic<std::uint64_t> pulled_keys{0};
  std::atomic<std::uint64_t> pushed_keys{0};
};

/// In-memory (node, layer) -> vector table. Layers run 1..max_layer; layer 0
/// (raw features) is rejected. Each batch applies atomically.
class EmbeddingStore {
 public:
  EmbeddingStore(std::uint32_t dim, std::uint32_t max_layer) : dim_(dim), max_layer_(max_layer) {}

  std::uint32_t dim() const noexcept { return dim_; }
  std::uint32_t max_layer() const noexcept { return max_layer_; }

  void check_key(const EmbeddingKey& k) const {
    if (k.layer == 0 || k.layer > max_layer_)
      throw wire::WireError(wire::ErrorCode::layer_out_of_range,
                            "layer " + std::to_string(k.layer) + " outside 1.." + std::to_string(max_layer_));
  }

  std::size_t batch_set(std::span<const EmbeddingRecord> records) {
    for (const auto& r : records) {
      check_key(r.key);
      if (r.vector.size() != dim_) throw wire::WireError(wire::ErrorCode::dim_mismatch, "embedding dimension mismatch");
    }
    std::unique_lock lock(mu_);
    for (const auto& r : records) {
      auto [it, inserted] = slots_.try_emplace(pack(r.key), values_.size() / dim_);
      const auto slot = it->second;
      if (inserted) {
        values_.resize(values_.size() + dim_);
        versions_.push_back(0);
      }
      std::copy(r.vector.begin(), r.vector.end(), values_.begin() + static_cast<std::ptrdiff_t>(slot * dim_));
      versions_[slot] = std::max(versions_[slot], r.version);
    }
    return records.size();
  }

  /// Order-aligned lookup; absent keys come back as nullopt.
  std::vector<std::optional<EmbeddingRecord>> batch_get(std::span<const EmbeddingKey> keys) const {
    for (const auto& k : keys) check_key(k);
    std::vector<std::optional<EmbeddingRecord>> out(keys.size());
    std::shared_lock lock(mu_);
    for (std::size_t i = 0; i < keys.size(); ++i) {
      auto it = slots_.find(pack(keys[i]));
      if (it == slots_.end()) continue;
      const auto* v = values_.data() + it->second * dim_;
      out[i] = EmbeddingRecord{keys[i], versions_[it->second], std::vector<float>(v, v + dim_)};
    }
    return out;
  }

  StoreStats stats() const {
    std::shared_lock lock(mu_);
    return {slots_.size(), values_.size() * sizeof(float) + versions_.size() * sizeof(std::uint32_t)};
  }

 private:
  static std::uint64_t pack(const EmbeddingKey& k) { return (k.node << 8) | k.layer; }

  std::uint32_t dim_;
  std::uint32_t max_layer_;
  mutable std::shared_mutex mu_;
  std::unordered_map<std::uint64_t, std::size_t> slots_;
  std::vector<float> values_;
  std::vector<std::uint32_t> versions_;
};

/// Wire front end of the embedding server: store plus cross-edge manifest.
class EmbeddingService final : public Service {
 public:
  EmbeddingService(std::uint32_t dim, std::uint32_t max_layer, CrossEdgeManifest manifest)
      : store_(dim, max_layer), manifest_(std::move(manifest)) {}

  EmbeddingStore& store() noexcept { return store_; }
  const StoreCounters& counters() const noexcept { return counters_; }

  wire::Frame handle(const wire::Frame& req, Session& session) override {
    counters_.request_frames.fetch_add(1);
    wire::Reader r(req.payload);
    wire::Writer w;
    switch (req.opcode) {
      case wire::hello: {
        const auto id = r.u32();
        r.expect_end();
        if (id >= manifest_.per_client.size())
          throw wire::WireError(wire::ErrorCode::unknown_client, "unknown client " + std::to_string(id));
        session.client_id = id;
        w.u32(store_.dim()).u8(static_cast<std::uint8_t>(store_.max_layer()));
        break;
      }
      case wire::get_neighbors: {
        r.expect_end();
        if (!session.client_id) throw wire::WireError(wire::ErrorCode::not_registered, "HELLO required");
        const auto& slice = manifest_.per_client[*session.client_id];
        w.u32(static_cast<std::uint32_t>(slice.size()));
        for (const auto& e : slice) w.u64(e.local).u64(e.remote).u32(e.owner);
        break;
      }
      case wire::batch_get: {
        const auto count = r.u32();
        r.need(static_cast<std::size_t>(count) * 9);
        std::vector<EmbeddingKey> keys(count);
        for (auto& k : keys) {
          k.node = r.u64();
          k.layer = r.u8();
        }
        r.expect_end();
        const auto found = store_.batch_get(keys);
        counters_.get_frames.fetch_add(1);
        counters_.pulled_keys.fetch_add(count);
        w.reserve(6 + found.size() * (5 + 4 * store_.dim()));
        w.u32(count).u16(static_cast<std::uint16_t>(store_.dim()));
        for (const auto& rec : found) {
          w.u8(rec ? 1 : 0);
          if (rec) w.u32(rec->version).f32s(rec->vector);
        }
        break;
      }
      case wire::batch_set: {
        const auto count = r.u32();
        const auto dim = r.u16();
        if (dim != store_.dim())
          throw wire::WireError(wire::ErrorCode::dim_mismatch, "frame dim " + std::to_string(dim) + " != store dim " +
                                                                   std::to_string(store_.dim()));
        r.need(static_cast<std::size_t>(count) * (13 + 4 * std::size_t{dim}));
        std::vector<EmbeddingRecord> records(count);
        for (auto& rec : records) {
          rec.key.node = r.u64();
          rec.key.layer = r.u8();
          rec.version = r.u32();
          rec.vector.resize(dim);
          r.f32s(rec.vector);
        }
        r.expect_end();
        store_.batch_set(records);
        counters_.set_frames.fetch_add(1);
        counters_.pushed_keys.fetch_add(count);
        w.u32(count);
        break;
      }
      case wire::stats: {
        r.expect_end();
        const auto s = store_.stats();
        w.u64(s.num_keys).u64(s.bytes_resident);
        break;
      }
      default:
        throw wire::WireError(wire::ErrorCode::bad_opcode, "unknown opcode " + std::to_string(req.opcode));
    }
    return {wire::response_to(req.opcode), w.take()};
  }

 private:
  EmbeddingStore store_;
  CrossEdgeManifest manifest_;
  StoreCounters counters_;
};

/// Client connector. Large batches are split into windows that are all sent
/// before any response is read.
class EmbeddingClient {
 public:
  static constexpr std::size_t default_window = 512;

  explicit EmbeddingClient(Channel& channel, std::size_t window = default_window)
      : channel_(channel), window_(window == 0 ? default_window : window) {}

  /// Registers the client; returns the store's vector dimension.
  std::uint32_t hello(std::uint32_t client_id) {
    wire::Writer w;
    w.u32(client_id);
    const auto resp = channel_.call({wire::hello, w.take()});
    wire::expect_response(resp, wire::hello);
    wire::Reader r(resp.payload);
    dim_ = r.u32();
    return dim_;
  }

  std::vector<CrossEdge> get_remote_neighbors() {
    const auto resp = channel_.call({wire::get_neighbors, {}});
    wire::expect_response(resp, wire::get_neighbors);
    wire::Reader r(resp.payload);
    std::vector<CrossEdge> out(r.u32());
    for (auto& e : out) {
      e.local = r.u64();
      e.remote = r.u64();
      e.owner = r.u32();
    }
    r.expect_end();
    return out;
  }

  /// Throws MissingEmbedding for the first key the store does not hold.
  std::vector<EmbeddingRecord> batch_get(std::span<const EmbeddingKey> keys) {
    std::vector<wire::Frame> requests;
    for (std::size_t start = 0; start < keys.size(); start += window_) {
      const auto n = std::min(window_, keys.size() - start);
      wire::Writer w;
      w.reserve(4 + n * 9);
      w.u32(static_cast<std::uint32_t>(n));
      for (std::size_t i = start; i < start + n; ++i) w.u64(keys[i].node).u8(static_cast<std::uint8_t>(keys[i].layer));
      requests.push_back({wire::batch_get, w.take()});
    }
    const auto responses = pipeline(channel_, requests);
    std::vector<EmbeddingRecord> out;
    out.reserve(keys.size());
    for (const auto& resp : responses) {
      wire::expect_response(resp, wire::batch_get);
      wire::Reader r(resp.payload);
      const auto count = r.u32();
      const auto dim = r.u16();
      for (std::uint32_t i = 0; i < count; ++i) {
        const auto& key = keys[out.size()];
        if (r.u8() == 0) throw MissingEmbedding(key.node, key.layer);
        EmbeddingRecord rec{key, r.u32(), std::vector<float>(dim)};
        r.f32s(rec.vector);
        out.push_back(std::move(rec));
      }
      r.expect_end();
    }
    return out;
  }

  /// Pulls every (node, layer) for layers 1..max_layer into `cache`; returns
  /// the number of keys fetched.
  std::size_t pull_into(EmbeddingCache& cache, std::span<const NodeId> nodes, std::uint32_t max_layer) {
    std::vector<EmbeddingKey> keys;
    keys.reserve(nodes.size() * max_layer);
    for (auto n : nodes)
      for (std::uint32_t l = 1; l <= max_layer; ++l) keys.push_back({n, l});
    for (const auto& rec : batch_get(keys)) cache.put(rec.key.node, rec.key.layer, rec.vector);
    return keys.size();
  }

  std::size_t batch_set(std::span<const EmbeddingRecord> records) {
    std::vector<wire::Frame> requests;
    for (std::size_t start = 0; start < records.size(); start += window_) {
      const auto n = std::min(window_, records.size() - start);
      const auto dim = records[start].vector.size();
      wire::Writer w;
      w.reserve(6 + n * (13 + 4 * dim));
      w.u32(static_cast<std::uint32_t>(n)).u16(static_cast<std::uint16_t>(dim));
      for (std::size_t i = start; i < start + n; ++i) {
        const auto& rec = records[i];
        if (rec.vector.size() != dim)
          throw wire::WireError(wire::ErrorCode::dim_mismatch, "mixed vector dimensions in one batch");
        w.u64(rec.key.node).u8(static_cast<std::uint8_t>(rec.key.layer)).u32(rec.version).f32s(rec.vector);
      }
      requests.push_back({wire::batch_set, w.take()});
    }
    std::size_t acked = 0;
    for (const auto& resp : pipeline(channel_, requests)) {
      wire::expect_response(resp, wire::batch_set);
      acked += wire::Reader(resp.payload).u32();
    }
    return acked;
  }

  StoreStats stats() {
    const auto resp = channel_.call({wire::stats, {}});
    wire::expect_response(resp, wire::stats);
    wire::Reader r(resp.payload);
    StoreStats s;
    s.num_keys = r.u64();
    s.bytes_resident = r.u64();
    return s;
  }

 private:
  Channel& channel_;
  std::size_t window_;
  std::uint32_t dim_ = 0;
};

}  // namespace opes
