#include "support/fixtures.hpp"

#include <opes/embedding_store.hpp>
#include <opes/transport.hpp>

#include <gtest/gtest.h>

#include <set>

namespace opes {
namespace {

using testing::Figure3;

std::vector<float> iota_vec(std::size_t n, float start) {
  std::vector<float> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = start + static_cast<float>(i);
  return v;
}

TEST(WireTest, FrameRoundTripAndLengthPrefix) {
  const wire::Frame f{wire::batch_get, {1, 2, 3, 4, 5, 6, 7}};
  const auto bytes = wire::encode(f);
  ASSERT_EQ(bytes.size(), 12u);
  EXPECT_EQ(bytes[0], 7u);  // payload length excludes the opcode byte
  EXPECT_EQ(bytes[4], wire::batch_get);
  EXPECT_EQ(wire::decode(bytes), f);
  auto short_bytes = bytes;
  short_bytes.pop_back();
  EXPECT_THROW(wire::decode(short_bytes), wire::WireError);
  EXPECT_THROW(wire::decode(std::vector<std::uint8_t>{1, 0}), wire::WireError);
}

TEST(WireTest, ReaderRejectsTruncation) {
  wire::Writer w;
  w.u32(0xdeadbeef).f32(1.5f);
  const auto buf = w.take();
  wire::Reader r(buf);
  EXPECT_EQ(r.u32(), 0xdeadbeefu);
  EXPECT_EQ(r.f32(), 1.5f);
  EXPECT_THROW(r.u8(), wire::WireError);
}

TEST(StoreTest, SetGetIsBitwise) {
  EmbeddingStore store(4, 2);
  std::vector<float> v{1.0f, -0.0f, std::numeric_limits<float>::denorm_min(), 3.25e-7f};
  store.batch_set(std::vector<EmbeddingRecord>{{{7, 1}, 0, v}});
  const auto got = store.batch_get(std::vector<EmbeddingKey>{{7, 1}});
  ASSERT_TRUE(got[0]);
  EXPECT_EQ(std::memcmp(got[0]->vector.data(), v.data(), v.size() * 4), 0);
}

TEST(StoreTest, OverwriteKeepsKeyCount) {
  EmbeddingStore store(3, 2);
  store.batch_set(std::vector<EmbeddingRecord>{{{7, 1}, 0, iota_vec(3, 0)}, {{7, 2}, 0, iota_vec(3, 5)}});
  store.batch_set(std::vector<EmbeddingRecord>{{{7, 1}, 1, iota_vec(3, 9)}});
  EXPECT_EQ(store.stats().num_keys, 2u);
  const auto got = store.batch_get(std::vector<EmbeddingKey>{{7, 1}, {7, 2}, {8, 1}});
  EXPECT_EQ(got[0]->vector, iota_vec(3, 9));
  EXPECT_EQ(got[0]->version, 1u);
  EXPECT_EQ(got[1]->vector, iota_vec(3, 5));
  EXPECT_FALSE(got[2].has_value());
}

TEST(StoreTest, VersionNeverDecreases) {
  EmbeddingStore store(1, 1);
  store.batch_set(std::vector<EmbeddingRecord>{{{1, 1}, 5, {1.0f}}});
  store.batch_set(std::vector<EmbeddingRecord>{{{1, 1}, 3, {2.0f}}});
  const auto got = store.batch_get(std::vector<EmbeddingKey>{{1, 1}});
  EXPECT_EQ(got[0]->version, 5u);
  EXPECT_EQ(got[0]->vector[0], 2.0f);
}

TEST(StoreTest, RejectsFeaturesAndBadShapesWithoutPartialWrites) {
  EmbeddingStore store(2, 2);
  EXPECT_EQ(store.stats(), (StoreStats{0, 0}));
  const std::vector<EmbeddingRecord> with_layer0{{{1, 1}, 0, {1, 2}}, {{2, 0}, 0, {1, 2}}};
  try {
    store.batch_set(with_layer0);
    FAIL() << "layer 0 accepted";
  } catch (const wire::WireError& e) {
    EXPECT_EQ(e.code, wire::ErrorCode::layer_out_of_range);
  }
  const std::vector<EmbeddingRecord> bad_dim{{{1, 1}, 0, {1, 2}}, {{2, 1}, 0, {1, 2, 3}}};
  EXPECT_THROW(store.batch_set(bad_dim), wire::WireError);
  EXPECT_THROW(store.batch_set(std::vector<EmbeddingRecord>{{{1, 3}, 0, {1, 2}}}), wire::WireError);
  EXPECT_EQ(store.stats().num_keys, 0u);
}

struct Fig3Service {
  Figure3 fig = testing::figure3_topology();
  SubgraphSet set = build_subgraphs(fig.graph, fig.parts);
  EmbeddingService service{4, 2, set.manifest};
};

TEST(EmbeddingServiceTest, RemoteNeighborsFromManifest) {
  Fig3Service f;
  InprocChannel ch(f.service);
  EmbeddingClient client(ch);
  EXPECT_EQ(client.hello(0), 4u);
  std::set<NodeId> remotes;
  for (const auto& e : client.get_remote_neighbors()) {
    remotes.insert(e.remote);
    EXPECT_EQ(f.fig.parts.part_of[e.remote], e.owner);
    EXPECT_EQ(f.fig.parts.part_of[e.local], 0u);
  }
  EXPECT_EQ(remotes, (std::set<NodeId>{Figure3::E, Figure3::F}));
}

TEST(EmbeddingServiceTest, ZeroCutAndUnknownClient) {
  Graph g = make_graph(4, {{0, 1}, {2, 3}});
  testing::decorate(g, 2, 2, 1);
  const auto set = build_subgraphs(g, PartitionAssignment{2, {0, 0, 1, 1}});
  EmbeddingService svc(2, 1, set.manifest);
  InprocChannel ch(svc);
  EmbeddingClient client(ch);
  EXPECT_THROW(client.get_remote_neighbors(), wire::WireError);  // HELLO first
  client.hello(1);
  EXPECT_TRUE(client.get_remote_neighbors().empty());
  InprocChannel other(svc);
  try {
    EmbeddingClient(other).hello(2);
    FAIL() << "unknown client accepted";
  } catch (const wire::WireError& e) {
    EXPECT_EQ(e.code, wire::ErrorCode::unknown_client);
  }
}

TEST(EmbeddingServiceTest, MissingKeyIsAnError) {
  Fig3Service f;
  InprocChannel ch(f.service);
  EmbeddingClient client(ch);
  client.hello(0);
  client.batch_set(std::vector<EmbeddingRecord>{{{Figure3::A, 1}, 0, iota_vec(4, 0)}});
  const std::vector<EmbeddingKey> keys{{Figure3::A, 1}, {Figure3::B, 1}};
  try {
    client.batch_get(keys);
    FAIL() << "missing key not reported";
  } catch (const MissingEmbedding& e) {
    EXPECT_EQ(e.node, Figure3::B);
    EXPECT_EQ(e.layer, 1u);
  }
}

TEST(EmbeddingServiceTest, PipelinedGetUsesOneFramePerWindow) {
  Fig3Service f;
  EmbeddingService svc(8, 2, f.set.manifest);
  InprocChannel ch(svc);
  EmbeddingClient client(ch);
  client.hello(0);
  std::vector<EmbeddingRecord> recs;
  for (NodeId n = 0; n < 5000; ++n)
    for (std::uint32_t l = 1; l <= 2; ++l) recs.push_back({{n, l}, 0, iota_vec(8, static_cast<float>(n))});
  EXPECT_EQ(client.batch_set(recs), 10000u);
  std::vector<EmbeddingKey> keys;
  for (const auto& r : recs) keys.push_back(r.key);
  const auto before = svc.counters().request_frames.load();
  const auto got = client.batch_get(keys);
  const auto windows = (keys.size() + EmbeddingClient::default_window - 1) / EmbeddingClient::default_window;
  EXPECT_EQ(svc.counters().request_frames - before, windows);
  EXPECT_EQ(windows, 20u);
  for (std::size_t i = 0; i < got.size(); ++i) ASSERT_EQ(got[i], recs[i]);
}

TEST(EmbeddingServiceTest, ErrorFramesForBadInput) {
  Fig3Service f;
  Session session;
  auto code_of = [&](const wire::Frame& req) {
    const auto resp = dispatch(f.service, req, session);
    EXPECT_EQ(resp.opcode, wire::error);
    return static_cast<wire::ErrorCode>(wire::Reader(resp.payload).u16());
  };
  EXPECT_EQ(code_of({0x42, {}}), wire::ErrorCode::bad_opcode);
  EXPECT_EQ(code_of({wire::batch_get, {5, 0, 0, 0, 1}}), wire::ErrorCode::malformed);
  wire::Writer w;
  w.u32(1).u16(3).u64(0).u8(1).u32(0).f32(1).f32(2).f32(3);
  EXPECT_EQ(code_of({wire::batch_set, w.take()}), wire::ErrorCode::dim_mismatch);
  wire::Writer z;
  z.u32(1).u16(4).u64(0).u8(0).u32(0).f32s(iota_vec(4, 0));
  EXPECT_EQ(code_of({wire::batch_set, z.take()}), wire::ErrorCode::layer_out_of_range);
  EXPECT_EQ(f.service.store().stats().num_keys, 0u);
}

TEST(TcpTransportTest, RoundTripAndConcurrentClients) {
  Fig3Service f;
  TcpServer server(f.service);
  std::vector<std::thread> threads;
  std::atomic<int> failures{0};
  for (std::uint32_t c = 0; c < 3; ++c) {
    threads.emplace_back([&, c] {
      try {
        TcpChannel ch("127.0.0.1", server.port());
        EmbeddingClient client(ch, 16);
        client.hello(c);
        std::vector<EmbeddingRecord> recs;
        for (NodeId n = 0; n < 100; ++n) recs.push_back({{1000 * c + n, 1}, c, iota_vec(4, static_cast<float>(n))});
        client.batch_set(recs);
        std::vector<EmbeddingKey> keys;
        for (const auto& r : recs) keys.push_back(r.key);
        if (client.batch_get(keys) != recs) ++failures;
      } catch (...) {
        ++failures;
      }
    });
  }
  for (auto& t : threads) t.join();
  EXPECT_EQ(failures, 0);
  EXPECT_EQ(f.service.store().stats().num_keys, 300u);
}

TEST(TcpTransportTest, OversizedLengthGetsErrorAndServerSurvives) {
  Fig3Service f;
  TcpServer server(f.service);
  {
    TcpChannel ch("127.0.0.1", server.port());
    const std::vector<std::uint8_t> header{0xff, 0xff, 0xff, 0xff, wire::batch_get};
    ch.send_raw(header);
    const auto resp = ch.receive();
    EXPECT_EQ(resp.opcode, wire::error);
    EXPECT_EQ(static_cast<wire::ErrorCode>(wire::Reader(resp.payload).u16()), wire::ErrorCode::frame_too_large);
  }
  {
    TcpChannel ch("127.0.0.1", server.port());
    const std::vector<std::uint8_t> partial{10, 0, 0, 0, wire::stats, 1, 2};
    ch.send_raw(partial);
    ch.shutdown_write();
  }
  TcpChannel ch("127.0.0.1", server.port());
  EXPECT_EQ(EmbeddingClient(ch).stats().num_keys, 0u);
}

}  // namespace
}  // namespace opes
