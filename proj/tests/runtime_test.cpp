#include "support/fixtures.hpp"

#include <opes/metrics.hpp>
#include <opes/runtime.hpp>

#include <gtest/gtest.h>

#include <set>

namespace opes {
namespace {

using testing::Figure3;

ClientReport scalar_report(float value, std::uint64_t samples) {
  ClientReport r;
  r.params.layers.push_back({Matrix<float>(1, 1), std::vector<float>(1, 0.0f)});
  r.params.layers[0].weight(0, 0) = value;
  r.num_train_samples = samples;
  return r;
}

TEST(FedAvgTest, WeightedMean) {
  const std::vector<ClientReport> two{scalar_report(1.0f, 1), scalar_report(3.0f, 3)};
  EXPECT_EQ(fedavg(two).layers[0].weight(0, 0), 2.5f);
}

TEST(FedAvgTest, SingleAndIdenticalInputsAreFixedPoints) {
  ClientReport r;
  r.params = init_params<float>(model_dims(5, 8, 3, 3), 4);
  r.num_train_samples = 17;
  EXPECT_EQ(fedavg(std::vector<ClientReport>{r}), r.params);
  std::vector<ClientReport> same(4, r);
  for (std::size_t i = 0; i < same.size(); ++i) same[i].num_train_samples = 10 + 7 * i;
  EXPECT_EQ(fedavg(same), r.params);
}

TEST(FedAvgTest, Errors) {
  EXPECT_THROW(fedavg(std::vector<ClientReport>{}), ShapeError);
  EXPECT_THROW(fedavg(std::vector<ClientReport>{scalar_report(1, 0), scalar_report(2, 0)}), ShapeError);
  ClientReport wide;
  wide.params = init_params<float>(model_dims(2, 2, 2, 2), 1);
  wide.num_train_samples = 1;
  EXPECT_THROW(fedavg(std::vector<ClientReport>{scalar_report(1, 1), wide}), ShapeError);
}

TEST(PlanTest, ModeRules) {
  TrainingPlan p;
  p.mode = Mode::vanilla;
  p.retain = 4;
  p.overlap = true;
  auto r = resolve(p);
  EXPECT_FALSE(r.use_embeddings);
  EXPECT_EQ(r.plan.retain, 0u);
  EXPECT_FALSE(r.plan.overlap);

  p.mode = Mode::embc;
  r = resolve(p);
  EXPECT_TRUE(r.use_embeddings);
  EXPECT_EQ(r.plan.retain, retain_all);
  EXPECT_FALSE(r.plan.overlap);

  p.mode = Mode::opes;
  p.epochs = 1;
  r = resolve(p);
  EXPECT_FALSE(r.plan.overlap);
  ASSERT_EQ(r.warnings.size(), 1u);

  p.fanout = {10, 10};
  EXPECT_THROW(resolve(p), std::invalid_argument);
}

TEST(EpochTest, BatchesCoverTrainSetExactlyOnce) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    std::vector<std::uint32_t> train(1 + rng.below(300));
    std::iota(train.begin(), train.end(), 5u);
    const auto batch = 1 + static_cast<std::uint32_t>(rng.below(70));
    const auto batches = epoch_batches(train, batch, seed);
    std::multiset<std::uint32_t> seen;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      if (b + 1 < batches.size()) {
        EXPECT_EQ(batches[b].size(), batch);
      }
      EXPECT_FALSE(batches[b].empty());
      seen.insert(batches[b].begin(), batches[b].end());
    }
    EXPECT_EQ(seen, std::multiset<std::uint32_t>(train.begin(), train.end()));
  }
}

TEST(PretrainTest, PushRecordsForFigure3) {
  const Figure3 f = testing::figure3_topology();
  const auto set = build_subgraphs(f.graph, f.parts);
  const auto params = init_params<float>(model_dims(4, 3, 2, 2), 1);
  const auto recs = push_records(params, set.subgraphs[0], 0);
  std::set<NodeId> nodes;
  for (const auto& r : recs) {
    nodes.insert(r.key.node);
    EXPECT_EQ(r.key.layer, 1u);
    EXPECT_EQ(r.version, 0u);
  }
  EXPECT_EQ(nodes, (std::set<NodeId>{Figure3::A, Figure3::B}));
  std::size_t total = 0;
  for (const auto& sub : set.subgraphs) total += push_records(params, sub, 0).size();
  std::size_t push_total = 0;
  for (const auto& sub : set.subgraphs) push_total += sub.push_nodes.size();
  EXPECT_EQ(total, push_total);
}

TrainingPlan small_plan(Mode mode, std::uint32_t rounds, std::uint64_t seed = 3) {
  TrainingPlan p;
  p.mode = mode;
  p.layers = 2;
  p.hidden = 8;
  p.fanout = {5, 5};
  p.epochs = 2;
  p.batch_size = 16;
  p.rounds = rounds;
  p.seed = seed;
  return p;
}

Graph small_graph(std::uint64_t seed = 3) { return synth_graph(SbmSpec{3, 40, 0.15, 0.03, 6, 0, seed}); }

std::vector<MetricsRow> without_timings(std::vector<MetricsRow> rows) {
  for (auto& r : rows) {
    r.timings = {};
    r.wall_clock_s = 0;
  }
  return rows;
}

TEST(RuntimeTest, VanillaMovesNoEmbeddings) {
  const Graph g = small_graph();
  const auto res = run_experiment(g, partition(g, 3, 1), small_plan(Mode::vanilla, 2));
  ASSERT_EQ(res.clients.size(), 9u);  // 3 clients x (pretrain + 2 rounds)
  for (const auto& c : res.clients) {
    EXPECT_EQ(c.pulled_keys, 0u);
    EXPECT_EQ(c.pushed_keys, 0u);
    EXPECT_EQ(c.timings.pull_s, 0.0);
    EXPECT_EQ(c.timings.push_s, 0.0);
  }
  ASSERT_EQ(res.server.size(), 3u);
  for (std::size_t i = 0; i < res.server.size(); ++i) EXPECT_EQ(res.server[i].round, i);
}

TEST(RuntimeTest, PretrainingFillsStoreWithEveryPushNode) {
  const Graph g = small_graph();
  const auto pa = partition(g, 3, 1);
  auto plan = small_plan(Mode::embc, 1);
  plan.layers = 3;
  plan.fanout = {4, 4, 4};
  const auto res = run_experiment(g, pa, plan);
  std::set<NodeId> push_union;
  for (const auto& slice : build_subgraphs(g, pa).manifest.per_client)
    for (const auto& e : slice) push_union.insert(e.local);
  EXPECT_EQ(res.stats_after_pretrain.num_keys, 2 * push_union.size());
  std::uint64_t round0 = 0;
  for (const auto& c : res.clients)
    if (c.round == 0) round0 += c.pushed_keys;
  EXPECT_EQ(round0, res.stats_after_pretrain.num_keys);
}

TEST(RuntimeTest, DeterministicExceptTimings) {
  const Graph g = small_graph();
  const auto pa = partition(g, 3, 1);
  auto plan = small_plan(Mode::opes, 3);
  plan.retain = 2;
  plan.overlap = true;
  ExperimentOptions opt;
  opt.keep_params_history = true;
  const auto a = run_experiment(g, pa, plan, opt);
  const auto b = run_experiment(g, pa, plan, opt);
  EXPECT_EQ(a.params_history, b.params_history);
  EXPECT_EQ(without_timings(metrics_rows(a)), without_timings(metrics_rows(b)));
}

TEST(RuntimeTest, ZeroRoundsGiveChanceAccuracy) {
  const Graph g = synth_graph(SbmSpec{4, 1250, 0.002, 0.0005, 8, 0, 5});
  ASSERT_GE(g.nodes_in(Split::test).size(), 1000u);
  auto plan = small_plan(Mode::vanilla, 0);
  const auto res = run_experiment(g, partition(g, 2, 5), plan);
  ASSERT_EQ(res.server.size(), 1u);
  EXPECT_NEAR(res.server[0].test_accuracy, 0.25, 0.05);
}

TEST(RuntimeTest, TrainingBeatsInitialModel) {
  SbmSpec spec{2, 50, 1.0, 0.0, 2, 0, 7};
  spec.feature_noise = 0.0;
  spec.class_separation = 3.0;
  const Graph g = synth_graph(spec);
  auto plan = small_plan(Mode::embc, 25);
  plan.lr = 0.02f;
  const auto res = run_experiment(g, PartitionAssignment{1, std::vector<std::uint32_t>(g.num_nodes, 0)}, plan);
  EXPECT_EQ(res.server.back().test_accuracy, 1.0);
  double best = 0;
  for (const auto& s : res.server) best = std::max(best, s.test_accuracy);
  EXPECT_GT(best, res.server.front().test_accuracy);
}

TEST(RuntimeTest, EvaluateMaskRules) {
  const Graph g = small_graph();
  const auto params = init_params<float>(model_dims(6, 4, 3, 2), 1);
  EXPECT_THROW(evaluate(params, g, std::vector<NodeId>{}), std::invalid_argument);
  const double one = evaluate(params, g, std::vector<NodeId>{7});
  EXPECT_TRUE(one == 0.0 || one == 1.0);
}

TEST(RuntimeTest, PhaseAccountingWithoutOverlap) {
  const Graph g = synth_graph(SbmSpec{4, 150, 0.05, 0.01, 8, 0, 2});
  auto plan = small_plan(Mode::embc, 3);
  const auto res = run_experiment(g, partition(g, 2, 2), plan);
  for (const auto& c : res.clients) {
    if (c.round == 0) continue;
    const auto& t = c.timings;
    const double sum = t.pull_s + t.sample_s + t.train_s + t.push_s;
    EXPECT_LE(sum, t.round_s * 1.0000001);
    EXPECT_GE(sum, 0.95 * t.round_s) << "client " << c.client_id << " round " << c.round;
  }
}

TEST(RuntimeTest, ClientFailureAbortsTheRun) {
  AggregationService agg(2, 1, init_params<float>(model_dims(2, 2, 2, 2), 1), nullptr);
  std::thread quitter([&] {
    InprocChannel ch(agg);
    AggregationClient(ch).register_client(1);
  });  // disconnects before finishing
  quitter.join();
  InprocChannel ch(agg);
  AggregationClient client(ch);
  client.register_client(0);
  try {
    client.round_done(0);
    FAIL() << "barrier released without the other client";
  } catch (const wire::WireError& e) {
    EXPECT_EQ(e.code, wire::ErrorCode::aborted);
  }
}

}  // namespace
}  // namespace opes
