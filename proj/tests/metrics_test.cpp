#include "support/fixtures.hpp"

#include <opes/metrics.hpp>

#include <gtest/gtest.h>

#include <sstream>

namespace opes {
namespace {

std::vector<MetricsRow> server_curve(std::vector<std::pair<double, double>> wall_acc) {
  std::vector<MetricsRow> rows;
  for (std::uint32_t r = 0; r < wall_acc.size(); ++r) {
    MetricsRow row;
    row.scope = "server";
    row.round = r;
    row.wall_clock_s = wall_acc[r].first;
    row.test_accuracy = wall_acc[r].second;
    rows.push_back(row);
    rows.push_back({"client0", r, {0.1, 0.2, 0.3, 0.4, 1.0}, std::nullopt, wall_acc[r].first, 5, 6});
  }
  return rows;
}

TEST(MetricsCsvTest, RoundTripIsLossless) {
  auto rows = server_curve({{0.0, 0.25}, {1.0 / 3.0, 0.5}, {2.718281828459045, 0.8125}});
  rows[1].timings.train_s = 1e-300;
  std::stringstream ss;
  write_metrics(ss, rows);
  const auto text = ss.str();
  EXPECT_EQ(text.substr(0, text.find('\n')), metrics_header);
  std::stringstream in(text);
  EXPECT_EQ(read_metrics(in), rows);
  std::stringstream again;
  write_metrics(again, read_metrics(*new std::stringstream(text)));
  EXPECT_EQ(again.str(), text);
}

TEST(MetricsCsvTest, RejectsMalformedFiles) {
  std::stringstream bad_header("scope,round\n");
  EXPECT_THROW(read_metrics(bad_header), MetricsError);
  std::stringstream short_row(std::string(metrics_header) + "\nserver,1,0,0\n");
  EXPECT_THROW(read_metrics(short_row), MetricsError);
  std::stringstream bad_number(std::string(metrics_header) + "\nserver,1,x,0,0,0,0,0.5,1,0,0\n");
  EXPECT_THROW(read_metrics(bad_number), MetricsError);
}

TEST(TtaTest, IdenticalRunsHaveRatioOne) {
  const auto a = server_curve({{0, 0.2}, {10, 0.6}, {20, 0.7}});
  const auto res = analyze_tta({a, a});
  EXPECT_DOUBLE_EQ(res.nominal_accuracy, 0.7 - 0.01);
  EXPECT_EQ(res.tta_s[0], 20.0);
  EXPECT_EQ(res.ratios[1], 1.0);
}

TEST(TtaTest, DoubledWallClockGivesRatioTwo) {
  const auto a = server_curve({{0, 0.3}, {5, 0.55}, {9, 0.8}, {14, 0.79}});
  auto b = a;
  for (auto& r : b) r.wall_clock_s *= 2;
  const auto res = analyze_tta({b, a});
  EXPECT_EQ(res.tta_s[0], 18.0);
  EXPECT_EQ(res.tta_s[1], 9.0);
  EXPECT_EQ(res.ratios[1], 2.0);
}

TEST(TtaTest, HandComputedNominalUsesSmallerPeak) {
  // Peaks 0.90 and 0.80: nominal 0.79. Run A reaches 0.79 at t=12, run B at t=30.
  const auto a = server_curve({{0, 0.1}, {6, 0.75}, {12, 0.85}, {18, 0.9}});
  const auto b = server_curve({{0, 0.1}, {10, 0.5}, {20, 0.78}, {30, 0.8}});
  const auto res = analyze_tta({b, a});
  EXPECT_DOUBLE_EQ(res.nominal_accuracy, 0.79);
  EXPECT_EQ(res.tta_s[0], 30.0);
  EXPECT_EQ(res.tta_s[1], 12.0);
  EXPECT_DOUBLE_EQ(*res.ratios[1], 2.5);
}

TEST(TtaTest, UnreachableNominal) {
  const auto a = server_curve({{0, 0.1}, {6, 0.5}});
  const auto b = server_curve({{0, 0.1}, {4, 0.7}});
  const auto res = analyze_tta({a, b}, 0.6);
  EXPECT_FALSE(res.tta_s[0].has_value());
  EXPECT_EQ(res.tta_s[1], 4.0);
  EXPECT_FALSE(res.ratios[1].has_value());
  EXPECT_THROW(analyze_tta({a}), MetricsError);
  EXPECT_THROW(analyze_tta({a, std::vector<MetricsRow>{}}), MetricsError);
}

TEST(FootprintTest, PulledKeysMonotoneInRetention) {
  const Graph g = synth_graph(SbmSpec{4, 60, 0.1, 0.05, 4, 0, 9});
  const auto pa = partition(g, 4, 9);
  std::vector<std::uint64_t> pulled;
  for (std::uint32_t retain : {0u, 2u, 4u, retain_all}) {
    TrainingPlan p;
    p.mode = Mode::opes;
    p.retain = retain;
    p.layers = 2;
    p.hidden = 4;
    p.fanout = {3, 3};
    p.epochs = 1;
    p.rounds = 1;
    p.seed = 9;
    const auto rows = metrics_rows(run_experiment(g, pa, p));
    const auto fp = report_footprint(rows);
    pulled.push_back(fp.pulled_keys_total);
    std::uint64_t push_nodes = 0;
    for (const auto& sub : build_subgraphs(g, pa).subgraphs) push_nodes += sub.push_nodes.size();
    EXPECT_EQ(fp.keys_after_pretrain, push_nodes);  // L=2: one key per node
  }
  EXPECT_EQ(pulled[0], 0u);
  EXPECT_LE(pulled[1], pulled[2]);
  EXPECT_LE(pulled[2], pulled[3]);
}

}  // namespace
}  // namespace opes
