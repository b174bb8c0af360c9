#pragma once

#include <opes/runtime.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace opes {

class MetricsError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::string_view metrics_header =
    "scope,round,pull_s,sample_s,train_s,push_s,round_s,test_accuracy,wall_clock_s,pulled_keys,pushed_keys";

/// One CSV row. Scope is "server" or "client<k>"; test_accuracy is only set
/// on server rows.
struct MetricsRow {
  std::string scope;
  std::uint32_t round = 0;
  PhaseTimings timings;
  std::optional<double> test_accuracy;
  double wall_clock_s = 0;
  std::uint64_t pulled_keys = 0;
  std::uint64_t pushed_keys = 0;

  bool is_server() const { return scope == "server"; }
  bool operator==(const MetricsRow&) const = default;
};

namespace detail {

/// Shortest representation that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

inline double parse_double(const std::string& s, const std::string& what) {
  double v = 0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size()) throw MetricsError("bad number in " + what + ": '" + s + "'");
  return v;
}

inline std::uint64_t parse_u64(const std::string& s, const std::string& what) {
  std::uint64_t v = 0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size()) throw MetricsError("bad integer in " + what + ": '" + s + "'");
  return v;
}

}  // namespace detail

/// Server rows carry the round's wall time and accuracy; the phase columns
/// hold the slowest client's value.
inline std::vector<MetricsRow> metrics_rows(const ExperimentResult& r) {
  std::map<std::uint32_t, std::vector<const ClientReport*>> by_round;
  for (const auto& c : r.clients) by_round[c.round].push_back(&c);
  std::vector<MetricsRow> rows;
  for (const auto& s : r.server) {
    MetricsRow srow{"server", s.round, {}, s.test_accuracy, s.wall_clock_s, 0, 0};
    auto& reports = by_round[s.round];
    std::sort(reports.begin(), reports.end(), [](auto* a, auto* b) { return a->client_id < b->client_id; });
    for (const auto* c : reports) {
      auto& t = srow.timings;
      t.pull_s = std::max(t.pull_s, c->timings.pull_s);
      t.sample_s = std::max(t.sample_s, c->timings.sample_s);
      t.train_s = std::max(t.train_s, c->timings.train_s);
      t.push_s = std::max(t.push_s, c->timings.push_s);
      srow.pulled_keys += c->pulled_keys;
      srow.pushed_keys += c->pushed_keys;
    }
    srow.timings.round_s = s.round_s;
    rows.push_back(srow);
    for (const auto* c : reports)
      rows.push_back({"client" + std::to_string(c->client_id), c->round, c->timings, std::nullopt, s.wall_clock_s,
                      c->pulled_keys, c->pushed_keys});
  }
  return rows;
}

inline void write_metrics(std::ostream& out, const std::vector<MetricsRow>& rows) {
  out << metrics_header << '\n';
  using detail::format_double;
  for (const auto& r : rows) {
    const auto& t = r.timings;
    out << r.scope << ',' << r.round << ',' << format_double(t.pull_s) << ',' << format_double(t.sample_s) << ','
        << format_double(t.train_s) << ',' << format_double(t.push_s) << ',' << format_double(t.round_s) << ','
        << (r.test_accuracy ? format_double(*r.test_accuracy) : "") << ',' << format_double(r.wall_clock_s) << ','
        << r.pulled_keys << ',' << r.pushed_keys << '\n';
  }
}

inline void write_metrics(const std::filesystem::path& path, const std::vector<MetricsRow>& rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw MetricsError("cannot write " + path.string());
  write_metrics(out, rows);
}

inline std::vector<MetricsRow> read_metrics(std::istream& in, const std::string& name = "metrics") {
  std::string line;
  if (!std::getline(in, line) || line != metrics_header) throw MetricsError(name + ": missing or unexpected header");
  std::vector<MetricsRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (!line.empty() && line.back() == ',') f.emplace_back();
    const auto where = name + ":" + std::to_string(lineno);
    if (f.size() != 11) throw MetricsError(where + ": expected 11 columns");
    MetricsRow r;
    r.scope = f[0];
    r.round = static_cast<std::uint32_t>(detail::parse_u64(f[1], where));
    r.timings = {detail::parse_double(f[2], where), detail::parse_double(f[3], where),
                 detail::parse_double(f[4], where), detail::parse_double(f[5], where),
                 detail::parse_double(f[6], where)};
    if (!f[7].empty()) r.test_accuracy = detail::parse_double(f[7], where);
    r.wall_clock_s = detail::parse_double(f[8], where);
    r.pulled_keys = detail::parse_u64(f[9], where);
    r.pushed_keys = detail::parse_u64(f[10], where);
    rows.push_back(std::move(r));
  }
  return rows;
}

inline std::vector<MetricsRow> read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MetricsError("cannot open " + path.string());
  return read_metrics(in, path.string());
}

struct TtaResult {
  double nominal_accuracy = 0;
  std::vector<std::optional<double>> tta_s;  // nullopt = never reached
  std::vector<double> peak_accuracy;
  /// ratios[i] = tta[0] / tta[i]; undefined when either run is unreachable.
  std::vector<std::optional<double>> ratios;
};

/// Time-to-accuracy over runs; run 0 is the baseline. The nominal target is
/// the smaller peak accuracy minus one point, unless given explicitly.
inline TtaResult analyze_tta(const std::vector<std::vector<MetricsRow>>& runs,
                             std::optional<double> nominal = std::nullopt) {
  if (runs.size() < 2) throw MetricsError("analyze_tta needs at least two runs");
  TtaResult res;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    double peak = -1;
    for (const auto& r : runs[i])
      if (r.is_server() && r.test_accuracy) peak = std::max(peak, *r.test_accuracy);
    if (peak < 0) throw MetricsError("run " + std::to_string(i) + " has no server accuracy rows");
    res.peak_accuracy.push_back(peak);
  }
  res.nominal_accuracy =
      nominal ? *nominal : *std::min_element(res.peak_accuracy.begin(), res.peak_accuracy.end()) - 0.01;
  for (const auto& run : runs) {
    std::optional<double> t;
    for (const auto& r : run)
      if (r.is_server() && r.test_accuracy && *r.test_accuracy >= res.nominal_accuracy) {
        t = r.wall_clock_s;
        break;
      }
    res.tta_s.push_back(t);
  }
  for (const auto& t : res.tta_s) {
    if (res.tta_s[0] && t && *t > 0)
      res.ratios.push_back(*res.tta_s[0] / *t);
    else
      res.ratios.push_back(std::nullopt);
  }
  return res;
}

struct Footprint {
  std::uint64_t keys_after_pretrain = 0;  // pre-training pushes, one per (node, layer)
  std::uint64_t pulled_keys_total = 0;
  std::uint64_t pulled_keys_per_round_max = 0;
  std::uint64_t pushed_keys_total = 0;
};

inline Footprint report_footprint(const std::vector<MetricsRow>& rows) {
  Footprint f;
  for (const auto& r : rows) {
    if (r.is_server()) continue;
    if (r.round == 0) f.keys_after_pretrain += r.pushed_keys;
    f.pulled_keys_total += r.pulled_keys;
    f.pushed_keys_total += r.pushed_keys;
  }
  for (const auto& r : rows)
    if (r.is_server()) f.pulled_keys_per_round_max = std::max(f.pulled_keys_per_round_max, r.pulled_keys);
  return f;
}

/// Median of server round_s over rounds >= 1.
inline double median_round_seconds(const std::vector<MetricsRow>& rows) {
  std::vector<double> v;
  for (const auto& r : rows)
    if (r.is_server() && r.round >= 1) v.push_back(r.timings.round_s);
  if (v.empty()) return 0;
  std::sort(v.begin(), v.end());
  return v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
}

}  // namespace opes
