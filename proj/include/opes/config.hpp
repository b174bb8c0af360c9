#pragma once

#include <opes/runtime.hpp>

#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>

namespace opes {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Everything one experiment needs. The graph comes from `graph_dir` when
/// set, otherwise from `synth`; the partition from `partition_file` when set,
/// otherwise from the built-in partitioner.
struct RunConfig {
  std::filesystem::path graph_dir;
  SbmSpec synth{4, 500, 0.05, 0.02, 16, 0, 0, 1.0, 1.0};
  std::uint32_t clients = 4;
  std::filesystem::path partition_file;
  std::uint64_t partition_seed = 0;
  TrainingPlan plan;
  std::string mode = "opes";
  Transport transport = Transport::inproc;
  double send_delay_ms = 0;
  std::string aggregation_address = "127.0.0.1:7400";
  std::string embedding_address = "127.0.0.1:7401";
  std::filesystem::path out = "metrics.csv";

  /// Applies the mode string and checks cross-field rules.
  TrainingPlan finalized_plan() const {
    TrainingPlan p = plan;
    try {
      p.mode = parse_mode(mode);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    if (clients == 0) throw ConfigError("clients must be >= 1");
    if (send_delay_ms < 0) throw ConfigError("send_delay_ms must be >= 0");
    try {
      resolve(p);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    return p;
  }

  std::chrono::microseconds send_delay() const {
    return std::chrono::microseconds(static_cast<std::int64_t>(send_delay_ms * 1000.0));
  }
};

inline Graph load_or_synthesize(const RunConfig& cfg) {
  if (!cfg.graph_dir.empty()) return load_graph(cfg.graph_dir);
  return synth_graph(cfg.synth);
}

inline PartitionAssignment load_or_partition(const RunConfig& cfg, const Graph& g) {
  if (!cfg.partition_file.empty()) return read_partition_file(cfg.partition_file, g.num_nodes, cfg.clients);
  return partition(g, cfg.clients, cfg.partition_seed);
}

/// "host:port" -> (host, port).
inline std::pair<std::string, std::uint16_t> split_address(const std::string& address) {
  const auto colon = address.rfind(':');
  if (colon == std::string::npos || colon == 0) throw ConfigError("address must be host:port: " + address);
  const auto port = std::stoul(address.substr(colon + 1));
  if (port == 0 || port > 65535) throw ConfigError("bad port in " + address);
  return {address.substr(0, colon), static_cast<std::uint16_t>(port)};
}

}  // namespace opes
