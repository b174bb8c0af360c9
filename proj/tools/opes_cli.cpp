// Command-line driver: dataset preparation, experiments and analysis.

#include <opes/config.hpp>
#include <opes/metrics.hpp>

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

namespace {

using namespace opes;

void add_synth_options(CLI::App& app, SbmSpec& s) {
  app.add_option("--blocks", s.blocks, "SBM blocks");
  app.add_option("--nodes-per-block", s.nodes_per_block, "vertices per block");
  app.add_option("--p-intra", s.p_intra, "edge probability inside a block");
  app.add_option("--p-inter", s.p_inter, "edge probability across blocks");
  app.add_option("--feature-dim", s.feature_dim, "feature width");
  app.add_option("--classes", s.num_classes, "number of classes (0: one per block)");
  app.add_option("--graph-seed", s.seed, "generator seed");
  app.add_option("--class-separation", s.class_separation, "scale of class mean vectors");
  app.add_option("--feature-noise", s.feature_noise, "feature noise std-dev");
}

/// Options shared by every verb that runs training.
void add_run_options(CLI::App& app, RunConfig& cfg) {
  app.add_option("--graph", cfg.graph_dir, "dataset directory (default: synthesize)");
  add_synth_options(app, cfg.synth);
  app.add_option("--clients", cfg.clients, "number of clients K");
  app.add_option("--partition-file", cfg.partition_file, "import a partition (one part id per line)");
  app.add_option("--partition-seed", cfg.partition_seed, "seed of the built-in partitioner");
  app.add_option("--mode", cfg.mode, "vanilla | embc | opes")->check(CLI::IsMember({"vanilla", "embc", "opes"}));
  app.add_option("--retain", cfg.plan.retain, "remote neighbours kept per vertex, or inf")
      ->transform(CLI::Transformer(std::map<std::string, std::string>{{"inf", std::to_string(retain_all)}}));
  app.add_flag("--overlap,!--no-overlap", cfg.plan.overlap, "push embeddings during the last epoch");
  app.add_option("--layers", cfg.plan.layers, "GNN depth L");
  app.add_option("--hidden", cfg.plan.hidden, "hidden width");
  app.add_option("--fanout", cfg.plan.fanout, "neighbours sampled per hop, nearest hop first")->delimiter(',');
  app.add_option("--epochs", cfg.plan.epochs, "epochs per round");
  app.add_option("--lr", cfg.plan.lr, "Adam learning rate");
  app.add_option("--batch-size", cfg.plan.batch_size, "targets per minibatch");
  app.add_option("--rounds", cfg.plan.rounds, "federated rounds");
  app.add_option("--seed", cfg.plan.seed, "training seed");
  app.add_option("--transport", cfg.transport, "inproc | tcp")
      ->transform(CLI::CheckedTransformer(std::map<std::string, Transport>{{"inproc", Transport::inproc},
                                                                          {"tcp", Transport::tcp}}));
  app.add_option("--send-delay-ms", cfg.send_delay_ms, "delay before each client frame (tcp)");
  app.add_option("--aggregation", cfg.aggregation_address, "aggregation server host:port");
  app.add_option("--embeddings", cfg.embedding_address, "embedding server host:port");
  app.add_option("--out", cfg.out, "metrics CSV path");
}

void print_summary(const std::vector<MetricsRow>& rows) {
  double peak = 0;
  for (const auto& r : rows)
    if (r.is_server() && r.test_accuracy) peak = std::max(peak, *r.test_accuracy);
  const auto fp = report_footprint(rows);
  std::printf("peak_test_accuracy=%.4f median_round_s=%.4f pulled_keys=%llu pushed_keys=%llu\n", peak,
              median_round_seconds(rows), static_cast<unsigned long long>(fp.pulled_keys_total),
              static_cast<unsigned long long>(fp.pushed_keys_total));
}

int cmd_synth(const SbmSpec& spec, const std::filesystem::path& out) {
  const Graph g = synth_graph(spec);
  save_graph(g, out);
  std::printf("wrote %s: %llu nodes, %llu directed edges, %u classes\n", out.c_str(),
              static_cast<unsigned long long>(g.num_nodes), static_cast<unsigned long long>(g.num_edges()),
              g.num_classes);
  return 0;
}

int cmd_partition(const RunConfig& cfg) {
  const Graph g = load_or_synthesize(cfg);
  const auto pa = load_or_partition(cfg, g);
  std::filesystem::create_directories(cfg.out);
  write_partition_file(cfg.out / "partition.txt", pa);
  const auto set = build_subgraphs(g, pa);
  for (const auto& sub : set.subgraphs) {
    save_subgraph(sub, cfg.out / ("client" + std::to_string(sub.client_id)));
    std::printf("client%u local=%u remote=%u push=%zu\n", sub.client_id, sub.num_local, sub.num_remote(),
                sub.push_nodes.size());
  }
  std::printf("edge_cut=%llu boundary_fraction=%.4f\n", static_cast<unsigned long long>(edge_cut(g, pa) / 2),
              boundary_fraction(g, pa));
  return 0;
}

int cmd_run(const RunConfig& cfg) {
  const auto plan = cfg.finalized_plan();
  const Graph g = load_or_synthesize(cfg);
  const auto pa = load_or_partition(cfg, g);
  ExperimentOptions opt;
  opt.transport = cfg.transport;
  opt.send_delay = cfg.send_delay();
  const auto rows = metrics_rows(run_experiment(g, pa, plan, opt));
  write_metrics(cfg.out, rows);
  print_summary(rows);
  return 0;
}

int cmd_serve(const RunConfig& cfg) {
  const auto rp = resolve(cfg.finalized_plan());
  for (const auto& w : rp.warnings) std::clog << "warning: " << w << '\n';
  const Graph g = load_or_synthesize(cfg);
  const auto set = build_subgraphs(g, load_or_partition(cfg, g));
  ExperimentServers servers(g, set, rp, false);
  const auto [agg_host, agg_port] = split_address(cfg.aggregation_address);
  TcpServer agg(servers.aggregation(), agg_port, agg_host);
  std::unique_ptr<TcpServer> emb;
  if (servers.embeddings()) {
    const auto [emb_host, emb_port] = split_address(cfg.embedding_address);
    emb = std::make_unique<TcpServer>(*servers.embeddings(), emb_port, emb_host);
  }
  std::printf("serving %u clients: aggregation %s%s%s\n", cfg.clients, cfg.aggregation_address.c_str(),
              emb ? " embeddings " : "", emb ? cfg.embedding_address.c_str() : "");
  std::fflush(stdout);
  servers.aggregation().restart_clock();
  while (!servers.aggregation().wait_finished(std::chrono::seconds(1))) {
  }
  if (auto reason = servers.aggregation().abort_reason()) {
    std::cerr << "session aborted: " << *reason << '\n';
    return 1;
  }
  if (!servers.aggregation().wait_disconnected(std::chrono::seconds(30)))
    std::clog << "warning: clients still connected at shutdown\n";
  const auto rows = metrics_rows(servers.collect());
  write_metrics(cfg.out, rows);
  print_summary(rows);
  return 0;
}

int cmd_client(const RunConfig& cfg, std::uint32_t id, const std::filesystem::path& subgraph_dir) {
  const auto rp = resolve(cfg.finalized_plan());
  PartitionedSubgraph sub;
  if (!subgraph_dir.empty()) {
    sub = load_subgraph(subgraph_dir);
  } else {
    const Graph g = load_or_synthesize(cfg);
    auto set = build_subgraphs(g, load_or_partition(cfg, g));
    if (id >= set.subgraphs.size()) throw ConfigError("client id out of range");
    sub = std::move(set.subgraphs[id]);
  }
  sub = prune(sub, rp.plan.retain, rp.plan.seed);
  const auto [agg_host, agg_port] = split_address(cfg.aggregation_address);
  TcpChannel agg(agg_host, agg_port, cfg.send_delay());
  std::unique_ptr<TcpChannel> emb, push;
  if (rp.use_embeddings) {
    const auto [emb_host, emb_port] = split_address(cfg.embedding_address);
    emb = std::make_unique<TcpChannel>(emb_host, emb_port, cfg.send_delay());
    if (rp.plan.overlap) push = std::make_unique<TcpChannel>(emb_host, emb_port, cfg.send_delay());
  }
  ClientRuntime(std::move(sub), rp, agg, emb.get(), push.get()).run();
  return 0;
}

int cmd_tta(const std::vector<std::filesystem::path>& files, std::optional<double> nominal) {
  std::vector<std::vector<MetricsRow>> runs;
  for (const auto& f : files) runs.push_back(read_metrics(f));
  const auto res = analyze_tta(runs, nominal);
  std::printf("nominal_accuracy=%.4f\n", res.nominal_accuracy);
  std::printf("run,peak_accuracy,tta_s,ratio_vs_first\n");
  for (std::size_t i = 0; i < files.size(); ++i) {
    std::printf("%s,%.4f,", files[i].c_str(), res.peak_accuracy[i]);
    if (res.tta_s[i]) std::printf("%.4f,", *res.tta_s[i]);
    else std::printf("unreachable,");
    if (res.ratios[i]) std::printf("%.4f\n", *res.ratios[i]);
    else std::printf("undefined\n");
  }
  return 0;
}

int cmd_footprint(const std::vector<std::filesystem::path>& files) {
  std::printf("run,keys_after_pretrain,pulled_keys_total,pulled_keys_per_round_max,pushed_keys_total\n");
  for (const auto& f : files) {
    const auto fp = report_footprint(read_metrics(f));
    std::printf("%s,%llu,%llu,%llu,%llu\n", f.c_str(), static_cast<unsigned long long>(fp.keys_after_pretrain),
                static_cast<unsigned long long>(fp.pulled_keys_total),
                static_cast<unsigned long long>(fp.pulled_keys_per_round_max),
                static_cast<unsigned long long>(fp.pushed_keys_total));
  }
  return 0;
}

struct CliState {
  SbmSpec synth_spec;
  std::filesystem::path synth_out;
  RunConfig part_cfg = [] {
    RunConfig c;
    c.out = "partition";
    return c;
  }();
  RunConfig run_cfg;
  RunConfig serve_cfg;
  RunConfig client_cfg;
  std::uint32_t client_id = 0;
  std::filesystem::path subgraph_dir;
  std::filesystem::path config_file;
  std::vector<std::filesystem::path> tta_files;
  std::optional<double> nominal;
  std::vector<std::filesystem::path> fp_files;
};

std::unique_ptr<CLI::App> make_app(CliState& st) {
  auto app = std::make_unique<CLI::App>("Federated GNN training with a shared embedding server", "opes");
  app->require_subcommand(1);

  auto* synth = app->add_subcommand("synth", "generate a stochastic-block-model dataset");
  add_synth_options(*synth, st.synth_spec);
  synth->add_option("--out", st.synth_out, "output dataset directory")->required();

  auto* part = app->add_subcommand("partition", "split a graph into per-client subgraphs");
  part->add_option("--graph", st.part_cfg.graph_dir, "dataset directory (default: synthesize)");
  add_synth_options(*part, st.part_cfg.synth);
  part->add_option("--clients", st.part_cfg.clients, "number of clients K");
  part->add_option("--seed", st.part_cfg.partition_seed, "partitioner seed");
  part->add_option("--import", st.part_cfg.partition_file, "use this partition instead of computing one");
  part->add_option("--out", st.part_cfg.out, "output directory");

  const auto config_help = "key=value file (keys are long flag names); command-line flags override it";
  auto* run = app->add_subcommand("run", "run one experiment in this process");
  add_run_options(*run, st.run_cfg);
  run->add_option("--config", st.config_file, config_help);

  auto* serve = app->add_subcommand("serve", "host the aggregation and embedding servers over tcp");
  add_run_options(*serve, st.serve_cfg);
  serve->add_option("--config", st.config_file, config_help);

  auto* client = app->add_subcommand("client", "run one client against remote servers");
  add_run_options(*client, st.client_cfg);
  client->add_option("--config", st.config_file, config_help);
  client->add_option("--id", st.client_id, "client id (ignored with --subgraph)");
  client->add_option("--subgraph", st.subgraph_dir, "client directory written by `partition`");

  auto* tta = app->add_subcommand("tta", "time-to-accuracy across runs; the first file is the baseline");
  tta->add_option("files", st.tta_files, "metrics CSV files")->required()->expected(2, -1)->check(CLI::ExistingFile);
  tta->add_option("--nominal", st.nominal, "target accuracy (default: smallest peak minus 0.01)");

  auto* footprint = app->add_subcommand("footprint", "embedding key counts per run");
  footprint->add_option("files", st.fp_files, "metrics CSV files")->required()->check(CLI::ExistingFile);
  return app;
}

/// Applies a config file by parsing its entries as flags of `verb`, so the
/// real command line parsed afterwards overrides them.
void apply_config_file(CliState& st, const std::string& verb, const std::filesystem::path& path) {
  std::vector<std::string> args{verb};
  for (const auto& [key, value] : read_key_values(path))
    if (key != "config") args.push_back("--" + key + "=" + value);
  std::reverse(args.begin(), args.end());
  make_app(st)->parse(args);
}

}  // namespace

int main(int argc, char** argv) {
  CliState st;
  for (int i = 2; i + 1 < argc; ++i) {
    if (std::string(argv[i]) != "--config") continue;
    try {
      apply_config_file(st, argv[1], argv[i + 1]);
    } catch (const CLI::ParseError& e) {
      std::cerr << "in " << argv[i + 1] << ": " << e.what() << '\n';
      return 2;
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << '\n';
      return 2;
    }
    break;
  }
  auto app = make_app(st);
  CLI11_PARSE(*app, argc, argv);
  auto& synth = *app->get_subcommand("synth");
  auto& part = *app->get_subcommand("partition");
  auto& run = *app->get_subcommand("run");
  auto& serve = *app->get_subcommand("serve");
  auto& client = *app->get_subcommand("client");
  auto& tta = *app->get_subcommand("tta");
  auto& footprint = *app->get_subcommand("footprint");
  try {
    if (synth) return cmd_synth(st.synth_spec, st.synth_out);
    if (part) return cmd_partition(st.part_cfg);
    if (run) return cmd_run(st.run_cfg);
    if (serve) return cmd_serve(st.serve_cfg);
    if (client) return cmd_client(st.client_cfg, st.client_id, st.subgraph_dir);
    if (tta) return cmd_tta(st.tta_files, st.nominal);
    if (footprint) return cmd_footprint(st.fp_files);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
