#pragma once

#include <opes/aggregation.hpp>
#include <opes/embedding_store.hpp>
#include <opes/gnn.hpp>
#include <opes/sampler.hpp>
#include <opes/transport.hpp>

#include <chrono>
#include <exception>
#include <functional>
#include <iostream>
#include <memory>
#include <mutex>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

namespace opes {

enum class Mode { vanilla, embc, opes };

inline std::string to_string(Mode m) {
  switch (m) {
    case Mode::vanilla: return "vanilla";
    case Mode::embc: return "embc";
    case Mode::opes: return "opes";
  }
  return "?";
}

inline Mode parse_mode(const std::string& s) {
  if (s == "vanilla") return Mode::vanilla;
  if (s == "embc") return Mode::embc;
  if (s == "opes") return Mode::opes;
  throw std::invalid_argument("unknown mode: " + s);
}

struct TrainingPlan {
  Mode mode = Mode::opes;
  std::uint32_t retain = retain_all;
  bool overlap = false;
  std::uint32_t layers = 3;
  std::uint32_t hidden = 32;
  std::vector<std::uint32_t> fanout{10, 10, 10};
  std::uint32_t epochs = 3;
  float lr = 0.001f;
  std::uint32_t batch_size = 64;
  std::uint32_t rounds = 30;
  std::uint64_t seed = 0;
};

/// The plan after mode rules are applied.
struct ResolvedPlan {
  TrainingPlan plan;
  bool use_embeddings = true;
  std::vector<std::string> warnings;
};

inline ResolvedPlan resolve(const TrainingPlan& in) {
  ResolvedPlan out{in, true, {}};
  auto& p = out.plan;
  if (p.layers < 1) throw std::invalid_argument("layers must be >= 1");
  if (p.epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (p.batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (p.fanout.size() != p.layers) throw std::invalid_argument("fanout length must equal layers");
  for (auto f : p.fanout)
    if (f == 0) throw std::invalid_argument("fanout entries must be >= 1");
  switch (p.mode) {
    case Mode::vanilla:
      out.use_embeddings = false;
      p.retain = 0;
      p.overlap = false;
      break;
    case Mode::embc:
      p.retain = retain_all;
      p.overlap = false;
      break;
    case Mode::opes:
      break;
  }
  if (p.overlap && p.epochs < 2) {
    out.warnings.push_back("overlap push needs at least 2 epochs per round; running without overlap");
    p.overlap = false;
  }
  // With one layer there is nothing to exchange.
  if (p.layers < 2) out.use_embeddings = false;
  return out;
}

inline std::uint64_t epoch_seed(std::uint64_t seed, std::uint32_t client, std::uint32_t round, std::uint32_t epoch) {
  return derive_seed(seed, {0xe90c, client, round, epoch});
}

inline std::uint64_t batch_seed(std::uint64_t seed, std::uint32_t client, std::uint32_t round, std::uint32_t epoch,
                                std::uint64_t batch) {
  return derive_seed(seed, {0x5a4d, client, round, epoch, batch});
}

/// Shuffled split of the train set into consecutive batches; the last batch
/// may be short. Every train vertex lands in exactly one batch.
inline std::vector<std::vector<std::uint32_t>> epoch_batches(std::span<const std::uint32_t> train,
                                                             std::uint32_t batch_size, std::uint64_t seed) {
  if (batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
  std::vector<std::uint32_t> order(train.begin(), train.end());
  Rng rng(seed);
  rng.shuffle(std::span<std::uint32_t>(order));
  std::vector<std::vector<std::uint32_t>> out;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const auto end = std::min<std::size_t>(order.size(), start + batch_size);
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

/// Fraction of `nodes` whose full-graph prediction matches the label.
inline double evaluate(const ModelParams<float>& params, const Graph& g, std::span<const NodeId> nodes) {
  if (nodes.empty()) throw std::invalid_argument("evaluate: empty mask");
  const auto h = graph_inference(params, g, params.num_layers());
  const auto& logits = h.back();
  std::size_t correct = 0;
  for (auto v : nodes) correct += argmax_row(logits.row(v)) == g.labels[v];
  return static_cast<double>(correct) / static_cast<double>(nodes.size());
}

/// h^1..h^{L-1} of every push node, from local-edge inference with `params`.
inline std::vector<EmbeddingRecord> push_records(const ModelParams<float>& params, const PartitionedSubgraph& sub,
                                                 std::uint32_t version) {
  const std::uint32_t top = params.num_layers() - 1;
  std::vector<EmbeddingRecord> out;
  if (top == 0 || sub.push_nodes.empty()) return out;
  const auto h = layerwise_inference(params, sub, top);
  out.reserve(sub.push_nodes.size() * top);
  for (auto node : sub.push_nodes) {
    const auto idx = *sub.index_of(node);
    for (std::uint32_t l = 1; l <= top; ++l) {
      auto row = h[l - 1].row(idx);
      out.push_back({{node, l}, version, std::vector<float>(row.begin(), row.end())});
    }
  }
  return out;
}

struct ClientHooks {
  /// Called after each epoch with the client's current parameters.
  std::function<void(std::uint32_t client, std::uint32_t round, std::uint32_t epoch, const ModelParams<float>&)>
      epoch_end;
};

/// One federated client. Owns its (already pruned) subgraph, optimizer state
/// and embedding cache; talks to the servers only through channels.
class ClientRuntime {
 public:
  ClientRuntime(PartitionedSubgraph sub, ResolvedPlan plan, Channel& aggregation, Channel* embeddings,
                Channel* push_embeddings, ClientHooks hooks = {})
      : sub_(std::move(sub)),
        rp_(std::move(plan)),
        agg_(aggregation),
        emb_channel_(embeddings),
        push_channel_(push_embeddings ? push_embeddings : embeddings),
        hooks_(std::move(hooks)),
        train_(sub_.local_train_indices()) {
    if (rp_.use_embeddings && emb_channel_ == nullptr) throw std::invalid_argument("embedding mode needs a channel");
    if (rp_.plan.overlap && push_embeddings == nullptr)
      throw std::invalid_argument("overlap push needs a second embedding connection");
  }

  std::uint32_t id() const noexcept { return sub_.client_id; }

  void run() {
    agg_.register_client(id());
    if (rp_.use_embeddings) {
      EmbeddingClient(*emb_channel_).hello(id());
      if (push_channel_ != emb_channel_) EmbeddingClient(*push_channel_).hello(id());
    }
    pretrain();
    for (std::uint32_t r = 1; r <= rp_.plan.rounds; ++r) run_round(r);
  }

  /// Stage 0: publish embeddings of the initial model for every push node.
  void pretrain() {
    params_ = agg_.get_model(0);
    adam_ = AdamState<float>::for_params(params_, rp_.plan.lr);
    ClientReport rep{id(), 0, params_, train_.size(), {}, 0, 0};
    if (rp_.use_embeddings) {
      const auto t = Clock::now();
      rep.pushed_keys = push(params_, 0, *emb_channel_);
      rep.timings.push_s = seconds_since(t);
      rep.timings.round_s = rep.timings.push_s;
    }
    agg_.put_model(rep);
    agg_.round_done(0);
  }

  void run_round(std::uint32_t round) {
    const auto& plan = rp_.plan;
    params_ = agg_.get_model(round);
    ClientReport rep{id(), round, {}, train_.size(), {}, 0, 0};
    const auto t_round = Clock::now();

    if (rp_.use_embeddings) {
      const auto t = Clock::now();
      cache_ = EmbeddingCache(plan.hidden);
      rep.pulled_keys = EmbeddingClient(*emb_channel_).pull_into(cache_, required_pull_set(sub_), plan.layers - 1);
      agg_.pull_done(round);  // nobody pushes round-r vectors until every pull of round r is done
      rep.timings.pull_s = seconds_since(t);
    }

    std::exception_ptr worker_error;
    std::uint64_t worker_pushed = 0;
    std::jthread worker;  // joins on unwind
    const Fanout fanout{plan.fanout};
    for (std::uint32_t epoch = 1; epoch <= plan.epochs && !train_.empty(); ++epoch) {
      const auto t_epoch = Clock::now();
      double sampling = 0;
      const auto batches = epoch_batches(train_, plan.batch_size, epoch_seed(plan.seed, id(), round, epoch));
      for (std::size_t b = 0; b < batches.size(); ++b) {
        const auto t_sample = Clock::now();
        const auto cg = sample_minibatch(sub_, batches[b], fanout, batch_seed(plan.seed, id(), round, epoch, b));
        sampling += seconds_since(t_sample);
        const auto lg = loss_and_grad(params_, cg, sub_, rp_.use_embeddings ? &cache_ : nullptr);
        adam_step(params_, lg.grads, adam_);
      }
      rep.timings.sample_s += sampling;
      rep.timings.train_s += seconds_since(t_epoch) - sampling;
      if (hooks_.epoch_end) hooks_.epoch_end(id(), round, epoch, params_);
      if (plan.overlap && rp_.use_embeddings && epoch + 1 == plan.epochs) {
        worker = std::jthread([this, snapshot = params_, round, &worker_error, &worker_pushed] {
          try {
            worker_pushed = push(snapshot, round, *push_channel_);
          } catch (...) {
            worker_error = std::current_exception();
          }
        });
      }
    }

    if (rp_.use_embeddings) {
      const auto t = Clock::now();
      if (worker.joinable()) {
        worker.join();
        if (worker_error) std::rethrow_exception(worker_error);
        rep.pushed_keys = worker_pushed;
      } else {
        rep.pushed_keys = push(params_, round, *emb_channel_);
      }
      rep.timings.push_s = seconds_since(t);
    }
    rep.timings.round_s = seconds_since(t_round);
    rep.params = params_;
    agg_.put_model(rep);
    agg_.round_done(round);
  }

  const ModelParams<float>& params() const noexcept { return params_; }

 private:
  using Clock = std::chrono::steady_clock;
  static double seconds_since(Clock::time_point t) {
    return std::chrono::duration<double>(Clock::now() - t).count();
  }

  std::uint64_t push(const ModelParams<float>& params, std::uint32_t version, Channel& channel) {
    const auto records = push_records(params, sub_, version);
    if (records.empty()) return 0;
    return EmbeddingClient(channel).batch_set(records);
  }

  PartitionedSubgraph sub_;
  ResolvedPlan rp_;
  AggregationClient agg_;
  Channel* emb_channel_;
  Channel* push_channel_;
  ClientHooks hooks_;
  std::vector<std::uint32_t> train_;
  ModelParams<float> params_;
  AdamState<float> adam_;
  EmbeddingCache cache_;
};

enum class Transport { inproc, tcp };

struct ExperimentOptions {
  Transport transport = Transport::inproc;
  std::chrono::microseconds send_delay{0};  // tcp only
  std::size_t window = EmbeddingClient::default_window;
  bool keep_params_history = false;
  ClientHooks hooks;
};

struct BarrierSnapshot {
  AggregationService::BarrierKind kind;
  std::uint32_t stage;
  std::uint64_t store_pushed_keys;
  std::uint64_t store_set_frames;
};

struct ExperimentResult {
  std::vector<ServerRecord> server;
  std::vector<ClientReport> clients;  // params stripped
  std::vector<ModelParams<float>> params_history;
  ModelParams<float> final_params;
  StoreStats stats_after_pretrain;
  StoreStats final_stats;
  std::uint64_t store_request_frames = 0;
  std::uint64_t store_pulled_keys = 0;
  std::uint64_t store_pushed_keys = 0;
  std::vector<BarrierSnapshot> barriers;
  std::vector<std::string> warnings;
  std::vector<std::vector<EmbeddingRecord>> final_store_contents;  // per client push set, filled on request
};

/// Prunes each client's subgraph for the plan's retention limit.
inline std::vector<PartitionedSubgraph> prepare_clients(const SubgraphSet& set, const ResolvedPlan& rp) {
  std::vector<PartitionedSubgraph> out;
  for (const auto& sub : set.subgraphs) out.push_back(prune(sub, rp.plan.retain, rp.plan.seed));
  return out;
}

/// Aggregation and embedding servers for one session, plus the bookkeeping
/// the harness reads back afterwards. Transport-agnostic: wrap the services
/// in TcpServer or InprocChannel.
class ExperimentServers {
 public:
  ExperimentServers(const Graph& graph, const SubgraphSet& set, const ResolvedPlan& rp, bool keep_params_history)
      : graph_(graph), rp_(rp), test_nodes_(graph.nodes_in(Split::test)) {
    const auto& plan = rp_.plan;
    const auto k = static_cast<std::uint32_t>(set.subgraphs.size());
    for (const auto& sub : set.subgraphs) push_nodes_.push_back(sub.push_nodes);
    const auto dims = model_dims(graph.feature_dim, plan.hidden, graph.num_classes, plan.layers);
    agg_ = std::make_unique<AggregationService>(
        k, plan.rounds, init_params<float>(dims, plan.seed),
        [this](const ModelParams<float>& p) {
          return test_nodes_.empty() ? 0.0 : evaluate(p, graph_, test_nodes_);
        },
        keep_params_history);
    if (rp_.use_embeddings) emb_ = std::make_unique<EmbeddingService>(plan.hidden, plan.layers - 1, set.manifest);
    result_.warnings = rp_.warnings;
    agg_->on_release([this](AggregationService::BarrierKind kind, std::uint32_t stage) {
      std::lock_guard lock(snap_mu_);
      BarrierSnapshot s{kind, stage, 0, 0};
      if (emb_) {
        s.store_pushed_keys = emb_->counters().pushed_keys;
        s.store_set_frames = emb_->counters().set_frames;
        if (kind == AggregationService::BarrierKind::round_done && stage == 0)
          result_.stats_after_pretrain = emb_->store().stats();
      }
      result_.barriers.push_back(s);
    });
  }

  AggregationService& aggregation() noexcept { return *agg_; }
  EmbeddingService* embeddings() noexcept { return emb_.get(); }

  /// Snapshot of everything the run produced; call once clients are done.
  ExperimentResult collect() const {
    ExperimentResult result;
    {
      std::lock_guard lock(snap_mu_);
      result = result_;
    }
    result.server = agg_->server_records();
    result.clients = agg_->client_reports();
    result.params_history = agg_->params_history();
    result.final_params = agg_->latest_model();
    if (emb_) {
      result.final_stats = emb_->store().stats();
      result.store_request_frames = emb_->counters().request_frames;
      result.store_pulled_keys = emb_->counters().pulled_keys;
      result.store_pushed_keys = emb_->counters().pushed_keys;
      for (const auto& nodes : push_nodes_) {
        std::vector<EmbeddingKey> keys;
        for (auto node : nodes)
          for (std::uint32_t l = 1; l < rp_.plan.layers; ++l) keys.push_back({node, l});
        std::vector<EmbeddingRecord> recs;
        for (auto& r : emb_->store().batch_get(keys))
          if (r) recs.push_back(std::move(*r));
        result.final_store_contents.push_back(std::move(recs));
      }
    }
    return result;
  }

 private:
  const Graph& graph_;
  ResolvedPlan rp_;
  std::vector<NodeId> test_nodes_;
  std::vector<std::vector<NodeId>> push_nodes_;
  std::unique_ptr<AggregationService> agg_;
  std::unique_ptr<EmbeddingService> emb_;
  mutable std::mutex snap_mu_;
  ExperimentResult result_;
};

/// Runs a complete federated session in this process: servers plus one
/// thread per client, over the chosen transport.
inline ExperimentResult run_experiment(const Graph& graph, const PartitionAssignment& parts, const TrainingPlan& plan,
                                       const ExperimentOptions& opt = {}) {
  const ResolvedPlan rp = resolve(plan);
  for (const auto& w : rp.warnings) std::clog << "warning: " << w << '\n';
  const auto set = build_subgraphs(graph, parts);
  const auto clients = prepare_clients(set, rp);
  const std::uint32_t k = parts.num_parts;
  ExperimentServers servers(graph, set, rp, opt.keep_params_history);
  auto& agg = servers.aggregation();
  auto* emb = servers.embeddings();

  std::unique_ptr<TcpServer> agg_server, emb_server;
  if (opt.transport == Transport::tcp) {
    agg_server = std::make_unique<TcpServer>(agg);
    if (emb) emb_server = std::make_unique<TcpServer>(*emb);
  }
  auto make_channel = [&](Service& svc, TcpServer* server) -> std::unique_ptr<Channel> {
    if (opt.transport == Transport::inproc) return std::make_unique<InprocChannel>(svc);
    return std::make_unique<TcpChannel>("127.0.0.1", server->port(), opt.send_delay);
  };

  agg.restart_clock();
  std::vector<std::thread> threads;
  std::vector<std::exception_ptr> errors(k);
  for (std::uint32_t c = 0; c < k; ++c) {
    threads.emplace_back([&, c] {
      try {
        auto agg_ch = make_channel(agg, agg_server.get());
        std::unique_ptr<Channel> emb_ch, push_ch;
        if (emb) {
          emb_ch = make_channel(*emb, emb_server.get());
          if (rp.plan.overlap) push_ch = make_channel(*emb, emb_server.get());
        }
        ClientRuntime(clients[c], rp, *agg_ch, emb_ch.get(), push_ch.get(), opt.hooks).run();
      } catch (...) {
        errors[c] = std::current_exception();
        agg.abort("client " + std::to_string(c) + " failed");
      }
    });
  }
  for (auto& t : threads) t.join();
  // Report the root cause rather than the aborts it triggered in other clients.
  std::exception_ptr first;
  for (auto& e : errors) {
    if (!e) continue;
    if (!first) first = e;
    try {
      std::rethrow_exception(e);
    } catch (const wire::WireError& w) {
      if (w.code == wire::ErrorCode::aborted) continue;
    } catch (...) {
    }
    std::rethrow_exception(e);
  }
  if (first) std::rethrow_exception(first);
  return servers.collect();
}

}  // namespace opes
