#pragma once

#include <opes/gnn.hpp>
#include <opes/transport.hpp>
#include <opes/wire.hpp>

#include <chrono>
#include <condition_variable>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace opes {

struct PhaseTimings {
  double pull_s = 0;
  double sample_s = 0;
  double train_s = 0;
  double push_s = 0;
  double round_s = 0;
  bool operator==(const PhaseTimings&) const = default;
};

/// What a client uploads at the end of a stage. Stage 0 (pre-training)
/// carries no trained model; its params are ignored by the server.
struct ClientReport {
  std::uint32_t client_id = 0;
  std::uint32_t round = 0;
  ModelParams<float> params;
  std::uint64_t num_train_samples = 0;
  PhaseTimings timings;
  std::uint64_t pulled_keys = 0;
  std::uint64_t pushed_keys = 0;
};

/// Sample-weighted elementwise average with f64 accumulation, summed in
/// report order.
inline ModelParams<float> fedavg(std::span<const ClientReport> reports) {
  if (reports.empty()) throw ShapeError("fedavg: no reports");
  const auto dims = reports.front().params.dims();
  double total = 0;
  for (const auto& r : reports) {
    if (r.params.dims() != dims) throw ShapeError("fedavg: parameter shape mismatch");
    total += static_cast<double>(r.num_train_samples);
  }
  if (total <= 0) throw ShapeError("fedavg: zero total samples");

  std::vector<double> acc(reports.front().params.num_scalars(), 0.0);
  for (const auto& r : reports) {
    const double w = static_cast<double>(r.num_train_samples) / total;
    std::size_t i = 0;
    r.params.for_each_tensor([&](std::span<const float> t) {
      for (float x : t) acc[i++] += w * static_cast<double>(x);
    });
  }
  std::vector<float> flat(acc.size());
  std::transform(acc.begin(), acc.end(), flat.begin(), [](double x) { return static_cast<float>(x); });
  return unflatten_params<float>(flat, dims);
}

namespace wire_model {

inline void put_params(wire::Writer& w, const ModelParams<float>& p) {
  const auto dims = p.dims();
  w.u32(static_cast<std::uint32_t>(dims.size()));
  for (auto d : dims) w.u32(d);
  w.f32s(flatten_params(p));
}

inline ModelParams<float> get_params(wire::Reader& r) {
  const auto n = r.u32();
  if (n < 2 || n > 64) throw wire::WireError(wire::ErrorCode::malformed, "bad layer count");
  std::vector<std::uint32_t> dims(n);
  std::size_t count = 0;
  for (auto& d : dims) d = r.u32();
  for (std::size_t l = 0; l + 1 < n; ++l) count += std::size_t{dims[l]} * dims[l + 1] + dims[l + 1];
  r.need(count * 4);
  std::vector<float> flat(count);
  r.f32s(flat);
  return unflatten_params<float>(flat, dims);
}

}  // namespace wire_model

/// One accuracy point recorded by the server after aggregating a round.
struct ServerRecord {
  std::uint32_t round = 0;
  double wall_clock_s = 0;
  double round_s = 0;
  double test_accuracy = 0;
};

/// The aggregation server. Holds the global model for each round, collects
/// client reports, averages them and evaluates the result. Barriers
/// (ROUND_DONE, PULL_DONE) release once all clients have arrived.
class AggregationService final : public Service {
 public:
  using Evaluator = std::function<double(const ModelParams<float>&)>;
  enum class BarrierKind : std::uint8_t { round_done, pull_done };
  using ReleaseHook = std::function<void(BarrierKind, std::uint32_t stage)>;

  AggregationService(std::uint32_t num_clients, std::uint32_t rounds, ModelParams<float> initial, Evaluator evaluate,
                     bool keep_params_history = false)
      : num_clients_(num_clients),
        rounds_(rounds),
        evaluate_(std::move(evaluate)),
        keep_history_(keep_params_history),
        registered_(num_clients, false),
        finished_(num_clients, false),
        start_(std::chrono::steady_clock::now()) {
    models_.push_back(std::move(initial));
    if (keep_history_) history_.push_back(models_.back());
  }

  void on_release(ReleaseHook hook) { release_hook_ = std::move(hook); }
  void restart_clock() { start_ = std::chrono::steady_clock::now(); }

  /// Fails every pending and future request.
  void abort(const std::string& reason) {
    std::lock_guard lock(mu_);
    if (!abort_reason_) abort_reason_ = reason;
    cv_.notify_all();
  }
  std::optional<std::string> abort_reason() const {
    std::lock_guard lock(mu_);
    return abort_reason_;
  }

  bool wait_finished(std::chrono::milliseconds timeout) {
    std::unique_lock lock(mu_);
    return cv_.wait_for(lock, timeout, [&] { return all_finished() || abort_reason_.has_value(); });
  }

  /// Waits until every registered client has hung up. The final barrier
  /// marks the run finished before its replies are written, so a server
  /// must not close connections until this returns true.
  bool wait_disconnected(std::chrono::milliseconds timeout) {
    std::unique_lock lock(mu_);
    return cv_.wait_for(lock, timeout, [&] { return connected_ == 0; });
  }

  std::vector<ServerRecord> server_records() const {
    std::lock_guard lock(mu_);
    return records_;
  }
  std::vector<ClientReport> client_reports() const {
    std::lock_guard lock(mu_);
    return reports_;
  }
  /// Global model after each round (index 0 = initial); only when enabled.
  std::vector<ModelParams<float>> params_history() const {
    std::lock_guard lock(mu_);
    return history_;
  }
  ModelParams<float> latest_model() const {
    std::lock_guard lock(mu_);
    return models_.back();
  }

  wire::Frame handle(const wire::Frame& req, Session& session) override {
    wire::Reader r(req.payload);
    wire::Writer w;
    switch (req.opcode) {
      case wire::reg: {
        const auto id = r.u32();
        r.expect_end();
        if (id >= num_clients_) throw wire::WireError(wire::ErrorCode::unknown_client, "unknown client");
        std::lock_guard lock(mu_);
        if (registered_[id]) throw wire::WireError(wire::ErrorCode::unknown_client, "client already registered");
        registered_[id] = true;
        ++connected_;
        session.client_id = id;
        w.u32(num_clients_).u32(rounds_);
        break;
      }
      case wire::get_model: {
        const auto round = r.u32();
        r.expect_end();
        require_registered(session);
        if (round > rounds_) throw wire::WireError(wire::ErrorCode::bad_round, "round beyond schedule");
        const std::size_t index = round == 0 ? 0 : round - 1;
        std::unique_lock lock(mu_);
        cv_.wait(lock, [&] { return models_.size() > index || abort_reason_; });
        check_abort();
        w.u32(round);
        wire_model::put_params(w, models_[index]);
        break;
      }
      case wire::put_model: {
        ClientReport rep;
        rep.client_id = require_registered(session);
        rep.round = r.u32();
        rep.num_train_samples = r.u64();
        rep.params = wire_model::get_params(r);
        rep.timings = {r.f64(), r.f64(), r.f64(), r.f64(), r.f64()};
        rep.pulled_keys = r.u64();
        rep.pushed_keys = r.u64();
        r.expect_end();
        accept_report(std::move(rep));
        w.u32(0);
        break;
      }
      case wire::round_done:
      case wire::pull_done: {
        const auto stage = r.u32();
        r.expect_end();
        const auto id = require_registered(session);
        const auto kind = req.opcode == wire::round_done ? BarrierKind::round_done : BarrierKind::pull_done;
        barrier(kind, stage, id);
        w.u32(stage);
        break;
      }
      default:
        throw wire::WireError(wire::ErrorCode::bad_opcode, "unknown opcode " + std::to_string(req.opcode));
    }
    return {wire::response_to(req.opcode), w.take()};
  }

  void on_disconnect(const Session& session, bool) override {
    if (!session.client_id) return;
    std::lock_guard lock(mu_);
    --connected_;
    cv_.notify_all();
    if (!finished_[*session.client_id] && !abort_reason_) {
      abort_reason_ = "client " + std::to_string(*session.client_id) + " disconnected";
      cv_.notify_all();
    }
  }

 private:
  double elapsed_locked() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count() - eval_seconds_;
  }

  double timed_evaluate(const ModelParams<float>& p) {
    const auto t = std::chrono::steady_clock::now();
    const double acc = evaluate_ ? evaluate_(p) : 0.0;
    eval_seconds_ += std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
    return acc;
  }

  std::uint32_t require_registered(const Session& s) const {
    if (!s.client_id) throw wire::WireError(wire::ErrorCode::not_registered, "REGISTER required");
    return *s.client_id;
  }

  void check_abort() const {
    if (abort_reason_) throw wire::WireError(wire::ErrorCode::aborted, "run aborted: " + *abort_reason_);
  }

  bool all_finished() const { return std::all_of(finished_.begin(), finished_.end(), [](bool b) { return b; }); }

  void accept_report(ClientReport rep) {
    std::lock_guard lock(mu_);
    check_abort();
    const std::uint32_t expected_round = static_cast<std::uint32_t>(models_.size()) - 1 + (pretrain_done_ ? 1 : 0);
    if (rep.round != expected_round)
      throw wire::WireError(wire::ErrorCode::bad_round, "report for round " + std::to_string(rep.round) +
                                                            ", expected " + std::to_string(expected_round));
    if (rep.params.dims() != models_.front().dims())
      throw wire::WireError(wire::ErrorCode::shape_mismatch, "model shape mismatch");
    auto& slot = pending_[rep.client_id];
    if (slot) throw wire::WireError(wire::ErrorCode::bad_round, "duplicate report");
    slot = std::move(rep);
    if (pending_.size() < num_clients_) return;

    std::vector<ClientReport> ordered;
    for (auto& [id, report] : pending_) ordered.push_back(std::move(*report));
    pending_.clear();
    if (expected_round > 0) {
      models_.push_back(fedavg(ordered));
      if (keep_history_) history_.push_back(models_.back());
      const double wall = elapsed_locked();
      const double acc = timed_evaluate(models_.back());
      const double prev = records_.empty() ? 0.0 : records_.back().wall_clock_s;
      records_.push_back({expected_round, wall, wall - prev, acc});
    }
    for (auto& o : ordered) {
      o.params = {};  // reports keep timings and counts only
      reports_.push_back(std::move(o));
    }
    cv_.notify_all();
  }

  void barrier(BarrierKind kind, std::uint32_t stage, std::uint32_t id) {
    std::unique_lock lock(mu_);
    check_abort();
    auto& b = barriers_[{kind, stage}];
    if (b.arrived.empty()) b.arrived.assign(num_clients_, false);
    if (b.arrived[id]) throw wire::WireError(wire::ErrorCode::bad_round, "barrier entered twice");
    b.arrived[id] = true;
    if (++b.count == num_clients_) {
      if (kind == BarrierKind::round_done && stage == 0) {
        pretrain_done_ = true;
        const double wall = elapsed_locked();
        records_.push_back({0, wall, wall, timed_evaluate(models_.front())});
      }
      if (kind == BarrierKind::round_done && stage == rounds_) finished_.assign(num_clients_, true);
      if (release_hook_) release_hook_(kind, stage);
      b.released = true;
      cv_.notify_all();
    }
    cv_.wait(lock, [&] { return b.released || abort_reason_; });
    check_abort();
  }

  struct Barrier {
    std::vector<bool> arrived;
    std::uint32_t count = 0;
    bool released = false;
  };

  std::uint32_t num_clients_;
  std::uint32_t rounds_;
  Evaluator evaluate_;
  bool keep_history_;
  ReleaseHook release_hook_;

  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::vector<bool> registered_;
  std::vector<bool> finished_;
  std::uint32_t connected_ = 0;
  std::optional<std::string> abort_reason_;
  bool pretrain_done_ = false;
  std::vector<ModelParams<float>> models_;
  std::vector<ModelParams<float>> history_;
  std::map<std::uint32_t, std::optional<ClientReport>> pending_;
  std::vector<ClientReport> reports_;
  std::vector<ServerRecord> records_;
  std::map<std::pair<BarrierKind, std::uint32_t>, Barrier> barriers_;
  std::chrono::steady_clock::time_point start_;
  double eval_seconds_ = 0;
};

/// Client side of the aggregation protocol.
class AggregationClient {
 public:
  explicit AggregationClient(Channel& channel) : channel_(channel) {}

  /// Returns {num_clients, rounds}.
  std::pair<std::uint32_t, std::uint32_t> register_client(std::uint32_t id) {
    wire::Writer w;
    w.u32(id);
    const auto resp = channel_.call({wire::reg, w.take()});
    wire::expect_response(resp, wire::reg);
    wire::Reader r(resp.payload);
    const auto k = r.u32();
    return {k, r.u32()};
  }

  ModelParams<float> get_model(std::uint32_t round) {
    wire::Writer w;
    w.u32(round);
    const auto resp = channel_.call({wire::get_model, w.take()});
    wire::expect_response(resp, wire::get_model);
    wire::Reader r(resp.payload);
    r.u32();
    auto p = wire_model::get_params(r);
    r.expect_end();
    return p;
  }

  void put_model(const ClientReport& rep) {
    wire::Writer w;
    w.u32(rep.round).u64(rep.num_train_samples);
    wire_model::put_params(w, rep.params);
    const auto& t = rep.timings;
    w.f64(t.pull_s).f64(t.sample_s).f64(t.train_s).f64(t.push_s).f64(t.round_s);
    w.u64(rep.pulled_keys).u64(rep.pushed_keys);
    const auto resp = channel_.call({wire::put_model, w.take()});
    wire::expect_response(resp, wire::put_model);
  }

  void round_done(std::uint32_t stage) { barrier(wire::round_done, stage); }
  void pull_done(std::uint32_t round) { barrier(wire::pull_done, round); }

 private:
  void barrier(std::uint8_t op, std::uint32_t stage) {
    wire::Writer w;
    w.u32(stage);
    const auto resp = channel_.call({op, w.take()});
    wire::expect_response(resp, op);
  }

  Channel& channel_;
};

}  // namespace opes
