#pragma once

#include <opes/binary_io.hpp>
#include <opes/computation_graph.hpp>
#include <opes/embedding_cache.hpp>
#include <opes/graph.hpp>
#include <opes/partition.hpp>
#include <opes/rng.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace opes {

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dense row-major matrix.
template <class T>
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, T{}) {}

  T& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<T> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const T> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  bool operator==(const Matrix&) const = default;
};

template <class T>
struct LayerParams {
  Matrix<T> weight;  // d_in x d_out
  std::vector<T> bias;
  bool operator==(const LayerParams&) const = default;
};

/// Weights and biases of an L-layer mean-aggregation GraphConv model.
template <class T>
struct ModelParams {
  std::vector<LayerParams<T>> layers;

  std::uint32_t num_layers() const noexcept { return static_cast<std::uint32_t>(layers.size()); }

  std::vector<std::uint32_t> dims() const {
    std::vector<std::uint32_t> d;
    if (layers.empty()) return d;
    d.push_back(static_cast<std::uint32_t>(layers.front().weight.rows));
    for (const auto& l : layers) d.push_back(static_cast<std::uint32_t>(l.weight.cols));
    return d;
  }

  std::size_t num_scalars() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.weight.data.size() + l.bias.size();
    return n;
  }

  /// Visits every tensor in serialization order W1, b1, ..., WL, bL.
  template <class F>
  void for_each_tensor(F&& f) {
    for (auto& l : layers) {
      f(std::span<T>(l.weight.data));
      f(std::span<T>(l.bias));
    }
  }
  template <class F>
  void for_each_tensor(F&& f) const {
    for (const auto& l : layers) {
      f(std::span<const T>(l.weight.data));
      f(std::span<const T>(l.bias));
    }
  }

  bool operator==(const ModelParams&) const = default;
};

template <class T>
ModelParams<T> zeros_like(const ModelParams<T>& p) {
  ModelParams<T> z;
  for (const auto& l : p.layers) z.layers.push_back({Matrix<T>(l.weight.rows, l.weight.cols), std::vector<T>(l.bias.size())});
  return z;
}

inline std::vector<std::uint32_t> model_dims(std::uint32_t feature_dim, std::uint32_t hidden_dim,
                                             std::uint32_t num_classes, std::uint32_t num_layers) {
  if (num_layers < 1) throw ShapeError("model needs at least one layer");
  std::vector<std::uint32_t> d{feature_dim};
  for (std::uint32_t l = 1; l < num_layers; ++l) d.push_back(hidden_dim);
  d.push_back(num_classes);
  return d;
}

/// Glorot-uniform weights, zero biases.
template <class T>
ModelParams<T> init_params(std::span<const std::uint32_t> dims, std::uint64_t seed) {
  if (dims.size() < 2) throw ShapeError("model needs at least one layer");
  Rng rng(derive_seed(seed, {0x1417}));
  ModelParams<T> p;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    LayerParams<T> layer{Matrix<T>(dims[l], dims[l + 1]), std::vector<T>(dims[l + 1], T{})};
    const double limit = std::sqrt(6.0 / static_cast<double>(dims[l] + dims[l + 1]));
    for (auto& w : layer.weight.data) w = static_cast<T>(rng.uniform(-limit, limit));
    p.layers.push_back(std::move(layer));
  }
  return p;
}

template <class To, class From>
ModelParams<To> cast_params(const ModelParams<From>& p) {
  ModelParams<To> out;
  for (const auto& l : p.layers) {
    LayerParams<To> c{Matrix<To>(l.weight.rows, l.weight.cols), std::vector<To>(l.bias.size())};
    std::transform(l.weight.data.begin(), l.weight.data.end(), c.weight.data.begin(),
                   [](From x) { return static_cast<To>(x); });
    std::transform(l.bias.begin(), l.bias.end(), c.bias.begin(), [](From x) { return static_cast<To>(x); });
    out.layers.push_back(std::move(c));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dense kernels shared by the minibatch and full-neighborhood paths so both
// produce identical arithmetic.

namespace detail {

/// out[r] = in[r] * W + b.
template <class T>
void affine(const Matrix<T>& in, const LayerParams<T>& p, Matrix<T>& out) {
  const std::size_t d_in = p.weight.rows;
  const std::size_t d_out = p.weight.cols;
  out = Matrix<T>(in.rows, d_out);
  for (std::size_t r = 0; r < in.rows; ++r) {
    T* o = out.data.data() + r * d_out;
    for (std::size_t c = 0; c < d_out; ++c) o[c] = p.bias[c];
    const T* x = in.data.data() + r * d_in;
    for (std::size_t k = 0; k < d_in; ++k) {
      const T xk = x[k];
      const T* w = p.weight.data.data() + k * d_out;
      for (std::size_t c = 0; c < d_out; ++c) o[c] += xk * w[c];
    }
  }
}

template <class T>
Matrix<T> relu(const Matrix<T>& a) {
  Matrix<T> h = a;
  for (auto& x : h.data) x = x > T{} ? x : T{};
  return h;
}

/// Mean of `rows` of `src` written into `dst_row`, summing in list order.
template <class T, class Idx>
void mean_rows(const Matrix<T>& src, std::span<const Idx> rows, std::span<T> dst_row) {
  std::fill(dst_row.begin(), dst_row.end(), T{});
  for (auto r : rows) {
    const T* s = src.data.data() + static_cast<std::size_t>(r) * src.cols;
    for (std::size_t c = 0; c < src.cols; ++c) dst_row[c] += s[c];
  }
  const T count = static_cast<T>(rows.size());
  for (auto& x : dst_row) x /= count;
}

}  // namespace detail

/// Intermediates of one layer, kept for the backward pass.
template <class T>
struct LayerActivations {
  Matrix<T> aggregated;      // z: mean over self + sampled sources
  Matrix<T> pre_activation;  // z W + b
  Matrix<T> output;          // ReLU(pre) for hidden layers, pre for the last
};

/// Runs one GNN layer over a block. `h_src` rows align with block.src.
template <class T>
LayerActivations<T> layer_forward_full(const LayerParams<T>& params, const Block& block, const Matrix<T>& h_src,
                                       bool last_layer) {
  if (h_src.rows != block.num_src()) throw ShapeError("source embedding rows do not cover block sources");
  if (h_src.cols != params.weight.rows) throw ShapeError("embedding width does not match layer input");
  LayerActivations<T> out;
  out.aggregated = Matrix<T>(block.num_dst(), h_src.cols);
  for (std::uint32_t j = 0; j < block.num_dst(); ++j) {
    std::span<const std::uint32_t> agg(block.agg_src.data() + block.agg_offsets[j],
                                       block.agg_offsets[j + 1] - block.agg_offsets[j]);
    if (agg.empty()) throw ShapeError("destination without self source");
    detail::mean_rows(h_src, agg, out.aggregated.row(j));
  }
  detail::affine(out.aggregated, params, out.pre_activation);
  out.output = last_layer ? out.pre_activation : detail::relu(out.pre_activation);
  return out;
}

template <class T>
Matrix<T> layer_forward(const LayerParams<T>& params, const Block& block, const Matrix<T>& h_src, bool last_layer) {
  return layer_forward_full(params, block, h_src, last_layer).output;
}

/// Feature and cached-embedding rows for the sources of a block.
template <class T>
Matrix<T> gather_inputs(const Block& block, const PartitionedSubgraph& sub, const EmbeddingCache* cache,
                        const Matrix<T>* previous_output, std::uint32_t width) {
  Matrix<T> h(block.num_src(), width);
  for (std::uint32_t s = 0; s < block.num_src(); ++s) {
    const CgNode& node = block.src[s];
    auto row = h.row(s);
    if (node.remote) {
      if (cache == nullptr) throw MissingEmbedding(node.global, block.cache_layer(s));
      auto vec = cache->get(node.global, block.cache_layer(s));
      if (vec.size() != width) throw ShapeError("cached embedding width mismatch");
      std::transform(vec.begin(), vec.end(), row.begin(), [](float x) { return static_cast<T>(x); });
    } else if (block.layer == 1) {
      auto feat = sub.feature_row(node.index);
      if (feat.size() != width) throw ShapeError("feature width mismatch");
      std::transform(feat.begin(), feat.end(), row.begin(), [](float x) { return static_cast<T>(x); });
    } else {
      auto prev = previous_output->row(s);  // local sources mirror the previous block's destinations
      std::copy(prev.begin(), prev.end(), row.begin());
    }
  }
  return h;
}

template <class T>
struct ForwardTrace {
  std::vector<Matrix<T>> inputs;
  std::vector<LayerActivations<T>> layers;
  const Matrix<T>& logits() const { return layers.back().output; }
};

template <class T>
ForwardTrace<T> minibatch_forward(const ModelParams<T>& params, const ComputationGraph& cg,
                                  const PartitionedSubgraph& sub, const EmbeddingCache* cache) {
  if (cg.num_layers() != params.num_layers()) throw ShapeError("computation graph depth != model depth");
  ForwardTrace<T> trace;
  const auto dims = params.dims();
  for (std::uint32_t b = 0; b < cg.num_layers(); ++b) {
    const Block& block = cg.blocks[b];
    const Matrix<T>* prev = b == 0 ? nullptr : &trace.layers.back().output;
    trace.inputs.push_back(gather_inputs<T>(block, sub, cache, prev, dims[b]));
    trace.layers.push_back(layer_forward_full(params.layers[b], block, trace.inputs.back(), b + 1 == cg.num_layers()));
  }
  return trace;
}

/// Mean softmax cross-entropy of `logits` rows against `labels`; writes
/// d(loss)/d(logits) into `grad` when non-null.
template <class T>
T softmax_cross_entropy(const Matrix<T>& logits, std::span<const std::uint32_t> labels, Matrix<T>* grad) {
  if (labels.size() != logits.rows || logits.rows == 0) throw ShapeError("label count mismatch");
  T total{};
  if (grad) *grad = Matrix<T>(logits.rows, logits.cols);
  const T inv_n = T{1} / static_cast<T>(logits.rows);
  for (std::size_t r = 0; r < logits.rows; ++r) {
    auto row = logits.row(r);
    if (labels[r] >= logits.cols) throw ShapeError("label outside class range");
    const T max = *std::max_element(row.begin(), row.end());
    T sum{};
    for (T x : row) sum += std::exp(x - max);
    const T log_z = max + std::log(sum);
    total += log_z - row[labels[r]];
    if (grad) {
      for (std::size_t c = 0; c < logits.cols; ++c) {
        const T prob = std::exp(row[c] - log_z);
        (*grad)(r, c) = (prob - (c == labels[r] ? T{1} : T{0})) * inv_n;
      }
    }
  }
  return total * inv_n;
}

template <class T>
struct LossAndGrad {
  T loss{};
  ModelParams<T> grads;
};

/// Forward + exact backward over a sampled computation graph. Remote
/// (cache-filled) rows are constants: no gradient flows into them.
template <class T>
LossAndGrad<T> loss_and_grad(const ModelParams<T>& params, const ComputationGraph& cg, const PartitionedSubgraph& sub,
                             const EmbeddingCache* cache) {
  std::vector<std::uint32_t> labels;
  labels.reserve(cg.targets.size());
  for (auto t : cg.targets) {
    if (t >= sub.num_local) throw ShapeError("target is not a local vertex");
    if (sub.labels[t] >= sub.num_classes) throw ShapeError("unlabeled target: " + std::to_string(sub.node_ids[t]));
    labels.push_back(sub.labels[t]);
  }
  const auto trace = minibatch_forward(params, cg, sub, cache);

  LossAndGrad<T> out;
  out.grads = zeros_like(params);
  Matrix<T> d_out;
  out.loss = softmax_cross_entropy(trace.logits(), labels, &d_out);
  if (!std::isfinite(static_cast<double>(out.loss))) throw std::runtime_error("non-finite loss");

  for (std::uint32_t b = cg.num_layers(); b-- > 0;) {
    const Block& block = cg.blocks[b];
    const auto& act = trace.layers[b];
    const auto& p = params.layers[b];
    auto& g = out.grads.layers[b];
    const std::size_t d_in = p.weight.rows;
    const std::size_t d_o = p.weight.cols;

    Matrix<T> d_pre = d_out;
    if (b + 1 != cg.num_layers()) {
      for (std::size_t i = 0; i < d_pre.data.size(); ++i)
        if (!(act.pre_activation.data[i] > T{})) d_pre.data[i] = T{};
    }
    for (std::uint32_t j = 0; j < block.num_dst(); ++j) {
      const T* z = act.aggregated.data.data() + j * d_in;
      const T* dp = d_pre.data.data() + j * d_o;
      for (std::size_t k = 0; k < d_in; ++k) {
        T* gw = g.weight.data.data() + k * d_o;
        for (std::size_t c = 0; c < d_o; ++c) gw[c] += z[k] * dp[c];
      }
      for (std::size_t c = 0; c < d_o; ++c) g.bias[c] += dp[c];
    }
    if (b == 0) break;

    // d(loss)/d(z) then scatter into the local source rows only.
    Matrix<T> d_src(block.num_local_src, d_in);
    std::vector<T> dz(d_in);
    for (std::uint32_t j = 0; j < block.num_dst(); ++j) {
      const T* dp = d_pre.data.data() + j * d_o;
      for (std::size_t k = 0; k < d_in; ++k) {
        const T* w = p.weight.data.data() + k * d_o;
        T acc{};
        for (std::size_t c = 0; c < d_o; ++c) acc += dp[c] * w[c];
        dz[k] = acc;
      }
      const auto begin = block.agg_offsets[j];
      const auto end = block.agg_offsets[j + 1];
      const T inv = T{1} / static_cast<T>(end - begin);
      for (auto e = begin; e < end; ++e) {
        const auto s = block.agg_src[e];
        if (s >= block.num_local_src) continue;
        T* row = d_src.data.data() + static_cast<std::size_t>(s) * d_in;
        for (std::size_t k = 0; k < d_in; ++k) row[k] += dz[k] * inv;
      }
    }
    d_out = std::move(d_src);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Adam

template <class T>
struct AdamState {
  ModelParams<T> first_moment;
  ModelParams<T> second_moment;
  std::uint64_t step = 0;
  T lr = T(0.001);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);

  static AdamState for_params(const ModelParams<T>& p, T lr = T(0.001)) {
    AdamState s;
    s.first_moment = zeros_like(p);
    s.second_moment = zeros_like(p);
    s.lr = lr;
    return s;
  }
};

template <class T>
void adam_step(ModelParams<T>& params, const ModelParams<T>& grads, AdamState<T>& state) {
  if (params.dims() != grads.dims() || params.dims() != state.first_moment.dims())
    throw ShapeError("adam: shape mismatch");
  ++state.step;
  const T bc1 = T{1} - std::pow(state.beta1, static_cast<T>(state.step));
  const T bc2 = T{1} - std::pow(state.beta2, static_cast<T>(state.step));
  auto update = [&](std::span<T> p, std::span<const T> g, std::span<T> m, std::span<T> v) {
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = state.beta1 * m[i] + (T{1} - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (T{1} - state.beta2) * g[i] * g[i];
      const T m_hat = m[i] / bc1;
      const T v_hat = v[i] / bc2;
      p[i] -= state.lr * m_hat / (std::sqrt(v_hat) + state.eps);
    }
  };
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    auto& p = params.layers[l];
    const auto& g = grads.layers[l];
    auto& m = state.first_moment.layers[l];
    auto& v = state.second_moment.layers[l];
    update(p.weight.data, g.weight.data, m.weight.data, v.weight.data);
    update(p.bias, g.bias, m.bias, v.bias);
  }
}

// ---------------------------------------------------------------------------
// Full-neighborhood layer-wise inference

/// Propagates over `n` nodes. `for_neighbors(i, f)` must call f(j) for each
/// neighbor j < n in ascending global order (self excluded); the self row is
/// merged into that order so the summation matches the minibatch path.
/// Returns h^1..h^upto_layer.
template <class T, class NeighborFn, class FeatureFn>
std::vector<Matrix<T>> propagate(const ModelParams<T>& params, std::size_t n, NeighborFn&& for_neighbors,
                                 FeatureFn&& feature_row, std::uint32_t upto_layer) {
  if (upto_layer > params.num_layers()) throw ShapeError("upto_layer exceeds model depth");
  const auto dims = params.dims();
  Matrix<T> h(n, dims[0]);
  for (std::size_t i = 0; i < n; ++i) {
    auto feat = feature_row(i);
    if (feat.size() != dims[0]) throw ShapeError("feature width mismatch");
    std::transform(feat.begin(), feat.end(), h.row(i).begin(), [](float x) { return static_cast<T>(x); });
  }
  std::vector<Matrix<T>> outputs;
  std::vector<std::size_t> agg;
  for (std::uint32_t l = 1; l <= upto_layer; ++l) {
    Matrix<T> z(n, h.cols);
    for (std::size_t i = 0; i < n; ++i) {
      agg.clear();
      bool self_placed = false;
      for_neighbors(i, [&](std::size_t j) {
        if (!self_placed && j > i) {
          agg.push_back(i);
          self_placed = true;
        }
        agg.push_back(j);
      });
      if (!self_placed) agg.push_back(i);
      detail::mean_rows(h, std::span<const std::size_t>(agg), z.row(i));
    }
    Matrix<T> pre;
    detail::affine(z, params.layers[l - 1], pre);
    h = l == params.num_layers() ? std::move(pre) : detail::relu(pre);
    outputs.push_back(h);
  }
  return outputs;
}

/// h^1..h^upto_layer for every local vertex of `sub`, using local-local
/// edges only (remote vertices are ignored entirely).
template <class T>
std::vector<Matrix<T>> layerwise_inference(const ModelParams<T>& params, const PartitionedSubgraph& sub,
                                           std::uint32_t upto_layer) {
  return propagate<T>(
      params, sub.num_local,
      [&](std::size_t i, auto&& f) {
        for (auto t : sub.neighbors(static_cast<std::uint32_t>(i)))
          if (t < sub.num_local) f(static_cast<std::size_t>(t));
      },
      [&](std::size_t i) { return sub.feature_row(static_cast<std::uint32_t>(i)); }, upto_layer);
}

/// Full-graph inference; returns h^1..h^upto_layer over all vertices.
template <class T>
std::vector<Matrix<T>> graph_inference(const ModelParams<T>& params, const Graph& g, std::uint32_t upto_layer) {
  return propagate<T>(
      params, g.num_nodes,
      [&](std::size_t i, auto&& f) {
        for (auto t : g.neighbors(i)) f(static_cast<std::size_t>(t));
      },
      [&](std::size_t i) { return g.feature_row(i); }, upto_layer);
}

template <class T>
std::uint32_t argmax_row(std::span<const T> row) {
  return static_cast<std::uint32_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

// ---------------------------------------------------------------------------
// Serialization: flat f32 blob in order W1, b1, ..., WL, bL.

template <class T>
std::vector<float> flatten_params(const ModelParams<T>& p) {
  std::vector<float> flat;
  flat.reserve(p.num_scalars());
  p.for_each_tensor([&](std::span<const T> t) {
    for (T x : t) flat.push_back(static_cast<float>(x));
  });
  return flat;
}

template <class T>
ModelParams<T> unflatten_params(std::span<const float> flat, std::span<const std::uint32_t> dims) {
  ModelParams<T> p;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l)
    p.layers.push_back({Matrix<T>(dims[l], dims[l + 1]), std::vector<T>(dims[l + 1])});
  if (flat.size() != p.num_scalars()) throw ShapeError("parameter blob size does not match dims");
  std::size_t pos = 0;
  p.for_each_tensor([&](std::span<T> t) {
    for (auto& x : t) x = static_cast<T>(flat[pos++]);
  });
  return p;
}

template <class T>
void save_model(const ModelParams<T>& p, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream meta(dir / "meta", std::ios::trunc);
  if (!meta) throw IoError("cannot write model meta");
  const auto dims = p.dims();
  meta << "num_layers=" << p.num_layers() << "\ndims=";
  for (std::size_t i = 0; i < dims.size(); ++i) meta << (i ? "," : "") << dims[i];
  meta << '\n';
  write_le_array<float>(dir / "params.bin", flatten_params(p));
}

template <class T>
ModelParams<T> load_model(const std::filesystem::path& dir) {
  const auto meta = read_key_values(dir / "meta");
  const auto layers = require_u64(meta, "num_layers", "model meta");
  std::vector<std::uint32_t> dims;
  std::stringstream ss(meta.count("dims") ? meta.at("dims") : "");
  std::string item;
  while (std::getline(ss, item, ',')) dims.push_back(static_cast<std::uint32_t>(std::stoul(item)));
  if (dims.size() != layers + 1) throw IoError("model meta: dims do not match num_layers");
  std::size_t count = 0;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) count += std::size_t{dims[l]} * dims[l + 1] + dims[l + 1];
  const auto flat = read_le_array<float>(dir / "params.bin", count);
  return unflatten_params<T>(flat, dims);
}

}  // namespace opes
