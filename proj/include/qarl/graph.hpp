// SPDX-License-Identifier: Apache-2.0
//
// Minimal reverse-mode differentiation over dense row-major tensors.
//
// An Expr is a static DAG built once (nodes can only reference earlier nodes,
// so creation order is a topological order). forward() evaluates it against a
// set of bindings and records every node value on a Tape; gradient() walks the
// tape backwards in a fixed order, so gradients are bit-reproducible.
//
// qmatmul nodes are where quantization enters. In low-bit mode the weight is
// quantized on the fly (or taken from a published low-bit binding) and the
// product runs through quantsim::qgemm. The backward pass is full precision and
// uses a clamp-aware straight-through estimator: the quantizer is treated as the
// identity except where its forward clamp saturated, where the gradient is zero.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "qarl/quantsim.hpp"
#include "qarl/rng.hpp"
#include "qarl/tensor.hpp"

namespace qarl {

enum class Nonlinearity : std::uint8_t { tanh, relu, gelu, silu };

inline Nonlinearity parse_nonlinearity(const std::string& s) {
  if (s == "tanh") return Nonlinearity::tanh;
  if (s == "relu") return Nonlinearity::relu;
  if (s == "gelu") return Nonlinearity::gelu;
  if (s == "silu") return Nonlinearity::silu;
  throw std::invalid_argument("unknown nonlinearity: " + s);
}

inline std::string to_string(Nonlinearity n) {
  switch (n) {
    case Nonlinearity::tanh: return "tanh";
    case Nonlinearity::relu: return "relu";
    case Nonlinearity::gelu: return "gelu";
    case Nonlinearity::silu: return "silu";
  }
  return "?";
}

/// Precision of a forward pass: full, or low-bit under a WxAy spec.
struct PrecisionMode {
  std::optional<QuantSpec> spec;

  static PrecisionMode full() { return {}; }
  static PrecisionMode lowbit(const QuantSpec& s) { return {s}; }
  bool is_lowbit() const { return spec.has_value(); }
  std::string name() const { return spec ? "lowbit(" + spec->name() + ")" : "full"; }
};

enum class OpKind : std::uint8_t {
  input,
  parameter,
  matmul,
  qmatmul,
  add,
  nonlinearity,
  layer_norm,
  log_softmax,
  gather_rows,
  pick,
  reshape,
  scale,
  reduce_sum,
  reduce_mean,
};

using NodeId = std::size_t;

struct Node {
  OpKind kind = OpKind::input;
  std::vector<NodeId> operands;
  std::string name;  // input/parameter binding, index binding, or scalar binding
  std::optional<QuantSpec> spec;  // qmatmul override; otherwise the mode's spec applies
  Nonlinearity nonlinearity = Nonlinearity::tanh;
  std::size_t cols = 0;  // reshape target width
  double constant = 1.0;
};

class Expr {
 public:
  static Node make(OpKind kind, std::vector<NodeId> operands, std::string name = {}) {
    Node n;
    n.kind = kind;
    n.operands = std::move(operands);
    n.name = std::move(name);
    return n;
  }

  NodeId input(std::string name) { return push(make(OpKind::input, {}, std::move(name))); }
  NodeId parameter(std::string name) { return push(make(OpKind::parameter, {}, std::move(name))); }

  /// x [N,K] times w [O,K] transposed.
  NodeId matmul(NodeId x, NodeId w) { return push(make(OpKind::matmul, {x, w})); }

  /// Quantization-aware matmul. w must be a parameter node.
  NodeId qmatmul(NodeId x, NodeId w, std::optional<QuantSpec> spec = std::nullopt) {
    check(w);
    if (nodes_[w].kind != OpKind::parameter) throw std::invalid_argument("qmatmul weight must be a parameter");
    Node n = make(OpKind::qmatmul, {x, w});
    n.spec = std::move(spec);
    return push(std::move(n));
  }

  /// Elementwise sum; b may also be a bias broadcast over rows.
  NodeId add(NodeId a, NodeId b) { return push(make(OpKind::add, {a, b})); }
  NodeId nonlinearity(NodeId x, Nonlinearity f) {
    Node n = make(OpKind::nonlinearity, {x});
    n.nonlinearity = f;
    return push(std::move(n));
  }
  NodeId layer_norm(NodeId x, NodeId gain, NodeId bias) { return push(make(OpKind::layer_norm, {x, gain, bias})); }
  NodeId log_softmax(NodeId x) { return push(make(OpKind::log_softmax, {x})); }
  /// Rows of table selected by an index binding.
  NodeId gather_rows(NodeId table, std::string index) { return push(make(OpKind::gather_rows, {table}, std::move(index))); }
  /// One column per row, selected by an index binding; output has rank 1.
  NodeId pick(NodeId x, std::string index) { return push(make(OpKind::pick, {x}, std::move(index))); }
  NodeId reshape(NodeId x, std::size_t cols) {
    Node n = make(OpKind::reshape, {x});
    n.cols = cols;
    return push(std::move(n));
  }
  /// Multiply by a constant, or by a named scalar binding when one is given
  /// (falling back to the constant if the binding is absent).
  NodeId scale(NodeId x, double constant, std::string scalar = {}) {
    Node n = make(OpKind::scale, {x}, std::move(scalar));
    n.constant = constant;
    return push(std::move(n));
  }
  NodeId reduce_sum(NodeId x) { return push(make(OpKind::reduce_sum, {x})); }
  NodeId reduce_mean(NodeId x) { return push(make(OpKind::reduce_mean, {x})); }

  const std::vector<Node>& nodes() const { return nodes_; }
  const Node& node(NodeId id) const { return nodes_.at(id); }
  NodeId output() const {
    if (nodes_.empty()) throw std::logic_error("empty expression");
    return output_.value_or(nodes_.size() - 1);
  }
  void set_output(NodeId id) {
    check(id);
    output_ = id;
  }

  /// Names of parameters consumed as qmatmul weights.
  std::vector<std::string> quantized_parameters() const {
    std::vector<std::string> out;
    for (const auto& n : nodes_)
      if (n.kind == OpKind::qmatmul) out.push_back(nodes_[n.operands[1]].name);
    return out;
  }

 private:
  void check(NodeId id) const {
    if (id >= nodes_.size()) throw std::invalid_argument("operand refers to a node that does not exist yet");
  }
  NodeId push(Node n) {
    for (auto op : n.operands) check(op);
    nodes_.push_back(std::move(n));
    return nodes_.size() - 1;
  }

  std::vector<Node> nodes_;
  std::optional<NodeId> output_;
};

/// Values supplied to a forward pass. Holds non-owning pointers: bound objects
/// must outlive every forward() call that uses these bindings.
struct Bindings {
  std::unordered_map<std::string, const Tensor*> tensors;
  std::unordered_map<std::string, const std::vector<int>*> indices;
  std::unordered_map<std::string, const QuantizedTensor*> prequantized;
  std::unordered_map<std::string, double> scalars;

  Bindings& bind(const std::string& name, const Tensor& t) {
    tensors[name] = &t;
    return *this;
  }
  Bindings& bind_indices(const std::string& name, const std::vector<int>& idx) {
    indices[name] = &idx;
    return *this;
  }
  /// A published low-bit weight; low-bit qmatmul uses it instead of re-quantizing.
  Bindings& bind_quantized(const std::string& name, const QuantizedTensor& q) {
    prequantized[name] = &q;
    return *this;
  }
  Bindings& set_scalar(const std::string& name, double v) {
    scalars[name] = v;
    return *this;
  }
  template <class Map>
  Bindings& bind_all(const Map& named) {
    for (const auto& [k, v] : named) bind(k, v);
    return *this;
  }
};

/// Row-wise log-softmax shared by graph nodes and the sampler.
inline void log_softmax_row(std::span<const double> x, std::span<double> out) {
  double m = -std::numeric_limits<double>::infinity();
  for (double v : x) m = std::max(m, v);
  double s = 0.0;
  for (double v : x) s += std::exp(v - m);
  const double lse = m + std::log(s);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - lse;
}

struct QMatmulRecord {
  std::string weight_name;
  QuantizedTensor weight;
  std::vector<std::uint8_t> weight_saturated;
  Tensor weight_dequantized;
  bool activations_quantized = false;
  std::vector<std::uint8_t> activation_saturated;
  Tensor activation_dequantized;
};

struct Tape {
  const Expr* expr = nullptr;
  PrecisionMode mode;
  std::vector<Tensor> values;
  std::unordered_map<NodeId, QMatmulRecord> qmatmuls;
  std::unordered_map<NodeId, std::vector<int>> indices;
  std::unordered_map<NodeId, Tensor> norm_rstd;   // per-row 1/sqrt(var + eps)
  std::unordered_map<NodeId, Tensor> norm_xhat;   // normalized input
  std::unordered_map<NodeId, double> scale_used;

  const Tensor& value(NodeId id) const { return values.at(id); }
  const Tensor& output() const { return values.at(expr->output()); }

  /// Low-bit weights materialized during this forward, by parameter name.
  std::map<std::string, QuantizedTensor> materialized_weights() const {
    std::map<std::string, QuantizedTensor> out;
    for (const auto& [id, rec] : qmatmuls) out.emplace(rec.weight_name, rec.weight);
    return out;
  }
};

inline constexpr double kLayerNormEps = 1e-5;

namespace detail {
constexpr double kSqrt2OverPi = 0.7978845608028654;

inline double activate(Nonlinearity f, double x) {
  switch (f) {
    case Nonlinearity::tanh: return std::tanh(x);
    case Nonlinearity::relu: return x > 0.0 ? x : 0.0;
    case Nonlinearity::gelu: return 0.5 * x * (1.0 + std::tanh(kSqrt2OverPi * (x + 0.044715 * x * x * x)));
    case Nonlinearity::silu: return x / (1.0 + std::exp(-x));
  }
  return x;
}

inline double activate_grad(Nonlinearity f, double x) {
  switch (f) {
    case Nonlinearity::tanh: {
      const double t = std::tanh(x);
      return 1.0 - t * t;
    }
    case Nonlinearity::relu: return x > 0.0 ? 1.0 : 0.0;
    case Nonlinearity::gelu: {
      const double u = kSqrt2OverPi * (x + 0.044715 * x * x * x);
      const double t = std::tanh(u);
      const double du = kSqrt2OverPi * (1.0 + 3.0 * 0.044715 * x * x);
      return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    }
    case Nonlinearity::silu: {
      const double s = 1.0 / (1.0 + std::exp(-x));
      return s * (1.0 + x * (1.0 - s));
    }
  }
  return 1.0;
}

inline const Tensor& lookup(const Bindings& b, const std::string& name) {
  auto it = b.tensors.find(name);
  if (it == b.tensors.end() || it->second == nullptr) throw std::invalid_argument("unbound input: " + name);
  return *it->second;
}

inline const std::vector<int>& lookup_indices(const Bindings& b, const std::string& name) {
  auto it = b.indices.find(name);
  if (it == b.indices.end() || it->second == nullptr) throw std::invalid_argument("unbound index input: " + name);
  return *it->second;
}

inline bool is_row_bias(const Tensor& a, const Tensor& b) { return b.rank() == 1 && b.size() == a.cols() && a.rows() > 0; }
}  // namespace detail

/// Evaluate every node of expr and record the values needed for gradient().
inline Tape forward(const Expr& expr, const Bindings& bindings, const PrecisionMode& mode) {
  Tape tape;
  tape.expr = &expr;
  tape.mode = mode;
  const auto& nodes = expr.nodes();
  tape.values.resize(nodes.size());
  for (NodeId id = 0; id < nodes.size(); ++id) {
    const Node& n = nodes[id];
    Tensor& out = tape.values[id];
    auto in = [&](std::size_t k) -> const Tensor& { return tape.values[n.operands[k]]; };
    switch (n.kind) {
      case OpKind::input: out = detail::lookup(bindings, n.name); break;
      case OpKind::parameter: {
        // A published low-bit weight stands in for the dense tensor when only it is bound.
        const auto pre = bindings.prequantized.find(n.name);
        if (!bindings.tensors.count(n.name) && pre != bindings.prequantized.end() && pre->second)
          out = dequantize(*pre->second);
        else
          out = detail::lookup(bindings, n.name);
        break;
      }
      case OpKind::matmul: out = matmul_nt(in(0), in(1)); break;
      case OpKind::qmatmul: {
        const auto& wnode = nodes[n.operands[1]];
        const auto pre = bindings.prequantized.find(wnode.name);
        const bool have_pre = pre != bindings.prequantized.end() && pre->second != nullptr;
        if (!mode.is_lowbit()) {
          out = matmul_nt(in(0), in(1));
          break;
        }
        const QuantSpec spec = n.spec.value_or(*mode.spec);
        QMatmulRecord rec;
        rec.weight_name = wnode.name;
        if (have_pre) {
          rec.weight = *pre->second;
          rec.weight_saturated.assign(rec.weight.codes.size(), 0);
        } else {
          auto tq = quantize_tracked(in(1), spec.weight_scheme());
          rec.weight = std::move(tq.tensor);
          rec.weight_saturated = std::move(tq.saturated);
        }
        rec.weight_dequantized = dequantize(rec.weight);
        if (spec.quantizes_activations()) {
          auto xq = quantize_tracked(in(0), spec.activation_scheme());
          rec.activations_quantized = true;
          rec.activation_saturated = std::move(xq.saturated);
          rec.activation_dequantized = dequantize(xq.tensor);
          out = qgemm(xq.tensor, rec.weight);
        } else {
          out = qgemm(in(0), rec.weight);
        }
        tape.qmatmuls.emplace(id, std::move(rec));
        break;
      }
      case OpKind::add: {
        const Tensor& a = in(0);
        const Tensor& b = in(1);
        out = a;
        if (a.shape == b.shape) {
          for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += b.data[i];
        } else if (detail::is_row_bias(a, b)) {
          const std::size_t c = a.cols();
          for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += b.data[i % c];
        } else {
          throw std::invalid_argument("add shape mismatch: " + shape_string(a.shape) + " vs " + shape_string(b.shape));
        }
        break;
      }
      case OpKind::nonlinearity: {
        out = in(0);
        for (double& v : out.data) v = detail::activate(n.nonlinearity, v);
        break;
      }
      case OpKind::layer_norm: {
        const Tensor& x = in(0);
        const Tensor& g = in(1);
        const Tensor& b = in(2);
        const std::size_t r = x.rows();
        const std::size_t c = x.cols();
        if (g.size() != c || b.size() != c) throw std::invalid_argument("layer_norm gain/bias width mismatch");
        out = Tensor(x.shape);
        Tensor xhat(x.shape);
        Tensor rstd({r});
        for (std::size_t i = 0; i < r; ++i) {
          const auto xr = x.row(i);
          double mean = 0.0;
          for (double v : xr) mean += v;
          mean /= static_cast<double>(c);
          double var = 0.0;
          for (double v : xr) var += (v - mean) * (v - mean);
          var /= static_cast<double>(c);
          const double rs = 1.0 / std::sqrt(var + kLayerNormEps);
          rstd.data[i] = rs;
          for (std::size_t j = 0; j < c; ++j) {
            const double h = (xr[j] - mean) * rs;
            xhat.data[i * c + j] = h;
            out.data[i * c + j] = g.data[j] * h + b.data[j];
          }
        }
        tape.norm_rstd.emplace(id, std::move(rstd));
        tape.norm_xhat.emplace(id, std::move(xhat));
        break;
      }
      case OpKind::log_softmax: {
        const Tensor& x = in(0);
        out = Tensor(x.shape);
        for (std::size_t i = 0; i < x.rows(); ++i) log_softmax_row(x.row(i), out.row(i));
        break;
      }
      case OpKind::gather_rows: {
        const Tensor& table = in(0);
        const auto& idx = detail::lookup_indices(bindings, n.name);
        const std::size_t c = table.cols();
        out = Tensor({idx.size(), c});
        for (std::size_t i = 0; i < idx.size(); ++i) {
          if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= table.rows())
            throw std::out_of_range("gather index out of range");
          std::copy_n(table.data.begin() + static_cast<std::ptrdiff_t>(idx[i] * c), c,
                      out.data.begin() + static_cast<std::ptrdiff_t>(i * c));
        }
        tape.indices.emplace(id, idx);
        break;
      }
      case OpKind::pick: {
        const Tensor& x = in(0);
        const auto& idx = detail::lookup_indices(bindings, n.name);
        if (idx.size() != x.rows()) throw std::invalid_argument("pick index count does not match rows");
        out = Tensor({x.rows()});
        for (std::size_t i = 0; i < idx.size(); ++i) {
          if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= x.cols()) throw std::out_of_range("pick index out of range");
          out.data[i] = x.at(i, static_cast<std::size_t>(idx[i]));
        }
        tape.indices.emplace(id, idx);
        break;
      }
      case OpKind::reshape: {
        const Tensor& x = in(0);
        if (n.cols == 0 || x.size() % n.cols != 0) throw std::invalid_argument("reshape width does not divide size");
        out = Tensor({x.size() / n.cols, n.cols}, x.data);
        break;
      }
      case OpKind::scale: {
        double f = n.constant;
        if (!n.name.empty()) {
          auto it = bindings.scalars.find(n.name);
          if (it != bindings.scalars.end()) f = it->second;
        }
        tape.scale_used[id] = f;
        out = in(0);
        for (double& v : out.data) v *= f;
        break;
      }
      case OpKind::reduce_sum:
      case OpKind::reduce_mean: {
        double s = 0.0;
        for (double v : in(0).data) s += v;
        if (n.kind == OpKind::reduce_mean) s /= static_cast<double>(in(0).size());
        out = Tensor(std::vector<std::size_t>{}, std::vector<double>{s});
        break;
      }
    }
  }
  return tape;
}

/// Output value of a forward pass.
inline Tensor evaluate(const Expr& expr, const Bindings& bindings, const PrecisionMode& mode) {
  return forward(expr, bindings, mode).output();
}

/// Reverse-mode gradients of <seed, output> with respect to every parameter.
inline std::map<std::string, Tensor> gradient(const Tape& tape, const Tensor& seed) {
  const Expr& expr = *tape.expr;
  const auto& nodes = expr.nodes();
  const NodeId out_id = expr.output();
  if (seed.size() != tape.values[out_id].size())
    throw std::invalid_argument("seed shape " + shape_string(seed.shape) + " does not match output " +
                                shape_string(tape.values[out_id].shape));
  std::vector<Tensor> grads(nodes.size());
  std::vector<bool> live(nodes.size(), false);
  grads[out_id] = Tensor(tape.values[out_id].shape, seed.data);
  live[out_id] = true;
  auto accum = [&](NodeId id) -> Tensor& {
    if (!live[id]) {
      grads[id] = Tensor(tape.values[id].shape);
      live[id] = true;
    }
    return grads[id];
  };

  for (NodeId id = out_id + 1; id-- > 0;) {
    if (!live[id]) continue;
    const Node& n = nodes[id];
    const Tensor& dy = grads[id];
    auto val = [&](std::size_t k) -> const Tensor& { return tape.values[n.operands[k]]; };
    switch (n.kind) {
      case OpKind::input:
      case OpKind::parameter: break;
      case OpKind::matmul: {
        const Tensor& x = val(0);
        const Tensor& w = val(1);
        matmul_backward_input(dy.data, x.rows(), w.rows(), w.data, x.cols(), accum(n.operands[0]).data);
        matmul_backward_weight(dy.data, x.rows(), w.rows(), x.data, x.cols(), accum(n.operands[1]).data);
        break;
      }
      case OpKind::qmatmul: {
        const Tensor& x = val(0);
        const Tensor& w = val(1);
        auto rec_it = tape.qmatmuls.find(id);
        if (rec_it == tape.qmatmuls.end()) {
          matmul_backward_input(dy.data, x.rows(), w.rows(), w.data, x.cols(), accum(n.operands[0]).data);
          matmul_backward_weight(dy.data, x.rows(), w.rows(), x.data, x.cols(), accum(n.operands[1]).data);
          break;
        }
        const auto& rec = rec_it->second;
        const std::size_t k = x.cols();
        const std::size_t o = rec.weight_dequantized.rows();
        {
          Tensor dx(x.shape);
          matmul_backward_input(dy.data, x.rows(), o, rec.weight_dequantized.data, k, dx.data);
          if (rec.activations_quantized)
            for (std::size_t i = 0; i < dx.size(); ++i)
              if (rec.activation_saturated[i]) dx.data[i] = 0.0;
          Tensor& gx = accum(n.operands[0]);
          for (std::size_t i = 0; i < dx.size(); ++i) gx.data[i] += dx.data[i];
        }
        {
          const Tensor& xhat = rec.activations_quantized ? rec.activation_dequantized : x;
          Tensor dw(rec.weight_dequantized.shape);
          matmul_backward_weight(dy.data, x.rows(), o, xhat.data, k, dw.data);
          Tensor& gw = accum(n.operands[1]);
          if (gw.size() != dw.size()) throw std::logic_error("published weight shape differs from parameter");
          for (std::size_t i = 0; i < dw.size(); ++i)
            if (!rec.weight_saturated[i]) gw.data[i] += dw.data[i];
        }
        break;
      }
      case OpKind::add: {
        const Tensor& a = val(0);
        const Tensor& b = val(1);
        Tensor& ga = accum(n.operands[0]);
        for (std::size_t i = 0; i < dy.size(); ++i) ga.data[i] += dy.data[i];
        Tensor& gb = accum(n.operands[1]);
        if (a.shape == b.shape) {
          for (std::size_t i = 0; i < dy.size(); ++i) gb.data[i] += dy.data[i];
        } else {
          const std::size_t c = a.cols();
          for (std::size_t i = 0; i < dy.size(); ++i) gb.data[i % c] += dy.data[i];
        }
        break;
      }
      case OpKind::nonlinearity: {
        const Tensor& x = val(0);
        Tensor& gx = accum(n.operands[0]);
        for (std::size_t i = 0; i < x.size(); ++i) gx.data[i] += dy.data[i] * detail::activate_grad(n.nonlinearity, x.data[i]);
        break;
      }
      case OpKind::layer_norm: {
        const Tensor& x = val(0);
        const Tensor& g = val(1);
        const Tensor& xhat = tape.norm_xhat.at(id);
        const Tensor& rstd = tape.norm_rstd.at(id);
        const std::size_t r = x.rows();
        const std::size_t c = x.cols();
        Tensor& gx = accum(n.operands[0]);
        Tensor& gg = accum(n.operands[1]);
        Tensor& gb = accum(n.operands[2]);
        std::vector<double> dxhat(c);
        for (std::size_t i = 0; i < r; ++i) {
          double mean_d = 0.0;
          double mean_dx = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            const double d = dy.data[i * c + j];
            gg.data[j] += d * xhat.data[i * c + j];
            gb.data[j] += d;
            dxhat[j] = d * g.data[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xhat.data[i * c + j];
          }
          mean_d /= static_cast<double>(c);
          mean_dx /= static_cast<double>(c);
          for (std::size_t j = 0; j < c; ++j)
            gx.data[i * c + j] += rstd.data[i] * (dxhat[j] - mean_d - xhat.data[i * c + j] * mean_dx);
        }
        break;
      }
      case OpKind::log_softmax: {
        const Tensor& y = tape.values[id];
        Tensor& gx = accum(n.operands[0]);
        const std::size_t c = y.cols();
        for (std::size_t i = 0; i < y.rows(); ++i) {
          double s = 0.0;
          for (std::size_t j = 0; j < c; ++j) s += dy.data[i * c + j];
          for (std::size_t j = 0; j < c; ++j) gx.data[i * c + j] += dy.data[i * c + j] - std::exp(y.data[i * c + j]) * s;
        }
        break;
      }
      case OpKind::gather_rows: {
        const auto& idx = tape.indices.at(id);
        Tensor& gt = accum(n.operands[0]);
        const std::size_t c = gt.cols();
        for (std::size_t i = 0; i < idx.size(); ++i)
          for (std::size_t j = 0; j < c; ++j) gt.data[static_cast<std::size_t>(idx[i]) * c + j] += dy.data[i * c + j];
        break;
      }
      case OpKind::pick: {
        const auto& idx = tape.indices.at(id);
        Tensor& gx = accum(n.operands[0]);
        const std::size_t c = gx.cols();
        for (std::size_t i = 0; i < idx.size(); ++i) gx.data[i * c + static_cast<std::size_t>(idx[i])] += dy.data[i];
        break;
      }
      case OpKind::reshape: {
        Tensor& gx = accum(n.operands[0]);
        for (std::size_t i = 0; i < dy.size(); ++i) gx.data[i] += dy.data[i];
        break;
      }
      case OpKind::scale: {
        const double f = tape.scale_used.at(id);
        Tensor& gx = accum(n.operands[0]);
        for (std::size_t i = 0; i < dy.size(); ++i) gx.data[i] += f * dy.data[i];
        break;
      }
      case OpKind::reduce_sum:
      case OpKind::reduce_mean: {
        Tensor& gx = accum(n.operands[0]);
        const double f = n.kind == OpKind::reduce_mean ? 1.0 / static_cast<double>(gx.size()) : 1.0;
        for (double& v : gx.data) v += dy.data[0] * f;
        break;
      }
    }
  }

  std::map<std::string, Tensor> out;
  for (NodeId id = 0; id < nodes.size(); ++id) {
    if (nodes[id].kind != OpKind::parameter) continue;
    const auto& name = nodes[id].name;
    Tensor g = live[id] ? grads[id] : Tensor(tape.values[id].shape);
    auto [it, inserted] = out.try_emplace(name, std::move(g));
    if (!inserted)
      for (std::size_t i = 0; i < it->second.size(); ++i) it->second.data[i] += grads[id].data[i];
  }
  return out;
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
};

/// Central-difference check of gradient() for a scalar-valued expression.
///
/// Per-coordinate error is |fd - ad| / max(|fd|, |ad|, floor). Above
/// max_coordinates, a seeded random subset of coordinates is checked.
inline GradCheckResult finite_diff_check(const Expr& expr, std::map<std::string, Tensor> params,
                                         const Bindings& inputs, const PrecisionMode& mode, double eps,
                                         const std::function<bool(const std::string&)>& include = {},
                                         std::size_t max_coordinates = 10000, std::uint64_t seed = 0,
                                         double floor = 1e-6) {
  if (!(eps > 0.0)) throw std::invalid_argument("finite difference step must be positive");
  Bindings b = inputs;
  b.bind_all(params);
  const Tape tape = forward(expr, b, mode);
  if (tape.output().size() != 1) throw std::invalid_argument("finite_diff_check needs a scalar output");
  const auto analytic = gradient(tape, Tensor(std::vector<std::size_t>{}, std::vector<double>{1.0}));

  std::vector<std::pair<std::string, std::size_t>> coords;
  for (const auto& [name, t] : params) {
    if (include && !include(name)) continue;
    for (std::size_t i = 0; i < t.size(); ++i) coords.emplace_back(name, i);
  }
  if (coords.size() > max_coordinates) {
    Rng rng(seed);
    for (std::size_t i = 0; i < max_coordinates; ++i) std::swap(coords[i], coords[i + rng.below(coords.size() - i)]);
    coords.resize(max_coordinates);
  }

  GradCheckResult res;
  res.coordinates = coords.size();
  for (const auto& [name, i] : coords) {
    Tensor& p = params.at(name);
    const double orig = p.data[i];
    p.data[i] = orig + eps;
    const double up = evaluate(expr, b, mode).data[0];
    p.data[i] = orig - eps;
    const double down = evaluate(expr, b, mode).data[0];
    p.data[i] = orig;
    const double fd = (up - down) / (2.0 * eps);
    const auto it = analytic.find(name);
    const double ad = it == analytic.end() ? 0.0 : it->second.data[i];
    const double err = std::fabs(fd - ad) / std::max({std::fabs(fd), std::fabs(ad), floor});
    if (err > res.max_rel_error) {
      res.max_rel_error = err;
      res.worst_parameter = name;
      res.worst_index = i;
    }
  }
  return res;
}

}  // namespace qarl
