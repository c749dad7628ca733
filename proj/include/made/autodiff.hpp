#pragma once

// Tape-based reverse-mode automatic differentiation over made::Tensor.
//
// A Graph is an append-only list of nodes. Every node's inputs precede it, so
// insertion order is a topological order and backward() is a single reverse
// sweep. Parameter leaves reference caller-owned tensors and carry a stable
// path; backward() returns a gradient for every trainable leaf path.
//
// Batching convention: all ops are at most rank 2. A sequence is an (n, d)
// matrix; callers loop over sequences and build one graph per item.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "made/tensor.hpp"

namespace made {

using ParamMap = std::map<std::string, Tensor>;
using Gradients = std::map<std::string, Tensor>;

/// Logit value written into masked positions before a softmax.
inline constexpr double kMaskedLogit = -1e30;

class Graph;

/// Handle to a node in a Graph. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;
  Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph& graph() const { return *graph_; }
  std::size_t id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, const Tensor& out_grad)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Owned constant leaf.
  Var constant(Tensor value) {
    Node n;
    n.op = "constant";
    n.owned = std::move(value);
    return push(std::move(n));
  }

  /// Non-owning constant leaf; `value` must outlive the graph.
  Var input(const Tensor& value) {
    Node n;
    n.op = "input";
    n.ref = &value;
    return push(std::move(n));
  }

  /// Parameter leaf referencing caller storage. Frozen parameters behave as
  /// constants: no gradient is tracked or reported for them.
  Var parameter(std::string path, const Tensor& value, bool trainable = true) {
    Node n;
    n.op = "parameter";
    n.ref = &value;
    n.requires_grad = trainable;
    n.path = std::move(path);
    n.is_param = trainable;
    return push(std::move(n));
  }

  /// Appends an op node. `backward` receives the node's accumulated output
  /// gradient and must add input gradients through grad().
  Var record(const char* op, Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
    return record(op, std::move(value), std::vector<Var>(inputs), std::move(backward));
  }

  Var record(const char* op, Tensor value, const std::vector<Var>& inputs, BackwardFn backward) {
    if (!value.all_finite()) {
      throw NumericError(std::string("non-finite value produced by ") + op);
    }
    Node n;
    n.op = op;
    n.owned = std::move(value);
    n.inputs.reserve(inputs.size());
    for (const Var& v : inputs) {
      if (&v.graph() != this) throw std::invalid_argument(std::string(op) + ": input from another graph");
      n.inputs.push_back(v.id());
      n.requires_grad = n.requires_grad || nodes_[v.id()].requires_grad;
    }
    if (n.requires_grad) n.backward = std::move(backward);
    return push(std::move(n));
  }

  const Tensor& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.ref ? *n.ref : n.owned;
  }

  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  bool requires_grad(const Var& v) const { return requires_grad(v.id()); }

  /// Gradient buffer of a node, allocated as zeros on first access.
  Tensor& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
      n.grad = Tensor::zeros(value(id).shape());
      n.has_grad = true;
    }
    return n.grad;
  }
  Tensor& grad(const Var& v) { return grad(v.id()); }

  std::size_t size() const { return nodes_.size(); }
  const std::string& op_name(std::size_t id) const { return nodes_[id].op; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_[id].inputs; }

  /// Reverse sweep from a scalar loss. Returns one entry per trainable
  /// parameter path; leaves off the loss path get a zero tensor.
  Gradients backward(const Var& loss) {
    if (&loss.graph() != this) throw std::invalid_argument("backward: loss from another graph");
    if (value(loss.id()).size() != 1) {
      throw DimensionError("backward: loss must be scalar, got shape " +
                           shape_str(value(loss.id()).shape()));
    }
    for (Node& n : nodes_) {
      n.has_grad = false;
      n.grad = Tensor();
    }
    if (nodes_[loss.id()].requires_grad) {
      grad(loss.id())[0] = 1.0;
      for (std::size_t i = loss.id() + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.has_grad || !n.backward) continue;
        n.backward(*this, n.grad);
      }
    }
    Gradients out;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const Node& n = nodes_[i];
      if (!n.is_param) continue;
      auto it = out.find(n.path);
      if (it == out.end()) {
        out.emplace(n.path, n.has_grad ? n.grad : Tensor::zeros(value(i).shape()));
      } else if (n.has_grad) {
        auto dst = it->second.data();
        auto src = n.grad.data();
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
      }
    }
    for (const auto& [path, g] : out) {
      if (!g.all_finite()) throw NumericError("non-finite gradient for " + path);
    }
    return out;
  }

 private:
  struct Node {
    std::string op;
    std::vector<std::size_t> inputs;
    Tensor owned;
    const Tensor* ref = nullptr;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    bool is_param = false;
    std::string path;
    BackwardFn backward;
  };

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return graph_->value(id_); }

namespace detail {

inline void require_rank(const Var& v, std::size_t rank, const char* op) {
  if (v.value().rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(v.shape()));
  }
}

inline void add_into(Tensor& dst, const Tensor& src, double scale = 1.0) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += scale * s[i];
}

inline bool is_row_broadcast(const Shape& matrix, const Shape& vec) {
  return matrix.size() == 2 && vec.size() == 1 && vec[0] == matrix[1];
}

template <typename F>
Var binary_same_or_row(const char* op, const Var& a, const Var& b, F f, double db_sign) {
  Graph& g = a.graph();
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.shape() == bv.shape()) {
    Tensor out(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i], bv[i]);
    const std::size_t ia = a.id(), ib = b.id();
    return g.record(op, std::move(out), {a, b}, [ia, ib, db_sign](Graph& gr, const Tensor& dy) {
      if (gr.requires_grad(ia)) add_into(gr.grad(ia), dy);
      if (gr.requires_grad(ib)) add_into(gr.grad(ib), dy, db_sign);
    });
  }
  if (is_row_broadcast(av.shape(), bv.shape())) {
    const std::size_t rows = av.dim(0), cols = av.dim(1);
    Tensor out(av.shape());
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = f(av[r * cols + c], bv[c]);
    const std::size_t ia = a.id(), ib = b.id();
    return g.record(op, std::move(out), {a, b},
                    [ia, ib, rows, cols, db_sign](Graph& gr, const Tensor& dy) {
                      if (gr.requires_grad(ia)) add_into(gr.grad(ia), dy);
                      if (gr.requires_grad(ib)) {
                        Tensor& gb = gr.grad(ib);
                        for (std::size_t r = 0; r < rows; ++r)
                          for (std::size_t c = 0; c < cols; ++c) gb[c] += db_sign * dy[r * cols + c];
                      }
                    });
  }
  throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(av.shape()) + " with " +
                       shape_str(bv.shape()));
}

}  // namespace detail

/// C = A·B for rank-2 operands.
inline Var matmul(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(av.shape()) + " and " +
                         shape_str(bv.shape()));
  }
  const std::size_t n = av.dim(0), k = av.dim(1), p = bv.dim(1);
  Tensor out({n, p});
  kernel::gemm_nn(av.data().data(), bv.data().data(), out.data().data(), n, k, p, false);
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().record("matmul", std::move(out), {a, b}, [ia, ib, n, k, p](Graph& g, const Tensor& dy) {
    if (g.requires_grad(ia)) {
      kernel::gemm_nt(dy.data().data(), g.value(ib).data().data(), g.grad(ia).data().data(), n, p, k,
                      true);
    }
    if (g.requires_grad(ib)) {
      kernel::gemm_tn(g.value(ia).data().data(), dy.data().data(), g.grad(ib).data().data(), n, k, p,
                      true);
    }
  });
}

inline Var transpose(const Var& a) {
  detail::require_rank(a, 2, "transpose");
  const Tensor& av = a.value();
  const std::size_t r = av.dim(0), c = av.dim(1);
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
  const std::size_t ia = a.id();
  return a.graph().record("transpose", std::move(out), {a}, [ia, r, c](Graph& g, const Tensor& dy) {
    Tensor& ga = g.grad(ia);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += dy[j * r + i];
  });
}

/// Elementwise a + b; b may also be a vector broadcast over the rows of a.
inline Var add(const Var& a, const Var& b) {
  return detail::binary_same_or_row("add", a, b, [](double x, double y) { return x + y; }, 1.0);
}

inline Var sub(const Var& a, const Var& b) {
  return detail::binary_same_or_row("sub", a, b, [](double x, double y) { return x - y; }, -1.0);
}

/// Pointwise product of equally shaped tensors.
inline Var mul(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.shape() != bv.shape()) {
    throw DimensionError("mul: shapes differ " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  }
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().record("mul", std::move(out), {a, b}, [ia, ib](Graph& g, const Tensor& dy) {
    if (g.requires_grad(ia)) {
      Tensor& ga = g.grad(ia);
      const Tensor& bv = g.value(ib);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += dy[i] * bv[i];
    }
    if (g.requires_grad(ib)) {
      Tensor& gb = g.grad(ib);
      const Tensor& av = g.value(ia);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += dy[i] * av[i];
    }
  });
}

inline Var scale(const Var& a, double s) {
  Tensor out(a.shape());
  const Tensor& av = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = s * av[i];
  const std::size_t ia = a.id();
  return a.graph().record("scale", std::move(out), {a},
                          [ia, s](Graph& g, const Tensor& dy) { detail::add_into(g.grad(ia), dy, s); });
}

// tanh approximation: 0.5·x·(1 + tanh(c·(x + 0.044715·x³))), c = sqrt(2/pi)
inline constexpr double kGeluC = 0.7978845608028654;
inline constexpr double kGeluA = 0.044715;

inline double gelu_value(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
}

inline double gelu_derivative(double x) {
  const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

inline Var gelu(const Var& a) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = gelu_value(av[i]);
  const std::size_t ia = a.id();
  return a.graph().record("gelu", std::move(out), {a}, [ia](Graph& g, const Tensor& dy) {
    Tensor& ga = g.grad(ia);
    const Tensor& x = g.value(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += dy[i] * gelu_derivative(x[i]);
  });
}

/// Rows of `table` selected by `ids`, in order.
inline Var embedding(const Var& table, const std::vector<std::int32_t>& ids) {
  detail::require_rank(table, 2, "embedding");
  const Tensor& tv = table.value();
  const std::size_t rows = tv.dim(0), d = tv.dim(1), n = ids.size();
  Tensor out({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= rows) {
      throw DimensionError("embedding: id " + std::to_string(ids[i]) + " outside table of " +
                           std::to_string(rows) + " rows");
    }
    std::copy_n(tv.data().begin() + ids[i] * d, d, out.data().begin() + i * d);
  }
  const std::size_t it = table.id();
  return table.graph().record("embedding", std::move(out), {table}, [it, ids, d](Graph& g, const Tensor& dy) {
    Tensor& gt = g.grad(it);
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t c = 0; c < d; ++c) gt[ids[i] * d + c] += dy[i * d + c];
  });
}

/// Writes `fill` wherever fill_mask[j] is set, j indexing the last axis.
inline Var masked_fill(const Var& x, const std::vector<char>& fill_mask, double fill = kMaskedLogit) {
  const Tensor& xv = x.value();
  const std::size_t cols = xv.cols();
  if (fill_mask.size() != cols) {
    throw DimensionError("masked_fill: mask of length " + std::to_string(fill_mask.size()) +
                         " for shape " + shape_str(xv.shape()));
  }
  Tensor out = xv;
  for (std::size_t i = 0; i < out.size(); ++i)
    if (fill_mask[i % cols]) out[i] = fill;
  const std::size_t ix = x.id();
  return x.graph().record("masked_fill", std::move(out), {x}, [ix, fill_mask, cols](Graph& g, const Tensor& dy) {
    Tensor& gx = g.grad(ix);
    for (std::size_t i = 0; i < gx.size(); ++i)
      if (!fill_mask[i % cols]) gx[i] += dy[i];
  });
}

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const std::size_t ia = a.id();
  return a.graph().record("sum", Tensor::scalar(s), {a}, [ia](Graph& g, const Tensor& dy) {
    Tensor& ga = g.grad(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += dy[0];
  });
}

inline Var mean(const Var& a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw DimensionError("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

/// log Σ exp over every element, stabilized by max-subtraction.
inline Var logsumexp(const Var& a) {
  const Tensor& av = a.value();
  if (av.empty()) throw DimensionError("logsumexp: empty tensor");
  const double m = *std::max_element(av.data().begin(), av.data().end());
  double s = 0.0;
  for (double v : av.data()) s += std::exp(v - m);
  const double lse = m + std::log(s);
  const std::size_t ia = a.id();
  return a.graph().record("logsumexp", Tensor::scalar(lse), {a}, [ia, lse](Graph& g, const Tensor& dy) {
    Tensor& ga = g.grad(ia);
    const Tensor& x = g.value(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += dy[0] * std::exp(x[i] - lse);
  });
}

namespace detail {

struct AxisLayout {
  std::size_t outer, len, inner;
};

inline AxisLayout axis_layout(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                         shape_str(shape));
  }
  AxisLayout l{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) l.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) l.inner *= shape[i];
  if (l.len == 0) throw DimensionError(std::string(op) + ": empty axis");
  return l;
}

}  // namespace detail

/// y = x − logsumexp(x) along `axis`.
inline Var log_softmax(const Var& x, std::size_t axis) {
  const Tensor& xv = x.value();
  const auto l = detail::axis_layout(xv.shape(), axis, "log_softmax");
  Tensor out(xv.shape());
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t in = 0; in < l.inner; ++in) {
      const std::size_t base = o * l.len * l.inner + in;
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < l.len; ++k) m = std::max(m, xv[base + k * l.inner]);
      double s = 0.0;
      for (std::size_t k = 0; k < l.len; ++k) s += std::exp(xv[base + k * l.inner] - m);
      const double lse = m + std::log(s);
      for (std::size_t k = 0; k < l.len; ++k) out[base + k * l.inner] = xv[base + k * l.inner] - lse;
    }
  }
  const std::size_t ix = x.id(), iy = x.graph().size();
  return x.graph().record("log_softmax", std::move(out), {x}, [ix, iy, l](Graph& g, const Tensor& dy) {
    Tensor& gx = g.grad(ix);
    const Tensor& y = g.value(iy);
    for (std::size_t o = 0; o < l.outer; ++o) {
      for (std::size_t in = 0; in < l.inner; ++in) {
        const std::size_t base = o * l.len * l.inner + in;
        double s = 0.0;
        for (std::size_t k = 0; k < l.len; ++k) s += dy[base + k * l.inner];
        for (std::size_t k = 0; k < l.len; ++k) {
          const std::size_t idx = base + k * l.inner;
          gx[idx] += dy[idx] - std::exp(y[idx]) * s;
        }
      }
    }
  });
}

/// Softmax over the last axis.
inline Var softmax(const Var& x) {
  const Tensor& xv = x.value();
  const auto l = detail::axis_layout(xv.shape(), xv.rank() - 1, "softmax");
  const std::size_t rows = l.outer, cols = l.len;
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data().data() + r * cols;
    double* o = out.data().data() + r * cols;
    const double m = *std::max_element(in, in + cols);
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += (o[c] = std::exp(in[c] - m));
    for (std::size_t c = 0; c < cols; ++c) o[c] /= s;
  }
  const std::size_t ix = x.id(), iy = x.graph().size();
  return x.graph().record("softmax", std::move(out), {x}, [ix, iy, rows, cols](Graph& g, const Tensor& dy) {
    Tensor& gx = g.grad(ix);
    const Tensor& y = g.value(iy);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += dy[r * cols + c] * y[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += y[r * cols + c] * (dy[r * cols + c] - dot);
    }
  });
}

/// (x − mean)/sqrt(var + eps)·gain + bias over the last axis, 1/n variance.
inline Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
  const Tensor& xv = x.value();
  const std::size_t d = xv.cols();
  if (d == 0) throw DimensionError("layer_norm: last axis is empty");
  if (gain.value().shape() != Shape{d} || bias.value().shape() != Shape{d}) {
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                         " do not match last axis of " + shape_str(xv.shape()));
  }
  const std::size_t rows = xv.size() / d;
  Tensor out(xv.shape());
  std::vector<double> xhat(xv.size()), rstd(rows);
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data().data() + r * d;
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += in[c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (in[c] - mu) * (in[c] - mu);
    var /= static_cast<double>(d);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      xhat[r * d + c] = (in[c] - mu) * rstd[r];
      out[r * d + c] = xhat[r * d + c] * gv[c] + bv[c];
    }
  }
  const std::size_t ix = x.id(), ig = gain.id(), ib = bias.id();
  return x.graph().record(
      "layer_norm", std::move(out), {x, gain, bias},
      [ix, ig, ib, d, rows, xhat = std::move(xhat), rstd = std::move(rstd)](Graph& g, const Tensor& dy) {
        const Tensor& gv = g.value(ig);
        if (g.requires_grad(ig) || g.requires_grad(ib)) {
          Tensor& gg = g.grad(ig);
          Tensor& gb = g.grad(ib);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < d; ++c) {
              gg[c] += dy[r * d + c] * xhat[r * d + c];
              gb[c] += dy[r * d + c];
            }
        }
        if (!g.requires_grad(ix)) return;
        Tensor& gx = g.grad(ix);
        const double inv_d = 1.0 / static_cast<double>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          double mean_g = 0.0, mean_gx = 0.0;
          for (std::size_t c = 0; c < d; ++c) {
            const double gc = dy[r * d + c] * gv[c];
            mean_g += gc;
            mean_gx += gc * xhat[r * d + c];
          }
          mean_g *= inv_d;
          mean_gx *= inv_d;
          for (std::size_t c = 0; c < d; ++c) {
            const double gc = dy[r * d + c] * gv[c];
            gx[r * d + c] += rstd[r] * (gc - mean_g - xhat[r * d + c] * mean_gx);
          }
        }
      });
}

/// Columns [begin, begin + count) of a rank-2 tensor.
inline Var slice_cols(const Var& x, std::size_t begin, std::size_t count) {
  detail::require_rank(x, 2, "slice_cols");
  const Tensor& xv = x.value();
  const std::size_t rows = xv.dim(0), cols = xv.dim(1);
  if (begin + count > cols) {
    throw DimensionError("slice_cols: [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") exceeds " + shape_str(xv.shape()));
  }
  Tensor out({rows, count});
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(xv.data().begin() + r * cols + begin, count, out.data().begin() + r * count);
  const std::size_t ix = x.id();
  return x.graph().record("slice_cols", std::move(out), {x}, [ix, rows, cols, begin, count](Graph& g, const Tensor& dy) {
    Tensor& gx = g.grad(ix);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < count; ++c) gx[r * cols + begin + c] += dy[r * count + c];
  });
}

/// Horizontal concatenation of rank-2 tensors with equal row counts.
inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t rows = parts.front().value().dim(0);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    detail::require_rank(p, 2, "concat_cols");
    if (p.value().dim(0) != rows) throw DimensionError("concat_cols: row counts differ");
    widths.push_back(p.value().dim(1));
    total += widths.back();
  }
  Tensor out({rows, total});
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& pv = parts[k].value();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(pv.data().begin() + r * widths[k], widths[k], out.data().begin() + r * total + off);
    off += widths[k];
  }
  std::vector<std::size_t> ids;
  for (const Var& p : parts) ids.push_back(p.id());
  return parts.front().graph().record("concat_cols", std::move(out), parts,
                                      [ids, widths, rows, total](Graph& g, const Tensor& dy) {
                                        std::size_t off = 0;
                                        for (std::size_t k = 0; k < ids.size(); ++k) {
                                          if (g.requires_grad(ids[k])) {
                                            Tensor& gp = g.grad(ids[k]);
                                            for (std::size_t r = 0; r < rows; ++r)
                                              for (std::size_t c = 0; c < widths[k]; ++c)
                                                gp[r * widths[k] + c] += dy[r * total + off + c];
                                          }
                                          off += widths[k];
                                        }
                                      });
}

/// Rank-1 tensor of x's elements at flat indices.
inline Var gather(const Var& x, const std::vector<std::size_t>& flat_indices) {
  const Tensor& xv = x.value();
  Tensor out({flat_indices.size()});
  for (std::size_t i = 0; i < flat_indices.size(); ++i) {
    if (flat_indices[i] >= xv.size()) throw DimensionError("gather: index out of range");
    out[i] = xv[flat_indices[i]];
  }
  const std::size_t ix = x.id();
  return x.graph().record("gather", std::move(out), {x}, [ix, flat_indices](Graph& g, const Tensor& dy) {
    Tensor& gx = g.grad(ix);
    for (std::size_t i = 0; i < flat_indices.size(); ++i) gx[flat_indices[i]] += dy[i];
  });
}

/// Stacks single-element tensors into a rank-1 tensor.
inline Var stack(const std::vector<Var>& scalars) {
  if (scalars.empty()) throw DimensionError("stack: no inputs");
  Tensor out({scalars.size()});
  std::vector<std::size_t> ids;
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    out[i] = scalars[i].value().item();
    ids.push_back(scalars[i].id());
  }
  return scalars.front().graph().record("stack", std::move(out), scalars, [ids](Graph& g, const Tensor& dy) {
    for (std::size_t i = 0; i < ids.size(); ++i)
      if (g.requires_grad(ids[i])) g.grad(ids[i])[0] += dy[i];
  });
}

// ---------------------------------------------------------------------------
// Finite-difference verification.

using LossBuilder = std::function<Var(Graph&, const std::map<std::string, Var>&)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_path;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
};

inline double relative_error(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max(floor, std::abs(a) + std::abs(b));
}

/// Central differences at h = 1e-5 carry roundoff near 1e-10 for O(1) losses,
/// so the relative-error denominator never drops below this floor.
inline constexpr double kGradCheckFloor = 1e-4;

/// Compares backward() against central differences (f(p+h) − f(p−h))/2h for
/// every scalar of every parameter in `params`.
inline GradCheckReport grad_check(const LossBuilder& f, const ParamMap& params, double h = 1e-5,
                                  double floor = kGradCheckFloor) {
  if (!(h > 0.0)) throw std::invalid_argument("grad_check: h must be positive");
  ParamMap work = params;
  auto evaluate = [&](Graph& g) {
    std::map<std::string, Var> vars;
    for (const auto& [path, t] : work) vars.emplace(path, g.parameter(path, t));
    Var loss = f(g, vars);
    const double v = loss.value().item();
    if (!std::isfinite(v)) throw NumericError("grad_check: loss is not finite");
    return loss;
  };
  Gradients analytic;
  {
    Graph g;
    Var loss = evaluate(g);
    analytic = g.backward(loss);
  }
  GradCheckReport report;
  for (auto& [path, tensor] : work) {
    const Tensor& ga = analytic.at(path);
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      const double orig = tensor[i];
      tensor[i] = orig + h;
      double fp, fm;
      {
        Graph g;
        fp = evaluate(g).value().item();
      }
      tensor[i] = orig - h;
      {
        Graph g;
        fm = evaluate(g).value().item();
      }
      tensor[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double err = relative_error(ga[i], numeric, floor);
      if (err > report.max_rel_error || report.checked == 0) {
        report.max_rel_error = err;
        report.worst_path = path;
        report.worst_index = i;
        report.analytic = ga[i];
        report.numeric = numeric;
      }
      ++report.checked;
    }
  }
  return report;
}

}  // namespace made
