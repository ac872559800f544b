#pragma once

// Tape-based reverse-mode differentiation over dense double tensors.
//
// A Graph owns every intermediate. Nodes are appended in evaluation order, so
// the tape is topologically sorted by construction and backward() is a single
// reverse sweep. Parameter leaves copy their value out of a ParameterStore and
// add their gradient back into it when the sweep finishes.

#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <utility>
#include <vector>

#include "shapo/error.hpp"
#include "shapo/parameter_store.hpp"
#include "shapo/tensor.hpp"

namespace shapo::ad {

class Graph;

struct Var {
  Graph* graph = nullptr;
  std::uint32_t id = 0;

  const Tensor& value() const;
  double item() const { return value().item(); }
};

class Graph {
 public:
  struct Node;
  using Backward = std::function<void(Graph&, const Node&)>;

  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::uint32_t> inputs;
    Backward backward;
    ParameterStore* store = nullptr;
    std::size_t entry = 0;
    bool requires_grad = false;
  };

  Graph() { nodes_.reserve(256); }
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor t) {
    Node n;
    n.value = std::move(t);
    return push(std::move(n));
  }

  /// Leaf bound to a store entry; its gradient lands in store.grad(entry).
  Var parameter(ParameterStore& store, std::size_t entry) {
    Node n;
    n.value = store.value(entry);
    n.store = &store;
    n.entry = entry;
    n.requires_grad = true;
    return push(std::move(n));
  }

  /// Leaf with the store's current value but no gradient path.
  Var frozen(const ParameterStore& store, std::size_t entry) { return constant(store.value(entry)); }

  Var record(Tensor value, std::initializer_list<Var> inputs, Backward backward) {
    return record(std::move(value), std::vector<Var>(inputs), std::move(backward));
  }

  Var record(Tensor value, const std::vector<Var>& inputs, Backward backward) {
    Node n;
    n.value = std::move(value);
    n.inputs.reserve(inputs.size());
    for (const Var& v : inputs) {
      detail::require(v.graph == this, "variable belongs to a different graph");
      n.inputs.push_back(v.id);
      n.requires_grad = n.requires_grad || nodes_[v.id].requires_grad;
    }
    if (n.requires_grad) n.backward = std::move(backward);
    return push(std::move(n));
  }

  const Tensor& value(std::uint32_t id) const { return nodes_[id].value; }
  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  bool wants_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient buffer of a node, allocated as zeros on first use.
  Tensor& grad_buffer(std::uint32_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor(n.value.shape());
    return n.grad;
  }

  /// d(root)/d(node) after backward(); zeros if the node was not reached.
  Tensor grad(Var v) const {
    const Node& n = nodes_[v.id];
    return n.grad.empty() ? Tensor(n.value.shape()) : n.grad;
  }

  /// Reverse sweep from a scalar root. Gradients of parameter leaves are
  /// added into their store buffers; nothing is cleared beforehand.
  void backward(Var root) {
    detail::require(root.graph == this, "root belongs to a different graph");
    detail::require<ShapeError>(nodes_[root.id].value.is_scalar(), "backward root must be scalar, got ",
                                shape_string(nodes_[root.id].value.shape()));
    for (auto& n : nodes_) n.grad = Tensor();
    grad_buffer(root.id)[0] = 1.0;
    for (std::size_t k = root.id + 1; k-- > 0;) {
      Node& n = nodes_[k];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this, n);
      if (n.store) {
        Tensor& dst = n.store->grad(n.entry);
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += n.grad[i];
      }
    }
  }

 private:
  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return graph->value(*this); }

namespace detail_ops {

inline void check_same_graph(Var a, Var b) {
  shapo::detail::require(a.graph && a.graph == b.graph, "operands belong to different graphs");
}

enum class Broadcast { none, row, scalar };

inline Broadcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::none;
  if (b.size() == 1) return Broadcast::scalar;
  if (a.rank() == 2 && b.rank() == 1 && b.size() == a.cols()) return Broadcast::row;
  shapo::detail::fail<ShapeError>(op, ": incompatible shapes ", shape_string(a.shape()), " and ",
                                  shape_string(b.shape()));
}

inline std::size_t bindex(Broadcast k, std::size_t i, std::size_t cols) {
  switch (k) {
    case Broadcast::none: return i;
    case Broadcast::row: return i % cols;
    case Broadcast::scalar: return 0;
  }
  return i;
}

template <typename F, typename DF>
Var unary(Var x, F f, DF df) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return x.graph->record(std::move(out), {x}, [df](Graph& g, const Graph::Node& n) {
    const Tensor& xv = g.value(n.inputs[0]);
    Tensor& dx = g.grad_buffer(n.inputs[0]);
    for (std::size_t i = 0; i < xv.size(); ++i) dx[i] += n.grad[i] * df(xv[i], n.value[i]);
  });
}

inline double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double stable_log_sigmoid(double x) {
  return x < 0 ? x - std::log1p(std::exp(x)) : -std::log1p(std::exp(-x));
}

}  // namespace detail_ops

inline double sigmoid(double x) { return detail_ops::stable_sigmoid(x); }
inline double log_sigmoid(double x) { return detail_ops::stable_log_sigmoid(x); }

// ---------------------------------------------------------------------------
// Linear algebra

/// a[m x k] * b[k x n]
inline Var matmul(Var a, Var b) {
  detail_ops::check_same_graph(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
  detail::require<ShapeError>(B.rows() == k && B.rank() == 2, "matmul: incompatible shapes ",
                              shape_string(A.shape()), " and ", shape_string(B.shape()));
  Tensor C({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double* c = C.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      const double* brow = B.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += av * brow[j];
    }
  }
  return a.graph->record(std::move(C), {a, b}, [m, k, n](Graph& g, const Graph::Node& nd) {
    const Tensor& A = g.value(nd.inputs[0]);
    const Tensor& B = g.value(nd.inputs[1]);
    const Tensor& dC = nd.grad;
    if (g.wants_grad(nd.inputs[0])) {
      Tensor& dA = g.grad_buffer(nd.inputs[0]);
      for (std::size_t i = 0; i < m; ++i) {
        const double* dc = dC.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const double* brow = B.data() + p * n;
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += dc[j] * brow[j];
          dA[i * k + p] += s;
        }
      }
    }
    if (g.wants_grad(nd.inputs[1])) {
      Tensor& dB = g.grad_buffer(nd.inputs[1]);
      for (std::size_t i = 0; i < m; ++i) {
        const double* dc = dC.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const double av = A[i * k + p];
          double* db = dB.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) db[j] += av * dc[j];
        }
      }
    }
  });
}

/// a[m x k] * b[n x k]^T
inline Var matmul_bt(Var a, Var b) {
  detail_ops::check_same_graph(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const std::size_t m = A.rows(), k = A.cols(), n = B.rows();
  detail::require<ShapeError>(B.cols() == k, "matmul_bt: incompatible shapes ", shape_string(A.shape()),
                              " and ", shape_string(B.shape()));
  Tensor C({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = A.data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = B.data() + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      C[i * n + j] = s;
    }
  }
  return a.graph->record(std::move(C), {a, b}, [m, k, n](Graph& g, const Graph::Node& nd) {
    const Tensor& A = g.value(nd.inputs[0]);
    const Tensor& B = g.value(nd.inputs[1]);
    const Tensor& dC = nd.grad;
    if (g.wants_grad(nd.inputs[0])) {
      Tensor& dA = g.grad_buffer(nd.inputs[0]);
      for (std::size_t i = 0; i < m; ++i) {
        double* da = dA.data() + i * k;
        for (std::size_t j = 0; j < n; ++j) {
          const double c = dC[i * n + j];
          if (c == 0.0) continue;
          const double* brow = B.data() + j * k;
          for (std::size_t p = 0; p < k; ++p) da[p] += c * brow[p];
        }
      }
    }
    if (g.wants_grad(nd.inputs[1])) {
      Tensor& dB = g.grad_buffer(nd.inputs[1]);
      for (std::size_t i = 0; i < m; ++i) {
        const double* arow = A.data() + i * k;
        for (std::size_t j = 0; j < n; ++j) {
          const double c = dC[i * n + j];
          if (c == 0.0) continue;
          double* db = dB.data() + j * k;
          for (std::size_t p = 0; p < k; ++p) db[p] += c * arow[p];
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic. The right operand may be a scalar or, for a matrix
// left operand, a row vector broadcast over rows.

inline Var add(Var a, Var b) {
  detail_ops::check_same_graph(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const auto kind = detail_ops::broadcast_kind(A, B, "add");
  const std::size_t cols = A.cols();
  Tensor out(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) out[i] = A[i] + B[detail_ops::bindex(kind, i, cols)];
  return a.graph->record(std::move(out), {a, b}, [kind, cols](Graph& g, const Graph::Node& n) {
    if (g.wants_grad(n.inputs[0])) {
      Tensor& da = g.grad_buffer(n.inputs[0]);
      for (std::size_t i = 0; i < n.grad.size(); ++i) da[i] += n.grad[i];
    }
    if (g.wants_grad(n.inputs[1])) {
      Tensor& db = g.grad_buffer(n.inputs[1]);
      for (std::size_t i = 0; i < n.grad.size(); ++i) db[detail_ops::bindex(kind, i, cols)] += n.grad[i];
    }
  });
}

inline Var sub(Var a, Var b) {
  detail_ops::check_same_graph(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const auto kind = detail_ops::broadcast_kind(A, B, "sub");
  const std::size_t cols = A.cols();
  Tensor out(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) out[i] = A[i] - B[detail_ops::bindex(kind, i, cols)];
  return a.graph->record(std::move(out), {a, b}, [kind, cols](Graph& g, const Graph::Node& n) {
    if (g.wants_grad(n.inputs[0])) {
      Tensor& da = g.grad_buffer(n.inputs[0]);
      for (std::size_t i = 0; i < n.grad.size(); ++i) da[i] += n.grad[i];
    }
    if (g.wants_grad(n.inputs[1])) {
      Tensor& db = g.grad_buffer(n.inputs[1]);
      for (std::size_t i = 0; i < n.grad.size(); ++i) db[detail_ops::bindex(kind, i, cols)] -= n.grad[i];
    }
  });
}

inline Var mul(Var a, Var b) {
  detail_ops::check_same_graph(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const auto kind = detail_ops::broadcast_kind(A, B, "mul");
  const std::size_t cols = A.cols();
  Tensor out(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) out[i] = A[i] * B[detail_ops::bindex(kind, i, cols)];
  return a.graph->record(std::move(out), {a, b}, [kind, cols](Graph& g, const Graph::Node& n) {
    const Tensor& A = g.value(n.inputs[0]);
    const Tensor& B = g.value(n.inputs[1]);
    if (g.wants_grad(n.inputs[0])) {
      Tensor& da = g.grad_buffer(n.inputs[0]);
      for (std::size_t i = 0; i < n.grad.size(); ++i) da[i] += n.grad[i] * B[detail_ops::bindex(kind, i, cols)];
    }
    if (g.wants_grad(n.inputs[1])) {
      Tensor& db = g.grad_buffer(n.inputs[1]);
      for (std::size_t i = 0; i < n.grad.size(); ++i) db[detail_ops::bindex(kind, i, cols)] += n.grad[i] * A[i];
    }
  });
}

inline Var scale(Var x, double c) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = c * xv[i];
  return x.graph->record(std::move(out), {x}, [c](Graph& g, const Graph::Node& n) {
    Tensor& dx = g.grad_buffer(n.inputs[0]);
    for (std::size_t i = 0; i < n.grad.size(); ++i) dx[i] += c * n.grad[i];
  });
}

inline Var neg(Var x) { return scale(x, -1.0); }

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(double c, Var x) { return scale(x, c); }

// ---------------------------------------------------------------------------
// Pointwise nonlinearities

inline Var sigmoid(Var x) {
  return detail_ops::unary(
      x, [](double v) { return detail_ops::stable_sigmoid(v); },
      [](double, double y) { return y * (1.0 - y); });
}

inline Var log_sigmoid(Var x) {
  return detail_ops::unary(
      x, [](double v) { return detail_ops::stable_log_sigmoid(v); },
      [](double v, double) { return detail_ops::stable_sigmoid(-v); });
}

inline Var tanh(Var x) {
  return detail_ops::unary(
      x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

/// tanh approximation of GELU.
inline Var gelu(Var x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double a = 0.044715;
  return detail_ops::unary(
      x,
      [](double v) { return 0.5 * v * (1.0 + std::tanh(c * (v + a * v * v * v))); },
      [](double v, double) {
        const double t = std::tanh(c * (v + a * v * v * v));
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * c * (1.0 + 3.0 * a * v * v);
      });
}

inline Var exp(Var x) {
  return detail_ops::unary(
      x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

/// Natural log; rejects non-positive input.
inline Var log(Var x) {
  for (double v : x.value().values()) {
    detail::require<NumericError>(v > 0.0 && std::isfinite(v), "log: input must be finite and positive, got ", v);
  }
  return detail_ops::unary(
      x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

/// Saturating clamp; gradient is zero where the input lies outside [lo, hi].
inline Var clamp(Var x, double lo, double hi) {
  return detail_ops::unary(
      x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Row-wise operations on [rows x cols]

inline Var row_softmax(Var x) {
  const Tensor& X = x.value();
  const std::size_t r = X.rows(), c = X.cols();
  Tensor Y(X.shape());
  for (std::size_t i = 0; i < r; ++i) {
    const double* xr = X.data() + i * c;
    double* yr = Y.data() + i * c;
    const double mx = *std::max_element(xr, xr + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += (yr[j] = std::exp(xr[j] - mx));
    for (std::size_t j = 0; j < c; ++j) yr[j] /= s;
  }
  return x.graph->record(std::move(Y), {x}, [r, c](Graph& g, const Graph::Node& n) {
    Tensor& dx = g.grad_buffer(n.inputs[0]);
    for (std::size_t i = 0; i < r; ++i) {
      const double* y = n.value.data() + i * c;
      const double* dy = n.grad.data() + i * c;
      double s = 0.0;
      for (std::size_t j = 0; j < c; ++j) s += dy[j] * y[j];
      for (std::size_t j = 0; j < c; ++j) dx[i * c + j] += y[j] * (dy[j] - s);
    }
  });
}

inline Var row_log_softmax(Var x) {
  const Tensor& X = x.value();
  const std::size_t r = X.rows(), c = X.cols();
  Tensor Y(X.shape());
  for (std::size_t i = 0; i < r; ++i) {
    const double* xr = X.data() + i * c;
    double* yr = Y.data() + i * c;
    const double mx = *std::max_element(xr, xr + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(xr[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) yr[j] = xr[j] - lse;
  }
  return x.graph->record(std::move(Y), {x}, [r, c](Graph& g, const Graph::Node& n) {
    Tensor& dx = g.grad_buffer(n.inputs[0]);
    for (std::size_t i = 0; i < r; ++i) {
      const double* y = n.value.data() + i * c;
      const double* dy = n.grad.data() + i * c;
      double s = 0.0;
      for (std::size_t j = 0; j < c; ++j) s += dy[j];
      if (s == 0.0) {
        for (std::size_t j = 0; j < c; ++j) dx[i * c + j] += dy[j];
      } else {
        for (std::size_t j = 0; j < c; ++j) dx[i * c + j] += dy[j] - std::exp(y[j]) * s;
      }
    }
  });
}

/// y = x / rms(x) * gain, row-wise; gain has length cols.
inline Var rms_normalize(Var x, Var gain, double eps = 1e-6) {
  detail_ops::check_same_graph(x, gain);
  const Tensor& X = x.value();
  const Tensor& G = gain.value();
  const std::size_t r = X.rows(), c = X.cols();
  detail::require<ShapeError>(G.size() == c, "rms_normalize: gain ", shape_string(G.shape()),
                              " does not match input ", shape_string(X.shape()));
  Tensor Y(X.shape());
  std::vector<double> inv(r);
  for (std::size_t i = 0; i < r; ++i) {
    const double* xr = X.data() + i * c;
    double ms = 0.0;
    for (std::size_t j = 0; j < c; ++j) ms += xr[j] * xr[j];
    inv[i] = 1.0 / std::sqrt(ms / static_cast<double>(c) + eps);
    for (std::size_t j = 0; j < c; ++j) Y[i * c + j] = xr[j] * inv[i] * G[j];
  }
  return x.graph->record(std::move(Y), {x, gain}, [r, c, inv = std::move(inv)](Graph& g, const Graph::Node& n) {
    const Tensor& X = g.value(n.inputs[0]);
    const Tensor& G = g.value(n.inputs[1]);
    const bool want_x = g.wants_grad(n.inputs[0]);
    const bool want_g = g.wants_grad(n.inputs[1]);
    for (std::size_t i = 0; i < r; ++i) {
      const double* xr = X.data() + i * c;
      const double* dy = n.grad.data() + i * c;
      if (want_g) {
        Tensor& dg = g.grad_buffer(n.inputs[1]);
        for (std::size_t j = 0; j < c; ++j) dg[j] += dy[j] * xr[j] * inv[i];
      }
      if (want_x) {
        double proj = 0.0;
        for (std::size_t j = 0; j < c; ++j) proj += dy[j] * G[j] * xr[j] * inv[i];
        proj /= static_cast<double>(c);
        Tensor& dx = g.grad_buffer(n.inputs[0]);
        for (std::size_t j = 0; j < c; ++j) {
          const double xhat = xr[j] * inv[i];
          dx[i * c + j] += inv[i] * (dy[j] * G[j] - xhat * proj);
        }
      }
    }
  });
}

/// Adds a large negative constant above the diagonal of a square score matrix.
inline Var causal_mask_add(Var scores) {
  constexpr double kMasked = -1e30;
  const Tensor& S = scores.value();
  detail::require<ShapeError>(S.rank() == 2 && S.rows() == S.cols(), "causal_mask_add: expected square matrix, got ",
                              shape_string(S.shape()));
  const std::size_t n = S.rows();
  Tensor out = S;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) out[i * n + j] += kMasked;
  return scores.graph->record(std::move(out), {scores}, [](Graph& g, const Graph::Node& nd) {
    Tensor& dx = g.grad_buffer(nd.inputs[0]);
    for (std::size_t i = 0; i < nd.grad.size(); ++i) dx[i] += nd.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Indexing and shape

/// Rows of table[V x d] selected by ids -> [ids.size() x d].
inline Var embedding(Var table, std::span<const int> ids) {
  const Tensor& T = table.value();
  const std::size_t d = T.cols(), vocab = T.rows();
  detail::require<ShapeError>(!ids.empty(), "embedding: empty id list");
  Tensor out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    detail::require<ShapeError>(ids[i] >= 0 && static_cast<std::size_t>(ids[i]) < vocab, "embedding: id ", ids[i],
                                " out of range [0, ", vocab, ")");
    std::copy_n(T.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  std::vector<int> idv(ids.begin(), ids.end());
  return table.graph->record(std::move(out), {table}, [d, idv = std::move(idv)](Graph& g, const Graph::Node& n) {
    Tensor& dt = g.grad_buffer(n.inputs[0]);
    for (std::size_t i = 0; i < idv.size(); ++i) {
      double* dst = dt.data() + static_cast<std::size_t>(idv[i]) * d;
      const double* src = n.grad.data() + i * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
}

/// Picks x(rows[i], cols[i]) into a vector; used to read log-probabilities
/// of target tokens.
inline Var gather(Var x, std::span<const std::size_t> rows, std::span<const std::size_t> cols) {
  const Tensor& X = x.value();
  detail::require<ShapeError>(rows.size() == cols.size() && !rows.empty(), "gather: index lists must be equal-length and nonempty");
  const std::size_t c = X.cols();
  std::vector<std::size_t> flat(rows.size());
  Tensor out({rows.size()});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    detail::require<ShapeError>(rows[i] < X.rows() && cols[i] < c, "gather: index (", rows[i], ",", cols[i],
                                ") outside ", shape_string(X.shape()));
    flat[i] = rows[i] * c + cols[i];
    out[i] = X[flat[i]];
  }
  return x.graph->record(std::move(out), {x}, [flat = std::move(flat)](Graph& g, const Graph::Node& n) {
    Tensor& dx = g.grad_buffer(n.inputs[0]);
    for (std::size_t i = 0; i < flat.size(); ++i) dx[flat[i]] += n.grad[i];
  });
}

inline Var slice_cols(Var x, std::size_t begin, std::size_t end) {
  const Tensor& X = x.value();
  const std::size_t r = X.rows(), c = X.cols();
  detail::require<ShapeError>(begin < end && end <= c, "slice_cols: [", begin, ",", end, ") outside ",
                              shape_string(X.shape()));
  const std::size_t w = end - begin;
  Tensor out({r, w});
  for (std::size_t i = 0; i < r; ++i) std::copy_n(X.data() + i * c + begin, w, out.data() + i * w);
  return x.graph->record(std::move(out), {x}, [r, c, begin, w](Graph& g, const Graph::Node& n) {
    Tensor& dx = g.grad_buffer(n.inputs[0]);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) dx[i * c + begin + j] += n.grad[i * w + j];
  });
}

inline Var slice_rows(Var x, std::size_t begin, std::size_t end) {
  const Tensor& X = x.value();
  const std::size_t c = X.cols();
  detail::require<ShapeError>(X.rank() == 2 && begin < end && end <= X.rows(), "slice_rows: [", begin, ",", end,
                              ") outside ", shape_string(X.shape()));
  Tensor out({end - begin, c});
  std::copy_n(X.data() + begin * c, (end - begin) * c, out.data());
  return x.graph->record(std::move(out), {x}, [begin, c](Graph& g, const Graph::Node& n) {
    Tensor& dx = g.grad_buffer(n.inputs[0]);
    double* dst = dx.data() + begin * c;
    for (std::size_t i = 0; i < n.grad.size(); ++i) dst[i] += n.grad[i];
  });
}

/// Column-wise concatenation of matrices with equal row counts.
inline Var concat_cols(const std::vector<Var>& parts) {
  detail::require<ShapeError>(!parts.empty(), "concat_cols: no inputs");
  const std::size_t r = parts[0].value().rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    detail::require<ShapeError>(p.value().rows() == r, "concat_cols: row mismatch ", shape_string(p.value().shape()));
    widths.push_back(p.value().cols());
    total += widths.back();
  }
  Tensor out({r, total});
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& P = parts[k].value();
    for (std::size_t i = 0; i < r; ++i) std::copy_n(P.data() + i * widths[k], widths[k], out.data() + i * total + off);
    off += widths[k];
  }
  return parts[0].graph->record(std::move(out), parts, [r, total, widths](Graph& g, const Graph::Node& n) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      if (g.wants_grad(n.inputs[k])) {
        Tensor& dp = g.grad_buffer(n.inputs[k]);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < widths[k]; ++j) dp[i * widths[k] + j] += n.grad[i * total + off + j];
      }
      off += widths[k];
    }
  });
}

/// Flattens and joins inputs into one vector (e.g. per-pair scalars).
inline Var concat(const std::vector<Var>& parts) {
  detail::require<ShapeError>(!parts.empty(), "concat: no inputs");
  std::vector<std::size_t> sizes;
  std::size_t total = 0;
  for (const Var& p : parts) {
    sizes.push_back(p.value().size());
    total += sizes.back();
  }
  Tensor out({total});
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    std::copy_n(parts[k].value().data(), sizes[k], out.data() + off);
    off += sizes[k];
  }
  return parts[0].graph->record(std::move(out), parts, [sizes](Graph& g, const Graph::Node& n) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < sizes.size(); ++k) {
      if (g.wants_grad(n.inputs[k])) {
        Tensor& dp = g.grad_buffer(n.inputs[k]);
        for (std::size_t i = 0; i < sizes[k]; ++i) dp[i] += n.grad[off + i];
      }
      off += sizes[k];
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions to a scalar

inline Var sum(Var x) {
  const Tensor& X = x.value();
  double s = 0.0;
  for (double v : X.values()) s += v;
  return x.graph->record(Tensor::scalar(s), {x}, [](Graph& g, const Graph::Node& n) {
    Tensor& dx = g.grad_buffer(n.inputs[0]);
    const double d = n.grad[0];
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += d;
  });
}

inline Var mean(Var x) {
  const Tensor& X = x.value();
  const double inv = 1.0 / static_cast<double>(X.size());
  double s = 0.0;
  for (double v : X.values()) s += v;
  return x.graph->record(Tensor::scalar(s * inv), {x}, [inv](Graph& g, const Graph::Node& n) {
    Tensor& dx = g.grad_buffer(n.inputs[0]);
    const double d = n.grad[0] * inv;
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += d;
  });
}

/// log(mean(exp(x))), evaluated with max-shifting.
inline Var log_mean_exp(Var x) {
  const Tensor& X = x.value();
  const double mx = *std::max_element(X.storage().begin(), X.storage().end());
  std::vector<double> w(X.size());
  double s = 0.0;
  for (std::size_t i = 0; i < X.size(); ++i) s += (w[i] = std::exp(X[i] - mx));
  for (double& v : w) v /= s;
  const double out = mx + std::log(s / static_cast<double>(X.size()));
  return x.graph->record(Tensor::scalar(out), {x}, [w = std::move(w)](Graph& g, const Graph::Node& n) {
    Tensor& dx = g.grad_buffer(n.inputs[0]);
    for (std::size_t i = 0; i < w.size(); ++i) dx[i] += n.grad[0] * w[i];
  });
}

}  // namespace shapo::ad
