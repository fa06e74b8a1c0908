#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "peace/numerics/tensor.hpp"

namespace peace {

/// A named trainable tensor with its gradient accumulator.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool frozen = false;

  void zero_grad() {
    if (grad.size() != value.size()) grad = Tensor(value.shape());
    grad.fill(0.0);
  }
};

/// Handle to a node of a Graph.
struct Var {
  std::uint32_t id = 0;
};

/// Tape-based reverse-mode graph. Nodes are appended in evaluation order, so
/// creation order is a topological order and the tape is acyclic by
/// construction. One graph per forward pass; not thread-safe.
class Graph {
 public:
  using BackFn = std::function<void(Graph&, std::uint32_t)>;

  Var constant(Tensor value) { return push(std::move(value), {}, nullptr); }

  /// Leaf bound to a parameter. Backward adds into `p.grad` unless frozen.
  Var param(Parameter& p) {
    Var v = push(p.value, {}, nullptr);
    if (!p.frozen) {
      nodes_[v.id].needs_grad = true;
      nodes_[v.id].param = &p;
    }
    return v;
  }

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  const Tensor& grad(Var v) const { return nodes_.at(v.id).grad; }
  bool needs_grad(Var v) const { return nodes_.at(v.id).needs_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Seeds d(loss)/d(loss) = 1 and propagates to every reachable node once,
  /// in reverse creation order. Parameter gradients are accumulated, not
  /// overwritten.
  void backward(Var loss) {
    Node& root = nodes_.at(loss.id);
    if (root.value.size() != 1) {
      throw ValidationError("backward: loss must be a scalar, got shape " +
                            root.value.shape_string());
    }
    if (!root.needs_grad) return;
    root.grad = Tensor(root.value.shape(), 1.0);
    for (std::int64_t i = loss.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.needs_grad || n.grad.empty()) continue;
      if (n.back) n.back(*this, static_cast<std::uint32_t>(i));
      if (n.param != nullptr) {
        Parameter& p = *n.param;
        if (p.grad.size() != p.value.size()) p.zero_grad();
        for (std::size_t k = 0; k < n.grad.size(); ++k) p.grad[k] += n.grad[k];
      }
    }
  }

  // Used by op implementations.
  Var push(Tensor value, std::vector<Var> parents, BackFn back) {
    Node n;
    n.value = std::move(value);
    for (Var p : parents) n.needs_grad = n.needs_grad || nodes_[p.id].needs_grad;
    if (n.needs_grad) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  const Tensor& out_grad(std::uint32_t self) const { return nodes_[self].grad; }

  /// Gradient buffer of a parent, or nullptr if it does not need gradients.
  Tensor* grad_buffer(Var v) {
    Node& n = nodes_[v.id];
    if (!n.needs_grad) return nullptr;
    if (n.grad.empty()) n.grad = Tensor(n.value.shape());
    return &n.grad;
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    BackFn back;
    Parameter* param = nullptr;
    bool needs_grad = false;
  };

  std::vector<Node> nodes_;
};

/// Compressed neighbor lists; `neighbors[offsets[i]..offsets[i+1])` are the
/// nodes node i aggregates from.
struct Adjacency {
  std::vector<std::size_t> offsets{0};
  std::vector<std::size_t> neighbors;

  std::size_t node_count() const { return offsets.size() - 1; }
  std::span<const std::size_t> of(std::size_t i) const {
    return {neighbors.data() + offsets[i], offsets[i + 1] - offsets[i]};
  }
};

namespace ad {

namespace detail {

inline void require(bool ok, const char* op, const std::string& what) {
  if (!ok) throw ValidationError(std::string(op) + ": " + what);
}

inline std::vector<std::size_t> matrix_shape(std::size_t r, std::size_t c) { return {r, c}; }

template <class F, class DF>
Var unary(Graph& g, Var a, F f, DF df) {
  const Tensor& x = g.value(a);
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return g.push(std::move(y), {a}, [a, df](Graph& g, std::uint32_t self) {
    Tensor* ga = g.grad_buffer(a);
    if (!ga) return;
    const Tensor& x = g.value(a);
    const Tensor& y = g.value(Var{self});
    const Tensor& gy = g.out_grad(self);
    for (std::size_t i = 0; i < x.size(); ++i) (*ga)[i] += gy[i] * df(x[i], y[i]);
  });
}

}  // namespace detail

/// a [r x k] * b [k x c]
inline Var matmul(Graph& g, Var a, Var b) {
  const Tensor& A = g.value(a);
  const Tensor& B = g.value(b);
  const std::size_t r = A.rows(), k = A.cols(), c = B.cols();
  detail::require(B.rows() == k, "matmul", A.shape_string() + " x " + B.shape_string());
  Tensor C = Tensor::matrix(r, c);
  for (std::size_t i = 0; i < r; ++i) {
    double* ci = C.data() + i * c;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      if (aip == 0.0) continue;
      const double* bp = B.data() + p * c;
      for (std::size_t j = 0; j < c; ++j) ci[j] += aip * bp[j];
    }
  }
  return g.push(std::move(C), {a, b}, [a, b, r, k, c](Graph& g, std::uint32_t self) {
    const Tensor& A = g.value(a);
    const Tensor& B = g.value(b);
    const Tensor& G = g.out_grad(self);
    if (Tensor* ga = g.grad_buffer(a)) {
      for (std::size_t i = 0; i < r; ++i) {
        const double* gi = G.data() + i * c;
        for (std::size_t p = 0; p < k; ++p) {
          const double* bp = B.data() + p * c;
          double s = 0.0;
          for (std::size_t j = 0; j < c; ++j) s += gi[j] * bp[j];
          (*ga)[i * k + p] += s;
        }
      }
    }
    if (Tensor* gb = g.grad_buffer(b)) {
      for (std::size_t i = 0; i < r; ++i) {
        const double* gi = G.data() + i * c;
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = A[i * k + p];
          if (aip == 0.0) continue;
          double* bp = gb->data() + p * c;
          for (std::size_t j = 0; j < c; ++j) bp[j] += aip * gi[j];
        }
      }
    }
  });
}

/// a [r x k] * b^T where b is [c x k]
inline Var matmul_nt(Graph& g, Var a, Var b) {
  const Tensor& A = g.value(a);
  const Tensor& B = g.value(b);
  const std::size_t r = A.rows(), k = A.cols(), c = B.rows();
  detail::require(B.cols() == k, "matmul_nt", A.shape_string() + " x " + B.shape_string() + "^T");
  Tensor C = Tensor::matrix(r, c);
  for (std::size_t i = 0; i < r; ++i) {
    const double* ai = A.data() + i * k;
    for (std::size_t j = 0; j < c; ++j) {
      const double* bj = B.data() + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      C[i * c + j] = s;
    }
  }
  return g.push(std::move(C), {a, b}, [a, b, r, k, c](Graph& g, std::uint32_t self) {
    const Tensor& A = g.value(a);
    const Tensor& B = g.value(b);
    const Tensor& G = g.out_grad(self);
    Tensor* ga = g.grad_buffer(a);
    Tensor* gb = g.grad_buffer(b);
    for (std::size_t i = 0; i < r; ++i) {
      const double* ai = A.data() + i * k;
      for (std::size_t j = 0; j < c; ++j) {
        const double gij = G[i * c + j];
        if (gij == 0.0) continue;
        if (ga) {
          const double* bj = B.data() + j * k;
          double* dai = ga->data() + i * k;
          for (std::size_t p = 0; p < k; ++p) dai[p] += gij * bj[p];
        }
        if (gb) {
          double* dbj = gb->data() + j * k;
          for (std::size_t p = 0; p < k; ++p) dbj[p] += gij * ai[p];
        }
      }
    }
  });
}

inline Var transpose(Graph& g, Var a) {
  const Tensor& A = g.value(a);
  const std::size_t r = A.rows(), c = A.cols();
  Tensor T = Tensor::matrix(c, r);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) T[j * r + i] = A[i * c + j];
  return g.push(std::move(T), {a}, [a, r, c](Graph& g, std::uint32_t self) {
    Tensor* ga = g.grad_buffer(a);
    if (!ga) return;
    const Tensor& G = g.out_grad(self);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) (*ga)[i * c + j] += G[j * r + i];
  });
}

inline Var add(Graph& g, Var a, Var b) {
  const Tensor& A = g.value(a);
  const Tensor& B = g.value(b);
  detail::require(A.same_shape(B), "add", A.shape_string() + " + " + B.shape_string());
  Tensor C = A;
  for (std::size_t i = 0; i < C.size(); ++i) C[i] += B[i];
  return g.push(std::move(C), {a, b}, [a, b](Graph& g, std::uint32_t self) {
    const Tensor& G = g.out_grad(self);
    for (Var v : {a, b})
      if (Tensor* gv = g.grad_buffer(v))
        for (std::size_t i = 0; i < G.size(); ++i) (*gv)[i] += G[i];
  });
}

inline Var sub(Graph& g, Var a, Var b) {
  const Tensor& A = g.value(a);
  const Tensor& B = g.value(b);
  detail::require(A.same_shape(B), "sub", A.shape_string() + " - " + B.shape_string());
  Tensor C = A;
  for (std::size_t i = 0; i < C.size(); ++i) C[i] -= B[i];
  return g.push(std::move(C), {a, b}, [a, b](Graph& g, std::uint32_t self) {
    const Tensor& G = g.out_grad(self);
    if (Tensor* ga = g.grad_buffer(a))
      for (std::size_t i = 0; i < G.size(); ++i) (*ga)[i] += G[i];
    if (Tensor* gb = g.grad_buffer(b))
      for (std::size_t i = 0; i < G.size(); ++i) (*gb)[i] -= G[i];
  });
}

/// Elementwise product.
inline Var mul(Graph& g, Var a, Var b) {
  const Tensor& A = g.value(a);
  const Tensor& B = g.value(b);
  detail::require(A.same_shape(B), "mul", A.shape_string() + " * " + B.shape_string());
  Tensor C = A;
  for (std::size_t i = 0; i < C.size(); ++i) C[i] *= B[i];
  return g.push(std::move(C), {a, b}, [a, b](Graph& g, std::uint32_t self) {
    const Tensor& G = g.out_grad(self);
    const Tensor& A = g.value(a);
    const Tensor& B = g.value(b);
    if (Tensor* ga = g.grad_buffer(a))
      for (std::size_t i = 0; i < G.size(); ++i) (*ga)[i] += G[i] * B[i];
    if (Tensor* gb = g.grad_buffer(b))
      for (std::size_t i = 0; i < G.size(); ++i) (*gb)[i] += G[i] * A[i];
  });
}

inline Var scale(Graph& g, Var a, double factor) {
  Tensor C = g.value(a);
  for (auto& v : C.values()) v *= factor;
  return g.push(std::move(C), {a}, [a, factor](Graph& g, std::uint32_t self) {
    Tensor* ga = g.grad_buffer(a);
    if (!ga) return;
    const Tensor& G = g.out_grad(self);
    for (std::size_t i = 0; i < G.size(); ++i) (*ga)[i] += factor * G[i];
  });
}

/// Adds row vector `b` (length c) to every row of `a` [r x c].
inline Var add_row(Graph& g, Var a, Var b) {
  const Tensor& A = g.value(a);
  const Tensor& B = g.value(b);
  const std::size_t r = A.rows(), c = A.cols();
  detail::require(B.size() == c, "add_row", A.shape_string() + " + " + B.shape_string());
  Tensor C = A;
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) C[i * c + j] += B[j];
  return g.push(std::move(C), {a, b}, [a, b, r, c](Graph& g, std::uint32_t self) {
    const Tensor& G = g.out_grad(self);
    if (Tensor* ga = g.grad_buffer(a))
      for (std::size_t i = 0; i < G.size(); ++i) (*ga)[i] += G[i];
    if (Tensor* gb = g.grad_buffer(b))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) (*gb)[j] += G[i * c + j];
  });
}

/// x [r x in] * w [in x out] + b [out]
inline Var linear(Graph& g, Var x, Var w, Var b) { return add_row(g, matmul(g, x, w), b); }

inline Var tanh(Graph& g, Var a) {
  return detail::unary(
      g, a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

inline Var relu(Graph& g, Var a) {
  return detail::unary(
      g, a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var elu(Graph& g, Var a) {
  return detail::unary(
      g, a, [](double x) { return x > 0.0 ? x : std::expm1(x); },
      [](double x, double y) { return x > 0.0 ? 1.0 : y + 1.0; });
}

inline Var leaky_relu(Graph& g, Var a, double slope) {
  return detail::unary(
      g, a, [slope](double x) { return x > 0.0 ? x : slope * x; },
      [slope](double x, double) { return x > 0.0 ? 1.0 : slope; });
}

inline double sigmoid_value(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

inline Var sigmoid(Graph& g, Var a) {
  return detail::unary(
      g, a, [](double x) { return sigmoid_value(x); },
      [](double, double y) { return y * (1.0 - y); });
}

/// Row-wise softmax of `a + mask`. Mask entries are 0 or -inf and carry no
/// gradient; an all -inf row raises "empty support".
inline Var softmax_rows(Graph& g, Var a, const Tensor* mask = nullptr) {
  const Tensor& A = g.value(a);
  const std::size_t r = A.rows(), c = A.cols();
  if (mask) detail::require(mask->size() == A.size(), "softmax_rows", "mask shape mismatch");
  Tensor Y(A.shape());
  std::vector<double> logits(c);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j)
      logits[j] = A[i * c + j] + (mask ? (*mask)[i * c + j] : 0.0);
    auto p = softmax(logits);
    std::copy(p.begin(), p.end(), Y.data() + i * c);
  }
  return g.push(std::move(Y), {a}, [a, r, c](Graph& g, std::uint32_t self) {
    Tensor* ga = g.grad_buffer(a);
    if (!ga) return;
    const Tensor& Y = g.value(Var{self});
    const Tensor& G = g.out_grad(self);
    for (std::size_t i = 0; i < r; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < c; ++j) s += G[i * c + j] * Y[i * c + j];
      for (std::size_t j = 0; j < c; ++j) (*ga)[i * c + j] += Y[i * c + j] * (G[i * c + j] - s);
    }
  });
}

/// Per row i: -log softmax(a_i + mask_i)[target[i]], via log-sum-exp.
/// Output has shape [r].
inline Var nll_rows(Graph& g, Var a, const Tensor* mask, std::vector<std::size_t> target) {
  const Tensor& A = g.value(a);
  const std::size_t r = A.rows(), c = A.cols();
  detail::require(target.size() == r, "nll_rows", "one target per row required");
  if (mask) detail::require(mask->size() == A.size(), "nll_rows", "mask shape mismatch");
  Tensor out({r});
  auto probs = std::make_shared<Tensor>(A.shape());
  std::vector<double> logits(c);
  for (std::size_t i = 0; i < r; ++i) {
    detail::require(target[i] < c, "nll_rows", "target out of range");
    double mx = kNegInf;
    for (std::size_t j = 0; j < c; ++j) {
      logits[j] = A[i * c + j] + (mask ? (*mask)[i * c + j] : 0.0);
      mx = std::max(mx, logits[j]);
    }
    if (logits[target[i]] == kNegInf) throw NumericError("nll_rows: target is masked out");
    double total = 0.0;
    for (std::size_t j = 0; j < c; ++j) total += logits[j] == kNegInf ? 0.0 : std::exp(logits[j] - mx);
    const double lse = mx + std::log(total);
    for (std::size_t j = 0; j < c; ++j)
      (*probs)[i * c + j] = logits[j] == kNegInf ? 0.0 : std::exp(logits[j] - lse);
    out[i] = lse - logits[target[i]];
  }
  return g.push(std::move(out), {a},
                [a, r, c, probs, target = std::move(target)](Graph& g, std::uint32_t self) {
                  Tensor* ga = g.grad_buffer(a);
                  if (!ga) return;
                  const Tensor& G = g.out_grad(self);
                  for (std::size_t i = 0; i < r; ++i) {
                    for (std::size_t j = 0; j < c; ++j) (*ga)[i * c + j] += G[i] * (*probs)[i * c + j];
                    (*ga)[i * c + target[i]] -= G[i];
                  }
                });
}

/// Mean binary cross-entropy of sigmoid(logits) against 0/1 labels, in the
/// stable max(x,0) - x*y + log(1 + e^-|x|) form.
inline Var bce_with_logits(Graph& g, Var logits, std::vector<double> labels) {
  const Tensor& X = g.value(logits);
  detail::require(X.size() == labels.size() && !labels.empty(), "bce_with_logits",
                  "label count mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < X.size(); ++i) {
    const double x = X[i];
    total += std::max(x, 0.0) - x * labels[i] + std::log1p(std::exp(-std::abs(x)));
  }
  const double n = static_cast<double>(X.size());
  return g.push(Tensor::scalar(total / n), {logits},
                [logits, n, labels = std::move(labels)](Graph& g, std::uint32_t self) {
                  Tensor* gx = g.grad_buffer(logits);
                  if (!gx) return;
                  const Tensor& X = g.value(logits);
                  const double go = g.out_grad(self)[0];
                  for (std::size_t i = 0; i < X.size(); ++i)
                    (*gx)[i] += go * (sigmoid_value(X[i]) - labels[i]) / n;
                });
}

inline Var gather_rows(Graph& g, Var a, std::vector<std::size_t> index) {
  const Tensor& A = g.value(a);
  const std::size_t c = A.cols();
  Tensor out = Tensor::matrix(index.size(), c);
  for (std::size_t i = 0; i < index.size(); ++i) {
    detail::require(index[i] < A.rows(), "gather_rows", "row index out of range");
    std::copy_n(A.data() + index[i] * c, c, out.data() + i * c);
  }
  return g.push(std::move(out), {a}, [a, c, index = std::move(index)](Graph& g, std::uint32_t self) {
    Tensor* ga = g.grad_buffer(a);
    if (!ga) return;
    const Tensor& G = g.out_grad(self);
    for (std::size_t i = 0; i < index.size(); ++i) {
      double* dst = ga->data() + index[i] * c;
      const double* src = G.data() + i * c;
      for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
    }
  });
}

inline Var concat_cols(Graph& g, const std::vector<Var>& parts) {
  detail::require(!parts.empty(), "concat_cols", "no inputs");
  const std::size_t r = g.value(parts[0]).rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (Var p : parts) {
    detail::require(g.value(p).rows() == r, "concat_cols", "row count mismatch");
    widths.push_back(g.value(p).cols());
    total += widths.back();
  }
  Tensor out = Tensor::matrix(r, total);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& P = g.value(parts[k]);
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(P.data() + i * widths[k], widths[k], out.data() + i * total + off);
    off += widths[k];
  }
  return g.push(std::move(out), parts, [parts, widths, r, total](Graph& g, std::uint32_t self) {
    const Tensor& G = g.out_grad(self);
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      if (Tensor* gp = g.grad_buffer(parts[k]))
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < widths[k]; ++j)
            (*gp)[i * widths[k] + j] += G[i * total + off + j];
      off += widths[k];
    }
  });
}

inline Var concat_rows(Graph& g, const std::vector<Var>& parts) {
  detail::require(!parts.empty(), "concat_rows", "no inputs");
  const std::size_t c = g.value(parts[0]).cols();
  std::size_t total = 0;
  for (Var p : parts) {
    detail::require(g.value(p).cols() == c, "concat_rows", "column count mismatch");
    total += g.value(p).rows();
  }
  Tensor out = Tensor::matrix(total, c);
  std::size_t off = 0;
  for (Var p : parts) {
    const Tensor& P = g.value(p);
    std::copy(P.values().begin(), P.values().end(), out.data() + off);
    off += P.size();
  }
  return g.push(std::move(out), parts, [parts](Graph& g, std::uint32_t self) {
    const Tensor& G = g.out_grad(self);
    std::size_t off = 0;
    for (Var p : parts) {
      const std::size_t n = g.value(p).size();
      if (Tensor* gp = g.grad_buffer(p))
        for (std::size_t i = 0; i < n; ++i) (*gp)[i] += G[off + i];
      off += n;
    }
  });
}

inline Var reshape(Graph& g, Var a, std::vector<std::size_t> shape) {
  Tensor out(std::move(shape), g.value(a).values());
  return g.push(std::move(out), {a}, [a](Graph& g, std::uint32_t self) {
    Tensor* ga = g.grad_buffer(a);
    if (!ga) return;
    const Tensor& G = g.out_grad(self);
    for (std::size_t i = 0; i < G.size(); ++i) (*ga)[i] += G[i];
  });
}

/// out[i] = a[i, cols[i]], shape [r].
inline Var pick(Graph& g, Var a, std::vector<std::size_t> cols) {
  const Tensor& A = g.value(a);
  const std::size_t c = A.cols();
  detail::require(cols.size() == A.rows(), "pick", "one column per row required");
  Tensor out({cols.size()});
  for (std::size_t i = 0; i < cols.size(); ++i) {
    detail::require(cols[i] < c, "pick", "column out of range");
    out[i] = A[i * c + cols[i]];
  }
  return g.push(std::move(out), {a}, [a, c, cols = std::move(cols)](Graph& g, std::uint32_t self) {
    Tensor* ga = g.grad_buffer(a);
    if (!ga) return;
    const Tensor& G = g.out_grad(self);
    for (std::size_t i = 0; i < cols.size(); ++i) (*ga)[i * c + cols[i]] += G[i];
  });
}

inline Var sum(Graph& g, Var a) {
  const Tensor& A = g.value(a);
  double s = 0.0;
  for (double v : A.values()) s += v;
  return g.push(Tensor::scalar(s), {a}, [a](Graph& g, std::uint32_t self) {
    Tensor* ga = g.grad_buffer(a);
    if (!ga) return;
    const double go = g.out_grad(self)[0];
    for (auto& v : ga->values()) v += go;
  });
}

inline Var mean(Graph& g, Var a) {
  const double n = static_cast<double>(g.value(a).size());
  return scale(g, sum(g, a), 1.0 / n);
}

/// Sum of each row, shape [r x 1].
inline Var row_sum(Graph& g, Var a) {
  const Tensor& A = g.value(a);
  const std::size_t r = A.rows(), c = A.cols();
  Tensor out = Tensor::matrix(r, 1);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i] += A[i * c + j];
  return g.push(std::move(out), {a}, [a, r, c](Graph& g, std::uint32_t self) {
    Tensor* ga = g.grad_buffer(a);
    if (!ga) return;
    const Tensor& G = g.out_grad(self);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) (*ga)[i * c + j] += G[i];
  });
}

/// Scales each row to unit L2 norm; a zero row is a "degenerate vector".
inline Var normalize_rows(Graph& g, Var a) {
  const Tensor& A = g.value(a);
  const std::size_t r = A.rows(), c = A.cols();
  Tensor Y(A.shape());
  auto norms = std::make_shared<std::vector<double>>(r);
  for (std::size_t i = 0; i < r; ++i) {
    double n = l2_norm(A.row(i));
    if (n == 0.0) throw NumericError("normalize_rows: degenerate vector");
    (*norms)[i] = n;
    for (std::size_t j = 0; j < c; ++j) Y[i * c + j] = A[i * c + j] / n;
  }
  return g.push(std::move(Y), {a}, [a, r, c, norms](Graph& g, std::uint32_t self) {
    Tensor* ga = g.grad_buffer(a);
    if (!ga) return;
    const Tensor& Y = g.value(Var{self});
    const Tensor& G = g.out_grad(self);
    for (std::size_t i = 0; i < r; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < c; ++j) s += G[i * c + j] * Y[i * c + j];
      for (std::size_t j = 0; j < c; ++j)
        (*ga)[i * c + j] += (G[i * c + j] - Y[i * c + j] * s) / (*norms)[i];
    }
  });
}

/// Groups of M consecutive rows of x [(B*M) x d] combined with weights
/// w [B x M]: out[b] = sum_m w[b,m] * x[b*M + m].
inline Var segment_combine(Graph& g, Var w, Var x) {
  const Tensor& W = g.value(w);
  const Tensor& X = g.value(x);
  const std::size_t b = W.rows(), m = W.cols(), d = X.cols();
  detail::require(X.rows() == b * m, "segment_combine", W.shape_string() + " vs " + X.shape_string());
  Tensor out = Tensor::matrix(b, d);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t k = 0; k < m; ++k) {
      const double wk = W[i * m + k];
      const double* xr = X.data() + (i * m + k) * d;
      for (std::size_t j = 0; j < d; ++j) out[i * d + j] += wk * xr[j];
    }
  return g.push(std::move(out), {w, x}, [w, x, b, m, d](Graph& g, std::uint32_t self) {
    const Tensor& W = g.value(w);
    const Tensor& X = g.value(x);
    const Tensor& G = g.out_grad(self);
    Tensor* gw = g.grad_buffer(w);
    Tensor* gx = g.grad_buffer(x);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t k = 0; k < m; ++k) {
        const double* gi = G.data() + i * d;
        if (gw) {
          const double* xr = X.data() + (i * m + k) * d;
          double s = 0.0;
          for (std::size_t j = 0; j < d; ++j) s += gi[j] * xr[j];
          (*gw)[i * m + k] += s;
        }
        if (gx) {
          const double wk = W[i * m + k];
          double* dx = gx->data() + (i * m + k) * d;
          for (std::size_t j = 0; j < d; ++j) dx[j] += wk * gi[j];
        }
      }
  });
}

/// Attention coefficients of a graph-attention aggregation: for node i and
/// neighbor j, softmax_j(leaky_relu(dst[i] + src[j])). Aligned with
/// `adj.neighbors`.
inline std::vector<double> neighborhood_attention_weights(const Tensor& dst, const Tensor& src,
                                                          const Adjacency& adj, double slope) {
  std::vector<double> alpha(adj.neighbors.size());
  std::vector<double> logits;
  for (std::size_t i = 0; i < adj.node_count(); ++i) {
    auto nb = adj.of(i);
    if (nb.empty()) throw NumericError("neighborhood attention: node without neighbors");
    logits.resize(nb.size());
    for (std::size_t t = 0; t < nb.size(); ++t) {
      double e = dst[i] + src[nb[t]];
      logits[t] = e > 0.0 ? e : slope * e;
    }
    auto p = softmax(logits);
    std::copy(p.begin(), p.end(), alpha.begin() + static_cast<std::ptrdiff_t>(adj.offsets[i]));
  }
  return alpha;
}

/// Graph-attention aggregation: out[i] = sum_{j in N(i)} alpha_ij * z[j],
/// alpha as in neighborhood_attention_weights. dst/src are [N x 1] score
/// columns, z is [N x d].
inline Var neighborhood_attention(Graph& g, Var z, Var dst, Var src,
                                  std::shared_ptr<const Adjacency> adj, double slope) {
  const Tensor& Z = g.value(z);
  const std::size_t n = Z.rows(), d = Z.cols();
  detail::require(adj->node_count() == n, "neighborhood_attention", "adjacency size mismatch");
  detail::require(g.value(dst).size() == n && g.value(src).size() == n, "neighborhood_attention",
                  "score size mismatch");
  auto alpha = std::make_shared<std::vector<double>>(
      neighborhood_attention_weights(g.value(dst), g.value(src), *adj, slope));
  Tensor out = Tensor::matrix(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    double* oi = out.data() + i * d;
    for (std::size_t t = adj->offsets[i]; t < adj->offsets[i + 1]; ++t) {
      const double a = (*alpha)[t];
      const double* zj = Z.data() + adj->neighbors[t] * d;
      for (std::size_t k = 0; k < d; ++k) oi[k] += a * zj[k];
    }
  }
  return g.push(std::move(out), {z, dst, src},
                [z, dst, src, adj, alpha, slope, n, d](Graph& g, std::uint32_t self) {
                  const Tensor& Z = g.value(z);
                  const Tensor& D = g.value(dst);
                  const Tensor& S = g.value(src);
                  const Tensor& G = g.out_grad(self);
                  Tensor* gz = g.grad_buffer(z);
                  Tensor* gd = g.grad_buffer(dst);
                  Tensor* gs = g.grad_buffer(src);
                  std::vector<double> dalpha;
                  for (std::size_t i = 0; i < n; ++i) {
                    const std::size_t lo = adj->offsets[i], hi = adj->offsets[i + 1];
                    const double* gi = G.data() + i * d;
                    dalpha.assign(hi - lo, 0.0);
                    double weighted = 0.0;
                    for (std::size_t t = lo; t < hi; ++t) {
                      const std::size_t j = adj->neighbors[t];
                      const double* zj = Z.data() + j * d;
                      double s = 0.0;
                      for (std::size_t k = 0; k < d; ++k) s += gi[k] * zj[k];
                      dalpha[t - lo] = s;
                      weighted += (*alpha)[t] * s;
                      if (gz) {
                        double* dz = gz->data() + j * d;
                        const double a = (*alpha)[t];
                        for (std::size_t k = 0; k < d; ++k) dz[k] += a * gi[k];
                      }
                    }
                    if (!gd && !gs) continue;
                    for (std::size_t t = lo; t < hi; ++t) {
                      const std::size_t j = adj->neighbors[t];
                      const double de = (*alpha)[t] * (dalpha[t - lo] - weighted);
                      const double pre = D[i] + S[j];
                      const double dpre = de * (pre > 0.0 ? 1.0 : slope);
                      if (gd) (*gd)[i] += dpre;
                      if (gs) (*gs)[j] += dpre;
                    }
                  }
                });
}

}  // namespace ad
}  // namespace peace
