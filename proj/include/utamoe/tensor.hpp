#pragma once

// Dense float64 tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a cheap handle onto a shared node. Every op that sees at least
// one input with requires_grad() records its inputs and a backward rule on the
// output node; backward() replays those rules in reverse topological order.
// Only two broadcasting forms exist: same shape and scalar (numel == 1).
// Row-wise bias and row scaling are separate, explicitly named ops.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "utamoe/errors.hpp"

namespace utamoe {

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first touched
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

inline thread_local int no_grad_depth = 0;

}  // namespace detail

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

// Disables tape recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  static Tensor from_data(Shape shape, std::vector<double> values, bool requires_grad = false) {
    for (auto e : shape)
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    if (shape_numel(shape) != values.size())
      throw DimensionError("shape " + shape_str(shape) + " does not hold " +
                           std::to_string(values.size()) + " values");
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->data = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto count = shape_numel(shape);
    return from_data(std::move(shape), std::vector<double>(count, 0.0), requires_grad);
  }
  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    const auto count = shape_numel(shape);
    return from_data(std::move(shape), std::vector<double>(count, value), requires_grad);
  }
  static Tensor scalar(double value, bool requires_grad = false) {
    return from_data({1}, {value}, requires_grad);
  }
  static Tensor vec(std::initializer_list<double> values, bool requires_grad = false) {
    return from_data({values.size()}, std::vector<double>(values), requires_grad);
  }
  static Tensor mat(std::initializer_list<std::initializer_list<double>> rows, bool requires_grad = false) {
    std::vector<double> flat;
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged matrix literal");
      flat.insert(flat.end(), row.begin(), row.end());
    }
    return from_data({r, c}, std::move(flat), requires_grad);
  }
  static Tensor identity(std::size_t n) {
    auto t = zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) t.node_->data[i * n + i] = 1.0;
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }
  std::size_t rows() const { return rank() == 1 ? 1 : node_->shape[0]; }
  std::size_t cols() const { return node_->shape.back(); }

  std::span<const double> data() const { return node_->data; }
  // Direct write access; intended for initialisers and optimisers on leaves.
  std::span<double> mutable_data() { return node_->data; }
  double operator[](std::size_t i) const { return node_->data[i]; }
  double at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }
  double item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }
  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->grad_buffer(); }
  // Allocates (if needed) and zero-fills the gradient buffer.
  void zero_grad() {
    auto& g = node_->grad_buffer();
    std::fill(g.begin(), g.end(), 0.0);
  }
  void clear_grad() { node_->grad.clear(); }

  Tensor detach() const { return from_data(shape(), node_->data, false); }
  Tensor clone() const { return from_data(shape(), node_->data, requires_grad()); }

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& shared() const { return node_; }
  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline bool tracks(const Tensor& t) { return grad_enabled() && t.requires_grad(); }

// Output node for an op; attaches the backward rule only when some input is tracked.
inline Tensor make_result(Shape shape, std::vector<double> values, std::initializer_list<Tensor> inputs,
                          std::function<void(Node&)> backward) {
  auto out = Tensor::from_data(std::move(shape), std::move(values), false);
  bool any = false;
  for (const auto& in : inputs) any = any || tracks(in);
  if (!any) return out;
  auto* n = out.node();
  n->requires_grad = true;
  for (const auto& in : inputs) n->parents.push_back(in.shared());
  n->backward = std::move(backward);
  return out;
}

inline Tensor make_result(Shape shape, std::vector<double> values, const std::vector<Tensor>& inputs,
                          std::function<void(Node&)> backward) {
  auto out = Tensor::from_data(std::move(shape), std::move(values), false);
  bool any = false;
  for (const auto& in : inputs) any = any || tracks(in);
  if (!any) return out;
  auto* n = out.node();
  n->requires_grad = true;
  for (const auto& in : inputs) n->parents.push_back(in.shared());
  n->backward = std::move(backward);
  return out;
}

inline void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

inline bool is_scalar(const Tensor& t) { return t.numel() == 1; }

}  // namespace detail

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

// Recorded operations reachable from a root, in topological order (inputs first).
class ComputationTape {
 public:
  static ComputationTape record(const Tensor& root) {
    ComputationTape tape;
    if (!root.defined() || !root.requires_grad()) return tape;
    std::unordered_set<const detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(root.node(), 0);
    seen.insert(root.node());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        detail::Node* p = node->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        tape.nodes_.push_back(node);
        stack.pop_back();
      }
    }
    return tape;
  }

  const std::vector<detail::Node*>& nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<detail::Node*> nodes_;
};

// Reverse-mode sweep from a scalar loss. Gradients accumulate (+=) into every
// tracked node, so shared subexpressions receive the sum over all uses.
inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw ContractError("backward() needs a scalar loss, got " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  if (!loss.requires_grad()) throw ContractError("backward() on a loss that does not require grad");
  auto tape = ComputationTape::record(loss);
  loss.node()->grad_buffer()[0] += 1.0;
  const auto& nodes = tape.nodes();
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward && n->grad.size() == n->data.size()) n->backward(*n);
  }
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<double> out(m * n, 0.0);
  const auto A = a.data();
  const auto B = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      if (av == 0.0) continue;
      const double* brow = B.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return detail::make_result({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const auto& G = self.grad;
    if (pa.requires_grad) {
      auto& ga = pa.grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double* brow = pb.data.data() + p * n;
          const double* grow = G.data() + i * n;
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          ga[i * k + p] += acc;
        }
    }
    if (pb.requires_grad) {
      auto& gb = pb.grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av = pa.data[i * k + p];
          if (av == 0.0) continue;
          double* gbrow = gb.data() + p * n;
          const double* grow = G.data() + i * n;
          for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
        }
    }
  });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_matrix(a, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<double> out(r * c);
  const auto A = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = A[i * c + j];
  return detail::make_result({c, r}, std::move(out), {a}, [r, c](detail::Node& self) {
    auto& p = *self.parents[0];
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
  });
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

namespace detail {

// Shared driver for add/sub/mul: same shape, or one side scalar.
template <typename Fwd, typename DA, typename DB>
Tensor binary(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, DA da, DB db) {
  const bool same = a.shape() == b.shape();
  const bool a_scalar = !same && is_scalar(a);
  const bool b_scalar = !same && is_scalar(b);
  if (!same && !a_scalar && !b_scalar)
    throw DimensionError(std::string(name) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  const Shape shape = a_scalar ? b.shape() : a.shape();
  const std::size_t n = shape_numel(shape);
  std::vector<double> out(n);
  const auto A = a.data();
  const auto B = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(A[a_scalar ? 0 : i], B[b_scalar ? 0 : i]);
  return make_result(shape, std::move(out), {a, b}, [n, a_scalar, b_scalar, da, db](Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        g[a_scalar ? 0 : i] += self.grad[i] * da(pa.data[a_scalar ? 0 : i], pb.data[b_scalar ? 0 : i]);
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        g[b_scalar ? 0 : i] += self.grad[i] * db(pa.data[a_scalar ? 0 : i], pb.data[b_scalar ? 0 : i]);
    }
  });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= s;
  return detail::make_result(a.shape(), std::move(out), {a}, [s](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

// Sum of a list of same-shaped tensors.
inline Tensor add_n(const std::vector<Tensor>& terms) {
  if (terms.empty()) throw EmptyReductionError("add_n of an empty list");
  const Shape shape = terms.front().shape();
  for (const auto& t : terms)
    if (t.shape() != shape)
      throw DimensionError("add_n: shapes " + shape_str(shape) + " and " + shape_str(t.shape()));
  std::vector<double> out(shape_numel(shape), 0.0);
  for (const auto& t : terms) {
    const auto d = t.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += d[i];
  }
  return detail::make_result(shape, std::move(out), terms, [](detail::Node& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

// x[n×m] + b[m] added to every row (or x[m] + b[m]).
inline Tensor add_bias(const Tensor& x, const Tensor& b) {
  const std::size_t m = x.cols();
  if (b.numel() != m || (b.rank() != 1 && !(b.rank() == 2 && b.dim(0) == 1)))
    throw DimensionError("add_bias: bias " + shape_str(b.shape()) + " does not match " + shape_str(x.shape()));
  const std::size_t n = x.numel() / m;
  std::vector<double> out(x.data().begin(), x.data().end());
  const auto B = b.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] += B[j];
  return detail::make_result(x.shape(), std::move(out), {x, b}, [n, m](detail::Node& self) {
    auto& px = *self.parents[0];
    auto& pb = *self.parents[1];
    if (px.requires_grad) {
      auto& g = px.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) g[j] += self.grad[i * m + j];
    }
  });
}

// Row i of x[n×m] multiplied by w[i]; w has n entries ([n] or [n×1]).
inline Tensor mul_rows(const Tensor& x, const Tensor& w) {
  detail::require_matrix(x, "mul_rows");
  const std::size_t n = x.dim(0), m = x.dim(1);
  if (w.numel() != n)
    throw DimensionError("mul_rows: weights " + shape_str(w.shape()) + " do not match " + shape_str(x.shape()));
  std::vector<double> out(x.data().begin(), x.data().end());
  const auto W = w.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] *= W[i];
  return detail::make_result(x.shape(), std::move(out), {x, w}, [n, m](detail::Node& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    if (px.requires_grad) {
      auto& g = px.grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) g[i * m + j] += self.grad[i * m + j] * pw.data[i];
    }
    if (pw.requires_grad) {
      auto& g = pw.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < m; ++j) acc += self.grad[i * m + j] * px.data[i * m + j];
        g[i] += acc;
      }
    }
  });
}

namespace detail {
inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluA = 0.044715;
}  // namespace detail

// tanh approximation
inline Tensor gelu(const Tensor& x) {
  std::vector<double> out(x.numel());
  const auto X = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = X[i];
    out[i] = 0.5 * v * (1.0 + std::tanh(detail::kGeluC * (v + detail::kGeluA * v * v * v)));
  }
  return detail::make_result(x.shape(), std::move(out), {x}, [](detail::Node& self) {
    auto& p = *self.parents[0];
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = p.data[i];
      const double u = detail::kGeluC * (v + detail::kGeluA * v * v * v);
      const double t = std::tanh(u);
      const double du = detail::kGeluC * (1.0 + 3.0 * detail::kGeluA * v * v);
      g[i] += self.grad[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
    }
  });
}

inline constexpr double kLayerNormEps = 1e-5;

// Normalises each row (last axis) to zero mean / unit variance, then gain and bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  const std::size_t m = x.cols();
  if (gain.numel() != m || bias.numel() != m)
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                         " vs input " + shape_str(x.shape()));
  const std::size_t n = x.numel() / m;
  std::vector<double> out(x.numel());
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(n);
  const auto X = x.data();
  const auto G = gain.data();
  const auto B = bias.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = X.data() + i * m;
    double mean = 0.0;
    for (std::size_t j = 0; j < m; ++j) mean += row[j];
    mean /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t j = 0; j < m; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(m);
    const double is = 1.0 / std::sqrt(var + kLayerNormEps);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < m; ++j) {
      const double h = (row[j] - mean) * is;
      (*xhat)[i * m + j] = h;
      out[i * m + j] = h * G[j] + B[j];
    }
  }
  return detail::make_result(x.shape(), std::move(out), {x, gain, bias}, [n, m, xhat, inv_std](detail::Node& self) {
    auto& px = *self.parents[0];
    auto& pg = *self.parents[1];
    auto& pb = *self.parents[2];
    const auto& dy = self.grad;
    if (pg.requires_grad) {
      auto& g = pg.grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) g[j] += dy[i * m + j] * (*xhat)[i * m + j];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) g[j] += dy[i * m + j];
    }
    if (px.requires_grad) {
      auto& g = px.grad_buffer();
      const double inv_m = 1.0 / static_cast<double>(m);
      for (std::size_t i = 0; i < n; ++i) {
        double mean_d = 0.0, mean_dh = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
          const double d = dy[i * m + j] * pg.data[j];
          mean_d += d;
          mean_dh += d * (*xhat)[i * m + j];
        }
        mean_d *= inv_m;
        mean_dh *= inv_m;
        for (std::size_t j = 0; j < m; ++j) {
          const double d = dy[i * m + j] * pg.data[j];
          g[i * m + j] += (*inv_std)[i] * (d - mean_d - (*xhat)[i * m + j] * mean_dh);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Softmax family
// ---------------------------------------------------------------------------

// Softmax along `axis`, max-subtracted.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank())
    throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
  const auto& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  std::vector<double> out(x.numel());
  const auto X = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, X[base + j * inner]);
      double sum = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        const double e = std::exp(X[base + j * inner] - mx);
        out[base + j * inner] = e;
        sum += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= sum;
    }
  return detail::make_result(s, std::move(out), {x}, [outer, inner, len](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    const auto& y = self.data;
    const auto& dy = self.grad;
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < len; ++j) dot += y[base + j * inner] * dy[base + j * inner];
        for (std::size_t j = 0; j < len; ++j) {
          const std::size_t idx = base + j * inner;
          g[idx] += y[idx] * (dy[idx] - dot);
        }
      }
  });
}

// Row-wise softmax of x[n×m] restricted to entries with mask != 0; masked-out
// entries are exactly 0 and rows with an empty mask are all zeros.
inline Tensor masked_softmax(const Tensor& x, const std::vector<std::uint8_t>& mask) {
  detail::require_matrix(x, "masked_softmax");
  if (mask.size() != x.numel())
    throw DimensionError("masked_softmax: mask of " + std::to_string(mask.size()) + " entries for " +
                         shape_str(x.shape()));
  const std::size_t n = x.dim(0), m = x.dim(1);
  std::vector<double> out(x.numel(), 0.0);
  const auto X = x.data();
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < m; ++j)
      if (mask[i * m + j]) mx = std::max(mx, X[i * m + j]);
    if (!std::isfinite(mx)) continue;
    double sum = 0.0;
    for (std::size_t j = 0; j < m; ++j)
      if (mask[i * m + j]) {
        const double e = std::exp(X[i * m + j] - mx);
        out[i * m + j] = e;
        sum += e;
      }
    for (std::size_t j = 0; j < m; ++j)
      if (mask[i * m + j]) out[i * m + j] /= sum;
  }
  return detail::make_result(x.shape(), std::move(out), {x}, [n, m](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    const auto& y = self.data;
    const auto& dy = self.grad;
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < m; ++j) dot += y[i * m + j] * dy[i * m + j];
      for (std::size_t j = 0; j < m; ++j) g[i * m + j] += y[i * m + j] * (dy[i * m + j] - dot);
    }
  });
}

// Lower-triangular (j <= i) mask for an n×n score matrix.
inline std::vector<std::uint8_t> causal_mask(std::size_t n) {
  std::vector<std::uint8_t> mask(n * n, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) mask[i * n + j] = 1;
  return mask;
}

// ---------------------------------------------------------------------------
// Losses and reductions
// ---------------------------------------------------------------------------

// Mean over rows with mask != 0 of -log softmax(logits[i])[targets[i]].
inline Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& targets,
                            const std::vector<double>& mask) {
  detail::require_matrix(logits, "cross_entropy");
  const std::size_t n = logits.dim(0), v = logits.dim(1);
  if (targets.size() != n || mask.size() != n)
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets / " +
                         std::to_string(mask.size()) + " mask entries for logits " + shape_str(logits.shape()));
  double count = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] >= v)
      throw IndexError("cross_entropy: target " + std::to_string(targets[i]) + " outside [0," + std::to_string(v) + ")");
    count += mask[i];
  }
  if (count <= 0.0) throw EmptyReductionError("cross_entropy: mask selects no positions");
  auto probs = std::make_shared<std::vector<double>>(n * v, 0.0);
  const auto L = logits.data();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (mask[i] == 0.0) continue;
    const double* row = L.data() + i * v;
    const double mx = *std::max_element(row, row + v);
    double sum = 0.0;
    for (std::size_t j = 0; j < v; ++j) sum += std::exp(row[j] - mx);
    const double lse = mx + std::log(sum);
    for (std::size_t j = 0; j < v; ++j) (*probs)[i * v + j] = std::exp(row[j] - lse);
    total += mask[i] * (lse - row[targets[i]]);
  }
  return detail::make_result({1}, {total / count}, {logits}, [n, v, probs, targets, mask, count](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    const double up = self.grad[0] / count;
    for (std::size_t i = 0; i < n; ++i) {
      if (mask[i] == 0.0) continue;
      const double w = up * mask[i];
      for (std::size_t j = 0; j < v; ++j) g[i * v + j] += w * (*probs)[i * v + j];
      g[i * v + targets[i]] -= w;
    }
  });
}

inline Tensor mse(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape())
    throw DimensionError("mse: shapes " + shape_str(pred.shape()) + " and " + shape_str(target.shape()));
  const std::size_t n = pred.numel();
  const auto P = pred.data();
  const auto T = target.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += (P[i] - T[i]) * (P[i] - T[i]);
  return detail::make_result({1}, {acc / static_cast<double>(n)}, {pred, target}, [n](detail::Node& self) {
    auto& pp = *self.parents[0];
    auto& pt = *self.parents[1];
    const double c = 2.0 * self.grad[0] / static_cast<double>(n);
    if (pp.requires_grad) {
      auto& g = pp.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) g[i] += c * (pp.data[i] - pt.data[i]);
    }
    if (pt.requires_grad) {
      auto& g = pt.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) g[i] -= c * (pp.data[i] - pt.data[i]);
    }
  });
}

inline Tensor sum(const Tensor& x) {
  const auto X = x.data();
  const double s = std::accumulate(X.begin(), X.end(), 0.0);
  return detail::make_result({1}, {s}, {x}, [](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

// ---------------------------------------------------------------------------
// Indexing and assembly
// ---------------------------------------------------------------------------

// out[i] = x[idx[i]]; repeated indices accumulate in backward.
inline Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& idx) {
  detail::require_matrix(x, "gather_rows");
  const std::size_t r = x.dim(0), c = x.dim(1);
  if (idx.empty()) throw DimensionError("gather_rows: empty index list");
  std::vector<double> out(idx.size() * c);
  const auto X = x.data();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= r) throw IndexError("gather_rows: row " + std::to_string(idx[i]) + " of " + std::to_string(r));
    std::copy_n(X.data() + idx[i] * c, c, out.data() + i * c);
  }
  return detail::make_result({idx.size(), c}, std::move(out), {x}, [idx, c](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) g[idx[i] * c + j] += self.grad[i * c + j];
  });
}

// Inverse placement of gather_rows: an n_rows×c zero matrix with row idx[i] += x[i].
inline Tensor scatter_rows(const Tensor& x, const std::vector<std::size_t>& idx, std::size_t n_rows) {
  detail::require_matrix(x, "scatter_rows");
  const std::size_t c = x.dim(1);
  if (idx.size() != x.dim(0)) throw DimensionError("scatter_rows: index count differs from row count");
  std::vector<double> out(n_rows * c, 0.0);
  const auto X = x.data();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= n_rows) throw IndexError("scatter_rows: row " + std::to_string(idx[i]) + " of " + std::to_string(n_rows));
    for (std::size_t j = 0; j < c; ++j) out[idx[i] * c + j] += X[i * c + j];
  }
  return detail::make_result({n_rows, c}, std::move(out), {x}, [idx, c](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[idx[i] * c + j];
  });
}

// Sub-matrix x[r0:r1, c0:c1].
inline Tensor block(const Tensor& x, std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1) {
  detail::require_matrix(x, "block");
  const std::size_t c = x.dim(1);
  if (r0 >= r1 || c0 >= c1 || r1 > x.dim(0) || c1 > c)
    throw IndexError("block: [" + std::to_string(r0) + ":" + std::to_string(r1) + ", " + std::to_string(c0) + ":" +
                     std::to_string(c1) + "] outside " + shape_str(x.shape()));
  const std::size_t h = r1 - r0, w = c1 - c0;
  std::vector<double> out(h * w);
  const auto X = x.data();
  for (std::size_t i = 0; i < h; ++i) std::copy_n(X.data() + (r0 + i) * c + c0, w, out.data() + i * w);
  return detail::make_result({h, w}, std::move(out), {x}, [r0, c0, h, w, c](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) g[(r0 + i) * c + c0 + j] += self.grad[i * w + j];
  });
}

inline Tensor slice_rows(const Tensor& x, std::size_t r0, std::size_t r1) { return block(x, r0, r1, 0, x.dim(1)); }
inline Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t c1) { return block(x, 0, x.dim(0), c0, c1); }

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: nothing to concatenate");
  const std::size_t c = parts.front().cols();
  std::size_t r = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    detail::require_matrix(p, "concat_rows");
    if (p.dim(1) != c) throw DimensionError("concat_rows: column counts differ");
    offsets.push_back(r);
    r += p.dim(0);
  }
  std::vector<double> out;
  out.reserve(r * c);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return detail::make_result({r, c}, std::move(out), parts, [offsets, c](detail::Node& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      auto& p = *self.parents[k];
      if (!p.requires_grad) continue;
      auto& g = p.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[offsets[k] * c + i];
    }
  });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: nothing to concatenate");
  const std::size_t r = parts.front().rows();
  std::size_t c = 0;
  std::vector<std::size_t> offsets, widths;
  for (const auto& p : parts) {
    detail::require_matrix(p, "concat_cols");
    if (p.dim(0) != r) throw DimensionError("concat_cols: row counts differ");
    offsets.push_back(c);
    widths.push_back(p.dim(1));
    c += p.dim(1);
  }
  std::vector<double> out(r * c);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto d = parts[k].data();
    for (std::size_t i = 0; i < r; ++i) std::copy_n(d.data() + i * widths[k], widths[k], out.data() + i * c + offsets[k]);
  }
  return detail::make_result({r, c}, std::move(out), parts, [offsets, widths, r, c](detail::Node& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      auto& p = *self.parents[k];
      if (!p.requires_grad) continue;
      auto& g = p.grad_buffer();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < widths[k]; ++j) g[i * widths[k] + j] += self.grad[i * c + offsets[k] + j];
    }
  });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw DimensionError("reshape: " + shape_str(x.shape()) + " cannot become " + shape_str(shape));
  return detail::make_result(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()), {x},
                             [](detail::Node& self) {
                               auto& g = self.parents[0]->grad_buffer();
                               for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                             });
}

// ---------------------------------------------------------------------------
// Non-differentiable selections (never recorded on the tape)
// ---------------------------------------------------------------------------

// Index of the largest value; ties resolve to the lowest index.
inline std::size_t argmax(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

inline std::vector<std::size_t> argmax_rows(const Tensor& x) {
  detail::require_matrix(x, "argmax_rows");
  const std::size_t c = x.dim(1);
  std::vector<std::size_t> out(x.dim(0));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = argmax(x.data().subspan(i * c, c));
  return out;
}

// Indices of the k largest values in descending order; equal values keep lower index first.
inline std::vector<std::size_t> top_k(std::span<const double> values, std::size_t k) {
  if (k == 0 || k > values.size())
    throw ConfigError("top_k: k=" + std::to_string(k) + " with " + std::to_string(values.size()) + " candidates");
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });
  idx.resize(k);
  return idx;
}

inline bool all_finite(const Tensor& t) {
  for (double v : t.data())
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace utamoe
