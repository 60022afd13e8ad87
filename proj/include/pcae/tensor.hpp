#pragma once

// Dense float64 tensors with reverse-mode differentiation, restricted to the
// operation set the point-cloud auto-encoders need.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "pcae/errors.hpp"

namespace pcae {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

struct Node {
  std::uint64_t id = 0;
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the grads of `inputs`.
  std::function<void(Node&)> backward;

  bool is_leaf() const { return inputs.empty(); }

  std::vector<double>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

inline std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Handle to a node in the differentiation graph. Copies share the node.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (shape.empty()) throw DimensionError("tensor shape must have at least one dimension");
    for (auto d : shape)
      if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_string(shape));
    if (shape_numel(shape) != values.size())
      throw DimensionError("tensor shape " + shape_string(shape) + " does not match " +
                           std::to_string(values.size()) + " values");
    node_->id = detail::next_node_id();
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  std::uint64_t id() const { return node_->id; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }
  const char* op() const { return node_->op; }

  std::span<const double> values() const { return node_->value; }
  /// Direct write access; intended for optimizer updates on leaf parameters.
  std::span<double> mutable_values() { return node_->value; }
  double operator[](std::size_t i) const { return node_->value[i]; }

  double item() const {
    if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_string(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

  /// Copy of the values with no graph history.
  Tensor detach() const { return Tensor(shape(), node_->value, false); }

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  friend Tensor make_op_result(const char*, Shape, std::vector<double>, std::vector<Tensor>,
                               std::function<void(detail::Node&)>);

  std::shared_ptr<detail::Node> node_;
};

/// Builds the output node of an operation. The backward closure is recorded only
/// when grad mode is on and some input requires a gradient.
inline Tensor make_op_result(const char* op, Shape shape, std::vector<double> value,
                             std::vector<Tensor> inputs, std::function<void(detail::Node&)> backward) {
  for (double v : value)
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
  auto node = std::make_shared<detail::Node>();
  node->id = detail::next_node_id();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool needs = false;
  if (detail::grad_mode())
    for (const auto& t : inputs) needs = needs || t.requires_grad();
  if (needs) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (const auto& t : inputs) node->inputs.push_back(t.node_ptr());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

/// Nodes reachable from `root` that require a gradient, in topological order
/// (every input precedes its consumers). Node ids increase with creation time,
/// so sorting by id is a valid topological order.
inline std::vector<detail::Node*> topological_order(const Tensor& root) {
  std::vector<detail::Node*> nodes;
  std::unordered_set<const detail::Node*> seen;
  std::vector<detail::Node*> stack{root.node()};
  while (!stack.empty()) {
    auto* n = stack.back();
    stack.pop_back();
    if (!n->requires_grad || !seen.insert(n).second) continue;
    nodes.push_back(n);
    for (auto& in : n->inputs) stack.push_back(in.get());
  }
  std::sort(nodes.begin(), nodes.end(), [](auto* a, auto* b) { return a->id < b->id; });
  return nodes;
}

/// Populates d(loss)/dT for every leaf tensor that requires a gradient.
/// Leaf gradients accumulate across calls; call zero_grad() to reset them.
inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw UsageError("backward() requires a scalar loss");
  if (!loss.requires_grad()) return;
  auto order = topological_order(loss);
  for (auto* n : order)
    if (!n->is_leaf()) n->grad.assign(n->value.size(), 0.0);
  loss.node()->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* n = *it;
    if (n->backward) n->backward(*n);
  }
}

namespace detail {

inline std::vector<double>& grad_of(Node& self, std::size_t input) {
  return self.inputs[input]->ensure_grad();
}

inline bool wants_grad(const Node& self, std::size_t input) {
  return self.inputs[input]->requires_grad;
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
}

inline void require_rank(const Tensor& a, std::size_t rank, const char* op) {
  if (a.rank() != rank)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_string(a.shape()));
}

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

// C = A * B for row-major A[m x k], B[k x n]. Each output row is produced by
// the same sequence of multiply/add operations regardless of its position or
// of m, so results are bitwise independent of row order and batch size.
inline void gemm_rows(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                      std::size_t n) {
  constexpr std::size_t kColTile = 256;
  for (std::size_t j0 = 0; j0 < n; j0 += kColTile) {
    const std::size_t j1 = std::min(n, j0 + kColTile);
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) {
      double* c0 = c + i * n;
      double* c1 = c0 + n;
      double* c2 = c1 + n;
      double* c3 = c2 + n;
      for (std::size_t j = j0; j < j1; ++j) c0[j] = c1[j] = c2[j] = c3[j] = 0.0;
      const double* a0 = a + i * k;
      for (std::size_t p = 0; p < k; ++p) {
        const double* br = b + p * n;
        const double x0 = a0[p], x1 = a0[k + p], x2 = a0[2 * k + p], x3 = a0[3 * k + p];
        for (std::size_t j = j0; j < j1; ++j) {
          const double bv = br[j];
          c0[j] += x0 * bv;
          c1[j] += x1 * bv;
          c2[j] += x2 * bv;
          c3[j] += x3 * bv;
        }
      }
    }
    for (; i < m; ++i) {
      double* c0 = c + i * n;
      for (std::size_t j = j0; j < j1; ++j) c0[j] = 0.0;
      const double* a0 = a + i * k;
      for (std::size_t p = 0; p < k; ++p) {
        const double* br = b + p * n;
        const double x0 = a0[p];
        for (std::size_t j = j0; j < j1; ++j) c0[j] += x0 * br[j];
      }
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// Matrix product of a[m x k] and b[k x n].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw DimensionError("matmul: inner dimensions disagree " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  std::vector<double> out(m * n);
  detail::gemm_rows(a.values().data(), b.values().data(), out.data(), m, k, n);
  return make_op_result("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    using detail::ConstMap;
    using detail::MutMap;
    ConstMap dc(self.grad.data(), m, n);
    if (detail::wants_grad(self, 0)) {
      ConstMap bm(self.inputs[1]->value.data(), k, n);
      MutMap da(detail::grad_of(self, 0).data(), m, k);
      da.noalias() += dc * bm.transpose();
    }
    if (detail::wants_grad(self, 1)) {
      ConstMap am(self.inputs[0]->value.data(), m, k);
      MutMap db(detail::grad_of(self, 1).data(), k, n);
      db.noalias() += am.transpose() * dc;
    }
  });
}

/// x[m x n] + bias[n] broadcast over rows.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
  detail::require_rank(x, 2, "add_bias");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (bias.numel() != n)
    throw DimensionError("add_bias: bias of " + std::to_string(bias.numel()) + " for " +
                         std::to_string(n) + " columns");
  std::vector<double> out(x.values().begin(), x.values().end());
  auto bv = bias.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bv[j];
  return make_op_result("add_bias", x.shape(), std::move(out), {x, bias}, [m, n](detail::Node& self) {
    if (detail::wants_grad(self, 0)) {
      auto& g = detail::grad_of(self, 0);
      for (std::size_t i = 0; i < m * n; ++i) g[i] += self.grad[i];
    }
    if (detail::wants_grad(self, 1)) {
      auto& g = detail::grad_of(self, 1);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_op_result("add", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (!detail::wants_grad(self, k)) continue;
      auto& g = detail::grad_of(self, k);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_op_result("sub", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    if (detail::wants_grad(self, 0)) {
      auto& g = detail::grad_of(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (detail::wants_grad(self, 1)) {
      auto& g = detail::grad_of(self, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_op_result("mul", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    if (detail::wants_grad(self, 0)) {
      auto& g = detail::grad_of(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (detail::wants_grad(self, 1)) {
      auto& g = detail::grad_of(self, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  return make_op_result("scale", a.shape(), std::move(out), {a}, [s](detail::Node& self) {
    auto& g = detail::grad_of(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
  });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + c;
  return make_op_result("add_scalar", a.shape(), std::move(out), {a}, [](detail::Node& self) {
    auto& g = detail::grad_of(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

inline Tensor exp(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a[i]);
  return make_op_result("exp", a.shape(), std::move(out), {a}, [](detail::Node& self) {
    auto& g = detail::grad_of(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * self.value[i];
  });
}

inline Tensor log(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!(a[i] > 0.0)) throw DomainError("log of non-positive value " + std::to_string(a[i]));
    out[i] = std::log(a[i]);
  }
  return make_op_result("log", a.shape(), std::move(out), {a}, [](detail::Node& self) {
    const auto& av = self.inputs[0]->value;
    auto& g = detail::grad_of(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / av[i];
  });
}

inline Tensor square(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * a[i];
  return make_op_result("square", a.shape(), std::move(out), {a}, [](detail::Node& self) {
    const auto& av = self.inputs[0]->value;
    auto& g = detail::grad_of(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * av[i] * self.grad[i];
  });
}

/// max(x, slope * x), slope in (0, 1).
inline Tensor leaky_relu(const Tensor& x, double slope = 0.2) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : slope * x[i];
  return make_op_result("leaky_relu", x.shape(), std::move(out), {x}, [slope](detail::Node& self) {
    const auto& xv = self.inputs[0]->value;
    auto& g = detail::grad_of(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (xv[i] > 0.0 ? 1.0 : slope);
  });
}

/// ln(1 + e^x) + eps in overflow-safe form. The result is floored at the next
/// double above eps, so it stays strictly greater than eps even where the
/// softplus term is below eps's rounding granularity.
inline Tensor softplus_eps(const Tensor& x, double eps) {
  if (!(eps >= 0.0)) throw DomainError("softplus_eps: eps must be non-negative");
  const double floor = std::nextafter(eps, std::numeric_limits<double>::infinity());
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = std::max(std::max(x[i], 0.0) + std::log1p(std::exp(-std::abs(x[i]))) + eps, floor);
  return make_op_result("softplus_eps", x.shape(), std::move(out), {x}, [](detail::Node& self) {
    const auto& xv = self.inputs[0]->value;
    auto& g = detail::grad_of(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xv[i];
      const double sig = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
      g[i] += self.grad[i] * sig;
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions and shape

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return make_op_result("sum", {1}, {s}, {a}, [](detail::Node& self) {
    auto& g = detail::grad_of(self, 0);
    for (auto& v : g) v += self.grad[0];
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw DimensionError("reshape: cannot view " + shape_string(a.shape()) + " as " + shape_string(shape));
  std::vector<double> out(a.values().begin(), a.values().end());
  return make_op_result("reshape", std::move(shape), std::move(out), {a}, [](detail::Node& self) {
    auto& g = detail::grad_of(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

/// Concatenation along `axis`; all other dimensions must agree.
inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw UsageError("concat of zero tensors");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) throw DimensionError("concat: axis out of range");
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != ref.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t d = 0; d < ref.size(); ++d)
      if (d != axis && p.dim(d) != ref[d])
        throw DimensionError("concat: shape mismatch " + shape_string(ref) + " vs " + shape_string(p.shape()));
    out_shape[axis] += p.dim(axis);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= ref[d];
  for (std::size_t d = axis + 1; d < ref.size(); ++d) inner *= ref[d];
  std::vector<std::size_t> widths;
  for (const auto& p : parts) widths.push_back(p.dim(axis) * inner);
  const std::size_t row = out_shape[axis] * inner;
  std::vector<double> out(outer * row);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto v = parts[k].values();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(o * widths[k]), widths[k],
                  out.begin() + static_cast<std::ptrdiff_t>(o * row + offset));
    offset += widths[k];
  }
  return make_op_result("concat", std::move(out_shape), std::move(out), parts,
                        [outer, row, widths](detail::Node& self) {
                          std::size_t off = 0;
                          for (std::size_t k = 0; k < widths.size(); ++k) {
                            if (detail::wants_grad(self, k)) {
                              auto& g = detail::grad_of(self, k);
                              for (std::size_t o = 0; o < outer; ++o)
                                for (std::size_t i = 0; i < widths[k]; ++i)
                                  g[o * widths[k] + i] += self.grad[o * row + off + i];
                            }
                            off += widths[k];
                          }
                        });
}

/// Columnwise maximum over the rows of each of `groups` consecutive row blocks:
/// x[groups*N x C] -> [groups x C]. Ties resolve to the lowest row index.
inline Tensor max_pool_points(const Tensor& x, std::size_t groups = 1) {
  detail::require_rank(x, 2, "max_pool_points");
  if (groups == 0 || x.dim(0) % groups != 0)
    throw DimensionError("max_pool_points: " + std::to_string(x.dim(0)) + " rows not divisible into " +
                         std::to_string(groups) + " groups");
  const std::size_t rows = x.dim(0) / groups, cols = x.dim(1);
  auto xv = x.values();
  std::vector<double> out(groups * cols);
  std::vector<std::size_t> argmax(groups * cols);
  for (std::size_t g = 0; g < groups; ++g) {
    const std::size_t base = g * rows;
    for (std::size_t c = 0; c < cols; ++c) {
      out[g * cols + c] = xv[base * cols + c];
      argmax[g * cols + c] = base;
    }
    for (std::size_t r = base + 1; r < base + rows; ++r)
      for (std::size_t c = 0; c < cols; ++c)
        if (xv[r * cols + c] > out[g * cols + c]) {
          out[g * cols + c] = xv[r * cols + c];
          argmax[g * cols + c] = r;
        }
  }
  return make_op_result("max_pool_points", {groups, cols}, std::move(out), {x},
                        [cols, argmax = std::move(argmax)](detail::Node& self) {
                          auto& g = detail::grad_of(self, 0);
                          for (std::size_t i = 0; i < argmax.size(); ++i)
                            g[argmax[i] * cols + i % cols] += self.grad[i];
                        });
}

// ---------------------------------------------------------------------------
// Batch normalisation

enum class Mode { Train, Eval };

/// Running statistics owned by a batch-norm layer.
struct BatchNormStats {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.9;
  double eps = 1e-5;

  explicit BatchNormStats(std::size_t channels = 0)
      : running_mean(channels, 0.0), running_var(channels, 1.0) {}
};

/// Normalises each column of x[R x C]. Train mode uses batch statistics over
/// the R rows (and updates the running estimates); eval mode uses the running
/// estimates, which makes every row independent of the others.
inline Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormStats& stats,
                         Mode mode) {
  detail::require_rank(x, 2, "batch_norm");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (gamma.numel() != cols || beta.numel() != cols || stats.running_mean.size() != cols)
    throw DimensionError("batch_norm: parameter size does not match " + std::to_string(cols) + " channels");
  auto xv = x.values();
  auto gv = gamma.values();
  auto bv = beta.values();
  std::vector<double> xhat(rows * cols);
  std::vector<double> inv_std(cols);
  if (mode == Mode::Train) {
    if (rows < 2)
      throw ConfigError("batch_norm: training mode needs at least 2 rows per batch, got " + std::to_string(rows));
    std::vector<double> mu(cols, 0.0), var(cols, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) mu[c] += xv[r * cols + c];
    for (auto& m : mu) m /= static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) {
        const double d = xv[r * cols + c] - mu[c];
        var[c] += d * d;
      }
    for (auto& v : var) v /= static_cast<double>(rows);
    const double unbias = static_cast<double>(rows) / static_cast<double>(rows - 1);
    for (std::size_t c = 0; c < cols; ++c) {
      inv_std[c] = 1.0 / std::sqrt(var[c] + stats.eps);
      stats.running_mean[c] = stats.momentum * stats.running_mean[c] + (1.0 - stats.momentum) * mu[c];
      stats.running_var[c] = stats.momentum * stats.running_var[c] + (1.0 - stats.momentum) * var[c] * unbias;
    }
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) xhat[r * cols + c] = (xv[r * cols + c] - mu[c]) * inv_std[c];
  } else {
    for (std::size_t c = 0; c < cols; ++c) inv_std[c] = 1.0 / std::sqrt(stats.running_var[c] + stats.eps);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c)
        xhat[r * cols + c] = (xv[r * cols + c] - stats.running_mean[c]) * inv_std[c];
  }
  std::vector<double> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = gv[c] * xhat[r * cols + c] + bv[c];

  return make_op_result(
      "batch_norm", x.shape(), std::move(out), {x, gamma, beta},
      [rows, cols, mode, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
        const auto& dy = self.grad;
        const auto& gv = self.inputs[1]->value;
        std::vector<double> sum_dy(cols, 0.0), sum_dy_xhat(cols, 0.0);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) {
            sum_dy[c] += dy[r * cols + c];
            sum_dy_xhat[c] += dy[r * cols + c] * xhat[r * cols + c];
          }
        if (detail::wants_grad(self, 0)) {
          auto& g = detail::grad_of(self, 0);
          if (mode == Mode::Train) {
            const double n = static_cast<double>(rows);
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t c = 0; c < cols; ++c) {
                const std::size_t i = r * cols + c;
                g[i] += gv[c] * inv_std[c] / n * (n * dy[i] - sum_dy[c] - xhat[i] * sum_dy_xhat[c]);
              }
          } else {
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += dy[r * cols + c] * gv[c] * inv_std[c];
          }
        }
        if (detail::wants_grad(self, 1)) {
          auto& g = detail::grad_of(self, 1);
          for (std::size_t c = 0; c < cols; ++c) g[c] += sum_dy_xhat[c];
        }
        if (detail::wants_grad(self, 2)) {
          auto& g = detail::grad_of(self, 2);
          for (std::size_t c = 0; c < cols; ++c) g[c] += sum_dy[c];
        }
      });
}

// ---------------------------------------------------------------------------
// Transposed convolution, 2x2 kernel, stride 2, no padding

/// x[B x H x W x Cin] (or [H x W x Cin]), w[2 x 2 x Cin x Cout], bias[Cout]
/// -> [B x 2H x 2W x Cout]. Every input cell scatters into its own 2x2 block.
inline Tensor transposed_conv2d(const Tensor& x, const Tensor& w, const Tensor& bias) {
  const bool batched = x.rank() == 4;
  if (!batched && x.rank() != 3)
    throw DimensionError("transposed_conv2d: expected [B,H,W,C] or [H,W,C], got " + shape_string(x.shape()));
  detail::require_rank(w, 4, "transposed_conv2d");
  const std::size_t b = batched ? x.dim(0) : 1;
  const std::size_t h = x.dim(batched ? 1 : 0), wd = x.dim(batched ? 2 : 1), cin = x.dim(batched ? 3 : 2);
  if (w.dim(0) != 2 || w.dim(1) != 2) throw DimensionError("transposed_conv2d: kernel must be 2x2");
  if (w.dim(2) != cin)
    throw DimensionError("transposed_conv2d: channel mismatch, input has " + std::to_string(cin) +
                         ", kernel expects " + std::to_string(w.dim(2)));
  const std::size_t cout = w.dim(3);
  if (bias.numel() != cout) throw DimensionError("transposed_conv2d: bias size mismatch");

  // Kernel as a [Cin x 4*Cout] matrix, column block q = 2*di + dj.
  const std::size_t cols = 4 * cout;
  std::vector<double> wm(cin * cols);
  auto wv = w.values();
  for (std::size_t q = 0; q < 4; ++q)
    for (std::size_t ci = 0; ci < cin; ++ci)
      for (std::size_t co = 0; co < cout; ++co) wm[ci * cols + q * cout + co] = wv[(q * cin + ci) * cout + co];

  const std::size_t cells = b * h * wd;
  std::vector<double> y(cells * cols);
  detail::gemm_rows(x.values().data(), wm.data(), y.data(), cells, cin, cols);

  const std::size_t oh = 2 * h, ow = 2 * wd;
  auto bv = bias.values();
  std::vector<double> out(b * oh * ow * cout);
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < wd; ++j) {
        const std::size_t cell = (n * h + i) * wd + j;
        for (std::size_t q = 0; q < 4; ++q) {
          const std::size_t oi = 2 * i + q / 2, oj = 2 * j + q % 2;
          double* dst = out.data() + ((n * oh + oi) * ow + oj) * cout;
          const double* src = y.data() + cell * cols + q * cout;
          for (std::size_t co = 0; co < cout; ++co) dst[co] = src[co] + bv[co];
        }
      }
  Shape shape = batched ? Shape{b, oh, ow, cout} : Shape{oh, ow, cout};
  return make_op_result(
      "transposed_conv2d", std::move(shape), std::move(out), {x, w, bias},
      [b, h, wd, cin, cout, cols, cells, wm = std::move(wm)](detail::Node& self) {
        const std::size_t oh = 2 * h, ow = 2 * wd;
        // Gather the output gradient back into [cells x 4*Cout].
        std::vector<double> dy(cells * cols);
        for (std::size_t n = 0; n < b; ++n)
          for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < wd; ++j) {
              const std::size_t cell = (n * h + i) * wd + j;
              for (std::size_t q = 0; q < 4; ++q) {
                const std::size_t oi = 2 * i + q / 2, oj = 2 * j + q % 2;
                const double* src = self.grad.data() + ((n * oh + oi) * ow + oj) * cout;
                std::copy_n(src, cout, dy.data() + cell * cols + q * cout);
              }
            }
        using detail::ConstMap;
        using detail::MutMap;
        ConstMap dym(dy.data(), cells, cols);
        if (detail::wants_grad(self, 0)) {
          ConstMap wmm(wm.data(), cin, cols);
          MutMap dx(detail::grad_of(self, 0).data(), cells, cin);
          dx.noalias() += dym * wmm.transpose();
        }
        if (detail::wants_grad(self, 1)) {
          ConstMap xm(self.inputs[0]->value.data(), cells, cin);
          detail::RowMatrix dwm = xm.transpose() * dym;
          auto& g = detail::grad_of(self, 1);
          for (std::size_t q = 0; q < 4; ++q)
            for (std::size_t ci = 0; ci < cin; ++ci)
              for (std::size_t co = 0; co < cout; ++co) g[(q * cin + ci) * cout + co] += dwm(ci, q * cout + co);
        }
        if (detail::wants_grad(self, 2)) {
          auto& g = detail::grad_of(self, 2);
          const std::size_t positions = self.grad.size() / cout;
          for (std::size_t p = 0; p < positions; ++p)
            for (std::size_t co = 0; co < cout; ++co) g[co] += self.grad[p * cout + co];
        }
      });
}

}  // namespace pcae
