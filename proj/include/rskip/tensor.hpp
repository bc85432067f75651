#pragma once

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
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "errors.hpp"

namespace rskip {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

// One tape entry. Creation order (`seq`) is the topological order of the tape.
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;     // persistent; leaves and retained nodes only
  std::vector<double> pending;  // scratch used while a backward pass is running
  bool requires_grad = false;
  bool retain = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads self.pending and accumulates into each parent's pending buffer.
  std::function<void(Node& self)> backward_fn;
  std::uint64_t seq = 0;
  const char* op = "leaf";

  bool is_leaf() const { return parents.empty(); }
};

inline std::uint64_t next_seq() {
  thread_local std::uint64_t counter = 0;
  return ++counter;
}

}  // namespace detail

/// Dense row-major double tensor with reverse-mode differentiation.
///
/// A Tensor is a handle: copies alias the same storage and tape node, which is
/// how parameters are shared between a model and the graphs built from it. Use
/// clone() for an independent copy. Graphs are built eagerly on every forward
/// call and freed when the last handle to their root goes away.
class Tensor {
 public:
  using BackwardFn = std::function<void(detail::Node& self)>;

  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    for (auto e : shape)
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + rskip::to_string(shape));
    if (numel(shape) != data.size())
      throw DimensionError("shape " + rskip::to_string(shape) + " does not match " +
                           std::to_string(data.size()) + " values");
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
    node_->seq = detail::next_seq();
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows, bool requires_grad = false) {
    std::vector<double> data;
    std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    for (const auto& r : rows) {
      if (r.size() != cols) throw DimensionError("ragged matrix literal");
      data.insert(data.end(), r.begin(), r.end());
    }
    return Tensor({rows.size(), cols}, std::move(data), requires_grad);
  }

  static Tensor vector(std::initializer_list<double> values, bool requires_grad = false) {
    return Tensor({values.size()}, std::vector<double>(values), requires_grad);
  }

  /// Builds a non-leaf result. When no parent requires a gradient the result is
  /// a constant and the backward rule is dropped. This is also the extension
  /// point for user-defined differentiable operations.
  static Tensor from_op(const char* op, Shape shape, std::vector<double> data, std::vector<Tensor> parents,
                        BackwardFn backward) {
    Tensor out(std::move(shape), std::move(data));
    const bool any = std::any_of(parents.begin(), parents.end(), [](const Tensor& p) { return p.requires_grad(); });
    out.node_->op = op;
    if (any) {
      out.node_->requires_grad = true;
      for (auto& p : parents) out.node_->parents.push_back(p.node_);
      out.node_->backward_fn = std::move(backward);
    }
    return out;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node().shape; }
  std::size_t rank() const { return node().shape.size(); }
  std::size_t size() const { return node().data.size(); }
  std::size_t rows() const { return node().shape.front(); }
  std::size_t cols() const { return node().shape.back(); }

  std::span<const double> data() const { return node().data; }
  /// Mutating the data of a tensor that is part of a live graph invalidates that graph.
  std::span<double> mutable_data() { return node().data; }
  const std::vector<double>& values() const { return node().data; }

  double item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + rskip::to_string(shape()));
    return node().data[0];
  }
  double at(std::size_t i) const { return node().data.at(i); }
  double at(std::size_t r, std::size_t c) const { return node().data.at(r * cols() + c); }

  bool requires_grad() const { return node().requires_grad; }
  void set_requires_grad(bool on) {
    if (!is_leaf()) throw ContractError("requires_grad can only be toggled on leaf tensors");
    node().requires_grad = on;
  }
  bool is_leaf() const { return node().is_leaf(); }
  const char* op() const { return node().op; }
  std::uint64_t sequence() const { return node().seq; }

  /// Keep the gradient of a non-leaf tensor after backward.
  void retain_grad() { node().retain = true; }

  bool has_grad() const { return !node().grad.empty(); }
  /// Accumulated gradient; all zeros when no backward pass has reached this tensor.
  std::span<const double> grad() const {
    auto& n = node();
    if (n.grad.empty()) n.grad.assign(n.data.size(), 0.0);
    return n.grad;
  }
  std::span<double> mutable_grad() {
    auto& n = node();
    if (n.grad.empty()) n.grad.assign(n.data.size(), 0.0);
    return n.grad;
  }
  void zero_grad() { node().grad.clear(); }

  /// Independent leaf copy of the values.
  Tensor clone(bool requires_grad = false) const { return Tensor(shape(), node().data, requires_grad); }

  /// Constant leaf sharing no tape history with this tensor.
  Tensor detach() const { return clone(false); }

  /// Reverse pass from a scalar.
  void backward() const {
    if (size() != 1) throw ContractError("backward() without a seed requires a scalar, got " + rskip::to_string(shape()));
    std::vector<double> seed{1.0};
    backward(seed);
  }

  /// Reverse pass seeded with an upstream gradient of this tensor's shape.
  /// Leaf (and retained) gradients accumulate additively across calls.
  void backward(std::span<const double> seed) const {
    if (seed.size() != size()) throw DimensionError("backward seed has wrong size");
    if (!requires_grad()) throw ContractError("backward() on a tensor that does not require grad");

    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    std::vector<detail::Node*> stack{node_.get()};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto* n = stack.back();
      stack.pop_back();
      order.push_back(n);
      for (auto& p : n->parents)
        if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
    std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->seq > b->seq; });

    for (auto* n : order) n->pending.assign(n->data.size(), 0.0);
    std::copy(seed.begin(), seed.end(), node_->pending.begin());

    for (auto* n : order) {
      if (n->backward_fn) n->backward_fn(*n);
      if (n->is_leaf() || n->retain) {
        if (n->grad.empty()) n->grad.assign(n->data.size(), 0.0);
        for (std::size_t i = 0; i < n->grad.size(); ++i) n->grad[i] += n->pending[i];
      }
      std::vector<double>().swap(n->pending);
    }
  }

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  detail::Node& node() const {
    if (!node_) throw ContractError("use of an undefined tensor");
    return *node_;
  }

  std::shared_ptr<detail::Node> node_;
};

namespace detail {

enum class Broadcast { kSame, kTrailing };

// `b` must equal `a` in shape, or equal a's trailing extents (feature-axis broadcast).
inline Broadcast check_broadcast(const Tensor& a, const Tensor& b, const char* op) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa == sb) return Broadcast::kSame;
  if (sb.size() < sa.size() && std::equal(sb.rbegin(), sb.rend(), sa.rbegin())) return Broadcast::kTrailing;
  throw DimensionError(std::string(op) + ": shapes " + rskip::to_string(sa) + " and " + rskip::to_string(sb) +
                       " are not broadcast-compatible");
}

inline void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw DimensionError(std::string(op) + " expects a matrix, got " + rskip::to_string(t.shape()));
}

}  // namespace detail

/// Elementwise a + b; b may be broadcast along a's trailing axes.
inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_broadcast(a, b, "add");
  const auto& av = a.values();
  const auto& bv = b.values();
  const std::size_t m = bv.size();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i % m];
  return Tensor::from_op("add", a.shape(), std::move(out), {a, b}, [m](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const auto& g = self.pending;
    if (pa.requires_grad)
      for (std::size_t i = 0; i < g.size(); ++i) pa.pending[i] += g[i];
    if (pb.requires_grad)
      for (std::size_t i = 0; i < g.size(); ++i) pb.pending[i % m] += g[i];
  });
}

inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.values());
  for (auto& v : out) v *= c;
  return Tensor::from_op("scale", a.shape(), std::move(out), {a}, [c](detail::Node& self) {
    auto& pa = *self.parents[0];
    for (std::size_t i = 0; i < self.pending.size(); ++i) pa.pending[i] += c * self.pending[i];
  });
}

/// Elementwise product; b may be broadcast along a's trailing axes.
inline Tensor ewmul(const Tensor& a, const Tensor& b) {
  detail::check_broadcast(a, b, "ewmul");
  const auto& av = a.values();
  const auto& bv = b.values();
  const std::size_t m = bv.size();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i % m];
  return Tensor::from_op("ewmul", a.shape(), std::move(out), {a, b}, [m](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const auto& g = self.pending;
    if (pa.requires_grad)
      for (std::size_t i = 0; i < g.size(); ++i) pa.pending[i] += g[i] * pb.data[i % m];
    if (pb.requires_grad)
      for (std::size_t i = 0; i < g.size(); ++i) pb.pending[i % m] += g[i] * pa.data[i];
  });
}

namespace detail {

// out[m×n] += a[m×k] · b[k×n]
inline void gemm_nn(const double* a, const double* b, double* out, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k)
    throw DimensionError("matmul: inner extents differ, " + rskip::to_string(a.shape()) + " x " +
                         rskip::to_string(b.shape()));
  std::vector<double> out(m * n, 0.0);
  detail::gemm_nn(a.values().data(), b.values().data(), out.data(), m, k, n);
  return Tensor::from_op("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const auto& g = self.pending;
    if (pa.requires_grad) {
      // da[i,p] += sum_j g[i,j] * b[p,j]
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * pb.data[p * n + j];
          pa.pending[i * k + p] += s;
        }
    }
    if (pb.requires_grad) {
      // db[p,j] += sum_i a[i,p] * g[i,j]
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av = pa.data[i * k + p];
          if (av == 0.0) continue;
          double* row = pb.pending.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) row[j] += av * g[i * n + j];
        }
    }
  });
}

/// max(0, a). The derivative at exactly 0 is taken to be 0.
inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.values());
  for (auto& v : out) v = v > 0.0 ? v : 0.0;
  return Tensor::from_op("relu", a.shape(), std::move(out), {a}, [](detail::Node& self) {
    auto& pa = *self.parents[0];
    for (std::size_t i = 0; i < self.pending.size(); ++i)
      if (pa.data[i] > 0.0) pa.pending[i] += self.pending[i];
  });
}

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return Tensor::from_op("sum", {1}, {s}, {a}, [](detail::Node& self) {
    auto& pa = *self.parents[0];
    const double g = self.pending[0];
    for (auto& p : pa.pending) p += g;
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

enum class Reduction { kMean, kSum };

/// Softmax cross-entropy against integer class labels, max-subtracted for stability.
inline Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels,
                                    Reduction reduction = Reduction::kMean) {
  detail::require_matrix(logits, "softmax_cross_entropy");
  const std::size_t batch = logits.shape()[0], classes = logits.shape()[1];
  if (labels.size() != batch)
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                         std::to_string(batch));
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= classes)
      throw IndexError("label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");

  const auto& z = logits.values();
  std::vector<double> probs(z.size());
  double total = 0.0;
  for (std::size_t r = 0; r < batch; ++r) {
    const double* row = z.data() + r * classes;
    const double mx = *std::max_element(row, row + classes);
    double denom = 0.0;
    for (std::size_t c = 0; c < classes; ++c) denom += std::exp(row[c] - mx);
    for (std::size_t c = 0; c < classes; ++c) probs[r * classes + c] = std::exp(row[c] - mx) / denom;
    total += -(row[labels[r]] - mx - std::log(denom));
  }
  const double factor = reduction == Reduction::kMean ? 1.0 / static_cast<double>(batch) : 1.0;
  std::vector<int> saved(labels.begin(), labels.end());
  return Tensor::from_op(
      "softmax_cross_entropy", {1}, {total * factor}, {logits},
      [probs = std::move(probs), saved = std::move(saved), classes, factor](detail::Node& self) {
        auto& pl = *self.parents[0];
        const double g = self.pending[0] * factor;
        for (std::size_t i = 0; i < probs.size(); ++i) pl.pending[i] += g * probs[i];
        for (std::size_t r = 0; r < saved.size(); ++r) pl.pending[r * classes + saved[r]] -= g;
      });
}

inline Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                                    Reduction reduction = Reduction::kMean) {
  return softmax_cross_entropy(logits, std::span<const int>(labels), reduction);
}

}  // namespace rskip
