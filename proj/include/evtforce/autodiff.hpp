#pragma once

// Minimal reverse-mode differentiation over dense row-major tensors.
//
// A Tensor is a handle to a graph node. Every op run while recording is on
// and at least one input requires a gradient produces a node that remembers
// its inputs and a backward rule; backward() walks those nodes in reverse
// topological order. Leaves accumulate gradients across backward calls until
// zero_grad(). No broadcasting beyond add_bias (a vector added to every row).

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace evtforce::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {
inline thread_local bool recording = true;
}

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::recording) { detail::recording = false; }
  ~NoGradGuard() { detail::recording = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::recording; }

template <typename T>
struct Node {
  Shape shape;
  std::shared_ptr<std::vector<T>> value;
  std::vector<T> grad;
  bool requires_grad = false;
  bool leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  std::size_t numel() const { return value->size(); }
  T* grad_buffer() {
    if (grad.size() != numel()) grad.assign(numel(), T(0));
    return grad.data();
  }
};

template <typename T>
class Tensor {
 public:
  using NodePtr = std::shared_ptr<Node<T>>;

  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<T> data(numel_of(shape), T(0));
    return from(std::move(shape), std::move(data), requires_grad);
  }

  static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (data.size() != numel_of(shape)) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    }
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->value = std::make_shared<std::vector<T>>(std::move(data));
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor scalar(T v, bool requires_grad = false) { return from({}, {v}, requires_grad); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->numel(); }

  std::span<const T> data() const { return *node_->value; }
  /// Writes go straight to storage shared with any aliases; use on leaves.
  std::span<T> mutable_data() { return *node_->value; }
  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return (*node_->value)[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->leaf; }
  bool has_grad() const { return node_->grad.size() == numel(); }
  /// Gradient, or an empty span when backward has not reached this tensor.
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return std::span<T>(node_->grad_buffer(), numel()); }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }

  /// A new leaf viewing the same values with its own gradient accumulator.
  Tensor alias() const {
    auto node = std::make_shared<Node<T>>();
    node->shape = node_->shape;
    node->value = node_->value;
    node->requires_grad = node_->requires_grad;
    return Tensor(std::move(node));
  }

  /// A leaf holding a private copy of the values.
  Tensor clone() const {
    return from(shape(), *node_->value, requires_grad());
  }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

namespace detail {

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value,
                      std::vector<std::shared_ptr<Node<T>>> inputs, const char* op,
                      std::function<void(Node<T>&)> backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::make_shared<std::vector<T>>(std::move(value));
  node->op = op;
  node->leaf = false;
  bool needs = false;
  if (detail::recording) {
    for (const auto& in : inputs) needs = needs || in->requires_grad;
  }
  if (needs) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapC = Eigen::Map<const RowMat<T>>;
template <typename T>
using Map = Eigen::Map<RowMat<T>>;

template <typename T>
void require_rank(const Tensor<T>& x, std::size_t rank, const char* op) {
  if (x.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(x.shape()));
  }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

// Size of the last axis and the number of rows before it.
template <typename T>
std::pair<std::size_t, std::size_t> rows_cols(const Tensor<T>& x) {
  if (x.rank() == 0) return {1, 1};
  std::size_t cols = x.shape().back();
  return {cols == 0 ? 0 : x.numel() / cols, cols};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return detail::make_result<T>(a.shape(), std::move(out), {a.node(), b.node()}, "add",
                                [](Node<T>& self) {
                                  for (auto& in : self.inputs) {
                                    if (!in->requires_grad) continue;
                                    T* g = in->grad_buffer();
                                    for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                      g[i] += self.grad[i];
                                    }
                                  }
                                });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return detail::make_result<T>(a.shape(), std::move(out), {a.node(), b.node()}, "sub",
                                [](Node<T>& self) {
                                  const T sign[2] = {T(1), T(-1)};
                                  for (std::size_t k = 0; k < 2; ++k) {
                                    auto& in = self.inputs[k];
                                    if (!in->requires_grad) continue;
                                    T* g = in->grad_buffer();
                                    for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                      g[i] += sign[k] * self.grad[i];
                                    }
                                  }
                                });
}

/// Elementwise product.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return detail::make_result<T>(a.shape(), std::move(out), {a.node(), b.node()}, "mul",
                                [](Node<T>& self) {
                                  auto& x = self.inputs[0];
                                  auto& y = self.inputs[1];
                                  const auto& xv = *x->value;
                                  const auto& yv = *y->value;
                                  if (x->requires_grad) {
                                    T* g = x->grad_buffer();
                                    for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                      g[i] += self.grad[i] * yv[i];
                                    }
                                  }
                                  if (y->requires_grad) {
                                    T* g = y->grad_buffer();
                                    for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                      g[i] += self.grad[i] * xv[i];
                                    }
                                  }
                                });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  std::vector<T> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= factor;
  return detail::make_result<T>(x.shape(), std::move(out), {x.node()}, "scale",
                                [factor](Node<T>& self) {
                                  T* g = self.inputs[0]->grad_buffer();
                                  for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                    g[i] += factor * self.grad[i];
                                  }
                                });
}

/// Adds a vector of length n to every row of a [... x n] tensor.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  auto [rows, cols] = detail::rows_cols(x);
  if (bias.rank() != 1 || x.rank() == 0 || bias.dim(0) != cols) {
    throw ShapeError("add_bias: bias " + shape_str(bias.shape()) + " does not match last axis of " +
                     shape_str(x.shape()));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  auto bv = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += bv[c];
  }
  return detail::make_result<T>(
      x.shape(), std::move(out), {x.node(), bias.node()}, "add_bias",
      [rows, cols](Node<T>& self) {
        auto& xin = self.inputs[0];
        auto& bin = self.inputs[1];
        if (xin->requires_grad) {
          T* g = xin->grad_buffer();
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        }
        if (bin->requires_grad) {
          T* g = bin->grad_buffer();
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < cols; ++c) g[c] += self.grad[r * cols + c];
          }
        }
      });
}

/// Exact GELU: x * Phi(x) with Phi the standard normal CDF.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  const T inv_sqrt2 = T(0.70710678118654752440);
  std::vector<T> out(x.numel());
  auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = T(0.5) * xv[i] * (T(1) + std::erf(xv[i] * inv_sqrt2));
  }
  return detail::make_result<T>(x.shape(), std::move(out), {x.node()}, "gelu",
                                [inv_sqrt2](Node<T>& self) {
                                  const T inv_sqrt_2pi = T(0.39894228040143267794);
                                  const auto& xv = *self.inputs[0]->value;
                                  T* g = self.inputs[0]->grad_buffer();
                                  for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                    const T v = xv[i];
                                    const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
                                    const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
                                    g[i] += self.grad[i] * (cdf + v * pdf);
                                  }
                                });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel_of(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  return detail::make_result<T>(std::move(shape), std::move(out), {x.node()}, "reshape",
                                [](Node<T>& self) {
                                  T* g = self.inputs[0]->grad_buffer();
                                  for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                    g[i] += self.grad[i];
                                  }
                                });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  detail::require_rank(x, 2, "transpose");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  std::vector<T> out(x.numel());
  detail::Map<T>(out.data(), cols, rows) = detail::MapC<T>(x.data().data(), rows, cols).transpose();
  return detail::make_result<T>({cols, rows}, std::move(out), {x.node()}, "transpose",
                                [rows, cols](Node<T>& self) {
                                  detail::Map<T>(self.inputs[0]->grad_buffer(), rows, cols) +=
                                      detail::MapC<T>(self.grad.data(), cols, rows).transpose();
                                });
}

/// Rows r0..r1 and columns c0..c1 (half-open) of a matrix.
template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t r0, std::size_t r1, std::size_t c0,
                std::size_t c1) {
  detail::require_rank(x, 2, "slice");
  if (r0 > r1 || r1 > x.dim(0) || c0 > c1 || c1 > x.dim(1)) {
    throw ShapeError("slice: block out of range for " + shape_str(x.shape()));
  }
  const std::size_t rows = r1 - r0, cols = c1 - c0, stride = x.dim(1);
  std::vector<T> out(rows * cols);
  auto xv = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(xv.data() + (r0 + r) * stride + c0, cols, out.data() + r * cols);
  }
  return detail::make_result<T>({rows, cols}, std::move(out), {x.node()}, "slice",
                                [r0, c0, rows, cols, stride](Node<T>& self) {
                                  T* g = self.inputs[0]->grad_buffer();
                                  for (std::size_t r = 0; r < rows; ++r) {
                                    T* dst = g + (r0 + r) * stride + c0;
                                    const T* src = self.grad.data() + r * cols;
                                    for (std::size_t c = 0; c < cols; ++c) dst[c] += src[c];
                                  }
                                });
}

/// Selected rows of a matrix, in the given order (indices may repeat).
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::vector<std::size_t> indices) {
  detail::require_rank(x, 2, "gather_rows");
  const std::size_t cols = x.dim(1);
  std::vector<T> out(indices.size() * cols);
  auto xv = x.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= x.dim(0)) throw ShapeError("gather_rows: index out of range");
    std::copy_n(xv.data() + indices[i] * cols, cols, out.data() + i * cols);
  }
  const std::size_t n = indices.size();
  return detail::make_result<T>({n, cols}, std::move(out), {x.node()}, "gather_rows",
                                [idx = std::move(indices), cols](Node<T>& self) {
                                  T* g = self.inputs[0]->grad_buffer();
                                  for (std::size_t i = 0; i < idx.size(); ++i) {
                                    T* dst = g + idx[i] * cols;
                                    const T* src = self.grad.data() + i * cols;
                                    for (std::size_t c = 0; c < cols; ++c) dst[c] += src[c];
                                  }
                                });
}

/// Stacks matrices with equal column counts on top of each other.
template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t cols = parts.front().rank() == 2 ? parts.front().dim(1) : 0;
  std::size_t rows = 0;
  std::vector<std::shared_ptr<Node<T>>> inputs;
  for (const auto& p : parts) {
    detail::require_rank(p, 2, "concat_rows");
    if (p.dim(1) != cols) throw ShapeError("concat_rows: column count mismatch");
    rows += p.dim(0);
    inputs.push_back(p.node());
  }
  std::vector<T> out;
  out.reserve(rows * cols);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return detail::make_result<T>({rows, cols}, std::move(out), std::move(inputs), "concat_rows",
                                [](Node<T>& self) {
                                  std::size_t offset = 0;
                                  for (auto& in : self.inputs) {
                                    const std::size_t n = in->numel();
                                    if (in->requires_grad) {
                                      T* g = in->grad_buffer();
                                      for (std::size_t i = 0; i < n; ++i) {
                                        g[i] += self.grad[offset + i];
                                      }
                                    }
                                    offset += n;
                                  }
                                });
}

/// Places matrices with equal row counts side by side.
template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t rows = parts.front().rank() == 2 ? parts.front().dim(0) : 0;
  std::size_t cols = 0;
  std::vector<std::shared_ptr<Node<T>>> inputs;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    detail::require_rank(p, 2, "concat_cols");
    if (p.dim(0) != rows) throw ShapeError("concat_cols: row count mismatch");
    cols += p.dim(1);
    widths.push_back(p.dim(1));
    inputs.push_back(p.node());
  }
  std::vector<T> out(rows * cols);
  std::size_t c0 = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(1);
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(p.data().data() + r * w, w, out.data() + r * cols + c0);
    }
    c0 += w;
  }
  return detail::make_result<T>({rows, cols}, std::move(out), std::move(inputs), "concat_cols",
                                [rows, cols, widths = std::move(widths)](Node<T>& self) {
                                  std::size_t c0 = 0;
                                  for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                                    auto& in = self.inputs[k];
                                    const std::size_t w = widths[k];
                                    if (in->requires_grad) {
                                      T* g = in->grad_buffer();
                                      for (std::size_t r = 0; r < rows; ++r) {
                                        for (std::size_t c = 0; c < w; ++c) {
                                          g[r * w + c] += self.grad[r * cols + c0 + c];
                                        }
                                      }
                                    }
                                    c0 += w;
                                  }
                                });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = std::accumulate(x.data().begin(), x.data().end(), T(0));
  return detail::make_result<T>({}, {total}, {x.node()}, "sum", [](Node<T>& self) {
    T* g = self.inputs[0]->grad_buffer();
    const T up = self.grad[0];
    for (std::size_t i = 0; i < self.inputs[0]->numel(); ++i) g[i] += up;
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

/// Mean over one axis; that axis is removed from the shape.
template <typename T>
Tensor<T> mean_over_axis(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) throw ShapeError("mean_over_axis: axis out of range");
  const auto& shape = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t n = shape[axis];
  if (n == 0) throw ShapeError("mean_over_axis: empty axis");
  Shape out_shape;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != axis) out_shape.push_back(shape[i]);
  }
  std::vector<T> out(outer * inner, T(0));
  auto xv = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t k = 0; k < n; ++k) {
      const T* src = xv.data() + (o * n + k) * inner;
      T* dst = out.data() + o * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  }
  const T inv = T(1) / static_cast<T>(n);
  for (auto& v : out) v *= inv;
  return detail::make_result<T>(std::move(out_shape), std::move(out), {x.node()}, "mean_over_axis",
                                [outer, inner, n, inv](Node<T>& self) {
                                  T* g = self.inputs[0]->grad_buffer();
                                  for (std::size_t o = 0; o < outer; ++o) {
                                    for (std::size_t k = 0; k < n; ++k) {
                                      T* dst = g + (o * n + k) * inner;
                                      const T* src = self.grad.data() + o * inner;
                                      for (std::size_t i = 0; i < inner; ++i) {
                                        dst[i] += inv * src[i];
                                      }
                                    }
                                  }
                                });
}

// ---------------------------------------------------------------------------
// Linear algebra and normalization

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) + " * " +
                     shape_str(b.shape()));
  }
  std::vector<T> out(m * n);
  detail::Map<T>(out.data(), m, n).noalias() =
      detail::MapC<T>(a.data().data(), m, k) * detail::MapC<T>(b.data().data(), k, n);
  return detail::make_result<T>({m, n}, std::move(out), {a.node(), b.node()}, "matmul",
                                [m, k, n](Node<T>& self) {
                                  auto& an = self.inputs[0];
                                  auto& bn = self.inputs[1];
                                  detail::MapC<T> dc(self.grad.data(), m, n);
                                  if (an->requires_grad) {
                                    detail::Map<T>(an->grad_buffer(), m, k).noalias() +=
                                        dc * detail::MapC<T>(bn->value->data(), k, n).transpose();
                                  }
                                  if (bn->requires_grad) {
                                    detail::Map<T>(bn->grad_buffer(), k, n).noalias() +=
                                        detail::MapC<T>(an->value->data(), m, k).transpose() * dc;
                                  }
                                });
}

/// Softmax along the last axis with max subtraction.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  auto [rows, cols] = detail::rows_cols(x);
  std::vector<T> out(x.numel());
  auto xv = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = xv.data() + r * cols;
    T* dst = out.data() + r * cols;
    const T peak = *std::max_element(src, src + cols);
    T total = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      dst[c] = std::exp(src[c] - peak);
      total += dst[c];
    }
    const T inv = T(1) / total;
    for (std::size_t c = 0; c < cols; ++c) dst[c] *= inv;
  }
  auto result = detail::make_result<T>(x.shape(), std::move(out), {x.node()}, "softmax_rows",
                                       nullptr);
  if (result.requires_grad()) {
    // The rule reads the node's own output; a raw pointer avoids a cycle.
    Node<T>* self_ptr = result.node().get();
    result.node()->backward = [rows, cols, self_ptr](Node<T>& self) {
      const auto& y = *self_ptr->value;
      T* g = self.inputs[0]->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        const T* yr = y.data() + r * cols;
        const T* gr = self.grad.data() + r * cols;
        T dot = 0;
        for (std::size_t c = 0; c < cols; ++c) dot += yr[c] * gr[c];
        T* dst = g + r * cols;
        for (std::size_t c = 0; c < cols; ++c) dst[c] += yr[c] * (gr[c] - dot);
      }
    };
  }
  return result;
}

/// (x - mean) / sqrt(var + eps) * gamma + beta along the last axis
/// (biased variance).
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
  auto [rows, cols] = detail::rows_cols(x);
  if (gamma.rank() != 1 || beta.rank() != 1 || gamma.dim(0) != cols || beta.dim(0) != cols) {
    throw ShapeError("layer_norm: gamma/beta must match last axis of " + shape_str(x.shape()));
  }
  std::vector<T> out(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> rstd(rows);
  auto xv = x.data();
  auto gv = gamma.data();
  auto bv = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = xv.data() + r * cols;
    T mu = 0;
    for (std::size_t c = 0; c < cols; ++c) mu += src[c];
    mu /= static_cast<T>(cols);
    T var = 0;
    for (std::size_t c = 0; c < cols; ++c) var += (src[c] - mu) * (src[c] - mu);
    var /= static_cast<T>(cols);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c) {
      const T h = (src[c] - mu) * rstd[r];
      xhat[r * cols + c] = h;
      out[r * cols + c] = h * gv[c] + bv[c];
    }
  }
  auto result = detail::make_result<T>(x.shape(), std::move(out),
                                       {x.node(), gamma.node(), beta.node()}, "layer_norm",
                                       nullptr);
  if (result.requires_grad()) {
    result.node()->backward = [rows, cols, xhat = std::move(xhat),
                               rstd = std::move(rstd)](Node<T>& self) {
      auto& xin = self.inputs[0];
      auto& gin = self.inputs[1];
      auto& bin = self.inputs[2];
      const auto& gv = *gin->value;
      const T* up = self.grad.data();
      if (gin->requires_grad) {
        T* g = gin->grad_buffer();
        for (std::size_t i = 0; i < rows * cols; ++i) g[i % cols] += up[i] * xhat[i];
      }
      if (bin->requires_grad) {
        T* g = bin->grad_buffer();
        for (std::size_t i = 0; i < rows * cols; ++i) g[i % cols] += up[i];
      }
      if (xin->requires_grad) {
        T* g = xin->grad_buffer();
        const T inv_n = T(1) / static_cast<T>(cols);
        for (std::size_t r = 0; r < rows; ++r) {
          T sum_dh = 0, sum_dh_h = 0;
          for (std::size_t c = 0; c < cols; ++c) {
            const T dh = up[r * cols + c] * gv[c];
            sum_dh += dh;
            sum_dh_h += dh * xhat[r * cols + c];
          }
          for (std::size_t c = 0; c < cols; ++c) {
            const std::size_t i = r * cols + c;
            const T dh = up[i] * gv[c];
            g[i] += rstd[r] * (dh - inv_n * sum_dh - xhat[i] * inv_n * sum_dh_h);
          }
        }
      }
    };
  }
  return result;
}

// ---------------------------------------------------------------------------
// Graph traversal

/// Nodes reachable from `root` that take part in differentiation, inputs
/// before the ops that consume them.
template <typename T>
std::vector<Node<T>*> topological_order(const Tensor<T>& root) {
  std::vector<Node<T>*> order;
  if (!root.defined() || !root.requires_grad()) return order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node().get(), 0}};
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.push_back({child, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

/// Accumulates d(loss)/d(leaf) into every leaf that requires a gradient.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  }
  auto order = topological_order(loss);
  if (order.empty()) return;
  for (auto* node : order) {
    if (!node->leaf) node->grad.assign(node->numel(), T(0));
  }
  loss.node()->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (!node->leaf && node->backward) node->backward(*node);
  }
  for (auto* node : order) {
    if (!node->leaf) std::vector<T>().swap(node->grad);
  }
}

}  // namespace evtforce::ad
