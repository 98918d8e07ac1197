#pragma once

// Dense row-major N-D arrays with a reverse-mode differentiation record.
//
// A Tensor is a shared handle to a graph node. Ops produce fresh nodes; when
// any input requires a gradient the output keeps its inputs alive together
// with a backward rule. Calling backward() on a scalar orders the reachable
// nodes topologically (the Tape) and runs the rules in reverse.

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "odseg/error.hpp"

namespace odseg {

using Index = std::int64_t;
using Shape = std::vector<Index>;

Index shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);
/// Row-major strides for `shape`.
Shape shape_strides(const Shape& shape);
/// Linear index of `coord` under row-major strides.
Index ravel_index(const Shape& shape, std::span<const Index> coord);
/// Inverse of ravel_index.
Shape unravel_index(const Shape& shape, Index linear);

template <typename T>
class Tensor;

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward;
  const char* op = "leaf";

  T* grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), T{0});
    return grad.data();
  }
};

}  // namespace detail

/// RAII switch that disables graph recording on the current thread.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// RAII switch that sets graph recording on the current thread to `enabled`.
class GradModeGuard {
 public:
  explicit GradModeGuard(bool enabled);
  ~GradModeGuard();
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;

  static Tensor full(const Shape& shape, T value);
  static Tensor zeros(const Shape& shape) { return full(shape, T{0}); }
  static Tensor from_data(const Shape& shape, std::vector<T> data);
  static Tensor scalar(T value) { return from_data({1}, {value}); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  Index rank() const { return static_cast<Index>(node_->shape.size()); }
  Index extent(Index axis) const;
  Index numel() const { return static_cast<Index>(node_->data.size()); }

  std::span<const T> data() const { return node_->data; }
  const T* ptr() const { return node_->data.data(); }
  /// Mutable access for leaves only (parameter updates, finite differences).
  std::span<T> leaf_data();
  T item() const;
  T at(std::initializer_list<Index> coord) const;

  bool requires_grad() const { return node_ && node_->requires_grad; }
  Tensor& set_requires_grad(bool flag);
  bool is_leaf() const { return node_->parents.empty(); }
  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  /// Gradient span; empty until backward reached this tensor.
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> grad_mut() { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  /// Copy of the values with no history.
  Tensor detach() const;
  /// Same values under a new shape (copy; no aliasing views).
  Tensor reshape(const Shape& shape) const;

  const char* op_name() const { return node_->op; }
  const NodePtr& node() const { return node_; }
  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  /// Assembles an op output. When recording is enabled and any input needs a
  /// gradient, the output keeps the inputs and `backward`. Also applies the
  /// NaN/Inf policy.
  static Tensor make_result(const char* op, Shape shape, std::vector<T> data,
                            std::initializer_list<Tensor> inputs,
                            std::function<void(detail::Node<T>&)> backward);
  static Tensor make_result(const char* op, Shape shape, std::vector<T> data,
                            const std::vector<Tensor>& inputs,
                            std::function<void(detail::Node<T>&)> backward);

 private:
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}
  NodePtr node_;
};

/// Topologically ordered record of every node that contributes to a root.
template <typename T>
class Tape {
 public:
  static Tape record(const Tensor<T>& root);
  std::size_t size() const { return nodes_.size(); }
  const std::vector<detail::Node<T>*>& nodes() const { return nodes_; }
  /// Seeds d(root)/d(root) = 1 and runs every backward rule exactly once in
  /// reverse order.
  void backward();

 private:
  std::vector<detail::Node<T>*> nodes_;
  std::shared_ptr<detail::Node<T>> root_;
};

/// Convenience: Tape::record(root).backward(). Root must hold one value.
template <typename T>
void backward(const Tensor<T>& root);

// ---------------------------------------------------------------------------
// Ops

enum class ElementwiseOp { Add, Sub, Mul, Div, LeakyRelu, Sigmoid, Scale };

/// Generic dispatcher. Binary ops need `b`; LeakyRelu takes its slope and
/// Scale its factor from `param`.
template <typename T>
Tensor<T> elementwise(ElementwiseOp op, const Tensor<T>& a, const Tensor<T>* b = nullptr,
                      double param = 0.0);

/// Binary ops broadcast along axes where one operand has extent 1. Ranks must
/// match.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, double slope);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T>
Tensor<T> scale(const Tensor<T>& x, double factor);
template <typename T>
Tensor<T> log(const Tensor<T>& x);
template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, double value);

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> transpose2d(const Tensor<T>& x);

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, Index axis, double temperature = 1.0);
/// log(softmax(x)) along `axis`, computed stably.
template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x, Index axis);

enum class ReduceOp { Sum, Mean, Max };

/// Reduces over `axes`. Reduced axes are dropped unless keepdims; a full
/// reduction without keepdims yields shape {1}. Empty `axes` is the identity.
template <typename T>
Tensor<T> reduce(ReduceOp op, const Tensor<T>& x, const std::vector<Index>& axes,
                 bool keepdims = false);
template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);

/// [c,d,h,w] -> [c] per-channel spatial mean.
template <typename T>
Tensor<T> global_average_pool(const Tensor<T>& x);

/// Concatenation along axis 0; other extents must agree.
template <typename T>
Tensor<T> concat0(const std::vector<Tensor<T>>& parts);

/// Slice [begin, end) along axis 0.
template <typename T>
Tensor<T> slice0(const Tensor<T>& x, Index begin, Index end);

// ---------------------------------------------------------------------------
// Gradient checking

struct GradCheckResult {
  double max_rel_error = 0.0;
  double median_rel_error = 0.0;
  std::size_t coordinates = 0;
};

struct GradCheckOptions {
  double step = 1e-5;
  /// Coordinates sampled across all inputs; every coordinate when the total
  /// is smaller.
  std::size_t samples = 128;
  std::uint64_t seed = 0;
  /// Denominator floor: rel = |a - n| / max(|a|, |n|, floor).
  double floor = 1e-6;
};

/// Compares the reverse-mode gradient of the scalar `f()` with respect to each
/// tensor in `inputs` against central differences.
GradCheckResult finite_difference_check(const std::function<Tensor<double>()>& f,
                                        std::vector<Tensor<double>> inputs,
                                        const GradCheckOptions& options = {});

/// Single-input form: f(x).
GradCheckResult finite_difference_check(
    const std::function<Tensor<double>(const Tensor<double>&)>& f, Tensor<double> x,
    const GradCheckOptions& options = {});

}  // namespace odseg
