#include "odseg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_map>

#include "odseg/runtime.hpp"

namespace odseg {

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

RuntimeSettings& runtime() {
  static RuntimeSettings settings;
  return settings;
}

int effective_threads() {
  const auto& s = runtime();
  if (s.deterministic) return 1;
  return std::max(1, s.threads);
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
GradModeGuard::GradModeGuard(bool enabled) : previous_(g_grad_enabled) { g_grad_enabled = enabled; }
GradModeGuard::~GradModeGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

Index shape_numel(const Shape& shape) {
  Index n = 1;
  for (Index e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Shape shape_strides(const Shape& shape) {
  Shape strides(shape.size(), 1);
  for (Index i = static_cast<Index>(shape.size()) - 2; i >= 0; --i)
    strides[i] = strides[i + 1] * shape[i + 1];
  return strides;
}

Index ravel_index(const Shape& shape, std::span<const Index> coord) {
  if (coord.size() != shape.size()) throw ShapeError("ravel_index: rank mismatch");
  Index linear = 0;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (coord[i] < 0 || coord[i] >= shape[i]) throw ShapeError("ravel_index: out of range");
    linear = linear * shape[i] + coord[i];
  }
  return linear;
}

Shape unravel_index(const Shape& shape, Index linear) {
  if (linear < 0 || linear >= shape_numel(shape)) throw ShapeError("unravel_index: out of range");
  Shape coord(shape.size());
  for (Index i = static_cast<Index>(shape.size()) - 1; i >= 0; --i) {
    coord[i] = linear % shape[i];
    linear /= shape[i];
  }
  return coord;
}

namespace {

void validate_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one extent");
  for (Index e : shape)
    if (e <= 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
}

template <typename T>
void check_finite(const char* op, const std::vector<T>& data) {
  for (const T v : data) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
  }
}

}  // namespace

template <typename T>
Tensor<T> Tensor<T>::full(const Shape& shape, T value) {
  validate_shape(shape);
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = shape;
  node->data.assign(static_cast<std::size_t>(shape_numel(shape)), value);
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::from_data(const Shape& shape, std::vector<T> data) {
  validate_shape(shape);
  if (static_cast<Index>(data.size()) != shape_numel(shape)) {
    throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                     shape_str(shape));
  }
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = shape;
  node->data = std::move(data);
  return Tensor(std::move(node));
}

template <typename T>
Index Tensor<T>::extent(Index axis) const {
  if (axis < 0) axis += rank();
  if (axis < 0 || axis >= rank()) throw ShapeError("axis out of range");
  return node_->shape[static_cast<std::size_t>(axis)];
}

template <typename T>
std::span<T> Tensor<T>::leaf_data() {
  if (!node_->parents.empty()) throw Error("leaf_data() on a non-leaf tensor");
  return node_->data;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() needs a single-element tensor, got " + shape_str(shape()));
  return node_->data[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<Index> coord) const {
  return node_->data[static_cast<std::size_t>(
      ravel_index(node_->shape, std::span<const Index>(coord.begin(), coord.size())))];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool flag) {
  if (!node_->parents.empty()) throw Error("requires_grad can only be set on leaves");
  node_->requires_grad = flag;
  return *this;
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return from_data(shape(), node_->data);
}

template <typename T>
Tensor<T> Tensor<T>::reshape(const Shape& new_shape) const {
  validate_shape(new_shape);
  if (shape_numel(new_shape) != numel())
    throw ShapeError("cannot reshape " + shape_str(shape()) + " to " + shape_str(new_shape));
  NodePtr src = node_;
  return make_result("reshape", new_shape, node_->data, {*this}, [src](detail::Node<T>& self) {
    if (!src->requires_grad) return;
    T* g = src->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> Tensor<T>::make_result(const char* op, Shape shape, std::vector<T> data,
                                 std::initializer_list<Tensor> inputs,
                                 std::function<void(detail::Node<T>&)> backward) {
  return make_result(op, std::move(shape), std::move(data), std::vector<Tensor>(inputs),
                     std::move(backward));
}

template <typename T>
Tensor<T> Tensor<T>::make_result(const char* op, Shape shape, std::vector<T> data,
                                 const std::vector<Tensor>& inputs,
                                 std::function<void(detail::Node<T>&)> backward) {
  if (runtime().check_finite) check_finite(op, data);
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  if (g_grad_enabled) {
    for (const auto& in : inputs) {
      if (in.requires_grad()) node->parents.push_back(in.node_);
    }
    if (!node->parents.empty()) {
      node->requires_grad = true;
      node->backward = std::move(backward);
    }
  }
  return Tensor(std::move(node));
}

template <typename T>
Tape<T> Tape<T>::record(const Tensor<T>& root) {
  Tape tape;
  tape.root_ = root.node();
  if (!root.requires_grad()) return tape;
  enum class Mark : std::uint8_t { Open, Done };
  std::unordered_map<detail::Node<T>*, Mark> marks;
  // Iterative post-order DFS: a node is emitted after all of its parents.
  std::vector<std::pair<detail::Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  marks[root.node().get()] = Mark::Open;
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node<T>* parent = node->parents[next++].get();
      auto it = marks.find(parent);
      if (it == marks.end()) {
        marks[parent] = Mark::Open;
        stack.emplace_back(parent, 0);
      } else if (it->second == Mark::Open) {
        throw Error("cycle in differentiation record");
      }
    } else {
      marks[node] = Mark::Done;
      tape.nodes_.push_back(node);
      stack.pop_back();
    }
  }
  return tape;
}

template <typename T>
void Tape<T>::backward() {
  if (!root_) throw Error("backward on an empty tape");
  if (root_->data.size() != 1)
    throw ShapeError("backward needs a scalar root, got " + shape_str(root_->shape));
  if (nodes_.empty()) return;
  root_->grad_buffer()[0] += T{1};
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    detail::Node<T>* node = *it;
    if (node->backward && node->grad.size() == node->data.size()) node->backward(*node);
  }
}

template <typename T>
void backward(const Tensor<T>& root) {
  if (root.numel() != 1)
    throw ShapeError("backward needs a scalar root, got " + shape_str(root.shape()));
  Tape<T>::record(root).backward();
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;
template void backward(const Tensor<float>&);
template void backward(const Tensor<double>&);

// ---------------------------------------------------------------------------

GradCheckResult finite_difference_check(const std::function<Tensor<double>()>& f,
                                        std::vector<Tensor<double>> inputs,
                                        const GradCheckOptions& options) {
  for (auto& in : inputs) {
    in.set_requires_grad(true);
    in.zero_grad();
  }
  {
    Tensor<double> y = f();
    backward(y);
  }
  std::vector<std::vector<double>> analytic;
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    const auto g = inputs[t].grad();
    std::vector<double> a(static_cast<std::size_t>(inputs[t].numel()), 0.0);
    if (!g.empty()) std::copy(g.begin(), g.end(), a.begin());
    analytic.push_back(std::move(a));
    for (Index i = 0; i < inputs[t].numel(); ++i) coords.emplace_back(t, static_cast<std::size_t>(i));
  }
  if (coords.size() > options.samples) {
    std::mt19937_64 rng(options.seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(options.samples);
  }

  std::vector<double> errors;
  errors.reserve(coords.size());
  NoGradGuard no_grad;
  for (const auto& [t, i] : coords) {
    auto values = inputs[t].leaf_data();
    const double saved = values[i];
    values[i] = saved + options.step;
    const double plus = f().item();
    values[i] = saved - options.step;
    const double minus = f().item();
    values[i] = saved;
    const double numeric = (plus - minus) / (2.0 * options.step);
    const double a = analytic[t][i];
    const double denom = std::max({std::abs(a), std::abs(numeric), options.floor});
    errors.push_back(std::abs(a - numeric) / denom);
  }

  GradCheckResult result;
  result.coordinates = errors.size();
  if (errors.empty()) return result;
  result.max_rel_error = *std::max_element(errors.begin(), errors.end());
  std::sort(errors.begin(), errors.end());
  const std::size_t n = errors.size();
  result.median_rel_error = n % 2 ? errors[n / 2] : 0.5 * (errors[n / 2 - 1] + errors[n / 2]);
  return result;
}

GradCheckResult finite_difference_check(
    const std::function<Tensor<double>(const Tensor<double>&)>& f, Tensor<double> x,
    const GradCheckOptions& options) {
  return finite_difference_check([&f, &x]() { return f(x); }, {x}, options);
}

}  // namespace odseg
