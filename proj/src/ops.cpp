#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "odseg/runtime.hpp"
#include "odseg/tensor.hpp"

namespace odseg {

namespace {

template <typename T>
using Node = detail::Node<T>;
template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

struct Broadcast {
  Shape out;
  Shape a_strides;  // 0 on broadcast axes
  Shape b_strides;
  bool same = true;
};

Broadcast plan_broadcast(const Shape& a, const Shape& b) {
  if (a.size() != b.size())
    throw ShapeError("rank mismatch in broadcast: " + shape_str(a) + " vs " + shape_str(b));
  Broadcast plan;
  plan.same = a == b;
  plan.out.resize(a.size());
  const Shape sa = shape_strides(a);
  const Shape sb = shape_strides(b);
  plan.a_strides.resize(a.size());
  plan.b_strides.resize(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] != b[i] && a[i] != 1 && b[i] != 1)
      throw ShapeError("incompatible shapes " + shape_str(a) + " and " + shape_str(b));
    plan.out[i] = std::max(a[i], b[i]);
    plan.a_strides[i] = a[i] == 1 ? 0 : sa[i];
    plan.b_strides[i] = b[i] == 1 ? 0 : sb[i];
  }
  return plan;
}

// Calls fn(out_index, a_index, b_index) for every output element.
template <typename Fn>
void for_each_broadcast(const Broadcast& plan, Fn&& fn) {
  const Index n = shape_numel(plan.out);
  if (plan.same) {
    for (Index i = 0; i < n; ++i) fn(i, i, i);
    return;
  }
  const std::size_t rank = plan.out.size();
  Shape coord(rank, 0);
  Index ia = 0, ib = 0;
  for (Index o = 0; o < n; ++o) {
    fn(o, ia, ib);
    for (std::size_t k = rank; k-- > 0;) {
      ++coord[k];
      ia += plan.a_strides[k];
      ib += plan.b_strides[k];
      if (coord[k] < plan.out[k]) break;
      ia -= plan.a_strides[k] * coord[k];
      ib -= plan.b_strides[k] * coord[k];
      coord[k] = 0;
    }
  }
}

template <typename T>
Tensor<T> binary(ElementwiseOp op, const Tensor<T>& a, const Tensor<T>& b) {
  const Broadcast plan = plan_broadcast(a.shape(), b.shape());
  std::vector<T> out(static_cast<std::size_t>(shape_numel(plan.out)));
  const T* pa = a.ptr();
  const T* pb = b.ptr();
  const char* name = "add";
  switch (op) {
    case ElementwiseOp::Add:
      for_each_broadcast(plan, [&](Index o, Index i, Index j) { out[o] = pa[i] + pb[j]; });
      break;
    case ElementwiseOp::Sub:
      name = "sub";
      for_each_broadcast(plan, [&](Index o, Index i, Index j) { out[o] = pa[i] - pb[j]; });
      break;
    case ElementwiseOp::Mul:
      name = "mul";
      for_each_broadcast(plan, [&](Index o, Index i, Index j) { out[o] = pa[i] * pb[j]; });
      break;
    case ElementwiseOp::Div:
      name = "div";
      for (const T v : b.data()) {
        if (std::abs(static_cast<double>(v)) < 1e-30) throw NumericError("division by a value with magnitude < 1e-30");
      }
      for_each_broadcast(plan, [&](Index o, Index i, Index j) { out[o] = pa[i] / pb[j]; });
      break;
    default:
      throw Error("not a binary op");
  }
  NodePtr<T> na = a.node();
  NodePtr<T> nb = b.node();
  return Tensor<T>::make_result(name, plan.out, std::move(out), {a, b},
                                [na, nb, plan, op](Node<T>& self) {
    const T* g = self.grad.data();
    T* ga = na->requires_grad ? na->grad_buffer() : nullptr;
    T* gb = nb->requires_grad ? nb->grad_buffer() : nullptr;
    const T* va = na->data.data();
    const T* vb = nb->data.data();
    for_each_broadcast(plan, [&](Index o, Index i, Index j) {
      switch (op) {
        case ElementwiseOp::Add:
          if (ga) ga[i] += g[o];
          if (gb) gb[j] += g[o];
          break;
        case ElementwiseOp::Sub:
          if (ga) ga[i] += g[o];
          if (gb) gb[j] -= g[o];
          break;
        case ElementwiseOp::Mul:
          if (ga) ga[i] += g[o] * vb[j];
          if (gb) gb[j] += g[o] * va[i];
          break;
        default:
          if (ga) ga[i] += g[o] / vb[j];
          if (gb) gb[j] -= g[o] * va[i] / (vb[j] * vb[j]);
          break;
      }
    });
  });
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

Index normalize_axis(Index axis, Index rank) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError("axis out of range");
  return axis;
}

}  // namespace

template <typename T>
Tensor<T> elementwise(ElementwiseOp op, const Tensor<T>& a, const Tensor<T>* b, double param) {
  switch (op) {
    case ElementwiseOp::Add:
    case ElementwiseOp::Sub:
    case ElementwiseOp::Mul:
    case ElementwiseOp::Div:
      if (!b) throw Error("binary elementwise op needs two operands");
      return binary(op, a, *b);
    case ElementwiseOp::LeakyRelu:
      return leaky_relu(a, param);
    case ElementwiseOp::Sigmoid:
      return sigmoid(a);
    case ElementwiseOp::Scale:
      return scale(a, param);
  }
  throw Error("unknown elementwise op");
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return binary(ElementwiseOp::Add, a, b); }
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) { return binary(ElementwiseOp::Sub, a, b); }
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return binary(ElementwiseOp::Mul, a, b); }
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) { return binary(ElementwiseOp::Div, a, b); }

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, double slope) {
  const T s = static_cast<T>(slope);
  std::vector<T> out(x.data().begin(), x.data().end());
  for (T& v : out) v = v > T{0} ? v : s * v;
  NodePtr<T> nx = x.node();
  return Tensor<T>::make_result("leaky_relu", x.shape(), std::move(out), {x}, [nx, s](Node<T>& self) {
    T* g = nx->grad_buffer();
    const T* v = nx->data.data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += v[i] > T{0} ? self.grad[i] : s * self.grad[i];
  });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  std::vector<T> out(x.data().begin(), x.data().end());
  for (T& v : out) v = stable_sigmoid(v);
  NodePtr<T> nx = x.node();
  return Tensor<T>::make_result("sigmoid", x.shape(), std::move(out), {x}, [nx](Node<T>& self) {
    T* g = nx->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const T y = self.data[i];
      g[i] += self.grad[i] * y * (T{1} - y);
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, double factor) {
  const T c = static_cast<T>(factor);
  std::vector<T> out(x.data().begin(), x.data().end());
  for (T& v : out) v *= c;
  NodePtr<T> nx = x.node();
  return Tensor<T>::make_result("scale", x.shape(), std::move(out), {x}, [nx, c](Node<T>& self) {
    T* g = nx->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += c * self.grad[i];
  });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  std::vector<T> out(x.data().begin(), x.data().end());
  for (T& v : out) {
    if (!(v > T{0})) throw NumericError("log of a non-positive value");
    v = std::log(v);
  }
  NodePtr<T> nx = x.node();
  return Tensor<T>::make_result("log", x.shape(), std::move(out), {x}, [nx](Node<T>& self) {
    T* g = nx->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] / nx->data[i];
  });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, double value) {
  const T c = static_cast<T>(value);
  std::vector<T> out(x.data().begin(), x.data().end());
  for (T& v : out) v += c;
  NodePtr<T> nx = x.node();
  return Tensor<T>::make_result("add_scalar", x.shape(), std::move(out), {x}, [nx](Node<T>& self) {
    T* g = nx->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul needs rank-2 operands");
  const Index m = a.extent(0), k = a.extent(1), n = b.extent(1);
  if (b.extent(0) != k)
    throw ShapeError("matmul inner extents differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<T> out(static_cast<std::size_t>(m * n));
  MatMap<T>(out.data(), m, n).noalias() = ConstMatMap<T>(a.ptr(), m, k) * ConstMatMap<T>(b.ptr(), k, n);
  NodePtr<T> na = a.node();
  NodePtr<T> nb = b.node();
  return Tensor<T>::make_result("matmul", {m, n}, std::move(out), {a, b}, [na, nb, m, k, n](Node<T>& self) {
    ConstMatMap<T> g(self.grad.data(), m, n);
    if (na->requires_grad)
      MatMap<T>(na->grad_buffer(), m, k).noalias() += g * ConstMatMap<T>(nb->data.data(), k, n).transpose();
    if (nb->requires_grad)
      MatMap<T>(nb->grad_buffer(), k, n).noalias() += ConstMatMap<T>(na->data.data(), m, k).transpose() * g;
  });
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& x) {
  if (x.rank() != 2) throw ShapeError("transpose2d needs a rank-2 tensor");
  const Index r = x.extent(0), c = x.extent(1);
  std::vector<T> out(static_cast<std::size_t>(r * c));
  MatMap<T>(out.data(), c, r) = ConstMatMap<T>(x.ptr(), r, c).transpose();
  NodePtr<T> nx = x.node();
  return Tensor<T>::make_result("transpose2d", {c, r}, std::move(out), {x}, [nx, r, c](Node<T>& self) {
    MatMap<T>(nx->grad_buffer(), r, c) += ConstMatMap<T>(self.grad.data(), c, r).transpose();
  });
}

namespace {

struct AxisSplit {
  Index outer = 1, n = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, Index axis) {
  AxisSplit s;
  for (Index i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
  s.n = shape[static_cast<std::size_t>(axis)];
  for (Index i = axis + 1; i < static_cast<Index>(shape.size()); ++i) s.inner *= shape[static_cast<std::size_t>(i)];
  return s;
}

}  // namespace

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, Index axis, double temperature) {
  if (!(temperature > 0.0)) throw ValueError("softmax temperature must be positive");
  axis = normalize_axis(axis, x.rank());
  const AxisSplit s = split_axis(x.shape(), axis);
  const T inv_t = static_cast<T>(1.0 / temperature);
  std::vector<T> out(static_cast<std::size_t>(x.numel()));
  const T* v = x.ptr();
  for (Index o = 0; o < s.outer; ++o) {
    for (Index i = 0; i < s.inner; ++i) {
      const Index base = o * s.n * s.inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (Index j = 0; j < s.n; ++j) mx = std::max(mx, v[base + j * s.inner]);
      T total = 0;
      for (Index j = 0; j < s.n; ++j) {
        const T e = std::exp((v[base + j * s.inner] - mx) * inv_t);
        out[static_cast<std::size_t>(base + j * s.inner)] = e;
        total += e;
      }
      for (Index j = 0; j < s.n; ++j) out[static_cast<std::size_t>(base + j * s.inner)] /= total;
    }
  }
  NodePtr<T> nx = x.node();
  return Tensor<T>::make_result("softmax", x.shape(), std::move(out), {x}, [nx, s, inv_t](Node<T>& self) {
    T* g = nx->grad_buffer();
    const T* y = self.data.data();
    const T* gy = self.grad.data();
    for (Index o = 0; o < s.outer; ++o) {
      for (Index i = 0; i < s.inner; ++i) {
        const Index base = o * s.n * s.inner + i;
        T dot = 0;
        for (Index j = 0; j < s.n; ++j) dot += gy[base + j * s.inner] * y[base + j * s.inner];
        for (Index j = 0; j < s.n; ++j) {
          const Index k = base + j * s.inner;
          g[k] += y[k] * (gy[k] - dot) * inv_t;
        }
      }
    }
  });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x, Index axis) {
  axis = normalize_axis(axis, x.rank());
  const AxisSplit s = split_axis(x.shape(), axis);
  std::vector<T> out(static_cast<std::size_t>(x.numel()));
  const T* v = x.ptr();
  for (Index o = 0; o < s.outer; ++o) {
    for (Index i = 0; i < s.inner; ++i) {
      const Index base = o * s.n * s.inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (Index j = 0; j < s.n; ++j) mx = std::max(mx, v[base + j * s.inner]);
      T total = 0;
      for (Index j = 0; j < s.n; ++j) total += std::exp(v[base + j * s.inner] - mx);
      const T lse = mx + std::log(total);
      for (Index j = 0; j < s.n; ++j) out[static_cast<std::size_t>(base + j * s.inner)] = v[base + j * s.inner] - lse;
    }
  }
  NodePtr<T> nx = x.node();
  return Tensor<T>::make_result("log_softmax", x.shape(), std::move(out), {x}, [nx, s](Node<T>& self) {
    T* g = nx->grad_buffer();
    const T* y = self.data.data();
    const T* gy = self.grad.data();
    for (Index o = 0; o < s.outer; ++o) {
      for (Index i = 0; i < s.inner; ++i) {
        const Index base = o * s.n * s.inner + i;
        T total = 0;
        for (Index j = 0; j < s.n; ++j) total += gy[base + j * s.inner];
        for (Index j = 0; j < s.n; ++j) {
          const Index k = base + j * s.inner;
          g[k] += gy[k] - std::exp(y[k]) * total;
        }
      }
    }
  });
}

template <typename T>
Tensor<T> reduce(ReduceOp op, const Tensor<T>& x, const std::vector<Index>& axes_in, bool keepdims) {
  const Index rank = x.rank();
  std::vector<bool> reduced(static_cast<std::size_t>(rank), false);
  for (Index a : axes_in) {
    const Index axis = normalize_axis(a, rank);
    if (reduced[static_cast<std::size_t>(axis)]) throw ShapeError("duplicate reduction axis");
    reduced[static_cast<std::size_t>(axis)] = true;
  }
  Shape out_shape;
  Shape kept_shape;
  for (Index i = 0; i < rank; ++i) {
    const Index e = x.shape()[static_cast<std::size_t>(i)];
    kept_shape.push_back(reduced[static_cast<std::size_t>(i)] ? 1 : e);
    if (!reduced[static_cast<std::size_t>(i)]) out_shape.push_back(e);
    else if (keepdims) out_shape.push_back(1);
  }
  if (out_shape.empty()) out_shape.push_back(1);
  const Index out_n = shape_numel(kept_shape);
  const Index count = x.numel() / out_n;

  // Input linear index -> output linear index.
  const Shape kept_strides = shape_strides(kept_shape);
  std::vector<Index> map(static_cast<std::size_t>(x.numel()));
  {
    Shape coord(static_cast<std::size_t>(rank), 0);
    Index o = 0;
    for (Index i = 0; i < x.numel(); ++i) {
      map[static_cast<std::size_t>(i)] = o;
      for (Index k = rank - 1; k >= 0; --k) {
        const auto ku = static_cast<std::size_t>(k);
        ++coord[ku];
        if (!reduced[ku]) o += kept_strides[ku];
        if (coord[ku] < x.shape()[ku]) break;
        if (!reduced[ku]) o -= kept_strides[ku] * coord[ku];
        coord[ku] = 0;
      }
    }
  }

  const T* v = x.ptr();
  std::vector<T> out(static_cast<std::size_t>(out_n));
  std::vector<Index> argmax;
  const char* name = "sum";
  if (op == ReduceOp::Max) {
    name = "max";
    out.assign(out.size(), -std::numeric_limits<T>::infinity());
    argmax.assign(out.size(), -1);
    for (Index i = 0; i < x.numel(); ++i) {
      const auto o = static_cast<std::size_t>(map[static_cast<std::size_t>(i)]);
      if (argmax[o] < 0 || v[i] > out[o]) {
        out[o] = v[i];
        argmax[o] = i;
      }
    }
  } else {
    out.assign(out.size(), T{0});
    for (Index i = 0; i < x.numel(); ++i) out[static_cast<std::size_t>(map[static_cast<std::size_t>(i)])] += v[i];
    if (op == ReduceOp::Mean) {
      name = "mean";
      for (T& o : out) o /= static_cast<T>(count);
    }
  }
  NodePtr<T> nx = x.node();
  return Tensor<T>::make_result(name, out_shape, std::move(out), {x},
                                [nx, op, map = std::move(map), argmax = std::move(argmax), count](Node<T>& self) {
    T* g = nx->grad_buffer();
    const T* gy = self.grad.data();
    if (op == ReduceOp::Max) {
      for (std::size_t o = 0; o < argmax.size(); ++o) g[argmax[o]] += gy[o];
      return;
    }
    const T f = op == ReduceOp::Mean ? T{1} / static_cast<T>(count) : T{1};
    for (std::size_t i = 0; i < map.size(); ++i) g[i] += gy[map[i]] * f;
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  std::vector<Index> axes(static_cast<std::size_t>(x.rank()));
  std::iota(axes.begin(), axes.end(), Index{0});
  return reduce(ReduceOp::Sum, x, axes);
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  std::vector<Index> axes(static_cast<std::size_t>(x.rank()));
  std::iota(axes.begin(), axes.end(), Index{0});
  return reduce(ReduceOp::Mean, x, axes);
}

template <typename T>
Tensor<T> global_average_pool(const Tensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("global_average_pool needs [c,d,h,w], got " + shape_str(x.shape()));
  const Index c = x.extent(0);
  const Index n = x.numel() / c;
  std::vector<T> out(static_cast<std::size_t>(c), T{0});
  const T* v = x.ptr();
  for (Index ch = 0; ch < c; ++ch) {
    T total = 0;
    for (Index i = 0; i < n; ++i) total += v[ch * n + i];
    out[static_cast<std::size_t>(ch)] = total / static_cast<T>(n);
  }
  NodePtr<T> nx = x.node();
  return Tensor<T>::make_result("global_average_pool", {c}, std::move(out), {x}, [nx, c, n](Node<T>& self) {
    T* g = nx->grad_buffer();
    for (Index ch = 0; ch < c; ++ch) {
      const T share = self.grad[static_cast<std::size_t>(ch)] / static_cast<T>(n);
      for (Index i = 0; i < n; ++i) g[ch * n + i] += share;
    }
  });
}

template <typename T>
Tensor<T> concat0(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat0 of nothing");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  Index lead = 0;
  for (const auto& p : parts) {
    if (Shape(p.shape().begin() + 1, p.shape().end()) != tail)
      throw ShapeError("concat0 trailing extents differ: " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    lead += p.extent(0);
  }
  Shape shape = {lead};
  shape.insert(shape.end(), tail.begin(), tail.end());
  std::vector<T> out;
  out.reserve(static_cast<std::size_t>(shape_numel(shape)));
  std::vector<NodePtr<T>> nodes;
  for (const auto& p : parts) {
    out.insert(out.end(), p.data().begin(), p.data().end());
    nodes.push_back(p.node());
  }
  return Tensor<T>::make_result("concat0", shape, std::move(out), parts, [nodes](Node<T>& self) {
    std::size_t offset = 0;
    for (const auto& n : nodes) {
      if (n->requires_grad) {
        T* g = n->grad_buffer();
        for (std::size_t i = 0; i < n->data.size(); ++i) g[i] += self.grad[offset + i];
      }
      offset += n->data.size();
    }
  });
}

template <typename T>
Tensor<T> slice0(const Tensor<T>& x, Index begin, Index end) {
  if (begin < 0 || end > x.extent(0) || begin >= end) throw ShapeError("slice0 range out of bounds");
  const Index inner = x.numel() / x.extent(0);
  Shape shape = x.shape();
  shape[0] = end - begin;
  std::vector<T> out(x.data().begin() + begin * inner, x.data().begin() + end * inner);
  NodePtr<T> nx = x.node();
  const Index offset = begin * inner;
  return Tensor<T>::make_result("slice0", shape, std::move(out), {x}, [nx, offset](Node<T>& self) {
    T* g = nx->grad_buffer() + offset;
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

#define ODSEG_INSTANTIATE_OPS(T)                                                                     \
  template Tensor<T> elementwise(ElementwiseOp, const Tensor<T>&, const Tensor<T>*, double);        \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> leaky_relu(const Tensor<T>&, double);                                          \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                     \
  template Tensor<T> scale(const Tensor<T>&, double);                                               \
  template Tensor<T> log(const Tensor<T>&);                                                         \
  template Tensor<T> add_scalar(const Tensor<T>&, double);                                          \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> transpose2d(const Tensor<T>&);                                                 \
  template Tensor<T> softmax(const Tensor<T>&, Index, double);                                      \
  template Tensor<T> log_softmax(const Tensor<T>&, Index);                                          \
  template Tensor<T> reduce(ReduceOp, const Tensor<T>&, const std::vector<Index>&, bool);           \
  template Tensor<T> sum(const Tensor<T>&);                                                         \
  template Tensor<T> mean(const Tensor<T>&);                                                        \
  template Tensor<T> global_average_pool(const Tensor<T>&);                                         \
  template Tensor<T> concat0(const std::vector<Tensor<T>>&);                                        \
  template Tensor<T> slice0(const Tensor<T>&, Index, Index);

ODSEG_INSTANTIATE_OPS(float)
ODSEG_INSTANTIATE_OPS(double)

}  // namespace odseg
