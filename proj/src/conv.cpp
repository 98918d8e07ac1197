#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "odseg/layers.hpp"
#include "odseg/runtime.hpp"

namespace odseg {

namespace {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;
template <typename T>
using StridedMap = Eigen::Map<RowMatrix<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMatrix<T>, 0, Eigen::OuterStride<>>;

// Columns per GEMM chunk. Chunk boundaries depend only on extents, which keeps
// every reduction order independent of the thread count.
constexpr Index kChunkColumns = 4096;

// Geometry in the forward-convolution sense: `in` is convolved into `out`.
struct ConvGeometry {
  Index c_in = 0, d = 0, h = 0, w = 0;
  Index c_out = 0, k = 0, stride = 1, pad = 0;
  Index od = 0, oh = 0, ow = 0;

  Index rows() const { return c_in * k * k * k; }
  Index in_volume() const { return d * h * w; }
  Index plane() const { return oh * ow; }
  Index out_volume() const { return od * oh * ow; }
  Index slices_per_chunk() const { return std::max<Index>(1, kChunkColumns / plane()); }
  Index chunks() const { return (od + slices_per_chunk() - 1) / slices_per_chunk(); }
  std::pair<Index, Index> chunk(Index i) const {
    const Index s = slices_per_chunk();
    return {i * s, std::min(od, (i + 1) * s)};
  }
};

// First and one-past-last output index whose tap lands inside [0, n).
std::pair<Index, Index> valid_range(Index out_n, Index n, Index stride, Index offset) {
  // input = o * stride + offset must lie in [0, n)
  Index lo = offset >= 0 ? 0 : (-offset + stride - 1) / stride;
  Index hi = n - 1 - offset < 0 ? 0 : (n - 1 - offset) / stride + 1;
  lo = std::min(lo, out_n);
  hi = std::clamp(hi, lo, out_n);
  return {lo, hi};
}

template <typename T>
void im2col(const T* x, const ConvGeometry& g, Index od0, Index od1, T* cols) {
  const Index ncols = (od1 - od0) * g.plane();
  for (Index c = 0; c < g.c_in; ++c) {
    const T* xc = x + c * g.in_volume();
    for (Index kz = 0; kz < g.k; ++kz)
      for (Index ky = 0; ky < g.k; ++ky)
        for (Index kx = 0; kx < g.k; ++kx) {
          T* row = cols + (((c * g.k + kz) * g.k + ky) * g.k + kx) * ncols;
          const auto [x_lo, x_hi] = valid_range(g.ow, g.w, g.stride, kx - g.pad);
          for (Index z = od0; z < od1; ++z) {
            const Index iz = z * g.stride - g.pad + kz;
            for (Index y = 0; y < g.oh; ++y) {
              T* dst = row + ((z - od0) * g.oh + y) * g.ow;
              const Index iy = y * g.stride - g.pad + ky;
              if (iz < 0 || iz >= g.d || iy < 0 || iy >= g.h) {
                std::fill(dst, dst + g.ow, T{0});
                continue;
              }
              const T* src = xc + (iz * g.h + iy) * g.w;
              std::fill(dst, dst + x_lo, T{0});
              if (g.stride == 1) {
                std::copy(src + x_lo - g.pad + kx, src + x_hi - g.pad + kx, dst + x_lo);
              } else {
                for (Index xo = x_lo; xo < x_hi; ++xo) dst[xo] = src[xo * g.stride - g.pad + kx];
              }
              std::fill(dst + x_hi, dst + g.ow, T{0});
            }
          }
        }
  }
}

// Scatter-adds the rows of channel c from `cols` back into dx.
template <typename T>
void col2im_channel(const T* cols, const ConvGeometry& g, Index od0, Index od1, Index c, T* dx) {
  const Index ncols = (od1 - od0) * g.plane();
  T* xc = dx + c * g.in_volume();
  for (Index kz = 0; kz < g.k; ++kz)
    for (Index ky = 0; ky < g.k; ++ky)
      for (Index kx = 0; kx < g.k; ++kx) {
        const T* row = cols + (((c * g.k + kz) * g.k + ky) * g.k + kx) * ncols;
        const auto [x_lo, x_hi] = valid_range(g.ow, g.w, g.stride, kx - g.pad);
        for (Index z = od0; z < od1; ++z) {
          const Index iz = z * g.stride - g.pad + kz;
          if (iz < 0 || iz >= g.d) continue;
          for (Index y = 0; y < g.oh; ++y) {
            const Index iy = y * g.stride - g.pad + ky;
            if (iy < 0 || iy >= g.h) continue;
            const T* src = row + ((z - od0) * g.oh + y) * g.ow;
            T* dst = xc + (iz * g.h + iy) * g.w;
            for (Index xo = x_lo; xo < x_hi; ++xo) dst[xo * g.stride - g.pad + kx] += src[xo];
          }
        }
      }
}

// out[c_out, od*oh*ow] = W[c_out, rows] * cols(x)
template <typename T>
void conv_forward_raw(const T* x, const T* weight, const ConvGeometry& g, T* out) {
  const Index chunks = g.chunks();
  parallel_for(chunks, [&](Index i) {
    const auto [z0, z1] = g.chunk(i);
    const Index ncols = (z1 - z0) * g.plane();
    std::vector<T> cols(static_cast<std::size_t>(g.rows() * ncols));
    im2col(x, g, z0, z1, cols.data());
    StridedMap<T>(out + z0 * g.plane(), g.c_out, ncols, Eigen::OuterStride<>(g.out_volume())).noalias() =
        ConstMatMap<T>(weight, g.c_out, g.rows()) * ConstMatMap<T>(cols.data(), g.rows(), ncols);
  });
}

// dx += col2im(W^T * grad)
template <typename T>
void conv_backward_data_raw(const T* grad, const T* weight, const ConvGeometry& g, T* dx) {
  const Index chunks = g.chunks();
  std::vector<std::vector<T>> dcols(static_cast<std::size_t>(chunks));
  parallel_for(chunks, [&](Index i) {
    const auto [z0, z1] = g.chunk(i);
    const Index ncols = (z1 - z0) * g.plane();
    auto& buf = dcols[static_cast<std::size_t>(i)];
    buf.resize(static_cast<std::size_t>(g.rows() * ncols));
    MatMap<T>(buf.data(), g.rows(), ncols).noalias() =
        ConstMatMap<T>(weight, g.c_out, g.rows()).transpose() *
        ConstStridedMap<T>(grad + z0 * g.plane(), g.c_out, ncols, Eigen::OuterStride<>(g.out_volume()));
  });
  parallel_for(g.c_in, [&](Index c) {
    for (Index i = 0; i < chunks; ++i) {
      const auto [z0, z1] = g.chunk(i);
      col2im_channel(dcols[static_cast<std::size_t>(i)].data(), g, z0, z1, c, dx);
    }
  });
}

// dW += grad * cols(x)^T
template <typename T>
void conv_backward_weight_raw(const T* x, const T* grad, const ConvGeometry& g, T* dweight) {
  const Index chunks = g.chunks();
  std::vector<RowMatrix<T>> partial(static_cast<std::size_t>(chunks));
  parallel_for(chunks, [&](Index i) {
    const auto [z0, z1] = g.chunk(i);
    const Index ncols = (z1 - z0) * g.plane();
    std::vector<T> cols(static_cast<std::size_t>(g.rows() * ncols));
    im2col(x, g, z0, z1, cols.data());
    partial[static_cast<std::size_t>(i)].noalias() =
        ConstStridedMap<T>(grad + z0 * g.plane(), g.c_out, ncols, Eigen::OuterStride<>(g.out_volume())) *
        ConstMatMap<T>(cols.data(), g.rows(), ncols).transpose();
  });
  MatMap<T> dw(dweight, g.c_out, g.rows());
  for (const auto& p : partial) dw += p;
}

template <typename T>
void add_channel_bias(T* out, const T* bias, Index channels, Index volume) {
  for (Index c = 0; c < channels; ++c) {
    T* o = out + c * volume;
    const T b = bias[c];
    for (Index i = 0; i < volume; ++i) o[i] += b;
  }
}

template <typename T>
void accumulate_channel_sums(const T* grad, Index channels, Index volume, T* dbias) {
  for (Index c = 0; c < channels; ++c) {
    T total = 0;
    const T* g = grad + c * volume;
    for (Index i = 0; i < volume; ++i) total += g[i];
    dbias[c] += total;
  }
}

void check_weight(const Shape& w) {
  if (w.size() != 5 || w[2] != w[3] || w[2] != w[4])
    throw ShapeError("convolution weight must be [c_out, c_in, k, k, k], got " + shape_str(w));
}

ConvGeometry forward_geometry(const Shape& x, const Shape& w, int stride, int padding) {
  if (x.size() != 4) throw ShapeError("convolution input must be [c, d, h, w], got " + shape_str(x));
  check_weight(w);
  if (stride < 1 || padding < 0) throw ShapeError("stride must be >= 1 and padding >= 0");
  if (w[1] != x[0])
    throw ShapeError("input has " + std::to_string(x[0]) + " channels, weight expects " + std::to_string(w[1]));
  ConvGeometry g;
  g.c_in = x[0];
  g.d = x[1];
  g.h = x[2];
  g.w = x[3];
  g.c_out = w[0];
  g.k = w[2];
  g.stride = stride;
  g.pad = padding;
  g.od = conv_output_extent(g.d, g.k, stride, padding);
  g.oh = conv_output_extent(g.h, g.k, stride, padding);
  g.ow = conv_output_extent(g.w, g.k, stride, padding);
  return g;
}

template <typename T>
void check_bias(const Tensor<T>* b, Index n) {
  if (b && (b->rank() != 1 || b->extent(0) != n)) throw ShapeError("bias length must equal output channels");
}

}  // namespace

Index conv_output_extent(Index in, Index k, Index stride, Index padding) {
  const Index span = in + 2 * padding - k;
  if (span < 0) throw ShapeError("non-positive convolution output extent");
  return span / stride + 1;
}

template <typename T>
Tensor<T> he_normal(const Shape& shape, Index fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  std::vector<T> data(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& v : data) v = static_cast<T>(dist(rng));
  return Tensor<T>::from_data(shape, std::move(data));
}

template <typename T>
Conv3DParams<T> Conv3DParams<T>::init(Index c_in, Index c_out, Index k, int stride, int padding,
                                      std::mt19937_64& rng) {
  Conv3DParams p;
  p.weight = he_normal<T>({c_out, c_in, k, k, k}, c_in * k * k * k, rng);
  p.bias = Tensor<T>::zeros({c_out});
  p.stride = stride;
  p.padding = padding;
  return p;
}

template <typename T>
void Conv3DParams<T>::collect(const std::string& prefix, NamedTensors<T>& out) const {
  out.emplace_back(prefix + ".weight", weight);
  out.emplace_back(prefix + ".bias", bias);
}

template <typename T>
Tensor<T> conv3d_naive(const Tensor<T>& x, const Conv3DParams<T>& p) {
  const ConvGeometry g = forward_geometry(x.shape(), p.weight.shape(), p.stride, p.padding);
  check_bias(&p.bias, g.c_out);
  std::vector<T> out(static_cast<std::size_t>(g.c_out * g.out_volume()));
  const T* xv = x.ptr();
  const T* wv = p.weight.ptr();
  for (Index o = 0; o < g.c_out; ++o)
    for (Index z = 0; z < g.od; ++z)
      for (Index y = 0; y < g.oh; ++y)
        for (Index xo = 0; xo < g.ow; ++xo) {
          double acc = static_cast<double>(p.bias.data()[static_cast<std::size_t>(o)]);
          for (Index c = 0; c < g.c_in; ++c)
            for (Index kz = 0; kz < g.k; ++kz)
              for (Index ky = 0; ky < g.k; ++ky)
                for (Index kx = 0; kx < g.k; ++kx) {
                  const Index iz = z * g.stride - g.pad + kz;
                  const Index iy = y * g.stride - g.pad + ky;
                  const Index ix = xo * g.stride - g.pad + kx;
                  if (iz < 0 || iz >= g.d || iy < 0 || iy >= g.h || ix < 0 || ix >= g.w) continue;
                  acc += static_cast<double>(wv[(((o * g.c_in + c) * g.k + kz) * g.k + ky) * g.k + kx]) *
                         static_cast<double>(xv[((c * g.d + iz) * g.h + iy) * g.w + ix]);
                }
          out[static_cast<std::size_t>(((o * g.od + z) * g.oh + y) * g.ow + xo)] = static_cast<T>(acc);
        }
  NoGradGuard no_grad;
  return Tensor<T>::make_result("conv3d_naive", {g.c_out, g.od, g.oh, g.ow}, std::move(out), {}, nullptr);
}

template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias, int stride, int padding) {
  const ConvGeometry g = forward_geometry(x.shape(), weight.shape(), stride, padding);
  check_bias(bias, g.c_out);
  std::vector<T> out(static_cast<std::size_t>(g.c_out * g.out_volume()));
  conv_forward_raw(x.ptr(), weight.ptr(), g, out.data());
  if (bias) add_channel_bias(out.data(), bias->ptr(), g.c_out, g.out_volume());

  auto nx = x.node();
  auto nw = weight.node();
  auto nb = bias ? bias->node() : nullptr;
  std::vector<Tensor<T>> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  return Tensor<T>::make_result("conv3d", {g.c_out, g.od, g.oh, g.ow}, std::move(out), inputs,
                                [nx, nw, nb, g](detail::Node<T>& self) {
    const T* grad = self.grad.data();
    if (nb && nb->requires_grad) accumulate_channel_sums(grad, g.c_out, g.out_volume(), nb->grad_buffer());
    if (nw->requires_grad) conv_backward_weight_raw(nx->data.data(), grad, g, nw->grad_buffer());
    if (nx->requires_grad) conv_backward_data_raw(grad, nw->data.data(), g, nx->grad_buffer());
  });
}

template <typename T>
Tensor<T> conv3d_direct(const Tensor<T>& x, const Conv3DParams<T>& p) {
  return conv3d(x, p.weight, &p.bias, p.stride, p.padding);
}

template <typename T>
Tensor<T> transposed_conv3d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias, int stride,
                            int padding) {
  if (x.rank() != 4) throw ShapeError("transposed convolution input must be [c, d, h, w]");
  check_weight(weight.shape());
  if (stride < 1 || padding < 0) throw ShapeError("stride must be >= 1 and padding >= 0");
  if (weight.extent(0) != x.extent(0))
    throw ShapeError("transposed convolution: input channels " + std::to_string(x.extent(0)) +
                     " do not match weight extent " + std::to_string(weight.extent(0)));
  const Index k = weight.extent(2);
  Shape out_shape{weight.extent(1), 0, 0, 0};
  for (int a = 1; a < 4; ++a) {
    out_shape[static_cast<std::size_t>(a)] = (x.extent(a) - 1) * stride - 2 * padding + k;
    if (out_shape[static_cast<std::size_t>(a)] <= 0) throw ShapeError("non-positive transposed convolution extent");
  }
  const ConvGeometry g = forward_geometry(out_shape, weight.shape(), stride, padding);
  if (g.od != x.extent(1) || g.oh != x.extent(2) || g.ow != x.extent(3))
    throw ShapeError("transposed convolution shape arithmetic is inconsistent");
  check_bias(bias, g.c_in);

  std::vector<T> out(static_cast<std::size_t>(shape_numel(out_shape)), T{0});
  conv_backward_data_raw(x.ptr(), weight.ptr(), g, out.data());
  if (bias) add_channel_bias(out.data(), bias->ptr(), g.c_in, g.in_volume());

  auto nx = x.node();
  auto nw = weight.node();
  auto nb = bias ? bias->node() : nullptr;
  std::vector<Tensor<T>> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  return Tensor<T>::make_result("transposed_conv3d", out_shape, std::move(out), inputs,
                                [nx, nw, nb, g](detail::Node<T>& self) {
    const T* grad = self.grad.data();
    if (nb && nb->requires_grad) accumulate_channel_sums(grad, g.c_in, g.in_volume(), nb->grad_buffer());
    if (nw->requires_grad) conv_backward_weight_raw(grad, nx->data.data(), g, nw->grad_buffer());
    if (nx->requires_grad) {
      std::vector<T> dx(nx->data.size());
      conv_forward_raw(grad, nw->data.data(), g, dx.data());
      T* gx = nx->grad_buffer();
      for (std::size_t i = 0; i < dx.size(); ++i) gx[i] += dx[i];
    }
  });
}

template <typename T>
Tensor<T> transposed_conv3d(const Tensor<T>& x, const Conv3DParams<T>& p) {
  return transposed_conv3d(x, p.weight, &p.bias, p.stride, p.padding);
}

#define ODSEG_INSTANTIATE_CONV(T)                                                                          \
  template Tensor<T> he_normal<T>(const Shape&, Index, std::mt19937_64&);                                  \
  template struct Conv3DParams<T>;                                                                         \
  template Tensor<T> conv3d_naive(const Tensor<T>&, const Conv3DParams<T>&);                               \
  template Tensor<T> conv3d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*, int, int);               \
  template Tensor<T> conv3d_direct(const Tensor<T>&, const Conv3DParams<T>&);                              \
  template Tensor<T> transposed_conv3d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*, int, int);    \
  template Tensor<T> transposed_conv3d(const Tensor<T>&, const Conv3DParams<T>&);

ODSEG_INSTANTIATE_CONV(float)
ODSEG_INSTANTIATE_CONV(double)

}  // namespace odseg
