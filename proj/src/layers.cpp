#include <algorithm>
#include <array>
#include <cmath>

#include "odseg/layers.hpp"
#include "odseg/runtime.hpp"

namespace odseg {

namespace {

template <typename T>
using Node = detail::Node<T>;

template <typename T>
void require_4d(const Tensor<T>& x, const char* what) {
  if (x.rank() != 4) throw ShapeError(std::string(what) + " needs [c, d, h, w], got " + shape_str(x.shape()));
}

// One axis of a separable linear resampling: output o reads inputs lo[o] and
// hi[o] with weights (1 - frac[o]) and frac[o].
struct AxisTaps {
  std::vector<Index> lo, hi;
  std::vector<double> frac;
};

AxisTaps upsample_taps(Index in, Index factor) {
  AxisTaps taps;
  const Index out = in * factor;
  for (Index o = 0; o < out; ++o) {
    const double src = std::max(0.0, (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5);
    const Index i0 = std::min(static_cast<Index>(std::floor(src)), in - 1);
    taps.lo.push_back(i0);
    taps.hi.push_back(std::min(i0 + 1, in - 1));
    taps.frac.push_back(src - static_cast<double>(i0));
  }
  return taps;
}

}  // namespace

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps) {
  require_4d(x, "instance_norm");
  if (!(eps > 0.0)) throw ValueError("instance_norm eps must be positive");
  const Index c = x.extent(0);
  const Index n = x.numel() / c;
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c})
    throw ShapeError("instance_norm affine parameters must have one entry per channel");

  std::vector<T> out(static_cast<std::size_t>(x.numel()));
  std::vector<T> xhat(out.size());
  std::vector<T> inv_std(static_cast<std::size_t>(c));
  const T* v = x.ptr();
  parallel_for(c, [&](Index ch) {
    const T* xc = v + ch * n;
    double mu = 0;
    for (Index i = 0; i < n; ++i) mu += xc[i];
    mu /= static_cast<double>(n);
    double var = 0;
    for (Index i = 0; i < n; ++i) var += (xc[i] - mu) * (xc[i] - mu);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(ch)] = static_cast<T>(is);
    const T gm = gamma.data()[static_cast<std::size_t>(ch)];
    const T bt = beta.data()[static_cast<std::size_t>(ch)];
    for (Index i = 0; i < n; ++i) {
      const T h = static_cast<T>((xc[i] - mu) * is);
      xhat[static_cast<std::size_t>(ch * n + i)] = h;
      out[static_cast<std::size_t>(ch * n + i)] = gm * h + bt;
    }
  });

  auto nx = x.node();
  auto ng = gamma.node();
  auto nb = beta.node();
  return Tensor<T>::make_result("instance_norm", x.shape(), std::move(out), {x, gamma, beta},
                                [nx, ng, nb, xhat = std::move(xhat), inv_std = std::move(inv_std), c,
                                 n](Node<T>& self) {
    const T* g = self.grad.data();
    T* gx = nx->requires_grad ? nx->grad_buffer() : nullptr;
    T* gg = ng->requires_grad ? ng->grad_buffer() : nullptr;
    T* gb = nb->requires_grad ? nb->grad_buffer() : nullptr;
    parallel_for(c, [&](Index ch) {
      const T* gc = g + ch * n;
      const T* hc = xhat.data() + ch * n;
      double sum_g = 0, sum_gh = 0;
      for (Index i = 0; i < n; ++i) {
        sum_g += gc[i];
        sum_gh += static_cast<double>(gc[i]) * hc[i];
      }
      if (gg) gg[ch] += static_cast<T>(sum_gh);
      if (gb) gb[ch] += static_cast<T>(sum_g);
      if (!gx) return;
      const double gm = ng->data[static_cast<std::size_t>(ch)];
      const double is = inv_std[static_cast<std::size_t>(ch)];
      const double mean_g = sum_g / static_cast<double>(n);
      const double mean_gh = sum_gh / static_cast<double>(n);
      T* out = gx + ch * n;
      for (Index i = 0; i < n; ++i)
        out[i] += static_cast<T>(gm * is * (gc[i] - mean_g - hc[i] * mean_gh));
    });
  });
}

template <typename T>
Tensor<T> downsample_trilinear(const Tensor<T>& x, int factor) {
  require_4d(x, "downsample_trilinear");
  if (factor != 2) throw ValueError("downsample_trilinear supports factor 2 only");
  const Index c = x.extent(0), d = x.extent(1), h = x.extent(2), w = x.extent(3);
  if (d % 2 || h % 2 || w % 2)
    throw ShapeError("downsample_trilinear needs even spatial extents, got " + shape_str(x.shape()));
  const Index od = d / 2, oh = h / 2, ow = w / 2;
  std::vector<T> out(static_cast<std::size_t>(c * od * oh * ow));
  const T* v = x.ptr();
  for (Index ch = 0; ch < c; ++ch)
    for (Index z = 0; z < od; ++z)
      for (Index y = 0; y < oh; ++y)
        for (Index xo = 0; xo < ow; ++xo) {
          T total = 0;
          for (Index dz = 0; dz < 2; ++dz)
            for (Index dy = 0; dy < 2; ++dy)
              for (Index dx = 0; dx < 2; ++dx)
                total += v[((ch * d + 2 * z + dz) * h + 2 * y + dy) * w + 2 * xo + dx];
          out[static_cast<std::size_t>(((ch * od + z) * oh + y) * ow + xo)] = total / T{8};
        }
  auto nx = x.node();
  return Tensor<T>::make_result("downsample_trilinear", {c, od, oh, ow}, std::move(out), {x},
                                [nx, c, d, h, w](Node<T>& self) {
    T* g = nx->grad_buffer();
    const Index od = d / 2, oh = h / 2, ow = w / 2;
    for (Index ch = 0; ch < c; ++ch)
      for (Index z = 0; z < d; ++z)
        for (Index y = 0; y < h; ++y)
          for (Index xo = 0; xo < w; ++xo)
            g[((ch * d + z) * h + y) * w + xo] +=
                self.grad[static_cast<std::size_t>(((ch * od + z / 2) * oh + y / 2) * ow + xo / 2)] / T{8};
  });
}

template <typename T>
Tensor<T> upsample_trilinear(const Tensor<T>& x, int factor) {
  require_4d(x, "upsample_trilinear");
  if (factor < 1) throw ValueError("upsample factor must be positive");
  const Index c = x.extent(0), d = x.extent(1), h = x.extent(2), w = x.extent(3);
  const std::array<AxisTaps, 3> taps{upsample_taps(d, factor), upsample_taps(h, factor), upsample_taps(w, factor)};
  const Index od = d * factor, oh = h * factor, ow = w * factor;

  // Calls fn(out_index, in_index, weight) for each of the 8 corner taps.
  auto visit = [c, d, h, w, od, oh, ow](const std::array<AxisTaps, 3>& t, auto&& fn) {
    for (Index ch = 0; ch < c; ++ch)
      for (Index z = 0; z < od; ++z)
        for (Index y = 0; y < oh; ++y)
          for (Index xo = 0; xo < ow; ++xo) {
            const Index o = ((ch * od + z) * oh + y) * ow + xo;
            const double fz = t[0].frac[z], fy = t[1].frac[y], fx = t[2].frac[xo];
            const Index zs[2] = {t[0].lo[z], t[0].hi[z]};
            const Index ys[2] = {t[1].lo[y], t[1].hi[y]};
            const Index xs[2] = {t[2].lo[xo], t[2].hi[xo]};
            const double wz[2] = {1.0 - fz, fz};
            const double wy[2] = {1.0 - fy, fy};
            const double wx[2] = {1.0 - fx, fx};
            for (int a = 0; a < 2; ++a)
              for (int b = 0; b < 2; ++b)
                for (int e = 0; e < 2; ++e)
                  fn(o, ((ch * d + zs[a]) * h + ys[b]) * w + xs[e], wz[a] * wy[b] * wx[e]);
          }
  };

  std::vector<T> out(static_cast<std::size_t>(c * od * oh * ow), T{0});
  const T* v = x.ptr();
  visit(taps, [&](Index o, Index i, double wt) { out[static_cast<std::size_t>(o)] += static_cast<T>(wt) * v[i]; });
  auto nx = x.node();
  return Tensor<T>::make_result("upsample_trilinear", {c, od, oh, ow}, std::move(out), {x},
                                [nx, taps, visit](Node<T>& self) {
    T* g = nx->grad_buffer();
    visit(taps, [&](Index o, Index i, double wt) { g[i] += static_cast<T>(wt) * self.grad[static_cast<std::size_t>(o)]; });
  });
}

// ---------------------------------------------------------------------------
// ODConv

template <typename T>
ODConvParams<T> ODConvParams<T>::init(Index c_in, Index c_out, Index k, int stride, int padding,
                                      const ODConvSettings& settings, std::mt19937_64& rng) {
  if (settings.experts < 1) throw ValueError("ODConv needs at least one expert");
  if (settings.reduction < 1) throw ValueError("ODConv reduction ratio must be >= 1");
  if (!(settings.temperature > 0.0)) throw ValueError("ODConv temperature must be positive");
  const Index n = settings.experts;
  const Index red = std::max<Index>(1, c_in / settings.reduction);
  const Index taps = k * k * k;
  ODConvParams p;
  p.experts = he_normal<T>({n, c_out, c_in, k, k, k}, c_in * taps, rng);
  p.reduce_weight = he_normal<T>({red, c_in}, c_in, rng);
  p.reduce_bias = Tensor<T>::zeros({red});
  p.spatial_weight = he_normal<T>({taps, red}, red, rng);
  p.spatial_bias = Tensor<T>::zeros({taps});
  p.channel_weight = he_normal<T>({c_in, red}, red, rng);
  p.channel_bias = Tensor<T>::zeros({c_in});
  p.filter_weight = he_normal<T>({c_out, red}, red, rng);
  p.filter_bias = Tensor<T>::zeros({c_out});
  p.expert_weight = he_normal<T>({n, red}, red, rng);
  p.expert_bias = Tensor<T>::zeros({n});
  p.bias = Tensor<T>::zeros({c_out});
  p.temperature = settings.temperature;
  p.slope = settings.slope;
  p.stride = stride;
  p.padding = padding;
  return p;
}

template <typename T>
void ODConvParams<T>::collect(const std::string& prefix, NamedTensors<T>& out) const {
  out.emplace_back(prefix + ".experts", experts);
  out.emplace_back(prefix + ".reduce.weight", reduce_weight);
  out.emplace_back(prefix + ".reduce.bias", reduce_bias);
  out.emplace_back(prefix + ".spatial.weight", spatial_weight);
  out.emplace_back(prefix + ".spatial.bias", spatial_bias);
  out.emplace_back(prefix + ".channel.weight", channel_weight);
  out.emplace_back(prefix + ".channel.bias", channel_bias);
  out.emplace_back(prefix + ".filter.weight", filter_weight);
  out.emplace_back(prefix + ".filter.bias", filter_bias);
  out.emplace_back(prefix + ".expert.weight", expert_weight);
  out.emplace_back(prefix + ".expert.bias", expert_bias);
  out.emplace_back(prefix + ".bias", bias);
}

namespace {

// W z + b for a column vector z of shape [in, 1]; returns [out, 1].
template <typename T>
Tensor<T> linear(const Tensor<T>& weight, const Tensor<T>& bias, const Tensor<T>& z) {
  return add(matmul(weight, z), bias.reshape({bias.numel(), 1}));
}

}  // namespace

template <typename T>
ODConvAttentions<T> odconv_attentions(const Tensor<T>& x, const ODConvParams<T>& p) {
  require_4d(x, "odconv_attentions");
  if (x.extent(0) != p.in_channels())
    throw ShapeError("ODConv input has " + std::to_string(x.extent(0)) + " channels, expected " +
                     std::to_string(p.in_channels()));
  const Tensor<T> squeeze = global_average_pool(x).reshape({p.in_channels(), 1});
  const Tensor<T> z = leaky_relu(linear(p.reduce_weight, p.reduce_bias, squeeze), p.slope);
  const Index k = p.kernel();
  ODConvAttentions<T> a;
  a.spatial = sigmoid(linear(p.spatial_weight, p.spatial_bias, z)).reshape({k * k * k});
  a.in_channel = sigmoid(linear(p.channel_weight, p.channel_bias, z)).reshape({p.in_channels()});
  a.out_filter = sigmoid(linear(p.filter_weight, p.filter_bias, z)).reshape({p.out_channels()});
  a.expert = softmax(linear(p.expert_weight, p.expert_bias, z), 0, p.temperature).reshape({p.num_experts()});
  return a;
}

template <typename T>
Tensor<T> odconv_effective_kernel(const Tensor<T>& experts, const ODConvAttentions<T>& a) {
  if (experts.rank() != 6) throw ShapeError("expert bank must be [n, c_out, c_in, k, k, k]");
  const Index n = experts.extent(0), co = experts.extent(1), ci = experts.extent(2);
  const Index s = experts.extent(3) * experts.extent(4) * experts.extent(5);
  if (a.expert.numel() != n || a.out_filter.numel() != co || a.in_channel.numel() != ci || a.spatial.numel() != s)
    throw ShapeError("attention lengths do not match the expert bank");

  const T* e = experts.ptr();
  const T* aw = a.expert.ptr();
  const T* af = a.out_filter.ptr();
  const T* ac = a.in_channel.ptr();
  const T* as = a.spatial.ptr();
  const Index kernel = co * ci * s;
  std::vector<T> out(static_cast<std::size_t>(kernel), T{0});
  for (Index ex = 0; ex < n; ++ex)
    for (Index o = 0; o < co; ++o)
      for (Index i = 0; i < ci; ++i) {
        const T scale = aw[ex] * af[o] * ac[i];
        const T* src = e + ((ex * co + o) * ci + i) * s;
        T* dst = out.data() + (o * ci + i) * s;
        for (Index t = 0; t < s; ++t) dst[t] += scale * as[t] * src[t];
      }

  auto ne = experts.node();
  auto nw = a.expert.node();
  auto nf = a.out_filter.node();
  auto nc = a.in_channel.node();
  auto ns = a.spatial.node();
  Shape shape(experts.shape().begin() + 1, experts.shape().end());
  return Tensor<T>::make_result("odconv_effective_kernel", shape, std::move(out),
                                {experts, a.expert, a.out_filter, a.in_channel, a.spatial},
                                [ne, nw, nf, nc, ns, n, co, ci, s](Node<T>& self) {
    const T* g = self.grad.data();
    const T* e = ne->data.data();
    const T* aw = nw->data.data();
    const T* af = nf->data.data();
    const T* ac = nc->data.data();
    const T* as = ns->data.data();
    T* ge = ne->requires_grad ? ne->grad_buffer() : nullptr;
    T* gw = nw->requires_grad ? nw->grad_buffer() : nullptr;
    T* gf = nf->requires_grad ? nf->grad_buffer() : nullptr;
    T* gc = nc->requires_grad ? nc->grad_buffer() : nullptr;
    T* gs = ns->requires_grad ? ns->grad_buffer() : nullptr;
    for (Index ex = 0; ex < n; ++ex)
      for (Index o = 0; o < co; ++o)
        for (Index i = 0; i < ci; ++i) {
          const T* src = e + ((ex * co + o) * ci + i) * s;
          const T* gk = g + (o * ci + i) * s;
          // r = sum_t G * E * alpha_s
          T r = 0;
          for (Index t = 0; t < s; ++t) r += gk[t] * src[t] * as[t];
          const T outer = aw[ex] * af[o] * ac[i];
          if (ge) {
            T* dst = ge + ((ex * co + o) * ci + i) * s;
            for (Index t = 0; t < s; ++t) dst[t] += gk[t] * outer * as[t];
          }
          if (gs)
            for (Index t = 0; t < s; ++t) gs[t] += gk[t] * outer * src[t];
          if (gw) gw[ex] += r * af[o] * ac[i];
          if (gf) gf[o] += r * aw[ex] * ac[i];
          if (gc) gc[i] += r * aw[ex] * af[o];
        }
  });
}

template <typename T>
Tensor<T> odconv3d_forward_with(const Tensor<T>& x, const ODConvParams<T>& p, const ODConvAttentions<T>& a) {
  const Tensor<T> kernel = odconv_effective_kernel(p.experts, a);
  return conv3d(x, kernel, &p.bias, p.stride, p.padding);
}

template <typename T>
Tensor<T> odconv3d_forward(const Tensor<T>& x, const ODConvParams<T>& p) {
  return odconv3d_forward_with(x, p, odconv_attentions(x, p));
}

// ---------------------------------------------------------------------------
// Cross-attention

template <typename T>
double CrossAttentionParams<T>::scale() const {
  return 1.0 / std::sqrt(static_cast<double>(model_dim()));
}

template <typename T>
CrossAttentionParams<T> CrossAttentionParams<T>::init(Index features, Index model_dim, std::mt19937_64& rng) {
  if (features < 1 || model_dim < 1) throw ValueError("cross-attention dimensions must be positive");
  auto xavier = [&rng](Index rows, Index cols) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(rows + cols)));
    std::vector<T> data(static_cast<std::size_t>(rows * cols));
    for (auto& v : data) v = static_cast<T>(dist(rng));
    return Tensor<T>::from_data({rows, cols}, std::move(data));
  };
  CrossAttentionParams p;
  p.query = xavier(model_dim, features);
  p.key = xavier(model_dim, features);
  p.value = xavier(model_dim, features);
  p.output = xavier(features, model_dim);
  return p;
}

template <typename T>
void CrossAttentionParams<T>::collect(const std::string& prefix, NamedTensors<T>& out) const {
  out.emplace_back(prefix + ".query", query);
  out.emplace_back(prefix + ".key", key);
  out.emplace_back(prefix + ".value", value);
  out.emplace_back(prefix + ".output", output);
}

namespace {

template <typename T>
void check_attention_inputs(const Tensor<T>& q, const Tensor<T>& kv, const CrossAttentionParams<T>& p) {
  require_4d(q, "cross_attention");
  if (q.shape() != kv.shape())
    throw ShapeError("cross-attention inputs differ: " + shape_str(q.shape()) + " vs " + shape_str(kv.shape()));
  if (q.extent(0) != p.feature_dim())
    throw ShapeError("cross-attention expects " + std::to_string(p.feature_dim()) + " channels");
}

// Tokens as columns: [c, N] -> projected [d_model, N].
template <typename T>
Tensor<T> tokens(const Tensor<T>& feat) {
  return feat.reshape({feat.extent(0), feat.numel() / feat.extent(0)});
}

template <typename T>
Tensor<T> attention_matrix(const Tensor<T>& q_feat, const Tensor<T>& kv_feat, const CrossAttentionParams<T>& p) {
  const Tensor<T> q = matmul(p.query, tokens(q_feat));   // [dm, N]
  const Tensor<T> k = matmul(p.key, tokens(kv_feat));    // [dm, N]
  const Tensor<T> scores = scale(matmul(transpose2d(q), k), p.scale());  // [N, N]
  return softmax(scores, 1, 1.0);
}

}  // namespace

template <typename T>
Tensor<T> cross_attention_weights(const Tensor<T>& q_feat, const Tensor<T>& kv_feat, const CrossAttentionParams<T>& p) {
  check_attention_inputs(q_feat, kv_feat, p);
  return attention_matrix(q_feat, kv_feat, p);
}

template <typename T>
Tensor<T> cross_attention_update(const Tensor<T>& q_feat, const Tensor<T>& kv_feat, const CrossAttentionParams<T>& p) {
  check_attention_inputs(q_feat, kv_feat, p);
  const Tensor<T> attn = attention_matrix(q_feat, kv_feat, p);  // [N, N]
  const Tensor<T> v = matmul(p.value, tokens(kv_feat));          // [dm, N]
  const Tensor<T> mixed = matmul(v, transpose2d(attn));          // [dm, N]
  return matmul(p.output, mixed).reshape(q_feat.shape());
}

template <typename T>
Tensor<T> cross_attention_fuse(const Tensor<T>& q_feat, const Tensor<T>& kv_feat, const CrossAttentionParams<T>& p) {
  return add(q_feat, cross_attention_update(q_feat, kv_feat, p));
}

#define ODSEG_INSTANTIATE_LAYERS(T)                                                                               \
  template Tensor<T> instance_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double);                 \
  template Tensor<T> downsample_trilinear(const Tensor<T>&, int);                                                 \
  template Tensor<T> upsample_trilinear(const Tensor<T>&, int);                                                   \
  template struct ODConvParams<T>;                                                                                \
  template ODConvAttentions<T> odconv_attentions(const Tensor<T>&, const ODConvParams<T>&);                       \
  template Tensor<T> odconv_effective_kernel(const Tensor<T>&, const ODConvAttentions<T>&);                       \
  template Tensor<T> odconv3d_forward(const Tensor<T>&, const ODConvParams<T>&);                                  \
  template Tensor<T> odconv3d_forward_with(const Tensor<T>&, const ODConvParams<T>&, const ODConvAttentions<T>&); \
  template struct CrossAttentionParams<T>;                                                                        \
  template Tensor<T> cross_attention_weights(const Tensor<T>&, const Tensor<T>&, const CrossAttentionParams<T>&); \
  template Tensor<T> cross_attention_update(const Tensor<T>&, const Tensor<T>&, const CrossAttentionParams<T>&);  \
  template Tensor<T> cross_attention_fuse(const Tensor<T>&, const Tensor<T>&, const CrossAttentionParams<T>&);

ODSEG_INSTANTIATE_LAYERS(float)
ODSEG_INSTANTIATE_LAYERS(double)

}  // namespace odseg
