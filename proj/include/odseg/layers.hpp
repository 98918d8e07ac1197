#pragma once

// Neural building blocks over single-sample feature maps laid out as
// [channels, depth, height, width].

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "odseg/tensor.hpp"

namespace odseg {

template <typename T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>>>;

/// Normal(0, sqrt(2 / fan_in)) initialisation.
template <typename T>
Tensor<T> he_normal(const Shape& shape, Index fan_in, std::mt19937_64& rng);

// ---------------------------------------------------------------------------
// Static convolution

template <typename T>
struct Conv3DParams {
  Tensor<T> weight;  // [c_out, c_in, k, k, k]
  Tensor<T> bias;    // [c_out]
  int stride = 1;
  int padding = 0;

  Index out_channels() const { return weight.extent(0); }
  Index in_channels() const { return weight.extent(1); }
  Index kernel() const { return weight.extent(2); }

  /// He-initialised weights, zero bias.
  static Conv3DParams init(Index c_in, Index c_out, Index k, int stride, int padding, std::mt19937_64& rng);
  void collect(const std::string& prefix, NamedTensors<T>& out) const;
};

/// Output extent of a convolution along one axis; throws when not positive.
Index conv_output_extent(Index in, Index k, Index stride, Index padding);

/// Reference convolution: seven nested loops accumulated in double. No
/// differentiation record.
template <typename T>
Tensor<T> conv3d_naive(const Tensor<T>& x, const Conv3DParams<T>& p);

/// Lowered (im2col + GEMM) convolution, differentiable in x, weight and bias.
template <typename T>
Tensor<T> conv3d_direct(const Tensor<T>& x, const Conv3DParams<T>& p);

/// Convolution with an arbitrary (possibly computed) weight tensor. `bias` may
/// be null.
template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias, int stride, int padding);

/// Adjoint of conv3d with the same weight: maps [c_out, d', h', w'] back to
/// [c_in, (d'-1)*stride - 2*padding + k, ...]. `bias` (length c_in) may be null.
template <typename T>
Tensor<T> transposed_conv3d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias, int stride,
                            int padding);
/// Here p.bias has length p.weight.extent(1) (the transposed output channels).
template <typename T>
Tensor<T> transposed_conv3d(const Tensor<T>& x, const Conv3DParams<T>& p);

// ---------------------------------------------------------------------------
// Normalisation and resampling

template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps = 1e-5);

/// Mean of every 2x2x2 block (trilinear reduction at factor 2).
template <typename T>
Tensor<T> downsample_trilinear(const Tensor<T>& x, int factor = 2);

/// Trilinear upsampling by 2 with half-pixel centres and edge clamping.
template <typename T>
Tensor<T> upsample_trilinear(const Tensor<T>& x, int factor = 2);

// ---------------------------------------------------------------------------
// Omni-dimensional dynamic convolution

struct ODConvSettings {
  int experts = 4;
  int reduction = 4;
  double temperature = 30.0;
  double slope = 0.01;  // leaky-ReLU in the squeeze branch
};

template <typename T>
struct ODConvParams {
  Tensor<T> experts;  // [n, c_out, c_in, k, k, k]
  Tensor<T> reduce_weight, reduce_bias;    // [c_red, c_in], [c_red]
  Tensor<T> spatial_weight, spatial_bias;  // [k^3, c_red], [k^3]
  Tensor<T> channel_weight, channel_bias;  // [c_in, c_red], [c_in]
  Tensor<T> filter_weight, filter_bias;    // [c_out, c_red], [c_out]
  Tensor<T> expert_weight, expert_bias;    // [n, c_red], [n]
  Tensor<T> bias;                          // [c_out]
  double temperature = 30.0;
  double slope = 0.01;
  int stride = 1;
  int padding = 0;

  Index num_experts() const { return experts.extent(0); }
  Index out_channels() const { return experts.extent(1); }
  Index in_channels() const { return experts.extent(2); }
  Index kernel() const { return experts.extent(3); }
  Index reduced_channels() const { return reduce_weight.extent(0); }

  static ODConvParams init(Index c_in, Index c_out, Index k, int stride, int padding,
                           const ODConvSettings& settings, std::mt19937_64& rng);
  void collect(const std::string& prefix, NamedTensors<T>& out) const;
};

template <typename T>
struct ODConvAttentions {
  Tensor<T> spatial;     // [k^3]
  Tensor<T> in_channel;  // [c_in]
  Tensor<T> out_filter;  // [c_out]
  Tensor<T> expert;      // [n]
};

/// The four kernel-space attentions, all computed in parallel from one
/// squeezed descriptor of x.
template <typename T>
ODConvAttentions<T> odconv_attentions(const Tensor<T>& x, const ODConvParams<T>& p);

/// W_eff[o,i,s] = sum_e expert[e] * out_filter[o] * in_channel[i] * spatial[s] * experts[e,o,i,s].
template <typename T>
Tensor<T> odconv_effective_kernel(const Tensor<T>& experts, const ODConvAttentions<T>& a);

template <typename T>
Tensor<T> odconv3d_forward(const Tensor<T>& x, const ODConvParams<T>& p);

/// Test hook: convolution with caller-supplied attentions, bypassing the
/// attention branches.
template <typename T>
Tensor<T> odconv3d_forward_with(const Tensor<T>& x, const ODConvParams<T>& p, const ODConvAttentions<T>& a);

// ---------------------------------------------------------------------------
// Cross-attention fusion

template <typename T>
struct CrossAttentionParams {
  Tensor<T> query;   // [d_model, c]
  Tensor<T> key;     // [d_model, c]
  Tensor<T> value;   // [d_model, c]
  Tensor<T> output;  // [c, d_model]

  Index model_dim() const { return query.extent(0); }
  Index feature_dim() const { return query.extent(1); }
  double scale() const;

  static CrossAttentionParams init(Index features, Index model_dim, std::mt19937_64& rng);
  void collect(const std::string& prefix, NamedTensors<T>& out) const;
};

/// Row-stochastic attention matrix [tokens_q, tokens_kv].
template <typename T>
Tensor<T> cross_attention_weights(const Tensor<T>& q_feat, const Tensor<T>& kv_feat, const CrossAttentionParams<T>& p);

/// Attention update alone, without the residual: [c,d,h,w].
template <typename T>
Tensor<T> cross_attention_update(const Tensor<T>& q_feat, const Tensor<T>& kv_feat, const CrossAttentionParams<T>& p);

/// q_feat + cross_attention_update(q_feat, kv_feat, p).
template <typename T>
Tensor<T> cross_attention_fuse(const Tensor<T>& q_feat, const Tensor<T>& kv_feat, const CrossAttentionParams<T>& p);

}  // namespace odseg
