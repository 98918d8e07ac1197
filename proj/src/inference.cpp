#include <algorithm>
#include <cmath>

#include "odseg/network.hpp"

namespace odseg {

std::vector<double> gaussian_importance(const Grid& patch) {
  std::array<std::vector<double>, 3> axis;
  for (int a = 0; a < 3; ++a) {
    const double sigma = static_cast<double>(patch[a]) / 8.0;
    const double centre = (static_cast<double>(patch[a]) - 1.0) / 2.0;
    for (Index i = 0; i < patch[a]; ++i) {
      const double d = static_cast<double>(i) - centre;
      axis[a].push_back(std::exp(-d * d / (2.0 * sigma * sigma)));
    }
  }
  std::vector<double> w(static_cast<std::size_t>(grid_voxels(patch)));
  double peak = 0.0;
  std::size_t k = 0;
  for (Index z = 0; z < patch[0]; ++z)
    for (Index y = 0; y < patch[1]; ++y)
      for (Index x = 0; x < patch[2]; ++x, ++k) {
        w[k] = axis[0][z] * axis[1][y] * axis[2][x];
        peak = std::max(peak, w[k]);
      }
  for (auto& v : w) v /= peak;
  return w;
}

std::vector<Index> tile_starts(Index extent, Index patch) {
  if (patch > extent) throw ShapeError("patch larger than the padded volume");
  const Index span = extent - patch;
  if (span == 0) return {0};
  const Index step = std::max<Index>(1, (patch + 1) / 2);
  const Index tiles = (span + step - 1) / step + 1;
  std::vector<Index> out;
  for (Index i = 0; i < tiles; ++i)
    out.push_back(static_cast<Index>(
        std::llround(static_cast<double>(span) * static_cast<double>(i) / static_cast<double>(tiles - 1))));
  return out;
}

template <typename T>
Volume sliding_window_predict(const Network<T>& net, const Volume& volume) {
  const NetworkConfig& cfg = net.config();
  if (volume.channels != cfg.in_channels)
    throw ChannelMismatchError("volume has " + std::to_string(volume.channels) + " channels, network expects " +
                               std::to_string(cfg.in_channels));
  volume.validate();
  const Grid& patch = cfg.patch_size;
  const Grid orig = volume.extents;
  Grid ext{};
  for (int a = 0; a < 3; ++a) ext[a] = std::max(orig[a], patch[a]);
  const Index C = cfg.in_channels;
  const Index K = cfg.num_classes;
  const Index nvox = grid_voxels(ext);

  // Zero-padded copy at the far end of each axis.
  std::vector<float> padded(static_cast<std::size_t>(C * nvox), 0.0f);
  for (Index c = 0; c < C; ++c)
    for (Index z = 0; z < orig[0]; ++z)
      for (Index y = 0; y < orig[1]; ++y) {
        const float* src = volume.channel(c) + (z * orig[1] + y) * orig[2];
        std::copy(src, src + orig[2], padded.begin() + ((c * ext[0] + z) * ext[1] + y) * ext[2]);
      }

  const auto starts_z = tile_starts(ext[0], patch[0]);
  const auto starts_y = tile_starts(ext[1], patch[1]);
  const auto starts_x = tile_starts(ext[2], patch[2]);
  const bool single_tile = starts_z.size() == 1 && starts_y.size() == 1 && starts_x.size() == 1;
  Tensor<T> probs;
  const auto weights = gaussian_importance(patch);
  std::vector<double> acc(static_cast<std::size_t>(K * nvox), 0.0);
  std::vector<double> wsum(static_cast<std::size_t>(nvox), 0.0);
  const Index pvox = grid_voxels(patch);
  NoGradGuard no_grad;
  for (Index z0 : starts_z)
    for (Index y0 : starts_y)
      for (Index x0 : starts_x) {
        std::vector<T> tile(static_cast<std::size_t>(C * pvox));
        for (Index c = 0; c < C; ++c)
          for (Index z = 0; z < patch[0]; ++z)
            for (Index y = 0; y < patch[1]; ++y) {
              const float* src = padded.data() + ((c * ext[0] + z0 + z) * ext[1] + y0 + y) * ext[2] + x0;
              T* dst = tile.data() + ((c * patch[0] + z) * patch[1] + y) * patch[2];
              for (Index x = 0; x < patch[2]; ++x) dst[x] = static_cast<T>(src[x]);
            }
        const auto logits = net.forward(Tensor<T>::from_data({C, patch[0], patch[1], patch[2]}, std::move(tile)));
        // One tile covers everything: blending is the identity.
        if (single_tile) {
          probs = softmax(logits, 0);
          continue;
        }
        const T* lv = logits.ptr();
        for (Index z = 0; z < patch[0]; ++z)
          for (Index y = 0; y < patch[1]; ++y)
            for (Index x = 0; x < patch[2]; ++x) {
              const Index p = (z * patch[1] + y) * patch[2] + x;
              const Index v = ((z0 + z) * ext[1] + y0 + y) * ext[2] + x0 + x;
              const double w = weights[static_cast<std::size_t>(p)];
              wsum[static_cast<std::size_t>(v)] += w;
              for (Index k = 0; k < K; ++k)
                acc[static_cast<std::size_t>(k * nvox + v)] += w * static_cast<double>(lv[k * pvox + p]);
            }
      }

  if (!single_tile) {
    std::vector<T> blended(acc.size());
    for (Index k = 0; k < K; ++k)
      for (Index v = 0; v < nvox; ++v)
        blended[static_cast<std::size_t>(k * nvox + v)] =
            static_cast<T>(acc[static_cast<std::size_t>(k * nvox + v)] / wsum[static_cast<std::size_t>(v)]);
    probs = softmax(Tensor<T>::from_data({K, ext[0], ext[1], ext[2]}, std::move(blended)), 0);
  }

  Volume out = Volume::zeros(K, orig, volume.spacing);
  const T* pv = probs.ptr();
  for (Index k = 0; k < K; ++k)
    for (Index z = 0; z < orig[0]; ++z)
      for (Index y = 0; y < orig[1]; ++y)
        for (Index x = 0; x < orig[2]; ++x)
          out.at(k, z, y, x) = static_cast<float>(pv[((k * ext[0] + z) * ext[1] + y) * ext[2] + x]);
  return out;
}

LabelMask logits_to_mask(const Volume& probabilities) {
  if (probabilities.channels < 1) throw ShapeError("probability volume has no channels");
  LabelMask m = LabelMask::zeros(probabilities.extents, probabilities.spacing);
  const Index n = probabilities.voxels();
  for (Index v = 0; v < n; ++v) {
    std::uint8_t best = 0;
    float best_p = probabilities.values[static_cast<std::size_t>(v)];
    for (Index k = 1; k < probabilities.channels; ++k) {
      const float p = probabilities.values[static_cast<std::size_t>(k * n + v)];
      if (p > best_p) {
        best_p = p;
        best = static_cast<std::uint8_t>(k);
      }
    }
    m.labels[static_cast<std::size_t>(v)] = best;
  }
  return m;
}

template Volume sliding_window_predict(const Network<float>&, const Volume&);
template Volume sliding_window_predict(const Network<double>&, const Volume&);

}  // namespace odseg
