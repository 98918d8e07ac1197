#include "odseg/postprocess.hpp"

#include <algorithm>
#include <cmath>

namespace odseg {

namespace {

/// Running min (erode) or max (dilate) over a window of +-r along one axis,
/// clipped at the grid edge.
void sweep(std::vector<std::uint8_t>& bits, const Grid& e, int axis, Index r, bool take_max) {
  const Index stride[3] = {e[1] * e[2], e[2], 1};
  const Index n = e[axis];
  const int a1 = (axis + 1) % 3, a2 = (axis + 2) % 3;
  std::vector<std::uint8_t> line(static_cast<std::size_t>(n));
  for (Index i = 0; i < e[a1]; ++i)
    for (Index j = 0; j < e[a2]; ++j) {
      const Index base = i * stride[a1] + j * stride[a2];
      for (Index t = 0; t < n; ++t) line[t] = bits[static_cast<std::size_t>(base + t * stride[axis])];
      for (Index t = 0; t < n; ++t) {
        std::uint8_t v = take_max ? 0 : 1;
        for (Index o = std::max<Index>(0, t - r); o <= std::min(n - 1, t + r); ++o)
          v = take_max ? std::max(v, line[o]) : std::min(v, line[o]);
        bits[static_cast<std::size_t>(base + t * stride[axis])] = v;
      }
    }
}

BinaryMask erode_or_dilate(const BinaryMask& m, int radius, bool dilate) {
  BinaryMask out = m;
  for (int axis = 0; axis < 3; ++axis) sweep(out.bits, m.extents, axis, radius, dilate);
  return out;
}

BinaryMask label_mask(const LabelMask& m, std::uint8_t label) {
  BinaryMask out = BinaryMask::zeros(m.extents);
  for (std::size_t i = 0; i < m.labels.size(); ++i) out.bits[i] = m.labels[i] == label;
  return out;
}

}  // namespace

void PostprocessConfig::validate() const {
  if (thresholds)
    for (double t : *thresholds)
      if (!(t > 0.0 && t < 1.0)) throw ConfigError("postprocess thresholds must lie in (0, 1)");
  if (min_component_size < 0) throw ConfigError("postprocess.min_component_size must be >= 0");
  if (morph_radius < 0) throw ConfigError("postprocess.morph_radius must be >= 0");
  if (connectivity != 6 && connectivity != 18 && connectivity != 26)
    throw ConfigError("postprocess.connectivity must be 6, 18 or 26");
}

LabelMask threshold_probs(const Volume& probs, const PostprocessConfig& cfg) {
  cfg.validate();
  if (probs.channels != kNumClasses)
    throw ChannelMismatchError("probability volume has " + std::to_string(probs.channels) + " channels, expected " +
                               std::to_string(kNumClasses));
  LabelMask out = LabelMask::zeros(probs.extents, probs.spacing);
  const Index n = probs.voxels();
  for (Index i = 0; i < n; ++i) {
    double sum = 0;
    int best = 0;
    float best_p = probs.channel(0)[i];
    for (int c = 0; c < kNumClasses; ++c) {
      const float p = probs.channel(c)[i];
      if (!(p >= 0.0f && p <= 1.0f)) throw ValueError("probability outside [0, 1] at voxel " + std::to_string(i));
      sum += p;
      if (p > best_p) best_p = p, best = c;
    }
    if (std::abs(sum - 1.0) > 1e-5)
      throw ValueError("probabilities at voxel " + std::to_string(i) + " sum to " + std::to_string(sum));
    if (cfg.thresholds && best > 0 && best_p < (*cfg.thresholds)[static_cast<std::size_t>(best - 1)]) best = 0;
    out.labels[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(best);
  }
  return out;
}

BinaryMask morph(const BinaryMask& m, MorphOp op, int radius) {
  if (radius < 0) throw ValueError("morphology radius must be >= 0");
  if (radius == 0) return m;
  switch (op) {
    case MorphOp::Erode: return erode_or_dilate(m, radius, false);
    case MorphOp::Dilate: return erode_or_dilate(m, radius, true);
    case MorphOp::Open: return erode_or_dilate(erode_or_dilate(m, radius, false), radius, true);
    case MorphOp::Close: return erode_or_dilate(erode_or_dilate(m, radius, true), radius, false);
  }
  return m;
}

LabelMask remove_small_components(const LabelMask& m, Index min_size, bool per_region, int connectivity) {
  if (min_size < 0) throw ValueError("min component size must be >= 0");
  LabelMask out = m;
  if (min_size == 0) return out;
  const auto drop_small = [&](const BinaryMask& region) {
    const auto comps = connected_components(region, connectivity);
    for (std::size_t i = 0; i < out.labels.size(); ++i) {
      const auto id = comps.labels[i];
      if (id && comps.sizes[static_cast<std::size_t>(id - 1)] < min_size) out.labels[i] = kBackground;
    }
  };
  if (per_region) {
    for (std::uint8_t l : {kNecrosis, kEdema, kEnhancing}) drop_small(label_mask(m, l));
  } else {
    BinaryMask wt = BinaryMask::zeros(m.extents);
    for (std::size_t i = 0; i < m.labels.size(); ++i) wt.bits[i] = m.labels[i] != kBackground;
    drop_small(wt);
  }
  return out;
}

LabelMask postprocess_mask(const LabelMask& m, const PostprocessConfig& cfg) {
  cfg.validate();
  LabelMask cur = m;
  if ((cfg.open || cfg.close) && cfg.morph_radius > 0) {
    LabelMask next = LabelMask::zeros(m.extents, m.spacing);
    for (std::uint8_t l : {kEdema, kNecrosis, kEnhancing}) {
      BinaryMask b = label_mask(cur, l);
      if (cfg.open) b = morph(b, MorphOp::Open, cfg.morph_radius);
      if (cfg.close) b = morph(b, MorphOp::Close, cfg.morph_radius);
      for (std::size_t i = 0; i < b.bits.size(); ++i)
        if (b.bits[i]) next.labels[i] = l;
    }
    cur = std::move(next);
  }
  return remove_small_components(cur, cfg.min_component_size, cfg.per_region, cfg.connectivity);
}

LabelMask merge_label(const LabelMask& a, const LabelMask& b, std::uint8_t label, MergeMode mode) {
  require_same_extents(a.extents, b.extents, "merge_label");
  if (label == kBackground || label >= kNumClasses) throw ValueError("merge label must be 1, 2 or 3");
  LabelMask out = a;
  for (std::size_t i = 0; i < out.labels.size(); ++i) {
    if (b.labels[i] == label) out.labels[i] = label;
    else if (mode == MergeMode::Replace && a.labels[i] == label) out.labels[i] = kBackground;
  }
  return out;
}

std::map<std::string, Selection> best_of(const std::map<std::string, double>& a, const std::map<std::string, double>& b) {
  if (a.size() != b.size()) throw ValueError("best_of: score records have different regions");
  std::map<std::string, Selection> out;
  for (const auto& [key, va] : a) {
    const auto it = b.find(key);
    if (it == b.end()) throw ValueError("best_of: region '" + key + "' missing from b");
    const double vb = it->second;
    Selection s;
    s.tie = va == vb;
    s.source = vb > va ? "b" : "a";
    s.value = vb > va ? vb : va;
    out[key] = s;
  }
  return out;
}

std::map<std::string, Selection> best_of(const MetricsReport& a, const MetricsReport& b, Metric metric) {
  std::map<std::string, double> sa, sb;
  const double sign = metric == Metric::Hd95 ? -1.0 : 1.0;
  for (Region r : kRegions) {
    const auto pick = [&](const RegionScore& s) {
      return metric == Metric::Dice ? s.dice : metric == Metric::LesionDice ? s.lesion_dice : s.hd95;
    };
    sa[region_name(r)] = sign * pick(a.mean[static_cast<std::size_t>(r)]);
    sb[region_name(r)] = sign * pick(b.mean[static_cast<std::size_t>(r)]);
  }
  auto out = best_of(sa, sb);
  for (auto& [k, s] : out) s.value *= sign;
  return out;
}

}  // namespace odseg
