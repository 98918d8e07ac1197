#include "odseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numbers>

#include "binary_io.hpp"

namespace odseg {

namespace {

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<Vec3, 3>;

void check_range(const std::array<double, 2>& r, double lo, double hi, const char* key) {
  if (!(r[0] >= lo && r[0] <= r[1] && r[1] <= hi))
    throw ConfigError(std::string(key) + " must satisfy " + std::to_string(lo) + " <= low <= high <= " +
                      std::to_string(hi));
}

void check_probability(double p, const char* key) {
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(std::string(key) + " must lie in [0, 1]");
}

Mat3 rotation(double a, double b, double c) {
  const double ca = std::cos(a), sa = std::sin(a), cb = std::cos(b), sb = std::sin(b), cc = std::cos(c),
               sc = std::sin(c);
  // Rz(a) * Ry(b) * Rx(c)
  return Mat3{Vec3{ca * cb, ca * sb * sc - sa * cc, ca * sb * cc + sa * sc},
              Vec3{sa * cb, sa * sb * sc + ca * cc, sa * sb * cc - ca * sc}, Vec3{-sb, cb * sc, cb * cc}};
}

struct Tumor {
  Vec3 centre;
  Vec3 radii;  // edema
  double core = 0;
  double necrosis = 0;  // relative to the core
  Mat3 rot;

  double max_radius() const { return std::max({radii[0], radii[1], radii[2]}); }

  /// Squared normalised radius of p in the edema ellipsoid frame.
  double level(const Vec3& p) const {
    const Vec3 d{p[0] - centre[0], p[1] - centre[1], p[2] - centre[2]};
    double s = 0;
    for (int k = 0; k < 3; ++k) {
      // Local coordinate: column k of rot dotted with d.
      const double q = rot[0][k] * d[0] + rot[1][k] * d[1] + rot[2][k] * d[2];
      s += (q / radii[k]) * (q / radii[k]);
    }
    return s;
  }
};

double ellipsoid_level(const Vec3& p, const Vec3& c, const Vec3& r) {
  double s = 0;
  for (int k = 0; k < 3; ++k) s += ((p[k] - c[k]) / r[k]) * ((p[k] - c[k]) / r[k]);
  return s;
}

Index clamp_index(Index i, Index n) { return std::clamp<Index>(i, 0, n - 1); }

std::string grid_str(const Grid& g) {
  return std::to_string(g[0]) + "x" + std::to_string(g[1]) + "x" + std::to_string(g[2]);
}

Volume crop(const Volume& v, const Grid& origin, const Grid& size) {
  Volume out = Volume::zeros(v.channels, size, v.spacing);
  for (Index c = 0; c < v.channels; ++c)
    for (Index z = 0; z < size[0]; ++z)
      for (Index y = 0; y < size[1]; ++y)
        std::memcpy(&out.at(c, z, y, 0),
                    v.channel(c) + ((origin[0] + z) * v.extents[1] + origin[1] + y) * v.extents[2] + origin[2],
                    static_cast<std::size_t>(size[2]) * sizeof(float));
  return out;
}

LabelMask crop(const LabelMask& m, const Grid& origin, const Grid& size) {
  LabelMask out = LabelMask::zeros(size, m.spacing);
  for (Index z = 0; z < size[0]; ++z)
    for (Index y = 0; y < size[1]; ++y)
      std::memcpy(&out.at(z, y, 0),
                  m.labels.data() + ((origin[0] + z) * m.extents[1] + origin[1] + y) * m.extents[2] + origin[2],
                  static_cast<std::size_t>(size[2]));
  return out;
}

/// Separable Gaussian, edge-clamped, radius ceil(3 sigma).
void gaussian_blur(float* data, const Grid& e, double sigma) {
  const Index radius = std::max<Index>(1, static_cast<Index>(std::ceil(3.0 * sigma)));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double total = 0;
  for (Index i = -radius; i <= radius; ++i) total += k[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
  for (auto& w : k) w /= total;

  const Index stride[3] = {e[1] * e[2], e[2], 1};
  std::vector<double> line;
  for (int axis = 0; axis < 3; ++axis) {
    const Index n = e[axis];
    line.resize(static_cast<std::size_t>(n));
    const int a1 = (axis + 1) % 3, a2 = (axis + 2) % 3;
    for (Index i = 0; i < e[a1]; ++i)
      for (Index j = 0; j < e[a2]; ++j) {
        float* base = data + i * stride[a1] + j * stride[a2];
        for (Index t = 0; t < n; ++t) line[t] = base[t * stride[axis]];
        for (Index t = 0; t < n; ++t) {
          double acc = 0;
          for (Index o = -radius; o <= radius; ++o) acc += k[o + radius] * line[clamp_index(t + o, n)];
          base[t * stride[axis]] = static_cast<float>(acc);
        }
      }
  }
}

constexpr char kMagic[4] = {'O', 'D', 'S', 'V'};
constexpr std::uint8_t kDtypeF32 = 0;
constexpr std::uint8_t kDtypeU8 = 1;

void write_header(io::Writer& w, std::uint8_t dtype, const std::vector<Index>& extents, const Spacing& spacing) {
  w.bytes(kMagic, 4);
  w.u32(kVolumeFormatVersion);
  w.u8(dtype);
  w.u8(static_cast<std::uint8_t>(extents.size()));
  for (Index e : extents) w.u32(static_cast<std::uint32_t>(e));
  for (float s : spacing) w.f32(s);
}

struct Header {
  std::vector<Index> extents;
  Spacing spacing{};
};

Header read_header(io::Reader& r, const std::string& path, std::uint8_t want_dtype, std::uint8_t want_ndim,
                   std::size_t elem_bytes) {
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("volume " + path + ": bad magic bytes");
  const std::uint32_t version = r.u32();
  if (version != kVolumeFormatVersion)
    throw FormatError("volume " + path + ": unsupported version " + std::to_string(version));
  const std::uint8_t dtype = r.u8();
  if (dtype != kDtypeF32 && dtype != kDtypeU8)
    throw FormatError("volume " + path + ": unknown dtype " + std::to_string(dtype));
  if (dtype != want_dtype)
    throw FormatError("volume " + path + ": dtype mismatch, file holds " +
                      (dtype == kDtypeF32 ? "f32 intensities" : "u8 labels"));
  const std::uint8_t ndim = r.u8();
  if (ndim != want_ndim)
    throw FormatError("volume " + path + ": expected " + std::to_string(want_ndim) + " dimensions, file has " +
                      std::to_string(ndim));
  Header h;
  for (std::uint8_t a = 0; a < ndim; ++a) {
    const std::uint32_t e = r.u32();
    if (e == 0) throw FormatError("volume " + path + ": zero extent");
    h.extents.push_back(e);
  }
  for (auto& s : h.spacing) {
    s = r.f32();
    if (!(s > 0.0f) || !std::isfinite(s)) throw FormatError("volume " + path + ": spacing must be positive");
  }
  // Exact payload length; the product is bounded before it can overflow.
  std::size_t n = elem_bytes;
  for (Index e : h.extents) {
    if (static_cast<std::size_t>(e) > r.remaining() / n)
      throw FormatError("volume " + path + ": payload shorter than the header declares");
    n *= static_cast<std::size_t>(e);
  }
  if (n != r.remaining())
    throw FormatError("volume " + path + ": payload is " + std::to_string(r.remaining()) + " bytes, header declares " +
                      std::to_string(n));
  return h;
}

}  // namespace

// ---------------------------------------------------------------------------

void PhantomSpec::validate() const {
  for (Index e : extents)
    if (e < 8) throw ConfigError("phantom extents must be at least 8 per axis");
  for (float s : spacing)
    if (!(s > 0.0f)) throw ConfigError("phantom spacing must be positive");
  if (min_tumors < 1 || max_tumors > 3 || min_tumors > max_tumors)
    throw ConfigError("phantom tumor count must satisfy 1 <= min <= max <= 3");
  check_range(brain_fraction, 0.1, 1.0, "phantom brain_fraction");
  check_range(edema_radius, 1.0, 1e6, "phantom edema_radius");
  check_range(core_fraction, 0.0, 1.0, "phantom core_fraction");
  check_range(necrosis_fraction, 0.0, 1.0, "phantom necrosis_fraction");
  // Each shell at least one voxel thick along every axis.
  if (edema_radius[0] * (1.0 - core_fraction[1]) < 1.0)
    throw ConfigError("phantom edema shell thinner than one voxel; lower core_fraction or raise edema_radius");
  if (edema_radius[0] * core_fraction[0] * (1.0 - necrosis_fraction[1]) < 1.0)
    throw ConfigError("phantom enhancing shell thinner than one voxel; lower necrosis_fraction");
  if (mean.empty()) throw ConfigError("phantom needs at least one channel");
  for (double s : tissue_std)
    if (!(s >= 0.0)) throw ConfigError("phantom tissue_std must be non-negative");
  if (!(noise >= 0.0)) throw ConfigError("phantom noise must be non-negative");
  double min_semi = std::numeric_limits<double>::max();
  for (Index e : extents) min_semi = std::min(min_semi, 0.5 * static_cast<double>(e) * brain_fraction[0]);
  if (min_semi < edema_radius[1] + 1.0)
    throw ConfigError("phantom extents " + grid_str(extents) + " too small for edema radius " +
                      std::to_string(edema_radius[1]));
}

std::pair<Volume, LabelMask> generate_phantom(const PhantomSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const auto uniform = [&](const std::array<double, 2>& r) { return r[0] + (r[1] - r[0]) * unit(rng); };

  const Grid& e = spec.extents;
  Vec3 brain_c, brain_r;
  for (int k = 0; k < 3; ++k) {
    brain_c[k] = 0.5 * static_cast<double>(e[k] - 1);
    brain_r[k] = 0.5 * static_cast<double>(e[k]) * uniform(spec.brain_fraction);
  }

  const int count = spec.min_tumors + static_cast<int>(rng() % static_cast<std::uint64_t>(
                                                                   spec.max_tumors - spec.min_tumors + 1));
  std::vector<Tumor> tumors;
  for (int t = 0; t < count; ++t) {
    for (int attempt = 0; attempt < 500; ++attempt) {
      Tumor tu;
      for (auto& r : tu.radii) r = uniform(spec.edema_radius);
      tu.core = uniform(spec.core_fraction);
      tu.necrosis = uniform(spec.necrosis_fraction);
      const double two_pi = 2.0 * std::numbers::pi;
      tu.rot = rotation(two_pi * unit(rng), two_pi * unit(rng), two_pi * unit(rng));
      const double reach = tu.max_radius() + 1.0;
      Vec3 inner;
      for (int k = 0; k < 3; ++k) inner[k] = brain_r[k] - reach;
      for (int k = 0; k < 3; ++k) tu.centre[k] = brain_c[k] + (2.0 * unit(rng) - 1.0) * inner[k];
      if (ellipsoid_level(tu.centre, brain_c, inner) > 1.0) continue;
      bool clear = true;
      for (const auto& o : tumors) {
        double d2 = 0;
        for (int k = 0; k < 3; ++k) d2 += (tu.centre[k] - o.centre[k]) * (tu.centre[k] - o.centre[k]);
        const double gap = tu.max_radius() + o.max_radius() + 2.0;
        if (d2 <= gap * gap) clear = false;
      }
      if (!clear) continue;
      tumors.push_back(tu);
      break;
    }
  }
  if (tumors.empty()) throw ConfigError("phantom extents " + grid_str(e) + " too small to place a tumor");

  const Index channels = static_cast<Index>(spec.mean.size());
  Volume vol = Volume::zeros(channels, e, spec.spacing);
  LabelMask mask = LabelMask::zeros(e, spec.spacing);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double inside = 1.0;
  for (Index z = 0; z < e[0]; ++z)
    for (Index y = 0; y < e[1]; ++y)
      for (Index x = 0; x < e[2]; ++x) {
        const Vec3 p{static_cast<double>(z), static_cast<double>(y), static_cast<double>(x)};
        int tissue = -1;
        if (ellipsoid_level(p, brain_c, brain_r) <= inside) tissue = kBrain;
        for (const auto& tu : tumors) {
          const double lv = tu.level(p);
          if (lv > inside) continue;
          // Scaling every semi-axis by f scales the squared level by 1/f^2.
          const double core2 = tu.core * tu.core;
          const double nec2 = core2 * tu.necrosis * tu.necrosis;
          tissue = lv <= nec2 ? kTissueNE : lv <= core2 ? kTissueET : kTissueED;
        }
        if (tissue < 0) continue;
        mask.at(z, y, x) = static_cast<std::uint8_t>(tissue);
        for (Index c = 0; c < channels; ++c) {
          const double value = spec.mean[static_cast<std::size_t>(c)][static_cast<std::size_t>(tissue)] +
                               spec.tissue_std[static_cast<std::size_t>(tissue)] * gauss(rng) + spec.noise * gauss(rng);
          vol.at(c, z, y, x) = static_cast<float>(value);
        }
      }
  return {std::move(vol), std::move(mask)};
}

// ---------------------------------------------------------------------------

BinaryMask nonzero_mask(const Volume& v) {
  BinaryMask m = BinaryMask::zeros(v.extents);
  const Index n = v.voxels();
  for (Index c = 0; c < v.channels; ++c) {
    const float* src = v.channel(c);
    for (Index i = 0; i < n; ++i)
      if (src[i] != 0.0f) m.bits[static_cast<std::size_t>(i)] = 1;
  }
  return m;
}

Volume zscore_normalize(const Volume& v, const BinaryMask& foreground) {
  require_same_extents(v.extents, foreground.extents, "zscore_normalize");
  const Index n = v.voxels();
  const double count = static_cast<double>(foreground.count());
  if (count == 0) throw ValueError("zscore_normalize: foreground mask is empty");
  Volume out = v;
  for (Index c = 0; c < v.channels; ++c) {
    const float* src = v.channel(c);
    double sum = 0;
    for (Index i = 0; i < n; ++i)
      if (foreground.bits[static_cast<std::size_t>(i)]) sum += src[i];
    const double mu = sum / count;
    double sq = 0;
    for (Index i = 0; i < n; ++i)
      if (foreground.bits[static_cast<std::size_t>(i)]) sq += (src[i] - mu) * (src[i] - mu);
    const double sigma = std::max(std::sqrt(sq / count), 1e-8);
    float* dst = out.channel(c);
    for (Index i = 0; i < n; ++i) dst[i] = static_cast<float>((src[i] - mu) / sigma);
  }
  return out;
}

// ---------------------------------------------------------------------------

void AugmentConfig::validate() const {
  const bool any = crop_size[0] || crop_size[1] || crop_size[2];
  for (Index c : crop_size)
    if (c < 0 || (any && c == 0)) throw ConfigError("augment crop_size must be all zero or all positive");
  check_probability(p_crop, "augment p_crop");
  check_probability(p_zoom, "augment p_zoom");
  check_probability(p_flip, "augment p_flip");
  check_probability(p_noise, "augment p_noise");
  check_probability(p_blur, "augment p_blur");
  check_probability(p_brightness, "augment p_brightness");
  check_probability(p_contrast, "augment p_contrast");
  check_range(zoom_range, 0.85, 1.15, "augment zoom_range");
  if (!(noise_max_sigma >= 0.0 && noise_max_sigma <= 0.1)) throw ConfigError("augment noise_max_sigma must be <= 0.1");
  check_range(blur_sigma, 1e-3, 1.0, "augment blur_sigma");
  if (!(brightness_shift >= 0.0 && brightness_shift <= 0.2))
    throw ConfigError("augment brightness_shift must be <= 0.2");
  check_range(contrast_range, 0.75, 1.25, "augment contrast_range");
}

AugmentConfig AugmentConfig::none() {
  AugmentConfig c;
  c.p_crop = c.p_zoom = c.p_flip = c.p_noise = c.p_blur = c.p_brightness = c.p_contrast = 0.0;
  return c;
}

Volume flip(const Volume& v, int axis) {
  if (axis < 0 || axis > 2) throw ValueError("flip axis must be 0, 1 or 2");
  Volume out = v;
  const Grid& e = v.extents;
  for (Index c = 0; c < v.channels; ++c)
    for (Index z = 0; z < e[0]; ++z)
      for (Index y = 0; y < e[1]; ++y)
        for (Index x = 0; x < e[2]; ++x) {
          const Index sz = axis == 0 ? e[0] - 1 - z : z, sy = axis == 1 ? e[1] - 1 - y : y,
                      sx = axis == 2 ? e[2] - 1 - x : x;
          out.at(c, z, y, x) = v.at(c, sz, sy, sx);
        }
  return out;
}

LabelMask flip(const LabelMask& m, int axis) {
  if (axis < 0 || axis > 2) throw ValueError("flip axis must be 0, 1 or 2");
  LabelMask out = m;
  const Grid& e = m.extents;
  for (Index z = 0; z < e[0]; ++z)
    for (Index y = 0; y < e[1]; ++y)
      for (Index x = 0; x < e[2]; ++x) {
        const Index sz = axis == 0 ? e[0] - 1 - z : z, sy = axis == 1 ? e[1] - 1 - y : y,
                    sx = axis == 2 ? e[2] - 1 - x : x;
        out.at(z, y, x) = m.at(sz, sy, sx);
      }
  return out;
}

std::pair<Volume, LabelMask> augment(const Volume& v, const LabelMask& m, const AugmentConfig& cfg,
                                     std::mt19937_64& rng) {
  cfg.validate();
  require_same_extents(v.extents, m.extents, "augment");
  const Grid& e = v.extents;
  const bool cropping = cfg.crop_size[0] > 0;
  const Grid out_e = cropping ? cfg.crop_size : e;
  for (int k = 0; k < 3; ++k)
    if (out_e[k] > e[k]) throw ShapeError("augment: crop " + grid_str(out_e) + " larger than volume " + grid_str(e));

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const auto draw = [&](double p) { return unit(rng) < p; };
  const auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  // Spatial: output voxel o reads source centre + (o' - (P-1)/2) * zoom,
  // o' = o mirrored on flipped axes.
  Grid origin{0, 0, 0};
  if (cropping) {
    const bool random = draw(cfg.p_crop);
    for (int k = 0; k < 3; ++k) {
      const Index slack = e[k] - out_e[k];
      origin[k] = random ? static_cast<Index>(rng() % static_cast<std::uint64_t>(slack + 1)) : slack / 2;
    }
  }
  const double zoom = draw(cfg.p_zoom) ? uniform(cfg.zoom_range[0], cfg.zoom_range[1]) : 1.0;
  std::array<bool, 3> flipped{};
  for (auto& f : flipped) f = draw(cfg.p_flip);

  Volume vol;
  LabelMask mask;
  if (zoom == 1.0) {
    vol = crop(v, origin, out_e);
    mask = crop(m, origin, out_e);
  } else {
    vol = Volume::zeros(v.channels, out_e, v.spacing);
    mask = LabelMask::zeros(out_e, m.spacing);
    std::array<std::vector<Index>, 3> lo, hi, nearest;
    std::array<std::vector<double>, 3> frac;
    for (int k = 0; k < 3; ++k) {
      const double centre = static_cast<double>(origin[k]) + 0.5 * static_cast<double>(out_e[k] - 1);
      for (Index o = 0; o < out_e[k]; ++o) {
        const double src = centre + (static_cast<double>(o) - 0.5 * static_cast<double>(out_e[k] - 1)) * zoom;
        const double fl = std::floor(src);
        lo[k].push_back(clamp_index(static_cast<Index>(fl), e[k]));
        hi[k].push_back(clamp_index(static_cast<Index>(fl) + 1, e[k]));
        frac[k].push_back(src < 0 ? 0.0 : src > static_cast<double>(e[k] - 1) ? 0.0 : src - fl);
        nearest[k].push_back(clamp_index(static_cast<Index>(std::floor(src + 0.5)), e[k]));
      }
    }
    for (Index z = 0; z < out_e[0]; ++z)
      for (Index y = 0; y < out_e[1]; ++y)
        for (Index x = 0; x < out_e[2]; ++x) {
          mask.at(z, y, x) = m.at(nearest[0][z], nearest[1][y], nearest[2][x]);
          const double fz = frac[0][z], fy = frac[1][y], fx = frac[2][x];
          for (Index c = 0; c < v.channels; ++c) {
            double acc = 0;
            for (int dz = 0; dz < 2; ++dz)
              for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx) {
                  const double w = (dz ? fz : 1 - fz) * (dy ? fy : 1 - fy) * (dx ? fx : 1 - fx);
                  if (w == 0.0) continue;
                  acc += w * v.at(c, dz ? hi[0][z] : lo[0][z], dy ? hi[1][y] : lo[1][y], dx ? hi[2][x] : lo[2][x]);
                }
            vol.at(c, z, y, x) = static_cast<float>(acc);
          }
        }
  }
  for (int k = 0; k < 3; ++k)
    if (flipped[k]) {
      vol = flip(vol, k);
      mask = flip(mask, k);
    }

  const Index n = vol.voxels();
  if (draw(cfg.p_noise)) {
    const double sigma = uniform(0.0, cfg.noise_max_sigma);
    std::normal_distribution<double> gauss(0.0, sigma > 0 ? sigma : 1.0);
    if (sigma > 0)
      for (auto& x : vol.values) x = static_cast<float>(x + gauss(rng));
  }
  if (draw(cfg.p_blur)) {
    const double sigma = uniform(cfg.blur_sigma[0], cfg.blur_sigma[1]);
    for (Index c = 0; c < vol.channels; ++c) gaussian_blur(vol.channel(c), out_e, sigma);
  }
  if (draw(cfg.p_brightness))
    for (Index c = 0; c < vol.channels; ++c) {
      const float shift = static_cast<float>(uniform(-cfg.brightness_shift, cfg.brightness_shift));
      float* d = vol.channel(c);
      for (Index i = 0; i < n; ++i) d[i] += shift;
    }
  if (draw(cfg.p_contrast))
    for (Index c = 0; c < vol.channels; ++c) {
      const double factor = uniform(cfg.contrast_range[0], cfg.contrast_range[1]);
      float* d = vol.channel(c);
      double mu = 0;
      for (Index i = 0; i < n; ++i) mu += d[i];
      mu /= static_cast<double>(n);
      for (Index i = 0; i < n; ++i) d[i] = static_cast<float>((d[i] - mu) * factor + mu);
    }
  return {std::move(vol), std::move(mask)};
}

// ---------------------------------------------------------------------------

PatchDraw sample_patch(const Volume& v, const LabelMask& m, const Grid& patch, std::mt19937_64& rng,
                       double foreground_bias) {
  require_same_extents(v.extents, m.extents, "sample_patch");
  check_probability(foreground_bias, "foreground_bias");
  const Grid& e = v.extents;
  for (int k = 0; k < 3; ++k)
    if (patch[k] <= 0 || patch[k] > e[k])
      throw ShapeError("sample_patch: patch " + grid_str(patch) + " does not fit volume " + grid_str(e));

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  PatchDraw out;
  const bool want_fg = unit(rng) < foreground_bias;
  std::vector<Index> tumour;
  if (want_fg)
    for (Index i = 0; i < m.voxels(); ++i)
      if (m.labels[static_cast<std::size_t>(i)] != kBackground) tumour.push_back(i);
  if (!tumour.empty()) {
    const Index i = tumour[static_cast<std::size_t>(rng() % tumour.size())];
    const Grid c{i / (e[1] * e[2]), (i / e[2]) % e[1], i % e[2]};
    for (int k = 0; k < 3; ++k) out.origin[k] = std::clamp<Index>(c[k] - patch[k] / 2, 0, e[k] - patch[k]);
    out.foreground_centered = true;
  } else {
    for (int k = 0; k < 3; ++k) out.origin[k] = static_cast<Index>(rng() % static_cast<std::uint64_t>(e[k] - patch[k] + 1));
  }
  out.volume = crop(v, out.origin, patch);
  out.mask = crop(m, out.origin, patch);
  return out;
}

std::pair<Volume, LabelMask> draw_training_patch(const Volume& v, const LabelMask& m, const Grid& patch,
                                                 Index margin, const AugmentConfig& cfg, double foreground_bias,
                                                 std::mt19937_64& rng) {
  if (margin < 0) throw ValueError("patch margin must be non-negative");
  Grid box;
  for (int k = 0; k < 3; ++k) box[k] = std::min(patch[k] + 2 * margin, v.extents[k]);
  auto draw = sample_patch(v, m, box, rng, foreground_bias);
  AugmentConfig c = cfg;
  c.crop_size = patch;
  return augment(draw.volume, draw.mask, c, rng);
}

// ---------------------------------------------------------------------------

void save_volume(const Volume& v, const std::string& path) {
  v.validate();
  io::Writer w;
  write_header(w, kDtypeF32, {v.channels, v.extents[0], v.extents[1], v.extents[2]}, v.spacing);
  w.bytes(v.values.data(), v.values.size() * sizeof(float));
  io::write_file(path, w.buffer());
}

void save_mask(const LabelMask& m, const std::string& path) {
  m.validate();
  io::Writer w;
  write_header(w, kDtypeU8, {m.extents[0], m.extents[1], m.extents[2]}, m.spacing);
  w.bytes(m.labels.data(), m.labels.size());
  io::write_file(path, w.buffer());
}

Volume load_volume(const std::string& path) {
  const auto buf = io::read_file(path);
  io::Reader r(buf, "volume " + path);
  const Header h = read_header(r, path, kDtypeF32, 4, sizeof(float));
  Volume v;
  v.channels = h.extents[0];
  v.extents = {h.extents[1], h.extents[2], h.extents[3]};
  v.spacing = h.spacing;
  v.values.resize(static_cast<std::size_t>(v.channels * v.voxels()));
  r.bytes(v.values.data(), v.values.size() * sizeof(float));
  for (float x : v.values)
    if (!std::isfinite(x)) throw FormatError("volume " + path + ": non-finite intensity");
  return v;
}

LabelMask load_mask(const std::string& path) {
  const auto buf = io::read_file(path);
  io::Reader r(buf, "mask " + path);
  const Header h = read_header(r, path, kDtypeU8, 3, 1);
  LabelMask m;
  m.extents = {h.extents[0], h.extents[1], h.extents[2]};
  m.spacing = h.spacing;
  m.labels.resize(static_cast<std::size_t>(m.voxels()));
  r.bytes(m.labels.data(), m.labels.size());
  for (std::uint8_t l : m.labels)
    if (l >= kNumClasses) throw FormatError("mask " + path + ": label " + std::to_string(l) + " outside {0,1,2,3}");
  return m;
}

}  // namespace odseg
