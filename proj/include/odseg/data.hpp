#pragma once

// Synthetic tumour phantoms, intensity normalisation, augmentation, patch
// sampling and ODSV volume files.

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "odseg/volume.hpp"

namespace odseg {

// ---------------------------------------------------------------------------
// Phantoms

/// Tissue classes indexing PhantomSpec::mean. Order matches the labels, with
/// healthy brain in slot 0.
enum Tissue { kBrain = 0, kTissueNE = 1, kTissueED = 2, kTissueET = 3 };

struct PhantomSpec {
  Grid extents{48, 48, 48};
  Spacing spacing{1.0f, 1.0f, 1.0f};
  int min_tumors = 1;
  int max_tumors = 3;
  /// Brain semi-axes as a fraction of the half-extent.
  std::array<double, 2> brain_fraction{0.8, 0.95};
  /// Edema semi-axes in voxels.
  std::array<double, 2> edema_radius{5.0, 9.0};
  /// Enhancing-core semi-axes as a fraction of the edema semi-axes.
  std::array<double, 2> core_fraction{0.45, 0.7};
  /// Necrotic-core semi-axes as a fraction of the enhancing-core semi-axes.
  std::array<double, 2> necrosis_fraction{0.3, 0.55};
  /// Mean intensity per channel (T1, T1C, T2, FLAIR) and tissue. The number
  /// of rows is the channel count; T1C gives ET the highest value.
  std::vector<std::array<double, 4>> mean{{1.0, 0.45, 0.7, 0.8},
                                          {1.0, 0.55, 0.85, 1.9},
                                          {1.0, 1.8, 1.6, 1.3},
                                          {1.0, 1.25, 1.85, 1.5}};
  /// Voxel-level standard deviation per tissue.
  std::array<double, 4> tissue_std{0.05, 0.08, 0.08, 0.08};
  /// Additive Gaussian noise inside the brain.
  double noise = 0.08;
  std::uint64_t seed = 0;

  /// Throws ConfigError when ranges are inverted or nesting cannot hold.
  void validate() const;
};

/// Brain ellipsoid (values exactly 0 outside) holding 1..3 separated tumours,
/// each an edema ellipsoid around an enhancing core around a necrotic core,
/// sharing centre and orientation. Deterministic in spec.seed.
std::pair<Volume, LabelMask> generate_phantom(const PhantomSpec& spec);

// ---------------------------------------------------------------------------
// Normalisation

/// Voxels where any channel is non-zero.
BinaryMask nonzero_mask(const Volume& v);

/// Per channel: (x - mean_fg) / max(std_fg, 1e-8), applied to every voxel.
/// Throws ValueError on an empty foreground.
Volume zscore_normalize(const Volume& v, const BinaryMask& foreground);

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentConfig {
  /// Output extents of the crop; {0,0,0} keeps the input extents.
  Grid crop_size{0, 0, 0};
  /// Probability that the crop box is placed at random rather than centred.
  double p_crop = 1.0;
  double p_zoom = 0.2;
  std::array<double, 2> zoom_range{0.85, 1.15};
  /// Applied independently on each axis.
  double p_flip = 0.5;
  double p_noise = 0.15;
  double noise_max_sigma = 0.1;
  double p_blur = 0.2;
  std::array<double, 2> blur_sigma{0.5, 1.0};
  double p_brightness = 0.15;
  double brightness_shift = 0.2;
  double p_contrast = 0.15;
  std::array<double, 2> contrast_range{0.75, 1.25};

  /// Throws ConfigError outside the supported bounds.
  void validate() const;
  /// Every probability zero and no crop.
  static AugmentConfig none();
};

/// Spatial transforms (crop, zoom about the crop centre, per-axis flips)
/// act on both inputs: trilinear for the volume, nearest for the mask.
/// Intensity transforms (noise, blur, brightness, contrast) act on the
/// volume only.
std::pair<Volume, LabelMask> augment(const Volume& v, const LabelMask& m, const AugmentConfig& cfg,
                                     std::mt19937_64& rng);

/// Mirror along axis 0, 1 or 2.
Volume flip(const Volume& v, int axis);
LabelMask flip(const LabelMask& m, int axis);

// ---------------------------------------------------------------------------
// Patch sampling

struct PatchDraw {
  Volume volume;
  LabelMask mask;
  Grid origin{0, 0, 0};
  bool foreground_centered = false;
};

/// With probability foreground_bias (and any tumour present) the patch is
/// centred on a uniformly chosen tumour voxel, otherwise its origin is
/// uniform; the box is clamped into the volume.
PatchDraw sample_patch(const Volume& v, const LabelMask& m, const Grid& patch, std::mt19937_64& rng,
                       double foreground_bias = 0.5);

/// Training draw: a box of patch + 2 * margin (capped at the volume) via
/// sample_patch, then augment() with the crop fixed to `patch`.
std::pair<Volume, LabelMask> draw_training_patch(const Volume& v, const LabelMask& m, const Grid& patch,
                                                 Index margin, const AugmentConfig& cfg, double foreground_bias,
                                                 std::mt19937_64& rng);

// ---------------------------------------------------------------------------
// ODSV files

inline constexpr std::uint32_t kVolumeFormatVersion = 1;

void save_volume(const Volume& v, const std::string& path);
void save_mask(const LabelMask& m, const std::string& path);
/// FormatError on bad magic, version, dtype, rank or payload length.
Volume load_volume(const std::string& path);
LabelMask load_mask(const std::string& path);

}  // namespace odseg
