#pragma once

// Prediction refinement (thresholding, morphology, small-component removal)
// and model combination (label replacement, per-region best-of).

#include <map>
#include <optional>
#include <string>

#include "odseg/metrics.hpp"
#include "odseg/volume.hpp"

namespace odseg {

struct PostprocessConfig {
  /// Per-class thresholds for labels 1, 2, 3; unset means plain argmax.
  std::optional<std::array<double, 3>> thresholds;
  /// Components smaller than this become background; 0 disables.
  Index min_component_size = 10;
  /// Filter components of each label separately instead of the whole tumor.
  bool per_region = false;
  int connectivity = 26;
  bool open = false;
  bool close = false;
  int morph_radius = 1;

  /// Throws ConfigError on thresholds outside (0, 1) or a negative size or radius.
  void validate() const;
};

/// Argmax over the 4 class probabilities, ties to the lower index. With
/// thresholds set, a foreground winner below its threshold becomes
/// background. ValueError when a voxel's probabilities do not sum to 1 within
/// 1e-5 or leave [0, 1].
LabelMask threshold_probs(const Volume& probs, const PostprocessConfig& cfg = {});

enum class MorphOp { Erode, Dilate, Open, Close };

/// Cubic structuring element of side 2 * radius + 1; voxels outside the grid
/// are ignored. Open = dilate(erode), close = erode(dilate). Radius 0 is the
/// identity.
BinaryMask morph(const BinaryMask& m, MorphOp op, int radius);

LabelMask remove_small_components(const LabelMask& m, Index min_size, bool per_region, int connectivity = 26);

/// Opening/closing per label (precedence ET over NE over ED where results
/// overlap), then small-component removal.
LabelMask postprocess_mask(const LabelMask& m, const PostprocessConfig& cfg);

enum class MergeMode {
  /// b's voxels of `label` supersede a's: a's claims on it are cleared.
  Replace,
  /// b's voxels of `label` are added; a's claims are kept.
  Union,
};

LabelMask merge_label(const LabelMask& a, const LabelMask& b, std::uint8_t label, MergeMode mode = MergeMode::Replace);

struct Selection {
  double value = 0;
  /// "a" or "b".
  std::string source;
  bool tie = false;
};

/// Per key, the larger score (ties go to a). ValueError when the key sets differ.
std::map<std::string, Selection> best_of(const std::map<std::string, double>& a, const std::map<std::string, double>& b);

enum class Metric { Dice, LesionDice, Hd95 };

/// Region means of two reports; for HD95 the smaller value wins.
std::map<std::string, Selection> best_of(const MetricsReport& a, const MetricsReport& b, Metric metric);

}  // namespace odseg
