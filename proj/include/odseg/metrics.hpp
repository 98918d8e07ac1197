#pragma once

// Region composition and evaluation: voxel Dice, lesion-wise Dice, HD95.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "odseg/volume.hpp"

namespace odseg {

/// ET = {3}, TC = {1, 3}, WT = {1, 2, 3}.
struct RegionMasks {
  BinaryMask et, tc, wt;
};

enum class Region { ET = 0, TC = 1, WT = 2 };
inline constexpr std::array<Region, 3> kRegions{Region::ET, Region::TC, Region::WT};
const char* region_name(Region r);
const BinaryMask& region_mask(const RegionMasks& m, Region r);

RegionMasks compose_regions(const LabelMask& m);

/// 2|a ∩ b| / (|a| + |b|); 1.0 when both are empty.
double dice(const BinaryMask& a, const BinaryMask& b);

/// Component labels 1..K in first-voxel scan order (0 = off).
struct Components {
  Grid extents{0, 0, 0};
  std::vector<std::int32_t> labels;
  /// sizes[k - 1] is the voxel count of component k.
  std::vector<Index> sizes;
  int count() const { return static_cast<int>(sizes.size()); }
};

/// connectivity is 6, 18 or 26.
Components connected_components(const BinaryMask& m, int connectivity = 26);

/// Voxels with at least one 6-neighbour (or the grid edge) outside the mask.
BinaryMask boundary(const BinaryMask& m);

/// Euclidean distance (mm) from every voxel to the nearest set voxel of
/// `features`; +inf everywhere when it is empty.
std::vector<double> distance_transform(const BinaryMask& features, const Spacing& spacing);

/// Linear-interpolation percentile, q in [0, 100].
double percentile(std::vector<double> values, double q);

struct LesionOptions {
  /// Cubic structuring element of side 2 * dilation + 1, applied once.
  int dilation = 1;
  int connectivity = 26;
};

/// Mean over ground-truth lesions (Dice against the predicted components
/// touching the lesion's dilated zone) and unmatched predicted lesions
/// (scoring 0). 1.0 when neither mask has a lesion.
double lesion_wise_dice(const BinaryMask& pred, const BinaryMask& gt, const LesionOptions& opts = {});

struct DistanceResult {
  double value = 0.0;
  /// Exactly one mask was empty and the grid diagonal was returned.
  bool penalty = false;
  bool both_empty = false;
};

/// max of the directed 95th-percentile boundary distances, in mm. Both
/// empty gives 0; one empty gives the physical grid diagonal.
DistanceResult hd95(const BinaryMask& pred, const BinaryMask& gt, const Spacing& spacing);

struct RegionScore {
  double dice = 0;
  double lesion_dice = 0;
  double hd95 = 0;
  bool dice_both_empty = false;
  bool hd95_both_empty = false;
  bool hd95_penalty = false;
};

struct CaseRecord {
  std::string case_id;
  std::array<RegionScore, 3> regions;
};

struct ConventionCounts {
  Index dice_both_empty = 0;
  Index hd95_both_empty = 0;
  Index hd95_penalty = 0;
};

struct MetricsReport {
  /// Sorted by case id.
  std::vector<CaseRecord> cases;
  /// Unweighted means per region.
  std::array<RegionScore, 3> mean;
  ConventionCounts conventions;
};

/// Spacing is taken from the ground truth.
CaseRecord evaluate_case(const std::string& case_id, const LabelMask& pred, const LabelMask& gt,
                         const LesionOptions& opts = {});

struct CasePair {
  std::string case_id;
  LabelMask pred;
  LabelMask gt;
};

MetricsReport evaluate_set(const std::vector<CasePair>& pairs, const LesionOptions& opts = {});
MetricsReport aggregate(std::vector<CaseRecord> cases);

/// One row per (case, region): case_id,region,dice,lesion_dice,hd95.
std::string report_csv(const MetricsReport& r);
/// JSON document with "cases", "aggregate" and "conventions".
std::string report_json(const MetricsReport& r);

}  // namespace odseg
