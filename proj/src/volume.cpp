#include "odseg/volume.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace odseg {

namespace {

std::string grid_str(const Grid& g) {
  return "[" + std::to_string(g[0]) + ", " + std::to_string(g[1]) + ", " + std::to_string(g[2]) + "]";
}

void check_grid(const Grid& g) {
  for (Index e : g)
    if (e <= 0) throw ShapeError("grid extents must be positive, got " + grid_str(g));
}

void check_spacing(const Spacing& s) {
  for (float v : s)
    if (!(v > 0.0f) || !std::isfinite(v)) throw ValueError("voxel spacing must be positive and finite");
}

}  // namespace

Volume Volume::zeros(Index channels, const Grid& extents, const Spacing& spacing) {
  check_grid(extents);
  if (channels <= 0) throw ShapeError("volume needs at least one channel");
  Volume v;
  v.channels = channels;
  v.extents = extents;
  v.spacing = spacing;
  v.values.assign(static_cast<std::size_t>(channels * grid_voxels(extents)), 0.0f);
  return v;
}

void Volume::validate() const {
  check_grid(extents);
  check_spacing(spacing);
  if (channels <= 0 || values.size() != static_cast<std::size_t>(channels * voxels()))
    throw ShapeError("volume payload does not match " + std::to_string(channels) + " x " + grid_str(extents));
  for (float v : values)
    if (!std::isfinite(v)) throw NumericError("volume contains a non-finite value");
}

LabelMask LabelMask::zeros(const Grid& extents, const Spacing& spacing) {
  check_grid(extents);
  LabelMask m;
  m.extents = extents;
  m.spacing = spacing;
  m.labels.assign(static_cast<std::size_t>(grid_voxels(extents)), 0);
  return m;
}

void LabelMask::validate() const {
  check_grid(extents);
  check_spacing(spacing);
  if (labels.size() != static_cast<std::size_t>(voxels()))
    throw ShapeError("label payload does not match " + grid_str(extents));
  for (std::uint8_t l : labels)
    if (l >= kNumClasses) throw ValueError("label " + std::to_string(l) + " outside {0,1,2,3}");
}

BinaryMask BinaryMask::zeros(const Grid& extents) {
  check_grid(extents);
  BinaryMask m;
  m.extents = extents;
  m.bits.assign(static_cast<std::size_t>(grid_voxels(extents)), 0);
  return m;
}

Index BinaryMask::count() const {
  return static_cast<Index>(std::count_if(bits.begin(), bits.end(), [](std::uint8_t b) { return b != 0; }));
}

void require_same_extents(const Grid& a, const Grid& b, const char* what) {
  if (a != b) throw ShapeError(std::string(what) + ": extents " + grid_str(a) + " and " + grid_str(b) + " differ");
}

}  // namespace odseg
