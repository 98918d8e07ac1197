#pragma once

// Multi-channel 3-D images and integer label maps, row-major [c, z, y, x].

#include <array>
#include <cstdint>
#include <vector>

#include "odseg/tensor.hpp"

namespace odseg {

using Grid = std::array<Index, 3>;
using Spacing = std::array<float, 3>;

inline Index grid_voxels(const Grid& g) { return g[0] * g[1] * g[2]; }

/// Class indices: 0 background, 1 necrosis (NE), 2 edema (ED), 3 enhancing
/// tumor (ET).
inline constexpr int kNumClasses = 4;
enum Label : std::uint8_t { kBackground = 0, kNecrosis = 1, kEdema = 2, kEnhancing = 3 };

struct Volume {
  Index channels = 0;
  Grid extents{0, 0, 0};
  Spacing spacing{1.0f, 1.0f, 1.0f};
  std::vector<float> values;

  static Volume zeros(Index channels, const Grid& extents, const Spacing& spacing = {1.0f, 1.0f, 1.0f});
  Index voxels() const { return grid_voxels(extents); }
  float* channel(Index c) { return values.data() + c * voxels(); }
  const float* channel(Index c) const { return values.data() + c * voxels(); }
  float& at(Index c, Index z, Index y, Index x) { return values[index(c, z, y, x)]; }
  float at(Index c, Index z, Index y, Index x) const { return values[index(c, z, y, x)]; }
  /// Throws ShapeError / NumericError when sizes disagree, spacing is not
  /// positive or a value is not finite.
  void validate() const;

 private:
  std::size_t index(Index c, Index z, Index y, Index x) const {
    return static_cast<std::size_t>(((c * extents[0] + z) * extents[1] + y) * extents[2] + x);
  }
};

struct LabelMask {
  Grid extents{0, 0, 0};
  Spacing spacing{1.0f, 1.0f, 1.0f};
  std::vector<std::uint8_t> labels;

  static LabelMask zeros(const Grid& extents, const Spacing& spacing = {1.0f, 1.0f, 1.0f});
  Index voxels() const { return grid_voxels(extents); }
  std::uint8_t& at(Index z, Index y, Index x) { return labels[index(z, y, x)]; }
  std::uint8_t at(Index z, Index y, Index x) const { return labels[index(z, y, x)]; }
  /// Throws ShapeError on size mismatch and ValueError on labels above 3.
  void validate() const;

 private:
  std::size_t index(Index z, Index y, Index x) const {
    return static_cast<std::size_t>((z * extents[1] + y) * extents[2] + x);
  }
};

/// Binary mask over a grid; one byte per voxel, 0 or 1.
struct BinaryMask {
  Grid extents{0, 0, 0};
  std::vector<std::uint8_t> bits;

  static BinaryMask zeros(const Grid& extents);
  Index voxels() const { return grid_voxels(extents); }
  Index count() const;
  bool empty() const { return count() == 0; }
  std::uint8_t& at(Index z, Index y, Index x) { return bits[index(z, y, x)]; }
  std::uint8_t at(Index z, Index y, Index x) const { return bits[index(z, y, x)]; }

 private:
  std::size_t index(Index z, Index y, Index x) const {
    return static_cast<std::size_t>((z * extents[1] + y) * extents[2] + x);
  }
};

void require_same_extents(const Grid& a, const Grid& b, const char* what);

}  // namespace odseg
