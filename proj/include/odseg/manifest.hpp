#pragma once

// Dataset manifests (CSV: case_id,volume,mask) and mid-slice renderings.

#include <cstdint>
#include <string>
#include <vector>

#include "odseg/volume.hpp"

namespace odseg {

struct ManifestEntry {
  std::string case_id;
  /// Paths as resolved against the manifest's directory; either may be empty.
  std::string volume;
  std::string mask;
};

/// FormatError on a missing file, bad header, wrong field count or a
/// duplicate case id.
std::vector<ManifestEntry> read_manifest(const std::string& path);

/// Paths are written relative to the manifest's directory (".." allowed).
void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries);

struct Image {
  Index width = 0;
  Index height = 0;
  /// 1 (graymap) or 3 (RGB pixmap).
  int channels = 1;
  std::vector<std::uint8_t> pixels;
};

/// Axial slice z of one channel, min-max scaled to 0..255 (flat slices are 0).
Image render_intensity(const Volume& v, Index channel, Index z);

/// Axial slice z of a label map; background black, NE red, ED green, ET yellow.
Image render_labels(const LabelMask& m, Index z);

/// Binary PGM (P5) or PPM (P6).
void write_pnm(const Image& img, const std::string& path);
Image read_pnm(const std::string& path);

}  // namespace odseg
