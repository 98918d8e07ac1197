#include "odseg/manifest.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "binary_io.hpp"
#include "odseg/text.hpp"

namespace odseg {

namespace fs = std::filesystem;

namespace {

constexpr const char* kHeader = "case_id,volume,mask";

std::string resolve(const fs::path& base, const std::string& p) {
  if (p.empty()) return p;
  const fs::path path(p);
  return path.is_absolute() ? p : (base / path).lexically_normal().string();
}

std::string relativize(const fs::path& base, const std::string& p) {
  if (p.empty()) return p;
  const fs::path abs = fs::absolute(p).lexically_normal();
  const fs::path rel = abs.lexically_relative(fs::absolute(base).lexically_normal());
  if (rel.empty()) return abs.string();
  return rel.string();
}

}  // namespace

std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read manifest '" + path + "'");
  const fs::path base = fs::path(path).parent_path();
  std::vector<ManifestEntry> out;
  std::set<std::string> ids;
  std::string line;
  int line_no = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (text::trim(line).empty()) continue;
    if (!header) {
      if (text::trim(line) != kHeader)
        throw FormatError("manifest " + path + ": expected header '" + kHeader + "', got '" + line + "'");
      header = true;
      continue;
    }
    const auto fields = text::split(line, ',');
    if (fields.size() != 3)
      throw FormatError("manifest " + path + ":" + std::to_string(line_no) + ": expected 3 fields, got " +
                        std::to_string(fields.size()));
    ManifestEntry e{text::trim(fields[0]), resolve(base, text::trim(fields[1])), resolve(base, text::trim(fields[2]))};
    if (e.case_id.empty()) throw FormatError("manifest " + path + ":" + std::to_string(line_no) + ": empty case id");
    if (!ids.insert(e.case_id).second) throw FormatError("manifest " + path + ": duplicate case id '" + e.case_id + "'");
    out.push_back(std::move(e));
  }
  if (!header) throw FormatError("manifest " + path + " is empty");
  return out;
}

void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  const fs::path base = fs::path(path).parent_path();
  std::string body = std::string(kHeader) + "\n";
  for (const auto& e : entries) {
    const std::string fields[3] = {e.case_id, relativize(base, e.volume), relativize(base, e.mask)};
    for (const auto& f : fields)
      if (f.find(',') != std::string::npos || f.find('\n') != std::string::npos)
        throw ValueError("manifest field '" + f + "' contains a comma or newline");
    body += fields[0] + "," + fields[1] + "," + fields[2] + "\n";
  }
  io::write_file(path, std::vector<std::uint8_t>(body.begin(), body.end()));
}

Image render_intensity(const Volume& v, Index channel, Index z) {
  if (channel < 0 || channel >= v.channels) throw ValueError("render: channel out of range");
  if (z < 0 || z >= v.extents[0]) throw ValueError("render: slice out of range");
  Image img{v.extents[2], v.extents[1], 1, {}};
  const float* slice = v.channel(channel) + z * v.extents[1] * v.extents[2];
  const Index n = img.width * img.height;
  const auto [lo, hi] = std::minmax_element(slice, slice + n);
  img.pixels.resize(static_cast<std::size_t>(n), 0);
  if (*hi > *lo)
    for (Index i = 0; i < n; ++i)
      img.pixels[static_cast<std::size_t>(i)] =
          static_cast<std::uint8_t>(std::lround(255.0 * (slice[i] - *lo) / (static_cast<double>(*hi) - *lo)));
  return img;
}

Image render_labels(const LabelMask& m, Index z) {
  if (z < 0 || z >= m.extents[0]) throw ValueError("render: slice out of range");
  static constexpr std::uint8_t kPalette[4][3] = {{0, 0, 0}, {230, 40, 40}, {40, 200, 60}, {250, 220, 0}};
  Image img{m.extents[2], m.extents[1], 3, {}};
  const Index n = img.width * img.height;
  img.pixels.resize(static_cast<std::size_t>(3 * n));
  const std::uint8_t* slice = m.labels.data() + z * n;
  for (Index i = 0; i < n; ++i) {
    const std::uint8_t l = std::min<std::uint8_t>(slice[i], 3);
    std::copy(kPalette[l], kPalette[l] + 3, img.pixels.begin() + 3 * i);
  }
  return img;
}

void write_pnm(const Image& img, const std::string& path) {
  if (img.channels != 1 && img.channels != 3) throw ValueError("write_pnm: 1 or 3 channels");
  const std::string header = std::string(img.channels == 1 ? "P5" : "P6") + "\n" + std::to_string(img.width) + " " +
                             std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  bytes.insert(bytes.end(), img.pixels.begin(), img.pixels.end());
  io::write_file(path, bytes);
}

Image read_pnm(const std::string& path) {
  const auto bytes = io::read_file(path);
  std::string head(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(std::min<std::size_t>(bytes.size(), 64)));
  std::istringstream in(head);
  std::string magic;
  Image img;
  int maxval = 0;
  in >> magic >> img.width >> img.height >> maxval;
  if (!in || (magic != "P5" && magic != "P6") || maxval != 255) throw FormatError("'" + path + "' is not an 8-bit PNM");
  img.channels = magic == "P5" ? 1 : 3;
  const auto offset = static_cast<std::size_t>(in.tellg()) + 1;
  const auto n = static_cast<std::size_t>(img.width * img.height * img.channels);
  if (bytes.size() != offset + n) throw FormatError("'" + path + "': pixel data length mismatch");
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(offset), bytes.end());
  return img;
}

}  // namespace odseg
