#pragma once

// Run configuration: one `key = value` file with [section] headers, plus
// command-line overrides. Every key is known; anything else is an error.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "odseg/data.hpp"
#include "odseg/metrics.hpp"
#include "odseg/network.hpp"
#include "odseg/postprocess.hpp"

namespace odseg {

struct TrainSettings {
  Index batch_size = 2;
  std::uint64_t seed = 0;
  /// Checkpoint every N steps; 0 writes only the final one.
  std::int64_t checkpoint_interval = 500;
  /// Stop once this many steps are done (0 = train.steps). The LR schedule
  /// still spans train.steps, so a run can be split and resumed.
  std::int64_t stop_at = 0;
  std::int64_t log_interval = 50;
  bool deterministic = true;
  int threads = 1;
  double foreground_bias = 0.5;
  /// Extra context around each patch before the augmentation crop.
  Index patch_margin = 4;
};

struct DataSettings {
  Index count = 8;
  std::uint64_t seed = 1000;
  std::string prefix = "case";
  /// Z-score each volume over its non-zero voxels when loaded.
  bool normalize = true;
};

struct MergeSettings {
  int label = kEdema;
  MergeMode mode = MergeMode::Replace;
};

struct PathSettings {
  std::string data_dir;
  std::string manifest;
  std::string manifest_b;
  std::string reference;
  std::string predictions;
  std::string checkpoint;
  std::string resume;
  std::string out_dir;
};

struct RunConfig {
  NetworkConfig network;
  TrainerConfig trainer;
  TrainSettings train;
  AugmentConfig augment;
  PostprocessConfig postprocess;
  PhantomSpec phantom;
  DataSettings data;
  LesionOptions metrics;
  MergeSettings merge;
  PathSettings paths;

  /// ConfigError on any invalid value.
  void validate() const;
};

using ConfigEntries = std::vector<std::pair<std::string, std::string>>;

/// `[section]` headers prefix the keys that follow; `#` and `;` start
/// comments. ConfigError names the source and line of malformed input.
ConfigEntries parse_config_text(const std::string& text, const std::string& source);

/// Defaults, then `entries` in order (later wins). Unknown keys throw.
RunConfig config_from_entries(const ConfigEntries& entries);

/// File (empty path = defaults only), then overrides.
RunConfig load_config(const std::string& path, const ConfigEntries& overrides = {});

/// Every key with its resolved value, sorted by key.
ConfigEntries config_entries(const RunConfig& cfg);

/// Sectioned text that parse_config_text reads back to the same config.
std::string format_config(const RunConfig& cfg);

}  // namespace odseg
