#include "odseg/config.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "odseg/text.hpp"

namespace odseg {

namespace {

using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& value)>;
using Getter = std::function<std::string(const RunConfig&)>;

struct KeySpec {
  Setter set;
  Getter get;
};

std::array<double, 2> parse_pair(const std::string& key, const std::string& value) {
  const auto v = text::parse_double_list(key, value);
  if (v.size() != 2) throw ConfigError(key + " expects two numbers 'low, high', got '" + value + "'");
  return {v[0], v[1]};
}

std::string format_pair(const std::array<double, 2>& p) { return text::format_double_list({p[0], p[1]}); }

std::uint64_t parse_seed(const std::string& key, const std::string& value) {
  const auto v = text::parse_int(key, value);
  if (v < 0) throw ConfigError(key + " must be non-negative");
  return static_cast<std::uint64_t>(v);
}

// Builders for common field types, keyed on a member accessor.
template <typename Access>
KeySpec int_key(Access access) {
  return {[access](RunConfig& c, const std::string& k, const std::string& v) {
            access(c) = static_cast<std::remove_reference_t<decltype(access(c))>>(text::parse_int(k, v));
          },
          [access](const RunConfig& c) { return std::to_string(access(const_cast<RunConfig&>(c))); }};
}

template <typename Access>
KeySpec double_key(Access access) {
  return {[access](RunConfig& c, const std::string& k, const std::string& v) { access(c) = text::parse_double(k, v); },
          [access](const RunConfig& c) { return text::format_double(access(const_cast<RunConfig&>(c))); }};
}

template <typename Access>
KeySpec bool_key(Access access) {
  return {[access](RunConfig& c, const std::string& k, const std::string& v) { access(c) = text::parse_bool(k, v); },
          [access](const RunConfig& c) { return text::format_bool(access(const_cast<RunConfig&>(c))); }};
}

template <typename Access>
KeySpec string_key(Access access) {
  return {[access](RunConfig& c, const std::string&, const std::string& v) { access(c) = v; },
          [access](const RunConfig& c) { return access(const_cast<RunConfig&>(c)); }};
}

template <typename Access>
KeySpec pair_key(Access access) {
  return {[access](RunConfig& c, const std::string& k, const std::string& v) { access(c) = parse_pair(k, v); },
          [access](const RunConfig& c) { return format_pair(access(const_cast<RunConfig&>(c))); }};
}

template <typename Access>
KeySpec seed_key(Access access) {
  return {[access](RunConfig& c, const std::string& k, const std::string& v) { access(c) = parse_seed(k, v); },
          [access](const RunConfig& c) { return std::to_string(access(const_cast<RunConfig&>(c))); }};
}

template <typename Access>
KeySpec grid_key(Access access) {
  return {[access](RunConfig& c, const std::string& k, const std::string& v) { access(c) = text::parse_grid(k, v); },
          [access](const RunConfig& c) { return text::format_grid(access(const_cast<RunConfig&>(c))); }};
}

#define ODSEG_FIELD(expr) [](RunConfig & c) -> auto& { return c.expr; }

const std::map<std::string, KeySpec>& key_table() {
  static const std::map<std::string, KeySpec> table = [] {
    std::map<std::string, KeySpec> t;
    t["train.steps"] = int_key(ODSEG_FIELD(trainer.total_steps));
    t["train.initial_lr"] = double_key(ODSEG_FIELD(trainer.initial_lr));
    t["train.momentum"] = double_key(ODSEG_FIELD(trainer.momentum));
    t["train.lr_power"] = double_key(ODSEG_FIELD(trainer.lr_power));
    t["train.grad_clip"] = double_key(ODSEG_FIELD(trainer.grad_clip));
    t["train.batch_size"] = int_key(ODSEG_FIELD(train.batch_size));
    t["train.seed"] = seed_key(ODSEG_FIELD(train.seed));
    t["train.checkpoint_interval"] = int_key(ODSEG_FIELD(train.checkpoint_interval));
    t["train.stop_at"] = int_key(ODSEG_FIELD(train.stop_at));
    t["train.log_interval"] = int_key(ODSEG_FIELD(train.log_interval));
    t["train.deterministic"] = bool_key(ODSEG_FIELD(train.deterministic));
    t["train.threads"] = int_key(ODSEG_FIELD(train.threads));
    t["train.foreground_bias"] = double_key(ODSEG_FIELD(train.foreground_bias));
    t["train.patch_margin"] = int_key(ODSEG_FIELD(train.patch_margin));

    t["augment.p_crop"] = double_key(ODSEG_FIELD(augment.p_crop));
    t["augment.p_zoom"] = double_key(ODSEG_FIELD(augment.p_zoom));
    t["augment.zoom_range"] = pair_key(ODSEG_FIELD(augment.zoom_range));
    t["augment.p_flip"] = double_key(ODSEG_FIELD(augment.p_flip));
    t["augment.p_noise"] = double_key(ODSEG_FIELD(augment.p_noise));
    t["augment.noise_max_sigma"] = double_key(ODSEG_FIELD(augment.noise_max_sigma));
    t["augment.p_blur"] = double_key(ODSEG_FIELD(augment.p_blur));
    t["augment.blur_sigma"] = pair_key(ODSEG_FIELD(augment.blur_sigma));
    t["augment.p_brightness"] = double_key(ODSEG_FIELD(augment.p_brightness));
    t["augment.brightness_shift"] = double_key(ODSEG_FIELD(augment.brightness_shift));
    t["augment.p_contrast"] = double_key(ODSEG_FIELD(augment.p_contrast));
    t["augment.contrast_range"] = pair_key(ODSEG_FIELD(augment.contrast_range));

    t["postprocess.thresholds"] = KeySpec{
        [](RunConfig& c, const std::string& k, const std::string& v) {
          if (text::trim(v) == "none" || text::trim(v).empty()) {
            c.postprocess.thresholds.reset();
            return;
          }
          const auto list = text::parse_double_list(k, v);
          if (list.size() != 3) throw ConfigError(k + " expects 'none' or three values for labels 1, 2, 3");
          c.postprocess.thresholds = std::array<double, 3>{list[0], list[1], list[2]};
        },
        [](const RunConfig& c) {
          if (!c.postprocess.thresholds) return std::string("none");
          const auto& t = *c.postprocess.thresholds;
          return text::format_double_list({t[0], t[1], t[2]});
        }};
    t["postprocess.min_component_size"] = int_key(ODSEG_FIELD(postprocess.min_component_size));
    t["postprocess.per_region"] = bool_key(ODSEG_FIELD(postprocess.per_region));
    t["postprocess.connectivity"] = int_key(ODSEG_FIELD(postprocess.connectivity));
    t["postprocess.open"] = bool_key(ODSEG_FIELD(postprocess.open));
    t["postprocess.close"] = bool_key(ODSEG_FIELD(postprocess.close));
    t["postprocess.morph_radius"] = int_key(ODSEG_FIELD(postprocess.morph_radius));

    t["phantom.extents"] = grid_key(ODSEG_FIELD(phantom.extents));
    t["phantom.spacing"] = KeySpec{
        [](RunConfig& c, const std::string& k, const std::string& v) {
          const auto list = text::parse_double_list(k, v);
          if (list.size() == 1) c.phantom.spacing.fill(static_cast<float>(list[0]));
          else if (list.size() == 3)
            for (int i = 0; i < 3; ++i) c.phantom.spacing[i] = static_cast<float>(list[i]);
          else throw ConfigError(k + " expects one or three values");
        },
        [](const RunConfig& c) {
          const auto& s = c.phantom.spacing;
          return text::format_double_list({s[0], s[1], s[2]});
        }};
    t["phantom.min_tumors"] = int_key(ODSEG_FIELD(phantom.min_tumors));
    t["phantom.max_tumors"] = int_key(ODSEG_FIELD(phantom.max_tumors));
    t["phantom.brain_fraction"] = pair_key(ODSEG_FIELD(phantom.brain_fraction));
    t["phantom.edema_radius"] = pair_key(ODSEG_FIELD(phantom.edema_radius));
    t["phantom.core_fraction"] = pair_key(ODSEG_FIELD(phantom.core_fraction));
    t["phantom.necrosis_fraction"] = pair_key(ODSEG_FIELD(phantom.necrosis_fraction));
    t["phantom.noise"] = double_key(ODSEG_FIELD(phantom.noise));

    t["data.count"] = int_key(ODSEG_FIELD(data.count));
    t["data.seed"] = seed_key(ODSEG_FIELD(data.seed));
    t["data.prefix"] = string_key(ODSEG_FIELD(data.prefix));
    t["data.normalize"] = bool_key(ODSEG_FIELD(data.normalize));

    t["metrics.dilation"] = int_key(ODSEG_FIELD(metrics.dilation));
    t["metrics.connectivity"] = int_key(ODSEG_FIELD(metrics.connectivity));

    t["merge.label"] = int_key(ODSEG_FIELD(merge.label));
    t["merge.mode"] = KeySpec{[](RunConfig& c, const std::string& k, const std::string& v) {
                                const auto m = text::trim(v);
                                if (m == "replace") c.merge.mode = MergeMode::Replace;
                                else if (m == "union") c.merge.mode = MergeMode::Union;
                                else throw ConfigError(k + " must be 'replace' or 'union', got '" + v + "'");
                              },
                              [](const RunConfig& c) {
                                return std::string(c.merge.mode == MergeMode::Replace ? "replace" : "union");
                              }};

    t["paths.data_dir"] = string_key(ODSEG_FIELD(paths.data_dir));
    t["paths.manifest"] = string_key(ODSEG_FIELD(paths.manifest));
    t["paths.manifest_b"] = string_key(ODSEG_FIELD(paths.manifest_b));
    t["paths.reference"] = string_key(ODSEG_FIELD(paths.reference));
    t["paths.predictions"] = string_key(ODSEG_FIELD(paths.predictions));
    t["paths.checkpoint"] = string_key(ODSEG_FIELD(paths.checkpoint));
    t["paths.resume"] = string_key(ODSEG_FIELD(paths.resume));
    t["paths.out_dir"] = string_key(ODSEG_FIELD(paths.out_dir));
    return t;
  }();
  return table;
}

#undef ODSEG_FIELD

}  // namespace

void RunConfig::validate() const {
  network.validate();
  augment.validate();
  postprocess.validate();
  phantom.validate();
  if (trainer.total_steps < 1) throw ConfigError("train.steps must be >= 1");
  if (!(trainer.initial_lr > 0)) throw ConfigError("train.initial_lr must be positive");
  if (!(trainer.momentum >= 0 && trainer.momentum < 1)) throw ConfigError("train.momentum must lie in [0, 1)");
  if (!(trainer.lr_power >= 0)) throw ConfigError("train.lr_power must be >= 0");
  if (!(trainer.grad_clip >= 0)) throw ConfigError("train.grad_clip must be >= 0");
  if (train.batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (train.checkpoint_interval < 0) throw ConfigError("train.checkpoint_interval must be >= 0");
  if (train.stop_at < 0) throw ConfigError("train.stop_at must be >= 0");
  if (train.log_interval < 0) throw ConfigError("train.log_interval must be >= 0");
  if (train.threads < 1) throw ConfigError("train.threads must be >= 1");
  if (!(train.foreground_bias >= 0 && train.foreground_bias <= 1))
    throw ConfigError("train.foreground_bias must lie in [0, 1]");
  if (train.patch_margin < 0) throw ConfigError("train.patch_margin must be >= 0");
  if (data.count < 1) throw ConfigError("data.count must be >= 1");
  if (data.prefix.empty() || data.prefix.find_first_of(",/\\ ") != std::string::npos)
    throw ConfigError("data.prefix must be non-empty without commas, slashes or spaces");
  if (metrics.dilation < 0) throw ConfigError("metrics.dilation must be >= 0");
  if (metrics.connectivity != 6 && metrics.connectivity != 18 && metrics.connectivity != 26)
    throw ConfigError("metrics.connectivity must be 6, 18 or 26");
  if (merge.label < 1 || merge.label > 3) throw ConfigError("merge.label must be 1, 2 or 3");
}

ConfigEntries parse_config_text(const std::string& text, const std::string& source) {
  ConfigEntries out;
  std::istringstream in(text);
  std::string section;
  int line_no = 0;
  for (std::string raw; std::getline(in, raw);) {
    ++line_no;
    const auto hash = raw.find_first_of("#;");
    const std::string line = text::trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const std::string where = source + ":" + std::to_string(line_no);
    if (line.front() == '[') {
      if (line.back() != ']' || line.size() < 3) throw ConfigError(where + ": malformed section header '" + line + "'");
      section = text::trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value', got '" + line + "'");
    const std::string key = text::trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError(where + ": missing key");
    const std::string full = section.empty() || key.find('.') != std::string::npos ? key : section + "." + key;
    out.emplace_back(full, text::trim(line.substr(eq + 1)));
  }
  return out;
}

RunConfig config_from_entries(const ConfigEntries& entries) {
  RunConfig cfg;
  std::map<std::string, std::string> net;
  const auto& table = key_table();
  for (const auto& [key, value] : entries) {
    if (key.rfind("network.", 0) == 0) {
      net[key] = value;
      continue;
    }
    const auto it = table.find(key);
    if (it == table.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second.set(cfg, key, value);
  }
  cfg.network = network_config_from_entries(net);
  return cfg;
}

RunConfig load_config(const std::string& path, const ConfigEntries& overrides) {
  ConfigEntries entries;
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file '" + path + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    entries = parse_config_text(buf.str(), path);
  }
  entries.insert(entries.end(), overrides.begin(), overrides.end());
  RunConfig cfg = config_from_entries(entries);
  cfg.validate();
  return cfg;
}

ConfigEntries config_entries(const RunConfig& cfg) {
  std::map<std::string, std::string> all;
  for (const auto& [k, v] : network_config_entries(cfg.network)) all[k] = v;
  for (const auto& [k, spec] : key_table()) all[k] = spec.get(cfg);
  return {all.begin(), all.end()};
}

std::string format_config(const RunConfig& cfg) {
  std::string out, section;
  for (const auto& [key, value] : config_entries(cfg)) {
    const auto dot = key.find('.');
    const std::string sec = key.substr(0, dot);
    if (sec != section) {
      out += (out.empty() ? "" : "\n") + std::string("[") + sec + "]\n";
      section = sec;
    }
    out += key.substr(dot + 1) + " = " + value + "\n";
  }
  return out;
}

}  // namespace odseg
