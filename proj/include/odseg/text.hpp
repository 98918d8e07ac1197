#pragma once

// Scalar <-> text conversions for config files and checkpoint headers. Parse
// failures throw ConfigError naming the key.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "odseg/volume.hpp"

namespace odseg::text {

std::string trim(std::string_view s);
std::vector<std::string> split(std::string_view s, char sep);

std::int64_t parse_int(const std::string& key, const std::string& value);
double parse_double(const std::string& key, const std::string& value);
/// true/false, yes/no, on/off, 1/0.
bool parse_bool(const std::string& key, const std::string& value);
/// "n" for an isotropic grid or "a,b,c".
Grid parse_grid(const std::string& key, const std::string& value);
/// Comma-separated doubles; an empty string gives an empty list.
std::vector<double> parse_double_list(const std::string& key, const std::string& value);

/// Shortest text that parses back to the same double.
std::string format_double(double v);
std::string format_bool(bool v);
std::string format_grid(const Grid& g);
std::string format_double_list(const std::vector<double>& v);

}  // namespace odseg::text
