#include "odseg/text.hpp"

#include <cctype>
#include <charconv>
#include <cmath>

namespace odseg::text {

namespace {

[[noreturn]] void bad(const std::string& key, const std::string& value, const char* expected) {
  throw ConfigError("key '" + key + "': cannot parse '" + value + "' as " + expected);
}

}  // namespace

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= s.size(); ++i)
    if (i == s.size() || s[i] == sep) {
      out.push_back(trim(s.substr(start, i - start)));
      start = i + 1;
    }
  return out;
}

std::int64_t parse_int(const std::string& key, const std::string& value) {
  const std::string v = trim(value);
  std::int64_t out = 0;
  const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc() || end != v.data() + v.size()) bad(key, value, "an integer");
  return out;
}

double parse_double(const std::string& key, const std::string& value) {
  const std::string v = trim(value);
  double out = 0;
  const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc() || end != v.data() + v.size() || !std::isfinite(out))
    bad(key, value, "a finite number");
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  std::string v = trim(value);
  for (auto& ch : v) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  if (v == "true" || v == "yes" || v == "on" || v == "1") return true;
  if (v == "false" || v == "no" || v == "off" || v == "0") return false;
  bad(key, value, "a boolean");
}

Grid parse_grid(const std::string& key, const std::string& value) {
  const auto parts = split(value, ',');
  if (parts.size() == 1) {
    const Index n = parse_int(key, parts[0]);
    return {n, n, n};
  }
  if (parts.size() != 3) bad(key, value, "one or three integers");
  return {parse_int(key, parts[0]), parse_int(key, parts[1]), parse_int(key, parts[2])};
}

std::vector<double> parse_double_list(const std::string& key, const std::string& value) {
  std::vector<double> out;
  if (trim(value).empty()) return out;
  for (const auto& p : split(value, ',')) out.push_back(parse_double(key, p));
  return out;
}

std::string format_double(double v) {
  char buf[64];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

std::string format_bool(bool v) { return v ? "true" : "false"; }

std::string format_grid(const Grid& g) {
  return std::to_string(g[0]) + "," + std::to_string(g[1]) + "," + std::to_string(g[2]);
}

std::string format_double_list(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + format_double(v[i]);
  return out;
}

}  // namespace odseg::text
