#pragma once

#include <cerrno>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mnmef/checkpoint.hpp"
#include "mnmef/error.hpp"

namespace mnmef {

/// Flat key-value settings. Values come from a file and are overridden by
/// `set`; every typed lookup records the value actually used, so the
/// snapshot lists defaults as well as explicit settings.
class Config {
 public:
  static Config from_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    require(static_cast<bool>(is), ErrorKind::kConfig, "cannot read config file " + path.string());
    Config c;
    c.values_ = binio::read_key_values(is);
    return c;
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get_string(const std::string& key, const std::string& fallback) {
    const auto it = values_.find(key);
    return record(key, it == values_.end() ? fallback : it->second);
  }

  std::string require_string(const std::string& key) {
    const auto it = values_.find(key);
    require(it != values_.end() && !it->second.empty(), ErrorKind::kConfig, "missing required setting '" + key + "'");
    return record(key, it->second);
  }

  double get_double(const std::string& key, double fallback) {
    const auto it = values_.find(key);
    if (it == values_.end()) return record_number(key, fallback);
    return record_number(key, parse_double(key, it->second));
  }

  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) {
    const auto it = values_.find(key);
    const std::uint64_t v = it == values_.end() ? fallback : parse_u64(key, it->second);
    record(key, std::to_string(v));
    return v;
  }

  std::size_t get_size(const std::string& key, std::size_t fallback) {
    return static_cast<std::size_t>(get_u64(key, fallback));
  }

  bool get_bool(const std::string& key, bool fallback) {
    const auto it = values_.find(key);
    bool v = fallback;
    if (it != values_.end()) {
      const std::string& s = it->second;
      if (s == "1" || s == "true" || s == "yes" || s == "on")
        v = true;
      else if (s == "0" || s == "false" || s == "no" || s == "off")
        v = false;
      else
        fail(ErrorKind::kConfig, "setting '" + key + "' expects a boolean, got '" + s + "'");
    }
    record(key, v ? "true" : "false");
    return v;
  }

  /// Comma-separated list of numbers.
  std::vector<double> get_doubles(const std::string& key, const std::vector<double>& fallback) {
    const auto it = values_.find(key);
    std::vector<double> out = fallback;
    if (it != values_.end()) {
      out.clear();
      std::stringstream ss(it->second);
      std::string item;
      while (std::getline(ss, item, ',')) {
        const auto b = item.find_first_not_of(" \t");
        if (b == std::string::npos) continue;
        out.push_back(parse_double(key, item.substr(b)));
      }
      require(!out.empty(), ErrorKind::kConfig, "setting '" + key + "' is an empty list");
    }
    std::string text;
    for (std::size_t i = 0; i < out.size(); ++i) text += (i ? "," : "") + binio::format_number(out[i]);
    record(key, text);
    return out;
  }

  /// Keys present in the input that no lookup consulted.
  std::vector<std::string> unused_keys() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : values_)
      if (!resolved_.count(k)) out.push_back(k);
    return out;
  }

  const std::map<std::string, std::string>& resolved() const { return resolved_; }

  /// Writes the effective settings in the same format the loader reads.
  void write_snapshot(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path);
    require(static_cast<bool>(os), ErrorKind::kData, "cannot write " + path.string());
    for (const auto& [k, v] : resolved_) os << k << " = " << v << "\n";
  }

 private:
  static double parse_double(const std::string& key, const std::string& s) {
    if (s == "inf") return std::numeric_limits<double>::infinity();
    char* end = nullptr;
    errno = 0;
    const double v = std::strtod(s.c_str(), &end);
    require(end != s.c_str() && *end == '\0' && errno == 0, ErrorKind::kConfig,
            "setting '" + key + "' expects a number, got '" + s + "'");
    return v;
  }

  static std::uint64_t parse_u64(const std::string& key, const std::string& s) {
    char* end = nullptr;
    errno = 0;
    const unsigned long long v = std::strtoull(s.c_str(), &end, 10);
    require(!s.empty() && s[0] != '-' && end != s.c_str() && *end == '\0' && errno == 0, ErrorKind::kConfig,
            "setting '" + key + "' expects a non-negative integer, got '" + s + "'");
    return v;
  }

  std::string record(const std::string& key, const std::string& value) {
    resolved_[key] = value;
    return value;
  }

  double record_number(const std::string& key, double v) {
    record(key, binio::format_number(v));
    return v;
  }

  std::map<std::string, std::string> values_;
  std::map<std::string, std::string> resolved_;
};

}  // namespace mnmef
