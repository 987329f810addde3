#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "pose6d/errors.hpp"

namespace pose6d {

namespace detail {

inline std::string trimmed(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace detail

/// Flat key=value configuration. Blank lines and '#' comments are skipped;
/// keys may not repeat.
class ConfigMap {
 public:
  static ConfigMap parse(const std::string& text, const std::string& origin = "<config>") {
    ConfigMap cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      std::string body = line.substr(0, line.find('#'));
      body = detail::trimmed(body);
      if (body.empty()) continue;
      std::size_t eq = body.find('=');
      if (eq == std::string::npos)
        throw config_error(origin + ":" + std::to_string(lineno) + ": expected key=value");
      std::string key = detail::trimmed(body.substr(0, eq));
      std::string value = detail::trimmed(body.substr(eq + 1));
      if (key.empty()) throw config_error(origin + ":" + std::to_string(lineno) + ": empty key");
      if (!cfg.values_.emplace(key, value).second)
        throw config_error(origin + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
    }
    return cfg;
  }

  static ConfigMap load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw data_error("cannot open config: " + path);
    std::ostringstream text;
    text << in.rdbuf();
    return parse(text.str(), path);
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  int get_int(const std::string& key, int fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      std::size_t used = 0;
      int v = std::stoi(it->second, &used);
      if (used != it->second.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw config_error("config key '" + key + "' is not an integer: " + it->second);
    }
  }

  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      std::size_t used = 0;
      unsigned long long v = std::stoull(it->second, &used);
      if (used != it->second.size()) throw std::invalid_argument("trailing");
      return std::uint64_t(v);
    } catch (const std::exception&) {
      throw config_error("config key '" + key + "' is not an unsigned integer: " + it->second);
    }
  }

  double get_double(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      std::size_t used = 0;
      double v = std::stod(it->second, &used);
      if (used != it->second.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw config_error("config key '" + key + "' is not a number: " + it->second);
    }
  }

  bool get_bool(const std::string& key, bool fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    const std::string& v = it->second;
    if (v == "true" || v == "yes" || v == "1") return true;
    if (v == "false" || v == "no" || v == "0") return false;
    throw config_error("config key '" + key + "' is not a boolean: " + v);
  }

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace pose6d
