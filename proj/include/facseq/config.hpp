#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "facseq/errors.hpp"

namespace facseq {

/// Line-based `key = value` document. Blank lines and lines starting with '#'
/// are ignored. Keys are kept sorted so that written documents are canonical.
class KeyValueDoc {
 public:
  static KeyValueDoc parse(std::istream& in, const std::string& source = "<config>") {
    KeyValueDoc doc;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto first = line.find_first_not_of(" \t\r");
      if (first == std::string::npos || line[first] == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw ConfigError(source + ":" + std::to_string(lineno) + ": expected 'key = value'");
      }
      std::string key = trim(line.substr(0, eq));
      std::string value = trim(line.substr(eq + 1));
      if (key.empty()) throw ConfigError(source + ":" + std::to_string(lineno) + ": empty key");
      doc.values_[key] = value;
    }
    return doc;
  }

  static KeyValueDoc load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path.string());
    return parse(in, path.string());
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << str();
    if (!out) throw IoError("write failed for " + path.string());
  }

  std::string str() const {
    std::ostringstream os;
    for (const auto& [k, v] : values_) os << k << " = " << v << "\n";
    return os.str();
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
  void set(const std::string& key, const char* value) { values_[key] = value; }
  void set(const std::string& key, bool value) { values_[key] = value ? "true" : "false"; }
  template <class T>
    requires std::is_arithmetic_v<T>
  void set(const std::string& key, T value) {
    values_[key] = format_number(value);
  }
  void set(const std::string& key, const std::vector<std::size_t>& list) {
    std::string s;
    for (std::size_t i = 0; i < list.size(); ++i) s += (i ? "," : "") + std::to_string(list[i]);
    values_[key] = s;
  }

  /// Copies every entry of `other` over this document.
  void merge(const KeyValueDoc& other) {
    for (const auto& [k, v] : other.values_) values_[k] = v;
  }

  const std::string& raw(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("missing key '" + key + "'");
    return it->second;
  }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    return has(key) ? raw(key) : fallback;
  }

  bool get_bool(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    const auto& v = raw(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("key '" + key + "': expected a boolean, got '" + v + "'");
  }

  template <class T>
  T get(const std::string& key, T fallback) const {
    if (!has(key)) return fallback;
    return parse_number<T>(key, raw(key));
  }

  std::vector<std::size_t> get_list(const std::string& key, std::vector<std::size_t> fallback) const {
    if (!has(key)) return fallback;
    std::vector<std::size_t> out;
    std::stringstream ss(raw(key));
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      if (!item.empty()) out.push_back(parse_number<std::size_t>(key, item));
    }
    return out;
  }

  const std::map<std::string, std::string>& entries() const noexcept { return values_; }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  template <class T>
  static std::string format_number(T v) {
    if constexpr (std::is_floating_point_v<T>) {
      char buf[64];
      auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
      return std::string(buf, p);
    } else {
      return std::to_string(v);
    }
  }

  template <class T>
  static T parse_number(const std::string& key, const std::string& s) {
    T v{};
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) {
      throw ConfigError("key '" + key + "': cannot parse '" + s + "'");
    }
    return v;
  }

  std::map<std::string, std::string> values_;
};

}  // namespace facseq
