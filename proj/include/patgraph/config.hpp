#pragma once

#include <charconv>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "patgraph/error.hpp"
#include "patgraph/text.hpp"

namespace patgraph {

/// Flat `key = value` settings; '#' starts a comment. Every key must be
/// consumed by exactly one reader, so typos surface as UsageError.
class KeyValues {
 public:
  KeyValues() = default;

  static KeyValues parse(std::string_view body, const std::string& origin = "<config>") {
    KeyValues kv;
    kv.origin_ = origin;
    std::istringstream in{std::string(body)};
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
      const auto trimmed = text::trim(line);
      if (trimmed.empty()) continue;
      const auto eq = trimmed.find('=');
      if (eq == std::string_view::npos) {
        throw UsageError(origin + ":" + std::to_string(lineno) + ": expected key = value");
      }
      const std::string key(text::trim(trimmed.substr(0, eq)));
      const std::string value(text::trim(trimmed.substr(eq + 1)));
      if (key.empty()) throw UsageError(origin + ":" + std::to_string(lineno) + ": empty key");
      if (!kv.values_.emplace(key, value).second) {
        throw UsageError(origin + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
      }
    }
    return kv;
  }

  static KeyValues load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path);
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  template <typename T>
  void read(const std::string& key, T& out) const {
    auto it = values_.find(key);
    if (it == values_.end()) return;
    used_.insert(key);
    const std::string& v = it->second;
    if constexpr (std::is_same_v<T, std::string>) {
      out = v;
    } else if constexpr (std::is_same_v<T, bool>) {
      if (v == "true" || v == "1") {
        out = true;
      } else if (v == "false" || v == "0") {
        out = false;
      } else {
        bad(key, v);
      }
    } else if constexpr (std::is_floating_point_v<T>) {
      try {
        size_t pos = 0;
        out = static_cast<T>(std::stod(v, &pos));
        if (pos != v.size()) bad(key, v);
      } catch (const std::logic_error&) {
        bad(key, v);
      }
    } else {
      T parsed{};
      auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), parsed);
      if (ec != std::errc() || p != v.data() + v.size()) bad(key, v);
      out = parsed;
    }
  }

  /// Throws if some key was never read.
  void require_all_used() const {
    for (const auto& [k, v] : values_) {
      if (!used_.count(k)) throw UsageError(origin_ + ": unknown key '" + k + "'");
    }
  }

 private:
  [[noreturn]] void bad(const std::string& key, const std::string& v) const {
    throw UsageError(origin_ + ": invalid value '" + v + "' for '" + key + "'");
  }

  std::string origin_ = "<config>";
  std::map<std::string, std::string> values_;
  mutable std::set<std::string> used_;
};

}  // namespace patgraph
