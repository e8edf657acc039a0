#pragma once

// Strict reading of JSON configuration objects: every key must be consumed,
// and missing or mistyped keys are reported by their dotted path.

#include <set>
#include <string>
#include <type_traits>
#include <utility>

#include <json.hpp>

#include "errors.hpp"

namespace s2d {

class ConfigReader {
public:
  ConfigReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + ": expected a JSON object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <class T>
  T get(const std::string& key) {
    if (!j_.contains(key)) throw ConfigError("missing required key '" + qualify(key) + "'");
    return convert<T>(key);
  }

  template <class T>
  T get_or(const std::string& key, T fallback) {
    if (!j_.contains(key)) return fallback;
    return convert<T>(key);
  }

  /// Nested object reader; the key counts as consumed.
  ConfigReader child(const std::string& key) {
    if (!j_.contains(key)) throw ConfigError("missing required key '" + qualify(key) + "'");
    used_.insert(key);
    return ConfigReader(j_.at(key), qualify(key));
  }

  /// Throws on the first key that was never read.
  void finish() const {
    for (const auto& [key, _] : j_.items())
      if (!used_.count(key)) throw ConfigError("unknown key '" + qualify(key) + "'");
  }

  std::string qualify(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

private:
  std::string where() const { return path_.empty() ? "config" : path_; }

  template <class T>
  T convert(const std::string& key) {
    used_.insert(key);
    const auto& v = j_.at(key);
    if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
      if (!v.is_number_integer() || (std::is_unsigned_v<T> && v.is_number_integer() && !v.is_number_unsigned() &&
                                     v.template get<long long>() < 0))
        throw ConfigError("key '" + qualify(key) + "' must be a" + (std::is_unsigned_v<T> ? " non-negative" : "n") +
                          " integer (got " + v.dump() + ")");
    }
    try {
      return j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("key '" + qualify(key) + "' has the wrong type (got " + j_.at(key).dump() + ")");
    }
  }

  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> used_;
};

} // namespace s2d
