#pragma once

#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "segan/error.hpp"

namespace segan {

/// Reads optional fields from a JSON object and rejects keys nobody asked for.
class StrictObject {
 public:
  StrictObject(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(label("") + ": expected an object");
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(label(key) + ": " + e.what());
    }
  }

  bool has(const std::string& key) const { return j_.contains(key); }
  const nlohmann::json& sub(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }
  std::string label(const std::string& key) const {
    if (key.empty()) return path_.empty() ? "<root>" : path_;
    return path_.empty() ? key : path_ + "." + key;
  }

  void finish() const {
    for (const auto& item : j_.items())
      if (!seen_.count(item.key())) throw ConfigError(label(item.key()) + ": unknown key");
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace segan
