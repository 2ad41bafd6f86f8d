#pragma once

#include <initializer_list>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "e2kd/errors.hpp"

namespace e2kd {

using json = nlohmann::json;

/// Rejects any key of `obj` not in `allowed`. Config files are strict.
inline void require_known_keys(const json& obj, std::initializer_list<std::string_view> allowed,
                               std::string_view context) {
  if (!obj.is_object()) throw ConfigError(std::string(context) + ": expected a JSON object");
  for (const auto& [key, _] : obj.items()) {
    bool known = false;
    for (auto a : allowed) known = known || (a == key);
    if (!known) throw ConfigError(std::string(context) + ": unknown key '" + key + "'");
  }
}

/// Reads obj[key] into `out` if present, wrapping type errors as ConfigError.
template <typename T>
void read_optional(const json& obj, const char* key, T& out, std::string_view context) {
  if (!obj.contains(key) || obj.at(key).is_null()) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string(context) + ": bad value for '" + key + "'");
  }
}

}  // namespace e2kd
