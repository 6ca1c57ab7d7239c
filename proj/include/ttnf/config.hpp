#pragma once

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <type_traits>
#include <string>
#include <vector>

#include <json.hpp>

#include "ttnf/error.hpp"

namespace ttnf {

// A parsed JSON config plus its source text, for line-numbered messages.
struct ConfigDoc {
  nlohmann::json root;
  std::string text;
  std::string source = "<config>";

  // 1-based line of the first `"key":` in the source, 0 when absent.
  std::size_t line_of(const std::string& key) const {
    const std::string needle = "\"" + key + "\"";
    std::size_t pos = 0;
    while ((pos = text.find(needle, pos)) != std::string::npos) {
      std::size_t after = pos + needle.size();
      while (after < text.size() && std::isspace(static_cast<unsigned char>(text[after]))) ++after;
      if (after < text.size() && text[after] == ':')
        return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<long>(pos), '\n'));
      pos = after;
    }
    return 0;
  }

  std::string where(const std::string& key) const {
    const std::size_t l = line_of(key);
    return l ? source + ":" + std::to_string(l) : source;
  }
};

inline ConfigDoc parse_config_text(const std::string& text, const std::string& source = "<config>") {
  ConfigDoc doc;
  doc.text = text;
  doc.source = source;
  try {
    doc.root = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    const std::size_t upto = std::min<std::size_t>(e.byte, text.size());
    std::size_t line = 1, col = 1;
    for (std::size_t i = 0; i + 1 < upto; ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    throw ConfigError(source + ":" + std::to_string(line) + ":" + std::to_string(col) + ": invalid JSON: " + e.what());
  }
  if (!doc.root.is_object()) throw ConfigError(source + ":1: config must be a JSON object");
  return doc;
}

inline ConfigDoc load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str(), path.string());
}

// Rejects keys of `obj` outside `allowed`.
inline void check_keys(const ConfigDoc& doc, const nlohmann::json& obj, const std::set<std::string>& allowed,
                       const std::string& context) {
  for (auto it = obj.begin(); it != obj.end(); ++it)
    if (!allowed.count(it.key())) {
      std::string known;
      for (const auto& k : allowed) known += (known.empty() ? "" : ", ") + k;
      throw ConfigError(doc.where(it.key()) + ": unknown key '" + it.key() + "' in " + context + " (allowed: " + known + ")");
    }
}

// Environment variable for a config key: `rays_per_batch` <- TTNF_RAYS_PER_BATCH.
inline std::string env_name(const std::string& key) {
  std::string s = "TTNF_";
  for (char c : key) s += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

using EnvLookup = std::function<const char*(const char*)>;

// Overrides top-level keys from the environment. Values are parsed as JSON
// and fall back to a plain string. Returns the applied variable names.
inline std::vector<std::string> apply_env_overrides(ConfigDoc& doc, const std::set<std::string>& keys,
                                                    const EnvLookup& lookup = [](const char* n) { return std::getenv(n); }) {
  std::vector<std::string> applied;
  for (const auto& k : keys) {
    const std::string name = env_name(k);
    const char* v = lookup(name.c_str());
    if (!v) continue;
    try {
      doc.root[k] = nlohmann::json::parse(v);
    } catch (const nlohmann::json::parse_error&) {
      doc.root[k] = std::string(v);
    }
    applied.push_back(name);
  }
  return applied;
}

// Typed lookup with a default; type errors name the key and its line.
template <typename V>
V get_or(const ConfigDoc& doc, const nlohmann::json& obj, const std::string& key, const V& fallback) {
  if (!obj.contains(key) || obj.at(key).is_null()) return fallback;
  if constexpr (std::is_unsigned_v<V> && !std::is_same_v<V, bool>) {
    const auto& v = obj.at(key);
    if (!v.is_number_unsigned())
      throw ConfigError(doc.where(key) + ": '" + key + "' must be a nonnegative integer");
  }
  try {
    return obj.at(key).get<V>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(doc.where(key) + ": bad value for '" + key + "': " + e.what());
  }
}

// Accepts a scalar or a list of scalars.
template <typename V>
std::vector<V> get_list_or(const ConfigDoc& doc, const nlohmann::json& obj, const std::string& key,
                           const std::vector<V>& fallback) {
  if (!obj.contains(key) || obj.at(key).is_null()) return fallback;
  try {
    const auto& v = obj.at(key);
    if constexpr (std::is_unsigned_v<V> && !std::is_same_v<V, bool>) {
      const bool ok = v.is_array() ? std::all_of(v.begin(), v.end(), [](const auto& e) { return e.is_number_unsigned(); })
                                   : v.is_number_unsigned();
      if (!ok) throw ConfigError(doc.where(key) + ": '" + key + "' must hold nonnegative integers");
    }
    if (v.is_array()) return v.get<std::vector<V>>();
    return {v.get<V>()};
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(doc.where(key) + ": bad value for '" + key + "': " + e.what());
  }
}

}  // namespace ttnf
