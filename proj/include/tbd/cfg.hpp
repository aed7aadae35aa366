#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "tbd/error.hpp"

namespace tbd::cfg {

/// Flat view of a sectioned key-value config file. Keys are stored as
/// "section.key"; flag overrides land in the same map, so lookups never care
/// where a value came from.
struct KV {
  std::map<std::string, std::string> values;

  bool has(const std::string& key) const { return values.count(key) != 0; }
  void set(const std::string& key, const std::string& value) { values[key] = value; }

  std::string get_str(const std::string& key, const std::string& fallback) const;
  std::string require_str(const std::string& key) const;
  int64_t get_int(const std::string& key, int64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  uint64_t get_u64(const std::string& key, uint64_t fallback) const;

  /// Reject unknown keys under `section` (typo guard; other sections are
  /// someone else's business, so a single file can drive every subcommand).
  void restrict_keys(const std::string& section, const std::vector<std::string>& allowed) const;
};

/// `[section]` headers, `key = value` pairs, `#` comments, blank lines.
/// Values keep internal whitespace; surrounding whitespace is trimmed.
KV parse_config_text(const std::string& text, const std::string& origin = "<config>");
KV parse_config_file(const std::string& path);

}  // namespace tbd::cfg
