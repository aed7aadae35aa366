#include "tbd/cfg.hpp"

#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>

namespace tbd::cfg {

namespace {

std::string trim(const std::string& s) {
  size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

bool valid_name(const std::string& s) {
  if (s.empty()) return false;
  for (char c : s) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_') return false;
  }
  return true;
}

[[noreturn]] void bad_value(const std::string& key, const std::string& raw, const char* want) {
  throw Error(ErrorCategory::config,
              "config key '" + key + "': cannot parse '" + raw + "' as " + want);
}

}  // namespace

std::string KV::get_str(const std::string& key, const std::string& fallback) const {
  auto it = values.find(key);
  return it == values.end() ? fallback : it->second;
}

std::string KV::require_str(const std::string& key) const {
  auto it = values.find(key);
  if (it == values.end() || it->second.empty()) {
    throw Error(ErrorCategory::config, "missing required config key '" + key + "'");
  }
  return it->second;
}

int64_t KV::get_int(const std::string& key, int64_t fallback) const {
  auto it = values.find(key);
  if (it == values.end()) return fallback;
  const std::string& raw = it->second;
  int64_t out = 0;
  auto [ptr, ec] = std::from_chars(raw.data(), raw.data() + raw.size(), out);
  if (ec != std::errc() || ptr != raw.data() + raw.size()) bad_value(key, raw, "an integer");
  return out;
}

uint64_t KV::get_u64(const std::string& key, uint64_t fallback) const {
  auto it = values.find(key);
  if (it == values.end()) return fallback;
  const std::string& raw = it->second;
  uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(raw.data(), raw.data() + raw.size(), out);
  if (ec != std::errc() || ptr != raw.data() + raw.size()) {
    bad_value(key, raw, "a non-negative integer");
  }
  return out;
}

double KV::get_double(const std::string& key, double fallback) const {
  auto it = values.find(key);
  if (it == values.end()) return fallback;
  const std::string& raw = it->second;
  try {
    size_t used = 0;
    double out = std::stod(raw, &used);
    if (used != raw.size()) bad_value(key, raw, "a number");
    return out;
  } catch (const std::logic_error&) {
    bad_value(key, raw, "a number");
  }
}

bool KV::get_bool(const std::string& key, bool fallback) const {
  auto it = values.find(key);
  if (it == values.end()) return fallback;
  const std::string& raw = it->second;
  if (raw == "true" || raw == "1") return true;
  if (raw == "false" || raw == "0") return false;
  bad_value(key, raw, "a boolean (true/false/1/0)");
}

void KV::restrict_keys(const std::string& section, const std::vector<std::string>& allowed) const {
  const std::string prefix = section + ".";
  for (const auto& [key, _] : values) {
    if (key.rfind(prefix, 0) != 0) continue;
    const std::string name = key.substr(prefix.size());
    bool known = false;
    for (const auto& a : allowed) known = known || a == name;
    if (!known) {
      throw Error(ErrorCategory::config,
                  "unknown config key '" + key + "' in section [" + section + "]");
    }
  }
}

KV parse_config_text(const std::string& text, const std::string& origin) {
  KV kv;
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  auto fail = [&](const std::string& what) {
    throw Error(ErrorCategory::config, origin + ":" + std::to_string(lineno) + ": " + what);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') fail("unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      if (!valid_name(section)) fail("bad section name '" + section + "'");
      continue;
    }
    auto eq = line.find('=');
    if (eq == std::string::npos) fail("expected 'key = value'");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (!valid_name(key)) fail("bad key name '" + key + "'");
    if (section.empty()) fail("key '" + key + "' before any [section]");
    std::string full = section + "." + key;
    if (kv.has(full)) fail("duplicate key '" + full + "'");
    kv.set(full, value);
  }
  return kv;
}

KV parse_config_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in.good()) throw Error(ErrorCategory::io, "cannot open config file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str(), path);
}

}  // namespace tbd::cfg
