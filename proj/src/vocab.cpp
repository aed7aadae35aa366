#include "tbd/vocab.hpp"

#include <algorithm>
#include <map>

namespace tbd {

const std::vector<std::string>& color_names() {
  static const std::vector<std::string> v = {"gray",  "blue",  "brown",  "yellow",
                                             "red",   "green", "purple", "cyan"};
  return v;
}

const std::vector<std::string>& shape_names() {
  static const std::vector<std::string> v = {"cube", "sphere", "cylinder"};
  return v;
}

const std::vector<std::string>& size_names() {
  static const std::vector<std::string> v = {"large", "small"};
  return v;
}

const std::vector<std::string>& material_names() {
  static const std::vector<std::string> v = {"metal", "rubber"};
  return v;
}

const std::vector<std::string>& attribute_kinds() {
  static const std::vector<std::string> v = {"color", "shape", "size", "material"};
  return v;
}

const std::vector<std::string>& answer_vocab() {
  static const std::vector<std::string> v = [] {
    std::vector<std::string> a = {"yes", "no"};
    for (int i = 0; i <= 8; ++i) a.push_back(std::to_string(i));
    for (const auto& c : color_names()) a.push_back(c);
    for (const auto& s : shape_names()) a.push_back(s);
    for (const auto& s : size_names()) a.push_back(s);
    for (const auto& m : material_names()) a.push_back(m);
    return a;
  }();
  return v;
}

int answer_index(const std::string& answer) {
  const auto& v = answer_vocab();
  auto it = std::find(v.begin(), v.end(), answer);
  if (it == v.end()) {
    throw Error(ErrorCategory::format, "unknown answer label '" + answer + "'");
  }
  return static_cast<int>(it - v.begin());
}

const std::vector<std::string>& attention_values() {
  static const std::vector<std::string> v = [] {
    std::vector<std::string> a;
    for (const auto& c : color_names()) a.push_back(c);
    for (const auto& s : shape_names()) a.push_back(s);
    for (const auto& s : size_names()) a.push_back(s);
    for (const auto& m : material_names()) a.push_back(m);
    return a;
  }();
  return v;
}

const std::string& attribute_kind_of(const std::string& value) {
  static const std::map<std::string, std::string> table = [] {
    std::map<std::string, std::string> t;
    for (const auto& c : color_names()) t[c] = "color";
    for (const auto& s : shape_names()) t[s] = "shape";
    for (const auto& s : size_names()) t[s] = "size";
    for (const auto& m : material_names()) t[m] = "material";
    return t;
  }();
  auto it = table.find(value);
  if (it == table.end()) {
    throw Error(ErrorCategory::format, "unknown attribute value '" + value + "'");
  }
  return it->second;
}

namespace {

bool contains(const std::vector<std::string>& v, const std::string& s) {
  return std::find(v.begin(), v.end(), s) != v.end();
}

}  // namespace

TokenInfo classify_token(const std::string& token) {
  if (token == "scene") return {TokenKind::scene, "", 0, false, false};
  if (token == "unique") return {TokenKind::unique, "", 1, false, false};
  if (token == "and") return {TokenKind::logical_and, "", 2, false, false};
  if (token == "or") return {TokenKind::logical_or, "", 2, false, false};

  const auto lb = token.find('[');
  if (lb != std::string::npos) {
    if (token.back() != ']') {
      throw Error(ErrorCategory::format, "malformed token '" + token + "'");
    }
    const std::string head = token.substr(0, lb);
    const std::string arg = token.substr(lb + 1, token.size() - lb - 2);
    if (head == "attention") {
      if (!contains(attention_values(), arg)) {
        throw Error(ErrorCategory::format,
                    "unknown attention value '" + arg + "' in token '" + token + "'");
      }
      return {TokenKind::attention, arg, 1, true, false};
    }
    if (head == "relate") {
      static const std::vector<std::string> dirs = {"left", "right", "front", "behind"};
      if (!contains(dirs, arg)) {
        throw Error(ErrorCategory::format,
                    "unknown relation '" + arg + "' in token '" + token + "'");
      }
      return {TokenKind::relate, arg, 1, true, false};
    }
    if (head == "same") {
      if (!contains(attribute_kinds(), arg)) {
        throw Error(ErrorCategory::format,
                    "unknown attribute kind '" + arg + "' in token '" + token + "'");
      }
      return {TokenKind::same, arg, 1, true, false};
    }
    throw Error(ErrorCategory::format, "unknown token '" + token + "'");
  }

  if (token.rfind("query_", 0) == 0) {
    const std::string arg = token.substr(6);
    static const std::vector<std::string> ok = {"color", "shape",  "size",
                                                "material", "exist", "count"};
    if (!contains(ok, arg)) {
      throw Error(ErrorCategory::format, "unknown query token '" + token + "'");
    }
    return {TokenKind::query, arg, 1, true, true};
  }
  if (token.rfind("compare_", 0) == 0) {
    const std::string arg = token.substr(8);
    static const std::vector<std::string> ok = {
        "color", "shape", "size", "material", "integer-equal", "greater", "less"};
    if (!contains(ok, arg)) {
      throw Error(ErrorCategory::format, "unknown compare token '" + token + "'");
    }
    return {TokenKind::compare, arg, 2, true, true};
  }
  throw Error(ErrorCategory::format, "unknown token '" + token + "'");
}

bool is_valid_token(const std::string& token) {
  try {
    classify_token(token);
    return true;
  } catch (const Error&) {
    return false;
  }
}

}  // namespace tbd
