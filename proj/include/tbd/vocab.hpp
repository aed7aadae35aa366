#pragma once

#include <string>
#include <vector>

#include "tbd/error.hpp"

namespace tbd {

// Closed attribute vocabularies for scenes and answers. The answer list has a
// fixed order documented in every dataset header: yes, no, 0..8, colors,
// shapes, sizes, materials (26 labels).
const std::vector<std::string>& color_names();     // 8
const std::vector<std::string>& shape_names();     // cube, sphere, cylinder
const std::vector<std::string>& size_names();      // large, small
const std::vector<std::string>& material_names();  // metal, rubber
const std::vector<std::string>& attribute_kinds(); // color, shape, size, material

const std::vector<std::string>& answer_vocab();    // 26 entries
int answer_index(const std::string& answer);       // format error on unknown

/// All values usable as an attention filter argument: the union of the four
/// attribute vocabularies (15 values). Filter kind is recoverable from the
/// value since the vocabularies are disjoint.
const std::vector<std::string>& attention_values();
/// Which attribute family a value belongs to ("color", "shape", ...).
const std::string& attribute_kind_of(const std::string& value);

// -- program token inventory ------------------------------------------------

enum class TokenKind {
  attention,
  relate,
  same,
  query,
  compare,
  logical_and,
  logical_or,
  unique,
  scene,
};

struct TokenInfo {
  TokenKind kind;
  std::string arg;    // bracket argument or query/compare suffix, "" otherwise
  int arity;          // number of child calls
  bool has_params;    // binds a ParamBank
  bool yields_encoding;  // true: Encoding output; false: Attention output
};

/// Classify a program token against the closed inventory. Throws a format
/// error naming the token when it is not in the inventory.
TokenInfo classify_token(const std::string& token);
bool is_valid_token(const std::string& token);

}  // namespace tbd
