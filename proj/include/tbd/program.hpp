#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "tbd/nn.hpp"
#include "tbd/tensor.hpp"
#include "tbd/vocab.hpp"

namespace tbd::prog {

/// One call in a reasoning program. Children are ordered; arity and output
/// kind follow the token inventory.
struct Node {
  std::string token;
  TokenInfo info;
  std::vector<std::unique_ptr<Node>> children;
};

/// Parse `token(child, ...)` call syntax. Whitespace-insensitive. Errors
/// carry the byte offset of the offending character in the message.
std::unique_ptr<Node> parse_program(const std::string& text);

/// Canonical form: no whitespace, `scene` leaves bare.
std::string print_program(const Node& root);

/// Verify arities and the signature algebra: attention/relate/same/unique
/// take one Attention child, and/or take two, query takes one, compare takes
/// two Encoding children, and the root must produce an Encoding for the
/// classifier. Throws a format error naming the offending token.
void type_check(const Node& root);

/// A program bound to shared parameter banks, flattened so that every node
/// appears after its children (children hold indices into `nodes`).
struct GraphNode {
  std::string token;
  TokenInfo info;
  std::vector<int> children;
  nn::ParamBank* bank = nullptr;  // null for scene/unique/and/or
};

struct ProgramGraph {
  std::vector<GraphNode> nodes;  // post-order; last node is the root
  nn::BankRegistry* registry = nullptr;

  int root() const { return static_cast<int>(nodes.size()) - 1; }
};

/// Bind a type-checked tree to banks from the registry. Identical tokens
/// share one bank across all graphs built from the same registry.
ProgramGraph assemble(const Node& root, nn::BankRegistry& registry);

/// Everything a forward run produces: classifier logits plus each node's
/// output tensor (mask or encoding), aligned with graph.nodes.
struct Trace {
  Tensor stem;                  // [d,R,C]
  std::vector<Tensor> outputs;  // per node
  Tensor logits;                // [K]
};

/// Run the program on one rendered image. The stem runs once; scene nodes
/// yield the all-one mask; the root encoding feeds the shared classifier.
Trace execute(const ProgramGraph& graph, const Tensor& image);

/// Convenience: parse + type-check + assemble.
ProgramGraph compile(const std::string& text, nn::BankRegistry& registry);

}  // namespace tbd::prog
