#include "tbd/program.hpp"

#include <sstream>

namespace tbd::prog {

namespace {

struct Parser {
  const std::string& text;
  size_t pos = 0;

  [[noreturn]] void fail(const std::string& msg, size_t at) {
    throw Error(ErrorCategory::format,
                "parse error at byte " + std::to_string(at) + ": " + msg);
  }

  void skip_ws() {
    while (pos < text.size() && (text[pos] == ' ' || text[pos] == '\t' ||
                                 text[pos] == '\n' || text[pos] == '\r')) {
      ++pos;
    }
  }

  bool name_char(char c) const {
    return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '_' || c == '-';
  }

  std::string read_token(size_t& token_start) {
    skip_ws();
    token_start = pos;
    if (pos >= text.size()) fail("expected a token, found end of input", pos);
    std::string name;
    while (pos < text.size() && name_char(text[pos])) name += text[pos++];
    if (name.empty()) {
      fail(std::string("expected a token, found '") + text[pos] + "'", pos);
    }
    if (pos < text.size() && text[pos] == '[') {
      const size_t close = text.find(']', pos);
      if (close == std::string::npos) fail("unterminated '[' in token", pos);
      name += text.substr(pos, close - pos + 1);
      pos = close + 1;
    }
    return name;
  }

  std::unique_ptr<Node> parse_call() {
    size_t token_start = 0;
    const std::string token = read_token(token_start);
    TokenInfo info;
    try {
      info = classify_token(token);
    } catch (const Error& e) {
      fail(e.what(), token_start);
    }
    auto node = std::make_unique<Node>();
    node->token = token;
    node->info = info;
    if (info.kind == TokenKind::scene) return node;

    skip_ws();
    if (pos >= text.size() || text[pos] != '(') {
      fail("token '" + token + "' expects an argument list", pos);
    }
    ++pos;
    node->children.push_back(parse_call());
    skip_ws();
    while (pos < text.size() && text[pos] == ',') {
      ++pos;
      node->children.push_back(parse_call());
      skip_ws();
    }
    if (pos >= text.size() || text[pos] != ')') {
      fail("expected ')' closing '" + token + "'", pos);
    }
    ++pos;
    if (static_cast<int>(node->children.size()) != info.arity) {
      fail("token '" + token + "' takes " + std::to_string(info.arity) +
               " argument(s), got " + std::to_string(node->children.size()),
           token_start);
    }
    return node;
  }
};

void print_rec(const Node& n, std::string& out) {
  out += n.token;
  if (n.info.kind == TokenKind::scene) return;
  out += '(';
  for (size_t i = 0; i < n.children.size(); ++i) {
    if (i) out += ',';
    print_rec(*n.children[i], out);
  }
  out += ')';
}

// true if the node produces an Encoding, false for an attention mask
bool check_rec(const Node& n) {
  std::vector<bool> child_kinds;
  child_kinds.reserve(n.children.size());
  for (const auto& c : n.children) child_kinds.push_back(check_rec(*c));

  auto want_attention = [&](size_t i) {
    if (child_kinds[i]) {
      throw Error(ErrorCategory::format,
                  "type error: argument " + std::to_string(i + 1) + " of '" +
                      n.token + "' produces an encoding, needs an attention mask");
    }
  };
  auto want_encoding = [&](size_t i) {
    if (!child_kinds[i]) {
      throw Error(ErrorCategory::format,
                  "type error: argument " + std::to_string(i + 1) + " of '" +
                      n.token + "' produces an attention mask, needs an encoding");
    }
  };

  switch (n.info.kind) {
    case TokenKind::scene:
      break;
    case TokenKind::attention:
    case TokenKind::relate:
    case TokenKind::same:
    case TokenKind::unique:
    case TokenKind::query:
      want_attention(0);
      break;
    case TokenKind::logical_and:
    case TokenKind::logical_or:
      want_attention(0);
      want_attention(1);
      break;
    case TokenKind::compare:
      want_encoding(0);
      want_encoding(1);
      break;
  }
  return n.info.yields_encoding;
}

int assemble_rec(const Node& n, nn::BankRegistry& registry, ProgramGraph& g) {
  GraphNode gn;
  gn.token = n.token;
  gn.info = n.info;
  for (const auto& c : n.children) {
    gn.children.push_back(assemble_rec(*c, registry, g));
  }
  if (n.info.has_params) gn.bank = &registry.bank(n.token);
  g.nodes.push_back(std::move(gn));
  return static_cast<int>(g.nodes.size()) - 1;
}

}  // namespace

std::unique_ptr<Node> parse_program(const std::string& text) {
  Parser p{text};
  auto root = p.parse_call();
  p.skip_ws();
  if (p.pos != text.size()) {
    p.fail("trailing input after program", p.pos);
  }
  return root;
}

std::string print_program(const Node& root) {
  std::string out;
  print_rec(root, out);
  return out;
}

void type_check(const Node& root) {
  if (!check_rec(root)) {
    throw Error(ErrorCategory::format,
                "type error: root '" + root.token +
                    "' produces an attention mask; the classifier needs an encoding");
  }
}

ProgramGraph assemble(const Node& root, nn::BankRegistry& registry) {
  ProgramGraph g;
  g.registry = &registry;
  assemble_rec(root, registry, g);
  // the stem and classifier participate in every program
  registry.bank("stem");
  registry.bank("classifier");
  return g;
}

Trace execute(const ProgramGraph& graph, const Tensor& image) {
  if (graph.registry == nullptr || graph.nodes.empty()) {
    throw Error(ErrorCategory::state, "execute: graph is not assembled");
  }
  nn::BankRegistry& reg = *graph.registry;
  Trace trace;
  trace.stem = nn::run_stem(image, reg.bank("stem"));
  const int rows = trace.stem.dim(1);
  const int cols = trace.stem.dim(2);
  trace.outputs.resize(graph.nodes.size());

  for (size_t i = 0; i < graph.nodes.size(); ++i) {
    const GraphNode& n = graph.nodes[i];
    auto child = [&](int k) -> const Tensor& {
      return trace.outputs[static_cast<size_t>(n.children[static_cast<size_t>(k)])];
    };
    try {
      switch (n.info.kind) {
        case TokenKind::scene:
          trace.outputs[i] = nn::all_ones_mask(rows, cols);
          break;
        case TokenKind::attention:
          trace.outputs[i] = nn::run_attention(trace.stem, child(0), *n.bank);
          break;
        case TokenKind::relate:
          trace.outputs[i] = nn::run_relate(trace.stem, child(0), *n.bank);
          break;
        case TokenKind::same:
          trace.outputs[i] = nn::run_same(trace.stem, child(0), *n.bank);
          break;
        case TokenKind::unique:
          trace.outputs[i] = child(0);
          break;
        case TokenKind::logical_and:
          trace.outputs[i] = nn::run_and(child(0), child(1));
          break;
        case TokenKind::logical_or:
          trace.outputs[i] = nn::run_or(child(0), child(1));
          break;
        case TokenKind::query:
          trace.outputs[i] = nn::run_query(trace.stem, child(0), *n.bank);
          break;
        case TokenKind::compare:
          trace.outputs[i] = nn::run_compare(child(0), child(1), *n.bank);
          break;
      }
    } catch (const Error& e) {
      throw Error(e.category(), "at node " + std::to_string(i) + " ('" +
                                    n.token + "'): " + e.what());
    }
  }
  trace.logits =
      nn::run_classifier(trace.outputs[static_cast<size_t>(graph.root())],
                         reg.bank("classifier"));
  return trace;
}

ProgramGraph compile(const std::string& text, nn::BankRegistry& registry) {
  auto tree = parse_program(text);
  type_check(*tree);
  return assemble(*tree, registry);
}

}  // namespace tbd::prog
