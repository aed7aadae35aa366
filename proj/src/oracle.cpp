#include "tbd/oracle.hpp"

#include <algorithm>
#include <chrono>
#include <random>
#include <sstream>

namespace tbd::oracle {

using prog::Node;
using scene::Scene;
using scene::SceneObject;
using scene::SymResult;

namespace {

// --- reference evaluator -----------------------------------------------

struct RefVal {
  enum Tag { undef, set, count, boolean, attr } tag = undef;
  std::vector<int> ids;  // ascending
  int kind = 0;
  int value = 0;
};

int ref_attr(const SceneObject& o, const std::string& kind) {
  if (kind == "color") return o.color;
  if (kind == "shape") return o.shape;
  if (kind == "size") return o.size;
  if (kind == "material") return o.material;
  throw Error(ErrorCategory::state, "bad attribute kind '" + kind + "'");
}

int ref_kind_of(const std::string& value) {
  const auto& kinds = attribute_kinds();
  for (size_t k = 0; k < kinds.size(); ++k) {
    const auto& vocab = k == 0   ? color_names()
                        : k == 1 ? shape_names()
                        : k == 2 ? size_names()
                                 : material_names();
    for (size_t v = 0; v < vocab.size(); ++v) {
      if (vocab[v] == value) return static_cast<int>(k);
    }
  }
  throw Error(ErrorCategory::format, "unknown attribute value '" + value + "'");
}

int ref_value_index(int kind, const std::string& value) {
  const auto& vocab = kind == 0   ? color_names()
                      : kind == 1 ? shape_names()
                      : kind == 2 ? size_names()
                                  : material_names();
  for (size_t v = 0; v < vocab.size(); ++v) {
    if (vocab[v] == value) return static_cast<int>(v);
  }
  throw Error(ErrorCategory::format, "unknown attribute value '" + value + "'");
}

// Strict half-plane relations, straight from the coordinate convention:
// larger col = right, larger row = in front.
bool ref_in_direction(const SceneObject& o, const SceneObject& r, const std::string& dir) {
  if (dir == "left") return o.col < r.col;
  if (dir == "right") return o.col > r.col;
  if (dir == "front") return o.row > r.row;
  if (dir == "behind") return o.row < r.row;
  throw Error(ErrorCategory::format, "unknown direction '" + dir + "'");
}

struct RefWalker {
  const Scene& s;
  SymResult& out;
  int next_index = 0;

  RefVal eval(const Node& n) {
    std::vector<RefVal> kids;
    for (const auto& c : n.children) kids.push_back(eval(*c));
    int index = next_index++;
    RefVal v;
    bool child_undef = false;
    for (const auto& k : kids) child_undef = child_undef || k.tag == RefVal::undef;
    if (!child_undef) {
      v = apply(n, kids);
    }
    if (!n.info.yields_encoding && v.tag == RefVal::set) {
      out.node_sets[static_cast<size_t>(index)] = v.ids;
    } else {
      out.node_sets[static_cast<size_t>(index)].reset();
    }
    return v;
  }

  RefVal apply(const Node& n, const std::vector<RefVal>& kids) {
    RefVal v;
    switch (n.info.kind) {
      case TokenKind::scene: {
        v.tag = RefVal::set;
        for (const auto& o : s.objects) v.ids.push_back(o.id);
        std::sort(v.ids.begin(), v.ids.end());
        break;
      }
      case TokenKind::attention: {
        int kind = ref_kind_of(n.info.arg);
        int want = ref_value_index(kind, n.info.arg);
        v.tag = RefVal::set;
        for (int id : kids[0].ids) {
          if (ref_attr(object_by_id(id), attribute_kinds()[static_cast<size_t>(kind)]) == want) {
            v.ids.push_back(id);
          }
        }
        break;
      }
      case TokenKind::relate: {
        if (kids[0].ids.size() != 1) break;
        const SceneObject& ref = object_by_id(kids[0].ids[0]);
        v.tag = RefVal::set;
        for (const auto& o : s.objects) {
          if (ref_in_direction(o, ref, n.info.arg)) v.ids.push_back(o.id);
        }
        std::sort(v.ids.begin(), v.ids.end());
        break;
      }
      case TokenKind::same: {
        if (kids[0].ids.size() != 1) break;
        const SceneObject& ref = object_by_id(kids[0].ids[0]);
        v.tag = RefVal::set;
        for (const auto& o : s.objects) {
          if (o.id != ref.id && ref_attr(o, n.info.arg) == ref_attr(ref, n.info.arg)) {
            v.ids.push_back(o.id);
          }
        }
        std::sort(v.ids.begin(), v.ids.end());
        break;
      }
      case TokenKind::unique: {
        if (kids[0].ids.size() != 1) break;
        v.tag = RefVal::set;
        v.ids = kids[0].ids;
        break;
      }
      case TokenKind::logical_and: {
        v.tag = RefVal::set;
        std::set_intersection(kids[0].ids.begin(), kids[0].ids.end(), kids[1].ids.begin(),
                              kids[1].ids.end(), std::back_inserter(v.ids));
        break;
      }
      case TokenKind::logical_or: {
        v.tag = RefVal::set;
        std::set_union(kids[0].ids.begin(), kids[0].ids.end(), kids[1].ids.begin(),
                       kids[1].ids.end(), std::back_inserter(v.ids));
        break;
      }
      case TokenKind::query: {
        if (n.info.arg == "count") {
          v.tag = RefVal::count;
          v.value = static_cast<int>(kids[0].ids.size());
        } else if (n.info.arg == "exist") {
          v.tag = RefVal::boolean;
          v.value = kids[0].ids.empty() ? 0 : 1;
        } else {
          if (kids[0].ids.size() != 1) break;
          v.tag = RefVal::attr;
          v.kind = ref_kind_of_name(n.info.arg);
          v.value = ref_attr(object_by_id(kids[0].ids[0]), n.info.arg);
        }
        break;
      }
      case TokenKind::compare: {
        if (n.info.arg == "integer-equal" || n.info.arg == "greater" ||
            n.info.arg == "less") {
          if (kids[0].tag != RefVal::count || kids[1].tag != RefVal::count) break;
          v.tag = RefVal::boolean;
          if (n.info.arg == "integer-equal") v.value = kids[0].value == kids[1].value;
          if (n.info.arg == "greater") v.value = kids[0].value > kids[1].value;
          if (n.info.arg == "less") v.value = kids[0].value < kids[1].value;
        } else {
          int kind = ref_kind_of_name(n.info.arg);
          if (kids[0].tag != RefVal::attr || kids[1].tag != RefVal::attr || kids[0].kind != kind ||
              kids[1].kind != kind) {
            break;
          }
          v.tag = RefVal::boolean;
          v.value = kids[0].value == kids[1].value;
        }
        break;
      }
    }
    return v;
  }

  static int ref_kind_of_name(const std::string& kind_name) {
    const auto& kinds = attribute_kinds();
    for (size_t i = 0; i < kinds.size(); ++i) {
      if (kinds[i] == kind_name) return static_cast<int>(i);
    }
    throw Error(ErrorCategory::format, "unknown attribute kind '" + kind_name + "'");
  }

  const SceneObject& object_by_id(int id) {
    for (const auto& o : s.objects) {
      if (o.id == id) return o;
    }
    throw Error(ErrorCategory::state, "object id " + std::to_string(id) + " missing from scene");
  }
};

int count_nodes(const Node& n) {
  int c = 1;
  for (const auto& k : n.children) c += count_nodes(*k);
  return c;
}

}  // namespace

void reference_execute(const Node& root, const Scene& s, SymResult& out) {
  out.node_sets.resize(static_cast<size_t>(count_nodes(root)));
  RefWalker w{s, out};
  RefVal v = w.eval(root);
  out.defined = v.tag != RefVal::undef;
  switch (v.tag) {
    case RefVal::undef:
      out.answer.clear();
      break;
    case RefVal::count:
      out.answer = std::to_string(v.value);
      break;
    case RefVal::boolean:
      out.answer = v.value ? "yes" : "no";
      break;
    case RefVal::attr: {
      const auto& vocab = v.kind == 0   ? color_names()
                          : v.kind == 1 ? shape_names()
                          : v.kind == 2 ? size_names()
                                        : material_names();
      out.answer = vocab[static_cast<size_t>(v.value)];
      break;
    }
    case RefVal::set:
      throw Error(ErrorCategory::state, "program root produced a mask, not an answer");
  }
}

SymResult reference_execute(const Node& root, const Scene& s) {
  SymResult out;
  reference_execute(root, s, out);
  return out;
}

// --- bounded exhaustive enumeration --------------------------------------

namespace {

std::unique_ptr<Node> make_node(const std::string& token,
                                std::vector<std::unique_ptr<Node>> children = {}) {
  auto n = std::make_unique<Node>();
  n->token = token;
  n->info = classify_token(token);
  n->children = std::move(children);
  return n;
}

std::unique_ptr<Node> clone(const Node& n) {
  auto out = std::make_unique<Node>();
  out->token = n.token;
  out->info = n.info;
  for (const auto& c : n.children) out->children.push_back(clone(*c));
  return out;
}

std::vector<Scene> enumerate_scenes(const Domain& d) {
  std::vector<int> colors, shapes;
  for (const auto& a : d.attention_args) {
    const std::string& kind = attribute_kind_of(a);
    const auto& cn = color_names();
    const auto& sn = shape_names();
    if (kind == "color") {
      colors.push_back(static_cast<int>(std::find(cn.begin(), cn.end(), a) - cn.begin()));
    } else if (kind == "shape") {
      shapes.push_back(static_cast<int>(std::find(sn.begin(), sn.end(), a) - sn.begin()));
    }
  }
  if (colors.empty() || shapes.empty()) {
    throw Error(ErrorCategory::config, "oracle domain needs at least one color and one shape");
  }
  int cells = d.grid * d.grid;
  int per_object = static_cast<int>(colors.size() * shapes.size());
  std::vector<Scene> out;
  for (int n = 0; n <= d.max_objects; ++n) {
    std::vector<int> pos(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) pos[static_cast<size_t>(i)] = i;
    bool more = n <= cells;
    while (more) {
      int64_t combos = 1;
      for (int i = 0; i < n; ++i) combos *= per_object;
      for (int64_t a = 0; a < combos; ++a) {
        Scene s;
        s.grid = d.grid;
        int64_t rest = a;
        for (int i = 0; i < n; ++i) {
          SceneObject o;
          o.id = i;
          o.row = pos[static_cast<size_t>(i)] / d.grid;
          o.col = pos[static_cast<size_t>(i)] % d.grid;
          int attr = static_cast<int>(rest % per_object);
          rest /= per_object;
          o.color = colors[static_cast<size_t>(attr) % colors.size()];
          o.shape = shapes[static_cast<size_t>(attr) / colors.size()];
          o.size = 0;
          o.material = 0;
          s.objects.push_back(o);
        }
        out.push_back(std::move(s));
      }
      // next position combination (ascending indices)
      int i = n - 1;
      while (i >= 0 && pos[static_cast<size_t>(i)] == cells - n + i) --i;
      if (i < 0) {
        more = false;
      } else {
        ++pos[static_cast<size_t>(i)];
        for (int j = i + 1; j < n; ++j) pos[static_cast<size_t>(j)] = pos[static_cast<size_t>(j - 1)] + 1;
      }
    }
  }
  return out;
}

std::vector<std::unique_ptr<Node>> enumerate_programs(const Domain& d) {
  std::vector<std::string> unary;
  for (const auto& a : d.attention_args) unary.push_back("attention[" + a + "]");
  for (const char* dir : {"left", "right", "front", "behind"}) {
    unary.push_back(std::string("relate[") + dir + "]");
  }
  for (const auto& k : d.same_kinds) unary.push_back("same[" + k + "]");
  unary.push_back("unique");

  // attention-valued trees by depth bound
  std::vector<std::vector<std::unique_ptr<Node>>> att(static_cast<size_t>(d.max_depth));
  att[0].push_back(make_node("scene"));
  for (int depth = 2; depth < d.max_depth; ++depth) {
    auto& dst = att[static_cast<size_t>(depth - 1)];
    const auto& src = att[static_cast<size_t>(depth - 2)];
    dst.push_back(make_node("scene"));
    for (const auto& tok : unary) {
      for (const auto& sub : src) {
        std::vector<std::unique_ptr<Node>> kids;
        kids.push_back(clone(*sub));
        dst.push_back(make_node(tok, std::move(kids)));
      }
    }
    for (const char* tok : {"and", "or"}) {
      for (const auto& l : src) {
        for (const auto& r : src) {
          std::vector<std::unique_ptr<Node>> kids;
          kids.push_back(clone(*l));
          kids.push_back(clone(*r));
          dst.push_back(make_node(tok, std::move(kids)));
        }
      }
    }
  }

  // encoding-valued trees (the programs)
  std::vector<std::vector<std::unique_ptr<Node>>> enc(static_cast<size_t>(d.max_depth));
  for (int depth = 2; depth <= d.max_depth; ++depth) {
    auto& dst = enc[static_cast<size_t>(depth - 1)];
    for (const auto& q : d.query_args) {
      for (const auto& sub : att[static_cast<size_t>(depth - 2)]) {
        std::vector<std::unique_ptr<Node>> kids;
        kids.push_back(clone(*sub));
        dst.push_back(make_node("query_" + q, std::move(kids)));
      }
    }
    const auto& esrc = enc[static_cast<size_t>(depth - 2)];
    for (const auto& c : d.compare_args) {
      for (const auto& l : esrc) {
        for (const auto& r : esrc) {
          std::vector<std::unique_ptr<Node>> kids;
          kids.push_back(clone(*l));
          kids.push_back(clone(*r));
          dst.push_back(make_node("compare_" + c, std::move(kids)));
        }
      }
    }
  }
  return std::move(enc[static_cast<size_t>(d.max_depth - 1)]);
}

uint64_t rand_below(std::mt19937_64& rng, uint64_t n) {
  return static_cast<uint64_t>((static_cast<unsigned __int128>(rng()) * n) >> 64);
}

std::unique_ptr<Node> random_attention_tree(std::mt19937_64& rng, int depth) {
  if (depth <= 1 || rand_below(rng, 4) == 0) return make_node("scene");
  uint64_t pick = rand_below(rng, 8);
  std::vector<std::unique_ptr<Node>> kids;
  switch (pick) {
    case 0:
    case 1:
    case 2: {
      const auto& vals = attention_values();
      kids.push_back(random_attention_tree(rng, depth - 1));
      return make_node("attention[" + vals[rand_below(rng, vals.size())] + "]", std::move(kids));
    }
    case 3: {
      const char* dirs[4] = {"left", "right", "front", "behind"};
      kids.push_back(random_attention_tree(rng, depth - 1));
      return make_node(std::string("relate[") + dirs[rand_below(rng, 4)] + "]", std::move(kids));
    }
    case 4: {
      const auto& kinds = attribute_kinds();
      kids.push_back(random_attention_tree(rng, depth - 1));
      return make_node("same[" + kinds[rand_below(rng, kinds.size())] + "]", std::move(kids));
    }
    case 5: {
      kids.push_back(random_attention_tree(rng, depth - 1));
      return make_node("unique", std::move(kids));
    }
    default: {
      kids.push_back(random_attention_tree(rng, depth - 1));
      kids.push_back(random_attention_tree(rng, depth - 1));
      return make_node(pick == 6 ? "and" : "or", std::move(kids));
    }
  }
}

std::unique_ptr<Node> random_encoding_tree(std::mt19937_64& rng, int depth) {
  const char* queries[6] = {"color", "shape", "size", "material", "count", "exist"};
  if (depth <= 2 || rand_below(rng, 3) > 0) {
    std::vector<std::unique_ptr<Node>> kids;
    kids.push_back(random_attention_tree(rng, depth - 1));
    return make_node(std::string("query_") + queries[rand_below(rng, 6)], std::move(kids));
  }
  const char* compares[7] = {"color",         "shape",           "size",        "material",
                             "integer-equal", "greater", "less"};
  std::vector<std::unique_ptr<Node>> kids;
  kids.push_back(random_encoding_tree(rng, depth - 1));
  kids.push_back(random_encoding_tree(rng, depth - 1));
  return make_node(std::string("compare_") + compares[rand_below(rng, 7)], std::move(kids));
}

std::string describe(const Scene& s) {
  std::ostringstream os;
  os << "{";
  for (size_t i = 0; i < s.objects.size(); ++i) {
    const auto& o = s.objects[i];
    if (i) os << ", ";
    os << color_names()[static_cast<size_t>(o.color)] << " "
       << shape_names()[static_cast<size_t>(o.shape)] << "@(" << o.row << "," << o.col << ")";
  }
  os << "}";
  return os.str();
}

bool same_result(const SymResult& a, const SymResult& b) {
  return a.defined == b.defined && a.answer == b.answer && a.node_sets == b.node_sets;
}

}  // namespace

Report run_oracle_check(const Domain& d) {
  auto t0 = std::chrono::steady_clock::now();
  if (d.max_depth < 2) throw Error(ErrorCategory::config, "oracle depth bound must be at least 2");
  Report rep;
  auto scenes = enumerate_scenes(d);
  auto programs = enumerate_programs(d);
  rep.scenes = scenes.size();
  rep.programs = programs.size();

  SymResult got, want;
  for (const auto& p : programs) {
    scene::SymProgram sp(*p);
    for (const auto& s : scenes) {
      sp.run(s, got);
      reference_execute(*p, s, want);
      ++rep.cases;
      if (!same_result(got, want)) {
        ++rep.mismatches;
        if (rep.first_mismatch.empty()) {
          rep.first_mismatch = prog::print_program(*p) + " on " + describe(s) + ": got " +
                               (got.defined ? got.answer : "<undefined>") + ", reference " +
                               (want.defined ? want.answer : "<undefined>");
        }
      }
    }
  }

  std::mt19937_64 rng(splitmix64(d.random_seed));
  for (uint64_t i = 0; i < d.random_checks; ++i) {
    Scene s = scene::generate_scene(splitmix64(d.random_seed + i + 1),
                                    3 + static_cast<int>(rand_below(rng, 6)));
    auto p = random_encoding_tree(rng, 2 + static_cast<int>(rand_below(rng, 5)));
    scene::SymProgram sp(*p);
    sp.run(s, got);
    reference_execute(*p, s, want);
    ++rep.cases;
    if (!same_result(got, want)) {
      ++rep.mismatches;
      if (rep.first_mismatch.empty()) {
        rep.first_mismatch = prog::print_program(*p) + " on " + describe(s) + ": got " +
                             (got.defined ? got.answer : "<undefined>") + ", reference " +
                             (want.defined ? want.answer : "<undefined>");
      }
    }
  }
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

}  // namespace tbd::oracle
