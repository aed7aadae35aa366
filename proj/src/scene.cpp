#include "tbd/scene.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "json.hpp"
#include "tbd/blob.hpp"

namespace tbd::scene {

using json = nlohmann::json;

namespace {

// Bounded draw without libstdc++ distributions, so sequences are pinned by
// the engine alone (multiply-shift reduction).
uint64_t rand_below(std::mt19937_64& rng, uint64_t n) {
  return static_cast<uint64_t>((static_cast<unsigned __int128>(rng()) * n) >> 64);
}

int attr_of(const SceneObject& o, int kind) {
  switch (kind) {
    case 0: return o.color;
    case 1: return o.shape;
    case 2: return o.size;
    case 3: return o.material;
  }
  throw Error(ErrorCategory::state, "bad attribute kind " + std::to_string(kind));
}

const std::vector<std::string>& kind_vocab(int kind) {
  switch (kind) {
    case 0: return color_names();
    case 1: return shape_names();
    case 2: return size_names();
    case 3: return material_names();
  }
  throw Error(ErrorCategory::state, "bad attribute kind " + std::to_string(kind));
}

int kind_index(const std::string& kind_name) {
  const auto& kinds = attribute_kinds();
  for (size_t i = 0; i < kinds.size(); ++i) {
    if (kinds[i] == kind_name) return static_cast<int>(i);
  }
  throw Error(ErrorCategory::format, "unknown attribute kind '" + kind_name + "'");
}

int value_index(int kind, const std::string& value) {
  const auto& vocab = kind_vocab(kind);
  for (size_t i = 0; i < vocab.size(); ++i) {
    if (vocab[i] == value) return static_cast<int>(i);
  }
  throw Error(ErrorCategory::format, "unknown " + attribute_kinds()[static_cast<size_t>(kind)] +
                                         " value '" + value + "'");
}

constexpr const char* kDirections[4] = {"left", "right", "front", "behind"};

int direction_index(const std::string& dir) {
  for (int i = 0; i < 4; ++i) {
    if (dir == kDirections[i]) return i;
  }
  throw Error(ErrorCategory::format, "unknown direction '" + dir + "'");
}

// u-space geometry: the world is drawn on a 56x56 unit canvas (pixels at
// 14x14 feature resolution), scaled up integrally for higher resolutions.
// Grid cell k spans u in [14k, 14k+14); object footprints are 4u-aligned so
// they cover whole feature cells.
constexpr int kCellStart[4] = {4, 20, 32, 48};

struct Box {
  int r0, r1, c0, c1;  // half-open u-space extents
};

Box footprint(const Scene& s, const SceneObject& o) {
  bool tight_member =
      s.tight_pair && (s.tight_pair->first == o.id || s.tight_pair->second == o.id);
  if (!tight_member) {
    if (o.size == 0) {  // large: 8x8u
      return {kCellStart[o.row], kCellStart[o.row] + 8, kCellStart[o.col], kCellStart[o.col] + 8};
    }
    return {kCellStart[o.row] + 4, kCellStart[o.row] + 8, kCellStart[o.col] + 4,
            kCellStart[o.col] + 8};
  }
  int other_id = s.tight_pair->first == o.id ? s.tight_pair->second : s.tight_pair->first;
  const SceneObject* other = nullptr;
  for (const auto& c : s.objects) {
    if (c.id == other_id) other = &c;
  }
  if (!other) throw Error(ErrorCategory::config, "tight pair names a missing object id");
  if (o.row == other->row) {  // horizontal pair: hug the column boundary
    int lo = std::min(o.col, other->col);
    if (std::abs(o.col - other->col) != 1 || (lo != 0 && lo != 2)) {
      throw Error(ErrorCategory::config,
                  "tight pair must sit in adjacent cells across an unaligned boundary");
    }
    int b = 14 * (lo + 1);
    int c0 = o.col == lo ? b - 2 : b;
    return {kCellStart[o.row] + 4, kCellStart[o.row] + 6, c0, c0 + 2};
  }
  if (o.col == other->col) {
    int lo = std::min(o.row, other->row);
    if (std::abs(o.row - other->row) != 1 || (lo != 0 && lo != 2)) {
      throw Error(ErrorCategory::config,
                  "tight pair must sit in adjacent cells across an unaligned boundary");
    }
    int b = 14 * (lo + 1);
    int r0 = o.row == lo ? b - 2 : b;
    return {r0, r0 + 2, kCellStart[o.col] + 4, kCellStart[o.col] + 6};
  }
  throw Error(ErrorCategory::config, "tight pair objects are not grid-adjacent");
}

std::string pad6(int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06d", i);
  return buf;
}

}  // namespace

const char* condition_name(Condition c) {
  switch (c) {
    case Condition::none: return "none";
    case Condition::a: return "a";
    case Condition::b: return "b";
  }
  return "none";
}

Condition condition_from_name(const std::string& name) {
  if (name == "none") return Condition::none;
  if (name == "a") return Condition::a;
  if (name == "b") return Condition::b;
  throw Error(ErrorCategory::format, "unknown condition '" + name + "' (none|a|b)");
}

std::vector<int> allowed_colors(Condition cond, int shape) {
  // Palette halves: the first four colors (gray, blue, brown, yellow) and the
  // last four (red, green, purple, cyan). Condition a gives cubes the first
  // half and cylinders the second; condition b swaps them; spheres are free.
  std::vector<int> all{0, 1, 2, 3, 4, 5, 6, 7};
  if (cond == Condition::none || shape == 1) return all;
  bool first_half = (shape == 0) == (cond == Condition::a);
  if (first_half) return {0, 1, 2, 3};
  return {4, 5, 6, 7};
}

Scene generate_scene(uint64_t seed, int n_objects, Condition cond, bool tight) {
  if (n_objects < 3 || n_objects > 8) {
    throw Error(ErrorCategory::config,
                "scene needs between 3 and 8 objects, got " + std::to_string(n_objects));
  }
  Scene s;
  s.seed = seed;
  s.grid = kGrid;
  std::mt19937_64 rng(splitmix64(seed));

  std::vector<int> cells;
  std::vector<std::pair<int, int>> positions;
  if (tight) {
    bool horizontal = rand_below(rng, 2) == 0;
    int lo = static_cast<int>(rand_below(rng, 2)) * 2;  // boundary between lo and lo+1
    int cross = static_cast<int>(rand_below(rng, kGrid));
    auto cell_a = horizontal ? std::pair{cross, lo} : std::pair{lo, cross};
    auto cell_b = horizontal ? std::pair{cross, lo + 1} : std::pair{lo + 1, cross};
    positions.push_back(cell_a);
    positions.push_back(cell_b);
    for (int c = 0; c < kGrid * kGrid; ++c) {
      std::pair<int, int> rc{c / kGrid, c % kGrid};
      if (rc != cell_a && rc != cell_b) cells.push_back(c);
    }
    s.tight_pair = {0, 1};
  } else {
    for (int c = 0; c < kGrid * kGrid; ++c) cells.push_back(c);
  }
  for (size_t i = cells.size(); i > 1; --i) {
    std::swap(cells[i - 1], cells[rand_below(rng, i)]);
  }
  const size_t n_fixed = positions.size();
  for (size_t i = n_fixed; i < static_cast<size_t>(n_objects); ++i) {
    int c = cells[i - n_fixed];
    positions.emplace_back(c / kGrid, c % kGrid);
  }

  for (int i = 0; i < n_objects; ++i) {
    SceneObject o;
    o.id = i;
    o.row = positions[static_cast<size_t>(i)].first;
    o.col = positions[static_cast<size_t>(i)].second;
    o.shape = static_cast<int>(rand_below(rng, 3));
    auto palette = allowed_colors(cond, o.shape);
    o.color = palette[rand_below(rng, palette.size())];
    o.size = static_cast<int>(rand_below(rng, 2));
    o.material = static_cast<int>(rand_below(rng, 2));
    if (tight && i < 2) {
      o.size = 1;  // tight members render sub-cell; keep their label "small"
      while (i == 1 && o.color == s.objects[0].color) {
        o.color = palette[rand_below(rng, palette.size())];
      }
    }
    s.objects.push_back(o);
  }
  return s;
}

bool in_direction(const SceneObject& o, const SceneObject& ref, const std::string& dir) {
  switch (direction_index(dir)) {
    case 0: return o.col < ref.col;
    case 1: return o.col > ref.col;
    case 2: return o.row > ref.row;
    default: return o.row < ref.row;
  }
}

Rendered render_scene(const Scene& s, int rows, int cols) {
  if (s.grid != kGrid) {
    throw Error(ErrorCategory::config, "renderer supports the 4x4 world grid only");
  }
  if (rows <= 0 || cols <= 0 || rows % 14 != 0 || cols % 14 != 0) {
    throw Error(ErrorCategory::config, "feature resolution must be a positive multiple of 14, got " +
                                           std::to_string(rows) + "x" + std::to_string(cols));
  }
  int sy = rows / 14;
  int sx = cols / 14;
  int h = 4 * rows;
  int w = 4 * cols;
  Rendered out;
  out.image = Tensor::zeros({4, h, w});
  double* img = out.image.data();
  auto px = [&](int ch, int r, int c) -> double& {
    return img[(static_cast<int64_t>(ch) * h + r) * w + c];
  };

  for (const auto& o : s.objects) {
    Box b = footprint(s, o);
    double size_v = o.size == 0 ? 1.0 : 0.55;
    double color_v = (o.color + 1) / 8.0;
    double shape_v = (o.shape + 1) / 3.0;
    for (int pr = b.r0 * sy; pr < b.r1 * sy; ++pr) {
      for (int pc = b.c0 * sx; pc < b.c1 * sx; ++pc) {
        px(0, pr, pc) = size_v;
        px(1, pr, pc) = color_v;
        px(2, pr, pc) = shape_v;
        if (o.material == 0) {  // metal: checker of 4u tiles
          int ur = pr / sy, uc = pc / sx;
          px(3, pr, pc) = (((ur >> 2) + (uc >> 2)) & 1) ? 0.6 : 1.0;
        } else {  // rubber: flat
          px(3, pr, pc) = 0.4;
        }
      }
    }
    Tensor seg = Tensor::zeros({1, rows, cols});
    double* sd = seg.data();
    int fr0 = b.r0 * sy / 4, fr1 = (b.r1 * sy - 1) / 4;
    int fc0 = b.c0 * sx / 4, fc1 = (b.c1 * sx - 1) / 4;
    for (int fr = fr0; fr <= fr1; ++fr) {
      for (int fc = fc0; fc <= fc1; ++fc) {
        sd[static_cast<int64_t>(fr) * cols + fc] = 1.0;
      }
    }
    out.segmentation.push_back(seg);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Symbolic executor: programs lowered to a post-order opcode list, evaluated
// over object-id bitmasks.

namespace {

enum OpCode : int {
  op_scene,
  op_attention,  // arg=kind, arg2=value
  op_relate,     // arg=direction
  op_same,       // arg=kind
  op_unique,
  op_and,
  op_or,
  op_query_attr,  // arg=kind
  op_query_count,
  op_query_exist,
  op_compare_attr,  // arg=kind
  op_compare_eq,
  op_compare_gt,
  op_compare_lt,
};

bool produces_set(int code) { return code <= op_or; }

struct Val {
  enum Tag { undef, set, count, boolean, attr } tag = undef;
  uint32_t ids = 0;  // set
  int a = 0;         // count value / bool / attr kind
  int b = 0;         // attr value
};

bool dir_holds(const SceneObject& o, const SceneObject& ref, int dir) {
  switch (dir) {
    case 0: return o.col < ref.col;
    case 1: return o.col > ref.col;
    case 2: return o.row > ref.row;
    default: return o.row < ref.row;
  }
}

}  // namespace

SymProgram::SymProgram(const prog::Node& root) {
  // Post-order lowering; children get indices before their parent, matching
  // the program graph's flattening.
  auto lower = [&](auto&& self, const prog::Node& n) -> int {
    std::vector<int> kids;
    for (const auto& c : n.children) kids.push_back(self(self, *c));
    Op op;
    op.lhs = kids.empty() ? -1 : kids[0];
    op.rhs = kids.size() > 1 ? kids[1] : -1;
    switch (n.info.kind) {
      case TokenKind::scene:
        op.code = op_scene;
        break;
      case TokenKind::attention: {
        op.code = op_attention;
        op.arg = kind_index(attribute_kind_of(n.info.arg));
        op.arg2 = value_index(op.arg, n.info.arg);
        break;
      }
      case TokenKind::relate:
        op.code = op_relate;
        op.arg = direction_index(n.info.arg);
        break;
      case TokenKind::same:
        op.code = op_same;
        op.arg = kind_index(n.info.arg);
        break;
      case TokenKind::unique:
        op.code = op_unique;
        break;
      case TokenKind::logical_and:
        op.code = op_and;
        break;
      case TokenKind::logical_or:
        op.code = op_or;
        break;
      case TokenKind::query: {
        if (n.info.arg == "count") {
          op.code = op_query_count;
        } else if (n.info.arg == "exist") {
          op.code = op_query_exist;
        } else {
          op.code = op_query_attr;
          op.arg = kind_index(n.info.arg);
        }
        break;
      }
      case TokenKind::compare: {
        if (n.info.arg == "integer-equal") {
          op.code = op_compare_eq;
        } else if (n.info.arg == "greater") {
          op.code = op_compare_gt;
        } else if (n.info.arg == "less") {
          op.code = op_compare_lt;
        } else {
          op.code = op_compare_attr;
          op.arg = kind_index(n.info.arg);
        }
        break;
      }
    }
    ops_.push_back(op);
    return static_cast<int>(ops_.size()) - 1;
  };
  lower(lower, root);
}

void SymProgram::run(const Scene& s, SymResult& out) const {
  int n = static_cast<int>(s.objects.size());
  if (n > 31) throw Error(ErrorCategory::config, "symbolic executor supports at most 31 objects");
  for (int j = 0; j < n; ++j) {
    if (s.objects[static_cast<size_t>(j)].id != j) {
      throw Error(ErrorCategory::config, "scene object ids must equal their index");
    }
  }
  uint32_t universe = n == 0 ? 0 : (uint32_t{1} << n) - 1;

  thread_local std::vector<Val> vals;
  vals.assign(ops_.size(), Val{});
  for (size_t i = 0; i < ops_.size(); ++i) {
    const Op& op = ops_[i];
    Val v;
    const Val* l = op.lhs >= 0 ? &vals[static_cast<size_t>(op.lhs)] : nullptr;
    const Val* r = op.rhs >= 0 ? &vals[static_cast<size_t>(op.rhs)] : nullptr;
    if ((l && l->tag == Val::undef) || (r && r->tag == Val::undef)) {
      vals[i] = v;  // undefined propagates
      continue;
    }
    switch (op.code) {
      case op_scene:
        v.tag = Val::set;
        v.ids = universe;
        break;
      case op_attention: {
        v.tag = Val::set;
        for (int j = 0; j < n; ++j) {
          if ((l->ids >> j & 1) && attr_of(s.objects[static_cast<size_t>(j)], op.arg) == op.arg2) {
            v.ids |= uint32_t{1} << j;
          }
        }
        break;
      }
      case op_relate: {
        if (std::popcount(l->ids) != 1) break;  // stays undef
        const SceneObject& ref = s.objects[static_cast<size_t>(std::countr_zero(l->ids))];
        v.tag = Val::set;
        for (int j = 0; j < n; ++j) {
          if (dir_holds(s.objects[static_cast<size_t>(j)], ref, op.arg)) v.ids |= uint32_t{1} << j;
        }
        break;
      }
      case op_same: {
        if (std::popcount(l->ids) != 1) break;
        int ref_idx = std::countr_zero(l->ids);
        const SceneObject& ref = s.objects[static_cast<size_t>(ref_idx)];
        v.tag = Val::set;
        for (int j = 0; j < n; ++j) {
          if (j != ref_idx &&
              attr_of(s.objects[static_cast<size_t>(j)], op.arg) == attr_of(ref, op.arg)) {
            v.ids |= uint32_t{1} << j;
          }
        }
        break;
      }
      case op_unique:
        if (std::popcount(l->ids) != 1) break;
        v.tag = Val::set;
        v.ids = l->ids;
        break;
      case op_and:
        v.tag = Val::set;
        v.ids = l->ids & r->ids;
        break;
      case op_or:
        v.tag = Val::set;
        v.ids = l->ids | r->ids;
        break;
      case op_query_attr:
        if (std::popcount(l->ids) != 1) break;
        v.tag = Val::attr;
        v.a = op.arg;
        v.b = attr_of(s.objects[static_cast<size_t>(std::countr_zero(l->ids))], op.arg);
        break;
      case op_query_count:
        v.tag = Val::count;
        v.a = std::popcount(l->ids);
        break;
      case op_query_exist:
        v.tag = Val::boolean;
        v.a = l->ids != 0;
        break;
      case op_compare_attr:
        if (l->tag != Val::attr || r->tag != Val::attr || l->a != op.arg || r->a != op.arg) break;
        v.tag = Val::boolean;
        v.a = l->b == r->b;
        break;
      case op_compare_eq:
      case op_compare_gt:
      case op_compare_lt: {
        if (l->tag != Val::count || r->tag != Val::count) break;
        v.tag = Val::boolean;
        v.a = op.code == op_compare_eq   ? l->a == r->a
              : op.code == op_compare_gt ? l->a > r->a
                                         : l->a < r->a;
        break;
      }
    }
    vals[i] = v;
  }

  out.node_sets.resize(ops_.size());
  for (size_t i = 0; i < ops_.size(); ++i) {
    if (produces_set(ops_[i].code) && vals[i].tag == Val::set) {
      if (!out.node_sets[i]) out.node_sets[i].emplace();
      auto& dst = *out.node_sets[i];
      dst.clear();
      for (int j = 0; j < n; ++j) {
        if (vals[i].ids >> j & 1) dst.push_back(j);
      }
    } else {
      out.node_sets[i].reset();
    }
  }
  const Val& root = vals.back();
  out.defined = root.tag != Val::undef;
  switch (root.tag) {
    case Val::undef:
      out.answer.clear();
      break;
    case Val::count:
      out.answer = std::to_string(root.a);
      break;
    case Val::boolean:
      out.answer = root.a ? "yes" : "no";
      break;
    case Val::attr:
      out.answer = kind_vocab(root.a)[static_cast<size_t>(root.b)];
      break;
    case Val::set:
      throw Error(ErrorCategory::state, "program root produced a mask, not an answer");
  }
}

SymResult SymProgram::run(const Scene& s) const {
  SymResult out;
  run(s, out);
  return out;
}

SymResult symbolic_execute(const prog::Node& root, const Scene& s) {
  return SymProgram(root).run(s);
}

SymResult symbolic_execute(const std::string& program, const Scene& s) {
  auto root = prog::parse_program(program);
  prog::type_check(*root);
  return SymProgram(*root).run(s);
}

// ---------------------------------------------------------------------------
// Question templates

const std::vector<std::string>& family_names() {
  static const std::vector<std::string> v{"count", "exist", "compare-numbers", "query-attribute",
                                          "compare-attribute"};
  return v;
}

const std::vector<TemplateSpec>& question_templates() {
  static const std::vector<TemplateSpec> v{
      {"count-attr", "count"},
      {"count-relate", "count"},
      {"count-or", "count"},
      {"exist-attr-pair", "exist"},
      {"exist-and", "exist"},
      {"exist-same", "exist"},
      {"compare-count-equal", "compare-numbers"},
      {"compare-count-more", "compare-numbers"},
      {"compare-count-fewer", "compare-numbers"},
      {"query-color", "query-attribute"},
      {"query-shape", "query-attribute"},
      {"query-size", "query-attribute"},
      {"query-material", "query-attribute"},
      {"query-relate", "query-attribute"},
      {"query-same", "query-attribute"},
      {"compare-attr", "compare-attribute"},
  };
  return v;
}

namespace {

const char* dir_phrase(int d) {
  switch (d) {
    case 0: return "to the left of";
    case 1: return "to the right of";
    case 2: return "in front of";
    default: return "behind";
  }
}

std::string value_name(int kind, int v) { return kind_vocab(kind)[static_cast<size_t>(v)]; }

// (kind, value) pairs that pick out exactly this object within the scene.
std::vector<std::pair<int, int>> isolating_attrs(const Scene& s, const SceneObject& o) {
  std::vector<std::pair<int, int>> out;
  for (int k = 0; k < 4; ++k) {
    int v = attr_of(o, k);
    int hits = 0;
    for (const auto& c : s.objects) hits += attr_of(c, k) == v;
    if (hits == 1) out.emplace_back(k, v);
  }
  return out;
}

std::string random_value(std::mt19937_64& rng, int* kind_out = nullptr) {
  const auto& vals = attention_values();
  size_t i = rand_below(rng, vals.size());
  if (kind_out) *kind_out = kind_index(attribute_kind_of(vals[i]));
  return vals[i];
}

struct Draft {
  std::string program;
  std::string question;
};

// One attempt at filling a template's slots. Empty when the directed picks
// fail (caller retries with fresh randomness).
std::optional<Draft> draft_question(const Scene& s, const std::string& id, std::mt19937_64& rng) {
  auto pick_object = [&]() -> const SceneObject& {
    return s.objects[rand_below(rng, s.objects.size())];
  };
  auto isolator = [&](const SceneObject& o) -> std::optional<std::pair<int, int>> {
    auto iso = isolating_attrs(s, o);
    if (iso.empty()) return std::nullopt;
    return iso[rand_below(rng, iso.size())];
  };

  if (id == "count-attr") {
    std::string x = random_value(rng);
    return Draft{"query_count(attention[" + x + "](scene))",
                 "How many " + x + " things are there?"};
  }
  if (id == "count-or") {
    std::string x = random_value(rng);
    std::string y = random_value(rng);
    if (x == y) return std::nullopt;
    return Draft{"query_count(or(attention[" + x + "](scene),attention[" + y + "](scene)))",
                 "How many things are " + x + " or " + y + "?"};
  }
  if (id == "count-relate") {
    const auto& ref = pick_object();
    auto iso = isolator(ref);
    if (!iso) return std::nullopt;
    int d = static_cast<int>(rand_below(rng, 4));
    std::string v = value_name(iso->first, iso->second);
    return Draft{"query_count(relate[" + std::string(kDirections[d]) + "](unique(attention[" + v +
                     "](scene))))",
                 "How many things are " + std::string(dir_phrase(d)) + " the " + v + " thing?"};
  }
  if (id == "exist-attr-pair" || id == "exist-and") {
    int k1 = 0, k2 = 0;
    std::string x, y;
    if (rand_below(rng, 2) == 0) {  // anchored on a real object: answer yes
      const auto& o = pick_object();
      k1 = static_cast<int>(rand_below(rng, 4));
      do {
        k2 = static_cast<int>(rand_below(rng, 4));
      } while (k2 == k1);
      x = value_name(k1, attr_of(o, k1));
      y = value_name(k2, attr_of(o, k2));
    } else {  // free draw: answer varies
      x = random_value(rng, &k1);
      y = random_value(rng, &k2);
      if (k1 == k2) return std::nullopt;
    }
    if (id == "exist-and") {
      return Draft{"query_exist(and(attention[" + x + "](scene),attention[" + y + "](scene)))",
                   "Is there anything that is both " + x + " and " + y + "?"};
    }
    return Draft{"query_exist(attention[" + x + "](attention[" + y + "](scene)))",
                 "Is there a " + x + " " + y + " thing?"};
  }
  if (id == "exist-same") {
    const auto& ref = pick_object();
    auto iso = isolator(ref);
    if (!iso) return std::nullopt;
    int j = static_cast<int>(rand_below(rng, 4));
    std::string v = value_name(iso->first, iso->second);
    const std::string& jn = attribute_kinds()[static_cast<size_t>(j)];
    return Draft{"query_exist(same[" + jn + "](unique(attention[" + v + "](scene))))",
                 "Is there another thing with the same " + jn + " as the " + v + " thing?"};
  }
  if (id == "compare-count-equal" || id == "compare-count-more" || id == "compare-count-fewer") {
    std::string x = random_value(rng);
    std::string y = random_value(rng);
    if (x == y) return std::nullopt;
    std::string op = id == "compare-count-equal"  ? "integer-equal"
                     : id == "compare-count-more" ? "greater"
                                                  : "less";
    std::string q = id == "compare-count-equal"
                        ? "Are there as many " + x + " things as " + y + " things?"
                    : id == "compare-count-more"
                        ? "Are there more " + x + " things than " + y + " things?"
                        : "Are there fewer " + x + " things than " + y + " things?";
    return Draft{"compare_" + op + "(query_count(attention[" + x +
                     "](scene)),query_count(attention[" + y + "](scene)))",
                 q};
  }
  if (id == "query-color" || id == "query-shape" || id == "query-size" ||
      id == "query-material") {
    int want = kind_index(id.substr(6));
    const auto& ref = pick_object();
    auto iso = isolating_attrs(s, ref);
    std::erase_if(iso, [&](const auto& kv) { return kv.first == want; });
    if (iso.empty()) return std::nullopt;
    auto kv = iso[rand_below(rng, iso.size())];
    std::string v = value_name(kv.first, kv.second);
    const std::string& kn = attribute_kinds()[static_cast<size_t>(want)];
    return Draft{"query_" + kn + "(unique(attention[" + v + "](scene)))",
                 "What " + kn + " is the " + v + " thing?"};
  }
  if (id == "query-relate") {
    const auto& ref = pick_object();
    auto iso = isolator(ref);
    if (!iso) return std::nullopt;
    int d = static_cast<int>(rand_below(rng, 4));
    std::vector<const SceneObject*> beyond;
    for (const auto& o : s.objects) {
      if (dir_holds(o, ref, d)) beyond.push_back(&o);
    }
    if (beyond.empty()) return std::nullopt;
    const SceneObject& target = *beyond[rand_below(rng, beyond.size())];
    // an attribute isolating the target within the beyond-set
    std::vector<std::pair<int, int>> picks;
    for (int k = 0; k < 4; ++k) {
      int v = attr_of(target, k);
      int hits = 0;
      for (const auto* o : beyond) hits += attr_of(*o, k) == v;
      if (hits == 1) picks.emplace_back(k, v);
    }
    if (picks.empty()) return std::nullopt;
    auto kv = picks[rand_below(rng, picks.size())];
    int want;
    do {
      want = static_cast<int>(rand_below(rng, 4));
    } while (want == kv.first);
    std::string v1 = value_name(iso->first, iso->second);
    std::string v2 = value_name(kv.first, kv.second);
    const std::string& kn = attribute_kinds()[static_cast<size_t>(want)];
    return Draft{"query_" + kn + "(unique(attention[" + v2 + "](relate[" +
                     std::string(kDirections[d]) + "](unique(attention[" + v1 + "](scene))))))",
                 "What " + kn + " is the " + v2 + " thing " + dir_phrase(d) + " the " + v1 +
                     " thing?"};
  }
  if (id == "query-same") {
    const auto& ref = pick_object();
    auto iso = isolator(ref);
    if (!iso) return std::nullopt;
    int j = static_cast<int>(rand_below(rng, 4));
    int want;
    do {
      want = static_cast<int>(rand_below(rng, 4));
    } while (want == j);
    std::string v = value_name(iso->first, iso->second);
    const std::string& jn = attribute_kinds()[static_cast<size_t>(j)];
    const std::string& kn = attribute_kinds()[static_cast<size_t>(want)];
    return Draft{"query_" + kn + "(unique(same[" + jn + "](unique(attention[" + v +
                     "](scene)))))",
                 "What " + kn + " is the other thing with the same " + jn + " as the " + v +
                     " thing?"};
  }
  if (id == "compare-attr") {
    const auto& o1 = pick_object();
    const auto& o2 = pick_object();
    if (o1.id == o2.id) return std::nullopt;
    auto iso1 = isolator(o1);
    auto iso2 = isolator(o2);
    if (!iso1 || !iso2) return std::nullopt;
    int want;
    do {
      want = static_cast<int>(rand_below(rng, 4));
    } while (want == iso1->first || want == iso2->first);
    std::string v1 = value_name(iso1->first, iso1->second);
    std::string v2 = value_name(iso2->first, iso2->second);
    if (v1 == v2) return std::nullopt;
    const std::string& kn = attribute_kinds()[static_cast<size_t>(want)];
    return Draft{"compare_" + kn + "(query_" + kn + "(unique(attention[" + v1 +
                     "](scene))),query_" + kn + "(unique(attention[" + v2 + "](scene))))",
                 "Do the " + v1 + " thing and the " + v2 + " thing have the same " + kn + "?"};
  }
  throw Error(ErrorCategory::config, "unknown question template '" + id + "'");
}

}  // namespace

std::optional<Sample> instantiate_template(const Scene& s, const TemplateSpec& tmpl,
                                           uint64_t seed) {
  std::mt19937_64 rng(splitmix64(seed ^ 0x7e4d5c36a9f10b82ULL));
  for (int attempt = 0; attempt < 64; ++attempt) {
    auto draft = draft_question(s, tmpl.id, rng);
    if (!draft) continue;
    SymResult res = symbolic_execute(draft->program, s);
    if (!res.defined) continue;
    Sample sample;
    sample.template_id = tmpl.id;
    sample.family = tmpl.family;
    sample.program = draft->program;
    sample.question = draft->question;
    sample.answer = res.answer;
    sample.node_sets = std::move(res.node_sets);
    return sample;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Dataset writer / loader

namespace {

json scene_to_json(const Scene& s, int id) {
  json objs = json::array();
  for (const auto& o : s.objects) {
    objs.push_back({{"id", o.id},
                    {"row", o.row},
                    {"col", o.col},
                    {"color", color_names()[static_cast<size_t>(o.color)]},
                    {"shape", shape_names()[static_cast<size_t>(o.shape)]},
                    {"size", size_names()[static_cast<size_t>(o.size)]},
                    {"material", material_names()[static_cast<size_t>(o.material)]}});
  }
  json j{{"id", id}, {"seed", s.seed}, {"objects", objs}};
  if (s.tight_pair) j["tight_pair"] = {s.tight_pair->first, s.tight_pair->second};
  return j;
}

Scene scene_from_json(const json& j) {
  Scene s;
  s.seed = j.at("seed").get<uint64_t>();
  s.grid = kGrid;
  for (const auto& jo : j.at("objects")) {
    SceneObject o;
    o.id = jo.at("id").get<int>();
    o.row = jo.at("row").get<int>();
    o.col = jo.at("col").get<int>();
    o.color = value_index(0, jo.at("color").get<std::string>());
    o.shape = value_index(1, jo.at("shape").get<std::string>());
    o.size = value_index(2, jo.at("size").get<std::string>());
    o.material = value_index(3, jo.at("material").get<std::string>());
    s.objects.push_back(o);
  }
  if (j.contains("tight_pair")) {
    s.tight_pair = {j["tight_pair"][0].get<int>(), j["tight_pair"][1].get<int>()};
  }
  return s;
}

std::vector<std::string> post_order_tokens(const std::string& program) {
  auto root = prog::parse_program(program);
  std::vector<std::string> out;
  auto walk = [&](auto&& self, const prog::Node& n) -> void {
    for (const auto& c : n.children) self(self, *c);
    out.push_back(n.token);
  };
  walk(walk, *root);
  return out;
}

json sample_to_json(const Sample& s, int id) {
  json nodes = json::array();
  auto tokens = post_order_tokens(s.program);
  if (tokens.size() != s.node_sets.size()) {
    throw Error(ErrorCategory::state, "sample node sets out of step with its program");
  }
  for (size_t i = 0; i < tokens.size(); ++i) {
    json n{{"token", tokens[i]}};
    if (s.node_sets[i]) {
      n["set"] = *s.node_sets[i];
    } else {
      n["set"] = nullptr;
    }
    nodes.push_back(n);
  }
  return json{{"id", id},           {"scene", s.scene_id},   {"template", s.template_id},
              {"family", s.family}, {"program", s.program},  {"question", s.question},
              {"answer", s.answer}, {"nodes", nodes}};
}

Sample sample_from_json(const json& j) {
  Sample s;
  s.scene_id = j.at("scene").get<int>();
  s.template_id = j.at("template").get<std::string>();
  s.family = j.at("family").get<std::string>();
  s.program = j.at("program").get<std::string>();
  s.question = j.at("question").get<std::string>();
  s.answer = j.at("answer").get<std::string>();
  auto tokens = post_order_tokens(s.program);
  const auto& nodes = j.at("nodes");
  if (nodes.size() != tokens.size()) {
    throw Error(ErrorCategory::format, "sample node list does not match its program");
  }
  for (size_t i = 0; i < nodes.size(); ++i) {
    if (nodes[i].at("token").get<std::string>() != tokens[i]) {
      throw Error(ErrorCategory::format, "sample node tokens do not match its program");
    }
    if (nodes[i].at("set").is_null()) {
      s.node_sets.emplace_back(std::nullopt);
    } else {
      s.node_sets.emplace_back(nodes[i].at("set").get<std::vector<int>>());
    }
  }
  return s;
}

void check_vocab_echo(const json& header, const char* key, const std::vector<std::string>& want) {
  auto got = header.at(key).get<std::vector<std::string>>();
  if (got != want) {
    throw Error(ErrorCategory::format,
                std::string("dataset header '") + key + "' does not match this build's vocabulary");
  }
}

}  // namespace

class DatasetBlob {
 public:
  explicit DatasetBlob(const std::string& base) : reader(base) {}
  blob::Reader reader;
};

DatasetStats build_dataset(const DatasetConfig& cfg) {
  if (cfg.out_dir.empty()) throw Error(ErrorCategory::config, "dataset needs an output directory");
  if (cfg.n_scenes <= 0 || cfg.questions_per_scene <= 0) {
    throw Error(ErrorCategory::config, "dataset needs positive scene and question counts");
  }
  if (cfg.min_objects < 3 || cfg.max_objects > 8 || cfg.min_objects > cfg.max_objects) {
    throw Error(ErrorCategory::config, "object count range must sit inside [3, 8]");
  }
  std::filesystem::create_directories(cfg.out_dir);

  std::ofstream scenes_out(cfg.out_dir + "/scenes.jsonl", std::ios::trunc);
  std::ofstream samples_out(cfg.out_dir + "/samples.jsonl", std::ios::trunc);
  if (!scenes_out || !samples_out) {
    throw Error(ErrorCategory::io, "cannot create dataset files under " + cfg.out_dir);
  }
  blob::Writer blob_out(cfg.out_dir + "/images");

  DatasetStats stats;
  const auto& families = family_names();
  const auto& templates = question_templates();
  int sample_id = 0;
  for (int i = 0; i < cfg.n_scenes; ++i) {
    uint64_t scene_seed = splitmix64(cfg.seed + 0x9E3779B97F4A7C15ULL * (static_cast<uint64_t>(i) + 1));
    std::mt19937_64 pick(scene_seed);
    int n_obj = cfg.min_objects +
                static_cast<int>(rand_below(pick, static_cast<uint64_t>(cfg.max_objects - cfg.min_objects + 1)));
    Scene s = generate_scene(scene_seed, n_obj, cfg.condition, cfg.tight_pairs);
    Rendered r = render_scene(s, cfg.rows, cfg.cols);
    blob_out.add("image/" + pad6(i), r.image);
    for (size_t j = 0; j < r.segmentation.size(); ++j) {
      blob_out.add("seg/" + pad6(i) + "/" + std::to_string(j), r.segmentation[j]);
    }
    scenes_out << scene_to_json(s, i).dump() << '\n';

    for (int q = 0; q < cfg.questions_per_scene; ++q) {
      uint64_t sample_seed =
          splitmix64(scene_seed + 0x9E3779B97F4A7C15ULL * (static_cast<uint64_t>(q) + 1));
      std::mt19937_64 rng(sample_seed);
      std::optional<Sample> sample;
      for (int attempt = 0; attempt < 200 && !sample; ++attempt) {
        const std::string& fam = families[rand_below(rng, families.size())];
        std::vector<const TemplateSpec*> in_family;
        for (const auto& t : templates) {
          if (t.family == fam) in_family.push_back(&t);
        }
        const TemplateSpec& tmpl = *in_family[rand_below(rng, in_family.size())];
        sample = instantiate_template(s, tmpl, splitmix64(sample_seed + static_cast<uint64_t>(attempt) + 1));
      }
      if (!sample) {
        throw Error(ErrorCategory::state,
                    "no template instantiates on scene " + std::to_string(i) + " after 200 draws");
      }
      sample->scene_id = i;
      samples_out << sample_to_json(*sample, sample_id).dump() << '\n';
      stats.family_counts[sample->family] += 1;
      stats.family_answers[sample->family][sample->answer] += 1;
      ++sample_id;
    }
  }
  blob_out.finish();
  scenes_out.flush();
  samples_out.flush();
  if (!scenes_out || !samples_out) {
    throw Error(ErrorCategory::io, "failed writing dataset files under " + cfg.out_dir);
  }
  stats.n_scenes = cfg.n_scenes;
  stats.n_samples = sample_id;

  json header{{"format", "tbd-dataset"},
              {"version", 1},
              {"rows", cfg.rows},
              {"cols", cfg.cols},
              {"cin", 4},
              {"grid", kGrid},
              {"image_height", 4 * cfg.rows},
              {"image_width", 4 * cfg.cols},
              {"condition", condition_name(cfg.condition)},
              {"tight_pairs", cfg.tight_pairs},
              {"seed", cfg.seed},
              {"n_scenes", cfg.n_scenes},
              {"n_samples", stats.n_samples},
              {"questions_per_scene", cfg.questions_per_scene},
              {"min_objects", cfg.min_objects},
              {"max_objects", cfg.max_objects},
              {"answers", answer_vocab()},
              {"colors", color_names()},
              {"shapes", shape_names()},
              {"sizes", size_names()},
              {"materials", material_names()},
              {"families", family_names()},
              {"blob", "images"}};
  std::ofstream header_out(cfg.out_dir + "/header.json", std::ios::trunc);
  header_out << header.dump(2) << '\n';

  json jstats{{"total", stats.n_samples}, {"families", json::object()}};
  for (const auto& [fam, count] : stats.family_counts) {
    json answers = json::object();
    for (const auto& [ans, c] : stats.family_answers[fam]) answers[ans] = c;
    jstats["families"][fam] = {{"n", count}, {"answers", answers}};
  }
  std::ofstream stats_out(cfg.out_dir + "/stats.json", std::ios::trunc);
  stats_out << jstats.dump(2) << '\n';
  header_out.flush();
  stats_out.flush();
  if (!header_out || !stats_out) {
    throw Error(ErrorCategory::io, "failed writing dataset metadata under " + cfg.out_dir);
  }
  return stats;
}

Dataset::Dataset(const std::string& dir) {
  std::ifstream header_in(dir + "/header.json");
  if (!header_in) throw Error(ErrorCategory::io, "cannot open " + dir + "/header.json");
  json header;
  try {
    header_in >> header;
  } catch (const json::exception& e) {
    throw Error(ErrorCategory::format, dir + "/header.json: " + e.what());
  }
  try {
    if (header.at("format").get<std::string>() != "tbd-dataset") {
      throw Error(ErrorCategory::format, dir + ": not a dataset directory");
    }
    if (header.at("version").get<int>() != 1) {
      throw Error(ErrorCategory::format,
                  dir + ": unsupported dataset version " + header.at("version").dump());
    }
    check_vocab_echo(header, "answers", answer_vocab());
    check_vocab_echo(header, "colors", color_names());
    check_vocab_echo(header, "shapes", shape_names());
    check_vocab_echo(header, "sizes", size_names());
    check_vocab_echo(header, "materials", material_names());
    config.out_dir = dir;
    config.rows = header.at("rows").get<int>();
    config.cols = header.at("cols").get<int>();
    config.n_scenes = header.at("n_scenes").get<int>();
    config.questions_per_scene = header.at("questions_per_scene").get<int>();
    config.min_objects = header.at("min_objects").get<int>();
    config.max_objects = header.at("max_objects").get<int>();
    config.condition = condition_from_name(header.at("condition").get<std::string>());
    config.tight_pairs = header.at("tight_pairs").get<bool>();
    config.seed = header.at("seed").get<uint64_t>();
  } catch (const json::exception& e) {
    throw Error(ErrorCategory::format, dir + "/header.json: " + e.what());
  }

  auto read_lines = [&](const std::string& path, auto&& fn) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCategory::io, "cannot open " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      try {
        fn(json::parse(line));
      } catch (const json::exception& e) {
        throw Error(ErrorCategory::format, path + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
  };
  read_lines(dir + "/scenes.jsonl", [&](const json& j) { scenes.push_back(scene_from_json(j)); });
  read_lines(dir + "/samples.jsonl", [&](const json& j) { samples.push_back(sample_from_json(j)); });
  if (static_cast<int>(scenes.size()) != config.n_scenes) {
    throw Error(ErrorCategory::format, dir + ": header names " + std::to_string(config.n_scenes) +
                                           " scenes but scenes.jsonl has " +
                                           std::to_string(scenes.size()));
  }
  for (const auto& s : samples) {
    if (s.scene_id < 0 || s.scene_id >= static_cast<int>(scenes.size())) {
      throw Error(ErrorCategory::format, dir + ": sample references scene " +
                                             std::to_string(s.scene_id) + " out of range");
    }
  }
  blob_ = std::make_shared<DatasetBlob>(dir + "/" + header.at("blob").get<std::string>());
}

Tensor Dataset::image(int scene_id) const {
  return blob_->reader.read("image/" + pad6(scene_id));
}

std::vector<Tensor> Dataset::segmentations(int scene_id) const {
  std::vector<Tensor> out;
  size_t n = scenes[static_cast<size_t>(scene_id)].objects.size();
  for (size_t j = 0; j < n; ++j) {
    out.push_back(blob_->reader.read("seg/" + pad6(scene_id) + "/" + std::to_string(j)));
  }
  return out;
}

Dataset load_dataset(const std::string& dir) { return Dataset(dir); }

}  // namespace tbd::scene
