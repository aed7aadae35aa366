#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tbd/program.hpp"
#include "tbd/tensor.hpp"
#include "tbd/vocab.hpp"

namespace tbd::scene {

/// World-grid side length for generated scenes (objects live on a 4x4 grid).
inline constexpr int kGrid = 4;

struct SceneObject {
  int id = 0;
  int row = 0;  // rows grow toward the viewer: larger row = in front
  int col = 0;  // cols grow rightward: larger col = to the right
  int color = 0;     // index into color_names()
  int shape = 0;     // index into shape_names()
  int size = 0;      // index into size_names()
  int material = 0;  // index into material_names()
};

struct Scene {
  uint64_t seed = 0;
  int grid = kGrid;
  std::vector<SceneObject> objects;
  /// When set, these two objects sit in adjacent grid cells and are rendered
  /// shrunken against the shared cell boundary, so at 14x14 feature
  /// resolution both land in one feature cell while 28x28 still separates
  /// them. Used by the resolution-sensitivity datasets.
  std::optional<std::pair<int, int>> tight_pair;
};

/// Attribute-palette condition for the compositional-generalization splits.
/// Condition `a` restricts cube colors to {gray, blue, brown, yellow} and
/// cylinder colors to {red, green, purple, cyan}; condition `b` swaps the two
/// palettes. Spheres take any color under both.
enum class Condition { none, a, b };

const char* condition_name(Condition c);
Condition condition_from_name(const std::string& name);

/// Color indices a shape may take under a condition.
std::vector<int> allowed_colors(Condition cond, int shape);

/// Deterministic scene draw: `n_objects` distinct grid cells, attributes
/// uniform over the palette the condition allows. With `tight` set, the
/// first two objects form the tight pair described on Scene (both forced
/// small, colors distinct). Rejects n_objects outside [3, 8].
Scene generate_scene(uint64_t seed, int n_objects, Condition cond = Condition::none,
                     bool tight = false);

/// True when `o` lies strictly in direction `dir` ("left", "right", "front",
/// "behind") of `ref`, by grid coordinates.
bool in_direction(const SceneObject& o, const SceneObject& ref, const std::string& dir);

// ---------------------------------------------------------------------------
// Rendering

struct Rendered {
  /// [4, 4*rows, 4*cols]; channel 0 carries size (large 1.0 / small 0.55),
  /// 1 color, 2 shape, 3 material (metal as a checker of 1.0/0.6, rubber
  /// flat 0.4). Empty pixels are exactly 0 in every channel.
  Tensor image;
  /// Per object, [1, rows, cols] with 1.0 on each feature cell the object's
  /// footprint touches. Disjoint across objects except for a tight pair
  /// rendered at 14x14, where both members share one cell.
  std::vector<Tensor> segmentation;
};

/// Draw the scene at feature resolution rows x cols (the image is 4x that in
/// pixels). rows and cols must be positive multiples of 14 so grid geometry
/// lands on feature-cell boundaries.
Rendered render_scene(const Scene& s, int rows, int cols);

// ---------------------------------------------------------------------------
// Symbolic evaluation
//
// Ground-truth semantics over object-id sets. U is the set of all ids.
//   scene                 -> U
//   attention[v](S)       -> { o in S : attr(o) = v }
//   relate[d](S)          -> requires |S| = 1 with member r;
//                            { o in U : o strictly in direction d of r }
//   same[k](S)            -> requires |S| = 1 with member r;
//                            { o in U : o != r and attr_k(o) = attr_k(r) }
//   unique(S)             -> requires |S| = 1; S
//   and(S,T) / or(S,T)    -> intersection / union
//   query_count(S)        -> |S|            (answer "0".."8")
//   query_exist(S)        -> |S| > 0        (answer "yes"/"no")
//   query_<attr>(S)       -> requires |S| = 1; that object's value
//   compare_<attr>(x,y)   -> requires both operands to be <attr> values;
//                            "yes" iff equal
//   compare_integer-equal, compare_greater, compare_less
//                         -> require both operands to be counts; compare them
// A failed requirement makes the node undefined; undefinedness propagates to
// the root. Dataset generation only emits samples whose answer is defined.

struct SymResult {
  bool defined = false;
  std::string answer;  // one of the 26 answer labels; empty when undefined
  /// Aligned with the post-order node numbering used by the program graph.
  /// Engaged with the node's sorted object-id set for mask-producing nodes
  /// that evaluated; disengaged for encoding nodes and for nodes at or
  /// downstream of a failed requirement.
  std::vector<std::optional<std::vector<int>>> node_sets;
};

/// A program lowered to opcodes for repeated symbolic runs.
class SymProgram {
 public:
  explicit SymProgram(const prog::Node& root);

  SymResult run(const Scene& s) const;
  /// Allocation-free rerun for enumeration loops.
  void run(const Scene& s, SymResult& out) const;

  int node_count() const { return static_cast<int>(ops_.size()); }

 private:
  struct Op {
    int code;      // dispatch tag (internal)
    int arg = 0;   // attribute kind / direction index
    int arg2 = 0;  // attribute value index (attention only)
    int lhs = -1;  // child node indices (post-order)
    int rhs = -1;
  };
  std::vector<Op> ops_;
};

SymResult symbolic_execute(const prog::Node& root, const Scene& s);
SymResult symbolic_execute(const std::string& program, const Scene& s);

// ---------------------------------------------------------------------------
// Question templates

struct TemplateSpec {
  std::string id;
  std::string family;  // count, exist, compare-numbers, query-attribute,
                       // compare-attribute
};

/// The closed template list; every family above appears, including a
/// two-branch and/or template and a same-attribute template.
const std::vector<TemplateSpec>& question_templates();
const std::vector<std::string>& family_names();

struct Sample {
  int scene_id = 0;
  std::string template_id;
  std::string family;
  std::string program;   // canonical program text
  std::string question;  // rendered template string (metadata only)
  std::string answer;    // one of the 26 labels
  /// Per program-graph node (post-order): the ground-truth object-id set for
  /// mask-producing nodes, disengaged for encoding nodes.
  std::vector<std::optional<std::vector<int>>> node_sets;
};

/// Instantiate one template on a scene: fill slots at random, keep the first
/// draw whose answer is defined. Empty when the template cannot be satisfied
/// on this scene (caller resamples another template).
std::optional<Sample> instantiate_template(const Scene& s, const TemplateSpec& tmpl,
                                           uint64_t seed);

// ---------------------------------------------------------------------------
// Datasets

struct DatasetConfig {
  std::string out_dir;
  int n_scenes = 100;
  int questions_per_scene = 10;
  int rows = 14;
  int cols = 14;
  int min_objects = 3;
  int max_objects = 8;
  Condition condition = Condition::none;
  bool tight_pairs = false;
  uint64_t seed = 0;
};

struct DatasetStats {
  int n_scenes = 0;
  int n_samples = 0;
  /// family -> answer label -> count
  std::map<std::string, std::map<std::string, int>> family_answers;
  std::map<std::string, int> family_counts;
};

/// Write a dataset directory: header.json, scenes.jsonl, samples.jsonl,
/// stats.json, and images.bin/.manifest holding each scene's rendered image
/// ("image/<id>") and per-object segmentations ("seg/<id>/<obj>").
/// Byte-identical output for identical config and seed.
DatasetStats build_dataset(const DatasetConfig& cfg);

struct Dataset {
  DatasetConfig config;  // echoed from the header
  std::vector<Scene> scenes;
  std::vector<Sample> samples;

  Dataset() = default;
  explicit Dataset(const std::string& dir);

  /// Lazy tensor access; image tensors stay on disk until asked for.
  Tensor image(int scene_id) const;
  std::vector<Tensor> segmentations(int scene_id) const;

 private:
  std::shared_ptr<class DatasetBlob> blob_;
};

Dataset load_dataset(const std::string& dir);

}  // namespace tbd::scene
