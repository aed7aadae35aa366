#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "doctest.h"
#include "tbd/blob.hpp"
#include "tbd/oracle.hpp"
#include "tbd/scene.hpp"

using namespace tbd;
using scene::Condition;
using scene::Scene;
using scene::SceneObject;

namespace {

// attribute indices, matching the vocab lists
enum { gray, blue, brown, yellow, red, green, purple, cyan };
enum { cube, sphere, cylinder };
enum { large, small };
enum { metal, rubber };

SceneObject obj(int id, int row, int col, int color, int shape, int size, int material) {
  SceneObject o;
  o.id = id;
  o.row = row;
  o.col = col;
  o.color = color;
  o.shape = shape;
  o.size = size;
  o.material = material;
  return o;
}

// five-object scene used for the hand-checked executor cases
Scene hand_scene() {
  Scene s;
  s.objects = {
      obj(0, 0, 0, red, cube, large, metal),     obj(1, 0, 3, blue, cube, small, rubber),
      obj(2, 1, 1, red, sphere, large, metal),   obj(3, 2, 2, green, cylinder, small, metal),
      obj(4, 3, 0, red, cylinder, large, rubber),
  };
  return s;
}

std::string answer_of(const std::string& program, const Scene& s) {
  auto r = scene::symbolic_execute(program, s);
  REQUIRE(r.defined);
  return r.answer;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::string fresh_dir(const std::string& tag) {
  std::string d = "/tmp/tbd_scene_" + tag;
  std::filesystem::remove_all(d);
  return d;
}

bool tensors_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (int64_t i = 0; i < a.numel(); ++i) {
    if (a.data()[i] != b.data()[i]) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("scene generation is deterministic and collision-free") {
  Scene a = scene::generate_scene(42, 8);
  Scene b = scene::generate_scene(42, 8);
  REQUIRE(a.objects.size() == 8);
  for (size_t i = 0; i < 8; ++i) {
    CHECK(a.objects[i].row == b.objects[i].row);
    CHECK(a.objects[i].col == b.objects[i].col);
    CHECK(a.objects[i].color == b.objects[i].color);
    CHECK(a.objects[i].shape == b.objects[i].shape);
    CHECK(a.objects[i].size == b.objects[i].size);
    CHECK(a.objects[i].material == b.objects[i].material);
  }
  std::set<std::pair<int, int>> cells;
  for (const auto& o : a.objects) {
    CHECK(o.row >= 0);
    CHECK(o.row < 4);
    CHECK(o.col >= 0);
    CHECK(o.col < 4);
    cells.insert({o.row, o.col});
  }
  CHECK(cells.size() == 8);

  bool any_diff = false;
  Scene c = scene::generate_scene(43, 8);
  for (size_t i = 0; i < 8; ++i) {
    any_diff = any_diff || c.objects[i].color != a.objects[i].color ||
               c.objects[i].row != a.objects[i].row;
  }
  CHECK(any_diff);

  CHECK_THROWS_AS(scene::generate_scene(1, 2), Error);
  CHECK_THROWS_AS(scene::generate_scene(1, 9), Error);
}

TEST_CASE("attribute marginals are uniform within three sigma") {
  int64_t color_n[8] = {0}, shape_n[3] = {0}, size_n[2] = {0}, mat_n[2] = {0};
  int64_t total = 0;
  for (int i = 0; i < 10000; ++i) {
    Scene s = scene::generate_scene(1000 + static_cast<uint64_t>(i), 3 + i % 6);
    for (const auto& o : s.objects) {
      ++color_n[o.color];
      ++shape_n[o.shape];
      ++size_n[o.size];
      ++mat_n[o.material];
      ++total;
    }
  }
  auto within = [&](int64_t count, double p) {
    double mean = static_cast<double>(total) * p;
    double sigma = std::sqrt(static_cast<double>(total) * p * (1 - p));
    return std::abs(static_cast<double>(count) - mean) < 3 * sigma;
  };
  for (int c = 0; c < 8; ++c) CHECK(within(color_n[c], 1.0 / 8));
  for (int c = 0; c < 3; ++c) CHECK(within(shape_n[c], 1.0 / 3));
  for (int c = 0; c < 2; ++c) CHECK(within(size_n[c], 1.0 / 2));
  for (int c = 0; c < 2; ++c) CHECK(within(mat_n[c], 1.0 / 2));
}

TEST_CASE("palette conditions constrain cube and cylinder colors") {
  // first half of the color list for condition-a cubes, second for cylinders
  auto a_cube = scene::allowed_colors(Condition::a, cube);
  CHECK(a_cube == std::vector<int>{gray, blue, brown, yellow});
  CHECK(scene::allowed_colors(Condition::a, cylinder) == std::vector<int>{red, green, purple, cyan});
  CHECK(scene::allowed_colors(Condition::b, cube) == std::vector<int>{red, green, purple, cyan});
  CHECK(scene::allowed_colors(Condition::b, cylinder) == std::vector<int>{gray, blue, brown, yellow});
  CHECK(scene::allowed_colors(Condition::a, sphere).size() == 8);
  CHECK(scene::allowed_colors(Condition::b, sphere).size() == 8);
  CHECK(scene::allowed_colors(Condition::none, cube).size() == 8);

  bool sphere_low = false, sphere_high = false;
  for (int i = 0; i < 2000; ++i) {
    Scene s = scene::generate_scene(77000 + static_cast<uint64_t>(i), 3 + i % 6, Condition::a);
    for (const auto& o : s.objects) {
      if (o.shape == cube) CHECK(o.color < 4);
      if (o.shape == cylinder) CHECK(o.color >= 4);
      if (o.shape == sphere) (o.color < 4 ? sphere_low : sphere_high) = true;
    }
    Scene t = scene::generate_scene(88000 + static_cast<uint64_t>(i), 3 + i % 6, Condition::b);
    for (const auto& o : t.objects) {
      if (o.shape == cube) CHECK(o.color >= 4);
      if (o.shape == cylinder) CHECK(o.color < 4);
    }
  }
  CHECK(sphere_low);
  CHECK(sphere_high);
}

TEST_CASE("relate sets agree with grid coordinates") {
  for (uint64_t seed = 0; seed < 50; ++seed) {
    Scene s = scene::generate_scene(seed, 3 + static_cast<int>(seed % 6));
    for (const auto& ref : s.objects) {
      for (const std::string dir : {"left", "right", "front", "behind"}) {
        CHECK_FALSE(scene::in_direction(ref, ref, dir));  // irreflexive
        for (const auto& o : s.objects) {
          bool fwd = scene::in_direction(o, ref, dir);
          if (dir == "right") {
            CHECK(fwd == (o.col > ref.col));
            CHECK(fwd == scene::in_direction(ref, o, "left"));  // antisymmetric pairing
          }
          if (dir == "front") {
            CHECK(fwd == (o.row > ref.row));
            CHECK(fwd == scene::in_direction(ref, o, "behind"));
          }
        }
      }
    }
  }
}

TEST_CASE("hand-evaluated symbolic cases") {
  Scene s = hand_scene();
  CHECK(answer_of("query_count(attention[red](scene))", s) == "3");
  CHECK(answer_of("query_count(attention[gray](scene))", s) == "0");
  CHECK(answer_of("query_exist(attention[gray](scene))", s) == "no");
  CHECK(answer_of("query_count(and(attention[red](scene),attention[cube](scene)))", s) == "1");
  CHECK(answer_of("query_count(or(attention[red](scene),attention[cube](scene)))", s) == "4");
  CHECK(answer_of("query_count(relate[right](unique(attention[green](scene))))", s) == "1");
  CHECK(answer_of("query_count(relate[front](unique(attention[blue](scene))))", s) == "3");
  CHECK(answer_of("query_count(relate[behind](unique(attention[green](scene))))", s) == "3");
  CHECK(answer_of("query_exist(same[color](unique(attention[green](scene))))", s) == "no");
  CHECK(answer_of("query_exist(same[shape](unique(attention[green](scene))))", s) == "yes");
  CHECK(answer_of("query_color(unique(attention[green](scene)))", s) == "green");
  CHECK(answer_of("query_material(unique(attention[blue](scene)))", s) == "rubber");
  CHECK(answer_of("query_size(unique(attention[green](scene)))", s) == "small");
  // two-branch program, worked out by hand: the red cube is o0 (red), the
  // green thing o3 (green) -> different colors
  CHECK(answer_of("compare_color(query_color(unique(and(attention[red](scene),attention[cube]("
                  "scene)))),query_color(unique(attention[green](scene))))",
                  s) == "no");
  CHECK(answer_of("compare_greater(query_count(attention[red](scene)),query_count("
                  "attention[cube](scene)))",
                  s) == "yes");
  CHECK(answer_of("compare_less(query_count(attention[red](scene)),query_count(attention["
                  "cube](scene)))",
                  s) == "no");
  CHECK(answer_of("compare_shape(query_shape(unique(attention[green](scene))),query_shape(unique("
                  "and(attention[red](scene),attention[cube](scene)))))",
                  s) == "no");  // cylinder vs cube
  CHECK(answer_of("compare_material(query_material(unique(attention[green](scene))),query_material("
                  "unique(attention[blue](scene))))",
                  s) == "no");  // metal vs rubber
  CHECK_THROWS_AS(scene::symbolic_execute("query_count(attention[red](scene)", s), Error);
}

TEST_CASE("undefined cases: failed uniqueness and mixed compares") {
  Scene s = hand_scene();
  CHECK_FALSE(scene::symbolic_execute("query_color(attention[red](scene))", s).defined);
  CHECK_FALSE(scene::symbolic_execute("query_color(unique(attention[red](scene)))", s).defined);
  CHECK_FALSE(scene::symbolic_execute("query_shape(unique(attention[gray](scene)))", s).defined);
  CHECK_FALSE(scene::symbolic_execute("query_count(relate[left](attention[red](scene)))", s).defined);
  CHECK_FALSE(scene::symbolic_execute("query_exist(same[color](attention[red](scene)))", s).defined);
  // compare over mismatched operand kinds
  CHECK_FALSE(scene::symbolic_execute(
                  "compare_color(query_shape(unique(attention[green](scene))),query_color(unique("
                  "attention[blue](scene))))",
                  s)
                  .defined);
  CHECK_FALSE(scene::symbolic_execute(
                  "compare_integer-equal(query_exist(attention[red](scene)),query_count(attention["
                  "red](scene)))",
                  s)
                  .defined);
  // undefinedness propagates: downstream sets are disengaged
  auto r = scene::symbolic_execute("query_count(relate[left](attention[red](scene)))", s);
  // post-order: scene, attention[red], relate[left], query_count
  REQUIRE(r.node_sets.size() == 4);
  CHECK(r.node_sets[0].has_value());
  CHECK(r.node_sets[1].has_value());
  CHECK_FALSE(r.node_sets[2].has_value());
  CHECK_FALSE(r.node_sets[3].has_value());
}

TEST_CASE("per-node ground-truth sets in post order") {
  Scene s = hand_scene();
  auto r = scene::symbolic_execute(
      "query_count(and(attention[red](scene),attention[cube](scene)))", s);
  REQUIRE(r.defined);
  REQUIRE(r.node_sets.size() == 6);
  CHECK(*r.node_sets[0] == std::vector<int>{0, 1, 2, 3, 4});  // scene
  CHECK(*r.node_sets[1] == std::vector<int>{0, 2, 4});        // attention[red]
  CHECK(*r.node_sets[2] == std::vector<int>{0, 1, 2, 3, 4});  // scene
  CHECK(*r.node_sets[3] == std::vector<int>{0, 1});           // attention[cube]
  CHECK(*r.node_sets[4] == std::vector<int>{0});              // and
  CHECK_FALSE(r.node_sets[5].has_value());                    // query_count
  // same[...] excludes the reference itself
  auto rs = scene::symbolic_execute("query_count(same[color](unique(attention[blue](scene))))", s);
  REQUIRE(rs.defined);
  CHECK(rs.answer == "0");
  auto rr = scene::symbolic_execute("query_count(same[material](unique(attention[blue](scene))))", s);
  CHECK(*rr.node_sets[3] == std::vector<int>{4});  // the other rubber thing
}

TEST_CASE("rendering: geometry, channels, background") {
  Scene s = hand_scene();
  auto r = scene::render_scene(s, 14, 14);
  REQUIRE(r.image.shape() == std::vector<int>{4, 56, 56});
  REQUIRE(r.segmentation.size() == 5);

  // o0: large at grid (0,0) -> u rows/cols [4,12)
  CHECK(r.image.at(0, 4, 4) == 1.0);
  CHECK(r.image.at(1, 4, 4) == doctest::Approx((red + 1) / 8.0));
  CHECK(r.image.at(2, 4, 4) == doctest::Approx((cube + 1) / 3.0));
  CHECK(r.image.at(3, 4, 4) == 1.0);  // metal checker, even tile
  CHECK(r.image.at(3, 4, 8) == 0.6);  // odd tile
  // o4: rubber -> flat material channel
  CHECK(r.image.at(3, 48, 4) == 0.4);
  CHECK(r.image.at(0, 48, 4) == 1.0);
  // o1: small at grid (0,3) -> u [8,12) x [52,56)
  CHECK(r.image.at(0, 8, 52) == 0.55);
  CHECK(r.image.at(1, 8, 52) == doctest::Approx((blue + 1) / 8.0));

  // background is exactly zero: first four pixel rows and an empty grid cell
  for (int ch = 0; ch < 4; ++ch) {
    for (int c = 0; c < 56; ++c) {
      CHECK(r.image.at(ch, 0, c) == 0.0);
      CHECK(r.image.at(ch, 3, c) == 0.0);
    }
    for (int pr = 0; pr < 14; ++pr) {  // grid cell (0,1) is empty
      for (int pc = 14; pc < 28; ++pc) {
        CHECK(r.image.at(ch, pr, pc) == 0.0);
      }
    }
  }

  // segmentation: large objects cover 2x2 feature cells, small 1x1
  auto seg_sum = [](const Tensor& t) {
    double s = 0;
    for (int64_t i = 0; i < t.numel(); ++i) s += t.data()[i];
    return s;
  };
  CHECK(seg_sum(r.segmentation[0]) == 4.0);
  CHECK(seg_sum(r.segmentation[1]) == 1.0);
  CHECK(r.segmentation[0].at(0, 1, 1) == 1.0);
  CHECK(r.segmentation[0].at(0, 2, 2) == 1.0);
  CHECK(r.segmentation[1].at(0, 2, 13) == 1.0);

  // pairwise disjoint, and the union covers the sum of areas
  double total = 0;
  for (const auto& seg : r.segmentation) total += seg_sum(seg);
  CHECK(total == 4 + 1 + 4 + 1 + 4);
  for (size_t i = 0; i < r.segmentation.size(); ++i) {
    for (size_t j = i + 1; j < r.segmentation.size(); ++j) {
      double overlap = 0;
      for (int64_t k = 0; k < r.segmentation[i].numel(); ++k) {
        overlap += r.segmentation[i].data()[k] * r.segmentation[j].data()[k];
      }
      CHECK(overlap == 0.0);
    }
  }

  // doubling the feature resolution quadruples footprint cell counts
  auto r28 = scene::render_scene(s, 28, 28);
  REQUIRE(r28.image.shape() == std::vector<int>{4, 112, 112});
  CHECK(seg_sum(r28.segmentation[0]) == 16.0);
  CHECK(seg_sum(r28.segmentation[1]) == 4.0);

  // material is visible: flipping one object's material changes pixels
  Scene s2 = hand_scene();
  s2.objects[0].material = rubber;
  auto r2 = scene::render_scene(s2, 14, 14);
  CHECK_FALSE(tensors_equal(r.image, r2.image));

  CHECK_THROWS_AS(scene::render_scene(s, 15, 15), Error);
  CHECK_THROWS_AS(scene::render_scene(s, 0, 14), Error);
}

TEST_CASE("tight pairs merge at low resolution and separate at high") {
  for (uint64_t seed = 0; seed < 20; ++seed) {
    Scene s = scene::generate_scene(seed, 4, Condition::none, true);
    REQUIRE(s.tight_pair.has_value());
    const auto& a = s.objects[0];
    const auto& b = s.objects[1];
    CHECK(a.size == small);
    CHECK(b.size == small);
    CHECK(a.color != b.color);
    CHECK(std::abs(a.row - b.row) + std::abs(a.col - b.col) == 1);

    auto r14 = scene::render_scene(s, 14, 14);
    auto r28 = scene::render_scene(s, 28, 28);
    // the pair lands in one shared feature cell at 14x14
    CHECK(tensors_equal(r14.segmentation[0], r14.segmentation[1]));
    double sum14 = 0;
    for (int64_t i = 0; i < r14.segmentation[0].numel(); ++i) {
      sum14 += r14.segmentation[0].data()[i];
    }
    CHECK(sum14 == 1.0);
    // and in separate cells at 28x28
    double overlap = 0, sa = 0, sb = 0;
    for (int64_t i = 0; i < r28.segmentation[0].numel(); ++i) {
      overlap += r28.segmentation[0].data()[i] * r28.segmentation[1].data()[i];
      sa += r28.segmentation[0].data()[i];
      sb += r28.segmentation[1].data()[i];
    }
    CHECK(overlap == 0.0);
    CHECK(sa == 1.0);
    CHECK(sb == 1.0);

    // the shared 14x14 cell mixes both colors; other objects keep clean cells
    int cell_r = -1, cell_c = -1;
    for (int fr = 0; fr < 14; ++fr) {
      for (int fc = 0; fc < 14; ++fc) {
        if (r14.segmentation[0].at(0, fr, fc) == 1.0) {
          cell_r = fr;
          cell_c = fc;
        }
      }
    }
    REQUIRE(cell_r >= 0);
    std::set<double> colors_seen;
    for (int pr = 4 * cell_r; pr < 4 * cell_r + 4; ++pr) {
      for (int pc = 4 * cell_c; pc < 4 * cell_c + 4; ++pc) {
        double v = r14.image.at(1, pr, pc);
        if (v > 0) colors_seen.insert(v);
      }
    }
    CHECK(colors_seen.size() == 2);
    CHECK(colors_seen.count((a.color + 1) / 8.0) == 1);
    CHECK(colors_seen.count((b.color + 1) / 8.0) == 1);
  }
}

TEST_CASE("question templates cover five families and instantiate") {
  const auto& templates = scene::question_templates();
  CHECK(templates.size() >= 10);
  std::set<std::string> families;
  for (const auto& t : templates) families.insert(t.family);
  CHECK(families == std::set<std::string>(scene::family_names().begin(),
                                          scene::family_names().end()));

  std::map<std::string, int> hits;
  for (const auto& t : templates) {
    for (uint64_t seed = 0; seed < 200 && hits[t.id] == 0; ++seed) {
      Scene s = scene::generate_scene(31000 + seed, 3 + static_cast<int>(seed % 6));
      auto sample = scene::instantiate_template(s, t, seed);
      if (!sample) continue;
      ++hits[t.id];
      CHECK(sample->family == t.family);
      CHECK(sample->template_id == t.id);
      CHECK_FALSE(sample->question.empty());
      // answers re-execute identically and are in the answer vocabulary
      auto re = scene::symbolic_execute(sample->program, s);
      REQUIRE(re.defined);
      CHECK(re.answer == sample->answer);
      CHECK(re.node_sets == sample->node_sets);
      CHECK_NOTHROW(answer_index(sample->answer));
      if (t.id == "count-or") CHECK(sample->program.find("or(") != std::string::npos);
      if (t.id == "exist-and") CHECK(sample->program.find("and(") != std::string::npos);
      if (t.id == "exist-same" || t.id == "query-same") {
        CHECK(sample->program.find("same[") != std::string::npos);
      }
    }
    CHECK_MESSAGE(hits[t.id] > 0, "template never instantiated: ", t.id);
  }
}

TEST_CASE("dataset build, reload, and re-execution") {
  std::string dir = fresh_dir("build");
  scene::DatasetConfig cfg;
  cfg.out_dir = dir;
  cfg.n_scenes = 6;
  cfg.questions_per_scene = 4;
  cfg.seed = 77;
  auto stats = scene::build_dataset(cfg);
  CHECK(stats.n_scenes == 6);
  CHECK(stats.n_samples == 24);
  int fam_total = 0;
  for (const auto& [fam, n] : stats.family_counts) {
    fam_total += n;
    int ans_total = 0;
    for (const auto& [ans, c] : stats.family_answers.at(fam)) ans_total += c;
    CHECK(ans_total == n);
  }
  CHECK(fam_total == 24);

  auto ds = scene::load_dataset(dir);
  CHECK(ds.config.rows == 14);
  CHECK(ds.config.seed == 77);
  REQUIRE(ds.scenes.size() == 6);
  REQUIRE(ds.samples.size() == 24);
  for (const auto& sample : ds.samples) {
    auto re = scene::symbolic_execute(sample.program, ds.scenes[static_cast<size_t>(sample.scene_id)]);
    REQUIRE(re.defined);
    CHECK(re.answer == sample.answer);
    CHECK(re.node_sets == sample.node_sets);
  }
  // stored images equal a fresh render of the stored scene
  for (int i = 0; i < 6; ++i) {
    auto rendered = scene::render_scene(ds.scenes[static_cast<size_t>(i)], 14, 14);
    CHECK(tensors_equal(ds.image(i), rendered.image));
    auto segs = ds.segmentations(i);
    REQUIRE(segs.size() == rendered.segmentation.size());
    for (size_t j = 0; j < segs.size(); ++j) {
      CHECK(tensors_equal(segs[j], rendered.segmentation[j]));
    }
  }
}

TEST_CASE("dataset files are byte-identical under one seed") {
  std::string da = fresh_dir("rep_a");
  std::string db = fresh_dir("rep_b");
  scene::DatasetConfig cfg;
  cfg.n_scenes = 4;
  cfg.questions_per_scene = 3;
  cfg.seed = 9;
  cfg.out_dir = da;
  scene::build_dataset(cfg);
  cfg.out_dir = db;
  scene::build_dataset(cfg);
  for (const char* f : {"header.json", "scenes.jsonl", "samples.jsonl", "stats.json",
                        "images.bin", "images.manifest"}) {
    CHECK_MESSAGE(slurp(da + "/" + f) == slurp(db + "/" + f), "differs: ", f);
  }
  std::string dc = fresh_dir("rep_c");
  cfg.out_dir = dc;
  cfg.seed = 10;
  scene::build_dataset(cfg);
  CHECK(slurp(da + "/scenes.jsonl") != slurp(dc + "/scenes.jsonl"));
}

TEST_CASE("dataset loader rejects tampered headers and truncated blobs") {
  std::string dir = fresh_dir("tamper");
  scene::DatasetConfig cfg;
  cfg.out_dir = dir;
  cfg.n_scenes = 3;
  cfg.questions_per_scene = 2;
  cfg.seed = 5;
  scene::build_dataset(cfg);

  auto patch_header = [&](const std::string& from, const std::string& to) {
    std::string h = slurp(dir + "/header.json");
    auto pos = h.find(from);
    REQUIRE(pos != std::string::npos);
    h.replace(pos, from.size(), to);
    std::ofstream(dir + "/header.json", std::ios::trunc) << h;
  };
  patch_header("\"version\": 1", "\"version\": 2");
  CHECK_THROWS_WITH_AS(scene::load_dataset(dir), doctest::Contains("version"), Error);
  patch_header("\"version\": 2", "\"version\": 1");
  CHECK_NOTHROW(scene::load_dataset(dir));
  patch_header("\"yes\",", "\"maybe\",");
  CHECK_THROWS_WITH_AS(scene::load_dataset(dir), doctest::Contains("vocabulary"), Error);
  patch_header("\"maybe\",", "\"yes\",");

  std::filesystem::resize_file(dir + "/images.bin",
                               std::filesystem::file_size(dir + "/images.bin") / 2);
  CHECK_THROWS_WITH_AS(scene::load_dataset(dir), doctest::Contains("truncated"), Error);
}

TEST_CASE("named tensor blobs round-trip with a stable manifest") {
  std::string base = "/tmp/tbd_scene_blob/store";
  std::filesystem::remove_all("/tmp/tbd_scene_blob");
  std::filesystem::create_directories("/tmp/tbd_scene_blob");
  {
    blob::Writer w(base);
    w.add("a", Tensor::from_data({2, 3}, {0, 1, 2, 3, 4, 5}));
    w.add("b/0", Tensor::full({1, 4}, 2.5));
    CHECK_THROWS_AS(w.add("a", Tensor::ones({1})), Error);       // duplicate
    CHECK_THROWS_AS(w.add("bad name", Tensor::ones({1})), Error);  // whitespace
    w.finish();
  }
  CHECK(slurp(base + ".manifest") == "a 2 2 3 0\nb/0 2 1 4 48\n");
  blob::Reader r(base);
  CHECK(r.names() == std::vector<std::string>{"a", "b/0"});
  CHECK(r.has("a"));
  CHECK_FALSE(r.has("zzz"));
  CHECK(r.shape("b/0") == std::vector<int>{1, 4});
  Tensor a = r.read("a");
  CHECK(a.shape() == std::vector<int>{2, 3});
  for (int i = 0; i < 6; ++i) CHECK(a.data()[i] == i);
  CHECK_THROWS_AS(r.read("zzz"), Error);

  std::filesystem::resize_file(base + ".bin", 10);
  CHECK_THROWS_WITH_AS([&] { blob::Reader bad(base); }(), doctest::Contains("truncated"), Error);
}

TEST_CASE("executor agrees with the reference evaluator on a bounded domain") {
  oracle::Domain d;
  d.max_depth = 3;  // the full depth-4 sweep runs in the acceptance suite
  d.random_checks = 2000;
  d.random_seed = 4242;
  auto rep = oracle::run_oracle_check(d);
  CHECK(rep.scenes == 5989);   // 1 + 9*4 + 36*16 + 84*64
  CHECK(rep.programs == 104);  // 4*14 + 3*4^2
  CHECK(rep.cases == rep.scenes * rep.programs + 2000);
  CHECK_MESSAGE(rep.mismatches == 0, rep.first_mismatch);
}
