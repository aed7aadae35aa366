#include "tbd/interp.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "tbd/error.hpp"
#include "tbd/program.hpp"

namespace tbd::interp {

using json = nlohmann::json;

namespace {

int argmax(const Tensor& t) {
  int best = 0;
  const double* d = t.data();
  for (int64_t i = 1; i < t.numel(); ++i) {
    if (d[i] > d[best]) best = static_cast<int>(i);
  }
  return best;
}

void check_mask_shape(const Tensor& mask) {
  if (!mask.defined() || mask.ndim() != 3 || mask.dim(0) != 1) {
    throw Error(ErrorCategory::shape, "attention mask must be [1,R,C]");
  }
}

// nearest cell to a center of mass; half rounds up
std::pair<int, int> com_cell(const Component& c, int rows, int cols) {
  int r = static_cast<int>(std::floor(c.com_row + 0.5));
  int k = static_cast<int>(std::floor(c.com_col + 0.5));
  return {std::clamp(r, 0, rows - 1), std::clamp(k, 0, cols - 1)};
}

bool seg_contains(const Tensor& seg, std::pair<int, int> cell) {
  return seg.at(0, cell.first, cell.second) > 0.5;
}

// post-order flattening matching the execution graph's node order
void flatten(const prog::Node& n, std::vector<const prog::Node*>& out) {
  for (const auto& c : n.children) flatten(*c, out);
  out.push_back(&n);
}

bool scored_kind(TokenKind k, const InterpOptions& opt) {
  if (k == TokenKind::attention) return true;
  return opt.score_relate_same && (k == TokenKind::relate || k == TokenKind::same);
}

}  // namespace

std::vector<Component> attended_components(const Tensor& mask, double threshold) {
  check_mask_shape(mask);
  if (threshold <= 0 || threshold >= 1) {
    throw Error(ErrorCategory::config, "component threshold must lie strictly between 0 and 1");
  }
  const int rows = mask.dim(1), cols = mask.dim(2);
  std::vector<char> seen(static_cast<size_t>(rows) * cols, 0);
  std::vector<Component> out;
  std::vector<std::pair<int, int>> stack;
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      if (seen[static_cast<size_t>(r) * cols + c] || mask.at(0, r, c) < threshold) continue;
      Component comp;
      double wr = 0, wc = 0;
      stack.push_back({r, c});
      seen[static_cast<size_t>(r) * cols + c] = 1;
      while (!stack.empty()) {
        auto [cr, cc] = stack.back();
        stack.pop_back();
        const double v = mask.at(0, cr, cc);
        comp.cells.push_back({cr, cc});
        comp.mass += v;
        wr += v * cr;
        wc += v * cc;
        const int dr[4] = {-1, 1, 0, 0}, dc[4] = {0, 0, -1, 1};
        for (int k = 0; k < 4; ++k) {
          const int nr = cr + dr[k], nc = cc + dc[k];
          if (nr < 0 || nr >= rows || nc < 0 || nc >= cols) continue;
          if (seen[static_cast<size_t>(nr) * cols + nc]) continue;
          if (mask.at(0, nr, nc) < threshold) continue;
          seen[static_cast<size_t>(nr) * cols + nc] = 1;
          stack.push_back({nr, nc});
        }
      }
      comp.com_row = wr / comp.mass;
      comp.com_col = wc / comp.mass;
      out.push_back(std::move(comp));
    }
  }
  return out;
}

AttentionEval attention_eval_with(const MaskFn& masks, const scene::Dataset& data,
                                  const InterpOptions& opt) {
  AttentionEval ev;
  ev.threshold = opt.threshold;
  ev.foreground_only = opt.foreground_only;
  int64_t p_num = 0, p_den = 0, r_num = 0, r_den = 0;
  double macro_p = 0, macro_r = 0;

  for (size_t si = 0; si < data.samples.size(); ++si) {
    const scene::Sample& s = data.samples[si];
    auto tree = prog::parse_program(s.program);
    std::vector<const prog::Node*> flat;
    flatten(*tree, flat);
    if (s.node_sets.size() != flat.size()) {
      ++ev.samples_skipped;
      continue;
    }
    std::vector<Tensor> outs = masks(s);
    if (outs.size() != flat.size()) {
      throw Error(ErrorCategory::shape, "mask source returned " + std::to_string(outs.size()) +
                                            " outputs for " + std::to_string(flat.size()) +
                                            " nodes");
    }
    std::vector<Tensor> segs = data.segmentations(s.scene_id);

    for (size_t i = 0; i < flat.size(); ++i) {
      if (!scored_kind(flat[i]->info.kind, opt)) continue;
      if (!s.node_sets[i]) continue;  // undefined branch: nothing to score against
      const std::vector<int>& truth = *s.node_sets[i];
      const Tensor& mask = outs[i];
      check_mask_shape(mask);
      const int rows = mask.dim(1), cols = mask.dim(2);

      std::vector<Component> comps = attended_components(mask, opt.threshold);
      if (opt.foreground_only) {
        std::erase_if(comps, [&](const Component& c) {
          auto cell = com_cell(c, rows, cols);
          for (const Tensor& seg : segs) {
            if (seg_contains(seg, cell)) return false;
          }
          return true;
        });
      }

      NodeScore ns;
      ns.token = flat[i]->token;
      ns.sample = static_cast<int>(si);
      ns.node = static_cast<int>(i);
      ns.n_components = static_cast<int>(comps.size());
      ns.n_truth = static_cast<int>(truth.size());

      int hits = 0;
      for (const Component& c : comps) {
        auto cell = com_cell(c, rows, cols);
        for (int id : truth) {
          if (seg_contains(segs[static_cast<size_t>(id)], cell)) {
            ++hits;
            break;
          }
        }
      }
      int covered = 0;
      for (int id : truth) {
        for (const Component& c : comps) {
          if (seg_contains(segs[static_cast<size_t>(id)], com_cell(c, rows, cols))) {
            ++covered;
            break;
          }
        }
      }

      if (comps.empty()) {
        ns.precision = 1;  // vacuous: nothing attended, nothing wrong
        ns.vacuous = true;
        ++ev.empty_masks;
      } else {
        ns.precision = static_cast<double>(hits) / static_cast<double>(comps.size());
      }
      if (truth.empty()) {
        ns.recall = 1;  // vacuous: no objects to find
        ns.vacuous = true;
      } else {
        ns.recall = static_cast<double>(covered) / static_cast<double>(truth.size());
      }

      p_num += hits;
      p_den += static_cast<int64_t>(comps.size());
      r_num += covered;
      r_den += static_cast<int64_t>(truth.size());
      macro_p += ns.precision;
      macro_r += ns.recall;
      ++ev.nodes_scored;
      ev.nodes.push_back(std::move(ns));
    }
  }

  ev.micro_precision = p_den ? static_cast<double>(p_num) / static_cast<double>(p_den) : 1.0;
  ev.micro_recall = r_den ? static_cast<double>(r_num) / static_cast<double>(r_den) : 1.0;
  ev.macro_precision = ev.nodes_scored ? macro_p / ev.nodes_scored : 1.0;
  ev.macro_recall = ev.nodes_scored ? macro_r / ev.nodes_scored : 1.0;
  return ev;
}

AttentionEval attention_precision_recall(train::TrainState& model, const scene::Dataset& data,
                                         const InterpOptions& opt) {
  nn::BankRegistry& reg = *model.registry;
  return attention_eval_with(
      [&](const scene::Sample& s) {
        auto graph = prog::compile(s.program, reg);
        return prog::execute(graph, data.image(s.scene_id)).outputs;
      },
      data, opt);
}

void write_eval_report(const AttentionEval& ev, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCategory::io, "cannot open report file " + path);
  for (const NodeScore& ns : ev.nodes) {
    json j;
    j["token"] = ns.token;
    j["sample"] = ns.sample;
    j["node"] = ns.node;
    j["precision"] = ns.precision;
    j["recall"] = ns.recall;
    j["components"] = ns.n_components;
    j["truth"] = ns.n_truth;
    j["vacuous"] = ns.vacuous;
    out << j.dump() << "\n";
  }
  json agg;
  agg["aggregate"] = true;
  agg["threshold"] = ev.threshold;
  agg["foreground_only"] = ev.foreground_only;
  agg["micro_precision"] = ev.micro_precision;
  agg["micro_recall"] = ev.micro_recall;
  agg["macro_precision"] = ev.macro_precision;
  agg["macro_recall"] = ev.macro_recall;
  agg["nodes_scored"] = ev.nodes_scored;
  agg["samples_skipped"] = ev.samples_skipped;
  agg["empty_masks"] = ev.empty_masks;
  out << agg.dump() << "\n";
}

// ---------------------------------------------------------------------------
// Entanglement

namespace {

// query_shape / query_color probes: the target is the unique object feeding
// the root query (the root's child set in post order).
struct ProbeTarget {
  std::string attr;  // "shape" or "color"
  int object_id;
};

std::optional<ProbeTarget> probe_target(const scene::Sample& s) {
  auto tree = prog::parse_program(s.program);
  std::vector<const prog::Node*> flat;
  flatten(*tree, flat);
  if (s.node_sets.size() != flat.size() || flat.size() < 2) return std::nullopt;
  const prog::Node* root = flat.back();
  if (root->info.kind != TokenKind::query) return std::nullopt;
  if (root->info.arg != "shape" && root->info.arg != "color") return std::nullopt;
  const auto& child_set = s.node_sets[flat.size() - 2];
  if (!child_set || child_set->size() != 1) return std::nullopt;
  return ProbeTarget{root->info.arg, (*child_set)[0]};
}

bool legal_under(scene::Condition cond, const scene::SceneObject& o) {
  auto palette = scene::allowed_colors(cond, o.shape);
  return std::find(palette.begin(), palette.end(), o.color) != palette.end();
}

}  // namespace

EntanglementReport entanglement_with(const LogitsFn& model_a, const LogitsFn& model_ab,
                                     const scene::Dataset& probe) {
  EntanglementReport rep;
  for (const scene::Sample& s : probe.samples) {
    auto target = probe_target(s);
    if (!target) {
      ++rep.probes_skipped;
      continue;
    }
    const scene::SceneObject& o =
        probe.scenes[static_cast<size_t>(s.scene_id)].objects[static_cast<size_t>(target->object_id)];
    const bool a_legal = legal_under(scene::Condition::a, o);
    const bool b_legal = legal_under(scene::Condition::b, o);
    if (a_legal == b_legal) {  // legal (or illegal) under both: uninformative
      ++rep.probes_skipped;
      continue;
    }
    const int label = answer_index(s.answer);
    const LogitsFn* fns[2] = {&model_a, &model_ab};
    StageReport* stages[2] = {&rep.before, &rep.after};
    for (int k = 0; k < 2; ++k) {
      const bool correct = argmax((*fns[k])(s)) == label;
      EntanglementCell& cell = target->attr == "shape"
                                   ? (a_legal ? stages[k]->shape_a : stages[k]->shape_b)
                                   : (a_legal ? stages[k]->color_a : stages[k]->color_b);
      ++cell.n;
      cell.correct += correct ? 1 : 0;
    }
    ++rep.probes_used;
  }
  return rep;
}

EntanglementReport entanglement_report(train::TrainState& ckpt_a, train::TrainState& ckpt_ab,
                                       const scene::Dataset& probe) {
  auto runner = [&probe](train::TrainState& st) {
    return [&st, &probe](const scene::Sample& s) {
      auto graph = prog::compile(s.program, *st.registry);
      return prog::execute(graph, probe.image(s.scene_id)).logits;
    };
  };
  return entanglement_with(runner(ckpt_a), runner(ckpt_ab), probe);
}

// ---------------------------------------------------------------------------
// Image export

namespace {

uint8_t quantize(double v) {
  const double b = std::floor(v * 255.0 + 0.5);
  return static_cast<uint8_t>(std::clamp(b, 0.0, 255.0));
}

std::ofstream open_binary(const std::string& path) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw Error(ErrorCategory::io, "cannot open image file " + path);
  return out;
}

}  // namespace

void dump_mask(const Tensor& mask, const std::string& path) {
  check_mask_shape(mask);
  const int rows = mask.dim(1), cols = mask.dim(2);
  auto out = open_binary(path);
  out << "P5\n" << cols << " " << rows << "\n255\n";
  std::vector<uint8_t> bytes(static_cast<size_t>(rows) * cols);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      bytes[static_cast<size_t>(r) * cols + c] = quantize(mask.at(0, r, c));
    }
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCategory::io, "short write to " + path);
}

Colormap load_colormap(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCategory::io, "cannot open colormap " + path);
  Colormap cm;
  int r, g, b;
  while (in >> r >> g >> b) {
    if (r < 0 || r > 255 || g < 0 || g > 255 || b < 0 || b > 255) {
      throw Error(ErrorCategory::format, "colormap entries must be bytes: " + path);
    }
    cm.lut.push_back({static_cast<uint8_t>(r), static_cast<uint8_t>(g), static_cast<uint8_t>(b)});
  }
  if (cm.lut.size() != 256) {
    throw Error(ErrorCategory::format, "colormap must hold exactly 256 rows, got " +
                                           std::to_string(cm.lut.size()) + ": " + path);
  }
  return cm;
}

void dump_mask_overlay(const Tensor& mask, const Tensor& image, const Colormap& cmap,
                       const std::string& path) {
  check_mask_shape(mask);
  if (cmap.lut.size() != 256) {
    throw Error(ErrorCategory::config, "colormap must hold 256 rows");
  }
  if (!image.defined() || image.ndim() != 3) {
    throw Error(ErrorCategory::shape, "overlay image must be [channels,H,W]");
  }
  const int rows = mask.dim(1), cols = mask.dim(2);
  const int h = image.dim(1), w = image.dim(2);
  if (h % rows != 0 || w % cols != 0 || h / rows != w / cols || h < rows) {
    throw Error(ErrorCategory::shape, "image " + image.shape_str() +
                                          " is not an integer upscale of the mask " +
                                          mask.shape_str());
  }
  const int scale = h / rows;
  auto out = open_binary(path);
  out << "P6\n" << w << " " << h << "\n255\n";
  std::vector<uint8_t> bytes;
  bytes.reserve(static_cast<size_t>(h) * w * 3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const auto& c = cmap.lut[quantize(mask.at(0, y / scale, x / scale))];
      const double gray = 255.0 * image.at(0, y, x);  // presence channel as luminance
      for (int k = 0; k < 3; ++k) {
        bytes.push_back(quantize((0.5 * c[k] + 0.5 * gray) / 255.0));
      }
    }
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCategory::io, "short write to " + path);
}

}  // namespace tbd::interp
