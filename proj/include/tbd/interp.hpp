#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tbd/scene.hpp"
#include "tbd/tensor.hpp"
#include "tbd/train.hpp"

namespace tbd::interp {

// ---------------------------------------------------------------------------
// Attended regions

struct Component {
  std::vector<std::pair<int, int>> cells;  // (row, col) of every member cell
  double com_row = 0;                      // attention-weighted mean cell index
  double com_col = 0;
  double mass = 0;
};

/// 4-connected components of {cells >= threshold} in a [1,R,C] mask. The
/// center of mass lives in cell-index space (a uniform block over rows 2..3
/// has com_row 2.5); "inside a segmentation" below means the nearest cell
/// (half rounds up) is marked.
std::vector<Component> attended_components(const Tensor& mask, double threshold);

// ---------------------------------------------------------------------------
// Precision / recall of attention against ground truth

struct NodeScore {
  std::string token;
  int sample = 0;   // index into dataset samples
  int node = 0;     // post-order node index
  double precision = 1;
  double recall = 1;
  int n_components = 0;
  int n_truth = 0;
  bool vacuous = false;  // empty mask (precision) or empty truth (recall)
};

struct AttentionEval {
  double threshold = 0.5;
  bool foreground_only = false;
  // micro: pooled over every component / truth object across scored nodes
  double micro_precision = 0;
  double micro_recall = 0;
  // macro: unweighted mean of per-node scores (vacuous nodes count as 1)
  double macro_precision = 0;
  double macro_recall = 0;
  int nodes_scored = 0;
  int samples_skipped = 0;  // samples whose truth sets were absent
  int empty_masks = 0;      // disclosed vacuous-precision nodes
  std::vector<NodeScore> nodes;
};

struct InterpOptions {
  double threshold = 0.5;
  bool foreground_only = false;   // drop components outside every object
  bool score_relate_same = false; // headline numbers score attention only
};

/// Per-node mask source, aligned with the post-order program nodes; tensors
/// for encoding nodes are ignored. Lets tests swap the model for stubs.
using MaskFn = std::function<std::vector<Tensor>(const scene::Sample&)>;

AttentionEval attention_eval_with(const MaskFn& masks, const scene::Dataset& data,
                                  const InterpOptions& opt);

/// Runs the model forward over the dataset and scores every attention node's
/// mask: precision = fraction of attended components whose center of mass
/// lies inside a ground-truth-correct object's segmentation; recall =
/// fraction of ground-truth objects whose segmentation contains some
/// component's center of mass.
AttentionEval attention_precision_recall(train::TrainState& model, const scene::Dataset& data,
                                         const InterpOptions& opt);

/// Line-oriented JSON: one record per scored node plus a final aggregate
/// record carrying thresholds and counts.
void write_eval_report(const AttentionEval& eval, const std::string& path);

// ---------------------------------------------------------------------------
// Shape/color entanglement across palette conditions

struct EntanglementCell {
  int n = 0;
  int correct = 0;
  /// Absent (not zero) when the probe set never filled this cell.
  std::optional<double> rate() const {
    if (n == 0) return std::nullopt;
    return static_cast<double>(correct) / n;
  }
};

struct StageReport {
  EntanglementCell shape_a, shape_b, color_a, color_b;
};

/// Accuracy of query_shape / query_color probes conditioned on whether the
/// target object's shape+color combination is exclusive to palette condition
/// a or b (objects legal under both are skipped), for the condition-a
/// checkpoint and the finetuned one.
struct EntanglementReport {
  StageReport before, after;
  int probes_used = 0;
  int probes_skipped = 0;  // non-query programs or both-legal targets
};

using LogitsFn = std::function<Tensor(const scene::Sample&)>;

EntanglementReport entanglement_with(const LogitsFn& model_a, const LogitsFn& model_ab,
                                     const scene::Dataset& probe);
EntanglementReport entanglement_report(train::TrainState& ckpt_a, train::TrainState& ckpt_ab,
                                       const scene::Dataset& probe);

// ---------------------------------------------------------------------------
// Mask image export

/// Binary portable graymap: header exactly "P5\n{W} {H}\n255\n", then one
/// byte per cell, row-major, byte = floor(v * 255 + 0.5) clamped to [0,255].
void dump_mask(const Tensor& mask, const std::string& path);

struct Colormap {
  std::vector<std::array<uint8_t, 3>> lut;  // 256 rows
};

/// Text LUT file: 256 lines of "r g b" (0..255 each).
Colormap load_colormap(const std::string& path);

/// Binary portable pixmap (P6) blending colormap(mask) at 0.5 opacity over
/// the rendered image's presence channel (used as luminance), with the mask
/// nearest-neighbor upsampled to the image's 4x resolution.
void dump_mask_overlay(const Tensor& mask, const Tensor& image, const Colormap& cmap,
                       const std::string& path);

}  // namespace tbd::interp
