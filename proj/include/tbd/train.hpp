#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>

#include "tbd/nn.hpp"
#include "tbd/program.hpp"
#include "tbd/scene.hpp"

namespace tbd::train {

struct TrainConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Coefficient on the summed absolute mass of every attention-mask output
  /// produced by a parameterized mask module (attention/relate/same). Query
  /// and compare encodings are never penalized.
  double lambda_attn = 2.5e-7;
  int batch_size = 64;
  int max_epochs = 20;
  int patience = 5;              // epochs without val improvement before stopping
  double target_accuracy = 0.0;  // stop once val accuracy reaches this (0 = off)
  uint64_t seed = 0;
  int d = 64;
  int resolution = 14;  // feature rows == cols; images arrive at 4x
  int hidden = 1024;
  std::string metrics_path;  // line-oriented JSON sink; empty = no file
};

struct EvalResult {
  double loss = 0;      // mean cross-entropy (no mask penalty)
  double accuracy = 0;  // argmax-of-logits
  std::map<std::string, double> family_accuracy;
  std::map<std::string, int> family_counts;
  int n = 0;
};

/// Model parameters plus optimizer state plus provenance. Optimizer moments
/// live inside the banks (nn::Param), so checkpoints carry them naturally.
struct TrainState {
  TrainConfig config;
  std::string condition = "none";  // which palette condition trained this model
  int epoch = 0;                   // epochs completed so far (cumulative)
  double best_val_accuracy = 0.0;
  std::shared_ptr<nn::BankRegistry> registry;
};

/// Fresh state: deterministic parameter init from cfg.seed, Adam at zero.
TrainState init_state(const TrainConfig& cfg);

/// One sample's training objective: cross-entropy of the trace logits against
/// the label, plus lambda_attn times the summed mask mass of every
/// attention/relate/same node in the graph. Records on the active tape.
Tensor sample_loss(const prog::ProgramGraph& graph, const prog::Trace& trace, int label,
                   double lambda_attn);

/// Argmax accuracy plus per-family breakdown, with a pluggable logits source
/// so harness tests can swap the model out.
EvalResult evaluate_with(const std::function<Tensor(const scene::Sample&)>& logits_fn,
                         const scene::Dataset& data);
EvalResult evaluate(TrainState& state, const scene::Dataset& data);

/// Mini-batch SGD-with-Adam over independent per-sample graphs: the batch
/// loss is the mean of sample losses (accumulated in dataset order), one
/// optimizer step per batch, seeded epoch shuffles, early stopping on
/// validation accuracy, and the best-epoch snapshot restored at the end.
/// Emits metrics lines {"epoch","split","loss","accuracy","family_accuracy"}
/// to cfg.metrics_path when set. A non-finite sample loss aborts, naming the
/// sample. Throws a config error when the datasets disagree with each other
/// or with cfg.resolution.
TrainState train(const TrainConfig& cfg, const scene::Dataset& train_set,
                 const scene::Dataset& val_set);

struct FinetuneReport {
  EvalResult a_before, b_before, a_after, b_after;
};

/// Continue training a loaded checkpoint on opposite-condition data. Model
/// shape, learning rate, betas, and the mask penalty stay as trained (Adam
/// moments continue); run length, batch size, patience, target, seed, and
/// the metrics sink come from `run`. The checkpoint's condition must match
/// val_a's and differ from train_b's (val_b matches train_b) — anything else
/// is rejected as a condition mismatch. With run.max_epochs == 0 this is the
/// identity on parameters and metrics.
TrainState finetune(TrainState state, const TrainConfig& run, const scene::Dataset& train_b,
                    const scene::Dataset& val_a, const scene::Dataset& val_b,
                    FinetuneReport* report = nullptr);

/// Checkpoint directory: manifest.json plus params.bin/.manifest holding
/// every parameter ("p/<token>/<name>") and its Adam moments ("m/...",
/// "v/..."). Round-trips bitwise. Loading rejects, with distinct errors:
/// unsupported versions, truncated blobs, manifest entries missing from the
/// blob, and parameter shapes that disagree with the manifest's model config.
void save_checkpoint(const TrainState& state, const std::string& dir);
TrainState load_checkpoint(const std::string& dir);

}  // namespace tbd::train
