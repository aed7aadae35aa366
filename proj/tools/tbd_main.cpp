#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "tbd/cfg.hpp"
#include "tbd/interp.hpp"
#include "tbd/oracle.hpp"
#include "tbd/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace tbd;

namespace {

// Every config key gets a matching flag; flags that were actually passed
// override the file. resolve() also rejects unknown keys in the section.
class Args {
 public:
  Args(CLI::App* cmd, std::string section) : cmd_(cmd), section_(std::move(section)) {
    cmd_->add_option("--config", config_path_,
                     "Config file: 'key = value' lines under [section] headers");
  }

  void add(const std::string& flag, const std::string& key, const std::string& help) {
    auto val = std::make_shared<std::string>();
    auto* opt = cmd_->add_option(flag, *val, help);
    overrides_.push_back({opt, key, val});
  }

  void add_switch(const std::string& flag, const std::string& key, const std::string& help) {
    auto val = std::make_shared<std::string>("1");
    auto* opt = cmd_->add_flag(flag, help);
    overrides_.push_back({opt, key, val});
  }

  cfg::KV resolve() const {
    cfg::KV kv;
    if (!config_path_.empty()) kv = cfg::parse_config_file(config_path_);
    std::vector<std::string> allowed;
    for (const auto& ov : overrides_) {
      allowed.push_back(ov.key);
      if (ov.opt->count() > 0) kv.set(section_ + "." + ov.key, *ov.val);
    }
    kv.restrict_keys(section_, allowed);
    return kv;
  }

  std::string key(const std::string& name) const { return section_ + "." + name; }

 private:
  struct Override {
    CLI::Option* opt;
    std::string key;
    std::shared_ptr<std::string> val;
  };
  CLI::App* cmd_;
  std::string section_;
  std::string config_path_;
  std::vector<Override> overrides_;
};

int parse_resolution(const cfg::KV& kv, const std::string& key) {
  int res = static_cast<int>(kv.get_int(key, 14));
  if (res != 14 && res != 28) {
    throw Error(ErrorCategory::config, "config key '" + key + "': resolution must be 14 or 28");
  }
  return res;
}

scene::Condition parse_condition(const cfg::KV& kv, const std::string& key) {
  std::string name = kv.get_str(key, "none");
  if (name == "none") return scene::Condition::none;
  if (name == "a") return scene::Condition::a;
  if (name == "b") return scene::Condition::b;
  throw Error(ErrorCategory::config,
              "config key '" + key + "': condition must be none, a, or b");
}

std::string sanitize(const std::string& token) {
  std::string out;
  for (char c : token) {
    out.push_back(std::isalnum(static_cast<unsigned char>(c)) ? c : '_');
  }
  while (!out.empty() && out.back() == '_') out.pop_back();
  return out;
}

json eval_json(const train::EvalResult& r) {
  return json{{"loss", r.loss},
              {"accuracy", r.accuracy},
              {"n", r.n},
              {"family_accuracy", r.family_accuracy},
              {"family_counts", r.family_counts}};
}

void run_gen_data(const cfg::KV& kv, const Args& a) {
  scene::DatasetConfig c;
  c.out_dir = kv.require_str(a.key("out"));
  c.seed = kv.get_u64(a.key("seed"), 0);
  c.n_scenes = static_cast<int>(kv.get_int(a.key("n_scenes"), 100));
  c.questions_per_scene = static_cast<int>(kv.get_int(a.key("questions_per_scene"), 10));
  c.rows = c.cols = parse_resolution(kv, a.key("resolution"));
  c.min_objects = static_cast<int>(kv.get_int(a.key("min_objects"), 3));
  c.max_objects = static_cast<int>(kv.get_int(a.key("max_objects"), 8));
  c.condition = parse_condition(kv, a.key("condition"));
  c.tight_pairs = kv.get_bool(a.key("tight_pairs"), false);
  auto stats = scene::build_dataset(c);
  std::printf("gen-data: scenes=%d samples=%d dir=%s\n", stats.n_scenes, stats.n_samples,
              c.out_dir.c_str());
  for (const auto& [family, count] : stats.family_counts) {
    std::printf("family %s = %d\n", family.c_str(), count);
  }
}

void run_train(const cfg::KV& kv, const Args& a) {
  train::TrainConfig tc;
  tc.lr = kv.get_double(a.key("lr"), tc.lr);
  tc.beta1 = kv.get_double(a.key("beta1"), tc.beta1);
  tc.beta2 = kv.get_double(a.key("beta2"), tc.beta2);
  tc.eps = kv.get_double(a.key("eps"), tc.eps);
  tc.lambda_attn = kv.get_double(a.key("lambda_attn"), tc.lambda_attn);
  tc.batch_size = static_cast<int>(kv.get_int(a.key("batch_size"), tc.batch_size));
  tc.max_epochs = static_cast<int>(kv.get_int(a.key("max_epochs"), tc.max_epochs));
  tc.patience = static_cast<int>(kv.get_int(a.key("patience"), tc.patience));
  tc.target_accuracy = kv.get_double(a.key("target_accuracy"), tc.target_accuracy);
  tc.seed = kv.get_u64(a.key("seed"), tc.seed);
  tc.d = static_cast<int>(kv.get_int(a.key("d"), tc.d));
  tc.hidden = static_cast<int>(kv.get_int(a.key("hidden"), tc.hidden));
  tc.resolution = parse_resolution(kv, a.key("resolution"));

  const std::string out = kv.require_str(a.key("out"));
  fs::create_directories(out);
  tc.metrics_path = out + "/metrics.jsonl";
  auto train_set = scene::load_dataset(kv.require_str(a.key("data")));
  auto val_set = scene::load_dataset(kv.require_str(a.key("val")));
  auto state = train::train(tc, train_set, val_set);
  train::save_checkpoint(state, out + "/checkpoint");
  std::printf("train: epochs=%d best_val_accuracy=%.4f checkpoint=%s/checkpoint\n", state.epoch,
              state.best_val_accuracy, out.c_str());
}

void run_finetune(const cfg::KV& kv, const Args& a) {
  auto state = train::load_checkpoint(kv.require_str(a.key("checkpoint")));
  train::TrainConfig run = state.config;
  run.batch_size = static_cast<int>(kv.get_int(a.key("batch_size"), run.batch_size));
  run.max_epochs = static_cast<int>(kv.get_int(a.key("max_epochs"), run.max_epochs));
  run.patience = static_cast<int>(kv.get_int(a.key("patience"), run.patience));
  run.target_accuracy = kv.get_double(a.key("target_accuracy"), run.target_accuracy);
  run.seed = kv.get_u64(a.key("seed"), run.seed);

  const std::string out = kv.require_str(a.key("out"));
  fs::create_directories(out);
  run.metrics_path = out + "/metrics.jsonl";
  auto train_b = scene::load_dataset(kv.require_str(a.key("data")));
  auto val_a = scene::load_dataset(kv.require_str(a.key("val_a")));
  auto val_b = scene::load_dataset(kv.require_str(a.key("val_b")));

  train::FinetuneReport rep;
  auto after = train::finetune(std::move(state), run, train_b, val_a, val_b, &rep);
  train::save_checkpoint(after, out + "/checkpoint");
  std::ofstream rf(out + "/report.json");
  rf << json{{"a_before", eval_json(rep.a_before)},
             {"b_before", eval_json(rep.b_before)},
             {"a_after", eval_json(rep.a_after)},
             {"b_after", eval_json(rep.b_after)}}
            .dump(2)
     << "\n";
  std::printf("finetune: a_before=%.4f b_before=%.4f a_after=%.4f b_after=%.4f checkpoint=%s/checkpoint\n",
              rep.a_before.accuracy, rep.b_before.accuracy, rep.a_after.accuracy,
              rep.b_after.accuracy, out.c_str());
}

void run_eval(const cfg::KV& kv, const Args& a) {
  auto state = train::load_checkpoint(kv.require_str(a.key("checkpoint")));
  auto ds = scene::load_dataset(kv.require_str(a.key("data")));
  auto r = train::evaluate(state, ds);
  std::printf("%-22s %9s %7s\n", "family", "accuracy", "n");
  for (const auto& [family, acc] : r.family_accuracy) {
    std::printf("%-22s %9.4f %7d\n", family.c_str(), acc, r.family_counts.at(family));
  }
  std::printf("%-22s %9.4f %7d\n", "overall", r.accuracy, r.n);
  std::printf("loss %.4f\n", r.loss);
  if (kv.has(a.key("out"))) {
    const std::string out = kv.require_str(a.key("out"));
    fs::create_directories(out);
    std::ofstream of(out + "/eval.json");
    of << eval_json(r).dump(2) << "\n";
  }
}

json cell_json(const interp::EntanglementCell& c) {
  json j{{"n", c.n}, {"correct", c.correct}};
  if (auto r = c.rate()) {
    j["rate"] = *r;
  } else {
    j["rate"] = nullptr;
  }
  return j;
}

std::string cell_str(const interp::EntanglementCell& c) {
  if (auto r = c.rate()) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", *r);
    return buf;
  }
  return "n/a";
}

void run_interp(const cfg::KV& kv, const Args& a) {
  auto state = train::load_checkpoint(kv.require_str(a.key("checkpoint")));
  auto ds = scene::load_dataset(kv.require_str(a.key("data")));
  interp::InterpOptions opt;
  opt.threshold = kv.get_double(a.key("threshold"), opt.threshold);
  opt.foreground_only = kv.get_bool(a.key("foreground_only"), false);
  opt.score_relate_same = kv.get_bool(a.key("score_relate_same"), false);

  const std::string out = kv.require_str(a.key("out"));
  fs::create_directories(out);
  auto ev = interp::attention_precision_recall(state, ds, opt);
  interp::write_eval_report(ev, out + "/attention.jsonl");
  std::printf(
      "interp: nodes_scored=%d micro_precision=%.4f micro_recall=%.4f macro_precision=%.4f "
      "macro_recall=%.4f empty_masks=%d report=%s/attention.jsonl\n",
      ev.nodes_scored, ev.micro_precision, ev.micro_recall, ev.macro_precision, ev.macro_recall,
      ev.empty_masks, out.c_str());

  if (kv.has(a.key("checkpoint_b"))) {
    auto state_b = train::load_checkpoint(kv.require_str(a.key("checkpoint_b")));
    auto rep = interp::entanglement_report(state, state_b, ds);
    std::ofstream ef(out + "/entanglement.json");
    ef << json{{"probes_used", rep.probes_used},
               {"probes_skipped", rep.probes_skipped},
               {"before",
                {{"shape_a", cell_json(rep.before.shape_a)},
                 {"shape_b", cell_json(rep.before.shape_b)},
                 {"color_a", cell_json(rep.before.color_a)},
                 {"color_b", cell_json(rep.before.color_b)}}},
               {"after",
                {{"shape_a", cell_json(rep.after.shape_a)},
                 {"shape_b", cell_json(rep.after.shape_b)},
                 {"color_a", cell_json(rep.after.color_a)},
                 {"color_b", cell_json(rep.after.color_b)}}}}
              .dump(2)
       << "\n";
    std::printf("entanglement: probes_used=%d probes_skipped=%d\n", rep.probes_used,
                rep.probes_skipped);
    std::printf("  shape_a %s -> %s\n", cell_str(rep.before.shape_a).c_str(),
                cell_str(rep.after.shape_a).c_str());
    std::printf("  shape_b %s -> %s\n", cell_str(rep.before.shape_b).c_str(),
                cell_str(rep.after.shape_b).c_str());
    std::printf("  color_a %s -> %s\n", cell_str(rep.before.color_a).c_str(),
                cell_str(rep.after.color_a).c_str());
    std::printf("  color_b %s -> %s\n", cell_str(rep.before.color_b).c_str(),
                cell_str(rep.after.color_b).c_str());
  }
}

void run_dump_masks(const cfg::KV& kv, const Args& a) {
  auto state = train::load_checkpoint(kv.require_str(a.key("checkpoint")));
  auto ds = scene::load_dataset(kv.require_str(a.key("data")));
  const int64_t sample = kv.get_int(a.key("sample"), 0);
  if (sample < 0 || sample >= static_cast<int64_t>(ds.samples.size())) {
    throw Error(ErrorCategory::config,
                "sample index " + std::to_string(sample) + " out of range (dataset has " +
                    std::to_string(ds.samples.size()) + " samples)");
  }
  const std::string out = kv.require_str(a.key("out"));
  fs::create_directories(out);

  interp::Colormap cmap;
  const bool overlay = kv.has(a.key("colormap"));
  if (overlay) cmap = interp::load_colormap(kv.require_str(a.key("colormap")));

  const auto& s = ds.samples[static_cast<size_t>(sample)];
  auto graph = prog::compile(s.program, *state.registry);
  Tensor image = ds.image(s.scene_id);
  auto trace = prog::execute(graph, image);

  int wrote = 0;
  for (size_t i = 0; i < graph.nodes.size(); ++i) {
    if (graph.nodes[i].info.yields_encoding) continue;
    char stem[64];
    std::snprintf(stem, sizeof stem, "node%02zu_%s", i, sanitize(graph.nodes[i].token).c_str());
    interp::dump_mask(trace.outputs[i], out + "/" + stem + ".pgm");
    if (overlay) {
      interp::dump_mask_overlay(trace.outputs[i], image, cmap, out + "/" + stem + "_overlay.ppm");
    }
    ++wrote;
  }

  int best = 0;
  for (int k = 1; k < trace.logits.numel(); ++k) {
    if (trace.logits.data()[k] > trace.logits.data()[best]) best = k;
  }
  std::ofstream pf(out + "/program.txt");
  pf << s.program << "\n"
     << "predicted: " << answer_vocab()[static_cast<size_t>(best)] << "\n"
     << "label: " << s.answer << "\n";
  std::printf("dump-masks: sample=%lld nodes=%zu masks=%d out=%s\n",
              static_cast<long long>(sample), graph.nodes.size(), wrote, out.c_str());
}

void run_oracle_check(const cfg::KV& kv, const Args& a) {
  oracle::Domain d;
  d.grid = static_cast<int>(kv.get_int(a.key("grid"), d.grid));
  d.max_objects = static_cast<int>(kv.get_int(a.key("max_objects"), d.max_objects));
  d.max_depth = static_cast<int>(kv.get_int(a.key("max_depth"), 3));
  d.random_checks = kv.get_u64(a.key("random_checks"), 2000);
  d.random_seed = kv.get_u64(a.key("seed"), 1);
  auto rep = oracle::run_oracle_check(d);
  std::printf("oracle-check: scenes=%llu programs=%llu cases=%llu mismatches=%llu seconds=%.2f %s\n",
              static_cast<unsigned long long>(rep.scenes),
              static_cast<unsigned long long>(rep.programs),
              static_cast<unsigned long long>(rep.cases),
              static_cast<unsigned long long>(rep.mismatches), rep.seconds,
              rep.mismatches == 0 ? "PASS" : "FAIL");
  if (rep.mismatches != 0) {
    throw Error(ErrorCategory::state, "executor disagreement: " + rep.first_mismatch);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Compositional visual reasoning over synthetic scenes"};
  app.name("tbd");
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Print help for every subcommand");

  auto gen = std::make_shared<Args>(
      app.add_subcommand("gen-data", "Render a synthetic question-answering dataset"), "data");
  gen->add("--out", "out", "Output dataset directory (required)");
  gen->add("--seed", "seed", "Generation seed");
  gen->add("--n-scenes", "n_scenes", "Number of scenes");
  gen->add("--questions-per-scene", "questions_per_scene", "Questions sampled per scene");
  gen->add("--resolution", "resolution", "Feature grid resolution: 14 or 28");
  gen->add("--min-objects", "min_objects", "Minimum objects per scene");
  gen->add("--max-objects", "max_objects", "Maximum objects per scene");
  gen->add("--condition", "condition", "Color palette condition: none, a, or b");
  gen->add_switch("--tight-pairs", "tight_pairs", "Place an adjacent small-object pair");

  auto tr = std::make_shared<Args>(
      app.add_subcommand("train", "Train a model from scratch"), "train");
  tr->add("--data", "data", "Training dataset directory (required)");
  tr->add("--val", "val", "Validation dataset directory (required)");
  tr->add("--out", "out", "Run directory for checkpoint and metrics (required)");
  tr->add("--seed", "seed", "Training seed");
  tr->add("--lr", "lr", "Adam learning rate");
  tr->add("--beta1", "beta1", "Adam beta1");
  tr->add("--beta2", "beta2", "Adam beta2");
  tr->add("--eps", "eps", "Adam epsilon");
  tr->add("--lambda-attn", "lambda_attn", "Attention mask sparsity penalty");
  tr->add("--batch-size", "batch_size", "Samples per optimizer step");
  tr->add("--max-epochs", "max_epochs", "Epoch budget");
  tr->add("--patience", "patience", "Early-stop patience in epochs");
  tr->add("--target-accuracy", "target_accuracy", "Stop at this validation accuracy (0 = off)");
  tr->add("--d", "d", "Module channel width");
  tr->add("--hidden", "hidden", "Classifier hidden width");
  tr->add("--resolution", "resolution", "Feature grid resolution: 14 or 28");

  auto ft = std::make_shared<Args>(
      app.add_subcommand("finetune", "Continue a checkpoint on opposite-condition data"),
      "finetune");
  ft->add("--checkpoint", "checkpoint", "Checkpoint directory to start from (required)");
  ft->add("--data", "data", "Opposite-condition training dataset (required)");
  ft->add("--val-a", "val_a", "Validation dataset matching the checkpoint condition (required)");
  ft->add("--val-b", "val_b", "Validation dataset matching the finetune condition (required)");
  ft->add("--out", "out", "Run directory for checkpoint, metrics, report (required)");
  ft->add("--seed", "seed", "Finetune seed");
  ft->add("--batch-size", "batch_size", "Samples per optimizer step");
  ft->add("--max-epochs", "max_epochs", "Epoch budget");
  ft->add("--patience", "patience", "Early-stop patience in epochs");
  ft->add("--target-accuracy", "target_accuracy", "Stop at this validation accuracy (0 = off)");

  auto ev = std::make_shared<Args>(
      app.add_subcommand("eval", "Per-family accuracy report for a checkpoint"), "eval");
  ev->add("--checkpoint", "checkpoint", "Checkpoint directory (required)");
  ev->add("--data", "data", "Evaluation dataset directory (required)");
  ev->add("--out", "out", "Optional directory for eval.json");

  auto in = std::make_shared<Args>(
      app.add_subcommand("interp", "Score attention masks against ground-truth objects"),
      "interp");
  in->add("--checkpoint", "checkpoint", "Checkpoint directory (required)");
  in->add("--checkpoint-b", "checkpoint_b",
          "Second checkpoint: adds a before/after concept-entanglement report");
  in->add("--data", "data", "Probe dataset directory (required)");
  in->add("--out", "out", "Output directory for reports (required)");
  in->add("--threshold", "threshold", "Attention cell threshold in (0,1)");
  in->add_switch("--foreground-only", "foreground_only",
                 "Ignore components centered outside every object");
  in->add_switch("--score-relate-same", "score_relate_same",
                 "Also score relate/same masks, not just attention");

  auto dm = std::make_shared<Args>(
      app.add_subcommand("dump-masks", "Write one sample's module masks as PGM/PPM images"),
      "masks");
  dm->add("--checkpoint", "checkpoint", "Checkpoint directory (required)");
  dm->add("--data", "data", "Dataset directory (required)");
  dm->add("--out", "out", "Output directory for images (required)");
  dm->add("--sample", "sample", "Sample index to visualize");
  dm->add("--colormap", "colormap", "Colormap file: 256 'r g b' lines; adds PPM overlays");

  auto oc = std::make_shared<Args>(
      app.add_subcommand("oracle-check",
                         "Cross-check the program executor against a reference evaluator"),
      "oracle");
  oc->add("--grid", "grid", "Scene position grid side for the exhaustive sweep");
  oc->add("--max-objects", "max_objects", "Objects per scene in the exhaustive sweep");
  oc->add("--max-depth", "max_depth", "Program call depth for the exhaustive sweep");
  oc->add("--random-checks", "random_checks", "Extra random full-vocabulary cases");
  oc->add("--seed", "seed", "Seed for the random cases");

  app.get_subcommand("gen-data")->callback([gen] { run_gen_data(gen->resolve(), *gen); });
  app.get_subcommand("train")->callback([tr] { run_train(tr->resolve(), *tr); });
  app.get_subcommand("finetune")->callback([ft] { run_finetune(ft->resolve(), *ft); });
  app.get_subcommand("eval")->callback([ev] { run_eval(ev->resolve(), *ev); });
  app.get_subcommand("interp")->callback([in] { run_interp(in->resolve(), *in); });
  app.get_subcommand("dump-masks")->callback([dm] { run_dump_masks(dm->resolve(), *dm); });
  app.get_subcommand("oracle-check")->callback([oc] { run_oracle_check(oc->resolve(), *oc); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    CLI::App* cur = &app;
    while (!cur->get_subcommands().empty()) cur = cur->get_subcommands().front();
    std::fputs(cur->help().c_str(), stdout);
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    std::fputs(app.help("", CLI::AppFormatMode::All).c_str(), stdout);
    return 0;
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "error: [usage] %s\n", e.what());
    return 2;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: [%s] %s\n", to_string(e.category()), e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: [internal] %s\n", e.what());
    return 3;
  }
  return 0;
}
