#include "tbd/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "json.hpp"
#include "tbd/blob.hpp"
#include "tbd/error.hpp"

namespace tbd::train {

using json = nlohmann::json;

namespace {

uint64_t rand_below(std::mt19937_64& rng, uint64_t n) {
  return static_cast<uint64_t>((static_cast<unsigned __int128>(rng()) * n) >> 64);
}

int argmax(const Tensor& t) {
  int best = 0;
  const double* d = t.data();
  for (int64_t i = 1; i < t.numel(); ++i) {
    if (d[i] > d[best]) best = static_cast<int>(i);
  }
  return best;
}

bool is_mask_module(TokenKind k) {
  return k == TokenKind::attention || k == TokenKind::relate || k == TokenKind::same;
}

// Deep copy of every parameter and its optimizer moments, used to hold the
// best-validation epoch while training continues.
struct ParamCopy {
  std::vector<double> data;
  AdamState adam;
};
using Snapshot = std::map<std::string, std::map<std::string, ParamCopy>>;

void take_snapshot(const nn::BankRegistry& reg, Snapshot& out) {
  out.clear();
  for (const auto& [tok, bank] : reg.banks()) {
    auto& dst = out[tok];
    for (const auto& [nm, p] : bank.params) {
      ParamCopy c;
      c.data.assign(p.tensor.data(), p.tensor.data() + p.tensor.numel());
      c.adam = p.adam;
      dst[nm] = std::move(c);
    }
  }
}

// Banks created after the snapshot are dropped; they re-init deterministically
// (init depends only on registry seed + names, not creation order).
void restore_snapshot(nn::BankRegistry& reg, const Snapshot& snap) {
  auto& banks = reg.banks();
  for (auto it = banks.begin(); it != banks.end();) {
    it = snap.count(it->first) ? std::next(it) : banks.erase(it);
  }
  for (const auto& [tok, params] : snap) {
    auto& bank = reg.bank(tok);
    for (const auto& [nm, c] : params) {
      Tensor& t = bank.p(nm);
      std::copy(c.data.begin(), c.data.end(), t.data());
      bank.params.at(nm).adam = c.adam;
      t.zero_grad();
    }
  }
}

void check_dataset_pair(const TrainConfig& cfg, const scene::Dataset& tr,
                        const scene::Dataset& val) {
  if (tr.config.rows != cfg.resolution || tr.config.cols != cfg.resolution ||
      val.config.rows != cfg.resolution || val.config.cols != cfg.resolution) {
    throw Error(ErrorCategory::config,
                "dataset resolution does not match the configured " +
                    std::to_string(cfg.resolution) + "x" + std::to_string(cfg.resolution));
  }
  if (tr.config.condition != val.config.condition) {
    throw Error(ErrorCategory::config, "train and validation palette conditions differ");
  }
}

void check_config(const TrainConfig& cfg) {
  if (cfg.lambda_attn < 0) {
    throw Error(ErrorCategory::config, "mask penalty coefficient must be nonnegative");
  }
  if (cfg.d <= 0 || cfg.hidden <= 0 || cfg.batch_size <= 0 || cfg.max_epochs < 0 ||
      cfg.patience < 1 || cfg.lr <= 0) {
    throw Error(ErrorCategory::config, "bad training configuration value");
  }
  if (cfg.resolution != 14 && cfg.resolution != 28) {
    std::fprintf(stderr, "note: resolution %d is outside the standard set {14, 28}\n",
                 cfg.resolution);
  }
}

json eval_to_json(int epoch, const char* split, double loss, double acc,
                  const std::map<std::string, double>& fam) {
  json j;
  j["epoch"] = epoch;
  j["split"] = split;
  j["loss"] = loss;
  j["accuracy"] = acc;
  j["family_accuracy"] = fam;
  return j;
}

// The shared epoch loop behind train() and finetune().
void run_training(TrainState& state, const TrainConfig& cfg, const scene::Dataset& tr,
                  const scene::Dataset& val) {
  nn::BankRegistry& reg = *state.registry;
  const AdamConfig acfg{cfg.lr, cfg.beta1, cfg.beta2, cfg.eps};

  std::ofstream metrics;
  if (!cfg.metrics_path.empty()) {
    metrics.open(cfg.metrics_path, std::ios::trunc);
    if (!metrics) {
      throw Error(ErrorCategory::io, "cannot open metrics file " + cfg.metrics_path);
    }
  }

  std::vector<Tensor> images(tr.scenes.size());
  for (size_t i = 0; i < images.size(); ++i) images[i] = tr.image(static_cast<int>(i));
  std::vector<int> labels(tr.samples.size());
  for (size_t i = 0; i < labels.size(); ++i) labels[i] = answer_index(tr.samples[i].answer);

  const size_t n = tr.samples.size();
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;

  Snapshot best;
  double best_acc = -1.0;
  int stale = 0;

  for (int e = 0; e < cfg.max_epochs; ++e) {
    const int epoch_no = state.epoch + 1;
    std::mt19937_64 rng(splitmix64(cfg.seed ^ (0xC0FFEEULL + static_cast<uint64_t>(epoch_no))));
    for (size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rand_below(rng, i)]);

    double loss_sum = 0;
    int correct = 0;
    std::map<std::string, int> fam_n, fam_c;
    for (size_t b0 = 0; b0 < n; b0 += static_cast<size_t>(cfg.batch_size)) {
      const size_t bn = std::min(n - b0, static_cast<size_t>(cfg.batch_size));
      Tape tape;
      Tensor total;
      for (size_t k = 0; k < bn; ++k) {
        const size_t idx = order[b0 + k];
        const scene::Sample& s = tr.samples[idx];
        auto graph = prog::compile(s.program, reg);
        auto trace = prog::execute(graph, images[static_cast<size_t>(s.scene_id)]);
        Tensor li = sample_loss(graph, trace, labels[idx], cfg.lambda_attn);
        const double v = li.value();
        if (!std::isfinite(v)) {
          throw Error(ErrorCategory::state, "non-finite loss at sample " + std::to_string(idx) +
                                                " (scene " + std::to_string(s.scene_id) + ")");
        }
        loss_sum += v;
        ++fam_n[s.family];
        if (argmax(trace.logits) == labels[idx]) {
          ++correct;
          ++fam_c[s.family];
        }
        total = total.defined() ? add(total, li) : li;
      }
      tape.backward(scale(total, 1.0 / static_cast<double>(bn)));
      for (auto& [tok, bank] : reg.banks()) {
        for (auto& [nm, p] : bank.params) {
          adam_step(p.tensor, p.adam, acfg);
          p.tensor.zero_grad();
        }
      }
    }
    state.epoch = epoch_no;

    std::map<std::string, double> fam_acc;
    for (const auto& [f, cnt] : fam_n) fam_acc[f] = static_cast<double>(fam_c[f]) / cnt;
    if (metrics.is_open()) {
      metrics << eval_to_json(epoch_no, "train", loss_sum / static_cast<double>(n),
                              static_cast<double>(correct) / static_cast<double>(n), fam_acc)
                     .dump()
              << "\n";
    }

    EvalResult ev = evaluate(state, val);
    if (metrics.is_open()) {
      metrics << eval_to_json(epoch_no, "val", ev.loss, ev.accuracy, ev.family_accuracy).dump()
              << "\n";
      metrics.flush();
    }

    if (ev.accuracy > best_acc) {
      best_acc = ev.accuracy;
      take_snapshot(reg, best);
      stale = 0;
    } else {
      ++stale;
    }
    if (cfg.target_accuracy > 0 && ev.accuracy >= cfg.target_accuracy) break;
    if (stale >= cfg.patience) break;
  }

  if (best_acc >= 0) {
    restore_snapshot(reg, best);
    state.best_val_accuracy = best_acc;
  }
}

}  // namespace

TrainState init_state(const TrainConfig& cfg) {
  check_config(cfg);
  TrainState st;
  st.config = cfg;
  nn::ModelConfig mc;
  mc.d = cfg.d;
  mc.rows = cfg.resolution;
  mc.cols = cfg.resolution;
  mc.hidden = cfg.hidden;
  st.registry = std::make_shared<nn::BankRegistry>(mc, cfg.seed);
  return st;
}

Tensor sample_loss(const prog::ProgramGraph& graph, const prog::Trace& trace, int label,
                   double lambda_attn) {
  Tensor loss = softmax_cross_entropy(trace.logits, label);
  if (lambda_attn > 0) {
    Tensor mass;
    for (size_t i = 0; i < graph.nodes.size(); ++i) {
      if (!is_mask_module(graph.nodes[i].info.kind)) continue;
      Tensor m = l1_mass(trace.outputs[i]);
      mass = mass.defined() ? add(mass, m) : m;
    }
    if (mass.defined()) loss = add(loss, scale(mass, lambda_attn));
  }
  return loss;
}

EvalResult evaluate_with(const std::function<Tensor(const scene::Sample&)>& logits_fn,
                         const scene::Dataset& data) {
  EvalResult r;
  std::map<std::string, int> fam_c;
  for (const auto& s : data.samples) {
    const int label = answer_index(s.answer);
    Tensor lg = logits_fn(s);
    r.loss += softmax_cross_entropy(lg, label).value();
    ++r.family_counts[s.family];
    if (argmax(lg) == label) ++fam_c[s.family];
    ++r.n;
  }
  int correct = 0;
  for (const auto& [f, cnt] : r.family_counts) {
    correct += fam_c[f];
    r.family_accuracy[f] = static_cast<double>(fam_c[f]) / cnt;
  }
  if (r.n > 0) {
    r.loss /= r.n;
    r.accuracy = static_cast<double>(correct) / r.n;
  }
  return r;
}

EvalResult evaluate(TrainState& state, const scene::Dataset& data) {
  nn::BankRegistry& reg = *state.registry;
  return evaluate_with(
      [&](const scene::Sample& s) {
        auto graph = prog::compile(s.program, reg);
        return prog::execute(graph, data.image(s.scene_id)).logits;
      },
      data);
}

TrainState train(const TrainConfig& cfg, const scene::Dataset& train_set,
                 const scene::Dataset& val_set) {
  TrainState st = init_state(cfg);
  check_dataset_pair(cfg, train_set, val_set);
  st.condition = scene::condition_name(train_set.config.condition);
  run_training(st, cfg, train_set, val_set);
  return st;
}

TrainState finetune(TrainState state, const TrainConfig& run, const scene::Dataset& train_b,
                    const scene::Dataset& val_a, const scene::Dataset& val_b,
                    FinetuneReport* report) {
  TrainConfig cfg = state.config;  // model + optimizer settings stay as trained
  cfg.batch_size = run.batch_size;
  cfg.max_epochs = run.max_epochs;
  cfg.patience = run.patience;
  cfg.target_accuracy = run.target_accuracy;
  cfg.seed = run.seed;
  cfg.metrics_path = run.metrics_path;
  check_config(cfg);
  check_dataset_pair(cfg, train_b, val_b);

  const std::string cond_b = scene::condition_name(train_b.config.condition);
  const std::string cond_val_a = scene::condition_name(val_a.config.condition);
  if (cond_val_a != state.condition || cond_b == state.condition) {
    throw Error(ErrorCategory::config,
                "condition mismatch: checkpoint trained on '" + state.condition +
                    "', validation A is '" + cond_val_a + "', finetune set is '" + cond_b + "'");
  }
  if (val_a.config.rows != cfg.resolution || val_a.config.cols != cfg.resolution) {
    throw Error(ErrorCategory::config, "validation A resolution does not match the checkpoint");
  }

  if (report) {
    report->a_before = evaluate(state, val_a);
    report->b_before = evaluate(state, val_b);
  }
  run_training(state, cfg, train_b, val_b);
  state.config = cfg;
  if (report) {
    report->a_after = evaluate(state, val_a);
    report->b_after = evaluate(state, val_b);
  }
  return state;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {
constexpr int kCheckpointVersion = 1;

json config_to_json(const TrainConfig& c) {
  json j;
  j["lr"] = c.lr;
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["eps"] = c.eps;
  j["lambda_attn"] = c.lambda_attn;
  j["batch_size"] = c.batch_size;
  j["max_epochs"] = c.max_epochs;
  j["patience"] = c.patience;
  j["target_accuracy"] = c.target_accuracy;
  j["seed"] = c.seed;
  j["d"] = c.d;
  j["resolution"] = c.resolution;
  j["hidden"] = c.hidden;
  return j;
}

TrainConfig config_from_json(const json& j) {
  TrainConfig c;
  c.lr = j.at("lr").get<double>();
  c.beta1 = j.at("beta1").get<double>();
  c.beta2 = j.at("beta2").get<double>();
  c.eps = j.at("eps").get<double>();
  c.lambda_attn = j.at("lambda_attn").get<double>();
  c.batch_size = j.at("batch_size").get<int>();
  c.max_epochs = j.at("max_epochs").get<int>();
  c.patience = j.at("patience").get<int>();
  c.target_accuracy = j.at("target_accuracy").get<double>();
  c.seed = j.at("seed").get<uint64_t>();
  c.d = j.at("d").get<int>();
  c.resolution = j.at("resolution").get<int>();
  c.hidden = j.at("hidden").get<int>();
  return c;
}
}  // namespace

void save_checkpoint(const TrainState& state, const std::string& dir) {
  std::filesystem::create_directories(dir);
  const nn::BankRegistry& reg = *state.registry;

  json banks = json::object();
  {
    blob::Writer w(dir + "/params");
    for (const auto& [tok, bank] : reg.banks()) {
      json names = json::object();
      for (const auto& [nm, p] : bank.params) {
        const int64_t npar = p.tensor.numel();
        w.add("p/" + tok + "/" + nm, p.tensor);
        std::vector<double> m = p.adam.m, v = p.adam.v;
        if (m.empty()) m.assign(static_cast<size_t>(npar), 0.0);
        if (v.empty()) v.assign(static_cast<size_t>(npar), 0.0);
        w.add("m/" + tok + "/" + nm,
              Tensor::from_data({static_cast<int>(npar)}, std::move(m)));
        w.add("v/" + tok + "/" + nm,
              Tensor::from_data({static_cast<int>(npar)}, std::move(v)));
        names[nm] = p.adam.t;
      }
      banks[tok] = std::move(names);
    }
    w.finish();
  }

  const nn::ModelConfig& mc = reg.config();
  json manifest;
  manifest["format"] = "tbd-checkpoint";
  manifest["version"] = kCheckpointVersion;
  manifest["condition"] = state.condition;
  manifest["epoch"] = state.epoch;
  manifest["best_val_accuracy"] = state.best_val_accuracy;
  manifest["config"] = config_to_json(state.config);
  manifest["model"] = {{"d", mc.d},           {"cin", mc.cin},
                       {"rows", mc.rows},     {"cols", mc.cols},
                       {"k_answers", mc.k_answers}, {"hidden", mc.hidden}};
  manifest["registry_seed"] = reg.seed();
  manifest["banks"] = std::move(banks);

  std::ofstream out(dir + "/manifest.json", std::ios::trunc);
  if (!out) throw Error(ErrorCategory::io, "cannot write " + dir + "/manifest.json");
  out << manifest.dump(2) << "\n";
}

TrainState load_checkpoint(const std::string& dir) {
  std::ifstream in(dir + "/manifest.json");
  if (!in) throw Error(ErrorCategory::io, "cannot open " + dir + "/manifest.json");
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCategory::format, "bad checkpoint manifest: " + std::string(e.what()));
  }
  if (manifest.value("format", "") != "tbd-checkpoint") {
    throw Error(ErrorCategory::format, dir + " is not a checkpoint directory");
  }
  const int version = manifest.value("version", -1);
  if (version != kCheckpointVersion) {
    throw Error(ErrorCategory::format, "unsupported checkpoint version " +
                                           std::to_string(version) + " (expected " +
                                           std::to_string(kCheckpointVersion) + ")");
  }

  TrainState st;
  try {
    st.config = config_from_json(manifest.at("config"));
    st.condition = manifest.at("condition").get<std::string>();
    st.epoch = manifest.at("epoch").get<int>();
    st.best_val_accuracy = manifest.at("best_val_accuracy").get<double>();
    nn::ModelConfig mc;
    const json& jm = manifest.at("model");
    mc.d = jm.at("d").get<int>();
    mc.cin = jm.at("cin").get<int>();
    mc.rows = jm.at("rows").get<int>();
    mc.cols = jm.at("cols").get<int>();
    mc.k_answers = jm.at("k_answers").get<int>();
    mc.hidden = jm.at("hidden").get<int>();
    st.registry = std::make_shared<nn::BankRegistry>(mc, manifest.at("registry_seed").get<uint64_t>());
  } catch (const json::exception& e) {
    throw Error(ErrorCategory::format, "bad checkpoint manifest: " + std::string(e.what()));
  }

  blob::Reader r(dir + "/params");
  std::set<std::string> consumed;
  for (const auto& [tok, names] : manifest.at("banks").items()) {
    nn::ParamBank& bank = st.registry->bank(tok);
    for (const auto& [nm, jt] : names.items()) {
      auto it = bank.params.find(nm);
      if (it == bank.params.end()) {
        throw Error(ErrorCategory::format,
                    "checkpoint manifest lists unknown parameter " + tok + "/" + nm);
      }
      nn::Param& p = it->second;
      const std::string key_p = "p/" + tok + "/" + nm;
      const std::string key_m = "m/" + tok + "/" + nm;
      const std::string key_v = "v/" + tok + "/" + nm;
      for (const std::string& key : {key_p, key_m, key_v}) {
        if (!r.has(key)) {
          throw Error(ErrorCategory::format, "checkpoint blob is missing " + key);
        }
        consumed.insert(key);
      }
      Tensor pv = r.read(key_p);
      if (pv.shape() != p.tensor.shape()) {
        throw Error(ErrorCategory::config, "parameter " + key_p + " has shape " + pv.shape_str() +
                                               " but the model config expects " +
                                               p.tensor.shape_str());
      }
      std::copy(pv.data(), pv.data() + pv.numel(), p.tensor.data());
      Tensor mv = r.read(key_m);
      Tensor vv = r.read(key_v);
      if (mv.numel() != p.tensor.numel() || vv.numel() != p.tensor.numel()) {
        throw Error(ErrorCategory::format,
                    "optimizer moments for " + key_p + " do not match the parameter size");
      }
      p.adam.m.assign(mv.data(), mv.data() + mv.numel());
      p.adam.v.assign(vv.data(), vv.data() + vv.numel());
      p.adam.t = jt.get<int64_t>();
    }
    // every freshly initialized parameter must be covered by the manifest
    for (const auto& [nm, p] : bank.params) {
      if (!names.contains(nm)) {
        throw Error(ErrorCategory::format,
                    "checkpoint manifest is missing parameter " + tok + "/" + nm);
      }
    }
  }
  for (const auto& nm : r.names()) {
    if (!consumed.count(nm)) {
      throw Error(ErrorCategory::format, "checkpoint blob has unmanifested entry " + nm);
    }
  }
  return st;
}

}  // namespace tbd::train
