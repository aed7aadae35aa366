#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>
#include <string>
#include <vector>

#include "tbd/interp.hpp"
#include "tbd/oracle.hpp"
#include "tbd/train.hpp"

namespace py = pybind11;
using namespace tbd;

namespace {

using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor tensor_from_numpy(const DoubleArray& a) {
  std::vector<int> shape(static_cast<size_t>(a.ndim()));
  for (py::ssize_t i = 0; i < a.ndim(); ++i) shape[static_cast<size_t>(i)] = static_cast<int>(a.shape(i));
  std::vector<double> data(a.data(), a.data() + a.size());
  return Tensor::from_data(std::move(shape), std::move(data));
}

py::array_t<double> tensor_to_numpy(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy(t.data(), t.data() + t.numel(), out.mutable_data());
  return out;
}

template <typename T>
void read_key(const py::dict& d, const char* name, T& field) {
  if (d.contains(name)) field = d[name].cast<T>();
}

train::TrainConfig train_config_from_dict(const py::dict& d) {
  train::TrainConfig c;
  for (const auto& item : d) {
    const std::string key = py::str(item.first);
    static const std::vector<std::string> known = {
        "lr",       "beta1",      "beta2",    "eps",  "lambda_attn",     "batch_size",
        "max_epochs", "patience", "target_accuracy", "seed", "d", "resolution",
        "hidden",   "metrics_path"};
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw Error(ErrorCategory::config, "unknown training config key '" + key + "'");
    }
  }
  read_key(d, "lr", c.lr);
  read_key(d, "beta1", c.beta1);
  read_key(d, "beta2", c.beta2);
  read_key(d, "eps", c.eps);
  read_key(d, "lambda_attn", c.lambda_attn);
  read_key(d, "batch_size", c.batch_size);
  read_key(d, "max_epochs", c.max_epochs);
  read_key(d, "patience", c.patience);
  read_key(d, "target_accuracy", c.target_accuracy);
  read_key(d, "seed", c.seed);
  read_key(d, "d", c.d);
  read_key(d, "resolution", c.resolution);
  read_key(d, "hidden", c.hidden);
  read_key(d, "metrics_path", c.metrics_path);
  return c;
}

py::dict train_config_to_dict(const train::TrainConfig& c) {
  py::dict d;
  d["lr"] = c.lr;
  d["beta1"] = c.beta1;
  d["beta2"] = c.beta2;
  d["eps"] = c.eps;
  d["lambda_attn"] = c.lambda_attn;
  d["batch_size"] = c.batch_size;
  d["max_epochs"] = c.max_epochs;
  d["patience"] = c.patience;
  d["target_accuracy"] = c.target_accuracy;
  d["seed"] = c.seed;
  d["d"] = c.d;
  d["resolution"] = c.resolution;
  d["hidden"] = c.hidden;
  d["metrics_path"] = c.metrics_path;
  return d;
}

py::dict eval_to_dict(const train::EvalResult& r) {
  py::dict d;
  d["loss"] = r.loss;
  d["accuracy"] = r.accuracy;
  d["n"] = r.n;
  d["family_accuracy"] = r.family_accuracy;
  d["family_counts"] = r.family_counts;
  return d;
}

py::dict sample_to_dict(const scene::Sample& s) {
  py::dict d;
  d["scene_id"] = s.scene_id;
  d["template_id"] = s.template_id;
  d["family"] = s.family;
  d["program"] = s.program;
  d["question"] = s.question;
  d["answer"] = s.answer;
  py::list sets;
  for (const auto& ns : s.node_sets) {
    if (ns) {
      sets.append(py::cast(*ns));
    } else {
      sets.append(py::none());
    }
  }
  d["node_sets"] = std::move(sets);
  return d;
}

// Checkpoint-backed (or freshly trained) model handle.
struct Model {
  train::TrainState state;

  py::dict config() const { return train_config_to_dict(state.config); }

  py::array_t<double> logits(const std::string& program, const DoubleArray& image) {
    auto graph = prog::compile(program, *state.registry);
    auto trace = prog::execute(graph, tensor_from_numpy(image));
    return tensor_to_numpy(trace.logits);
  }

  std::string answer(const std::string& program, const DoubleArray& image) {
    auto graph = prog::compile(program, *state.registry);
    auto trace = prog::execute(graph, tensor_from_numpy(image));
    int best = 0;
    for (int k = 1; k < trace.logits.numel(); ++k) {
      if (trace.logits.data()[k] > trace.logits.data()[best]) best = k;
    }
    return answer_vocab()[static_cast<size_t>(best)];
  }

  py::list masks(const std::string& program, const DoubleArray& image) {
    auto graph = prog::compile(program, *state.registry);
    auto trace = prog::execute(graph, tensor_from_numpy(image));
    py::list out;
    for (size_t i = 0; i < graph.nodes.size(); ++i) {
      py::object value = graph.nodes[i].info.yields_encoding
                             ? py::object(py::none())
                             : py::object(tensor_to_numpy(trace.outputs[i]));
      out.append(py::make_tuple(graph.nodes[i].token, value));
    }
    return out;
  }

  py::dict evaluate(const std::string& dataset_dir) {
    auto ds = scene::load_dataset(dataset_dir);
    return eval_to_dict(train::evaluate(state, ds));
  }

  void save(const std::string& dir) { train::save_checkpoint(state, dir); }
};

}  // namespace

PYBIND11_MODULE(_tbd, m) {
  m.doc() = "Compositional visual reasoning: dataset synthesis, training, inspection";

  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      std::string msg = std::string("[") + to_string(e.category()) + "] " + e.what();
      PyErr_SetString(PyExc_RuntimeError, msg.c_str());
    }
  });

  m.def("answer_vocab", [] { return answer_vocab(); }, "The 26 answer labels in logit order");

  m.def(
      "canonical_program",
      [](const std::string& text) {
        auto tree = prog::parse_program(text);
        prog::type_check(*tree);
        return prog::print_program(*tree);
      },
      py::arg("text"), "Parse and type-check a program; returns its canonical rendering");

  m.def(
      "build_dataset",
      [](const std::string& out_dir, int n_scenes, int questions_per_scene, int resolution,
         const std::string& condition, bool tight_pairs, uint64_t seed, int min_objects,
         int max_objects) {
        scene::DatasetConfig c;
        c.out_dir = out_dir;
        c.n_scenes = n_scenes;
        c.questions_per_scene = questions_per_scene;
        c.rows = c.cols = resolution;
        c.condition = scene::condition_from_name(condition);
        c.tight_pairs = tight_pairs;
        c.seed = seed;
        c.min_objects = min_objects;
        c.max_objects = max_objects;
        auto stats = scene::build_dataset(c);
        py::dict d;
        d["n_scenes"] = stats.n_scenes;
        d["n_samples"] = stats.n_samples;
        d["family_counts"] = stats.family_counts;
        return d;
      },
      py::arg("out_dir"), py::arg("n_scenes") = 100, py::arg("questions_per_scene") = 10,
      py::arg("resolution") = 14, py::arg("condition") = "none", py::arg("tight_pairs") = false,
      py::arg("seed") = 0, py::arg("min_objects") = 3, py::arg("max_objects") = 8,
      "Render a synthetic dataset directory; byte-identical for identical arguments");

  py::class_<scene::Dataset>(m, "Dataset")
      .def(py::init([](const std::string& dir) { return scene::load_dataset(dir); }),
           py::arg("dir"))
      .def_property_readonly("n_samples",
                             [](const scene::Dataset& d) { return d.samples.size(); })
      .def_property_readonly("n_scenes", [](const scene::Dataset& d) { return d.scenes.size(); })
      .def_property_readonly("resolution",
                             [](const scene::Dataset& d) { return d.config.rows; })
      .def_property_readonly(
          "condition",
          [](const scene::Dataset& d) { return scene::condition_name(d.config.condition); })
      .def("sample",
           [](const scene::Dataset& d, size_t i) {
             if (i >= d.samples.size()) throw py::index_error("sample index out of range");
             return sample_to_dict(d.samples[i]);
           })
      .def("image",
           [](const scene::Dataset& d, int scene_id) { return tensor_to_numpy(d.image(scene_id)); })
      .def("segmentations", [](const scene::Dataset& d, int scene_id) {
        py::list out;
        for (const auto& seg : d.segmentations(scene_id)) out.append(tensor_to_numpy(seg));
        return out;
      });

  py::class_<Model>(m, "Model")
      .def(py::init([](const std::string& checkpoint_dir) {
             return Model{train::load_checkpoint(checkpoint_dir)};
           }),
           py::arg("checkpoint_dir"))
      .def_property_readonly("config", &Model::config)
      .def_property_readonly("condition", [](const Model& m_) { return m_.state.condition; })
      .def_property_readonly("epoch", [](const Model& m_) { return m_.state.epoch; })
      .def_property_readonly("best_val_accuracy",
                             [](const Model& m_) { return m_.state.best_val_accuracy; })
      .def("logits", &Model::logits, py::arg("program"), py::arg("image"))
      .def("answer", &Model::answer, py::arg("program"), py::arg("image"))
      .def("masks", &Model::masks, py::arg("program"), py::arg("image"),
           "Per-node (token, mask) pairs in evaluation order; None for encoding nodes")
      .def("evaluate", &Model::evaluate, py::arg("dataset_dir"))
      .def("save", &Model::save, py::arg("dir"));

  m.def(
      "train",
      [](const py::dict& config, const std::string& train_dir, const std::string& val_dir) {
        auto cfg = train_config_from_dict(config);
        auto tr = scene::load_dataset(train_dir);
        auto va = scene::load_dataset(val_dir);
        return Model{train::train(cfg, tr, va)};
      },
      py::arg("config"), py::arg("train_dir"), py::arg("val_dir"),
      "Train from scratch; returns the trained Model (call .save() to keep it)");

  m.def(
      "finetune",
      [](const std::string& checkpoint_dir, const py::dict& run, const std::string& train_b,
         const std::string& val_a, const std::string& val_b) {
        auto state = train::load_checkpoint(checkpoint_dir);
        train::TrainConfig rc = state.config;
        rc.metrics_path.clear();
        for (const auto& item : run) {
          const std::string key = py::str(item.first);
          if (key == "batch_size") rc.batch_size = item.second.cast<int>();
          else if (key == "max_epochs") rc.max_epochs = item.second.cast<int>();
          else if (key == "patience") rc.patience = item.second.cast<int>();
          else if (key == "target_accuracy") rc.target_accuracy = item.second.cast<double>();
          else if (key == "seed") rc.seed = item.second.cast<uint64_t>();
          else if (key == "metrics_path") rc.metrics_path = item.second.cast<std::string>();
          else throw Error(ErrorCategory::config, "unknown finetune run key '" + key + "'");
        }
        train::FinetuneReport rep;
        auto after = train::finetune(std::move(state), rc, scene::load_dataset(train_b),
                                     scene::load_dataset(val_a), scene::load_dataset(val_b), &rep);
        py::dict d;
        d["model"] = Model{std::move(after)};
        d["a_before"] = eval_to_dict(rep.a_before);
        d["b_before"] = eval_to_dict(rep.b_before);
        d["a_after"] = eval_to_dict(rep.a_after);
        d["b_after"] = eval_to_dict(rep.b_after);
        return d;
      },
      py::arg("checkpoint_dir"), py::arg("run"), py::arg("train_b"), py::arg("val_a"),
      py::arg("val_b"),
      "Continue a checkpoint on opposite-condition data; returns the model and the four-way report");

  m.def(
      "attention_eval",
      [](const std::string& checkpoint_dir, const std::string& data_dir, double threshold,
         bool foreground_only, bool score_relate_same) {
        auto state = train::load_checkpoint(checkpoint_dir);
        auto ds = scene::load_dataset(data_dir);
        interp::InterpOptions opt;
        opt.threshold = threshold;
        opt.foreground_only = foreground_only;
        opt.score_relate_same = score_relate_same;
        auto ev = interp::attention_precision_recall(state, ds, opt);
        py::dict d;
        d["threshold"] = ev.threshold;
        d["micro_precision"] = ev.micro_precision;
        d["micro_recall"] = ev.micro_recall;
        d["macro_precision"] = ev.macro_precision;
        d["macro_recall"] = ev.macro_recall;
        d["nodes_scored"] = ev.nodes_scored;
        d["empty_masks"] = ev.empty_masks;
        return d;
      },
      py::arg("checkpoint_dir"), py::arg("data_dir"), py::arg("threshold") = 0.5,
      py::arg("foreground_only") = false, py::arg("score_relate_same") = false,
      "Score attention masks against ground-truth object segmentations");

  m.def(
      "oracle_check",
      [](int max_depth, uint64_t random_checks, uint64_t seed, int grid, int max_objects) {
        oracle::Domain dom;
        dom.max_depth = max_depth;
        dom.random_checks = random_checks;
        dom.random_seed = seed;
        dom.grid = grid;
        dom.max_objects = max_objects;
        auto rep = oracle::run_oracle_check(dom);
        py::dict d;
        d["scenes"] = rep.scenes;
        d["programs"] = rep.programs;
        d["cases"] = rep.cases;
        d["mismatches"] = rep.mismatches;
        d["first_mismatch"] = rep.first_mismatch;
        d["seconds"] = rep.seconds;
        return d;
      },
      py::arg("max_depth") = 3, py::arg("random_checks") = 1000, py::arg("seed") = 1,
      py::arg("grid") = 3, py::arg("max_objects") = 3,
      "Cross-check the program executor against the reference evaluator");
}
