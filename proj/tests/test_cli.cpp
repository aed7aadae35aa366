#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"
#include "json.hpp"
#include "tbd/cfg.hpp"

using namespace tbd;
using nlohmann::json;

namespace {

struct RunResult {
  int exit_code;
  std::string out;
};

RunResult run_cmd(const std::string& tail) {
  std::string cmd = std::string(TBD_BIN) + " " + tail;
  FILE* p = popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  std::string out;
  char buf[4096];
  size_t n = 0;
  while ((n = fread(buf, 1, sizeof buf, p)) > 0) out.append(buf, n);
  int rc = pclose(p);
  return {WIFEXITED(rc) ? WEXITSTATUS(rc) : -1, out};
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::string golden(const std::string& name) {
  return slurp(std::string(TBD_REPO_ROOT) + "/tests/golden/" + name);
}

const std::string& smoke_data() {
  static std::string dir = [] {
    std::string d = "/tmp/tbd_cli_data";
    if (!std::filesystem::exists(d + "/header.json")) {
      auto r = run_cmd("gen-data --out " + d + " --seed 17 --n-scenes 24 --questions-per-scene 4");
      REQUIRE(r.exit_code == 0);
    }
    return d;
  }();
  return dir;
}

const std::string& smoke_run() {
  static std::string dir = [] {
    std::string d = "/tmp/tbd_cli_run";
    if (!std::filesystem::exists(d + "/checkpoint/manifest.json")) {
      auto r = run_cmd("train --data " + smoke_data() + " --val " + smoke_data() + " --out " + d +
                       " --seed 4 --d 8 --hidden 32 --batch-size 16 --max-epochs 1 --lr 1e-3");
      REQUIRE(r.exit_code == 0);
      REQUIRE(r.out.find("train: epochs=1") != std::string::npos);
    }
    return d;
  }();
  return dir;
}

}  // namespace

TEST_CASE("config text: sections, comments, trimming, typed reads") {
  auto kv = cfg::parse_config_text(
      "# experiment record\n"
      "[data]\n"
      "out = runs/x   # trailing comment\n"
      "n_scenes=40\n"
      "  seed =   7\n"
      "\n"
      "[train]\n"
      "lr = 2.5e-4\n"
      "resume = false\n");
  CHECK(kv.get_str("data.out", "") == "runs/x");
  CHECK(kv.get_int("data.n_scenes", 0) == 40);
  CHECK(kv.get_u64("data.seed", 0) == 7);
  CHECK(kv.get_double("train.lr", 0) == 2.5e-4);
  CHECK(kv.get_bool("train.resume", true) == false);
  CHECK(kv.get_int("data.missing", 12) == 12);
  CHECK(kv.require_str("data.out") == "runs/x");
  CHECK_THROWS_WITH_AS(kv.require_str("data.none"), doctest::Contains("data.none"), Error);
  kv.restrict_keys("data", {"out", "n_scenes", "seed"});
  CHECK_THROWS_WITH_AS(kv.restrict_keys("data", {"out"}), doctest::Contains("n_scenes"), Error);
  // keys in other sections are not this section's problem
  kv.restrict_keys("train", {"lr", "resume"});

  CHECK(cfg::parse_config_text("").values.empty());
}

TEST_CASE("config text: malformed inputs carry line numbers") {
  auto category = [](const std::string& text) {
    try {
      cfg::parse_config_text(text, "f.cfg");
      return std::string("none");
    } catch (const Error& e) {
      CHECK(e.category() == ErrorCategory::config);
      return std::string(e.what());
    }
  };
  CHECK(category("x = 1\n").find("f.cfg:1") != std::string::npos);          // before section
  CHECK(category("[s]\nnoequals\n").find("f.cfg:2") != std::string::npos);  // missing '='
  CHECK(category("[s\nx = 1\n").find("unterminated") != std::string::npos);
  CHECK(category("[s]\na = 1\na = 2\n").find("duplicate") != std::string::npos);
  CHECK(category("[s]\nbad key = 1\n").find("bad key") != std::string::npos);

  auto kv = cfg::parse_config_text("[s]\nx = abc\ny = 1.5\n");
  CHECK_THROWS_WITH_AS(kv.get_int("s.x", 0), doctest::Contains("s.x"), Error);
  CHECK_THROWS_AS(kv.get_int("s.y", 0), Error);  // trailing chars after integer
  CHECK_THROWS_AS(kv.get_bool("s.y", false), Error);
  CHECK_THROWS_AS(kv.get_double("s.x", 0), Error);
  CHECK_THROWS_AS(kv.get_u64("s.y", 0), Error);
}

TEST_CASE("help output is golden and enumerates every flag") {
  auto top = run_cmd("--help");
  CHECK(top.exit_code == 0);
  CHECK(top.out == golden("help.txt"));

  auto train_help = run_cmd("train --help");
  CHECK(train_help.exit_code == 0);
  CHECK(train_help.out == golden("help_train.txt"));

  auto all = run_cmd("--help-all");
  CHECK(all.exit_code == 0);
  CHECK(all.out == golden("help_all.txt"));
  for (const char* flag :
       {"--config", "--seed", "--out", "--checkpoint", "--data", "--resolution", "--lambda-attn",
        "--threshold", "--val-a", "--val-b", "--checkpoint-b", "--sample", "--colormap",
        "--tight-pairs", "--foreground-only", "--score-relate-same", "--max-depth",
        "--random-checks", "--n-scenes", "--condition"}) {
    CHECK_MESSAGE(all.out.find(flag) != std::string::npos, "missing from --help-all: ", flag);
  }
}

TEST_CASE("bad invocations produce one machine-parsable error line") {
  auto check_error = [](const std::string& args, int code, const std::string& category,
                        const std::string& needle) {
    auto r = run_cmd(args + " 2>&1 1>/dev/null");
    CHECK(r.exit_code == code);
    std::string prefix = "error: [" + category + "] ";
    CHECK_MESSAGE(r.out.rfind(prefix, 0) == 0, "got: ", r.out);
    CHECK(r.out.find(needle) != std::string::npos);
    CHECK(std::count(r.out.begin(), r.out.end(), '\n') == 1);
    CHECK(r.out.back() == '\n');
  };
  check_error("", 2, "usage", "subcommand");
  check_error("frobnicate", 2, "usage", "subcommand");
  check_error("gen-data --bogus", 2, "usage", "--bogus");
  check_error("gen-data", 1, "config", "data.out");
  check_error("gen-data --out /tmp/tbd_cli_x --seed nope", 1, "config", "data.seed");
  check_error("gen-data --out /tmp/tbd_cli_x --resolution 15", 1, "config", "14 or 28");
  check_error("gen-data --out /tmp/tbd_cli_x --condition purple", 1, "config", "condition");
  check_error("train --data /nowhere --val /nowhere --out /tmp/tbd_cli_x", 1, "io", "/nowhere");
  check_error("eval --checkpoint /nowhere --data " + smoke_data(), 1, "io", "");
  check_error("gen-data --config /nowhere.cfg", 1, "io", "/nowhere.cfg");
}

TEST_CASE("config file drives gen-data; flags override; rebuilds are byte-identical") {
  std::filesystem::create_directories("/tmp/tbd_cli_cfg");
  {
    std::ofstream f("/tmp/tbd_cli_cfg/exp.cfg");
    f << "[data]\nout = /tmp/tbd_cli_cfg/d1\nn_scenes = 6\nquestions_per_scene = 3\nseed = 1\n";
  }
  auto r1 = run_cmd("gen-data --config /tmp/tbd_cli_cfg/exp.cfg --seed 2");
  CHECK(r1.exit_code == 0);
  CHECK(r1.out.find("scenes=6") != std::string::npos);
  auto header = json::parse(slurp("/tmp/tbd_cli_cfg/d1/header.json"));
  CHECK(header.at("seed").get<uint64_t>() == 2);  // flag beat the file
  CHECK(header.at("n_scenes").get<int>() == 6);

  auto r2 = run_cmd("gen-data --config /tmp/tbd_cli_cfg/exp.cfg --seed 2 --out /tmp/tbd_cli_cfg/d2");
  CHECK(r2.exit_code == 0);
  for (const char* f : {"header.json", "scenes.jsonl", "samples.jsonl", "stats.json", "images.bin",
                        "images.manifest"}) {
    CHECK_MESSAGE(slurp("/tmp/tbd_cli_cfg/d1/" + std::string(f)) ==
                      slurp("/tmp/tbd_cli_cfg/d2/" + std::string(f)),
                  "differs: ", f);
  }

  {
    std::ofstream f("/tmp/tbd_cli_cfg/bad.cfg");
    f << "[data]\nout = /tmp/tbd_cli_cfg/d3\nwat = 1\n";
  }
  auto r3 = run_cmd("gen-data --config /tmp/tbd_cli_cfg/bad.cfg 2>&1 1>/dev/null");
  CHECK(r3.exit_code == 1);
  CHECK(r3.out.find("unknown config key 'data.wat'") != std::string::npos);
}

TEST_CASE("train then eval, interp, dump-masks, all through the binary") {
  const std::string run = smoke_run();
  CHECK(std::filesystem::exists(run + "/metrics.jsonl"));
  std::ifstream mf(run + "/metrics.jsonl");
  std::string line;
  int metric_lines = 0;
  while (std::getline(mf, line)) {
    if (line.empty()) continue;
    auto j = json::parse(line);
    CHECK(j.contains("epoch"));
    CHECK(j.contains("accuracy"));
    ++metric_lines;
  }
  CHECK(metric_lines == 2);  // train + val, one epoch

  auto ev = run_cmd("eval --checkpoint " + run + "/checkpoint --data " + smoke_data() +
                    " --out /tmp/tbd_cli_eval");
  CHECK(ev.exit_code == 0);
  CHECK(ev.out.find("family") != std::string::npos);
  CHECK(ev.out.find("overall") != std::string::npos);
  auto ej = json::parse(slurp("/tmp/tbd_cli_eval/eval.json"));
  CHECK(ej.at("n").get<int>() == 96);
  CHECK(ej.at("accuracy").get<double>() >= 0.0);

  auto in = run_cmd("interp --checkpoint " + run + "/checkpoint --data " + smoke_data() +
                    " --out /tmp/tbd_cli_interp --threshold 0.3");
  CHECK(in.exit_code == 0);
  CHECK(in.out.find("micro_precision=") != std::string::npos);
  std::ifstream rf("/tmp/tbd_cli_interp/attention.jsonl");
  REQUIRE(rf.good());
  std::string last, cur;
  while (std::getline(rf, cur)) {
    if (!cur.empty()) last = cur;
  }
  CHECK(json::parse(last).at("aggregate") == true);
  CHECK(json::parse(last).at("threshold").get<double>() == 0.3);

  auto dm = run_cmd("dump-masks --checkpoint " + run + "/checkpoint --data " + smoke_data() +
                    " --out /tmp/tbd_cli_masks --sample 0 --colormap " +
                    std::string(TBD_REPO_ROOT) + "/data/colormap.txt");
  CHECK(dm.exit_code == 0);
  int pgm = 0, ppm = 0;
  for (const auto& e : std::filesystem::directory_iterator("/tmp/tbd_cli_masks")) {
    const std::string p = e.path().string();
    if (p.ends_with(".pgm")) {
      ++pgm;
      CHECK(slurp(p).rfind("P5\n", 0) == 0);
    }
    if (p.ends_with(".ppm")) {
      ++ppm;
      CHECK(slurp(p).rfind("P6\n", 0) == 0);
    }
  }
  CHECK(pgm >= 2);  // at least scene + one attention node
  CHECK(ppm == pgm);
  std::string prog = slurp("/tmp/tbd_cli_masks/program.txt");
  CHECK(prog.find("predicted: ") != std::string::npos);
  CHECK(prog.find("label: ") != std::string::npos);

  auto bad = run_cmd("dump-masks --checkpoint " + run + "/checkpoint --data " + smoke_data() +
                     " --out /tmp/tbd_cli_masks --sample 9999 2>&1 1>/dev/null");
  CHECK(bad.exit_code == 1);
  CHECK(bad.out.find("out of range") != std::string::npos);
}

TEST_CASE("oracle-check subcommand reports counts and passes") {
  auto r = run_cmd("oracle-check --max-depth 2 --random-checks 100");
  CHECK(r.exit_code == 0);
  CHECK(r.out.find("mismatches=0") != std::string::npos);
  CHECK(r.out.find("PASS") != std::string::npos);
  CHECK(r.out.find("scenes=5989") != std::string::npos);
}
