#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tbd/scene.hpp"

namespace tbd::oracle {

/// Bounded domain for the exhaustive executor cross-check: every scene with
/// up to `max_objects` objects on a `grid` x `grid` position grid (attributes
/// ranging over the colors/shapes named in `attention_args`; size and
/// material held fixed) crossed with every well-typed program of call depth
/// at most `max_depth` over the reduced token inventory below.
struct Domain {
  int grid = 3;
  int max_objects = 3;
  int max_depth = 4;
  std::vector<std::string> attention_args = {"red", "blue", "cube", "sphere"};
  std::vector<std::string> same_kinds = {"color", "shape"};
  std::vector<std::string> query_args = {"color", "shape", "count", "exist"};
  std::vector<std::string> compare_args = {"color", "integer-equal", "less"};
  /// Extra random spot checks over the full vocabulary and generated scenes.
  uint64_t random_checks = 0;
  uint64_t random_seed = 1;
};

struct Report {
  uint64_t scenes = 0;
  uint64_t programs = 0;
  uint64_t cases = 0;
  uint64_t mismatches = 0;
  std::string first_mismatch;
  double seconds = 0.0;
};

/// Direct recursive evaluation of the set semantics documented on
/// symbolic_execute. Deliberately naive — sorted id vectors, no lowering, no
/// shared helpers — so it can serve as an independent cross-check of the
/// production executor.
scene::SymResult reference_execute(const prog::Node& root, const scene::Scene& s);
void reference_execute(const prog::Node& root, const scene::Scene& s, scene::SymResult& out);

/// Evaluate every scene/program pair in the domain with both executors and
/// count disagreements in the answer or any per-node object set.
Report run_oracle_check(const Domain& d);

}  // namespace tbd::oracle
