#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>

#include "tbd/tensor.hpp"
#include "tbd/vocab.hpp"

namespace tbd::nn {

struct Param {
  Tensor tensor;
  AdamState adam;
};

/// Named parameter set for one module token ("attention[red]", "stem", ...).
/// One bank exists per distinct token; every program reuses it.
struct ParamBank {
  std::string token;
  std::map<std::string, Param> params;

  Tensor& p(const std::string& name);
  const Tensor& p(const std::string& name) const;
};

struct ModelConfig {
  int d = 64;       // encoding channels
  int cin = 4;      // rendered image channels
  int rows = 14;    // feature grid rows (image is 4x)
  int cols = 14;
  int k_answers = 26;
  int hidden = 1024;  // classifier fully connected width

  bool operator==(const ModelConfig&) const = default;
};

/// Owns every ParamBank of a model. Banks are created lazily with
/// deterministic per-parameter seeds derived from (registry seed, token,
/// parameter name), so initialization does not depend on creation order.
class BankRegistry {
 public:
  BankRegistry(ModelConfig cfg, uint64_t seed);

  ParamBank& bank(const std::string& token);
  bool has(const std::string& token) const { return banks_.count(token) > 0; }
  std::map<std::string, ParamBank>& banks() { return banks_; }
  const std::map<std::string, ParamBank>& banks() const { return banks_; }

  const ModelConfig& config() const { return cfg_; }
  uint64_t seed() const { return seed_; }

 private:
  void init_bank(ParamBank& b);

  ModelConfig cfg_;
  uint64_t seed_;
  std::map<std::string, ParamBank> banks_;
};

/// Spatial argmax of a single-channel mask; first row-major position on ties.
std::pair<int, int> spatial_argmax(const Tensor& mask);

Tensor all_ones_mask(int rows, int cols);

// Module runners. Shapes: image [cin,4R,4C], feat [d,R,C], masks [1,R,C].
Tensor run_stem(const Tensor& image, ParamBank& bank);
Tensor run_attention(const Tensor& feat, const Tensor& prev, ParamBank& bank);
Tensor run_relate(const Tensor& feat, const Tensor& prev, ParamBank& bank);
Tensor run_same(const Tensor& feat, const Tensor& prev, ParamBank& bank);
Tensor run_query(const Tensor& feat, const Tensor& prev, ParamBank& bank);
Tensor run_compare(const Tensor& a, const Tensor& b, ParamBank& bank);
Tensor run_and(const Tensor& a, const Tensor& b);
Tensor run_or(const Tensor& a, const Tensor& b);
Tensor run_classifier(const Tensor& enc, ParamBank& bank);

}  // namespace tbd::nn
