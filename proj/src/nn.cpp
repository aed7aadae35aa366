#include "tbd/nn.hpp"

namespace tbd::nn {

namespace {

uint64_t param_seed(uint64_t registry_seed, const std::string& token,
                    const std::string& name) {
  return splitmix64(fnv1a(token + "/" + name) + splitmix64(registry_seed));
}

void check_mask(const Tensor& prev, int rows, int cols, const char* who) {
  if (prev.ndim() != 3 || prev.dim(0) != 1 || prev.dim(1) != rows ||
      prev.dim(2) != cols) {
    throw Error(ErrorCategory::shape, std::string(who) + ": mask must be [1," +
                                          std::to_string(rows) + "," +
                                          std::to_string(cols) + "], got " +
                                          prev.shape_str());
  }
}

void check_feat(const Tensor& feat, int d, int rows, int cols, const char* who) {
  if (feat.ndim() != 3 || feat.dim(0) != d || feat.dim(1) != rows ||
      feat.dim(2) != cols) {
    throw Error(ErrorCategory::shape, std::string(who) + ": encoding must be [" +
                                          std::to_string(d) + "," +
                                          std::to_string(rows) + "," +
                                          std::to_string(cols) + "], got " +
                                          feat.shape_str());
  }
}

}  // namespace

Tensor& ParamBank::p(const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) {
    throw Error(ErrorCategory::state,
                "bank '" + token + "' has no parameter '" + name + "'");
  }
  return it->second.tensor;
}

const Tensor& ParamBank::p(const std::string& name) const {
  auto it = params.find(name);
  if (it == params.end()) {
    throw Error(ErrorCategory::state,
                "bank '" + token + "' has no parameter '" + name + "'");
  }
  return it->second.tensor;
}

BankRegistry::BankRegistry(ModelConfig cfg, uint64_t seed)
    : cfg_(cfg), seed_(seed) {
  if (cfg.d < 1 || cfg.cin < 1 || cfg.rows < 1 || cfg.cols < 1 ||
      cfg.k_answers < 2 || cfg.hidden < 1) {
    throw Error(ErrorCategory::config, "model configuration out of range");
  }
}

ParamBank& BankRegistry::bank(const std::string& token) {
  auto it = banks_.find(token);
  if (it != banks_.end()) return it->second;
  ParamBank b;
  b.token = token;
  init_bank(b);
  return banks_.emplace(token, std::move(b)).first->second;
}

void BankRegistry::init_bank(ParamBank& b) {
  const int d = cfg_.d;
  auto conv = [&](const std::string& name, int cout, int cin, int k) {
    Tensor w = kaiming_normal({cout, cin, k, k}, cin * k * k,
                              param_seed(seed_, b.token, name + ".w"));
    w.set_requires_grad(true);
    Tensor bias = Tensor::zeros({cout});
    bias.set_requires_grad(true);
    b.params[name + ".w"] = Param{w, {}};
    b.params[name + ".b"] = Param{bias, {}};
  };
  auto fc = [&](const std::string& name, int m, int n) {
    Tensor w = kaiming_normal({m, n}, n, param_seed(seed_, b.token, name + ".w"));
    w.set_requires_grad(true);
    Tensor bias = Tensor::zeros({m});
    bias.set_requires_grad(true);
    b.params[name + ".w"] = Param{w, {}};
    b.params[name + ".b"] = Param{bias, {}};
  };

  if (b.token == "stem") {
    conv("conv1", d, cfg_.cin, 3);
    conv("conv2", d, d, 3);
    return;
  }
  if (b.token == "classifier") {
    if (cfg_.rows % 2 != 0 || cfg_.cols % 2 != 0) {
      throw Error(ErrorCategory::config,
                  "classifier needs even feature extents, got " +
                      std::to_string(cfg_.rows) + "x" + std::to_string(cfg_.cols));
    }
    int r = cfg_.rows / 2, c = cfg_.cols / 2;
    if (r % 2 == 0 && c % 2 == 0) {
      r /= 2;
      c /= 2;
    }
    conv("conv1", d, d, 3);
    conv("conv2", d, d, 3);
    fc("fc1", cfg_.hidden, d * r * c);
    fc("fc2", cfg_.k_answers, cfg_.hidden);
    return;
  }

  const TokenInfo info = classify_token(b.token);
  if (!info.has_params) {
    throw Error(ErrorCategory::state,
                "token '" + b.token + "' binds no parameters");
  }
  switch (info.kind) {
    case TokenKind::attention:
      conv("conv1", d, d, 3);
      conv("conv2", d, d, 3);
      conv("proj", 1, d, 1);
      break;
    case TokenKind::relate:
      for (int i = 1; i <= 5; ++i) conv("conv" + std::to_string(i), d, d, 3);
      conv("proj", 1, d, 1);
      break;
    case TokenKind::same:
      conv("proj", 1, d + 1, 1);
      break;
    case TokenKind::query:
      conv("conv1", d, d, 3);
      conv("conv2", d, d, 3);
      break;
    case TokenKind::compare:
      conv("reduce", d, 2 * d, 1);
      conv("conv1", d, d, 3);
      conv("conv2", d, d, 3);
      break;
    default:
      throw Error(ErrorCategory::state,
                  "token '" + b.token + "' binds no parameters");
  }
}

std::pair<int, int> spatial_argmax(const Tensor& mask) {
  if (mask.ndim() != 3 || mask.dim(0) != 1) {
    throw Error(ErrorCategory::shape,
                "spatial_argmax expects [1,R,C], got " + mask.shape_str());
  }
  const int rows = mask.dim(1), cols = mask.dim(2);
  int br = 0, bc = 0;
  double best = mask.at(0, 0, 0);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      if (mask.at(0, r, c) > best) {
        best = mask.at(0, r, c);
        br = r;
        bc = c;
      }
    }
  }
  return {br, bc};
}

Tensor all_ones_mask(int rows, int cols) { return Tensor::ones({1, rows, cols}); }

Tensor run_stem(const Tensor& image, ParamBank& bank) {
  const Tensor& w1 = bank.p("conv1.w");
  if (image.ndim() != 3 || image.dim(0) != w1.dim(1)) {
    throw Error(ErrorCategory::shape,
                "stem: image channels " + image.shape_str() +
                    " do not match bank input channels " + w1.shape_str());
  }
  Tensor h = relu(conv2d(image, w1, bank.p("conv1.b"), 1, 1, 2));
  return relu(conv2d(h, bank.p("conv2.w"), bank.p("conv2.b"), 1, 1, 2));
}

Tensor run_attention(const Tensor& feat, const Tensor& prev, ParamBank& bank) {
  const int d = bank.p("conv1.w").dim(1);
  check_feat(feat, d, feat.dim(1), feat.dim(2), "attention");
  check_mask(prev, feat.dim(1), feat.dim(2), "attention");
  Tensor x = elem_binary(BinaryKind::mul, feat, prev);
  x = relu(conv2d(x, bank.p("conv1.w"), bank.p("conv1.b"), 1, 1));
  x = relu(conv2d(x, bank.p("conv2.w"), bank.p("conv2.b"), 1, 1));
  return sigmoid(conv2d(x, bank.p("proj.w"), bank.p("proj.b"), 1, 0));
}

Tensor run_relate(const Tensor& feat, const Tensor& prev, ParamBank& bank) {
  const int d = bank.p("conv1.w").dim(1);
  check_feat(feat, d, feat.dim(1), feat.dim(2), "relate");
  check_mask(prev, feat.dim(1), feat.dim(2), "relate");
  Tensor x = elem_binary(BinaryKind::mul, feat, prev);
  static const int dilations[5] = {1, 2, 4, 8, 1};
  for (int i = 0; i < 5; ++i) {
    const std::string name = "conv" + std::to_string(i + 1);
    x = relu(conv2d(x, bank.p(name + ".w"), bank.p(name + ".b"), dilations[i],
                    dilations[i]));
  }
  return sigmoid(conv2d(x, bank.p("proj.w"), bank.p("proj.b"), 1, 0));
}

Tensor run_same(const Tensor& feat, const Tensor& prev, ParamBank& bank) {
  const int d = bank.p("proj.w").dim(1) - 1;
  check_feat(feat, d, feat.dim(1), feat.dim(2), "same");
  check_mask(prev, feat.dim(1), feat.dim(2), "same");
  // locate the reference object; the location choice itself carries no
  // gradient, the extracted column does
  auto [r, c] = spatial_argmax(prev);
  Tensor column = slice_at(feat, r, c);
  Tensor matched = scale_colvec(feat, column);
  Tensor stacked = concat_channels(matched, prev);
  return sigmoid(conv2d(stacked, bank.p("proj.w"), bank.p("proj.b"), 1, 0));
}

Tensor run_query(const Tensor& feat, const Tensor& prev, ParamBank& bank) {
  const int d = bank.p("conv1.w").dim(1);
  check_feat(feat, d, feat.dim(1), feat.dim(2), "query");
  check_mask(prev, feat.dim(1), feat.dim(2), "query");
  Tensor x = elem_binary(BinaryKind::mul, feat, prev);
  x = relu(conv2d(x, bank.p("conv1.w"), bank.p("conv1.b"), 1, 1));
  return relu(conv2d(x, bank.p("conv2.w"), bank.p("conv2.b"), 1, 1));
}

Tensor run_compare(const Tensor& a, const Tensor& b, ParamBank& bank) {
  if (a.shape() != b.shape()) {
    throw Error(ErrorCategory::shape, "compare: operand shapes differ, " +
                                          a.shape_str() + " vs " + b.shape_str());
  }
  const int d = bank.p("reduce.w").dim(0);
  check_feat(a, d, a.dim(1), a.dim(2), "compare");
  Tensor x = concat_channels(a, b);
  x = relu(conv2d(x, bank.p("reduce.w"), bank.p("reduce.b"), 1, 0));
  x = relu(conv2d(x, bank.p("conv1.w"), bank.p("conv1.b"), 1, 1));
  return relu(conv2d(x, bank.p("conv2.w"), bank.p("conv2.b"), 1, 1));
}

Tensor run_and(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw Error(ErrorCategory::shape, "and: operand shapes differ, " +
                                          a.shape_str() + " vs " + b.shape_str());
  }
  return elem_binary(BinaryKind::min, a, b);
}

Tensor run_or(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw Error(ErrorCategory::shape, "or: operand shapes differ, " +
                                          a.shape_str() + " vs " + b.shape_str());
  }
  return elem_binary(BinaryKind::max, a, b);
}

Tensor run_classifier(const Tensor& enc, ParamBank& bank) {
  const int d = bank.p("conv1.w").dim(1);
  check_feat(enc, d, enc.dim(1), enc.dim(2), "classifier");
  Tensor h = relu(conv2d(enc, bank.p("conv1.w"), bank.p("conv1.b"), 1, 1));
  h = maxpool2d(h, 2, 2);
  h = relu(conv2d(h, bank.p("conv2.w"), bank.p("conv2.b"), 1, 1));
  if (h.dim(1) % 2 == 0 && h.dim(2) % 2 == 0) h = maxpool2d(h, 2, 2);
  Tensor flat = flatten(h);
  if (flat.dim(0) != bank.p("fc1.w").dim(1)) {
    throw Error(ErrorCategory::shape,
                "classifier: flattened extent " + flat.shape_str() +
                    " does not match bank " + bank.p("fc1.w").shape_str());
  }
  Tensor fc = relu(linear(flat, bank.p("fc1.w"), bank.p("fc1.b")));
  return linear(fc, bank.p("fc2.w"), bank.p("fc2.b"));
}

}  // namespace tbd::nn
