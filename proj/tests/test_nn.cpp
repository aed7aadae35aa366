#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "gradcheck.hpp"
#include "tbd/nn.hpp"

using tbd::Tensor;
using namespace tbd::nn;
using gc::bank_params;
using gc::gradcheck;
using gc::nudge_biases;
using gc::rand_tensor;
using gc::rand_weights;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.d = 4;
  cfg.cin = 2;
  cfg.rows = 6;
  cfg.cols = 6;
  cfg.k_answers = 5;
  cfg.hidden = 16;
  return cfg;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (int64_t i = 0; i < a.numel(); ++i) {
    if (a.data()[i] != b.data()[i]) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("stem halves the image twice into the feature grid") {
  BankRegistry reg(ModelConfig{}, 1);
  Tensor image = rand_tensor({4, 56, 56}, 2, 0.0, 1.0);
  Tensor feat = run_stem(image, reg.bank("stem"));
  CHECK(feat.shape() == std::vector<int>{64, 14, 14});

  BankRegistry small(tiny_config(), 1);
  Tensor im2 = rand_tensor({2, 24, 24}, 3, 0.0, 1.0);
  CHECK(run_stem(im2, small.bank("stem")).shape() == std::vector<int>{4, 6, 6});

  CHECK_THROWS_AS(run_stem(rand_tensor({3, 56, 56}, 4), reg.bank("stem")), tbd::Error);
}

TEST_CASE("stem on a zero image is spatially constant per channel") {
  BankRegistry reg(tiny_config(), 7);
  Tensor feat = run_stem(Tensor::zeros({2, 24, 24}), reg.bank("stem"));
  for (int c = 0; c < feat.dim(0); ++c) {
    const double v = feat.at(c, 0, 0);
    for (int r = 0; r < feat.dim(1); ++r) {
      for (int k = 0; k < feat.dim(2); ++k) CHECK(feat.at(c, r, k) == v);
    }
  }
}

TEST_CASE("attention produces a single-channel mask strictly inside (0,1)") {
  BankRegistry reg(tiny_config(), 11);
  Tensor feat = rand_tensor({4, 6, 6}, 12);
  Tensor prev = all_ones_mask(6, 6);
  Tensor mask = run_attention(feat, prev, reg.bank("attention[red]"));
  REQUIRE(mask.shape() == std::vector<int>{1, 6, 6});
  for (int64_t i = 0; i < mask.numel(); ++i) {
    CHECK(mask.data()[i] > 0.0);
    CHECK(mask.data()[i] < 1.0);
  }
  CHECK_THROWS_AS(run_attention(feat, rand_tensor({2, 6, 6}, 13), reg.bank("attention[red]")), tbd::Error);
}

TEST_CASE("attention over a zero mask collapses to a constant map") {
  BankRegistry reg(tiny_config(), 17);
  Tensor feat = rand_tensor({4, 6, 6}, 18);
  Tensor mask = run_attention(feat, Tensor::zeros({1, 6, 6}), reg.bank("attention[cube]"));
  const double v = mask.at(0, 0, 0);
  for (int64_t i = 0; i < mask.numel(); ++i) CHECK(mask.data()[i] == doctest::Approx(v).epsilon(1e-12));
}

TEST_CASE("initial all-one mask sits exactly at one") {
  Tensor m = all_ones_mask(3, 5);
  CHECK(m.shape() == std::vector<int>{1, 3, 5});
  for (int64_t i = 0; i < m.numel(); ++i) CHECK(m.data()[i] == 1.0);
}

TEST_CASE("and and or are the exact lattice operations") {
  Tensor a = rand_tensor({1, 5, 5}, 20, 0.0, 1.0);
  Tensor b = rand_tensor({1, 5, 5}, 21, 0.0, 1.0);
  Tensor ones = Tensor::ones({1, 5, 5});
  Tensor zeros = Tensor::zeros({1, 5, 5});

  CHECK(bitwise_equal(run_and(a, ones), a));
  CHECK(bitwise_equal(run_or(a, zeros), a));
  CHECK(bitwise_equal(run_and(a, a), a));
  CHECK(bitwise_equal(run_or(a, a), a));
  Tensor lo = run_and(a, b);
  Tensor hi = run_or(a, b);
  for (int64_t i = 0; i < lo.numel(); ++i) {
    CHECK(lo.data()[i] <= hi.data()[i]);
    CHECK(lo.data()[i] == std::min(a.data()[i], b.data()[i]));
    CHECK(hi.data()[i] == std::max(a.data()[i], b.data()[i]));
  }
  CHECK_THROWS_AS(run_and(a, Tensor::zeros({1, 4, 5})), tbd::Error);
}

TEST_CASE("relate produces masks and covers the grid in its receptive field") {
  ModelConfig cfg;
  cfg.d = 2;
  cfg.cin = 2;
  cfg.rows = 14;
  cfg.cols = 14;
  BankRegistry reg(cfg, 23);
  ParamBank& bank = reg.bank("relate[right]");
  // positive weights keep every relu active so the gradient support equals
  // the receptive field
  for (auto& [name, p] : bank.params) {
    for (int64_t i = 0; i < p.tensor.numel(); ++i) {
      double& v = p.tensor.data()[i];
      v = std::abs(v) * 0.05 + 0.01;
    }
  }
  Tensor feat = Tensor::full({2, 14, 14}, 0.5);
  feat.set_requires_grad(true);
  Tensor prev = all_ones_mask(14, 14);

  for (int corner : {0, 13 * 14 + 13}) {
    feat.zero_grad();
    tbd::Tape tape;
    Tensor mask = run_relate(feat, prev, bank);
    REQUIRE(mask.shape() == std::vector<int>{1, 14, 14});
    std::vector<double> coeff(14 * 14, 0.0);
    coeff[static_cast<size_t>(corner)] = 1.0;
    tape.backward(tbd::weighted_sum(mask, coeff));
    for (int r = 0; r < 14; ++r) {
      for (int c = 0; c < 14; ++c) {
        CHECK(feat.grad()[static_cast<size_t>(r * 14 + c)] > 0.0);
      }
    }
  }
}

TEST_CASE("spatial argmax picks the peak and breaks ties row major") {
  Tensor m = Tensor::zeros({1, 4, 4});
  m.at(0, 2, 3) = 0.9;
  m.at(0, 1, 1) = 0.5;
  auto [r, c] = spatial_argmax(m);
  CHECK(r == 2);
  CHECK(c == 3);

  Tensor flat = Tensor::full({1, 3, 3}, 0.25);
  auto [fr, fc] = spatial_argmax(flat);
  CHECK(fr == 0);
  CHECK(fc == 0);
  CHECK_THROWS_AS(spatial_argmax(Tensor::zeros({2, 3, 3})), tbd::Error);
}

TEST_CASE("same extracts the reference column and emits a mask") {
  BankRegistry reg(tiny_config(), 29);
  Tensor feat = rand_tensor({4, 6, 6}, 30);
  Tensor prev = Tensor::full({1, 6, 6}, 0.1);
  prev.at(0, 3, 2) = 0.95;
  Tensor mask = run_same(feat, prev, reg.bank("same[color]"));
  REQUIRE(mask.shape() == std::vector<int>{1, 6, 6});
  for (int64_t i = 0; i < mask.numel(); ++i) {
    CHECK(mask.data()[i] > 0.0);
    CHECK(mask.data()[i] < 1.0);
  }
  // the mask channel concatenated last means the output at the reference
  // cell depends on prev there; moving the peak moves the dependence
  Tensor moved = prev;
  CHECK(spatial_argmax(prev) == std::pair<int, int>(3, 2));
}

TEST_CASE("query and compare keep the encoding shape") {
  BankRegistry reg(tiny_config(), 31);
  Tensor feat = rand_tensor({4, 6, 6}, 32);
  Tensor prev = all_ones_mask(6, 6);
  Tensor q = run_query(feat, prev, reg.bank("query_color"));
  CHECK(q.shape() == std::vector<int>{4, 6, 6});

  Tensor q2 = run_query(feat, prev, reg.bank("query_count"));
  Tensor cmp = run_compare(q, q2, reg.bank("compare_integer-equal"));
  CHECK(cmp.shape() == std::vector<int>{4, 6, 6});
  CHECK_THROWS_AS(run_compare(q, rand_tensor({4, 5, 6}, 33), reg.bank("compare_integer-equal")), tbd::Error);

  // order matters structurally
  Tensor rev = run_compare(q2, q, reg.bank("compare_integer-equal"));
  bool different = false;
  for (int64_t i = 0; i < cmp.numel() && !different; ++i) {
    different = cmp.data()[i] != rev.data()[i];
  }
  CHECK(different);
}

TEST_CASE("query over a zero mask is spatially constant") {
  BankRegistry reg(tiny_config(), 37);
  Tensor feat = rand_tensor({4, 6, 6}, 38);
  Tensor enc = run_query(feat, Tensor::zeros({1, 6, 6}), reg.bank("query_size"));
  for (int c = 0; c < enc.dim(0); ++c) {
    const double v = enc.at(c, 0, 0);
    for (int r = 0; r < 6; ++r) {
      for (int k = 0; k < 6; ++k) CHECK(enc.at(c, r, k) == doctest::Approx(v).epsilon(1e-12));
    }
  }
}

TEST_CASE("classifier emits finite logits whose softmax sums to one") {
  BankRegistry reg(tiny_config(), 41);
  Tensor enc = rand_tensor({4, 6, 6}, 42);
  Tensor logits = run_classifier(enc, reg.bank("classifier"));
  REQUIRE(logits.shape() == std::vector<int>{5});
  for (int64_t i = 0; i < 5; ++i) CHECK(std::isfinite(logits.data()[i]));
  auto p = tbd::softmax(logits);
  double sum = 0.0;
  for (double v : p) sum += v;
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("classifier bank rejects odd feature extents") {
  ModelConfig cfg = tiny_config();
  cfg.rows = 7;
  cfg.cols = 7;
  BankRegistry reg(cfg, 43);
  CHECK_THROWS_AS(reg.bank("classifier"), tbd::Error);
}

TEST_CASE("classifier pools once at fourteen and twice at twenty eight") {
  ModelConfig c14;
  c14.d = 2;
  c14.rows = 14;
  c14.cols = 14;
  c14.hidden = 8;
  c14.k_answers = 5;
  BankRegistry r14(c14, 44);
  CHECK(r14.bank("classifier").p("fc1.w").dim(1) == 2 * 7 * 7);

  ModelConfig c28 = c14;
  c28.rows = 28;
  c28.cols = 28;
  BankRegistry r28(c28, 44);
  CHECK(r28.bank("classifier").p("fc1.w").dim(1) == 2 * 7 * 7);

  Tensor enc = rand_tensor({2, 28, 28}, 45);
  CHECK(run_classifier(enc, r28.bank("classifier")).shape() == std::vector<int>{5});
}

TEST_CASE("module evaluation is pure") {
  BankRegistry reg(tiny_config(), 47);
  Tensor feat = rand_tensor({4, 6, 6}, 48);
  Tensor prev = rand_tensor({1, 6, 6}, 49, 0.0, 1.0);
  CHECK(bitwise_equal(run_attention(feat, prev, reg.bank("attention[blue]")),
                      run_attention(feat, prev, reg.bank("attention[blue]"))));
  CHECK(bitwise_equal(run_relate(feat, prev, reg.bank("relate[left]")),
                      run_relate(feat, prev, reg.bank("relate[left]"))));
  CHECK(bitwise_equal(run_same(feat, prev, reg.bank("same[shape]")),
                      run_same(feat, prev, reg.bank("same[shape]"))));
}

TEST_CASE("banks are shared by token and reject unknown requests") {
  BankRegistry reg(tiny_config(), 53);
  ParamBank& a = reg.bank("attention[red]");
  ParamBank& b = reg.bank("attention[red]");
  CHECK(&a == &b);
  a.p("conv1.w").data()[0] = 123.0;
  CHECK(reg.bank("attention[red]").p("conv1.w").data()[0] == 123.0);

  CHECK_THROWS_AS(reg.bank("and"), tbd::Error);
  CHECK_THROWS_AS(reg.bank("scene"), tbd::Error);
  CHECK_THROWS_AS(reg.bank("unique"), tbd::Error);
  CHECK_THROWS_AS(reg.bank("attention[mauve]"), tbd::Error);
  CHECK_THROWS_AS(a.p("nonexistent"), tbd::Error);
}

TEST_CASE("initialization is seed deterministic and order independent") {
  BankRegistry r1(tiny_config(), 59);
  BankRegistry r2(tiny_config(), 59);
  BankRegistry r3(tiny_config(), 60);
  ParamBank& a1 = r1.bank("attention[red]");
  (void)r1.bank("relate[left]");
  (void)r2.bank("relate[left]");  // reversed creation order
  ParamBank& a2 = r2.bank("attention[red]");
  CHECK(bitwise_equal(a1.p("conv1.w"), a2.p("conv1.w")));
  CHECK(bitwise_equal(r1.bank("relate[left]").p("conv3.w"),
                      r2.bank("relate[left]").p("conv3.w")));
  CHECK_FALSE(bitwise_equal(a1.p("conv1.w"), r3.bank("attention[red]").p("conv1.w")));
  // biases start at zero
  for (int64_t i = 0; i < a1.p("conv1.b").numel(); ++i) {
    CHECK(a1.p("conv1.b").data()[i] == 0.0);
  }
}

TEST_CASE("attention module gradients match central differences") {
  for (uint64_t trial = 0; trial < 20; ++trial) {
    BankRegistry reg(tiny_config(), 100 + trial);
    ParamBank& bank = reg.bank("attention[red]");
    nudge_biases(bank, 9000 + trial);
    Tensor feat = rand_tensor({4, 6, 6}, 200 + trial);
    Tensor prev = rand_tensor({1, 6, 6}, 300 + trial, 0.05, 0.95);
    const auto coeff = rand_weights(36, 400 + trial);
    auto f = [&] { return tbd::weighted_sum(run_attention(feat, prev, bank), coeff); };
    auto params = bank_params(bank);
    params.push_back(feat);
    params.push_back(prev);
    CHECK(gradcheck(f, params) < 1e-4);
  }
}

TEST_CASE("relate module gradients match central differences") {
  ModelConfig cfg = tiny_config();
  cfg.d = 3;
  for (uint64_t trial = 0; trial < 20; ++trial) {
    BankRegistry reg(cfg, 500 + trial);
    ParamBank& bank = reg.bank("relate[behind]");
    nudge_biases(bank, 9100 + trial);
    Tensor feat = rand_tensor({3, 6, 6}, 600 + trial);
    Tensor prev = rand_tensor({1, 6, 6}, 700 + trial, 0.05, 0.95);
    const auto coeff = rand_weights(36, 800 + trial);
    auto f = [&] { return tbd::weighted_sum(run_relate(feat, prev, bank), coeff); };
    auto params = bank_params(bank);
    params.push_back(feat);
    params.push_back(prev);
    CHECK(gradcheck(f, params) < 1e-4);
  }
}

TEST_CASE("same module gradients match central differences") {
  for (uint64_t trial = 0; trial < 20; ++trial) {
    BankRegistry reg(tiny_config(), 900 + trial);
    ParamBank& bank = reg.bank("same[material]");
    nudge_biases(bank, 9200 + trial);
    Tensor feat = rand_tensor({4, 6, 6}, 1000 + trial);
    // unique peak with a wide margin keeps the argmax stable under +-h
    Tensor prev = rand_tensor({1, 6, 6}, 1100 + trial, 0.05, 0.4);
    prev.at(0, static_cast<int>(trial % 6), static_cast<int>((trial / 6) % 6)) = 0.9;
    const auto coeff = rand_weights(36, 1200 + trial);
    auto f = [&] { return tbd::weighted_sum(run_same(feat, prev, bank), coeff); };
    auto params = bank_params(bank);
    params.push_back(feat);
    params.push_back(prev);
    CHECK(gradcheck(f, params) < 1e-4);
  }
}

TEST_CASE("query module gradients match central differences") {
  for (uint64_t trial = 0; trial < 20; ++trial) {
    BankRegistry reg(tiny_config(), 1300 + trial);
    ParamBank& bank = reg.bank("query_exist");
    nudge_biases(bank, 9300 + trial);
    Tensor feat = rand_tensor({4, 6, 6}, 1400 + trial);
    Tensor prev = rand_tensor({1, 6, 6}, 1500 + trial, 0.05, 0.95);
    const auto coeff = rand_weights(4 * 36, 1600 + trial);
    auto f = [&] { return tbd::weighted_sum(run_query(feat, prev, bank), coeff); };
    auto params = bank_params(bank);
    params.push_back(feat);
    params.push_back(prev);
    CHECK(gradcheck(f, params) < 1e-4);
  }
}

TEST_CASE("compare module gradients match central differences") {
  for (uint64_t trial = 0; trial < 20; ++trial) {
    BankRegistry reg(tiny_config(), 1700 + trial);
    ParamBank& bank = reg.bank("compare_greater");
    nudge_biases(bank, 9400 + trial);
    Tensor a = rand_tensor({4, 6, 6}, 1800 + trial);
    Tensor b = rand_tensor({4, 6, 6}, 1900 + trial);
    const auto coeff = rand_weights(4 * 36, 2000 + trial);
    auto f = [&] { return tbd::weighted_sum(run_compare(a, b, bank), coeff); };
    auto params = bank_params(bank);
    params.push_back(a);
    params.push_back(b);
    CHECK(gradcheck(f, params) < 1e-4);
  }
}

TEST_CASE("stem gradients match central differences") {
  for (uint64_t trial = 0; trial < 20; ++trial) {
    BankRegistry reg(tiny_config(), 2100 + trial);
    ParamBank& bank = reg.bank("stem");
    nudge_biases(bank, 9500 + trial);
    Tensor image = rand_tensor({2, 24, 24}, 2200 + trial, 0.0, 1.0);
    const auto coeff = rand_weights(4 * 36, 2300 + trial);
    auto f = [&] { return tbd::weighted_sum(run_stem(image, bank), coeff); };
    auto params = bank_params(bank);
    params.push_back(image);
    CHECK(gradcheck(f, params) < 1e-4);
  }
}

TEST_CASE("classifier gradients match central differences") {
  for (uint64_t trial = 0; trial < 20; ++trial) {
    BankRegistry reg(tiny_config(), 2400 + trial);
    ParamBank& bank = reg.bank("classifier");
    nudge_biases(bank, 9600 + trial);
    Tensor enc = rand_tensor({4, 6, 6}, 2500 + trial);
    const int label = static_cast<int>(trial % 5);
    auto f = [&] { return tbd::softmax_cross_entropy(run_classifier(enc, bank), label); };
    auto params = bank_params(bank);
    params.push_back(enc);
    CHECK(gradcheck(f, params) < 1e-4);
  }
}

TEST_CASE("a composed chain backpropagates into the image within tolerance") {
  for (uint64_t trial = 0; trial < 3; ++trial) {
    BankRegistry reg(tiny_config(), 2600 + trial);
    nudge_biases(reg.bank("stem"), 9700 + trial);
    nudge_biases(reg.bank("attention[cyan]"), 9800 + trial);
    nudge_biases(reg.bank("query_color"), 9900 + trial);
    nudge_biases(reg.bank("classifier"), 10000 + trial);
    Tensor image = rand_tensor({2, 24, 24}, 2700 + trial, 0.0, 1.0);
    auto f = [&] {
      Tensor feat = run_stem(image, reg.bank("stem"));
      Tensor m = run_attention(feat, all_ones_mask(6, 6), reg.bank("attention[cyan]"));
      Tensor enc = run_query(feat, m, reg.bank("query_color"));
      Tensor logits = run_classifier(enc, reg.bank("classifier"));
      return tbd::softmax_cross_entropy(logits, 1);
    };
    CHECK(gradcheck(f, {image}) < 1e-4);
  }
}
