#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "tbd/error.hpp"

namespace tbd {

struct TensorImpl {
  std::vector<int> shape;
  std::vector<double> data;
  std::vector<double> grad;  // lazily allocated, same length as data
  bool requires_grad = false;
  uint64_t tape_gen = 0;  // generation of the tape that produced this tensor

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  void accumulate_grad(const double* g, int64_t n);
  std::vector<double>& grad_buffer();  // allocates zeros on first use
};

/// Dense float64 tensor participating in reverse-mode differentiation.
/// Shapes follow channel-major layout: feature maps are C x R x C' row-major,
/// scalars are {1}. Copies share storage (value-semantics handle).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape);

  static Tensor zeros(std::vector<int> shape);
  static Tensor ones(std::vector<int> shape);
  static Tensor full(std::vector<int> shape, double value);
  static Tensor from_data(std::vector<int> shape, std::vector<double> data);
  static Tensor scalar(double value);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int>& shape() const { return impl_->shape; }
  int ndim() const { return static_cast<int>(impl_->shape.size()); }
  int dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return impl_->numel(); }

  double* data() { return impl_->data.data(); }
  const double* data() const { return impl_->data.data(); }
  double value() const;  // scalar accessor, throws unless numel()==1

  // 3D convenience accessors (channel, row, col)
  double& at(int c, int r, int k);
  double at(int c, int r, int k) const;

  void set_requires_grad(bool v) { impl_->requires_grad = v; }
  bool requires_grad() const { return impl_->requires_grad; }

  /// Gradient buffer; zero-filled on first access so unreached parameters
  /// read as zero grad.
  std::vector<double>& grad() { return impl_->grad_buffer(); }
  bool grad_allocated() const { return !impl_->grad.empty(); }
  void zero_grad();

  std::string shape_str() const;

  std::shared_ptr<TensorImpl> impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Reverse-mode tape. Constructing a Tape makes it the active tape for the
/// current thread; ops record backward closures onto it in execution order.
/// Forward-only evaluation (no active tape) records nothing, so frozen
/// models can be run concurrently from many threads.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Reverse sweep from a scalar loss. Each recorded node is visited exactly
  /// once, in reverse recording order. A second call is an error.
  void backward(const Tensor& loss);

  size_t size() const { return nodes_.size(); }
  uint64_t generation() const { return generation_; }

  static Tape* current();

  // Internal: record a backward closure. Used by ops.
  void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }

 private:
  std::vector<std::function<void()>> nodes_;
  uint64_t generation_;
  bool consumed_ = false;
};

// ---------------------------------------------------------------------------
// Differentiable operations. Each checks shape preconditions and, when a tape
// is active and gradients can flow, records its backward rule.
// ---------------------------------------------------------------------------

/// 2D cross-correlation with zero padding. x: [Cin,H,W], w: [Cout,Cin,kh,kw],
/// b: [Cout]. Output spatial extent: (E + 2*padding - dilation*(k-1) - 1)/stride + 1.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int dilation,
              int padding, int stride = 1);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

enum class BinaryKind { mul, min, max };

/// Elementwise mul/min/max on [C,R,S] tensors. One operand may have channel
/// extent 1 with matching spatial extents; it broadcasts across channels.
/// min/max backward routes the gradient to the selected operand, first
/// operand on ties.
Tensor elem_binary(BinaryKind kind, const Tensor& a, const Tensor& b);

Tensor concat_channels(const Tensor& a, const Tensor& b);
Tensor maxpool2d(const Tensor& x, int kernel, int stride);

/// Copy into a rank-1 tensor of the same length (row-major order).
Tensor flatten(const Tensor& x);

/// y = W x + b with x: [n], W: [m,n], b: [m].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

/// -log softmax(logits)[label], max-subtracted for stability.
Tensor softmax_cross_entropy(const Tensor& logits, int label);

/// Sum of absolute values, as a scalar tensor.
Tensor l1_mass(const Tensor& x);

/// Scalar dot product with a constant coefficient vector (w.size() == numel).
Tensor weighted_sum(const Tensor& x, const std::vector<double>& w);

// Plumbing ops used by module composition and loss assembly.
Tensor add(const Tensor& a, const Tensor& b);       // same shape
Tensor scale(const Tensor& x, double factor);
Tensor slice_at(const Tensor& x, int r, int c);     // [C,H,W] -> [C,1,1]
Tensor scale_colvec(const Tensor& x, const Tensor& v);  // [C,H,W] * [C,1,1]

/// Softmax probabilities (forward-only helper, not differentiable).
std::vector<double> softmax(const Tensor& logits);

// ---------------------------------------------------------------------------
// Optimizer and initialization
// ---------------------------------------------------------------------------

struct AdamState {
  std::vector<double> m;  // first moment, zero-initialized
  std::vector<double> v;  // second moment, zero-initialized
  int64_t t = 0;
};

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update of `param` from its accumulated gradient.
void adam_step(Tensor& param, AdamState& state, const AdamConfig& cfg);

/// He-normal init: zero-mean normal with variance 2/fan_in, deterministic
/// under seed (internal Box-Muller, not libstdc++ distributions).
Tensor kaiming_normal(std::vector<int> shape, int fan_in, uint64_t seed);

/// Uniform doubles in [0,1) under seed; test and renderer utility.
std::vector<double> uniform_doubles(int64_t n, uint64_t seed);

/// FNV-1a, used to derive per-parameter init seeds from token/name strings.
uint64_t fnv1a(const std::string& s);

/// SplitMix64 finalizer; scrambles counters into independent seeds.
uint64_t splitmix64(uint64_t x);

/// Process-wide runtime knobs: pins BLAS to a fixed thread count
/// (TBD_NUM_THREADS, default 1) so results are bitwise reproducible.
void runtime_init();

}  // namespace tbd
