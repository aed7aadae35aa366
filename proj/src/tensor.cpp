#include "tbd/tensor.hpp"

#include <cblas.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <mutex>
#include <random>
#include <sstream>

namespace tbd {

namespace {

thread_local Tape* g_current_tape = nullptr;
std::atomic<uint64_t> g_tape_counter{0};

std::once_flag g_runtime_once;

int64_t shape_numel(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int e : shape) {
    if (e < 0) throw Error(ErrorCategory::shape, "negative extent in shape");
    n *= e;
  }
  return n;
}

bool needs_grad(const Tensor& t, Tape* tape) {
  return t.impl()->requires_grad ||
         (tape != nullptr && t.impl()->tape_gen == tape->generation());
}

void mark_output(const Tensor& out, Tape* tape) {
  out.impl()->tape_gen = tape->generation();
}

// Reusable scratch for im2col buffers; backward recomputes into the same
// thread's scratch, so forward and backward never alias across threads.
thread_local std::vector<double> g_cols_scratch;
thread_local std::vector<double> g_dcols_scratch;

struct ConvDims {
  int cin, h, w, cout, kh, kw, out_h, out_w;
  int dilation, padding, stride;
  int64_t k() const { return static_cast<int64_t>(cin) * kh * kw; }
  int64_t n() const { return static_cast<int64_t>(out_h) * out_w; }
};

void im2col(const double* x, const ConvDims& d, double* cols) {
  const int64_t n = d.n();
  for (int ci = 0; ci < d.cin; ++ci) {
    const double* plane = x + static_cast<int64_t>(ci) * d.h * d.w;
    for (int kr = 0; kr < d.kh; ++kr) {
      for (int kc = 0; kc < d.kw; ++kc) {
        double* row =
            cols + ((static_cast<int64_t>(ci) * d.kh + kr) * d.kw + kc) * n;
        for (int oy = 0; oy < d.out_h; ++oy) {
          const int iy = oy * d.stride - d.padding + kr * d.dilation;
          double* dst = row + static_cast<int64_t>(oy) * d.out_w;
          if (iy < 0 || iy >= d.h) {
            std::fill(dst, dst + d.out_w, 0.0);
            continue;
          }
          const double* src = plane + static_cast<int64_t>(iy) * d.w;
          for (int ox = 0; ox < d.out_w; ++ox) {
            const int ix = ox * d.stride - d.padding + kc * d.dilation;
            dst[ox] = (ix >= 0 && ix < d.w) ? src[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_accumulate(const double* cols, const ConvDims& d, double* dx) {
  const int64_t n = d.n();
  for (int ci = 0; ci < d.cin; ++ci) {
    double* plane = dx + static_cast<int64_t>(ci) * d.h * d.w;
    for (int kr = 0; kr < d.kh; ++kr) {
      for (int kc = 0; kc < d.kw; ++kc) {
        const double* row =
            cols + ((static_cast<int64_t>(ci) * d.kh + kr) * d.kw + kc) * n;
        for (int oy = 0; oy < d.out_h; ++oy) {
          const int iy = oy * d.stride - d.padding + kr * d.dilation;
          if (iy < 0 || iy >= d.h) continue;
          const double* src = row + static_cast<int64_t>(oy) * d.out_w;
          double* dst = plane + static_cast<int64_t>(iy) * d.w;
          for (int ox = 0; ox < d.out_w; ++ox) {
            const int ix = ox * d.stride - d.padding + kc * d.dilation;
            if (ix >= 0 && ix < d.w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

void runtime_init() {
  std::call_once(g_runtime_once, [] {
    int threads = 1;
    if (const char* env = std::getenv("TBD_NUM_THREADS")) {
      threads = std::max(1, std::atoi(env));
    }
    openblas_set_num_threads(threads);
  });
}

// ---------------------------------------------------------------------------
// TensorImpl / Tensor
// ---------------------------------------------------------------------------

std::vector<double>& TensorImpl::grad_buffer() {
  if (grad.empty() && !data.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

void TensorImpl::accumulate_grad(const double* g, int64_t n) {
  auto& gb = grad_buffer();
  for (int64_t i = 0; i < n; ++i) gb[static_cast<size_t>(i)] += g[i];
}

Tensor::Tensor(std::vector<int> shape) {
  impl_ = std::make_shared<TensorImpl>();
  int64_t n = shape_numel(shape);
  impl_->shape = std::move(shape);
  impl_->data.assign(static_cast<size_t>(n), 0.0);
}

Tensor Tensor::zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

Tensor Tensor::ones(std::vector<int> shape) { return full(std::move(shape), 1.0); }

Tensor Tensor::full(std::vector<int> shape, double value) {
  Tensor t(std::move(shape));
  std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
  return t;
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> data) {
  Tensor t;
  t.impl_ = std::make_shared<TensorImpl>();
  if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
    throw Error(ErrorCategory::shape, "from_data: shape/data length mismatch");
  }
  t.impl_->shape = std::move(shape);
  t.impl_->data = std::move(data);
  return t;
}

Tensor Tensor::scalar(double value) { return full({1}, value); }

double Tensor::value() const {
  if (numel() != 1) {
    throw Error(ErrorCategory::state, "value() on non-scalar tensor " + shape_str());
  }
  return impl_->data[0];
}

double& Tensor::at(int c, int r, int k) {
  const auto& s = impl_->shape;
  return impl_->data[(static_cast<size_t>(c) * s[1] + r) * s[2] + k];
}

double Tensor::at(int c, int r, int k) const {
  const auto& s = impl_->shape;
  return impl_->data[(static_cast<size_t>(c) * s[1] + r) * s[2] + k];
}

void Tensor::zero_grad() {
  impl_->grad.clear();
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < impl_->shape.size(); ++i) {
    if (i) os << ',';
    os << impl_->shape[i];
  }
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

Tape::Tape() : generation_(++g_tape_counter) {
  if (g_current_tape != nullptr) {
    throw Error(ErrorCategory::state, "nested tapes are not supported");
  }
  g_current_tape = this;
}

Tape::~Tape() { g_current_tape = nullptr; }

Tape* Tape::current() { return g_current_tape; }

void Tape::backward(const Tensor& loss) {
  if (consumed_) {
    throw Error(ErrorCategory::state,
                "backward called twice on one tape; grads would double");
  }
  if (!loss.defined() || loss.numel() != 1) {
    throw Error(ErrorCategory::state, "backward requires a scalar loss");
  }
  if (loss.impl()->tape_gen != generation_) {
    throw Error(ErrorCategory::state, "loss was not produced on this tape");
  }
  consumed_ = true;
  loss.impl()->grad_buffer()[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int dilation,
              int padding, int stride) {
  runtime_init();
  if (x.ndim() != 3 || w.ndim() != 4 || b.ndim() != 1) {
    throw Error(ErrorCategory::shape,
                "conv2d expects x[Cin,H,W], w[Cout,Cin,kh,kw], b[Cout]; got x " +
                    x.shape_str() + " w " + w.shape_str() + " b " + b.shape_str());
  }
  ConvDims d;
  d.cin = x.dim(0);
  d.h = x.dim(1);
  d.w = x.dim(2);
  d.cout = w.dim(0);
  d.kh = w.dim(2);
  d.kw = w.dim(3);
  d.dilation = dilation;
  d.padding = padding;
  d.stride = stride;
  if (w.dim(1) != d.cin) {
    throw Error(ErrorCategory::shape, "conv2d channel mismatch: input " +
                                          x.shape_str() + " vs filter " +
                                          w.shape_str());
  }
  if (b.dim(0) != d.cout) {
    throw Error(ErrorCategory::shape,
                "conv2d bias extent " + b.shape_str() + " != Cout of " + w.shape_str());
  }
  if (dilation < 1 || stride < 1 || padding < 0) {
    throw Error(ErrorCategory::shape, "conv2d: dilation/stride must be >=1, padding >=0");
  }
  d.out_h = (d.h + 2 * padding - dilation * (d.kh - 1) - 1) / stride + 1;
  d.out_w = (d.w + 2 * padding - dilation * (d.kw - 1) - 1) / stride + 1;
  if (d.out_h <= 0 || d.out_w <= 0) {
    throw Error(ErrorCategory::shape, "conv2d: kernel does not fit input " + x.shape_str());
  }

  const int64_t k = d.k();
  const int64_t n = d.n();
  g_cols_scratch.resize(static_cast<size_t>(k * n));
  im2col(x.data(), d, g_cols_scratch.data());

  Tensor out({d.cout, d.out_h, d.out_w});
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, d.cout,
              static_cast<int>(n), static_cast<int>(k), 1.0, w.data(),
              static_cast<int>(k), g_cols_scratch.data(), static_cast<int>(n),
              0.0, out.data(), static_cast<int>(n));
  for (int co = 0; co < d.cout; ++co) {
    double* row = out.data() + static_cast<int64_t>(co) * n;
    const double bias = b.data()[co];
    for (int64_t i = 0; i < n; ++i) row[i] += bias;
  }

  Tape* tape = Tape::current();
  if (tape && (needs_grad(x, tape) || needs_grad(w, tape) || needs_grad(b, tape))) {
    mark_output(out, tape);
    auto xi = x.impl();
    auto wi = w.impl();
    auto bi = b.impl();
    auto oi = out.impl();
    const bool gx = needs_grad(x, tape);
    const bool gw = needs_grad(w, tape);
    const bool gb = needs_grad(b, tape);
    tape->record([xi, wi, bi, oi, d, gx, gw, gb] {
      const auto& og = oi->grad;
      if (og.empty()) return;
      const int64_t k = d.k();
      const int64_t n = d.n();
      g_cols_scratch.resize(static_cast<size_t>(k * n));
      im2col(xi->data.data(), d, g_cols_scratch.data());
      if (gb) {
        auto& dbv = bi->grad_buffer();
        for (int co = 0; co < d.cout; ++co) {
          const double* row = og.data() + static_cast<int64_t>(co) * n;
          double s = 0.0;
          for (int64_t i = 0; i < n; ++i) s += row[i];
          dbv[static_cast<size_t>(co)] += s;
        }
      }
      if (gw) {
        auto& dwv = wi->grad_buffer();
        cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, d.cout,
                    static_cast<int>(k), static_cast<int>(n), 1.0, og.data(),
                    static_cast<int>(n), g_cols_scratch.data(),
                    static_cast<int>(n), 1.0, dwv.data(), static_cast<int>(k));
      }
      if (gx) {
        g_dcols_scratch.resize(static_cast<size_t>(k * n));
        cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, static_cast<int>(k),
                    static_cast<int>(n), d.cout, 1.0, wi->data.data(),
                    static_cast<int>(k), og.data(), static_cast<int>(n), 0.0,
                    g_dcols_scratch.data(), static_cast<int>(n));
        col2im_accumulate(g_dcols_scratch.data(), d, xi->grad_buffer().data());
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

Tensor relu(const Tensor& x) {
  Tensor out(x.shape());
  const int64_t n = x.numel();
  const double* xd = x.data();
  double* od = out.data();
  for (int64_t i = 0; i < n; ++i) od[i] = xd[i] > 0.0 ? xd[i] : 0.0;

  Tape* tape = Tape::current();
  if (tape && needs_grad(x, tape)) {
    mark_output(out, tape);
    auto xi = x.impl();
    auto oi = out.impl();
    tape->record([xi, oi, n] {
      const auto& og = oi->grad;
      if (og.empty()) return;
      auto& gx = xi->grad_buffer();
      const double* xd = xi->data.data();
      for (int64_t i = 0; i < n; ++i) {
        if (xd[i] > 0.0) gx[static_cast<size_t>(i)] += og[static_cast<size_t>(i)];
      }
    });
  }
  return out;
}

Tensor sigmoid(const Tensor& x) {
  Tensor out(x.shape());
  const int64_t n = x.numel();
  const double* xd = x.data();
  double* od = out.data();
  // clamp into the open interval: extreme logits would otherwise round to
  // exactly 0/1 at float64, breaking the mask range contract
  const double lo = std::numeric_limits<double>::min();
  const double hi = std::nextafter(1.0, 0.0);
  for (int64_t i = 0; i < n; ++i) {
    od[i] = std::clamp(1.0 / (1.0 + std::exp(-xd[i])), lo, hi);
  }

  Tape* tape = Tape::current();
  if (tape && needs_grad(x, tape)) {
    mark_output(out, tape);
    auto xi = x.impl();
    auto oi = out.impl();
    tape->record([xi, oi, n] {
      const auto& og = oi->grad;
      if (og.empty()) return;
      auto& gx = xi->grad_buffer();
      const double* od = oi->data.data();
      for (int64_t i = 0; i < n; ++i) {
        const double s = od[i];
        gx[static_cast<size_t>(i)] += og[static_cast<size_t>(i)] * s * (1.0 - s);
      }
    });
  }
  return out;
}

namespace {

struct BroadcastPlan {
  std::vector<int> out_shape;
  bool a_bcast = false;  // a has channel extent 1, broadcasts over channels
  bool b_bcast = false;
  int channels = 1;
  int64_t spatial = 1;
};

BroadcastPlan plan_binary(const Tensor& a, const Tensor& b) {
  BroadcastPlan p;
  if (a.shape() == b.shape()) {
    p.out_shape = a.shape();
    p.channels = a.ndim() == 3 ? a.dim(0) : 1;
    p.spatial = a.numel() / std::max(1, p.channels);
    return p;
  }
  if (a.ndim() == 3 && b.ndim() == 3 && a.dim(1) == b.dim(1) &&
      a.dim(2) == b.dim(2)) {
    if (a.dim(0) == 1 && b.dim(0) > 1) {
      p.a_bcast = true;
      p.out_shape = b.shape();
      p.channels = b.dim(0);
      p.spatial = static_cast<int64_t>(b.dim(1)) * b.dim(2);
      return p;
    }
    if (b.dim(0) == 1 && a.dim(0) > 1) {
      p.b_bcast = true;
      p.out_shape = a.shape();
      p.channels = a.dim(0);
      p.spatial = static_cast<int64_t>(a.dim(1)) * a.dim(2);
      return p;
    }
  }
  throw Error(ErrorCategory::shape, "elem_binary: incompatible shapes " +
                                        a.shape_str() + " and " + b.shape_str());
}

}  // namespace

Tensor elem_binary(BinaryKind kind, const Tensor& a, const Tensor& b) {
  const BroadcastPlan p = plan_binary(a, b);
  Tensor out(p.out_shape);
  const double* ad = a.data();
  const double* bd = b.data();
  double* od = out.data();
  for (int c = 0; c < p.channels; ++c) {
    const double* ar = ad + (p.a_bcast ? 0 : c * p.spatial);
    const double* br = bd + (p.b_bcast ? 0 : c * p.spatial);
    double* orow = od + c * p.spatial;
    switch (kind) {
      case BinaryKind::mul:
        for (int64_t i = 0; i < p.spatial; ++i) orow[i] = ar[i] * br[i];
        break;
      case BinaryKind::min:
        for (int64_t i = 0; i < p.spatial; ++i)
          orow[i] = ar[i] <= br[i] ? ar[i] : br[i];
        break;
      case BinaryKind::max:
        for (int64_t i = 0; i < p.spatial; ++i)
          orow[i] = ar[i] >= br[i] ? ar[i] : br[i];
        break;
    }
  }

  Tape* tape = Tape::current();
  if (tape && (needs_grad(a, tape) || needs_grad(b, tape))) {
    mark_output(out, tape);
    auto ai = a.impl();
    auto bi = b.impl();
    auto oi = out.impl();
    const bool ga = needs_grad(a, tape);
    const bool gb = needs_grad(b, tape);
    tape->record([kind, ai, bi, oi, p, ga, gb] {
      const auto& og = oi->grad;
      if (og.empty()) return;
      double* gav = ga ? ai->grad_buffer().data() : nullptr;
      double* gbv = gb ? bi->grad_buffer().data() : nullptr;
      const double* ad = ai->data.data();
      const double* bd = bi->data.data();
      for (int c = 0; c < p.channels; ++c) {
        const int64_t ao = p.a_bcast ? 0 : c * p.spatial;
        const int64_t bo = p.b_bcast ? 0 : c * p.spatial;
        const double* g = og.data() + c * p.spatial;
        for (int64_t i = 0; i < p.spatial; ++i) {
          const double av = ad[ao + i];
          const double bv = bd[bo + i];
          switch (kind) {
            case BinaryKind::mul:
              if (gav) gav[ao + i] += g[i] * bv;
              if (gbv) gbv[bo + i] += g[i] * av;
              break;
            case BinaryKind::min:
              // ties route to the first operand
              if (av <= bv) {
                if (gav) gav[ao + i] += g[i];
              } else if (gbv) {
                gbv[bo + i] += g[i];
              }
              break;
            case BinaryKind::max:
              if (av >= bv) {
                if (gav) gav[ao + i] += g[i];
              } else if (gbv) {
                gbv[bo + i] += g[i];
              }
              break;
          }
        }
      }
    });
  }
  return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 3 || b.ndim() != 3 || a.dim(1) != b.dim(1) ||
      a.dim(2) != b.dim(2)) {
    throw Error(ErrorCategory::shape, "concat_channels: spatial mismatch " +
                                          a.shape_str() + " vs " + b.shape_str());
  }
  const int ca = a.dim(0), cb = b.dim(0);
  Tensor out({ca + cb, a.dim(1), a.dim(2)});
  std::copy(a.data(), a.data() + a.numel(), out.data());
  std::copy(b.data(), b.data() + b.numel(), out.data() + a.numel());

  Tape* tape = Tape::current();
  if (tape && (needs_grad(a, tape) || needs_grad(b, tape))) {
    mark_output(out, tape);
    auto ai = a.impl();
    auto bi = b.impl();
    auto oi = out.impl();
    const bool ga = needs_grad(a, tape);
    const bool gb = needs_grad(b, tape);
    const int64_t na = a.numel(), nb = b.numel();
    tape->record([ai, bi, oi, ga, gb, na, nb] {
      const auto& og = oi->grad;
      if (og.empty()) return;
      if (ga && na > 0) ai->accumulate_grad(og.data(), na);
      if (gb && nb > 0) bi->accumulate_grad(og.data() + na, nb);
    });
  }
  return out;
}

Tensor maxpool2d(const Tensor& x, int kernel, int stride) {
  if (x.ndim() != 3) {
    throw Error(ErrorCategory::shape, "maxpool2d expects [C,H,W], got " + x.shape_str());
  }
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (kernel > h || kernel > w) {
    throw Error(ErrorCategory::shape, "maxpool2d: kernel " + std::to_string(kernel) +
                                          " larger than input " + x.shape_str());
  }
  if (stride < 1 || (h - kernel) % stride != 0 || (w - kernel) % stride != 0) {
    throw Error(ErrorCategory::shape, "maxpool2d: extents not divisible by stride");
  }
  const int oh = (h - kernel) / stride + 1;
  const int ow = (w - kernel) / stride + 1;
  Tensor out({c, oh, ow});
  // argmax per window, first element in row-major scan on ties
  std::vector<int64_t> argmax(static_cast<size_t>(out.numel()));
  const double* xd = x.data();
  double* od = out.data();
  for (int ch = 0; ch < c; ++ch) {
    const double* plane = xd + static_cast<int64_t>(ch) * h * w;
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        double best = -std::numeric_limits<double>::infinity();
        int64_t best_idx = -1;
        for (int ky = 0; ky < kernel; ++ky) {
          for (int kx = 0; kx < kernel; ++kx) {
            const int64_t idx =
                static_cast<int64_t>(oy * stride + ky) * w + (ox * stride + kx);
            if (plane[idx] > best) {
              best = plane[idx];
              best_idx = idx;
            }
          }
        }
        const int64_t o = (static_cast<int64_t>(ch) * oh + oy) * ow + ox;
        od[o] = best;
        argmax[static_cast<size_t>(o)] = static_cast<int64_t>(ch) * h * w + best_idx;
      }
    }
  }

  Tape* tape = Tape::current();
  if (tape && needs_grad(x, tape)) {
    mark_output(out, tape);
    auto xi = x.impl();
    auto oi = out.impl();
    tape->record([xi, oi, argmax = std::move(argmax)] {
      const auto& og = oi->grad;
      if (og.empty()) return;
      auto& gx = xi->grad_buffer();
      for (size_t i = 0; i < argmax.size(); ++i) {
        gx[static_cast<size_t>(argmax[i])] += og[i];
      }
    });
  }
  return out;
}

Tensor flatten(const Tensor& x) {
  Tensor out({static_cast<int>(x.numel())});
  std::copy(x.data(), x.data() + x.numel(), out.data());

  Tape* tape = Tape::current();
  if (tape && needs_grad(x, tape)) {
    mark_output(out, tape);
    auto xi = x.impl();
    auto oi = out.impl();
    const int64_t n = x.numel();
    tape->record([xi, oi, n] {
      const auto& og = oi->grad;
      if (og.empty()) return;
      xi->accumulate_grad(og.data(), n);
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  runtime_init();
  if (x.ndim() != 1 || w.ndim() != 2 || b.ndim() != 1 || w.dim(1) != x.dim(0) ||
      w.dim(0) != b.dim(0)) {
    throw Error(ErrorCategory::shape, "linear: need x[n], w[m,n], b[m]; got x " +
                                          x.shape_str() + " w " + w.shape_str() +
                                          " b " + b.shape_str());
  }
  const int m = w.dim(0), n = w.dim(1);
  Tensor out({m});
  std::copy(b.data(), b.data() + m, out.data());
  cblas_dgemv(CblasRowMajor, CblasNoTrans, m, n, 1.0, w.data(), n, x.data(), 1,
              1.0, out.data(), 1);

  Tape* tape = Tape::current();
  if (tape && (needs_grad(x, tape) || needs_grad(w, tape) || needs_grad(b, tape))) {
    mark_output(out, tape);
    auto xi = x.impl();
    auto wi = w.impl();
    auto bi = b.impl();
    auto oi = out.impl();
    const bool gx = needs_grad(x, tape);
    const bool gw = needs_grad(w, tape);
    const bool gb = needs_grad(b, tape);
    tape->record([xi, wi, bi, oi, m, n, gx, gw, gb] {
      const auto& og = oi->grad;
      if (og.empty()) return;
      if (gb) bi->accumulate_grad(og.data(), m);
      if (gw) {
        cblas_dger(CblasRowMajor, m, n, 1.0, og.data(), 1, xi->data.data(), 1,
                   wi->grad_buffer().data(), n);
      }
      if (gx) {
        cblas_dgemv(CblasRowMajor, CblasTrans, m, n, 1.0, wi->data.data(), n,
                    og.data(), 1, 1.0, xi->grad_buffer().data(), 1);
      }
    });
  }
  return out;
}

Tensor softmax_cross_entropy(const Tensor& logits, int label) {
  if (logits.ndim() != 1 || logits.dim(0) < 2) {
    throw Error(ErrorCategory::shape,
                "softmax_cross_entropy expects logits[K], K>=2; got " + logits.shape_str());
  }
  const int k = logits.dim(0);
  if (label < 0 || label >= k) {
    throw Error(ErrorCategory::shape, "label " + std::to_string(label) +
                                          " out of range [0," + std::to_string(k) + ")");
  }
  const double* ld = logits.data();
  double mx = ld[0];
  for (int i = 1; i < k; ++i) mx = std::max(mx, ld[i]);
  double sum = 0.0;
  for (int i = 0; i < k; ++i) sum += std::exp(ld[i] - mx);
  const double lse = mx + std::log(sum);
  Tensor out = Tensor::scalar(lse - ld[label]);

  Tape* tape = Tape::current();
  if (tape && needs_grad(logits, tape)) {
    mark_output(out, tape);
    auto li = logits.impl();
    auto oi = out.impl();
    tape->record([li, oi, label, k, mx, sum] {
      const auto& og = oi->grad;
      if (og.empty()) return;
      auto& gl = li->grad_buffer();
      const double* ld = li->data.data();
      const double g0 = og[0];
      for (int i = 0; i < k; ++i) {
        const double p = std::exp(ld[i] - mx) / sum;
        gl[static_cast<size_t>(i)] += g0 * (p - (i == label ? 1.0 : 0.0));
      }
    });
  }
  return out;
}

Tensor l1_mass(const Tensor& x) {
  const int64_t n = x.numel();
  const double* xd = x.data();
  double s = 0.0;
  for (int64_t i = 0; i < n; ++i) s += std::abs(xd[i]);
  Tensor out = Tensor::scalar(s);

  Tape* tape = Tape::current();
  if (tape && needs_grad(x, tape)) {
    mark_output(out, tape);
    auto xi = x.impl();
    auto oi = out.impl();
    tape->record([xi, oi, n] {
      const auto& og = oi->grad;
      if (og.empty()) return;
      auto& gx = xi->grad_buffer();
      const double* xd = xi->data.data();
      const double g0 = og[0];
      for (int64_t i = 0; i < n; ++i) {
        // subgradient at 0 is 0
        const double sgn = xd[i] > 0.0 ? 1.0 : (xd[i] < 0.0 ? -1.0 : 0.0);
        gx[static_cast<size_t>(i)] += g0 * sgn;
      }
    });
  }
  return out;
}

Tensor weighted_sum(const Tensor& x, const std::vector<double>& w) {
  const int64_t n = x.numel();
  if (static_cast<int64_t>(w.size()) != n) {
    throw Error(ErrorCategory::shape, "weighted_sum: coefficient count " +
                                          std::to_string(w.size()) +
                                          " != numel of " + x.shape_str());
  }
  const double* xd = x.data();
  double s = 0.0;
  for (int64_t i = 0; i < n; ++i) s += w[static_cast<size_t>(i)] * xd[i];
  Tensor out = Tensor::scalar(s);

  Tape* tape = Tape::current();
  if (tape && needs_grad(x, tape)) {
    mark_output(out, tape);
    auto xi = x.impl();
    auto oi = out.impl();
    tape->record([xi, oi, w, n] {
      const auto& og = oi->grad;
      if (og.empty()) return;
      auto& gx = xi->grad_buffer();
      const double g0 = og[0];
      for (int64_t i = 0; i < n; ++i) {
        gx[static_cast<size_t>(i)] += g0 * w[static_cast<size_t>(i)];
      }
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw Error(ErrorCategory::shape,
                "add: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  }
  Tensor out(a.shape());
  const int64_t n = a.numel();
  const double* ad = a.data();
  const double* bd = b.data();
  double* od = out.data();
  for (int64_t i = 0; i < n; ++i) od[i] = ad[i] + bd[i];

  Tape* tape = Tape::current();
  if (tape && (needs_grad(a, tape) || needs_grad(b, tape))) {
    mark_output(out, tape);
    auto ai = a.impl();
    auto bi = b.impl();
    auto oi = out.impl();
    const bool ga = needs_grad(a, tape);
    const bool gb = needs_grad(b, tape);
    tape->record([ai, bi, oi, ga, gb, n] {
      const auto& og = oi->grad;
      if (og.empty()) return;
      if (ga) ai->accumulate_grad(og.data(), n);
      if (gb) bi->accumulate_grad(og.data(), n);
    });
  }
  return out;
}

Tensor scale(const Tensor& x, double factor) {
  Tensor out(x.shape());
  const int64_t n = x.numel();
  const double* xd = x.data();
  double* od = out.data();
  for (int64_t i = 0; i < n; ++i) od[i] = xd[i] * factor;

  Tape* tape = Tape::current();
  if (tape && needs_grad(x, tape)) {
    mark_output(out, tape);
    auto xi = x.impl();
    auto oi = out.impl();
    tape->record([xi, oi, factor, n] {
      const auto& og = oi->grad;
      if (og.empty()) return;
      auto& gx = xi->grad_buffer();
      for (int64_t i = 0; i < n; ++i) {
        gx[static_cast<size_t>(i)] += og[static_cast<size_t>(i)] * factor;
      }
    });
  }
  return out;
}

Tensor slice_at(const Tensor& x, int r, int c) {
  if (x.ndim() != 3) {
    throw Error(ErrorCategory::shape, "slice_at expects [C,H,W], got " + x.shape_str());
  }
  const int ch = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (r < 0 || r >= h || c < 0 || c >= w) {
    throw Error(ErrorCategory::shape, "slice_at: location out of range");
  }
  Tensor out({ch, 1, 1});
  const double* xd = x.data();
  double* od = out.data();
  for (int i = 0; i < ch; ++i) od[i] = xd[(static_cast<int64_t>(i) * h + r) * w + c];

  Tape* tape = Tape::current();
  if (tape && needs_grad(x, tape)) {
    mark_output(out, tape);
    auto xi = x.impl();
    auto oi = out.impl();
    tape->record([xi, oi, ch, h, w, r, c] {
      const auto& og = oi->grad;
      if (og.empty()) return;
      auto& gx = xi->grad_buffer();
      for (int i = 0; i < ch; ++i) {
        gx[(static_cast<size_t>(i) * h + r) * w + c] += og[static_cast<size_t>(i)];
      }
    });
  }
  return out;
}

Tensor scale_colvec(const Tensor& x, const Tensor& v) {
  if (x.ndim() != 3 || v.ndim() != 3 || v.dim(0) != x.dim(0) || v.dim(1) != 1 ||
      v.dim(2) != 1) {
    throw Error(ErrorCategory::shape, "scale_colvec: need x[C,H,W], v[C,1,1]; got x " +
                                          x.shape_str() + " v " + v.shape_str());
  }
  const int c = x.dim(0);
  const int64_t spatial = static_cast<int64_t>(x.dim(1)) * x.dim(2);
  Tensor out(x.shape());
  const double* xd = x.data();
  const double* vd = v.data();
  double* od = out.data();
  for (int i = 0; i < c; ++i) {
    const double s = vd[i];
    const double* xr = xd + i * spatial;
    double* orow = od + i * spatial;
    for (int64_t j = 0; j < spatial; ++j) orow[j] = xr[j] * s;
  }

  Tape* tape = Tape::current();
  if (tape && (needs_grad(x, tape) || needs_grad(v, tape))) {
    mark_output(out, tape);
    auto xi = x.impl();
    auto vi = v.impl();
    auto oi = out.impl();
    const bool gx = needs_grad(x, tape);
    const bool gv = needs_grad(v, tape);
    tape->record([xi, vi, oi, c, spatial, gx, gv] {
      const auto& og = oi->grad;
      if (og.empty()) return;
      double* gxv = gx ? xi->grad_buffer().data() : nullptr;
      double* gvv = gv ? vi->grad_buffer().data() : nullptr;
      const double* xd = xi->data.data();
      const double* vd = vi->data.data();
      for (int i = 0; i < c; ++i) {
        const double* g = og.data() + i * spatial;
        const double* xr = xd + i * spatial;
        if (gxv) {
          const double s = vd[i];
          double* gr = gxv + i * spatial;
          for (int64_t j = 0; j < spatial; ++j) gr[j] += g[j] * s;
        }
        if (gvv) {
          double acc = 0.0;
          for (int64_t j = 0; j < spatial; ++j) acc += g[j] * xr[j];
          gvv[i] += acc;
        }
      }
    });
  }
  return out;
}

std::vector<double> softmax(const Tensor& logits) {
  const int64_t k = logits.numel();
  const double* ld = logits.data();
  double mx = ld[0];
  for (int64_t i = 1; i < k; ++i) mx = std::max(mx, ld[i]);
  std::vector<double> p(static_cast<size_t>(k));
  double sum = 0.0;
  for (int64_t i = 0; i < k; ++i) {
    p[static_cast<size_t>(i)] = std::exp(ld[i] - mx);
    sum += p[static_cast<size_t>(i)];
  }
  for (auto& e : p) e /= sum;
  return p;
}

// ---------------------------------------------------------------------------
// Adam and init
// ---------------------------------------------------------------------------

void adam_step(Tensor& param, AdamState& state, const AdamConfig& cfg) {
  const size_t n = static_cast<size_t>(param.numel());
  if (state.m.empty()) state.m.assign(n, 0.0);
  if (state.v.empty()) state.v.assign(n, 0.0);
  if (state.m.size() != n || state.v.size() != n) {
    throw Error(ErrorCategory::shape, "adam_step: moment buffers do not match parameter");
  }
  const auto& g = param.grad();
  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  double* p = param.data();
  for (size_t i = 0; i < n; ++i) {
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g[i];
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    p[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

Tensor kaiming_normal(std::vector<int> shape, int fan_in, uint64_t seed) {
  if (fan_in <= 0) throw Error(ErrorCategory::shape, "kaiming_normal: fan_in must be > 0");
  Tensor t(std::move(shape));
  const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
  std::mt19937_64 rng(seed);
  const int64_t n = t.numel();
  double* d = t.data();
  constexpr double kTwoPi = 6.283185307179586476925286766559;
  constexpr double kInv53 = 1.0 / 9007199254740992.0;  // 2^-53
  for (int64_t i = 0; i < n; i += 2) {
    // Box-Muller on (0,1] x [0,1); independent of libstdc++ distribution
    // implementations so seeds reproduce bitwise across toolchains.
    const double u1 = (static_cast<double>(rng() >> 11) + 1.0) * kInv53;
    const double u2 = static_cast<double>(rng() >> 11) * kInv53;
    const double rad = std::sqrt(-2.0 * std::log(u1));
    d[i] = std_dev * rad * std::cos(kTwoPi * u2);
    if (i + 1 < n) d[i + 1] = std_dev * rad * std::sin(kTwoPi * u2);
  }
  return t;
}

uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::vector<double> uniform_doubles(int64_t n, uint64_t seed) {
  std::mt19937_64 rng(seed);
  constexpr double kInv53 = 1.0 / 9007199254740992.0;
  std::vector<double> out(static_cast<size_t>(n));
  for (auto& v : out) v = static_cast<double>(rng() >> 11) * kInv53;
  return out;
}

uint64_t fnv1a(const std::string& s) {
  uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

const char* to_string(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::usage: return "usage";
    case ErrorCategory::config: return "config";
    case ErrorCategory::io: return "io";
    case ErrorCategory::format: return "format";
    case ErrorCategory::shape: return "shape";
    case ErrorCategory::state: return "state";
  }
  return "unknown";
}

}  // namespace tbd
