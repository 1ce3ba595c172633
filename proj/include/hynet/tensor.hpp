#pragma once

// Dense double-precision tensors with reverse-mode automatic differentiation.
//
// Recording model: a thread-local Tape collects every differentiable op
// produced while a TapeScope is alive. backward(output) sweeps the tape in
// reverse topological order (creation order), accumulating vector-Jacobian
// products. Gradients of tape-produced nodes are zeroed lazily per backward
// pass; gradients of leaves (parameters, attack inputs) accumulate additively
// across passes until the caller clears them — this is what lets a training
// step run two backward passes (objective, then regularizer with a stop set)
// into the same parameter gradient slots before one optimizer step.
//
// A stop set blocks all gradient flow into the named nodes, so whole upstream
// subgraphs are skipped exactly (their parameters receive bitwise zero).

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <utility>
#include <vector>

#include "hynet/blas.hpp"
#include "hynet/common.hpp"

namespace hynet {

class Tape;

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // sized lazily; see detail::grad_for
  bool requires_grad = false;
  bool grad_blocked = false;     // per-backward-pass stop flag
  Tape* owner = nullptr;         // tape that recorded this op; null for leaves
  std::size_t tape_index = 0;
  std::uint64_t grad_pass = 0;   // pass stamp for lazy zeroing / reachability
  std::uint64_t backward_touch = 0;  // counts gradient accumulations (audit)
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> backward_fn;  // reads this->grad, writes parents' grad
};

using NodePtr = std::shared_ptr<Node>;

namespace detail {
inline std::atomic<std::uint64_t>& pass_counter() {
  static std::atomic<std::uint64_t> c{0};
  return c;
}
inline thread_local std::uint64_t current_pass = 0;

// Destination buffer for accumulating gradient into `p`, or nullptr when `p`
// does not participate (no grad wanted, or blocked by the active stop set).
// Tape-produced nodes are zeroed on first touch per pass; leaves keep
// accumulating across passes.
inline double* grad_for(Node* p) {
  if (!p->requires_grad || p->grad_blocked) return nullptr;
  if (p->owner != nullptr) {
    if (p->grad_pass != current_pass) {
      p->grad.assign(p->value.size(), 0.0);
      p->grad_pass = current_pass;
    }
  } else if (p->grad.size() != p->value.size()) {
    p->grad.assign(p->value.size(), 0.0);
  }
  p->backward_touch += 1;
  return p->grad.data();
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Tensor: value-semantics handle on a Node.
// ---------------------------------------------------------------------------

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr n) : node_(std::move(n)) {}

  static Tensor from(Shape shape, std::vector<double> values) {
    if (hynet::numel(shape) != values.size())
      throw DimensionError(msg("tensor init: shape ", shape_str(shape),
                               " wants ", hynet::numel(shape), " elements, got ",
                               values.size()));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    return Tensor(std::move(n));
  }
  static Tensor zeros(Shape shape) {
    std::size_t n = hynet::numel(shape);
    return from(std::move(shape), std::vector<double>(n, 0.0));
  }
  static Tensor full(Shape shape, double v) {
    std::size_t n = hynet::numel(shape);
    return from(std::move(shape), std::vector<double>(n, v));
  }
  static Tensor scalar(double v) { return from(Shape{}, {v}); }
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
    std::size_t n = hynet::numel(shape);
    std::vector<double> v(n);
    for (double& x : v) x = stddev * rng.normal();
    return from(std::move(shape), std::move(v));
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim() const { return node_->shape.size(); }
  std::size_t size(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->value.size(); }

  std::vector<double>& data() { return node_->value; }
  const std::vector<double>& data() const { return node_->value; }

  double item() const {
    if (numel() != 1)
      throw ContractError(msg("item(): tensor ", shape_str(shape()),
                              " is not a scalar"));
    return node_->value[0];
  }

  double at(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != dim())
      throw DimensionError(msg("at(): rank mismatch for ", shape_str(shape())));
    std::size_t off = 0, stride = 1;
    std::size_t k = dim();
    auto it = idx.end();
    for (std::size_t a = 0; a < k; ++a) {
      --it;
      std::size_t i = *it;
      off += i * stride;
      stride *= node_->shape[k - 1 - a];
    }
    return node_->value[off];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool rg) {
    node_->requires_grad = rg;
    return *this;
  }

  // Gradient of the last backward pass(es). Leaves that were never reached
  // read as zeros, per the backward contract.
  const std::vector<double>& grad() const {
    if (node_->grad.size() != node_->value.size())
      node_->grad.assign(node_->value.size(), 0.0);
    return node_->grad;
  }
  void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

// ---------------------------------------------------------------------------
// Tape.
// ---------------------------------------------------------------------------

class Tape {
 public:
  static Tape*& active() {
    static thread_local Tape* t = nullptr;
    return t;
  }

  std::size_t record(const NodePtr& n) {
    nodes_.push_back(n);
    return nodes_.size() - 1;
  }
  std::size_t size() const { return nodes_.size(); }

  // Reverse sweep from `output` (a scalar produced on this tape). `stops`
  // blocks all gradient flow into the given nodes and everything upstream of
  // them (exactly: blocked nodes receive no accumulation, hence are never
  // reached, hence their producers never run).
  void backward(const Tensor& output, const std::vector<Tensor>& stops = {}) {
    if (consumed_)
      throw StateError(
          "backward: tape already consumed; call reset() for another pass");
    if (output.numel() != 1)
      throw ContractError(msg("backward: output must be scalar, got ",
                              shape_str(output.shape())));
    Node* out = output.node().get();
    if (out->owner != this)
      throw ContractError("backward: output was not produced on this tape");

    detail::current_pass = ++detail::pass_counter();
    for (const Tensor& s : stops) s.node()->grad_blocked = true;

    out->grad.assign(1, 1.0);
    out->grad_pass = detail::current_pass;
    for (std::size_t i = out->tape_index + 1; i-- > 0;) {
      Node* n = nodes_[i].get();
      if (n->grad_pass == detail::current_pass && n->backward_fn)
        n->backward_fn();
    }

    for (const Tensor& s : stops) s.node()->grad_blocked = false;
    consumed_ = true;
  }

  // Permit another backward pass over the same recorded forward.
  void reset() { consumed_ = false; }

 private:
  std::vector<NodePtr> nodes_;
  bool consumed_ = false;
};

// RAII activation of a fresh tape for the enclosed forward+backward.
struct TapeScope {
  Tape tape;
  Tape* prev;
  TapeScope() : prev(Tape::active()) { Tape::active() = &tape; }
  ~TapeScope() { Tape::active() = prev; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;
};

namespace detail {

// Create an op-output node. Records on the active tape (and arranges for
// `backward` to run) only when some parent wants gradients.
inline Tensor make_op(Shape shape, std::vector<double> value,
                      std::vector<NodePtr> parents,
                      std::function<void(Node*)> make_backward) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  Tape* t = Tape::active();
  bool rg = false;
  for (const auto& p : parents)
    if (p->requires_grad) rg = true;
  if (t != nullptr && rg) {
    n->requires_grad = true;
    n->owner = t;
    n->parents = std::move(parents);
    Node* raw = n.get();
    n->backward_fn = [raw, fn = std::move(make_backward)]() { fn(raw); };
    n->tape_index = t->record(n);
  }
  return Tensor(n);
}

inline void check_same_shape(const Tensor& a, const Tensor& b,
                             const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(msg(op, ": shape mismatch ", shape_str(a.shape()),
                             " vs ", shape_str(b.shape())));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic.
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  std::vector<double> v(a.numel());
  const auto &av = a.data(), &bv = b.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = av[i] + bv[i];
  return detail::make_op(a.shape(), std::move(v), {a.node(), b.node()},
                         [pa = a.node(), pb = b.node()](Node* self) {
                           const auto& g = self->grad;
                           if (double* d = detail::grad_for(pa.get()))
                             for (std::size_t i = 0; i < g.size(); ++i)
                               d[i] += g[i];
                           if (double* d = detail::grad_for(pb.get()))
                             for (std::size_t i = 0; i < g.size(); ++i)
                               d[i] += g[i];
                         });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  std::vector<double> v(a.numel());
  const auto &av = a.data(), &bv = b.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = av[i] - bv[i];
  return detail::make_op(a.shape(), std::move(v), {a.node(), b.node()},
                         [pa = a.node(), pb = b.node()](Node* self) {
                           const auto& g = self->grad;
                           if (double* d = detail::grad_for(pa.get()))
                             for (std::size_t i = 0; i < g.size(); ++i)
                               d[i] += g[i];
                           if (double* d = detail::grad_for(pb.get()))
                             for (std::size_t i = 0; i < g.size(); ++i)
                               d[i] -= g[i];
                         });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  std::vector<double> v(a.numel());
  const auto &av = a.data(), &bv = b.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = av[i] * bv[i];
  return detail::make_op(a.shape(), std::move(v), {a.node(), b.node()},
                         [pa = a.node(), pb = b.node()](Node* self) {
                           const auto& g = self->grad;
                           if (double* d = detail::grad_for(pa.get())) {
                             const auto& bv2 = pb->value;
                             for (std::size_t i = 0; i < g.size(); ++i)
                               d[i] += g[i] * bv2[i];
                           }
                           if (double* d = detail::grad_for(pb.get())) {
                             const auto& av2 = pa->value;
                             for (std::size_t i = 0; i < g.size(); ++i)
                               d[i] += g[i] * av2[i];
                           }
                         });
}

inline Tensor smul(const Tensor& a, double c) {
  std::vector<double> v(a.numel());
  const auto& av = a.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = c * av[i];
  return detail::make_op(a.shape(), std::move(v), {a.node()},
                         [pa = a.node(), c](Node* self) {
                           const auto& g = self->grad;
                           if (double* d = detail::grad_for(pa.get()))
                             for (std::size_t i = 0; i < g.size(); ++i)
                               d[i] += c * g[i];
                         });
}

inline Tensor sadd(const Tensor& a, double c) {
  std::vector<double> v(a.numel());
  const auto& av = a.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = av[i] + c;
  return detail::make_op(a.shape(), std::move(v), {a.node()},
                         [pa = a.node()](Node* self) {
                           const auto& g = self->grad;
                           if (double* d = detail::grad_for(pa.get()))
                             for (std::size_t i = 0; i < g.size(); ++i)
                               d[i] += g[i];
                         });
}

inline Tensor neg(const Tensor& a) { return smul(a, -1.0); }

// Generic elementwise unary op with pointwise derivative computed from the
// input value.
namespace detail {
template <class F, class DF>
Tensor unary(const Tensor& a, F f, DF df) {
  std::vector<double> v(a.numel());
  const auto& av = a.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = f(av[i]);
  return make_op(a.shape(), std::move(v), {a.node()},
                 [pa = a.node(), df](Node* self) {
                   const auto& g = self->grad;
                   if (double* d = grad_for(pa.get())) {
                     const auto& x = pa->value;
                     for (std::size_t i = 0; i < g.size(); ++i)
                       d[i] += g[i] * df(x[i]);
                   }
                 });
}

inline double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}
// softplus(x) = log(1 + e^x), computed as max(x,0) + log1p(e^{-|x|}).
inline double stable_softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}
}  // namespace detail

inline Tensor exp(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return std::exp(x); },
      [](double x) { return std::exp(x); });
}
inline Tensor log(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return std::log(x); },
      [](double x) { return 1.0 / x; });
}
inline Tensor relu(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return x > 0 ? x : 0.0; },
      [](double x) { return x > 0 ? 1.0 : 0.0; });
}
inline Tensor sigmoid(const Tensor& a) {
  return detail::unary(a, detail::stable_sigmoid, [](double x) {
    double s = detail::stable_sigmoid(x);
    return s * (1.0 - s);
  });
}
inline Tensor softplus(const Tensor& a) {
  return detail::unary(a, detail::stable_softplus, detail::stable_sigmoid);
}
// log σ(x) = −softplus(−x); derivative σ(−x).
inline Tensor log_sigmoid(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return -detail::stable_softplus(-x); },
      [](double x) { return detail::stable_sigmoid(-x); });
}
inline Tensor tanh(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return std::tanh(x); },
      [](double x) {
        double t = std::tanh(x);
        return 1.0 - t * t;
      });
}
// Subgradient convention: zero at and outside the clip boundaries.
inline Tensor clip(const Tensor& a, double lo, double hi) {
  return detail::unary(
      a, [lo, hi](double x) { return std::min(std::max(x, lo), hi); },
      [lo, hi](double x) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}
// sign with sign(0)=0; derivative is zero almost everywhere (and we use 0
// everywhere) — callers rely on this being a gradient barrier.
inline Tensor sign(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); },
      [](double) { return 0.0; });
}

// ---------------------------------------------------------------------------
// Linear algebra.
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.dim() != 2 || b.dim() != 2 || a.size(1) != b.size(0))
    throw DimensionError(msg("matmul: incompatible ", shape_str(a.shape()),
                             " x ", shape_str(b.shape())));
  std::size_t m = a.size(0), k = a.size(1), n = b.size(1);
  std::vector<double> v(m * n, 0.0);
  blas::gemm(false, false, m, n, k, 1.0, a.data().data(), b.data().data(), 0.0,
             v.data());
  return detail::make_op(
      {m, n}, std::move(v), {a.node(), b.node()},
      [pa = a.node(), pb = b.node(), m, k, n](Node* self) {
        const double* g = self->grad.data();
        if (double* d = detail::grad_for(pa.get()))
          blas::gemm(false, true, m, k, n, 1.0, g, pb->value.data(), 1.0, d);
        if (double* d = detail::grad_for(pb.get()))
          blas::gemm(true, false, k, n, m, 1.0, pa->value.data(), g, 1.0, d);
      });
}

inline Tensor transpose2d(const Tensor& a) {
  if (a.dim() != 2)
    throw DimensionError(msg("transpose2d: rank-2 required, got ",
                             shape_str(a.shape())));
  std::size_t m = a.size(0), n = a.size(1);
  std::vector<double> v(m * n);
  const auto& av = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) v[j * m + i] = av[i * n + j];
  return detail::make_op({n, m}, std::move(v), {a.node()},
                         [pa = a.node(), m, n](Node* self) {
                           const auto& g = self->grad;
                           if (double* d = detail::grad_for(pa.get()))
                             for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t j = 0; j < n; ++j)
                                 d[i * n + j] += g[j * m + i];
                         });
}

// y = x·Wᵀ + b with x:[N,in], W:[out,in], b:[out].
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.dim() != 2 || w.dim() != 2 || b.dim() != 1 || x.size(1) != w.size(1) ||
      w.size(0) != b.size(0))
    throw DimensionError(msg("linear: incompatible x ", shape_str(x.shape()),
                             ", w ", shape_str(w.shape()), ", b ",
                             shape_str(b.shape())));
  std::size_t n = x.size(0), in = x.size(1), out = w.size(0);
  std::vector<double> v(n * out);
  for (std::size_t i = 0; i < n; ++i)
    std::memcpy(v.data() + i * out, b.data().data(), out * sizeof(double));
  blas::gemm(false, true, n, out, in, 1.0, x.data().data(), w.data().data(),
             1.0, v.data());
  return detail::make_op(
      {n, out}, std::move(v), {x.node(), w.node(), b.node()},
      [px = x.node(), pw = w.node(), pb = b.node(), n, in, out](Node* self) {
        const double* g = self->grad.data();
        if (double* d = detail::grad_for(px.get()))
          blas::gemm(false, false, n, in, out, 1.0, g, pw->value.data(), 1.0,
                     d);
        if (double* d = detail::grad_for(pw.get()))
          blas::gemm(true, false, out, in, n, 1.0, g, px->value.data(), 1.0,
                     d);
        if (double* d = detail::grad_for(pb.get()))
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < out; ++j) d[j] += g[i * out + j];
      });
}

// ---------------------------------------------------------------------------
// Convolution (cross-correlation) and pooling.
// ---------------------------------------------------------------------------

namespace detail {
struct ConvGeom {
  std::size_t B, C, H, W, K, kh, kw, stride, pad, Ho, Wo;
};

inline ConvGeom conv_geometry(const Tensor& x, const Tensor& k,
                              std::size_t stride, std::size_t pad) {
  if (x.dim() != 4 || k.dim() != 4)
    throw DimensionError(msg("conv2d: input ", shape_str(x.shape()),
                             " and kernel ", shape_str(k.shape()),
                             " must be rank 4"));
  ConvGeom g{x.size(0), x.size(1), x.size(2), x.size(3),
             k.size(0), k.size(2), k.size(3), stride, pad, 0, 0};
  if (k.size(1) != g.C)
    throw DimensionError(msg("conv2d: channel mismatch, input C=", g.C,
                             " vs kernel C=", k.size(1)));
  if (g.H + 2 * pad < g.kh || g.W + 2 * pad < g.kw)
    throw DimensionError(
        msg("conv2d: kernel ", g.kh, "x", g.kw, " exceeds padded input ",
            g.H + 2 * pad, "x", g.W + 2 * pad));
  g.Ho = (g.H + 2 * pad - g.kh) / stride + 1;
  g.Wo = (g.W + 2 * pad - g.kw) / stride + 1;
  return g;
}

// cols: one row per output location (b, oy, ox); one column per (c, ky, kx).
inline void im2col(const double* x, const ConvGeom& g, double* cols) {
  const std::size_t patch = g.C * g.kh * g.kw;
  for (std::size_t b = 0; b < g.B; ++b)
    for (std::size_t oy = 0; oy < g.Ho; ++oy)
      for (std::size_t ox = 0; ox < g.Wo; ++ox) {
        double* row = cols + ((b * g.Ho + oy) * g.Wo + ox) * patch;
        for (std::size_t c = 0; c < g.C; ++c)
          for (std::size_t ky = 0; ky < g.kh; ++ky) {
            std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                static_cast<std::ptrdiff_t>(g.pad);
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
              std::ptrdiff_t ix =
                  static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                  static_cast<std::ptrdiff_t>(g.pad);
              double val = 0.0;
              if (iy >= 0 && iy < static_cast<std::ptrdiff_t>(g.H) && ix >= 0 &&
                  ix < static_cast<std::ptrdiff_t>(g.W))
                val = x[((b * g.C + c) * g.H + iy) * g.W + ix];
              row[(c * g.kh + ky) * g.kw + kx] = val;
            }
          }
      }
}

inline void col2im_accum(const double* cols, const ConvGeom& g, double* dx) {
  const std::size_t patch = g.C * g.kh * g.kw;
  for (std::size_t b = 0; b < g.B; ++b)
    for (std::size_t oy = 0; oy < g.Ho; ++oy)
      for (std::size_t ox = 0; ox < g.Wo; ++ox) {
        const double* row = cols + ((b * g.Ho + oy) * g.Wo + ox) * patch;
        for (std::size_t c = 0; c < g.C; ++c)
          for (std::size_t ky = 0; ky < g.kh; ++ky) {
            std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                static_cast<std::ptrdiff_t>(g.pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.H)) continue;
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
              std::ptrdiff_t ix =
                  static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                  static_cast<std::ptrdiff_t>(g.pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.W)) continue;
              dx[((b * g.C + c) * g.H + iy) * g.W + ix] +=
                  row[(c * g.kh + ky) * g.kw + kx];
            }
          }
      }
}
}  // namespace detail

inline Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias,
                     std::size_t stride, std::size_t padding) {
  if (bias.dim() != 1 || bias.size(0) != kernel.size(0))
    throw DimensionError(msg("conv2d: bias ", shape_str(bias.shape()),
                             " must be [K=", kernel.size(0), "]"));
  if (stride == 0) throw ContractError("conv2d: stride must be positive");
  detail::ConvGeom g = detail::conv_geometry(x, kernel, stride, padding);
  const std::size_t rows = g.B * g.Ho * g.Wo, patch = g.C * g.kh * g.kw;

  auto cols = std::make_shared<std::vector<double>>(rows * patch);
  detail::im2col(x.data().data(), g, cols->data());

  // y2[rows, K] = cols · kernelᵀ, then scatter into [B,K,Ho,Wo] layout.
  std::vector<double> y2(rows * g.K);
  const auto& bv = bias.data();
  for (std::size_t r = 0; r < rows; ++r)
    std::memcpy(y2.data() + r * g.K, bv.data(), g.K * sizeof(double));
  blas::gemm(false, true, rows, g.K, patch, 1.0, cols->data(),
             kernel.data().data(), 1.0, y2.data());

  std::vector<double> y(g.B * g.K * g.Ho * g.Wo);
  for (std::size_t b = 0; b < g.B; ++b)
    for (std::size_t oy = 0; oy < g.Ho; ++oy)
      for (std::size_t ox = 0; ox < g.Wo; ++ox) {
        const double* src = y2.data() + ((b * g.Ho + oy) * g.Wo + ox) * g.K;
        for (std::size_t k = 0; k < g.K; ++k)
          y[((b * g.K + k) * g.Ho + oy) * g.Wo + ox] = src[k];
      }

  return detail::make_op(
      {g.B, g.K, g.Ho, g.Wo}, std::move(y),
      {x.node(), kernel.node(), bias.node()},
      [px = x.node(), pk = kernel.node(), pb = bias.node(), g, cols, rows,
       patch](Node* self) {
        // Regroup upstream gradient to [rows, K].
        std::vector<double> g2(rows * g.K);
        const auto& gy = self->grad;
        for (std::size_t b = 0; b < g.B; ++b)
          for (std::size_t k = 0; k < g.K; ++k)
            for (std::size_t oy = 0; oy < g.Ho; ++oy)
              for (std::size_t ox = 0; ox < g.Wo; ++ox)
                g2[((b * g.Ho + oy) * g.Wo + ox) * g.K + k] =
                    gy[((b * g.K + k) * g.Ho + oy) * g.Wo + ox];
        if (double* d = detail::grad_for(pb.get()))
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t k = 0; k < g.K; ++k) d[k] += g2[r * g.K + k];
        if (double* d = detail::grad_for(pk.get()))
          blas::gemm(true, false, g.K, patch, rows, 1.0, g2.data(),
                     cols->data(), 1.0, d);
        if (double* d = detail::grad_for(px.get())) {
          std::vector<double> dcols(rows * patch, 0.0);
          blas::gemm(false, false, rows, patch, g.K, 1.0, g2.data(),
                     pk->value.data(), 0.0, dcols.data());
          detail::col2im_accum(dcols.data(), g, d);
        }
      });
}

// Max pooling with window=stride (non-overlapping), as used by the substitute
// model. Ties resolve to the first (row-major) position.
inline Tensor maxpool2d(const Tensor& x, std::size_t window) {
  if (x.dim() != 4)
    throw DimensionError(msg("maxpool2d: rank-4 required, got ",
                             shape_str(x.shape())));
  if (window == 0 || x.size(2) % window != 0 || x.size(3) % window != 0)
    throw DimensionError(msg("maxpool2d: window ", window,
                             " must evenly divide ", shape_str(x.shape())));
  std::size_t B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
  std::size_t Ho = H / window, Wo = W / window;
  std::vector<double> y(B * C * Ho * Wo);
  auto argmax = std::make_shared<std::vector<std::size_t>>(B * C * Ho * Wo);
  const auto& xv = x.data();
  for (std::size_t bc = 0; bc < B * C; ++bc)
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_idx = 0;
        for (std::size_t ky = 0; ky < window; ++ky)
          for (std::size_t kx = 0; kx < window; ++kx) {
            std::size_t idx =
                (bc * H + oy * window + ky) * W + ox * window + kx;
            if (xv[idx] > best) {
              best = xv[idx];
              best_idx = idx;
            }
          }
        y[(bc * Ho + oy) * Wo + ox] = best;
        (*argmax)[(bc * Ho + oy) * Wo + ox] = best_idx;
      }
  return detail::make_op({B, C, Ho, Wo}, std::move(y), {x.node()},
                         [px = x.node(), argmax](Node* self) {
                           const auto& g = self->grad;
                           if (double* d = detail::grad_for(px.get()))
                             for (std::size_t i = 0; i < g.size(); ++i)
                               d[(*argmax)[i]] += g[i];
                         });
}

// ---------------------------------------------------------------------------
// Batch normalization primitives (2-D feature maps, per-channel statistics).
// ---------------------------------------------------------------------------

// Training mode: normalizes with biased batch statistics computed over
// (B, H, W) per channel; writes those statistics to batch_mean/batch_var so
// the owning layer can update running averages outside the tape.
inline Tensor bn2d_train(const Tensor& x, const Tensor& gamma,
                         const Tensor& beta, double eps,
                         std::vector<double>* batch_mean,
                         std::vector<double>* batch_var) {
  if (x.dim() != 4)
    throw DimensionError(msg("bn2d: rank-4 required, got ",
                             shape_str(x.shape())));
  std::size_t B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
  if (gamma.numel() != C || beta.numel() != C)
    throw DimensionError(msg("bn2d: gamma/beta must be [C=", C, "]"));
  const std::size_t plane = H * W, n = B * plane;
  const auto& xv = x.data();
  std::vector<double> mean(C, 0.0), var(C, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    double s = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
      const double* p = xv.data() + (b * C + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) s += p[i];
    }
    mean[c] = s / static_cast<double>(n);
    double sq = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
      const double* p = xv.data() + (b * C + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        double dlt = p[i] - mean[c];
        sq += dlt * dlt;
      }
    }
    var[c] = sq / static_cast<double>(n);
  }
  if (batch_mean) *batch_mean = mean;
  if (batch_var) *batch_var = var;

  auto xhat = std::make_shared<std::vector<double>>(xv.size());
  auto invstd = std::make_shared<std::vector<double>>(C);
  std::vector<double> y(xv.size());
  const auto &gv = gamma.data(), &bv = beta.data();
  for (std::size_t c = 0; c < C; ++c)
    (*invstd)[c] = 1.0 / std::sqrt(var[c] + eps);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const double* p = xv.data() + (b * C + c) * plane;
      double* xh = xhat->data() + (b * C + c) * plane;
      double* yo = y.data() + (b * C + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        xh[i] = (p[i] - mean[c]) * (*invstd)[c];
        yo[i] = gv[c] * xh[i] + bv[c];
      }
    }

  return detail::make_op(
      {B, C, H, W}, std::move(y), {x.node(), gamma.node(), beta.node()},
      [px = x.node(), pg = gamma.node(), pb = beta.node(), xhat, invstd, B, C,
       plane, n](Node* self) {
        const auto& g = self->grad;
        // Per-channel reductions of g and g·xhat are shared by all three
        // parent gradients.
        std::vector<double> sum_g(C, 0.0), sum_gx(C, 0.0);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t c = 0; c < C; ++c) {
            const double* gp = g.data() + (b * C + c) * plane;
            const double* xh = xhat->data() + (b * C + c) * plane;
            double s = 0.0, sx = 0.0;
            for (std::size_t i = 0; i < plane; ++i) {
              s += gp[i];
              sx += gp[i] * xh[i];
            }
            sum_g[c] += s;
            sum_gx[c] += sx;
          }
        if (double* d = detail::grad_for(pb.get()))
          for (std::size_t c = 0; c < C; ++c) d[c] += sum_g[c];
        if (double* d = detail::grad_for(pg.get()))
          for (std::size_t c = 0; c < C; ++c) d[c] += sum_gx[c];
        if (double* d = detail::grad_for(px.get())) {
          const auto& gv2 = pg->value;
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c) {
              const double* gp = g.data() + (b * C + c) * plane;
              const double* xh = xhat->data() + (b * C + c) * plane;
              double* dp = d + (b * C + c) * plane;
              double coef = gv2[c] * (*invstd)[c];
              for (std::size_t i = 0; i < plane; ++i)
                dp[i] += coef * (gp[i] - inv_n * sum_g[c] -
                                 xh[i] * inv_n * sum_gx[c]);
            }
        }
      });
}

// Eval mode: affine map using frozen running statistics (plain vectors — no
// gradient flows to them); input/scale/shift gradients remain defined.
inline Tensor bn2d_eval(const Tensor& x, const Tensor& gamma,
                        const Tensor& beta, const std::vector<double>& rmean,
                        const std::vector<double>& rvar, double eps) {
  if (x.dim() != 4)
    throw DimensionError(msg("bn2d: rank-4 required, got ",
                             shape_str(x.shape())));
  std::size_t B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
  if (gamma.numel() != C || beta.numel() != C || rmean.size() != C ||
      rvar.size() != C)
    throw DimensionError(msg("bn2d: per-channel vectors must be [C=", C, "]"));
  const std::size_t plane = H * W;
  auto invstd = std::make_shared<std::vector<double>>(C);
  for (std::size_t c = 0; c < C; ++c)
    (*invstd)[c] = 1.0 / std::sqrt(rvar[c] + eps);
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  std::vector<double> y(x.numel());
  const auto &xv = x.data(), &gv = gamma.data(), &bv = beta.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const double* p = xv.data() + (b * C + c) * plane;
      double* xh = xhat->data() + (b * C + c) * plane;
      double* yo = y.data() + (b * C + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        xh[i] = (p[i] - rmean[c]) * (*invstd)[c];
        yo[i] = gv[c] * xh[i] + bv[c];
      }
    }
  return detail::make_op(
      {B, C, H, W}, std::move(y), {x.node(), gamma.node(), beta.node()},
      [px = x.node(), pg = gamma.node(), pb = beta.node(), xhat, invstd, B, C,
       plane](Node* self) {
        const auto& g = self->grad;
        if (double* d = detail::grad_for(pb.get()))
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c) {
              const double* gp = g.data() + (b * C + c) * plane;
              for (std::size_t i = 0; i < plane; ++i) d[c] += gp[i];
            }
        if (double* d = detail::grad_for(pg.get()))
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c) {
              const double* gp = g.data() + (b * C + c) * plane;
              const double* xh = xhat->data() + (b * C + c) * plane;
              for (std::size_t i = 0; i < plane; ++i) d[c] += gp[i] * xh[i];
            }
        if (double* d = detail::grad_for(px.get())) {
          const auto& gv2 = pg->value;
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c) {
              const double* gp = g.data() + (b * C + c) * plane;
              double* dp = d + (b * C + c) * plane;
              double coef = gv2[c] * (*invstd)[c];
              for (std::size_t i = 0; i < plane; ++i) dp[i] += coef * gp[i];
            }
        }
      });
}

// ---------------------------------------------------------------------------
// Shape manipulation.
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape new_shape) {
  if (numel(new_shape) != a.numel())
    throw DimensionError(msg("reshape: ", shape_str(a.shape()), " -> ",
                             shape_str(new_shape), " changes element count"));
  std::vector<double> v = a.data();
  return detail::make_op(std::move(new_shape), std::move(v), {a.node()},
                         [pa = a.node()](Node* self) {
                           const auto& g = self->grad;
                           if (double* d = detail::grad_for(pa.get()))
                             for (std::size_t i = 0; i < g.size(); ++i)
                               d[i] += g[i];
                         });
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no operands");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size())
    throw DimensionError(msg("concat: axis ", axis, " out of range for ",
                             shape_str(s0)));
  Shape out = s0;
  out[axis] = 0;
  for (const Tensor& p : parts) {
    if (p.dim() != s0.size())
      throw DimensionError("concat: rank mismatch between operands");
    for (std::size_t a = 0; a < s0.size(); ++a)
      if (a != axis && p.shape()[a] != s0[a])
        throw DimensionError(msg("concat: axis ", a, " mismatch ",
                                 shape_str(p.shape()), " vs ",
                                 shape_str(s0)));
    out[axis] += p.shape()[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t a = 0; a < axis; ++a) outer *= s0[a];
  for (std::size_t a = axis + 1; a < s0.size(); ++a) inner *= s0[a];

  std::vector<double> v(numel(out));
  std::size_t total_axis = out[axis];
  std::size_t offset = 0;
  std::vector<std::size_t> offsets(parts.size());
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    offsets[pi] = offset;
    std::size_t len = parts[pi].shape()[axis];
    const auto& pv = parts[pi].data();
    for (std::size_t o = 0; o < outer; ++o)
      std::memcpy(v.data() + (o * total_axis + offset) * inner,
                  pv.data() + o * len * inner, len * inner * sizeof(double));
    offset += len;
  }
  std::vector<NodePtr> parents;
  for (const Tensor& p : parts) parents.push_back(p.node());
  auto parents_copy = parents;
  return detail::make_op(
      std::move(out), std::move(v), std::move(parents),
      [parents = std::move(parents_copy), offsets, outer, inner, total_axis,
       axis](Node* self) {
        const auto& g = self->grad;
        for (std::size_t pi = 0; pi < parents.size(); ++pi) {
          Node* p = parents[pi].get();
          std::size_t len = p->shape[axis];
          if (double* d = detail::grad_for(p))
            for (std::size_t o = 0; o < outer; ++o) {
              const double* src =
                  g.data() + (o * total_axis + offsets[pi]) * inner;
              double* dst = d + o * len * inner;
              for (std::size_t i = 0; i < len * inner; ++i) dst[i] += src[i];
            }
        }
      });
}

inline Tensor narrow(const Tensor& a, std::size_t axis, std::size_t start,
                     std::size_t len) {
  const Shape& s = a.shape();
  if (axis >= s.size() || start + len > s[axis])
    throw DimensionError(msg("narrow: [", start, ",", start + len,
                             ") out of range on axis ", axis, " of ",
                             shape_str(s)));
  Shape out = s;
  out[axis] = len;
  std::size_t outer = 1, inner = 1;
  for (std::size_t x = 0; x < axis; ++x) outer *= s[x];
  for (std::size_t x = axis + 1; x < s.size(); ++x) inner *= s[x];
  std::vector<double> v(numel(out));
  const auto& av = a.data();
  for (std::size_t o = 0; o < outer; ++o)
    std::memcpy(v.data() + o * len * inner,
                av.data() + (o * s[axis] + start) * inner,
                len * inner * sizeof(double));
  std::size_t full_axis = s[axis];
  return detail::make_op(
      std::move(out), std::move(v), {a.node()},
      [pa = a.node(), outer, inner, full_axis, start, len](Node* self) {
        const auto& g = self->grad;
        if (double* d = detail::grad_for(pa.get()))
          for (std::size_t o = 0; o < outer; ++o) {
            const double* src = g.data() + o * len * inner;
            double* dst = d + (o * full_axis + start) * inner;
            for (std::size_t i = 0; i < len * inner; ++i) dst[i] += src[i];
          }
      });
}

// Repeat each leading-axis slice `times` times along a new second axis:
// [n, rest...] -> [n, times, rest...].
inline Tensor broadcast_repeat(const Tensor& a, std::size_t times) {
  if (a.dim() < 1 || times == 0)
    throw ContractError("broadcast_repeat: rank >= 1 and times >= 1 required");
  const Shape& s = a.shape();
  std::size_t n = s[0], inner = a.numel() / n;
  Shape out;
  out.push_back(n);
  out.push_back(times);
  for (std::size_t x = 1; x < s.size(); ++x) out.push_back(s[x]);
  std::vector<double> v(n * times * inner);
  const auto& av = a.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t t = 0; t < times; ++t)
      std::memcpy(v.data() + (i * times + t) * inner, av.data() + i * inner,
                  inner * sizeof(double));
  return detail::make_op(std::move(out), std::move(v), {a.node()},
                         [pa = a.node(), n, times, inner](Node* self) {
                           const auto& g = self->grad;
                           if (double* d = detail::grad_for(pa.get()))
                             for (std::size_t i = 0; i < n; ++i)
                               for (std::size_t t = 0; t < times; ++t) {
                                 const double* src =
                                     g.data() + (i * times + t) * inner;
                                 double* dst = d + i * inner;
                                 for (std::size_t k = 0; k < inner; ++k)
                                   dst[k] += src[k];
                               }
                         });
}

// rows (i, j) of the output = a_i + c_j, flattened to [n*m, d]. This is the
// pair-grid expansion used when a per-sample vector meets a per-hypothesis
// vector; algebraically identical to concat-then-linear of the two halves.
inline Tensor cross_add(const Tensor& a, const Tensor& c) {
  if (a.dim() != 2 || c.dim() != 2 || a.size(1) != c.size(1))
    throw DimensionError(msg("cross_add: need [n,d] and [m,d], got ",
                             shape_str(a.shape()), " and ",
                             shape_str(c.shape())));
  std::size_t n = a.size(0), m = c.size(0), d = a.size(1);
  std::vector<double> v(n * m * d);
  const auto &av = a.data(), &cv = c.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      const double* pa = av.data() + i * d;
      const double* pc = cv.data() + j * d;
      double* o = v.data() + (i * m + j) * d;
      for (std::size_t k = 0; k < d; ++k) o[k] = pa[k] + pc[k];
    }
  return detail::make_op(
      {n * m, d}, std::move(v), {a.node(), c.node()},
      [pa = a.node(), pc = c.node(), n, m, d](Node* self) {
        const auto& g = self->grad;
        if (double* da = detail::grad_for(pa.get()))
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) {
              const double* src = g.data() + (i * m + j) * d;
              double* dst = da + i * d;
              for (std::size_t k = 0; k < d; ++k) dst[k] += src[k];
            }
        if (double* dc = detail::grad_for(pc.get()))
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) {
              const double* src = g.data() + (i * m + j) * d;
              double* dst = dc + j * d;
              for (std::size_t k = 0; k < d; ++k) dst[k] += src[k];
            }
      });
}

// ---------------------------------------------------------------------------
// Reductions and row-indexed ops.
// ---------------------------------------------------------------------------

inline Tensor sum_all(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  return detail::make_op(Shape{}, {s}, {a.node()},
                         [pa = a.node()](Node* self) {
                           double g = self->grad[0];
                           if (double* d = detail::grad_for(pa.get()))
                             for (std::size_t i = 0; i < pa->value.size(); ++i)
                               d[i] += g;
                         });
}

inline Tensor mean_all(const Tensor& a) {
  if (a.numel() == 0) throw ContractError("mean_all: empty tensor");
  return smul(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

// Stable log-sum-exp. 1-D input reduces to a scalar; 2-D input reduces the
// given axis (0 or 1).
inline Tensor logsumexp(const Tensor& a, std::size_t axis) {
  if (a.dim() == 0 || axis >= a.dim())
    throw DomainError(msg("logsumexp: axis ", axis, " invalid for ",
                          shape_str(a.shape())));
  if (a.shape()[axis] == 0)
    throw DomainError("logsumexp: reduction over an empty axis");
  std::size_t n, m;
  bool rows;  // reduce within rows (axis 1) or within columns (axis 0)
  if (a.dim() == 1) {
    n = 1;
    m = a.size(0);
    rows = true;
  } else if (a.dim() == 2) {
    n = a.size(0);
    m = a.size(1);
    rows = (axis == 1);
  } else {
    throw DimensionError("logsumexp: rank must be 1 or 2");
  }
  std::size_t slices = rows ? n : m;
  std::size_t len = rows ? m : n;
  const auto& av = a.data();
  auto idx = [rows, m](std::size_t s, std::size_t i) {
    return rows ? s * m + i : i * m + s;
  };
  std::vector<double> out(slices);
  auto soft = std::make_shared<std::vector<double>>(a.numel());
  for (std::size_t s = 0; s < slices; ++s) {
    double mx = av[idx(s, 0)];
    for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, av[idx(s, i)]);
    double sum = 0.0;
    for (std::size_t i = 0; i < len; ++i) sum += std::exp(av[idx(s, i)] - mx);
    out[s] = mx + std::log(sum);
    for (std::size_t i = 0; i < len; ++i)
      (*soft)[idx(s, i)] = std::exp(av[idx(s, i)] - mx) / sum;
  }
  Shape oshape = (a.dim() == 1) ? Shape{} : Shape{slices};
  return detail::make_op(
      std::move(oshape), std::move(out), {a.node()},
      [pa = a.node(), soft, slices, len, idx](Node* self) {
        const auto& g = self->grad;
        if (double* d = detail::grad_for(pa.get()))
          for (std::size_t s = 0; s < slices; ++s)
            for (std::size_t i = 0; i < len; ++i)
              d[idx(s, i)] += g[s] * (*soft)[idx(s, i)];
      });
}

// Row-wise maximum of a [n,m] tensor; gradient routes to the first argmax.
inline Tensor max_rows(const Tensor& a) {
  if (a.dim() != 2)
    throw DimensionError(msg("max_rows: rank-2 required, got ",
                             shape_str(a.shape())));
  std::size_t n = a.size(0), m = a.size(1);
  if (m == 0) throw DomainError("max_rows: empty rows");
  std::vector<double> out(n);
  auto arg = std::make_shared<std::vector<std::size_t>>(n);
  const auto& av = a.data();
  for (std::size_t i = 0; i < n; ++i) {
    double best = av[i * m];
    std::size_t bj = 0;
    for (std::size_t j = 1; j < m; ++j)
      if (av[i * m + j] > best) {
        best = av[i * m + j];
        bj = j;
      }
    out[i] = best;
    (*arg)[i] = bj;
  }
  return detail::make_op({n}, std::move(out), {a.node()},
                         [pa = a.node(), arg, m](Node* self) {
                           const auto& g = self->grad;
                           if (double* d = detail::grad_for(pa.get()))
                             for (std::size_t i = 0; i < g.size(); ++i)
                               d[i * m + (*arg)[i]] += g[i];
                         });
}

// out[i] = a[i, idx[i]] — extracts the true-label score from a score grid.
inline Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& idx) {
  if (a.dim() != 2)
    throw DimensionError(msg("gather_rows: rank-2 required, got ",
                             shape_str(a.shape())));
  std::size_t n = a.size(0), m = a.size(1);
  if (idx.size() != n)
    throw DimensionError(msg("gather_rows: ", idx.size(), " indices for ", n,
                             " rows"));
  std::vector<double> out(n);
  const auto& av = a.data();
  for (std::size_t i = 0; i < n; ++i) {
    if (idx[i] >= m)
      throw ContractError(msg("gather_rows: index ", idx[i], " >= ", m));
    out[i] = av[i * m + idx[i]];
  }
  return detail::make_op({n}, std::move(out), {a.node()},
                         [pa = a.node(), idx, m](Node* self) {
                           const auto& g = self->grad;
                           if (double* d = detail::grad_for(pa.get()))
                             for (std::size_t i = 0; i < g.size(); ++i)
                               d[i * m + idx[i]] += g[i];
                         });
}

// Selects whole rows of a [n,d] tensor (duplicates allowed).
inline Tensor select_rows(const Tensor& a, const std::vector<std::size_t>& idx) {
  if (a.dim() != 2)
    throw DimensionError(msg("select_rows: rank-2 required, got ",
                             shape_str(a.shape())));
  std::size_t n = a.size(0), d = a.size(1);
  std::vector<double> out(idx.size() * d);
  const auto& av = a.data();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= n)
      throw ContractError(msg("select_rows: index ", idx[i], " >= ", n));
    std::memcpy(out.data() + i * d, av.data() + idx[i] * d,
                d * sizeof(double));
  }
  std::size_t k = idx.size();
  return detail::make_op({k, d}, std::move(out), {a.node()},
                         [pa = a.node(), idx, d](Node* self) {
                           const auto& g = self->grad;
                           if (double* dst = detail::grad_for(pa.get()))
                             for (std::size_t i = 0; i < idx.size(); ++i) {
                               const double* src = g.data() + i * d;
                               double* row = dst + idx[i] * d;
                               for (std::size_t j = 0; j < d; ++j)
                                 row[j] += src[j];
                             }
                         });
}

// out[i,j] = a[i,j] - v[i]: subtract a per-row scalar (e.g. a row-wise
// log-partition) from every entry of the row.
inline Tensor sub_colvec(const Tensor& a, const Tensor& v) {
  if (a.dim() != 2 || v.dim() != 1 || v.size(0) != a.size(0))
    throw DimensionError(msg("sub_colvec: need [n,m] and [n], got ",
                             shape_str(a.shape()), " and ",
                             shape_str(v.shape())));
  std::size_t n = a.size(0), m = a.size(1);
  std::vector<double> out(n * m);
  const auto &av = a.data(), &vv = v.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = av[i * m + j] - vv[i];
  return detail::make_op(
      {n, m}, std::move(out), {a.node(), v.node()},
      [pa = a.node(), pv = v.node(), n, m](Node* self) {
        const auto& g = self->grad;
        if (double* d = detail::grad_for(pa.get()))
          for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
        if (double* d = detail::grad_for(pv.get()))
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) d[i] -= g[i * m + j];
      });
}

// Softmax over rows, as exp(a - logsumexp_row) — stable and differentiable
// through the composition.
inline Tensor softmax_rows(const Tensor& a) {
  return exp(sub_colvec(a, logsumexp(a, 1)));
}

// Squared Euclidean distances between row sets: out[i,j] = ||a_i - b_j||².
// Computed with one gemm; negatives from cancellation clamp to 0, and when
// both operands are the same node the diagonal is exactly 0.
inline Tensor pairwise_sqdist(const Tensor& a, const Tensor& b) {
  if (a.dim() != 2 || b.dim() != 2 || a.size(1) != b.size(1))
    throw DimensionError(msg("pairwise_sqdist: need [n,d] and [m,d], got ",
                             shape_str(a.shape()), " and ",
                             shape_str(b.shape())));
  std::size_t n = a.size(0), m = b.size(0), d = a.size(1);
  const auto &av = a.data(), &bv = b.data();
  std::vector<double> ra(n, 0.0), rb(m, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < d; ++k) ra[i] += av[i * d + k] * av[i * d + k];
  for (std::size_t j = 0; j < m; ++j)
    for (std::size_t k = 0; k < d; ++k) rb[j] += bv[j * d + k] * bv[j * d + k];
  std::vector<double> out(n * m, 0.0);
  blas::gemm(false, true, n, m, d, -2.0, av.data(), bv.data(), 0.0,
             out.data());
  bool same = (a.node() == b.node());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double v = out[i * m + j] + ra[i] + rb[j];
      out[i * m + j] = (same && i == j) ? 0.0 : std::max(v, 0.0);
    }
  return detail::make_op(
      {n, m}, std::move(out), {a.node(), b.node()},
      [pa = a.node(), pb = b.node(), n, m, d](Node* self) {
        const auto& g = self->grad;
        const auto &av2 = pa->value, &bv2 = pb->value;
        // d/da_i = Σ_j g_ij · 2(a_i − b_j); row/column sums feed the diagonal
        // terms and one gemm feeds the cross terms.
        std::vector<double> grow(n, 0.0), gcol(m, 0.0);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j) {
            grow[i] += g[i * m + j];
            gcol[j] += g[i * m + j];
          }
        if (double* da = detail::grad_for(pa.get())) {
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = 0; k < d; ++k)
              da[i * d + k] += 2.0 * grow[i] * av2[i * d + k];
          blas::gemm(false, false, n, d, m, -2.0, g.data(), bv2.data(), 1.0,
                     da);
        }
        if (double* db = detail::grad_for(pb.get())) {
          for (std::size_t j = 0; j < m; ++j)
            for (std::size_t k = 0; k < d; ++k)
              db[j * d + k] += 2.0 * gcol[j] * bv2[j * d + k];
          blas::gemm(true, false, m, d, n, -2.0, g.data(), av2.data(), 1.0,
                     db);
        }
      });
}

}  // namespace hynet
