#pragma once

// Input-space adversarial attacks against any scoring model: fast single-step
// gradient sign, iterated projected gradient with random start and
// best-iterate selection, and an L2 minimum-distortion attack with a tanh box
// reparameterization and per-sample constant search. Crafting differentiates
// the score rows with model parameters frozen, so parameter gradients are
// never computed or touched.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "hynet/common.hpp"
#include "hynet/model.hpp"
#include "hynet/nn.hpp"
#include "hynet/objectives.hpp"
#include "hynet/tensor.hpp"

namespace hynet {

// Puts the model in inference mode with frozen parameters for the guard's
// lifetime; parameters are re-marked trainable on exit.
class FreezeGuard {
 public:
  explicit FreezeGuard(ScoringModel& model) : model_(model) {
    model_.set_train(false);
    model_.set_trainable(false);
  }
  ~FreezeGuard() { model_.set_trainable(true); }
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  ScoringModel& model_;
};

// Mean softmax cross-entropy of the model's score rows against `labels`,
// recorded on the active tape (callers backpropagate it to the input leaf).
inline Tensor attack_loss(ScoringModel& model, const Tensor& x,
                          const std::vector<std::size_t>& labels) {
  Tensor scores = model.score_rows(x);
  return eb_objective(PairScores::from_grid(scores, labels));
}

// Per-row softmax cross-entropy computed from score values alone.
inline std::vector<double> ce_rows(const Tensor& scores,
                                   const std::vector<std::size_t>& labels) {
  std::size_t n = scores.size(0), m = scores.size(1);
  if (labels.size() != n)
    throw DimensionError(msg("ce_rows: ", labels.size(), " labels for ", n,
                             " rows"));
  const auto& v = scores.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = v.data() + i * m;
    double hi = *std::max_element(row, row + m);
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) s += std::exp(row[j] - hi);
    out[i] = hi + std::log(s) - row[labels[i]];
  }
  return out;
}

namespace detail {

// Gradient of the mean cross-entropy w.r.t. the input, plus the per-row loss
// values at that input. Parameters must already be frozen by the caller.
inline std::vector<double> input_gradient(
    ScoringModel& model, const Shape& shape, const std::vector<double>& x,
    const std::vector<std::size_t>& labels, std::vector<double>* row_losses) {
  Tensor leaf = Tensor::from(shape, x);
  leaf.set_requires_grad(true);
  TapeScope scope;
  Tensor scores = model.score_rows(leaf);
  if (row_losses) *row_losses = ce_rows(scores, labels);
  Tensor loss = eb_objective(PairScores::from_grid(scores, labels));
  if (!std::isfinite(loss.item()))
    throw NumericError("input_gradient: non-finite crafting loss");
  scope.tape.backward(loss);
  return leaf.grad();
}

inline std::vector<double> row_losses_plain(
    ScoringModel& model, const Shape& shape, const std::vector<double>& x,
    const std::vector<std::size_t>& labels) {
  Tensor t = Tensor::from(shape, x);
  Tensor scores = model.score_rows(t);
  return ce_rows(scores, labels);
}

inline double sgn(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

}  // namespace detail

// Verifies an adversarial batch stays inside the pixel box [0, 1].
inline void check_box(const Tensor& x_adv) {
  for (double v : x_adv.data())
    if (!(v >= 0.0 && v <= 1.0))
      throw ContractError(msg("adversarial example leaves [0,1] box: ", v));
}

// Verifies max-norm distance from the clean batch never exceeds eps.
inline void check_linf(const Tensor& x_adv, const Tensor& x, double eps) {
  if (x_adv.shape() != x.shape())
    throw DimensionError("check_linf: shape mismatch");
  const auto& a = x_adv.data();
  const auto& b = x.data();
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::abs(a[i] - b[i]) > eps + 1e-9)
      throw ContractError(msg("adversarial example exceeds max-norm budget ",
                              eps, ": |delta|=", std::abs(a[i] - b[i])));
}

// Single-step gradient-sign attack: x + eps * sign(dL/dx), clipped to [0,1].
// eps = 0 is the identity (the zero step leaves every pixel where it was).
inline Tensor fgsm(ScoringModel& model, const Tensor& x,
                   const std::vector<std::size_t>& labels, double eps) {
  if (!(eps >= 0.0))
    throw ContractError(msg("fgsm: eps must be >= 0, got ", eps));
  FreezeGuard fz(model);
  std::vector<double> g =
      detail::input_gradient(model, x.shape(), x.data(), labels, nullptr);
  std::vector<double> out(x.numel());
  const auto& xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = std::min(1.0, std::max(0.0, xv[i] + eps * detail::sgn(g[i])));
  Tensor adv = Tensor::from(x.shape(), std::move(out));
  check_box(adv);
  check_linf(adv, x, eps);
  return adv;
}

// Iterated gradient-sign attack inside the eps max-norm ball. Optionally
// starts from a uniform random point in the ball; after every step the
// iterate is projected back into the ball and the [0,1] box. Of the iterates
// visited after each step, the one with the highest per-sample loss is
// returned (evaluated sample by sample). With steps=1, no random start, and
// step_size=eps this reproduces the single-step attack exactly.
inline Tensor pgd(ScoringModel& model, const Tensor& x,
                  const std::vector<std::size_t>& labels, double eps,
                  std::size_t steps, double step_size, bool random_start,
                  std::uint64_t seed) {
  if (!(eps >= 0.0))
    throw ContractError(msg("pgd: eps must be >= 0, got ", eps));
  if (steps == 0) throw ContractError("pgd: steps must be >= 1");
  if (!(step_size > 0.0))
    throw ContractError(msg("pgd: step size must be > 0, got ", step_size));
  FreezeGuard fz(model);

  const auto& x0 = x.data();
  std::size_t n = x.size(0), pix = x.numel() / n;
  std::vector<double> cur = x0;
  if (random_start) {
    Rng rng(seed);
    for (std::size_t i = 0; i < cur.size(); ++i) {
      double v = x0[i] + (rng.uniform() * 2.0 - 1.0) * eps;
      cur[i] = std::min(1.0, std::max(0.0, v));
    }
  }

  std::vector<double> best(cur.size());
  std::vector<double> best_loss(n, -std::numeric_limits<double>::infinity());
  auto consider = [&](const std::vector<double>& cand,
                      const std::vector<double>& losses) {
    for (std::size_t i = 0; i < n; ++i)
      if (losses[i] > best_loss[i]) {
        best_loss[i] = losses[i];
        std::copy(cand.begin() + i * pix, cand.begin() + (i + 1) * pix,
                  best.begin() + i * pix);
      }
  };

  std::vector<double> losses;
  for (std::size_t t = 0; t < steps; ++t) {
    std::vector<double> g =
        detail::input_gradient(model, x.shape(), cur, labels, &losses);
    if (t > 0) consider(cur, losses);
    for (std::size_t i = 0; i < cur.size(); ++i) {
      double v = cur[i] + step_size * detail::sgn(g[i]);
      v = std::min(std::max(v, x0[i] - eps), x0[i] + eps);
      cur[i] = std::min(1.0, std::max(0.0, v));
    }
  }
  losses = detail::row_losses_plain(model, x.shape(), cur, labels);
  consider(cur, losses);

  Tensor adv = Tensor::from(x.shape(), std::move(best));
  check_box(adv);
  check_linf(adv, x, eps);
  return adv;
}

struct CwConfig {
  double initial_c = 0.001;       // starting hinge weight per sample
  std::size_t search_rounds = 6;  // binary-search rounds over c
  std::size_t max_iters = 150;    // optimizer iterations per round
  double lr = 0.01;
  double kappa = 0.0;             // confidence margin in the hinge
  bool early_abort = true;        // stop a round once loss plateaus
};

struct CwOutcome {
  Tensor x_adv;                    // best adversarial rows (clean on failure)
  std::vector<double> distortion;  // per-sample L2; 0 if already wrong,
                                   // +inf if no adversarial point was found
  std::size_t failure_count = 0;
};

// L2 minimum-distortion attack: optimize w with x' = (tanh(w)+1)/2 (so the
// box constraint holds by construction), minimizing
//   ||x' - x||^2 + c * max(score_true(x') - max_other(x') + kappa, 0)
// per sample, with c found by bisection between "too weak to flip" and
// "flips"; each round restarts from the clean image.
inline CwOutcome cw_l2(ScoringModel& model, const Tensor& x,
                       const std::vector<std::size_t>& labels,
                       const CwConfig& cfg = {}) {
  if (!(cfg.initial_c > 0.0) || cfg.search_rounds == 0 || cfg.max_iters == 0)
    throw ContractError("cw_l2: invalid search configuration");
  FreezeGuard fz(model);

  std::size_t n = x.size(0), pix = x.numel() / n, m = model.num_classes();
  if (labels.size() != n)
    throw DimensionError(msg("cw_l2: ", labels.size(), " labels for ", n,
                             " samples"));
  const double inf = std::numeric_limits<double>::infinity();
  const auto& xv = x.data();

  // Samples the model already misclassifies need no perturbation.
  std::vector<std::size_t> pred0 = model.predict(x);
  std::vector<char> active(n);
  for (std::size_t i = 0; i < n; ++i) active[i] = pred0[i] == labels[i];

  // Initial point of the reparameterization: w0 = atanh(2x-1), nudged off
  // the box boundary where atanh diverges.
  std::vector<double> w0(x.numel());
  for (std::size_t i = 0; i < w0.size(); ++i)
    w0[i] = std::atanh((2.0 * xv[i] - 1.0) * (1.0 - 1e-6));

  // Hinge mask: -inf-like offset on the true-label column so max_rows picks
  // the strongest other label.
  std::vector<double> maskv(n * m, 0.0);
  for (std::size_t i = 0; i < n; ++i) maskv[i * m + labels[i]] = -1e30;
  Tensor mask = Tensor::from({n, m}, std::move(maskv));

  std::vector<double> c(n, cfg.initial_c), c_lo(n, 0.0), c_hi(n, inf);
  std::vector<double> best_d(n, inf);
  std::vector<double> best_rows = xv;  // fallback: clean image
  for (std::size_t i = 0; i < n; ++i)
    if (!active[i]) best_d[i] = 0.0;

  for (std::size_t round = 0; round < cfg.search_rounds; ++round) {
    Parameter w("cw_w", Tensor::from(x.shape(), w0));
    std::vector<char> flipped(n, 0);
    Tensor c_vec = Tensor::from({n}, c);
    double plateau = inf;

    for (std::size_t it = 0; it < cfg.max_iters; ++it) {
      w.value.zero_grad();
      double total;
      {
        TapeScope scope;
        Tensor xw = smul(sadd(tanh(w.value), 1.0), 0.5);
        Tensor diff = reshape(sub(xw, x), {n, pix});
        Tensor d_vec =
            reshape(matmul(mul(diff, diff), Tensor::full({pix, 1}, 1.0)), {n});
        Tensor scores = model.score_rows(xw);
        Tensor margin = sub(gather_rows(scores, labels),
                            max_rows(add(scores, mask)));
        Tensor hinge = relu(sadd(margin, cfg.kappa));
        Tensor loss = sum_all(add(d_vec, mul(hinge, c_vec)));
        total = loss.item();
        if (!std::isfinite(total))
          throw NumericError("cw_l2: non-finite crafting loss");

        // Track per-sample bests at the current iterate before stepping.
        const auto& sv = scores.data();
        const auto& dv = d_vec.data();
        const auto& xwv = xw.data();
        for (std::size_t i = 0; i < n; ++i) {
          if (!active[i]) continue;
          const double* row = sv.data() + i * m;
          std::size_t arg = std::max_element(row, row + m) - row;
          if (arg == labels[i]) continue;
          flipped[i] = 1;
          if (dv[i] < best_d[i]) {
            best_d[i] = dv[i];
            std::copy(xwv.begin() + i * pix, xwv.begin() + (i + 1) * pix,
                      best_rows.begin() + i * pix);
          }
        }
        scope.tape.backward(loss);
      }
      adam_step({&w}, cfg.lr);

      if (cfg.early_abort && it % 10 == 9) {
        if (total > plateau * 0.9999) break;
        plateau = total;
      }
    }

    for (std::size_t i = 0; i < n; ++i) {
      if (!active[i]) continue;
      if (flipped[i]) {
        c_hi[i] = std::min(c_hi[i], c[i]);
        c[i] = 0.5 * (c_lo[i] + c_hi[i]);
      } else {
        c_lo[i] = std::max(c_lo[i], c[i]);
        c[i] = std::isinf(c_hi[i]) ? c[i] * 10.0 : 0.5 * (c_lo[i] + c_hi[i]);
      }
    }
  }

  CwOutcome out;
  out.distortion.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.distortion[i] = std::isinf(best_d[i]) ? inf : std::sqrt(best_d[i]);
    if (active[i] && std::isinf(best_d[i])) ++out.failure_count;
  }
  out.x_adv = Tensor::from(x.shape(), std::move(best_rows));
  check_box(out.x_adv);
  return out;
}

// Accuracy of `model` on a crafted batch against the true labels.
inline double accuracy_on(ScoringModel& model, const Tensor& x,
                          const std::vector<std::size_t>& labels) {
  model.set_train(false);
  std::vector<std::size_t> pred = model.predict(x);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (pred[i] == labels[i]) ++correct;
  return double(correct) / double(pred.size());
}

}  // namespace hynet
