#pragma once

// Batch estimators of the variational classification objectives (JS, DV,
// energy-based) and cross-entropy, plus the exact discrete-distribution
// divergence oracle used by tests.
//
// Conventions. Scores T(x_i, y_j) for a batch are held as PairScores: the
// joint vector T(x_i, ỹ_i) (true pairings) and the full B×M marginal grid
// (every label hypothesis per sample; under uniform label sampling this grid
// is the marginal-pair sample). Each *_objective returns a loss to minimize;
// the matching *_estimate maps an achieved loss value to the divergence
// lower-bound estimate it certifies:
//   JS:  loss = −(E_J[log σ(T)] + E_M[log(1−σ(T))]);  JS ≥ (−loss + 2ln2)/2
//   DV:  loss = −(E_J[T] − log E_M[e^T]);             KL ≥ −loss
//   EB:  loss = mean_i(logsumexp_j T_ij − T_iỹᵢ);     MI ≥ ln M − loss
// EB is algebraically the softmax cross-entropy over score rows.

#include <atomic>
#include <cmath>
#include <functional>
#include <vector>

#include "hynet/common.hpp"
#include "hynet/tensor.hpp"

namespace hynet {

struct PairScores {
  Tensor joint;     // [B]   — T at the true label
  Tensor marginal;  // [B,M] — T at every label hypothesis

  // Assembles the pair from a score grid: the joint is a gather at the true
  // labels, so joint_i == marginal_{i,ỹ_i} by construction.
  static PairScores from_grid(const Tensor& scores,
                              const std::vector<std::size_t>& labels) {
    return {gather_rows(scores, labels), scores};
  }
};

namespace detail {
inline void check_scores_finite(const PairScores& s, const char* who) {
  if (!all_finite(s.joint.data()) || !all_finite(s.marginal.data()))
    throw NumericError(msg(who, ": non-finite score input"));
}
}  // namespace detail

// ---------------------------------------------------------------------------
// JS (binary-discriminator form). Minimizing the loss maximizes
// E_J[log σ(T)] + E_M[log(1−σ(T))], whose supremum is 2·JS − 2ln2.
// ---------------------------------------------------------------------------

inline Tensor js_objective(const PairScores& s) {
  detail::check_scores_finite(s, "js_objective");
  // −log σ(t) = softplus(−t);  −log(1−σ(t)) = softplus(t).
  Tensor joint_term = mean_all(softplus(neg(s.joint)));
  Tensor marginal_term = mean_all(softplus(s.marginal));
  return add(joint_term, marginal_term);
}

inline double js_estimate(double js_loss) {
  constexpr double ln2 = 0.6931471805599453;
  double est = (-js_loss + 2.0 * ln2) / 2.0;
  return std::min(std::max(est, 0.0), ln2);
}

// ---------------------------------------------------------------------------
// DV (Donsker–Varadhan). loss = −mean(joint) + log mean exp(marginal), the
// log-mean-exp pooled over the whole grid.
// ---------------------------------------------------------------------------

inline Tensor dv_objective(const PairScores& s) {
  detail::check_scores_finite(s, "dv_objective");
  Tensor joint_term = mean_all(s.joint);
  Tensor flat = reshape(s.marginal, {s.marginal.numel()});
  Tensor lme = sadd(logsumexp(flat, 0),
                    -std::log(static_cast<double>(s.marginal.numel())));
  return sub(lme, joint_term);
}

inline double dv_estimate(double dv_loss) { return -dv_loss; }

// ---------------------------------------------------------------------------
// EB (energy-based / per-row log-partition). Exactly softmax cross-entropy
// over the score rows at the true label.
// ---------------------------------------------------------------------------

inline Tensor eb_objective(const PairScores& s) {
  detail::check_scores_finite(s, "eb_objective");
  Tensor row_lse = logsumexp(s.marginal, 1);  // [B]
  return mean_all(sub(row_lse, s.joint));
}

// The uniform-marginal constant ln M re-enters only in the reported estimate.
inline double eb_estimate(double eb_loss, std::size_t num_classes) {
  return std::log(static_cast<double>(num_classes)) - eb_loss;
}

// ---------------------------------------------------------------------------
// Cross-entropy on probability rows.
// ---------------------------------------------------------------------------

// Count of probability clamps applied at the true label (each one signals a
// degenerate probability from the caller).
inline std::atomic<std::uint64_t>& ce_clamp_warnings() {
  static std::atomic<std::uint64_t> n{0};
  return n;
}

inline Tensor ce_objective(const Tensor& probs,
                           const std::vector<std::size_t>& labels) {
  if (probs.dim() != 2)
    throw DimensionError(msg("ce_objective: probs must be [B,M], got ",
                             shape_str(probs.shape())));
  std::size_t m = probs.size(1);
  const auto& pv = probs.data();
  for (std::size_t i = 0; i < probs.size(0); ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < m; ++j) row += pv[i * m + j];
    if (std::abs(row - 1.0) > 1e-6)
      throw ContractError(msg("ce_objective: row ", i, " sums to ", row,
                              ", not 1"));
    if (pv[i * m + labels[i]] < 1e-12) ce_clamp_warnings() += 1;
  }
  Tensor picked = gather_rows(probs, labels);
  return neg(mean_all(log(clip(picked, 1e-12, 1.0))));
}

// ---------------------------------------------------------------------------
// Exact discrete divergence oracle: D_f(P_joint ‖ P_x⊗P_y) by direct
// summation, in the convention D_f(P‖Q) = E_Q[f(dP/dQ)] with f convex and
// f(1) = 0. Cells with zero product-marginal mass carry no Q-weight and are
// skipped; if such a cell holds joint mass the ratio is undefined.
// ---------------------------------------------------------------------------

struct DiscreteJoint {
  std::vector<std::vector<double>> p;  // [Mx][My], entries ≥ 0, sum 1

  void validate() const {
    double total = 0.0;
    for (const auto& row : p)
      for (double v : row) {
        if (v < 0.0) throw ContractError("DiscreteJoint: negative entry");
        total += v;
      }
    if (std::abs(total - 1.0) > 1e-12)
      throw ContractError(msg("DiscreteJoint: entries sum to ", total));
  }
  std::vector<double> marginal_x() const {
    std::vector<double> mx(p.size(), 0.0);
    for (std::size_t i = 0; i < p.size(); ++i)
      for (double v : p[i]) mx[i] += v;
    return mx;
  }
  std::vector<double> marginal_y() const {
    std::vector<double> my(p[0].size(), 0.0);
    for (const auto& row : p)
      for (std::size_t j = 0; j < row.size(); ++j) my[j] += row[j];
    return my;
  }
};

// Standard generators (convex, f(1)=0, extended by continuity at u=0).
inline double f_kl(double u) { return u <= 0.0 ? 0.0 : u * std::log(u); }
inline double f_js(double u) {
  constexpr double ln2 = 0.6931471805599453;
  if (u <= 0.0) return 0.5 * ln2;  // limit of ½(u ln u − (1+u) ln((1+u)/2))
  return 0.5 * (u * std::log(u) - (1.0 + u) * std::log((1.0 + u) / 2.0));
}

inline double discrete_divergence_oracle(const DiscreteJoint& joint,
                                         const std::function<double(double)>& f) {
  joint.validate();
  auto mx = joint.marginal_x();
  auto my = joint.marginal_y();
  double d = 0.0;
  for (std::size_t i = 0; i < joint.p.size(); ++i)
    for (std::size_t j = 0; j < joint.p[i].size(); ++j) {
      double q = mx[i] * my[j];
      double pij = joint.p[i][j];
      if (q == 0.0) {
        if (pij > 0.0)
          throw DomainError(msg("divergence oracle: joint mass ", pij,
                                " at (", i, ",", j,
                                ") where the product marginal is zero"));
        continue;
      }
      d += q * f(pij / q);
    }
  return d;
}

}  // namespace hynet
