#pragma once

// Maximum mean discrepancy surrogate for per-hypothesis label-information
// elimination: Gaussian kernel, biased V-statistic, and the class-vs-pooled
// aggregation over the M×M (hypothesis, true-class) grid.

#include <vector>

#include "hynet/common.hpp"
#include "hynet/tensor.hpp"

namespace hynet {

// k(a,b) = exp(−‖a−b‖² / (2σ²)); entries in (0,1], unit diagonal for k(A,A).
inline Tensor gaussian_kernel_matrix(const Tensor& a, const Tensor& b,
                                     double sigma2) {
  if (sigma2 <= 0.0)
    throw ConfigurationError(msg("gaussian kernel: sigma² must be > 0, got ",
                                 sigma2));
  return exp(smul(pairwise_sqdist(a, b), -0.5 / sigma2));
}

// Biased V-statistic MMD²: mean k(P,P) + mean k(Q,Q) − 2·mean k(P,Q).
// Differentiable w.r.t. both row sets; non-negative up to roundoff.
inline Tensor mmd2(const Tensor& p, const Tensor& q, double sigma2) {
  if (p.size(0) == 0 || q.size(0) == 0)
    throw ContractError("mmd2: empty sample set");
  Tensor kpp = mean_all(gaussian_kernel_matrix(p, p, sigma2));
  Tensor kqq = mean_all(gaussian_kernel_matrix(q, q, sigma2));
  Tensor kpq = mean_all(gaussian_kernel_matrix(p, q, sigma2));
  return sub(add(kpp, kqq), smul(kpq, 2.0));
}

struct RegularizerResult {
  Tensor loss;                  // scalar, ≥ 0
  std::size_t skipped_terms{};  // (hypothesis, class) pairs with empty groups
};

// (β/M²)·Σ_{hypothesis y} Σ_{true class c} MMD²(P_c^{(y)}, P̄^{(y)}) over the
// per-(sample, hypothesis) representations. `reps` holds B·M rows, row-major
// with the hypothesis index fastest: row (i, j) = rep of (sample i,
// hypothesis j). Class groups partition the B samples by true label; empty
// groups within the batch are skipped and counted. The pooled-vs-pooled
// kernel mean is hoisted out per hypothesis (it is shared by all M class
// terms of that hypothesis).
inline RegularizerResult regularization_loss(
    const Tensor& reps, const std::vector<std::size_t>& labels,
    std::size_t num_classes, double beta, double sigma2) {
  if (reps.dim() != 2)
    throw DimensionError(msg("regularization_loss: reps must be [B·M, d], got ",
                             shape_str(reps.shape())));
  const std::size_t m = num_classes;
  const std::size_t b = labels.size();
  if (reps.size(0) != b * m)
    throw DimensionError(msg("regularization_loss: ", reps.size(0),
                             " rows != B·M = ", b * m));

  std::vector<std::vector<std::size_t>> class_members(m);
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] >= m)
      throw ContractError(msg("regularization_loss: label ", labels[i],
                              " out of range"));
    class_members[labels[i]].push_back(i);
  }

  RegularizerResult result;
  if (beta == 0.0) {
    result.loss = Tensor::scalar(0.0);
    return result;
  }

  Tensor total = Tensor::scalar(0.0);
  bool any_term = false;
  for (std::size_t j = 0; j < m; ++j) {
    // All B rows of hypothesis j — the empirical P̄^{(j)}.
    std::vector<std::size_t> pooled_idx(b);
    for (std::size_t i = 0; i < b; ++i) pooled_idx[i] = i * m + j;
    Tensor pooled = select_rows(reps, pooled_idx);
    Tensor k_pool = mean_all(gaussian_kernel_matrix(pooled, pooled, sigma2));

    for (std::size_t c = 0; c < m; ++c) {
      if (class_members[c].empty()) {
        result.skipped_terms += 1;
        continue;
      }
      any_term = true;
      std::vector<std::size_t> group_idx;
      group_idx.reserve(class_members[c].size());
      for (std::size_t i : class_members[c]) group_idx.push_back(i * m + j);
      Tensor group = select_rows(reps, group_idx);
      Tensor k_gg = mean_all(gaussian_kernel_matrix(group, group, sigma2));
      Tensor k_gp = mean_all(gaussian_kernel_matrix(group, pooled, sigma2));
      total = add(total, add(k_gg, sub(k_pool, smul(k_gp, 2.0))));
    }
  }
  if (!any_term)
    throw ContractError("regularization_loss: every class group is empty");
  result.loss = smul(total, beta / static_cast<double>(m * m));
  return result;
}

}  // namespace hynet
