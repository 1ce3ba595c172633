// Variational objectives against a discrete divergence oracle: spec'd
// closed-form values, optimal-critic agreement, lower-bound property,
// identities between the estimators.

#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "hynet/objectives.hpp"
#include "testutil.hpp"

using hynet::DiscreteJoint;
using hynet::PairScores;
using hynet::Tensor;
using testutil::random_tensor;

namespace {

constexpr double kLn2 = 0.6931471805599453;

// Builds a score grid + labels realizing the joint EXACTLY: sample (x,y)
// appears round(p(x,y)*batch) times, and the grid row for a sample with
// x-value x is critic[x][*]. Requires p*batch to be integral.
void exact_batch(const DiscreteJoint& joint,
                 const std::vector<std::vector<double>>& critic,
                 std::size_t batch, Tensor* grid,
                 std::vector<std::size_t>* labels) {
  std::size_t my = joint.p[0].size();
  std::vector<double> rows;
  labels->clear();
  for (std::size_t x = 0; x < joint.p.size(); ++x)
    for (std::size_t y = 0; y < my; ++y) {
      double exact = joint.p[x][y] * double(batch);
      auto count = std::size_t(std::llround(exact));
      ASSERT_NEAR(double(count), exact, 1e-9) << "non-integral multiplicity";
      for (std::size_t c = 0; c < count; ++c) {
        rows.insert(rows.end(), critic[x].begin(), critic[x].end());
        labels->push_back(y);
      }
    }
  ASSERT_EQ(labels->size(), batch);
  *grid = Tensor::from({batch, my}, std::move(rows));
}

// Pointwise-optimal critic for the ratio p/(px·py); log of zero ratios is
// replaced with a large negative score.
std::vector<std::vector<double>> optimal_critic(const DiscreteJoint& joint) {
  auto mx = joint.marginal_x();
  auto my = joint.marginal_y();
  std::vector<std::vector<double>> t(joint.p.size());
  for (std::size_t x = 0; x < joint.p.size(); ++x) {
    t[x].resize(my.size());
    for (std::size_t y = 0; y < my.size(); ++y) {
      double q = mx[x] * my[y];
      t[x][y] = joint.p[x][y] > 0.0 && q > 0.0
                    ? std::log(joint.p[x][y] / q)
                    : -30.0;
    }
  }
  return t;
}

// The 4x2 joint used throughout: y-marginal uniform by construction, so the
// grid average realizes the product distribution exactly.
DiscreteJoint toy_4x2() {
  return DiscreteJoint{{{0.20, 0.05},
                        {0.15, 0.10},
                        {0.05, 0.20},
                        {0.10, 0.15}}};
}

DiscreteJoint identical_uniform(std::size_t m) {
  std::vector<std::vector<double>> p(m, std::vector<double>(m, 0.0));
  for (std::size_t i = 0; i < m; ++i) p[i][i] = 1.0 / double(m);
  return DiscreteJoint{p};
}

PairScores scores_of(const Tensor& grid,
                     const std::vector<std::size_t>& labels) {
  return PairScores::from_grid(grid, labels);
}

}  // namespace

// ---------------------------------------------------------------------------
// Closed-form anchor points
// ---------------------------------------------------------------------------

TEST(JsObjective, AllZeroScoresGiveTwoLnTwo) {
  Tensor grid = Tensor::zeros({6, 3});
  std::vector<std::size_t> labels = {0, 1, 2, 0, 1, 2};
  double loss = hynet::js_objective(scores_of(grid, labels)).item();
  EXPECT_NEAR(loss, 2.0 * kLn2, 1e-12);
  EXPECT_NEAR(hynet::js_estimate(loss), 0.0, 1e-12);
}

TEST(DvObjective, ConstantCriticGivesZero) {
  Tensor grid = Tensor::full({5, 4}, 2.75);
  std::vector<std::size_t> labels = {0, 1, 2, 3, 0};
  double loss = hynet::dv_objective(scores_of(grid, labels)).item();
  EXPECT_NEAR(loss, 0.0, 1e-12);
  EXPECT_NEAR(hynet::dv_estimate(loss), 0.0, 1e-12);
}

TEST(EbObjective, UniformRowsGiveLogM) {
  Tensor grid = Tensor::full({4, 5}, -1.25);
  std::vector<std::size_t> labels = {0, 4, 2, 3};
  double loss = hynet::eb_objective(scores_of(grid, labels)).item();
  EXPECT_NEAR(loss, std::log(5.0), 1e-12);
  EXPECT_NEAR(hynet::eb_estimate(loss, 5), 0.0, 1e-12);
}

// ---------------------------------------------------------------------------
// Discrete oracle anchors
// ---------------------------------------------------------------------------

TEST(Oracle, IdenticalUniformPairKlIsLogM) {
  EXPECT_NEAR(
      hynet::discrete_divergence_oracle(identical_uniform(2), hynet::f_kl),
      kLn2, 1e-12);
  EXPECT_NEAR(
      hynet::discrete_divergence_oracle(identical_uniform(4), hynet::f_kl),
      std::log(4.0), 1e-12);
}

TEST(Oracle, IdenticalUniformPairJsIsQuarterLog64Over27) {
  // For X == Y uniform over two values the JS divergence against the product
  // is (3/4)ln(4/3) = ln(64/27)/4 — strictly below its ln 2 ceiling, which is
  // reached only by disjoint supports.
  double want = std::log(64.0 / 27.0) / 4.0;
  EXPECT_NEAR(want, 0.21576155433883562, 1e-15);
  EXPECT_NEAR(
      hynet::discrete_divergence_oracle(identical_uniform(2), hynet::f_js),
      want, 1e-12);
}

TEST(Oracle, IndependentJointHasZeroDivergence) {
  DiscreteJoint ind{{{0.125, 0.125}, {0.375, 0.375}}};
  EXPECT_NEAR(hynet::discrete_divergence_oracle(ind, hynet::f_kl), 0.0, 1e-12);
  EXPECT_NEAR(hynet::discrete_divergence_oracle(ind, hynet::f_js), 0.0, 1e-12);
}

TEST(Oracle, ValidatesTheJoint) {
  DiscreteJoint neg{{{0.5, -0.1}, {0.3, 0.3}}};
  EXPECT_THROW(hynet::discrete_divergence_oracle(neg, hynet::f_kl),
               hynet::ContractError);
  DiscreteJoint short_sum{{{0.25, 0.25}, {0.25, 0.0}}};
  EXPECT_THROW(hynet::discrete_divergence_oracle(short_sum, hynet::f_kl),
               hynet::ContractError);
}

// ---------------------------------------------------------------------------
// Optimal-critic estimates vs the oracle on exact-multiplicity batches
// ---------------------------------------------------------------------------

TEST(JsObjective, OptimalCriticRecoversOracleOnToyJoint) {
  DiscreteJoint joint = toy_4x2();
  Tensor grid;
  std::vector<std::size_t> labels;
  exact_batch(joint, optimal_critic(joint), 20, &grid, &labels);
  double est = hynet::js_estimate(
      hynet::js_objective(scores_of(grid, labels)).item());
  double oracle = hynet::discrete_divergence_oracle(joint, hynet::f_js);
  EXPECT_NEAR(est, oracle, 0.02);   // contract tolerance
  EXPECT_NEAR(est, oracle, 1e-10);  // and in fact exact at the optimum
}

TEST(DvObjective, OptimalCriticRecoversOracleOnToyJoint) {
  DiscreteJoint joint = toy_4x2();
  Tensor grid;
  std::vector<std::size_t> labels;
  exact_batch(joint, optimal_critic(joint), 20, &grid, &labels);
  double est = hynet::dv_estimate(
      hynet::dv_objective(scores_of(grid, labels)).item());
  double oracle = hynet::discrete_divergence_oracle(joint, hynet::f_kl);
  EXPECT_NEAR(est, oracle, 0.05);  // contract tolerance
  EXPECT_NEAR(est, oracle, 1e-9);
}

TEST(DvObjective, RecoverLogMOnIdenticalUniformPair) {
  DiscreteJoint joint = identical_uniform(4);
  Tensor grid;
  std::vector<std::size_t> labels;
  exact_batch(joint, optimal_critic(joint), 4, &grid, &labels);
  double est = hynet::dv_estimate(
      hynet::dv_objective(scores_of(grid, labels)).item());
  EXPECT_NEAR(est, std::log(4.0), 1e-9);

  DiscreteJoint two = identical_uniform(2);
  exact_batch(two, optimal_critic(two), 2, &grid, &labels);
  est = hynet::dv_estimate(hynet::dv_objective(scores_of(grid, labels)).item());
  EXPECT_NEAR(est, kLn2, 1e-9);
}

TEST(Objectives, IndependentJointEstimatesNearZero) {
  DiscreteJoint ind{{{0.125, 0.125}, {0.375, 0.375}}};
  Tensor grid;
  std::vector<std::size_t> labels;
  exact_batch(ind, optimal_critic(ind), 16, &grid, &labels);
  PairScores s = scores_of(grid, labels);
  EXPECT_NEAR(hynet::js_estimate(hynet::js_objective(s).item()), 0.0, 1e-10);
  EXPECT_NEAR(hynet::dv_estimate(hynet::dv_objective(s).item()), 0.0, 1e-10);
  EXPECT_NEAR(hynet::eb_estimate(hynet::eb_objective(s).item(), 2), 0.0,
              1e-10);
}

TEST(Objectives, EstimatesAreLowerBoundsForAnyCritic) {
  DiscreteJoint joint = toy_4x2();
  double js_true = hynet::discrete_divergence_oracle(joint, hynet::f_js);
  double kl_true = hynet::discrete_divergence_oracle(joint, hynet::f_kl);
  hynet::Rng rng(99);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<std::vector<double>> critic(4, std::vector<double>(2));
    for (auto& row : critic)
      for (auto& v : row) v = 6.0 * (rng.uniform() - 0.5);
    Tensor grid;
    std::vector<std::size_t> labels;
    exact_batch(joint, critic, 20, &grid, &labels);
    PairScores s = scores_of(grid, labels);
    EXPECT_LE(hynet::js_estimate(hynet::js_objective(s).item()),
              js_true + 1e-9);
    EXPECT_LE(hynet::dv_estimate(hynet::dv_objective(s).item()),
              kl_true + 1e-9);
    // With a uniform y-marginal the per-row form also lower-bounds the same
    // mutual information.
    EXPECT_LE(hynet::eb_estimate(hynet::eb_objective(s).item(), 2),
              kl_true + 1e-9);
  }
}

// ---------------------------------------------------------------------------
// Estimator identities
// ---------------------------------------------------------------------------

TEST(Objectives, PerRowFormEqualsCrossEntropyOnSoftmaxRows) {
  hynet::Rng rng(41);
  for (int trial = 0; trial < 100; ++trial) {
    std::size_t b = 1 + rng.integer(8), m = 2 + rng.integer(7);
    Tensor grid = random_tensor({b, m}, rng, -4.0, 4.0);
    std::vector<std::size_t> labels(b);
    for (auto& l : labels) l = rng.integer(m);
    double eb = hynet::eb_objective(scores_of(grid, labels)).item();
    double ce =
        hynet::ce_objective(hynet::softmax_rows(grid), labels).item();
    ASSERT_NEAR(eb, ce, 1e-10) << "trial " << trial;
  }
}

TEST(Objectives, PooledFormNeverExceedsPerRowEstimate) {
  // Jensen: pooling the log-partition over the whole grid can only lower the
  // estimate relative to the per-row form; equal rows collapse the gap.
  hynet::Rng rng(42);
  for (int trial = 0; trial < 50; ++trial) {
    std::size_t b = 2 + rng.integer(6), m = 2 + rng.integer(5);
    Tensor grid = random_tensor({b, m}, rng, -3.0, 3.0);
    std::vector<std::size_t> labels(b);
    for (auto& l : labels) l = rng.integer(m);
    PairScores s = scores_of(grid, labels);
    double dv_est = hynet::dv_estimate(hynet::dv_objective(s).item());
    double eb_est = hynet::eb_estimate(hynet::eb_objective(s).item(), m);
    ASSERT_LE(dv_est, eb_est + 1e-9) << "trial " << trial;
  }

  // Identical rows: the two estimates coincide.
  Tensor row = random_tensor({1, 4}, rng, -2.0, 2.0);
  std::vector<double> rep;
  for (int i = 0; i < 5; ++i)
    rep.insert(rep.end(), row.data().begin(), row.data().end());
  Tensor grid = Tensor::from({5, 4}, std::move(rep));
  std::vector<std::size_t> labels = {0, 1, 2, 3, 1};
  PairScores s = scores_of(grid, labels);
  EXPECT_NEAR(hynet::dv_estimate(hynet::dv_objective(s).item()),
              hynet::eb_estimate(hynet::eb_objective(s).item(), 4), 1e-9);
}

TEST(Objectives, ShiftInvarianceOfNormalizedForms) {
  hynet::Rng rng(43);
  Tensor grid = random_tensor({6, 5}, rng, -2.0, 2.0);
  std::vector<std::size_t> labels = {0, 1, 2, 3, 4, 2};
  PairScores s = scores_of(grid, labels);
  Tensor shifted = hynet::sadd(grid, 3.7);
  PairScores s2 = scores_of(shifted, labels);

  EXPECT_NEAR(hynet::eb_objective(s).item(), hynet::eb_objective(s2).item(),
              1e-9);
  EXPECT_NEAR(hynet::dv_objective(s).item(), hynet::dv_objective(s2).item(),
              1e-9);
  // The density-ratio form is anchored at zero and must NOT be invariant.
  EXPECT_GT(std::abs(hynet::js_objective(s).item() -
                     hynet::js_objective(s2).item()),
            1e-3);
}

TEST(Objectives, GradientsMatchFiniteDifferences) {
  hynet::Rng rng(44);
  Tensor grid = random_tensor({5, 4}, rng, -2.0, 2.0);
  std::vector<std::size_t> labels = {0, 1, 2, 3, 1};
  for (auto make : {+[](const Tensor& g, const std::vector<std::size_t>& l) {
                      return hynet::js_objective(PairScores::from_grid(g, l));
                    },
                    +[](const Tensor& g, const std::vector<std::size_t>& l) {
                      return hynet::dv_objective(PairScores::from_grid(g, l));
                    },
                    +[](const Tensor& g, const std::vector<std::size_t>& l) {
                      return hynet::eb_objective(PairScores::from_grid(g, l));
                    }}) {
    double err = testutil::max_grad_rel_error(
        [&] { return make(grid, labels); }, {grid});
    EXPECT_LT(err, 1e-6);
  }
}

// ---------------------------------------------------------------------------
// Cross-entropy contract
// ---------------------------------------------------------------------------

TEST(CrossEntropy, RejectsRowsThatAreNotDistributions) {
  Tensor bad = Tensor::from({2, 2}, {0.5, 0.6, 0.5, 0.5});
  EXPECT_THROW(hynet::ce_objective(bad, {0, 1}), hynet::ContractError);
}

TEST(CrossEntropy, ClampsZeroProbabilityAndCounts) {
  std::uint64_t before = hynet::ce_clamp_warnings().load();
  Tensor probs = Tensor::from({2, 2}, {0.0, 1.0, 0.25, 0.75});
  double loss = hynet::ce_objective(probs, {0, 1}).item();
  EXPECT_TRUE(std::isfinite(loss));
  // Row 0 hits the clamp at its true label: -ln(1e-12) dominates the mean.
  EXPECT_GT(loss, 0.5 * -std::log(1e-12) * 0.9);
  EXPECT_EQ(hynet::ce_clamp_warnings().load(), before + 1);
}

TEST(PairScoresContract, RejectsBadLabelsAndShapes) {
  Tensor grid = Tensor::zeros({3, 4});
  EXPECT_THROW(scores_of(grid, {0, 1}), hynet::DimensionError);
  EXPECT_THROW(scores_of(grid, {0, 1, 4}), hynet::ContractError);
  Tensor vec = Tensor::zeros({3});
  EXPECT_THROW(scores_of(vec, {0, 1, 2}), hynet::DimensionError);
}
