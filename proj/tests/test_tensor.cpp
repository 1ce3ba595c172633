// Autodiff core: op semantics, backward contracts, tape state machine.

#include <cmath>

#include <gtest/gtest.h>

#include "hynet/tensor.hpp"
#include "testutil.hpp"

using hynet::Shape;
using hynet::Tensor;
using testutil::max_grad_rel_error;
using testutil::random_tensor;

TEST(Conv2d, OutputSizeArithmetic) {
  hynet::Rng rng(1);
  Tensor x = random_tensor({1, 1, 28, 28}, rng);
  Tensor k = random_tensor({32, 1, 4, 4}, rng);
  Tensor b = Tensor::zeros({32});
  Tensor y = hynet::conv2d(x, k, b, 2, 1);
  EXPECT_EQ(y.shape(), (Shape{1, 32, 14, 14}));
}

TEST(Conv2d, IdentityKernelReproducesInput) {
  hynet::Rng rng(2);
  Tensor x = random_tensor({2, 1, 5, 5}, rng);
  Tensor k = Tensor::from({1, 1, 1, 1}, {1.0});
  Tensor b = Tensor::zeros({1});
  Tensor y = hynet::conv2d(x, k, b, 1, 0);
  ASSERT_EQ(y.shape(), (Shape{2, 1, 5, 5}));
  for (std::size_t i = 0; i < x.numel(); ++i)
    EXPECT_DOUBLE_EQ(y.data()[i], x.data()[i]);
}

TEST(Conv2d, FiniteDifferenceAllParents) {
  hynet::Rng rng(3);
  Tensor x = random_tensor({2, 3, 8, 8}, rng);
  Tensor k = random_tensor({4, 3, 3, 3}, rng, -0.5, 0.5);
  Tensor b = random_tensor({4}, rng);
  double err = max_grad_rel_error(
      [&] { return hynet::sum_all(hynet::conv2d(x, k, b, 2, 1)); }, {x, k, b});
  EXPECT_LT(err, 1e-6);
}

TEST(Conv2d, RejectsBadShapes) {
  hynet::Rng rng(4);
  Tensor x = random_tensor({1, 2, 6, 6}, rng);
  Tensor k = random_tensor({4, 3, 3, 3}, rng);  // channel mismatch
  Tensor b = Tensor::zeros({4});
  EXPECT_THROW(hynet::conv2d(x, k, b, 1, 0), hynet::DimensionError);
  Tensor k2 = random_tensor({4, 2, 9, 9}, rng);  // kernel exceeds input
  Tensor b2 = Tensor::zeros({4});
  EXPECT_THROW(hynet::conv2d(x, k2, b2, 1, 0), hynet::DimensionError);
}

TEST(LogSumExp, StabilityAndBounds) {
  Tensor v = Tensor::from({2}, {1000.0, 1000.0});
  EXPECT_NEAR(hynet::logsumexp(v, 0).item(), 1000.0 + std::log(2.0), 1e-9);

  Tensor s = Tensor::from({1}, {0.0});
  EXPECT_DOUBLE_EQ(hynet::logsumexp(s, 0).item(), 0.0);

  hynet::Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor r = random_tensor({7}, rng, -30.0, 30.0);
    double mx = *std::max_element(r.data().begin(), r.data().end());
    double lse = hynet::logsumexp(r, 0).item();
    EXPECT_GE(lse, mx);
    EXPECT_LE(lse, mx + std::log(7.0) + 1e-12);
  }
}

TEST(LogSumExp, EmptyAxisIsDomainError) {
  Tensor e = Tensor::from({3, 0}, {});
  EXPECT_THROW(hynet::logsumexp(e, 1), hynet::DomainError);
}

TEST(LogSumExp, GradientMatchesFiniteDifference) {
  hynet::Rng rng(6);
  Tensor v = random_tensor({10}, rng, -2.0, 2.0);
  double err =
      max_grad_rel_error([&] { return hynet::logsumexp(v, 0); }, {v}, 1e-5);
  EXPECT_LT(err, 1e-8);

  // Both 2-D axes.
  Tensor a = random_tensor({4, 6}, rng);
  double err_rows = max_grad_rel_error(
      [&] { return hynet::sum_all(hynet::logsumexp(a, 1)); }, {a});
  double err_cols = max_grad_rel_error(
      [&] { return hynet::sum_all(hynet::logsumexp(a, 0)); }, {a});
  EXPECT_LT(err_rows, 1e-7);
  EXPECT_LT(err_cols, 1e-7);
}

TEST(Backward, SquareAndSigmoid) {
  Tensor x = Tensor::scalar(3.0).set_requires_grad(true);
  {
    hynet::TapeScope scope;
    Tensor y = hynet::mul(x, x);
    scope.tape.backward(y);
  }
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);

  Tensor z = Tensor::scalar(0.0).set_requires_grad(true);
  {
    hynet::TapeScope scope;
    Tensor y = hynet::sigmoid(z);
    scope.tape.backward(y);
  }
  EXPECT_DOUBLE_EQ(z.grad()[0], 0.25);
}

TEST(Backward, FanOutAccumulatesAdditively) {
  Tensor x = Tensor::scalar(2.0).set_requires_grad(true);
  {
    hynet::TapeScope scope;
    Tensor y = hynet::add(hynet::mul(x, x), x);  // x² + x → dy/dx = 2x+1
    scope.tape.backward(y);
  }
  EXPECT_DOUBLE_EQ(x.grad()[0], 5.0);
}

TEST(Backward, UnreachedLeafReadsZeroGrad) {
  Tensor x = Tensor::scalar(1.0).set_requires_grad(true);
  Tensor unused = Tensor::scalar(7.0).set_requires_grad(true);
  {
    hynet::TapeScope scope;
    Tensor y = hynet::mul(x, x);
    scope.tape.backward(y);
  }
  EXPECT_DOUBLE_EQ(unused.grad()[0], 0.0);
}

TEST(Backward, ContractViolations) {
  Tensor x = Tensor::from({2}, {1.0, 2.0}).set_requires_grad(true);
  hynet::TapeScope scope;
  Tensor y = hynet::mul(x, x);  // non-scalar
  EXPECT_THROW(scope.tape.backward(y), hynet::ContractError);

  Tensor s = hynet::sum_all(y);
  scope.tape.backward(s);
  EXPECT_THROW(scope.tape.backward(s), hynet::StateError);  // no reset
  scope.tape.reset();
  scope.tape.backward(s);  // allowed after reset

  // An output produced outside any tape cannot be backpropagated.
  hynet::Tape other;
  Tensor q = Tensor::scalar(1.0);
  EXPECT_THROW(other.backward(q), hynet::ContractError);
}

TEST(Backward, LeafGradAccumulatesAcrossPasses) {
  Tensor x = Tensor::scalar(3.0).set_requires_grad(true);
  hynet::TapeScope scope;
  Tensor a = hynet::mul(x, x);           // da/dx = 6
  Tensor b = hynet::smul(x, 10.0);       // db/dx = 10
  scope.tape.backward(a);
  scope.tape.reset();
  scope.tape.backward(b);
  EXPECT_DOUBLE_EQ(x.grad()[0], 16.0);
}

TEST(Backward, StopSetBlocksUpstreamExactly) {
  Tensor x = Tensor::scalar(2.0).set_requires_grad(true);
  Tensor w1 = Tensor::scalar(3.0).set_requires_grad(true);
  Tensor w2 = Tensor::scalar(5.0).set_requires_grad(true);
  hynet::TapeScope scope;
  Tensor a = hynet::mul(w1, x);   // upstream stage
  Tensor b = hynet::mul(w2, a);   // downstream stage
  scope.tape.backward(b, {a});
  EXPECT_DOUBLE_EQ(w2.grad()[0], 6.0);  // a = 6
  EXPECT_DOUBLE_EQ(w1.grad()[0], 0.0);  // blocked — exactly zero
  EXPECT_DOUBLE_EQ(x.grad()[0], 0.0);
  EXPECT_EQ(w1.node()->backward_touch, 0u);
}

TEST(Backward, CompositeConvReluDenseMean) {
  hynet::Rng rng(7);
  Tensor x = random_tensor({2, 1, 6, 6}, rng);
  Tensor k = random_tensor({3, 1, 3, 3}, rng, -0.5, 0.5);
  Tensor kb = random_tensor({3}, rng, -0.1, 0.1);
  Tensor w = random_tensor({4, 3 * 4 * 4}, rng, -0.3, 0.3);
  Tensor wb = random_tensor({4}, rng, -0.1, 0.1);
  auto f = [&] {
    Tensor h = hynet::relu(hynet::conv2d(x, k, kb, 1, 1));  // [2,3,6,6]
    Tensor flat = hynet::reshape(
        hynet::narrow(hynet::narrow(h, 2, 1, 4), 3, 1, 4), Shape{2, 3 * 4 * 4});
    return hynet::mean_all(hynet::linear(flat, w, wb));
  };
  double err = max_grad_rel_error(f, {x, k, kb, w, wb});
  EXPECT_LT(err, 1e-5);
}

TEST(Ops, ConcatThenNarrowRecoversBitExactly) {
  hynet::Rng rng(8);
  Tensor a = random_tensor({3, 2, 4}, rng);
  Tensor b = random_tensor({3, 5, 4}, rng);
  Tensor c = random_tensor({3, 1, 4}, rng);
  Tensor cat = hynet::concat({a, b, c}, 1);
  ASSERT_EQ(cat.shape(), (Shape{3, 8, 4}));
  Tensor ra = hynet::narrow(cat, 1, 0, 2);
  Tensor rb = hynet::narrow(cat, 1, 2, 5);
  Tensor rc = hynet::narrow(cat, 1, 7, 1);
  EXPECT_EQ(ra.data(), a.data());
  EXPECT_EQ(rb.data(), b.data());
  EXPECT_EQ(rc.data(), c.data());
}

TEST(Ops, ShapeMismatchErrors) {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({3, 2});
  EXPECT_THROW(hynet::add(a, b), hynet::DimensionError);
  EXPECT_THROW(hynet::matmul(a, a), hynet::DimensionError);
  EXPECT_THROW(hynet::reshape(a, Shape{4}), hynet::DimensionError);
  EXPECT_THROW(hynet::narrow(a, 1, 2, 2), hynet::DimensionError);
}

TEST(Ops, SignAndClipAreGradientBarriers) {
  Tensor x = Tensor::from({3}, {-2.0, 0.0, 3.0}).set_requires_grad(true);
  {
    hynet::TapeScope scope;
    Tensor y = hynet::sum_all(hynet::sign(x));
    scope.tape.backward(y);
  }
  EXPECT_DOUBLE_EQ(x.grad()[0], 0.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 0.0);
  EXPECT_DOUBLE_EQ(x.grad()[2], 0.0);
  EXPECT_DOUBLE_EQ(hynet::sign(x).data()[1], 0.0);

  Tensor z = Tensor::from({3}, {-2.0, 0.5, 3.0}).set_requires_grad(true);
  z.zero_grad();
  {
    hynet::TapeScope scope;
    Tensor y = hynet::sum_all(hynet::clip(z, 0.0, 1.0));
    scope.tape.backward(y);
  }
  EXPECT_DOUBLE_EQ(z.grad()[0], 0.0);  // clamped below
  EXPECT_DOUBLE_EQ(z.grad()[1], 1.0);  // interior
  EXPECT_DOUBLE_EQ(z.grad()[2], 0.0);  // clamped above
}

TEST(Ops, CrossAddMatchesConcatLinearAlgebra) {
  // cross_add(A, C) must equal the rows of [a_i ; one-hot_j] pushed through
  // the identity-split linear map, i.e. simply a_i + c_j.
  hynet::Rng rng(9);
  Tensor a = random_tensor({3, 5}, rng);
  Tensor c = random_tensor({4, 5}, rng);
  Tensor z = hynet::cross_add(a, c);
  ASSERT_EQ(z.shape(), (Shape{12, 5}));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j)
      for (std::size_t k = 0; k < 5; ++k)
        EXPECT_DOUBLE_EQ(z.data()[(i * 4 + j) * 5 + k],
                         a.data()[i * 5 + k] + c.data()[j * 5 + k]);
  double err = max_grad_rel_error(
      [&] { return hynet::mean_all(hynet::exp(hynet::cross_add(a, c))); },
      {a, c});
  EXPECT_LT(err, 1e-6);
}

TEST(Ops, PairwiseSqdistExactDiagonalAndGradient) {
  hynet::Rng rng(10);
  Tensor a = random_tensor({5, 3}, rng);
  Tensor d_same = hynet::pairwise_sqdist(a, a);
  for (std::size_t i = 0; i < 5; ++i)
    EXPECT_DOUBLE_EQ(d_same.data()[i * 5 + i], 0.0);

  Tensor b = random_tensor({4, 3}, rng);
  Tensor d = hynet::pairwise_sqdist(a, b);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      double ref = 0.0;
      for (std::size_t k = 0; k < 3; ++k) {
        double diff = a.data()[i * 3 + k] - b.data()[j * 3 + k];
        ref += diff * diff;
      }
      EXPECT_NEAR(d.data()[i * 4 + j], ref, 1e-12);
    }
  double err = max_grad_rel_error(
      [&] { return hynet::mean_all(hynet::pairwise_sqdist(a, b)); }, {a, b});
  EXPECT_LT(err, 1e-6);
  // Same-node case: gradient of D(A,A) must also be correct.
  double err_same = max_grad_rel_error(
      [&] {
        return hynet::mean_all(
            hynet::exp(hynet::smul(hynet::pairwise_sqdist(a, a), -0.5)));
      },
      {a});
  EXPECT_LT(err_same, 1e-5);
}

TEST(Ops, GatherSelectMaxRows) {
  Tensor s = Tensor::from({2, 3}, {0.1, 2.0, -1.0, 3.0, 3.0, 0.0});
  Tensor j = hynet::gather_rows(s, {1, 2});
  EXPECT_DOUBLE_EQ(j.data()[0], 2.0);
  EXPECT_DOUBLE_EQ(j.data()[1], 0.0);

  Tensor m = hynet::max_rows(s);
  EXPECT_DOUBLE_EQ(m.data()[0], 2.0);
  EXPECT_DOUBLE_EQ(m.data()[1], 3.0);  // tie → first column wins gradient

  Tensor rows = hynet::select_rows(s, {1, 1, 0});
  ASSERT_EQ(rows.shape(), (Shape{3, 3}));
  EXPECT_DOUBLE_EQ(rows.data()[0], 3.0);
  EXPECT_DOUBLE_EQ(rows.data()[8], -1.0);

  hynet::Rng rng(11);
  Tensor r = random_tensor({6, 4}, rng);
  double err = max_grad_rel_error(
      [&] {
        return hynet::mean_all(
            hynet::exp(hynet::gather_rows(r, {3, 0, 1, 2, 3, 1})));
      },
      {r});
  EXPECT_LT(err, 1e-6);
  double err_sel = max_grad_rel_error(
      [&] {
        return hynet::mean_all(
            hynet::exp(hynet::select_rows(r, {0, 2, 2, 5})));
      },
      {r});
  EXPECT_LT(err_sel, 1e-6);
}

TEST(Ops, SoftmaxRowsIsAProbabilityRow) {
  hynet::Rng rng(12);
  Tensor s = random_tensor({4, 7}, rng, -5.0, 5.0);
  Tensor p = hynet::softmax_rows(s);
  for (std::size_t i = 0; i < 4; ++i) {
    double sum = 0.0;
    for (std::size_t k = 0; k < 7; ++k) {
      double v = p.data()[i * 7 + k];
      EXPECT_GE(v, 0.0);
      sum += v;
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}

TEST(Ops, MaxPoolForwardAndGradient) {
  Tensor x = Tensor::from({1, 1, 2, 2}, {1.0, 4.0, 3.0, 2.0});
  Tensor y = hynet::maxpool2d(x, 2);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_DOUBLE_EQ(y.item(), 4.0);

  hynet::Rng rng(13);
  Tensor r = random_tensor({2, 3, 4, 4}, rng);
  double err = max_grad_rel_error(
      [&] { return hynet::mean_all(hynet::maxpool2d(r, 2)); }, {r});
  EXPECT_LT(err, 1e-6);
}

TEST(Ops, BatchNormTrainGradient) {
  hynet::Rng rng(14);
  Tensor x = random_tensor({3, 2, 4, 4}, rng, -2.0, 2.0);
  Tensor g = random_tensor({2}, rng, 0.5, 1.5);
  Tensor b = random_tensor({2}, rng, -0.5, 0.5);
  double err = max_grad_rel_error(
      [&] {
        Tensor y = hynet::bn2d_train(x, g, b, 1e-5, nullptr, nullptr);
        return hynet::mean_all(hynet::mul(y, y));
      },
      {x, g, b});
  EXPECT_LT(err, 1e-4);
}

TEST(Ops, BatchNormEvalGradient) {
  hynet::Rng rng(15);
  Tensor x = random_tensor({3, 2, 4, 4}, rng, -2.0, 2.0);
  Tensor g = random_tensor({2}, rng, 0.5, 1.5);
  Tensor b = random_tensor({2}, rng, -0.5, 0.5);
  std::vector<double> rm{0.3, -0.2}, rv{1.5, 0.7};
  double err = max_grad_rel_error(
      [&] {
        Tensor y = hynet::bn2d_eval(x, g, b, rm, rv, 1e-5);
        return hynet::mean_all(hynet::mul(y, y));
      },
      {x, g, b});
  EXPECT_LT(err, 1e-5);
}

TEST(Determinism, FixedSeedReproducesBitwise) {
  hynet::Rng r1(42), r2(42);
  Tensor a1 = Tensor::randn({64}, r1);
  Tensor a2 = Tensor::randn({64}, r2);
  EXPECT_EQ(a1.data(), a2.data());

  // Forward+backward twice on identical values must agree bitwise.
  auto run = [] {
    hynet::Rng rng(7);
    Tensor x = random_tensor({4, 6}, rng).set_requires_grad(true);
    Tensor w = random_tensor({3, 6}, rng).set_requires_grad(true);
    Tensor b = random_tensor({3}, rng).set_requires_grad(true);
    hynet::TapeScope scope;
    Tensor loss =
        hynet::mean_all(hynet::relu(hynet::linear(x, w, b)));
    scope.tape.backward(loss);
    std::vector<double> out = {loss.item()};
    out.insert(out.end(), w.grad().begin(), w.grad().end());
    return out;
  };
  EXPECT_EQ(run(), run());
}

TEST(Instrumentation, FrozenLeafIsNeverTouched) {
  Tensor x = Tensor::scalar(2.0).set_requires_grad(true);
  Tensor w = Tensor::scalar(3.0).set_requires_grad(false);
  {
    hynet::TapeScope scope;
    Tensor y = hynet::mul(w, x);
    scope.tape.backward(y);
  }
  EXPECT_EQ(w.node()->backward_touch, 0u);
  EXPECT_DOUBLE_EQ(x.grad()[0], 3.0);
}
