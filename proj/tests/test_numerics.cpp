#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "stgrit/gradcheck.hpp"
#include "stgrit/ops.hpp"
#include "stgrit/tensor.hpp"

using namespace stgrit;

namespace {

Tensor ones(Shape s, bool requires_grad = false) { return Tensor::full(std::move(s), 1.0, requires_grad); }

}  // namespace

TEST(Tensor, InvariantsEnforced) {
  EXPECT_THROW(Tensor({2, 2}, {1.0, 2.0, 3.0}), ShapeError);
  EXPECT_THROW(Tensor({2}, {1.0, std::nan("")}), NumericsError);
  EXPECT_THROW(Tensor({0, 3}, {}), ShapeError);
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.size(), 6u);
  EXPECT_DOUBLE_EQ(t.at({1, 2}), 6.0);
  EXPECT_THROW(t.item(), ShapeError);
}

TEST(Matmul, IdentityPassesThrough) {
  Tensor eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor b({3, 2}, {1, 2, 3, 4, 5, 6});
  Tensor c = matmul(eye, b);
  EXPECT_EQ(c.shape(), (Shape{3, 2}));
  for (std::size_t i = 0; i < 6; ++i) EXPECT_DOUBLE_EQ(c.value()[i], b.value()[i]);
}

TEST(Matmul, HandChecked2x2) {
  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor b({2, 1}, {0, 1});
  Tensor c = matmul(a, b);
  EXPECT_DOUBLE_EQ(c.at({0, 0}), 2.0);
  EXPECT_DOUBLE_EQ(c.at({1, 0}), 4.0);
}

TEST(Matmul, ShapeMismatchRejected) {
  Tensor a({2, 3}, std::vector<double>(6, 1.0));
  Tensor b({2, 3}, std::vector<double>(6, 1.0));
  EXPECT_THROW(matmul(a, b), ShapeError);
}

TEST(Matmul, GradientsMatchFiniteDifferences) {
  Rng rng(7);
  Tensor a = Tensor::uniform({5, 4}, rng, -1.0, 1.0, true);
  Tensor b = Tensor::uniform({4, 3}, rng, -1.0, 1.0, true);
  std::vector<Tensor> leaves{a, b};
  // scalar loss = sum of all output entries
  const double err = gradcheck::max_rel_error(
      leaves, [&] { return mul_scalar(mean_all(matmul(a, b)), 15.0); });
  EXPECT_LT(err, 1e-6);
}

TEST(Softmax, UniformInputGivesUniformOutput) {
  Tensor x({3}, {0, 0, 0});
  Tensor y = softmax(x, 0);
  for (double v : y.value()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(Softmax, MaxSubtractionPreventsOverflow) {
  Tensor x({3}, {1000, 1000, 1000});
  Tensor y = softmax(x, 0);
  for (double v : y.value()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(Softmax, JacobianMatchesFiniteDifferences) {
  Rng rng(11);
  Tensor x = Tensor::uniform({4}, rng, -2.0, 2.0, true);
  Tensor w = Tensor::uniform({4}, rng, 0.5, 1.5, false);
  std::vector<Tensor> leaves{x};
  const double err =
      gradcheck::max_rel_error(leaves, [&] { return mean_all(mul(softmax(x, 0), w)); });
  EXPECT_LT(err, 1e-6);
}

TEST(Softmax, RowStochasticOnRandomInput) {
  Rng rng(13);
  Tensor x = Tensor::uniform({6, 9}, rng, -5.0, 5.0);
  Tensor y = softmax(x, 1);
  for (std::size_t i = 0; i < 6; ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < 9; ++j) {
      EXPECT_GE(y.at({i, j}), 0.0);
      sum += y.at({i, j});
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}

TEST(LayerNorm, ConstantVectorCollapsesToBeta) {
  Tensor x({3}, {4.2, 4.2, 4.2});
  Tensor y = layer_norm(x, ones({3}), Tensor::zeros({3}));
  for (double v : y.value()) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(LayerNorm, AlreadyStandardizedPair) {
  Tensor x({2}, {1.0, -1.0});
  Tensor y = layer_norm(x, ones({2}), Tensor::zeros({2}));
  EXPECT_NEAR(y.value()[0], 1.0, 1e-6);
  EXPECT_NEAR(y.value()[1], -1.0, 1e-6);
}

TEST(LayerNorm, StandardizesRandomRows) {
  Rng rng(17);
  Tensor x = Tensor::uniform({8, 16}, rng, -3.0, 3.0);
  Tensor y = layer_norm(x, ones({16}), Tensor::zeros({16}));
  for (std::size_t r = 0; r < 8; ++r) {
    double mean = 0.0;
    for (std::size_t j = 0; j < 16; ++j) mean += y.at({r, j});
    mean /= 16.0;
    EXPECT_LT(std::fabs(mean), 1e-10);
    double var = 0.0;
    for (std::size_t j = 0; j < 16; ++j) var += (y.at({r, j}) - mean) * (y.at({r, j}) - mean);
    var /= 16.0;
    EXPECT_NEAR(var, 1.0, 1e-6);
  }
}

TEST(LayerNorm, GradientsMatchFiniteDifferences) {
  Rng rng(19);
  Tensor x = Tensor::uniform({6}, rng, -2.0, 2.0, true);
  Tensor gamma = Tensor::uniform({6}, rng, 0.5, 1.5, true);
  Tensor beta = Tensor::uniform({6}, rng, -0.5, 0.5, true);
  Tensor w = Tensor::uniform({6}, rng, 0.5, 1.5, false);
  std::vector<Tensor> leaves{x, gamma, beta};
  const double err = gradcheck::max_rel_error(
      leaves, [&] { return mean_all(mul(layer_norm(x, gamma, beta), w)); });
  EXPECT_LT(err, 1e-5);
}

TEST(Dropout, RateZeroIsIdentity) {
  Rng rng(23);
  Tensor x = Tensor::uniform({4, 4}, rng, -1.0, 1.0);
  Rng mask_rng(1);
  Tensor train_out = dropout(x, 0.0, mask_rng, true);
  Tensor eval_out = dropout(x, 0.0, mask_rng, false);
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_DOUBLE_EQ(train_out.value()[i], x.value()[i]);
    EXPECT_DOUBLE_EQ(eval_out.value()[i], x.value()[i]);
  }
}

TEST(Dropout, EvalModeIsIdentityForAnyRate) {
  Rng rng(29);
  Tensor x = Tensor::uniform({10}, rng, -1.0, 1.0);
  Rng mask_rng(1);
  Tensor y = dropout(x, 0.7, mask_rng, false);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_DOUBLE_EQ(y.value()[i], x.value()[i]);
}

TEST(Dropout, SurvivorFractionAndMeanPreserved) {
  const std::size_t n = 100000;
  Tensor x = ones({n});
  Rng mask_rng(31);
  Tensor y = dropout(x, 0.5, mask_rng, true);
  std::size_t survivors = 0;
  double sum = 0.0;
  for (double v : y.value()) {
    if (v != 0.0) ++survivors;
    sum += v;
  }
  const double fraction = static_cast<double>(survivors) / static_cast<double>(n);
  EXPECT_NEAR(fraction, 0.5, 0.01);
  EXPECT_NEAR(sum / static_cast<double>(n), 1.0, 0.02);  // inverted scaling keeps the mean
}

TEST(Dropout, InvalidRateRejected) {
  Tensor x = ones({3});
  Rng rng(1);
  EXPECT_THROW(dropout(x, 1.0, rng, true), ConfigError);
  EXPECT_THROW(dropout(x, 1.5, rng, true), ConfigError);
}

TEST(Dropout, DeterministicUnderSeed) {
  Rng data_rng(37);
  Tensor x = Tensor::uniform({64}, data_rng, -1.0, 1.0);
  Rng r1(99), r2(99);
  Tensor y1 = dropout(x, 0.4, r1, true);
  Tensor y2 = dropout(x, 0.4, r2, true);
  EXPECT_EQ(y1.value(), y2.value());
}

TEST(Elementwise, ReluClampsNegatives) {
  Tensor x({3}, {-1, 0, 2});
  Tensor y = relu(x);
  EXPECT_DOUBLE_EQ(y.value()[0], 0.0);
  EXPECT_DOUBLE_EQ(y.value()[1], 0.0);
  EXPECT_DOUBLE_EQ(y.value()[2], 2.0);
}

TEST(Elementwise, TransposeTwiceIsIdentity) {
  Rng rng(41);
  Tensor x = Tensor::uniform({3, 4, 5}, rng, -1.0, 1.0);
  Tensor y = transpose(transpose(x, {2, 0, 1}), {1, 2, 0});
  EXPECT_EQ(y.shape(), x.shape());
  EXPECT_EQ(y.value(), x.value());
}

TEST(Elementwise, ConcatLengthsAdd) {
  Tensor a({2}, {1, 2});
  Tensor b({3}, {3, 4, 5});
  Tensor c = concat({a, b}, 0);
  ASSERT_EQ(c.size(), 5u);
  EXPECT_EQ(c.value(), (std::vector<double>{1, 2, 3, 4, 5}));
}

TEST(Elementwise, MeanOverAxis) {
  Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor m = mean(x, 1);
  EXPECT_EQ(m.shape(), (Shape{2}));
  EXPECT_DOUBLE_EQ(m.value()[0], 2.0);
  EXPECT_DOUBLE_EQ(m.value()[1], 5.0);
  Tensor m0 = mean(x, 0);
  EXPECT_EQ(m0.shape(), (Shape{3}));
  EXPECT_DOUBLE_EQ(m0.value()[0], 2.5);
}

TEST(Elementwise, ReshapePreservesData) {
  Tensor x({2, 6}, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11});
  Tensor y = reshape(x, {3, 4});
  EXPECT_EQ(y.shape(), (Shape{3, 4}));
  EXPECT_EQ(y.value(), x.value());
  EXPECT_THROW(reshape(x, {5, 2}), ShapeError);
}

TEST(Elementwise, AxisErrorsRejected) {
  Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_THROW(softmax(x, 2), ShapeError);
  EXPECT_THROW(mean(x, 5), ShapeError);
  EXPECT_THROW(concat({x}, 9), ShapeError);
  EXPECT_THROW(transpose(x, {0, 0}), ShapeError);
  Tensor y({3, 2}, {1, 2, 3, 4, 5, 6});
  EXPECT_THROW(add(x, y), ShapeError);
}

TEST(Backward, NonScalarLossRejected) {
  Tensor a = ones({2, 2}, true);
  Tape tape;
  Tape::Scope scope(tape);
  Tensor y = mul(a, a);
  EXPECT_THROW(tape.backward(y), ContractError);
}

TEST(Backward, SecondCallRejected) {
  Tensor a = ones({2, 2}, true);
  Tape tape;
  {
    Tape::Scope scope(tape);
    Tensor loss = mean_all(mul(a, a));
    tape.backward(loss);
    EXPECT_THROW(tape.backward(loss), ContractError);
  }
}

TEST(Backward, EmptyTapeRejected) {
  Tape tape;
  EXPECT_THROW(tape.backward(Tensor::scalar(1.0)), ContractError);
}

TEST(Backward, AccumulatesOncePerUse) {
  // y = x*x + x, dy/dx = 2x + 1
  Tensor x({3}, {1.0, -2.0, 0.5}, true);
  Tape tape;
  {
    Tape::Scope scope(tape);
    Tensor loss = mul_scalar(mean_all(add(mul(x, x), x)), 3.0);  // = sum
    tape.backward(loss);
  }
  ASSERT_TRUE(x.has_grad());
  EXPECT_DOUBLE_EQ(x.grad()[0], 3.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], -3.0);
  EXPECT_DOUBLE_EQ(x.grad()[2], 2.0);
}

TEST(Backward, NoTapeMeansPureEvaluation) {
  Tensor a = ones({2, 2}, true);
  Tensor y = mul(a, a);
  EXPECT_FALSE(y.needs_grad());
  EXPECT_FALSE(a.has_grad());
}

TEST(Numerics, NonFiniteForwardIdentifiesOp) {
  Tensor big = Tensor::full({2}, 1e308);
  try {
    Tensor y = mul(big, big);
    FAIL() << "expected NumericsError";
  } catch (const NumericsError& e) {
    EXPECT_NE(std::string(e.what()).find("mul"), std::string::npos);
  }
}

TEST(Numerics, DeterministicAcrossRuns) {
  auto run = [] {
    Rng rng(123);
    Tensor x = Tensor::uniform({4, 8}, rng, -1.0, 1.0, true);
    Tensor w = Tensor::uniform({8, 8}, rng, -0.5, 0.5, true);
    Tape tape;
    Tape::Scope scope(tape);
    Rng drop_rng(7);
    Tensor h = dropout(relu(matmul(x, w)), 0.3, drop_rng, true);
    Tensor loss = mean_all(mul(h, h));
    tape.backward(loss);
    return std::make_pair(loss.item(), w.grad());
  };
  auto [l1, g1] = run();
  auto [l2, g2] = run();
  EXPECT_EQ(l1, l2);
  EXPECT_EQ(g1, g2);
}

TEST(GradCheck, EveryOpPassesFiniteDifferenceSuite) {
  const auto results = gradcheck::run_op_suite(2024);
  ASSERT_FALSE(results.empty());
  for (const auto& r : results) {
    EXPECT_TRUE(r.passes(1e-4)) << r.name << " max rel err " << r.max_rel_err;
  }
}
