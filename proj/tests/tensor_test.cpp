#include "dbn/tensor.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "dbn/grad_check.hpp"
#include "dbn/rng.hpp"

using namespace dbn;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> d(numel(shape));
  for (double& v : d) v = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(d));
}

}  // namespace

TEST(Matmul, IdentityPassesThrough) {
  Tensor eye = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor b = Tensor::from({3, 2}, {1, 2, 3, 4, 5, 6});
  Tensor y = matmul(eye, b);
  EXPECT_EQ(y.data(), b.data());
}

TEST(Matmul, HandComputedProduct) {
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from({2, 1}, {5, 6});
  Tensor y = matmul(a, b);
  EXPECT_DOUBLE_EQ(y.data()[0], 17.0);
  EXPECT_DOUBLE_EQ(y.data()[1], 39.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tensor a = Tensor::from({2, 3}, {});
  Tensor b = Tensor::from({4, 5}, {});
  try {
    matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2,3]"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[4,5]"), std::string::npos);
  }
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  Rng rng(7);
  Tensor b0 = random_tensor({3, 4}, rng);
  auto f = [&](const Tensor& a) { return sum(matmul(a, b0)); };
  auto report = grad_check(f, random_tensor({2, 3}, rng));
  EXPECT_LT(report.max_rel_err, 1e-6);

  Tensor a0 = random_tensor({2, 3}, rng);
  auto g = [&](const Tensor& b) { return sum(matmul(a0, b)); };
  EXPECT_LT(grad_check(g, random_tensor({3, 4}, rng)).max_rel_err, 1e-6);
}

TEST(MatmulNt, AgreesWithExplicitTranspose) {
  Rng rng(3);
  Tensor a = random_tensor({3, 5}, rng);
  Tensor b = random_tensor({4, 5}, rng);
  Tensor y1 = matmul_nt(a, b);
  Tensor y2 = matmul(a, transpose(b));
  for (long i = 0; i < y1.size(); ++i) EXPECT_NEAR(y1.data()[i], y2.data()[i], 1e-12);
  auto f = [&](const Tensor& t) { return sum(mul(matmul_nt(t, b), matmul_nt(t, b))); };
  EXPECT_LT(grad_check(f, a).max_rel_err, 1e-6);
}

TEST(Conv2d, OneByOneIdentityKernel) {
  Rng rng(11);
  Tensor x = random_tensor({1, 4, 5}, rng);
  Tensor k = Tensor::from({1, 1, 1, 1}, {1.0});
  Tensor y = conv2d(x, k, 0, 0);
  EXPECT_EQ(y.shape(), x.shape());
  EXPECT_EQ(y.data(), x.data());
}

TEST(Conv2d, AllOnesKernelSumsNeighborhood) {
  Tensor x = Tensor::full({1, 5, 5}, 1.0);
  Tensor k = Tensor::full({1, 1, 3, 3}, 1.0);
  Tensor y = conv2d(x, k, 1, 1);
  ASSERT_EQ(y.shape(), (Shape{1, 5, 5}));
  // interior cell sees the full 3x3 window
  EXPECT_DOUBLE_EQ(y.data()[2 * 5 + 2], 9.0);
  // corner sees only 4 cells
  EXPECT_DOUBLE_EQ(y.data()[0], 4.0);
}

TEST(Conv2d, KernelLargerThanPaddedInputThrows) {
  Tensor x = Tensor::full({1, 2, 2}, 1.0);
  Tensor k = Tensor::full({1, 1, 5, 5}, 1.0);
  EXPECT_THROW(conv2d(x, k, 0, 0), DimensionError);
}

TEST(Conv2d, KernelGradientMatchesFiniteDifferences) {
  Rng rng(13);
  Tensor x0 = random_tensor({2, 6, 5}, rng);
  auto f = [&](const Tensor& k) { return sum(mul(conv2d(x0, k, 1, 1), conv2d(x0, k, 1, 1))); };
  EXPECT_LT(grad_check(f, random_tensor({3, 2, 3, 3}, rng)).max_rel_err, 1e-5);
  Tensor k0 = random_tensor({3, 2, 3, 3}, rng);
  auto g = [&](const Tensor& x) { return sum(mul(conv2d(x, k0, 1, 1), conv2d(x, k0, 1, 1))); };
  EXPECT_LT(grad_check(g, x0).max_rel_err, 1e-5);
}

TEST(MaxPool, ConstantInputStaysConstant) {
  Tensor x = Tensor::full({1, 4, 4}, 2.5);
  Tensor y = maxpool2x2(x);
  for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 2.5);
}

TEST(MaxPool, PicksWindowMax) {
  Tensor x = Tensor::from({1, 2, 2}, {1, 2, 3, 4});
  EXPECT_DOUBLE_EQ(maxpool2x2(x).item(), 4.0);
}

TEST(MaxPool, TooSmallInputThrows) {
  Tensor x = Tensor::full({1, 1, 4}, 0.0);
  EXPECT_THROW(maxpool2x2(x), DimensionError);
}

TEST(MaxPool, TieRoutesGradientToFirstRowMajorCell) {
  Tensor x = Tensor::param({1, 2, 2}, {5, 5, 1, 2});
  Tensor loss = sum(maxpool2x2(x));
  backward(loss);
  EXPECT_DOUBLE_EQ(x.grad()[0], 1.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 0.0);
  EXPECT_DOUBLE_EQ(x.grad()[2], 0.0);
  EXPECT_DOUBLE_EQ(x.grad()[3], 0.0);

  // FD agrees once the tie is broken by a perturbation toward the chosen cell.
  Tensor x2 = Tensor::from({1, 2, 2}, {5.0 + 1e-3, 5.0, 1.0, 2.0});
  auto f = [](const Tensor& t) { return sum(maxpool2x2(t)); };
  EXPECT_LT(grad_check(f, x2).max_rel_err, 1e-8);
}

TEST(Softmax, UniformLogitsGiveUniformDistribution) {
  Tensor x = Tensor::full({4}, 0.7);
  Tensor y = softmax_rows(x);
  for (double v : y.data()) EXPECT_NEAR(v, 0.25, 1e-15);
}

TEST(Softmax, ShiftInvariance) {
  Rng rng(5);
  Tensor x = random_tensor({6}, rng, -3, 3);
  std::vector<double> shifted = x.data();
  for (double& v : shifted) v += 123.456;
  Tensor y1 = softmax_rows(x);
  Tensor y2 = softmax_rows(Tensor::from({6}, shifted));
  for (int i = 0; i < 6; ++i) EXPECT_NEAR(y1.data()[i], y2.data()[i], 1e-12);
}

TEST(Softmax, DirectEvaluation) {
  Tensor y = softmax_rows(Tensor::from({2}, {2, 0}));
  EXPECT_NEAR(y.data()[0], 0.880797, 1e-6);
  EXPECT_NEAR(y.data()[1], 0.119203, 1e-6);
}

TEST(Softmax, RowsSumToOneForRandomInputs) {
  Rng rng(17);
  for (int t = 0; t < 20; ++t) {
    Tensor x = random_tensor({5, 7}, rng, -30, 30);
    Tensor y = softmax_rows(x);
    for (int r = 0; r < 5; ++r) {
      double s = 0;
      for (int c = 0; c < 7; ++c) s += y.data()[r * 7 + c];
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(CrossEntropySoft, OneHotReducesToHardCrossEntropy) {
  Tensor logits = Tensor::from({3}, {1.0, 2.0, 0.5});
  std::vector<double> onehot{0, 1, 0};
  double loss = cross_entropy_soft(logits, onehot).item();
  Tensor p = softmax_rows(logits);
  EXPECT_NEAR(loss, -std::log(p.data()[1]), 1e-12);
}

TEST(CrossEntropySoft, UniformTargetIsMeanNegLogProb) {
  Tensor logits = Tensor::from({4}, {0.3, -1.2, 2.0, 0.0});
  std::vector<double> uniform(4, 0.25);
  double loss = cross_entropy_soft(logits, uniform).item();
  Tensor p = softmax_rows(logits);
  double expect = 0;
  for (double v : p.data()) expect -= 0.25 * std::log(v);
  EXPECT_NEAR(loss, expect, 1e-12);
}

TEST(CrossEntropySoft, GradientIsSoftmaxMinusTarget) {
  Rng rng(23);
  Tensor logits = Tensor::param({5}, {0.1, -0.4, 0.9, 0.0, 1.3});
  std::vector<double> target{0.1, 0.2, 0.3, 0.25, 0.15};
  Tensor loss = cross_entropy_soft(logits, target);
  backward(loss);
  Tensor p = softmax_rows(Tensor::from({5}, logits.data()));
  for (int i = 0; i < 5; ++i) EXPECT_NEAR(logits.grad()[i], p.data()[i] - target[i], 1e-12);

  auto f = [&](const Tensor& t) { return cross_entropy_soft(t, target); };
  EXPECT_LT(grad_check(f, random_tensor({5}, rng)).max_rel_err, 1e-6);
}

TEST(CrossEntropySoft, RejectsInvalidTarget) {
  Tensor logits = Tensor::from({3}, {1, 2, 3});
  EXPECT_THROW(cross_entropy_soft(logits, {0.5, 0.4, 0.2}), ValidationError);
  EXPECT_THROW(cross_entropy_soft(logits, {1.2, -0.2, 0.0}), ValidationError);
}

TEST(ConcatChannels, EmptyOperandPassesThrough) {
  Rng rng(29);
  Tensor x = random_tensor({2, 3, 4}, rng);
  Tensor empty = Tensor::from({0, 3, 4}, {});
  Tensor y = concat_channels(x, empty);
  EXPECT_EQ(y.data(), x.data());
}

TEST(ConcatChannels, ShapeArithmetic) {
  Tensor a = Tensor::full({8, 30, 12}, 1.0);
  Tensor b = Tensor::full({8, 30, 12}, 2.0);
  EXPECT_EQ(concat_channels(a, b).shape(), (Shape{16, 30, 12}));
}

TEST(ConcatChannels, SpatialMismatchThrows) {
  Tensor a = Tensor::full({2, 3, 4}, 0.0);
  Tensor b = Tensor::full({2, 4, 4}, 0.0);
  EXPECT_THROW(concat_channels(a, b), DimensionError);
}

TEST(ConcatChannels, SplitRoundTrip) {
  Rng rng(31);
  Tensor a = random_tensor({3, 2, 2}, rng);
  Tensor b = random_tensor({2, 2, 2}, rng);
  auto [a2, b2] = split_channels(concat_channels(a, b), 3);
  EXPECT_EQ(a2.data(), a.data());
  EXPECT_EQ(b2.data(), b.data());
}

TEST(LayerNorm, ConstantVectorNormalizesToZeros) {
  Tensor x = Tensor::full({6}, 3.25);
  Tensor y = layernorm(x, Tensor::full({6}, 1.0), Tensor::full({6}, 0.0));
  for (double v : y.data()) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(LayerNorm, GradientMatchesFiniteDifferences) {
  Rng rng(37);
  Tensor gain = random_tensor({5}, rng, 0.5, 1.5);
  Tensor bias = random_tensor({5}, rng, -0.2, 0.2);
  auto f = [&](const Tensor& t) {
    Tensor y = layernorm(t, gain, bias);
    return sum(mul(y, y));
  };
  EXPECT_LT(grad_check(f, random_tensor({3, 5}, rng)).max_rel_err, 1e-4);
}

TEST(Relu, NegativeInputsZeroOut) {
  Tensor x = Tensor::from({4}, {-2, -0.5, 0.5, 2});
  Tensor y = relu(x);
  EXPECT_DOUBLE_EQ(y.data()[0], 0.0);
  EXPECT_DOUBLE_EQ(y.data()[1], 0.0);
  EXPECT_DOUBLE_EQ(y.data()[2], 0.5);
  EXPECT_DOUBLE_EQ(y.data()[3], 2.0);
}

TEST(Embedding, GradientAccumulatesOnlyOnLookedUpRows) {
  Tensor table = Tensor::param({4, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12});
  Tensor out = embedding_lookup(table, {2, 2, 0});
  backward(sum(out));
  // row 2 used twice, row 0 once, rows 1 and 3 untouched
  for (int j = 0; j < 3; ++j) {
    EXPECT_DOUBLE_EQ(table.grad()[0 * 3 + j], 1.0);
    EXPECT_DOUBLE_EQ(table.grad()[1 * 3 + j], 0.0);
    EXPECT_DOUBLE_EQ(table.grad()[2 * 3 + j], 2.0);
    EXPECT_DOUBLE_EQ(table.grad()[3 * 3 + j], 0.0);
  }
  auto f = [](const Tensor& t) {
    Tensor o = embedding_lookup(t, {1, 3});
    return sum(mul(o, o));
  };
  Rng rng(41);
  EXPECT_LT(grad_check(f, random_tensor({4, 3}, rng)).max_rel_err, 1e-6);
}

TEST(Backward, SumYieldsAllOnes) {
  Tensor x = Tensor::param({2, 3}, {1, 2, 3, 4, 5, 6});
  backward(sum(x));
  for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 1.0);
}

TEST(Backward, SumOfSquaresYieldsTwoX) {
  Tensor x = Tensor::param({4}, {1, -2, 3, 0.5});
  backward(sum(mul(x, x)));
  for (int i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2.0 * x.data()[i]);
}

TEST(Backward, NonScalarLossThrows) {
  Tensor x = Tensor::param({3}, {1, 2, 3});
  Tensor y = mul(x, x);
  EXPECT_THROW(backward(y), UsageError);
}

TEST(Backward, RepeatedCallWithoutRebuildThrows) {
  Tensor x = Tensor::param({3}, {1, 2, 3});
  Tensor loss = sum(mul(x, x));
  backward(loss);
  EXPECT_THROW(backward(loss), UsageError);
}

TEST(Backward, SharedNodeReceivesFullGradientOnce) {
  Tensor x = Tensor::param({2}, {3, 4});
  Tensor y = mul(x, x);          // used twice below
  Tensor loss = sum(add(y, y));  // d/dx = 4x
  backward(loss);
  EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 16.0);
}

TEST(Forward, DeterministicBitwise) {
  Rng rng(43);
  Tensor a = random_tensor({4, 4}, rng);
  Tensor b = random_tensor({4, 4}, rng);
  Tensor y1 = softmax_rows(matmul(a, b));
  Tensor y2 = softmax_rows(matmul(a, b));
  EXPECT_EQ(y1.data(), y2.data());
}

TEST(Forward, NoNanFromFiniteInputs) {
  Rng rng(47);
  for (int t = 0; t < 10; ++t) {
    Tensor x = random_tensor({3, 8}, rng, -500, 500);
    Tensor y = softmax_rows(x);
    Tensor z = layernorm(x, Tensor::full({8}, 1.0), Tensor::full({8}, 0.0));
    for (double v : y.data()) EXPECT_TRUE(std::isfinite(v));
    for (double v : z.data()) EXPECT_TRUE(std::isfinite(v));
  }
  // layernorm of an all-equal row exercises the epsilon path
  Tensor c = Tensor::full({4}, 9.0);
  for (double v : layernorm(c, Tensor::full({4}, 1.0), Tensor::full({4}, 0.0)).data())
    EXPECT_TRUE(std::isfinite(v));
}

TEST(NoGrad, SkipsTapeRecording) {
  Tensor x = Tensor::param({2}, {1, 2});
  NoGradGuard ng;
  Tensor y = mul(x, x);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Ops, SliceStackAndBiasGradients) {
  Rng rng(53);
  Tensor w = random_tensor({4, 3}, rng);
  auto f = [&](const Tensor& t) {
    Tensor y = slice_cols(matmul(t, w), 1, 2);
    return sum(mul(y, y));
  };
  EXPECT_LT(grad_check(f, random_tensor({2, 4}, rng)).max_rel_err, 1e-6);

  auto g = [&](const Tensor& b) {
    Tensor x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor y = add_row_bias(x, b);
    return sum(mul(y, y));
  };
  EXPECT_LT(grad_check(g, random_tensor({3}, rng)).max_rel_err, 1e-6);

  auto h = [&](const Tensor& t) {
    std::vector<Tensor> rows{slice_row(t, 1), slice_row(t, 0)};
    Tensor s = stack_rows(rows);
    return sum(mul(s, s));
  };
  EXPECT_LT(grad_check(h, random_tensor({2, 5}, rng)).max_rel_err, 1e-6);
}

TEST(Ops, GatingReductionsGradients) {
  Rng rng(59);
  auto f1 = [](const Tensor& t) { return sum(mul(spatial_mean(t), spatial_mean(t))); };
  EXPECT_LT(grad_check(f1, random_tensor({3, 4, 5}, rng)).max_rel_err, 1e-6);
  auto f2 = [](const Tensor& t) { return sum(mul(channel_mean(t), channel_mean(t))); };
  EXPECT_LT(grad_check(f2, random_tensor({3, 4, 5}, rng)).max_rel_err, 1e-6);
  auto f3 = [](const Tensor& t) { return sum(spatial_max(t)); };
  EXPECT_LT(grad_check(f3, random_tensor({3, 4, 5}, rng)).max_rel_err, 1e-6);
  auto f4 = [](const Tensor& t) { return sum(channel_max(t)); };
  EXPECT_LT(grad_check(f4, random_tensor({3, 4, 5}, rng)).max_rel_err, 1e-6);

  Tensor x0 = random_tensor({3, 2, 2}, rng);
  auto f5 = [&](const Tensor& g) { return sum(mul(scale_channels(x0, g), scale_channels(x0, g))); };
  EXPECT_LT(grad_check(f5, random_tensor({3}, rng)).max_rel_err, 1e-6);
  auto f6 = [&](const Tensor& g) { return sum(scale_spatial(x0, g)); };
  EXPECT_LT(grad_check(f6, random_tensor({1, 2, 2}, rng)).max_rel_err, 1e-6);
  auto f7 = [](const Tensor& t) { return sum(mul(sigmoid(t), sigmoid(t))); };
  EXPECT_LT(grad_check(f7, random_tensor({6}, rng)).max_rel_err, 1e-6);
}
