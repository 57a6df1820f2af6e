#include <cmath>
#include <numbers>
#include <random>

#include <gtest/gtest.h>
#include <unsupported/Eigen/MatrixFunctions>

#include "infodisent/head.hpp"
#include "test_util.hpp"

namespace infodisent {
namespace {

using testing::random_map;
using testing::random_matrix;

FeatureMap map_from(int c, int h, int w, std::vector<double> data) { return FeatureMap(c, h, w, std::move(data)); }

TEST(AvgPoolHead, ConstantMapPoolsToTheConstant) {
  FeatureMap f(3, 2, 2);
  for (auto& v : f.data()) v = 1.75;
  const HeadOutput out = avg_pool_head(f, Matrix::Identity(3, 3), Vector::Zero(3));
  for (int c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(out.pooled.values[c], 1.75);
}

TEST(AvgPoolHead, IdentityWeightsSoftmaxClosedForm) {
  const FeatureMap f = map_from(2, 1, 1, {1.0, 0.0});
  const HeadOutput out = avg_pool_head(f, Matrix::Identity(2, 2), Vector::Zero(2));
  EXPECT_DOUBLE_EQ(out.logits[0], 1.0);
  EXPECT_DOUBLE_EQ(out.logits[1], 0.0);
  const double e = std::numbers::e;
  EXPECT_NEAR(out.probs[0], e / (e + 1), 1e-15);
  EXPECT_NEAR(out.probs[1], 1 / (e + 1), 1e-15);
}

TEST(AvgPoolHead, MeanMatchesExplicitSummation) {
  std::mt19937_64 rng(11);
  const FeatureMap f = random_map(3, 2, 2, rng);
  const HeadOutput out = avg_pool_head(f, Matrix::Identity(3, 3), Vector::Zero(3));
  for (int c = 0; c < 3; ++c) {
    double sum = 0;
    for (int r = 0; r < 2; ++r)
      for (int s = 0; s < 2; ++s) sum += f.at(c, r, s);
    EXPECT_NEAR(out.pooled.values[c], sum / 4, 1e-15);
  }
}

TEST(AvgPoolHead, ChannelMismatchIsRejected) {
  FeatureMap f(3, 1, 1);
  EXPECT_THROW(avg_pool_head(f, Matrix::Identity(2, 2), Vector::Zero(2)), DimensionError);
}

TEST(MixChannels, IdentityLeavesInputUnchanged) {
  std::mt19937_64 rng(12);
  const FeatureMap f = random_map(4, 3, 2, rng);
  EXPECT_EQ(mix_channels(f, Matrix::Identity(4, 4)).data(), f.data());
}

TEST(MixChannels, QuarterTurnMovesPixelVector) {
  const FeatureMap f = map_from(2, 1, 1, {1.0, 0.0});
  const double a = std::numbers::pi / 2;
  Matrix s(2, 2);
  s << 0, a, -a, 0;
  const FeatureMap j = mix_channels(f, expm(s));
  EXPECT_NEAR(j.at(0, 0, 0), 0.0, 1e-15);
  EXPECT_NEAR(j.at(1, 0, 0), -1.0, 1e-15);
}

TEST(MixChannels, OrthogonalMapPreservesPixelNorms) {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const int d = 2 + trial;
    const FeatureMap f = random_map(d, 3, 4, rng);
    const FeatureMap j = mix_channels(f, expm(skew(random_matrix(d, d, rng))));
    for (int p = 0; p < f.pixels(); ++p) {
      const double before = f.as_matrix().col(p).norm();
      EXPECT_LE(std::abs(j.as_matrix().col(p).norm() - before) / before, 1e-8);
    }
  }
}

TEST(MixChannels, DimensionMismatchIsRejected) {
  FeatureMap f(3, 2, 2);
  EXPECT_THROW(mix_channels(f, Matrix::Identity(2, 2)), DimensionError);
}

TEST(MxPool, AllZeroChannelPoolsToZero) {
  const PooledVector v = mx_pool(FeatureMap(1, 2, 2));
  EXPECT_EQ(v.values[0], 0.0);
  EXPECT_EQ(v.pos_val[0], 0.0);
  EXPECT_EQ(v.neg_val[0], 0.0);
}

TEST(MxPool, SignedExtremesAndLocations) {
  const PooledVector v = mx_pool(map_from(1, 2, 2, {1, -2, 3, 0}));
  EXPECT_EQ(v.values[0], 1.0);
  EXPECT_EQ(v.pos_val[0], 3.0);
  EXPECT_EQ(v.neg_val[0], 2.0);
  EXPECT_EQ(v.pos_loc[0], (GridLoc{1, 0}));
  EXPECT_EQ(v.neg_loc[0], (GridLoc{0, 1}));
}

TEST(MxPool, NoPositiveEntries) { EXPECT_EQ(mx_pool(map_from(1, 1, 2, {-1, -4})).values[0], -4.0); }

TEST(MxPool, TiesBreakAtFirstRowMajorOccurrence) {
  const PooledVector v = mx_pool(map_from(1, 2, 2, {0, 5, 5, -1}));
  EXPECT_EQ(v.pos_loc[0], (GridLoc{0, 1}));
}

TEST(MxPool, EmptyGridIsRejected) { EXPECT_THROW(mx_pool(FeatureMap()), DimensionError); }

TEST(GumbelSoftmax, SymmetricInputsSplitEvenly) {
  const Vector y = gumbel_softmax(Vector::Zero(2), 1.0);
  EXPECT_DOUBLE_EQ(y[0], 0.5);
  EXPECT_DOUBLE_EQ(y[1], 0.5);
}

TEST(GumbelSoftmax, LogTwoGivesTwoThirds) {
  Vector x(2);
  x << std::log(2.0), 0.0;
  const Vector y = gumbel_softmax(x, 1.0);
  EXPECT_NEAR(y[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(y[1], 1.0 / 3.0, 1e-15);
}

TEST(GumbelSoftmax, LowTemperatureApproachesOneHot) {
  Vector x(3);
  x << 0.1, 0.9, 0.3;
  const Vector y = gumbel_softmax(x, 1e-3);
  EXPECT_NEAR(y[1], 1.0, 1e-12);
  EXPECT_NEAR(y[0], 0.0, 1e-12);
  EXPECT_NEAR(y[2], 0.0, 1e-12);
}

TEST(GumbelSoftmax, NonPositiveTemperatureIsRejected) {
  EXPECT_THROW(gumbel_softmax(Vector::Zero(2), 0.0), ParameterError);
  EXPECT_THROW(gumbel_softmax(Vector::Zero(2), -1.0), ParameterError);
}

TEST(GumbelSoftmax, OutputLiesOnTheSimplex) {
  std::mt19937_64 rng(14);
  GumbelNoise noise(15);
  for (int trial = 0; trial < 500; ++trial) {
    const int n = 1 + trial % 40;
    const Vector x = testing::random_vector(n, rng, 3.0);
    const Vector y = gumbel_softmax(x, 0.05 + (trial % 10) * 0.2, noise.sample(n));
    EXPECT_GE(y.minCoeff(), 0.0);
    EXPECT_NEAR(y.sum(), 1.0, 1e-12);
  }
}

TEST(GumbelNoise, SeededStreamsRepeatAndStayFinite) {
  GumbelNoise a(99), b(99);
  for (int i = 0; i < 1000; ++i) {
    const double x = a.sample();
    EXPECT_EQ(x, b.sample());
    EXPECT_TRUE(std::isfinite(x));
  }
}

TEST(SoftPool, HardModeMatchesMxPool) {
  const FeatureMap f = map_from(1, 2, 2, {1, -2, 3, 0});
  EXPECT_EQ(soft_pool(f, 0.7, true, nullptr).values[0], 1.0);
}

TEST(SoftPool, HandEvaluatedTwoTermSoftmax) {
  const FeatureMap f = map_from(1, 1, 2, {1, 3});
  const double e1 = std::exp(1.0), e3 = std::exp(3.0);
  const double want = (e1 * 1 + e3 * 3) / (e1 + e3);
  const PooledVector v = soft_pool(f, 1.0, false, nullptr);
  EXPECT_NEAR(v.pos_val[0], want, 1e-14);
  EXPECT_EQ(v.neg_val[0], 0.0);
  EXPECT_NEAR(v.values[0], want, 1e-14);
}

TEST(SoftPool, LowTemperatureApproachesMxPool) {
  std::mt19937_64 rng(16);
  for (int trial = 0; trial < 100; ++trial) {
    const FeatureMap f = random_map(3, 3, 3, rng, 5.0);
    const PooledVector hard = mx_pool(f);
    const PooledVector soft = soft_pool(f, 0.01, false, nullptr);
    for (int c = 0; c < 3; ++c) {
      // second-largest gap per branch controls convergence; skip near-ties
      std::vector<double> pos, neg;
      for (int p = 0; p < f.pixels(); ++p) {
        pos.push_back(std::max(f.as_matrix()(c, p), 0.0));
        neg.push_back(std::max(-f.as_matrix()(c, p), 0.0));
      }
      std::sort(pos.rbegin(), pos.rend());
      std::sort(neg.rbegin(), neg.rend());
      if (pos[0] - pos[1] < 0.5 || neg[0] - neg[1] < 0.5) continue;
      EXPECT_LE(std::abs(soft.values[c] - hard.values[c]), 1e-6);
    }
  }
}

TEST(SoftPool, HardModeEqualsMxPoolBitwiseOnRandomMaps) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 1000; ++trial) {
    const FeatureMap f = random_map(1 + trial % 6, 1 + trial % 4, 1 + (trial / 4) % 4, rng);
    const PooledVector a = mx_pool(f);
    const PooledVector b = soft_pool(f, 0.3, true, nullptr);
    ASSERT_EQ(a.values, b.values);
    ASSERT_EQ(a.pos_loc, b.pos_loc);
    ASSERT_EQ(a.neg_loc, b.neg_loc);
  }
}

TEST(SoftPool, AllNegativeChannelHasZeroPositiveBranch) {
  const PooledVector v = soft_pool(map_from(1, 1, 3, {-1, -2, -0.5}), 1.0, false, nullptr);
  EXPECT_EQ(v.pos_val[0], 0.0);
}

TEST(SoftPool, RejectsBadTemperature) {
  EXPECT_THROW(soft_pool(FeatureMap(1, 1, 1), 0.0, false, nullptr), ParameterError);
}

HeadParams random_params(int d, int k, std::mt19937_64& rng) {
  HeadParams p = HeadParams::zeros(HeadKind::InfoDisent, d, k);
  p.generator = random_matrix(d, d, rng, 0.5);
  p.class_weights_raw = random_matrix(d, k, rng);
  p.bias = testing::random_vector(k, rng);
  return p;
}

TEST(InfoDisentForward, SinglePixelWithIdentityMapReturnsPixel) {
  HeadParams p = HeadParams::zeros(HeadKind::InfoDisent, 3, 3);
  p.class_weights_raw = Matrix::Identity(3, 3);
  const FeatureMap f = map_from(3, 1, 1, {0.5, -1.5, 2.0});
  const HeadOutput out = infodisent_forward(f, p, PoolMode::Inference);
  EXPECT_NEAR(out.logits[0], 0.5, 1e-15);
  EXPECT_NEAR(out.logits[1], -1.5, 1e-15);
  EXPECT_NEAR(out.logits[2], 2.0, 1e-15);
}

TEST(InfoDisentForward, ProbabilitiesSumToOne) {
  std::mt19937_64 rng(18);
  for (int trial = 0; trial < 50; ++trial) {
    const HeadParams p = random_params(5, 4, rng);
    const FeatureMap f = random_map(5, 3, 3, rng, 3.0);
    EXPECT_NEAR(infodisent_forward(f, p, PoolMode::Inference).probs.sum(), 1.0, 1e-9);
    GumbelNoise noise(static_cast<std::uint64_t>(trial));
    EXPECT_NEAR(infodisent_forward(f, p, PoolMode::Training, &noise).probs.sum(), 1.0, 1e-9);
  }
}

// Independent straight-line evaluation: rotate each pixel, take signed extremes, apply max(A, 0).
TEST(InfoDisentForward, MatchesStraightLineOracle) {
  std::mt19937_64 rng(19);
  for (int trial = 0; trial < 20; ++trial) {
    const int d = 2 + trial % 5, k = 2 + trial % 3, h = 1 + trial % 3, w = 2;
    const HeadParams p = random_params(d, k, rng);
    const FeatureMap f = random_map(d, h, w, rng);
    const Matrix gen = p.generator;
    const Matrix u = (gen - gen.transpose()).exp();  // Eigen's Pade route
    std::vector<double> v(static_cast<std::size_t>(d));
    for (int c = 0; c < d; ++c) {
      double best_pos = 0, best_neg = 0;
      for (int r = 0; r < h; ++r) {
        for (int s = 0; s < w; ++s) {
          double j = 0;
          for (int i = 0; i < d; ++i) j += u(c, i) * f.at(i, r, s);
          best_pos = std::max(best_pos, j);
          best_neg = std::max(best_neg, -j);
        }
      }
      v[static_cast<std::size_t>(c)] = best_pos - best_neg;
    }
    const HeadOutput out = infodisent_forward(f, p, PoolMode::Inference);
    for (int cls = 0; cls < k; ++cls) {
      double logit = p.bias[cls];
      for (int c = 0; c < d; ++c) logit += std::max(p.class_weights_raw(c, cls), 0.0) * v[static_cast<std::size_t>(c)];
      EXPECT_NEAR(out.logits[cls], logit, 1e-10);
    }
  }
}

TEST(Constrain, EffectiveWeightsAreNonnegative) {
  std::mt19937_64 rng(20);
  const Matrix raw = random_matrix(6, 4, rng);
  EXPECT_GE(constrain(raw).minCoeff(), 0.0);
  EXPECT_EQ(constrain(raw, HeadKind::Default), raw);
}

TEST(HeadParams, ValidateCatchesShapeAndTau) {
  HeadParams p = HeadParams::zeros(HeadKind::InfoDisent, 3, 2);
  EXPECT_NO_THROW(p.validate());
  p.tau = 0.0;
  EXPECT_THROW(p.validate(), ParameterError);
  p.tau = 1.0;
  p.bias = Vector::Zero(3);
  EXPECT_THROW(p.validate(), DimensionError);
}

}  // namespace
}  // namespace infodisent
