#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "dtn/norm.hpp"

using namespace dtn;

namespace {

Tensor random_tokens(std::size_t b, std::size_t t, std::size_t c, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor x({b, t, c});
  for (auto& v : x.storage()) v = n(rng);
  return x;
}

Tensor permute_tokens(const Tensor& x, const std::vector<std::size_t>& perm) {
  Tensor y(x.shape());
  for (std::size_t b = 0; b < x.dim(0); ++b)
    for (std::size_t t = 0; t < x.dim(1); ++t)
      for (std::size_t c = 0; c < x.dim(2); ++c) y(b, t, c) = x(b, perm[t], c);
  return y;
}

double token_norm(const Tensor& x, std::size_t b, std::size_t t) {
  double s = 0;
  for (std::size_t c = 0; c < x.dim(2); ++c) s += x(b, t, c) * x(b, t, c);
  return std::sqrt(s);
}

}  // namespace

TEST(LnStats, TokenExample) {
  const Tensor x({1, 1, 4}, {1, 2, 3, 4});
  const auto s = ln_stats(x);
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_DOUBLE_EQ(s.mean(0, 0, c), 2.5);
    EXPECT_DOUBLE_EQ(s.var(0, 0, c), 1.25);
  }
  EXPECT_EQ(s.provenance, StatsProvenance::kLayer);
}

TEST(LnStats, ConstantInput) {
  const Tensor x({2, 3, 4}, -1.5);
  const auto s = ln_stats(x);
  for (double v : s.mean.storage()) EXPECT_EQ(v, -1.5);
  for (double v : s.var.storage()) EXPECT_EQ(v, 0.0);
}

TEST(LnStats, PermutationEquivariant) {
  const Tensor x = random_tokens(2, 5, 6, 3);
  const std::vector<std::size_t> perm = {3, 0, 4, 1, 2};
  const auto s = ln_stats(x);
  const auto sp = ln_stats(permute_tokens(x, perm));
  EXPECT_EQ(sp.mean, permute_tokens(s.mean, perm));
  EXPECT_EQ(sp.var, permute_tokens(s.var, perm));
}

TEST(InStats, ChannelExample) {
  const Tensor x({1, 2, 1}, {1, 3});
  const auto s = in_stats(x);
  EXPECT_DOUBLE_EQ(s.mean(0, 0, 0), 2.0);
  EXPECT_DOUBLE_EQ(s.mean(0, 1, 0), 2.0);
  EXPECT_DOUBLE_EQ(s.var(0, 1, 0), 1.0);
  EXPECT_EQ(s.provenance, StatsProvenance::kInstance);
}

TEST(InStats, IdenticalTokensHaveZeroVariance) {
  Tensor x({1, 4, 3});
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t c = 0; c < 3; ++c) x(0, t, c) = static_cast<double>(c) - 0.5;
  const auto s = in_stats(x);
  for (double v : s.var.storage()) EXPECT_EQ(v, 0.0);
}

TEST(InStats, PerSampleAndPermutationInvariant) {
  const Tensor x = random_tokens(3, 6, 4, 8);
  const auto s = in_stats(x);
  const auto sp = in_stats(permute_tokens(x, {5, 4, 3, 2, 1, 0}));
  EXPECT_LT(max_abs_diff(s.mean, sp.mean), 1e-15);
  EXPECT_LT(max_abs_diff(s.var, sp.var), 1e-15);
  // Sample 1 must not see sample 0.
  Tensor y = x;
  for (std::size_t t = 0; t < 6; ++t) y(0, t, 0) += 100.0;
  const auto sy = in_stats(y);
  EXPECT_EQ(sy.mean(1, 0, 0), s.mean(1, 0, 0));
}

TEST(AffineNormalize, LnPathStandardizesTokens) {
  const Tensor x = random_tokens(2, 5, 8, 11);
  const double eps = 1e-5;
  const auto s = ln_stats(x);
  const Tensor y = affine_normalize(x, s, AffineParams(8), eps);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t t = 0; t < 5; ++t) {
      std::vector<double> row;
      for (std::size_t c = 0; c < 8; ++c) row.push_back(y(b, t, c));
      const auto mv = reduce_stats(row);
      const double var = s.var(b, t, 0);
      EXPECT_NEAR(mv.mean, 0.0, 1e-9);
      EXPECT_NEAR(mv.var, var / (var + eps), 1e-12);
    }
}

TEST(AffineNormalize, ZeroGammaGivesBeta) {
  const Tensor x = random_tokens(1, 3, 4, 12);
  AffineParams p(4);
  p.gamma.assign(4, 0.0);
  p.beta = {1, -2, 3, 0.5};
  const Tensor y = affine_normalize(x, ln_stats(x), p);
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(y(0, t, c), p.beta[c]);
}

TEST(AffineNormalize, LnIsInvariantToPerTokenScaling) {
  const Tensor x = random_tokens(1, 4, 6, 13);
  Tensor scaled = x;
  const double alpha[] = {0.5, 3.0, 10.0, 1.0};
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t c = 0; c < 6; ++c) scaled(0, t, c) *= alpha[t];
  const double eps = 1e-14;
  EXPECT_LT(max_abs_diff(layer_norm(x, AffineParams(6), eps), layer_norm(scaled, AffineParams(6), eps)),
            1e-9);
}

TEST(AffineNormalize, RejectsBadArguments) {
  const Tensor x = random_tokens(1, 2, 4, 14);
  EXPECT_THROW(affine_normalize(x, ln_stats(x), AffineParams(4), 0.0), ConfigError);
  EXPECT_THROW(affine_normalize(x, ln_stats(x), AffineParams(4), -1e-5), ConfigError);
  EXPECT_THROW(affine_normalize(x, ln_stats(x), AffineParams(3)), DimensionError);
  const Tensor other = random_tokens(1, 3, 4, 15);
  EXPECT_THROW(affine_normalize(x, ln_stats(other), AffineParams(4)), DimensionError);
}

TEST(LayerNorm, TokenNormsFlattenToSqrtC) {
  const Tensor x = random_tokens(2, 7, 16, 21);
  const Tensor y = layer_norm(x, AffineParams(16), 1e-12);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t t = 0; t < 7; ++t) EXPECT_NEAR(token_norm(y, b, t) / 4.0, 1.0, 1e-6);
}

TEST(InstanceNorm, KeepsTokenVariation) {
  // Shared channel profile, distinct token offsets and scales.
  Tensor x({1, 4, 4});
  const double profile[] = {1, -1, 2, -2};
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t c = 0; c < 4; ++c) x(0, t, c) = (1.0 + t) * profile[c] + 3.0 * t;
  const Tensor in = instance_norm(x, AffineParams(4));
  const Tensor ln = layer_norm(x, AffineParams(4), 1e-12);
  double lo = 1e9, hi = 0;
  for (std::size_t t = 0; t < 4; ++t) {
    lo = std::min(lo, token_norm(in, 0, t));
    hi = std::max(hi, token_norm(in, 0, t));
    EXPECT_NEAR(token_norm(ln, 0, t), 2.0, 1e-6);
  }
  EXPECT_GT(hi - lo, 0.1);
}

TEST(LayerNorm, DegenerateTokenGivesBeta) {
  Tensor x = random_tokens(1, 3, 4, 22);
  for (std::size_t c = 0; c < 4; ++c) x(0, 1, c) = 5.0;
  AffineParams p(4);
  p.beta = {0.1, 0.2, 0.3, 0.4};
  const Tensor y = layer_norm(x, p);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(y(0, 1, c), p.beta[c]);
  for (double v : y.storage()) EXPECT_TRUE(std::isfinite(v));
}

TEST(LayerNorm, RejectsNonFiniteInput) {
  Tensor x({1, 2, 2});
  x(0, 1, 1) = INFINITY;
  EXPECT_THROW(layer_norm(x, AffineParams(2)), NonFiniteError);
}

TEST(Float32Path, MatchesDoubleClosely) {
  const Tensor x = random_tokens(2, 5, 8, 23);
  const TensorF xf = x.cast<float>();
  const TensorF yf = layer_norm(xf, BasicAffineParams<float>(8));
  const Tensor y = layer_norm(x, AffineParams(8));
  EXPECT_LT(max_abs_diff(yf.cast<double>(), y), 1e-4);
}
