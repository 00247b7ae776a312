#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "dtn/dynamic_token_norm.hpp"

using namespace dtn;

namespace {

Tensor random_tokens(std::size_t b, std::size_t t, std::size_t c, std::mt19937_64& rng,
                     double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Tensor x({b, t, c});
  for (auto& v : x.storage()) v = n(rng);
  return x;
}

using Attn = std::vector<PositionalAttention<double>>;

std::span<const PositionalAttention<double>> span_of(const Attn& a) { return a; }

// Straight transcription of the mixed statistics, one element at a time.
NormStats oracle_stats(const Tensor& x, const MixingWeights<double>& lam, const Attn& attn,
                       const GridGeometry& g) {
  const std::size_t bn = x.dim(0), tn = x.dim(1), cn = x.dim(2), w = cn / g.heads;
  const std::size_t s = g.pool, pc = g.cols / s, tp = g.pooled_tokens();
  auto pooled = [&](std::size_t b, std::size_t q, std::size_t c) {
    const std::size_t r0 = (q / pc) * s, c0 = (q % pc) * s;
    double acc = 0;
    for (std::size_t dr = 0; dr < s; ++dr)
      for (std::size_t dc = 0; dc < s; ++dc) acc += x(b, (r0 + dr) * g.cols + c0 + dc, c);
    return acc / static_cast<double>(s * s);
  };
  NormStats out{Tensor(x.shape()), Tensor(x.shape()), StatsProvenance::kDynamic};
  for (std::size_t b = 0; b < bn; ++b)
    for (std::size_t t = 0; t < tn; ++t) {
      double mu = 0, sq = 0;
      for (std::size_t c = 0; c < cn; ++c) mu += x(b, t, c);
      mu /= static_cast<double>(cn);
      for (std::size_t c = 0; c < cn; ++c) sq += (x(b, t, c) - mu) * (x(b, t, c) - mu);
      const double var = sq / static_cast<double>(cn);
      const std::size_t p = (t / g.cols / s) * pc + (t % g.cols) / s;
      for (std::size_t c = 0; c < cn; ++c) {
        const std::size_t h = c / w;
        double m = 0, m2 = 0;
        for (std::size_t q = 0; q < tp; ++q) {
          const double v = pooled(b, q, c);
          m += attn[h].p(p, q) * v;
          m2 += attn[h].p(p, q) * v * v;
        }
        out.mean(b, t, c) = lam.mean[h] * mu + (1 - lam.mean[h]) * m;
        out.var(b, t, c) = lam.var[h] * var + (1 - lam.var[h]) * std::max(m2 - m * m, 0.0);
      }
    }
  return out;
}

}  // namespace

TEST(BandedMatrix, Examples) {
  const Tensor m = banded_matrix(4, 3);
  EXPECT_DOUBLE_EQ(m(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(m(0, 1), 0.5);
  EXPECT_EQ(m(0, 2), 0.0);
  EXPECT_EQ(m(0, 3), 0.0);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_DOUBLE_EQ(m(1, j), 1.0 / 3.0);
  EXPECT_EQ(m(1, 3), 0.0);
}

TEST(BandedMatrix, FullBandIsUniform) {
  for (std::size_t n = 1; n <= 9; ++n) {
    EXPECT_EQ(banded_matrix(n, 2 * n - 1), uniform_matrix(n));
    EXPECT_EQ(banded_matrix(n, 2 * n + 5), uniform_matrix(n));
  }
}

TEST(BandedMatrix, RejectsEvenWidth) {
  EXPECT_THROW(banded_matrix(4, 2), ConfigError);
  EXPECT_THROW(banded_matrix(4, 0), ConfigError);
}

TEST(PositionalAttention, ZeroCoefficientsAreUniform) {
  const auto r = build_rel_pos({3, 4, 1, 1});
  const auto pa = build_positional_attention<double>(r, {0, 0, 0});
  for (double v : pa.p.storage()) EXPECT_NEAR(v, 1.0 / 12.0, 1e-15);
}

TEST(PositionalAttention, SelfOffsetPeaksOnDiagonal) {
  for (std::size_t rows = 1; rows <= 5; ++rows)
    for (std::size_t cols = 2; cols <= 5; ++cols) {
      const auto pa = build_positional_attention<double>(build_rel_pos({rows, cols, 1, 1}), {-1, 0, 0});
      for (std::size_t i = 0; i < rows * cols; ++i)
        for (std::size_t j = 0; j < rows * cols; ++j)
          if (j != i) {
            EXPECT_GT(pa.p(i, i), pa.p(i, j));
          }
    }
}

TEST(PositionalAttention, InitArgmaxAtHeadOffset) {
  for (std::size_t heads : {1u, 4u, 9u})
    for (std::size_t side = 2; side <= 8; ++side) {
      const GridGeometry g{side, side, heads, 1};
      const auto params = DtnParams::init(heads * 2, heads);
      const auto attn = build_all_positional_attention(build_rel_pos(g), params);
      const auto offs = init_offsets(heads);
      for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t i = 0; i < g.tokens(); ++i) {
          const int r = static_cast<int>(i / side), c = static_cast<int>(i % side);
          const int tr = r + offs[h].dy, tc = c + offs[h].dx;
          if (tr < 0 || tc < 0 || tr >= static_cast<int>(side) || tc >= static_cast<int>(side))
            continue;
          std::size_t best = 0;
          for (std::size_t j = 1; j < g.tokens(); ++j)
            if (attn[h].p(i, j) > attn[h].p(i, best)) best = j;
          EXPECT_EQ(best, static_cast<std::size_t>(tr) * side + tc)
              << "H=" << heads << " side=" << side << " head=" << h << " token=" << i;
        }
      }
    }
}

TEST(PositionalAttention, RowStochasticForExtremeCoefficients) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-100, 100);
  const auto r = build_rel_pos({5, 6, 1, 1});
  for (int trial = 0; trial < 200; ++trial) {
    const auto pa = build_positional_attention<double>(r, {u(rng), u(rng), u(rng)});
    for (std::size_t i = 0; i < 30; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < 30; ++j) {
        EXPECT_GE(pa.p(i, j), 0.0);
        s += pa.p(i, j);
      }
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(PositionalAttention, DistinctCoefficientsGiveDistinctMatrices) {
  const auto r = build_rel_pos({4, 4, 1, 1});
  const auto base = build_positional_attention<double>(r, {-1, 0, 0});
  EXPECT_GT(max_abs_diff(base.p, build_positional_attention<double>(r, {-1, 2, 0}).p), 1e-3);
  EXPECT_GT(max_abs_diff(base.p, build_positional_attention<double>(r, {-1, 0, 2}).p), 1e-3);
  EXPECT_GT(max_abs_diff(base.p, build_positional_attention<double>(r, {-1, 0, 0.1}).p), 1e-4);
}

TEST(PositionalAttention, RejectsNonFiniteCoefficients) {
  const auto r = build_rel_pos({2, 2, 1, 1});
  EXPECT_THROW(build_positional_attention<double>(r, {NAN, 0, 0}), NonFiniteError);
}

TEST(DtnStats, HandExample) {
  const Tensor x({1, 2, 2}, {1, 2, 3, 6});
  const GridGeometry g{1, 2, 2, 1};
  const auto attn = as_positional_attention<double>({uniform_matrix(2)}, 2);
  const auto s = dtn_stats(x, MixingWeights<double>::constant(2, 0.5), span_of(attn), g);
  EXPECT_DOUBLE_EQ(s.mean(0, 0, 0), 1.75);
  EXPECT_DOUBLE_EQ(s.mean(0, 1, 0), 3.25);
  EXPECT_EQ(s.provenance, StatsProvenance::kDynamic);
}

TEST(DtnStats, DegeneratesToLayerNormAtLambdaOne) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    const GridGeometry g{3, 4, 2, 1};
    const Tensor x = random_tokens(2, 12, 8, rng);
    const auto params = DtnParams::init(8, 2);
    const auto attn = build_all_positional_attention(build_rel_pos(g), params);
    const auto s = dtn_stats(x, MixingWeights<double>::constant(2, 1.0), span_of(attn), g);
    const auto ln = ln_stats(x);
    EXPECT_EQ(s.mean, ln.mean);
    EXPECT_EQ(s.var, ln.var);
  }
}

TEST(DtnStats, DegeneratesToInstanceNorm) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const GridGeometry g{2, 5, 4, 1};
    const Tensor x = random_tokens(3, 10, 8, rng, 3.0);
    const auto zero = MixingWeights<double>::constant(4, 0.0);
    const auto in = in_stats(x);
    for (const Tensor& m : {uniform_matrix(10), banded_matrix(10, 19), banded_matrix(10, 25)}) {
      const auto attn = as_positional_attention<double>({m}, 4);
      const auto s = dtn_stats(x, zero, span_of(attn), g);
      EXPECT_LT(max_abs_diff(s.mean, in.mean), 1e-12);
      EXPECT_LT(max_abs_diff(s.var, in.var), 1e-12);
    }
  }
}

TEST(DtnStats, MatchesElementwiseOracle) {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t pool : {1u, 2u}) {
    const GridGeometry g{4, 6, 4, pool};
    const Tensor x = random_tokens(2, 24, 8, rng, 2.0);
    auto params = DtnParams::init(8, 4);
    MixingWeights<double> lam;
    for (std::size_t h = 0; h < 4; ++h) {
      lam.mean.push_back(u(rng));
      lam.var.push_back(u(rng));
      for (auto& v : params.a[h]) v += u(rng) - 0.5;
    }
    const auto attn = build_all_positional_attention(build_rel_pos(g), params);
    const auto got = dtn_stats(x, lam, span_of(attn), g);
    const auto want = oracle_stats(x, lam, attn, g);
    EXPECT_LT(max_abs_diff(got.mean, want.mean), 1e-12) << "pool " << pool;
    EXPECT_LT(max_abs_diff(got.var, want.var), 1e-12) << "pool " << pool;
  }
}

TEST(DtnStats, PooledStatsBroadcastOverWindow) {
  std::mt19937_64 rng(13);
  const GridGeometry g{4, 4, 1, 2};
  const Tensor x = random_tokens(1, 16, 2, rng);
  const auto attn = as_positional_attention<double>({uniform_matrix(4)}, 1);
  const auto s = dtn_stats(x, MixingWeights<double>::constant(1, 0.0), span_of(attn), g);
  // Tokens 0, 1, 4, 5 share a pooled token; with lambda = 0 their stats agree.
  for (std::size_t t : {1u, 4u, 5u}) EXPECT_EQ(s.mean(0, t, 0), s.mean(0, 0, 0));
}

TEST(DtnStats, Errors) {
  const Tensor x({1, 4, 4}, 1.0);
  const GridGeometry g{2, 2, 2, 1};
  const auto two = as_positional_attention<double>({uniform_matrix(4)}, 2);
  const auto one = as_positional_attention<double>({uniform_matrix(4)}, 1);
  EXPECT_THROW(dtn_stats(x, MixingWeights<double>::constant(1, 0.5), span_of(one), g),
               DimensionError);
  const auto wrong = as_positional_attention<double>({uniform_matrix(3)}, 2);
  EXPECT_THROW(dtn_stats(x, MixingWeights<double>::constant(2, 0.5), span_of(wrong), g),
               DimensionError);
  EXPECT_THROW(dtn_stats(Tensor({1, 5, 4}), MixingWeights<double>::constant(2, 0.5), span_of(two), g),
               DimensionError);
  EXPECT_THROW(dtn_forward(x, DtnParams::init(4, 1), g), DimensionError);
  EXPECT_THROW(dtn_forward(Tensor({1, 1, 4}), DtnParams::init(4, 2), GridGeometry{1, 1, 2, 1}),
               ConfigError);
}

TEST(DtnForward, InitIsHalfMixture) {
  const auto p = DtnParams::init(12, 4);
  const auto lam = mixing_weights(p);
  for (double v : lam.mean) EXPECT_EQ(v, 0.5);
  for (double v : lam.var) EXPECT_EQ(v, 0.5);
  EXPECT_EQ(p.a[1], (std::array<double, 3>{-1, 2, 0}));
  EXPECT_EQ(p.a[2], (std::array<double, 3>{-1, 0, 2}));
}

TEST(DtnForward, ForcedLambdaOneEqualsLayerNorm) {
  std::mt19937_64 rng(14);
  const GridGeometry g{3, 3, 1, 1};
  const Tensor x = random_tokens(2, 9, 6, rng);
  const auto params = DtnParams::init(6, 1);
  const auto attn = build_all_positional_attention(build_rel_pos(g), params);
  const Tensor y = dtn_forward_with(x, MixingWeights<double>::constant(1, 1.0), span_of(attn),
                                    params.affine, g);
  EXPECT_LT(max_abs_diff(y, layer_norm(x, params.affine)), 1e-9);
}

TEST(DtnForward, ConstantInputGivesZero) {
  const GridGeometry g{3, 3, 3, 1};
  const Tensor x({2, 9, 6}, 4.25);
  const Tensor y = dtn_forward(x, DtnParams::init(6, 3), g);
  // P rows sum to 1 only to rounding, and 1/sqrt(eps) magnifies that.
  for (double v : y.storage()) EXPECT_NEAR(v, 0.0, 1e-10);
}

TEST(DtnForward, KeepsTokenMagnitudeVariation) {
  // Two domains of tokens with opposite offsets and different spreads.
  const GridGeometry g{2, 4, 2, 1};
  Tensor x({1, 8, 4});
  for (std::size_t t = 0; t < 8; ++t)
    for (std::size_t c = 0; c < 4; ++c)
      x(0, t, c) = (t < 4 ? 10.0 : -10.0) + (1.0 + 0.5 * t) * (c % 2 ? 1.0 : -1.0);
  const Tensor y = dtn_forward(x, DtnParams::init(4, 2), g);
  const Tensor ln = layer_norm(x, AffineParams(4));
  double lo = 1e9, hi = 0, ln_lo = 1e9, ln_hi = 0;
  for (std::size_t t = 0; t < 8; ++t) {
    double s = 0, sl = 0;
    for (std::size_t c = 0; c < 2; ++c) {
      s += y(0, t, c) * y(0, t, c);
      sl += ln(0, t, c) * ln(0, t, c);
    }
    lo = std::min(lo, std::sqrt(s));
    hi = std::max(hi, std::sqrt(s));
    ln_lo = std::min(ln_lo, std::sqrt(sl));
    ln_hi = std::max(ln_hi, std::sqrt(sl));
  }
  EXPECT_GT(hi - lo, 1e-2);
  EXPECT_LT(ln_hi - ln_lo, 1e-5);
}

TEST(DtnForward, FiniteAndNonNegativeUnderFuzz) {
  std::mt19937_64 rng(15);
  std::uniform_real_distribution<double> u(-100, 100);
  for (std::size_t trial = 0; trial < 100; ++trial) {
    const GridGeometry g{2 + trial % 3, 2 + trial % 4, trial % 2 ? 2u : 1u, 1};
    Tensor x = random_tokens(2, g.tokens(), 4, rng, 5.0);
    if (trial % 5 == 0)
      for (std::size_t c = 0; c < 4; ++c) x(0, 0, c) = 3.0;
    auto p = DtnParams::init(4, g.heads);
    for (std::size_t h = 0; h < g.heads; ++h) {
      p.omega_mean[h] = u(rng) / 5;
      p.omega_var[h] = u(rng) / 5;
      p.a[h] = {u(rng), u(rng), u(rng)};
    }
    const auto attn = build_all_positional_attention(build_rel_pos(g), p);
    const auto s = dtn_stats(x, p, span_of(attn), g);
    for (double v : s.var.storage()) EXPECT_GE(v, 0.0);
    const Tensor y = dtn_forward(x, p, g);
    for (double v : y.storage()) ASSERT_TRUE(std::isfinite(v));
  }
}

TEST(DtnForward, Float32PathAgrees) {
  std::mt19937_64 rng(16);
  const GridGeometry g{3, 3, 2, 1};
  const Tensor x = random_tokens(1, 9, 4, rng);
  const auto p = DtnParams::init(4, 2);
  BasicDtnParams<float> pf;
  pf.omega_mean = {0.f, 0.f};
  pf.omega_var = {0.f, 0.f};
  for (const auto& a : p.a) pf.a.push_back({float(a[0]), float(a[1]), float(a[2])});
  pf.affine = BasicAffineParams<float>(4);
  const TensorF yf = dtn_forward(x.cast<float>(), pf, g);
  EXPECT_LT(max_abs_diff(yf.cast<double>(), dtn_forward(x, p, g)), 1e-3);
}
