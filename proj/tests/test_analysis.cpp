#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "dtn/analysis.hpp"
#include "dtn/dynamic_token_norm.hpp"

using namespace dtn;

namespace {

// Plain double loop over every pair, coordinates recomputed from scratch.
double brute_force_distance(const Tensor& a, std::size_t rows, std::size_t cols) {
  double total = 0;
  for (std::size_t i = 0; i < rows * cols; ++i)
    for (std::size_t j = 0; j < rows * cols; ++j) {
      const double yi = static_cast<double>(i / cols), xi = static_cast<double>(i % cols);
      const double yj = static_cast<double>(j / cols), xj = static_cast<double>(j % cols);
      total += a(i, j) * std::hypot(xj - xi, yj - yi);
    }
  return total / static_cast<double>(rows * cols);
}

Tensor random_stochastic(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor a({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < n; ++j) s += a(i, j) = u(rng) * u(rng);
    for (std::size_t j = 0; j < n; ++j) a(i, j) /= s;
  }
  return a;
}

Tensor identity(std::size_t n) {
  Tensor a({n, n});
  for (std::size_t i = 0; i < n; ++i) a(i, i) = 1.0;
  return a;
}

}  // namespace

TEST(AttentionDistance, IdentityIsZero) {
  EXPECT_EQ(mean_attention_distance(identity(12), {3, 4, 1, 1}), 0.0);
}

TEST(AttentionDistance, UniformTwoByTwo) {
  const double expected = (0.0 + 1.0 + 1.0 + std::sqrt(2.0)) / 4.0;
  EXPECT_NEAR(mean_attention_distance(uniform_matrix(4), {2, 2, 1, 1}), expected, 1e-12);
  EXPECT_NEAR(expected, 0.853553, 1e-6);
}

TEST(AttentionDistance, MatchesBruteForce) {
  std::mt19937_64 rng(21);
  for (std::size_t rows = 1; rows <= 8; ++rows)
    for (std::size_t cols = 1; cols <= 8; ++cols) {
      const GridGeometry g{rows, cols, 1, 1};
      const Tensor u = uniform_matrix(rows * cols);
      EXPECT_NEAR(mean_attention_distance(u, g), brute_force_distance(u, rows, cols), 1e-9);
      const Tensor a = random_stochastic(rows * cols, rng);
      EXPECT_NEAR(mean_attention_distance(a, g), brute_force_distance(a, rows, cols), 1e-9);
    }
}

TEST(AttentionDistance, RejectsNonStochastic) {
  Tensor a = uniform_matrix(4);
  a(2, 1) += 2e-4;
  EXPECT_THROW(mean_attention_distance(a, {2, 2, 1, 1}), DimensionError);
  a = uniform_matrix(4);
  a(2, 1) += 5e-5;
  EXPECT_NO_THROW(mean_attention_distance(a, {2, 2, 1, 1}));
  EXPECT_THROW(mean_attention_distance(uniform_matrix(5), {2, 2, 1, 1}), DimensionError);
}

TEST(AttentionDistance, PerHeadDropsClassToken) {
  // Two heads over a 2x2 grid plus a trailing token; head 0 attends to itself.
  Tensor w({1, 2, 5, 5});
  for (std::size_t i = 0; i < 5; ++i) {
    w[i * 5 + i] = 0.5;
    w[i * 5 + 4] += 0.5;
    for (std::size_t j = 0; j < 5; ++j) w[25 + i * 5 + j] = 0.2;
  }
  const auto d = mean_attention_distance_per_head(w, {2, 2, 2, 1});
  ASSERT_EQ(d.size(), 2u);
  EXPECT_NEAR(d[0], 0.0, 1e-12);
  EXPECT_NEAR(d[1], (2.0 + std::sqrt(2.0)) / 4.0, 1e-12);
}

TEST(VariationCoefficient, Examples) {
  const Tensor x({1, 1, 1}, {2.0});
  NormStats s{Tensor({1, 1, 1}, {1.0}), Tensor({1, 1, 1}), StatsProvenance::kLayer};
  EXPECT_DOUBLE_EQ(variation_coefficient(x, s), 0.5);
  s.mean = x;
  EXPECT_EQ(variation_coefficient(x, s), 0.0);
  s.mean = Tensor({1, 1, 2});
  EXPECT_THROW(variation_coefficient(x, s), DimensionError);
}

TEST(VariationCoefficient, GuardsZeros) {
  const Tensor x({1, 1, 2}, {0.0, 0.0});
  const NormStats s{Tensor({1, 1, 2}, {1e-9, 0.0}), Tensor({1, 1, 2}), StatsProvenance::kLayer};
  EXPECT_NEAR(variation_coefficient(x, s), 0.05, 1e-15);
}

TEST(VariationCoefficient, ScaleInvariant) {
  std::mt19937_64 rng(22);
  std::normal_distribution<double> n(0.0, 3.0);
  std::uniform_real_distribution<double> k(0.1, 10.0);
  Tensor x({2, 5, 4});
  for (auto& v : x.storage()) v = n(rng);
  NormStats s = in_stats(x);
  const double base = variation_coefficient(x, s);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double f = k(rng);
    x[i] *= f;
    s.mean[i] *= f;
  }
  EXPECT_NEAR(variation_coefficient(x, s), base, 1e-12);
}

TEST(VariationCoefficient, InstanceMeansSitFurtherThanDtnOnTwoDomains) {
  const GridGeometry g{4, 4, 2, 1};
  const Tensor x = two_domain_tokens(4, 4, 8);
  const auto p = DtnParams::init(8, 2);
  const auto attn = build_all_positional_attention(build_rel_pos(g), p);
  const double vc_in = variation_coefficient(x, in_stats(x));
  const double vc_dtn = variation_coefficient(
      x, dtn_stats(x, p, std::span<const PositionalAttention<double>>(attn), g));
  EXPECT_GT(vc_in, vc_dtn);
}

TEST(TokenMagnitude, Examples) {
  const Tensor x({1, 2, 4}, {3, 4, 0, 0, 1, 0, 0, 2});
  const Tensor m = token_magnitude(x, 2);
  EXPECT_EQ(m.shape(), (std::vector<std::size_t>{1, 2, 2}));
  EXPECT_DOUBLE_EQ(m[0], 5.0);
  EXPECT_DOUBLE_EQ(m[1], 1.0);
  EXPECT_DOUBLE_EQ(m[2], 0.0);
  EXPECT_DOUBLE_EQ(m[3], 2.0);
  const Tensor zero = token_magnitude(Tensor({2, 3, 6}), 3);
  for (double v : zero.storage()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(token_magnitude(x, 3), DimensionError);
}

TEST(TokenMagnitude, PermutationEquivariant) {
  std::mt19937_64 rng(23);
  std::normal_distribution<double> n;
  Tensor x({1, 6, 4});
  for (auto& v : x.storage()) v = n(rng);
  const std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
  Tensor y({1, 6, 4});
  for (std::size_t t = 0; t < 6; ++t)
    for (std::size_t c = 0; c < 4; ++c) y(0, t, c) = x(0, perm[t], c);
  const Tensor mx = token_magnitude(x, 2), my = token_magnitude(y, 2);
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t t = 0; t < 6; ++t) EXPECT_EQ(my[h * 6 + t], mx[h * 6 + perm[t]]);
}

TEST(TokenMagnitude, LayerNormFlattensNorms) {
  const Tensor x = two_domain_tokens(4, 4, 8);
  const Tensor norms = token_norms(layer_norm(x, AffineParams(8), 1e-14));
  for (double v : norms.storage()) EXPECT_NEAR(v / std::sqrt(8.0), 1.0, 1e-6);
}

TEST(LambdaSummary, ConstantTrace) {
  std::vector<LambdaTraceRow> trace;
  for (std::size_t step : {0u, 10u, 20u})
    for (std::size_t h = 0; h < 3; ++h) trace.push_back({step, 1, h, 0.5, 0.5});
  const auto s = summarize_lambda(trace);
  ASSERT_EQ(s.size(), 3u);
  for (const auto& row : s) {
    EXPECT_EQ(row.max_delta_mean, 0.0);
    EXPECT_EQ(row.max_delta_var, 0.0);
    EXPECT_FALSE(row.prefers_inter_token);
  }
  EXPECT_EQ(max_lambda_departure(trace), 0.0);
}

TEST(LambdaSummary, FlagsInterTokenHeads) {
  const std::vector<LambdaTraceRow> trace{
      {0, 0, 0, 0.5, 0.5}, {0, 0, 1, 0.5, 0.5}, {5, 0, 0, 0.2, 0.6}, {5, 0, 1, 0.7, 0.55}};
  const auto s = summarize_lambda(trace);
  EXPECT_TRUE(s[0].prefers_inter_token);
  EXPECT_FALSE(s[1].prefers_inter_token);
  EXPECT_DOUBLE_EQ(s[0].max_delta_mean, 0.3);
  EXPECT_DOUBLE_EQ(max_lambda_departure(trace), 0.3);
}

TEST(LambdaSummary, CsvRoundTrip) {
  std::mt19937_64 rng(24);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<LambdaTraceRow> trace;
  for (std::size_t step = 0; step < 50; step += 10)
    for (std::size_t layer = 0; layer < 4; ++layer)
      for (std::size_t h = 0; h < 2; ++h) trace.push_back({step, layer, h, u(rng), u(rng)});
  const auto back = parse_lambda_trace_csv(lambda_trace_csv(trace));
  EXPECT_EQ(back, trace);
  EXPECT_EQ(summarize_lambda(back), summarize_lambda(trace));
}

TEST(LambdaSummary, MalformedCsvNamesLine) {
  const std::string header = "step,layer,head,lambda_mean,lambda_var\n";
  auto message = [](const std::string& text) {
    try {
      parse_lambda_trace_csv(text);
    } catch (const ParseError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  EXPECT_NE(message(header + "0,0,0,0.5,0.5\n0,0,1,0.5\n").find("line 3"), std::string::npos);
  EXPECT_NE(message(header + "x,0,0,0.5,0.5\n").find("line 2"), std::string::npos);
  EXPECT_NE(message(header + "0,0,0,0.5,abc\n").find("line 2"), std::string::npos);
  EXPECT_NE(message("step,layer\n").find("line 1"), std::string::npos);
  EXPECT_NE(message("").find("line 1"), std::string::npos);
}

TEST(Heatmap, PgmLayout) {
  const std::vector<double> v{1, 2, 3, 4, 5, 6};
  const Heatmap h = make_heatmap(v, 2, 3, "demo");
  const std::string header = "P5\n3 2\n255\n";
  ASSERT_EQ(h.pgm.size(), header.size() + 6);
  EXPECT_EQ(h.pgm.substr(0, header.size()), header);
  EXPECT_EQ(static_cast<unsigned char>(h.pgm[header.size()]), 0);
  EXPECT_EQ(static_cast<unsigned char>(h.pgm.back()), 255);
  EXPECT_NE(h.sidecar.find("min 1"), std::string::npos);
  EXPECT_NE(h.sidecar.find("max 6"), std::string::npos);
  EXPECT_THROW(make_heatmap(v, 2, 2, "bad"), DimensionError);
}
