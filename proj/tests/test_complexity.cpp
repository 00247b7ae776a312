#include <cmath>

#include <gtest/gtest.h>

#include "dtn/complexity.hpp"

using namespace dtn;

TEST(Complexity, CoreParameterCount) {
  const auto r = complexity_report({14, 14, 6, 1}, 384, 6, 12, 10);
  EXPECT_EQ(r.core_params_per_layer, 786u);
  EXPECT_EQ(r.mixture_logits_per_layer, 12u);
  EXPECT_EQ(r.params_per_layer, 798u);
  EXPECT_EQ(r.added_params_per_layer, 30u);
  EXPECT_EQ(r.added_params_total, 300u);
}

TEST(Complexity, TableDeltasWithinTwentyPercent) {
  const struct {
    const char* name;
    double delta;
  } rows[] = {{"vit-t", 0.14}, {"vit-s", 0.28}, {"vit-b", 0.55}};
  for (const auto& row : rows) {
    const auto p = *find_vit_preset(row.name);
    const auto r = complexity_report(p.geometry(), p.channels, p.heads, p.layers, p.l_dtn);
    const double got = r.flops_delta_total / 1e9;
    EXPECT_NEAR(got / row.delta, 1.0, 0.2) << row.name << " " << got;
    EXPECT_NEAR(p.reported_dtn_gflops - p.reported_ln_gflops, row.delta, 1e-9);
  }
}

TEST(Complexity, InterTokenTermScalesWithPoolFourthPower) {
  const auto r1 = complexity_report({16, 16, 4, 1}, 64, 4, 4, 2);
  const auto r2 = complexity_report({16, 16, 4, 2}, 64, 4, 4, 2);
  EXPECT_DOUBLE_EQ(r1.inter_token_flops_per_layer / r2.inter_token_flops_per_layer, 16.0);
  EXPECT_DOUBLE_EQ(r1.logit_flops_per_layer / r2.logit_flops_per_layer, 16.0);
  EXPECT_EQ(r1.inter_token_flops_per_layer, 2.0 * 256 * 256 * 64);
}

TEST(Complexity, BaseModelMatchesReportedSize) {
  for (const auto& p : vit_presets()) {
    EXPECT_NEAR(vit_base_flops(p) / 1e9 / p.reported_ln_gflops, 1.0, 0.02) << p.name;
    EXPECT_NEAR(vit_param_count(p) / 1e6 / p.reported_params_m, 1.0, 0.02) << p.name;
    const auto r = complexity_report(p.geometry(), p.channels, p.heads, p.layers, p.l_dtn);
    EXPECT_LT(static_cast<double>(r.added_params_total) / vit_param_count(p), 1e-4) << p.name;
  }
}

TEST(Complexity, Errors) {
  EXPECT_THROW(complexity_report({4, 4, 2, 1}, 8, 4, 2, 1), ConfigError);
  EXPECT_THROW(complexity_report({4, 4, 3, 1}, 8, 3, 2, 1), DimensionError);
  EXPECT_THROW(complexity_report({4, 4, 2, 1}, 8, 2, 2, 3), ConfigError);
  EXPECT_THROW(complexity_report({2, 2, 2, 2}, 8, 2, 2, 1), ConfigError);
  EXPECT_FALSE(find_vit_preset("vit-h").has_value());
}
