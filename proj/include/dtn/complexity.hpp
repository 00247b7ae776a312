#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dtn/geometry.hpp"
#include "dtn/tensor.hpp"

namespace dtn {

/// Analytic cost of DTN relative to LN, per image (batch of one).
///
/// FLOPs are counted as multiply-accumulates, the convention under which a
/// 224px ViT-S costs about 4.6G.
struct ComplexityReport {
  std::size_t core_params_per_layer = 0;         // 2C + 3H
  std::size_t mixture_logits_per_layer = 0;      // 2H (omega for mean and variance)
  std::size_t params_per_layer = 0;              // 2C + 5H
  std::size_t added_params_per_layer = 0;        // over LN's 2C: 3H + 2H
  std::size_t dtn_layers = 0;
  std::size_t added_params_total = 0;

  double inter_token_flops_per_layer = 0;  // 2 * T'^2 * C: P x and P (x*x)
  double logit_flops_per_layer = 0;        // H * T'^2 * 4: <R, a> and exp
  double elementwise_flops_per_layer = 0;  // mixing, squares, pooling
  double flops_per_layer = 0;
  double flops_delta_total = 0;
};

inline ComplexityReport complexity_report(const GridGeometry& g, std::size_t channels,
                                          std::size_t heads, std::size_t layer_count,
                                          std::size_t l_dtn) {
  g.validate(true);
  if (heads != g.heads) {
    throw ConfigError("complexity_report: head count " + std::to_string(heads) +
                      " differs from geometry (" + std::to_string(g.heads) + ")");
  }
  head_width(channels, heads);
  if (l_dtn > layer_count) {
    throw ConfigError("complexity_report: l_dtn " + std::to_string(l_dtn) + " exceeds " +
                      std::to_string(layer_count) + " layers");
  }
  const double t = static_cast<double>(g.tokens());
  const double tp = static_cast<double>(g.pooled_tokens());
  const double c = static_cast<double>(channels);
  const double h = static_cast<double>(heads);

  ComplexityReport r;
  r.core_params_per_layer = 2 * channels + 3 * heads;
  r.mixture_logits_per_layer = 2 * heads;
  r.params_per_layer = r.core_params_per_layer + r.mixture_logits_per_layer;
  r.added_params_per_layer = 3 * heads + 2 * heads;
  r.dtn_layers = l_dtn;
  r.added_params_total = r.added_params_per_layer * l_dtn;

  r.inter_token_flops_per_layer = 2.0 * tp * tp * c;
  r.logit_flops_per_layer = 4.0 * h * tp * tp;
  // squares and m*m on the pooled grid, four mixing ops per statistic at
  // full resolution, plus the pooling sums when s > 1.
  r.elementwise_flops_per_layer = 3.0 * tp * c + 8.0 * t * c + (g.pool > 1 ? t * c : 0.0);
  r.flops_per_layer =
      r.inter_token_flops_per_layer + r.logit_flops_per_layer + r.elementwise_flops_per_layer;
  r.flops_delta_total = r.flops_per_layer * static_cast<double>(l_dtn);
  return r;
}

/// Standard ViT configuration with the values reported for it (LN and DTN
/// FLOPs in G, parameters in M).
struct VitPreset {
  std::string name;
  std::size_t heads = 0;
  std::size_t channels = 0;
  std::size_t layers = 12;
  std::size_t image = 224;
  std::size_t patch = 16;
  std::size_t mlp_ratio = 4;
  std::size_t classes = 1000;
  std::size_t l_dtn = 10;
  double reported_ln_gflops = 0;
  double reported_dtn_gflops = 0;
  double reported_params_m = 0;

  std::size_t grid_side() const { return image / patch; }
  GridGeometry geometry(std::size_t pool = 1) const {
    return {grid_side(), grid_side(), heads, pool};
  }
};

/// ViT-T has no DTN row of its own; its starred head variant shares the
/// LN cost and is used for the DTN figure.
inline const std::vector<VitPreset>& vit_presets() {
  static const std::vector<VitPreset> presets = {
      {"vit-t", 3, 192, 12, 224, 16, 4, 1000, 10, 1.26, 1.40, 5.7},
      {"vit-t*", 4, 192, 12, 224, 16, 4, 1000, 10, 1.26, 1.40, 5.7},
      {"vit-s", 6, 384, 12, 224, 16, 4, 1000, 10, 4.60, 4.88, 22.1},
      {"vit-s*", 9, 432, 12, 224, 16, 4, 1000, 10, 5.77, 6.08, 27.8},
      {"vit-b", 12, 768, 12, 224, 16, 4, 1000, 10, 17.58, 18.13, 86.5},
      {"vit-b*", 16, 768, 12, 224, 16, 4, 1000, 10, 17.58, 18.13, 86.5},
  };
  return presets;
}

inline std::optional<VitPreset> find_vit_preset(std::string_view name) {
  for (const auto& p : vit_presets())
    if (p.name == name) return p;
  return std::nullopt;
}

/// Multiply-accumulates of the plain LN ViT forward pass (one image, class
/// token included in every block).
inline double vit_base_flops(const VitPreset& p) {
  const double t = static_cast<double>(p.grid_side() * p.grid_side());
  const double n = t + 1.0;
  const double c = static_cast<double>(p.channels);
  const double patch_in = 3.0 * static_cast<double>(p.patch * p.patch);
  const double per_block = (4.0 + 2.0 * static_cast<double>(p.mlp_ratio)) * n * c * c +
                           2.0 * n * n * c;
  return static_cast<double>(p.layers) * per_block + t * patch_in * c +
         c * static_cast<double>(p.classes);
}

/// Parameter count of the plain LN ViT.
inline double vit_param_count(const VitPreset& p) {
  const double t = static_cast<double>(p.grid_side() * p.grid_side());
  const double c = static_cast<double>(p.channels);
  const double hidden = c * static_cast<double>(p.mlp_ratio);
  const double patch_in = 3.0 * static_cast<double>(p.patch * p.patch);
  const double per_block = (3.0 * c * c + 3.0 * c) + (c * c + c) + (c * hidden + hidden) +
                           (hidden * c + c) + 4.0 * c;
  return patch_in * c + c + (t + 1.0) * c + c + static_cast<double>(p.layers) * per_block +
         2.0 * c + c * static_cast<double>(p.classes) + static_cast<double>(p.classes);
}

}  // namespace dtn
