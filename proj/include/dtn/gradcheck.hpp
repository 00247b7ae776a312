#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dtn/dynamic_token_norm.hpp"
#include "dtn/finite_diff.hpp"
#include "dtn/model.hpp"
#include "dtn/tape.hpp"

namespace dtn {

/// Relative gradient error of one parameter group.
struct GroupError {
  std::string group;
  double relative_error = 0;
};

struct DtnGradcheckConfig {
  std::size_t batch = 2;
  std::size_t rows = 3;
  std::size_t cols = 4;
  std::size_t channels = 8;
  std::size_t heads = 2;
  std::size_t pool = 1;
  double eps = kDefaultEps;
  double step = 1e-4;
};

/// Analytic (tape) vs central-difference gradients of sum(W * DTN(x)) for a
/// random layer. The difference side evaluates the plain forward pass.
inline std::vector<GroupError> dtn_layer_gradcheck(std::uint64_t seed,
                                                   const DtnGradcheckConfig& cfg = {}) {
  const GridGeometry g{cfg.rows, cfg.cols, cfg.heads, cfg.pool};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto randn = [&](std::vector<std::size_t> shape, double scale, double shift = 0.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.storage()) v = shift + scale * normal(rng);
    return t;
  };
  const std::size_t c = cfg.channels, h = cfg.heads;
  Tensor x = randn({cfg.batch, g.tokens(), c}, 1.0);
  // Per-token offsets so inter- and intra-token statistics differ.
  for (std::size_t b = 0; b < cfg.batch; ++b)
    for (std::size_t t = 0; t < g.tokens(); ++t) {
      const double off = normal(rng);
      for (std::size_t k = 0; k < c; ++k) x(b, t, k) += off;
    }
  Tensor om = randn({h}, 0.8);
  Tensor ov = randn({h}, 0.8);
  Tensor a({h, 3});
  const auto init = DtnParams::init(c, h);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t k = 0; k < 3; ++k) a(i, k) = init.a[i][k] * 0.5 + 0.3 * normal(rng);
  Tensor gamma = randn({c}, 0.3, 1.0);
  Tensor beta = randn({c}, 0.3);
  const Tensor weights = randn({cfg.batch, g.tokens(), c}, 1.0);

  const DtnContext ctx(g);
  GradTape tape;
  Var vx = tape.parameter(x), vom = tape.parameter(om), vov = tape.parameter(ov),
      va = tape.parameter(a), vg = tape.parameter(gamma), vb = tape.parameter(beta);
  Var y = ops::dtn(tape, vx, vom, vov, va, vg, vb, ctx, cfg.eps);
  tape.backward(ops::weighted_sum(tape, y, weights));

  struct Group {
    const char* name;
    Tensor* value;
    Var var;
  };
  std::vector<Group> groups = {{"x", &x, vx},         {"omega_mean", &om, vom},
                               {"omega_var", &ov, vov}, {"a", &a, va},
                               {"gamma", &gamma, vg},   {"beta", &beta, vb}};
  auto loss = [&]() {
    DtnParams p;
    p.omega_mean = om.storage();
    p.omega_var = ov.storage();
    for (std::size_t i = 0; i < h; ++i) p.a.push_back({a(i, 0), a(i, 1), a(i, 2)});
    p.affine.gamma = gamma.storage();
    p.affine.beta = beta.storage();
    const Tensor out = dtn_forward(x, p, g, cfg.eps);
    double s = 0;
    for (std::size_t i = 0; i < out.size(); ++i) s += out[i] * weights[i];
    return s;
  };

  std::vector<GroupError> out;
  for (auto& grp : groups) {
    Tensor& target = *grp.value;
    const auto f = [&](std::span<const double> theta) {
      std::copy(theta.begin(), theta.end(), target.storage().begin());
      return loss();
    };
    const std::vector<double> orig = target.storage();
    const auto numeric = finite_diff_grad(f, orig, cfg.step);
    target.storage() = orig;
    const Tensor analytic = tape.grad(grp.var);
    out.push_back({grp.name, relative_error(analytic.storage(), numeric)});
  }
  return out;
}

struct ModelGradcheckConfig {
  ModelConfig model{.layers = 2,
                    .l_dtn = 1,
                    .heads = 2,
                    .channels = 8,
                    .rows = 2,
                    .cols = 2,
                    .patch_dim = 4,
                    .mlp_ratio = 2,
                    .classes = 3};
  std::size_t batch = 2;
  double step = 1e-4;
};

/// Cross-entropy loss computed directly from logits, independent of the tape.
inline double reference_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  double loss = 0;
  for (std::size_t i = 0; i < logits.dim(0); ++i) {
    double mx = logits(i, 0);
    for (std::size_t k = 1; k < logits.dim(1); ++k) mx = std::max(mx, logits(i, k));
    double se = 0;
    for (std::size_t k = 0; k < logits.dim(1); ++k) se += std::exp(logits(i, k) - mx);
    loss += std::log(se) + mx - logits(i, static_cast<std::size_t>(labels[i]));
  }
  return loss / static_cast<double>(logits.dim(0));
}

/// Whole-model check: every parameter group of a small transformer.
inline std::vector<GroupError> model_gradcheck(std::uint64_t seed,
                                               const ModelGradcheckConfig& cfg = {}) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  ModelWeights w = init_weights(cfg.model, seed);
  // Move the DTN and affine parameters off their initial values.
  for (auto& p : w.parameters()) {
    const bool norm_param = p.name.find("norm") != std::string::npos;
    if (norm_param || p.name == "pos" || p.name == "cls")
      for (auto& v : p.value->storage()) v += 0.2 * normal(rng);
  }
  ToyTransformer model(cfg.model, std::move(w));
  Tensor patches({cfg.batch, cfg.model.tokens(), cfg.model.patch_dim});
  for (auto& v : patches.storage()) v = normal(rng);
  std::vector<int> labels;
  for (std::size_t i = 0; i < cfg.batch; ++i)
    labels.push_back(static_cast<int>(i % cfg.model.classes));

  GradTape tape;
  ParamBinder bind(tape, true);
  Var logits = model.forward(bind, patches);
  tape.backward(ops::cross_entropy(tape, logits, labels));

  std::vector<GroupError> out;
  for (auto& p : model.weights().parameters()) {
    Tensor& target = *p.value;
    const auto var = bind.find(target);
    const Tensor analytic = var ? tape.grad(*var) : Tensor(target.shape());
    const std::vector<double> orig = target.storage();
    const auto f = [&](std::span<const double> theta) {
      std::copy(theta.begin(), theta.end(), target.storage().begin());
      return reference_cross_entropy(model.logits(patches), labels);
    };
    const auto numeric = finite_diff_grad(f, orig, cfg.step);
    target.storage() = orig;
    out.push_back({p.name, relative_error(analytic.storage(), numeric)});
  }
  return out;
}

inline double max_error(const std::vector<GroupError>& errs) {
  double m = 0;
  for (const auto& e : errs) m = std::max(m, e.relative_error);
  return m;
}

}  // namespace dtn
