#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dtn/geometry.hpp"
#include "dtn/norm.hpp"
#include "dtn/tape.hpp"
#include "dtn/tensor.hpp"

namespace dtn {

inline double sigmoid(double w) { return 1.0 / (1.0 + std::exp(-w)); }

/// Learnables of one DTN layer.
///
/// omega_mean / omega_var are per-head mixture logits; the weight ratio
/// between intra- and inter-token statistics is sigmoid(omega). `a` holds
/// one coefficient triple per head for the positional attention logits.
template <std::floating_point Real>
struct BasicDtnParams {
  std::vector<Real> omega_mean;
  std::vector<Real> omega_var;
  std::vector<std::array<Real, 3>> a;
  BasicAffineParams<Real> affine;

  /// omega = 0 and a^h = [-1, 2*dx_h, 2*dy_h] for the head's window offset.
  static BasicDtnParams init(std::size_t channels, std::size_t heads) {
    head_width(channels, heads);
    BasicDtnParams p;
    p.omega_mean.assign(heads, Real{0});
    p.omega_var.assign(heads, Real{0});
    for (const Offset& o : init_offsets(heads)) {
      p.a.push_back({Real(-1), Real(2 * o.dx), Real(2 * o.dy)});
    }
    p.affine = BasicAffineParams<Real>(channels);
    return p;
  }

  std::size_t heads() const noexcept { return omega_mean.size(); }
  std::size_t channels() const noexcept { return affine.channels(); }

  void validate() const {
    if (omega_var.size() != heads() || a.size() != heads()) {
      throw DimensionError("DtnParams: per-head arrays disagree (omega_mean " +
                           std::to_string(omega_mean.size()) + ", omega_var " +
                           std::to_string(omega_var.size()) + ", a " +
                           std::to_string(a.size()) + ")");
    }
    if (affine.beta.size() != affine.gamma.size()) {
      throw DimensionError("DtnParams: gamma and beta lengths differ");
    }
    head_width(channels(), heads());
  }

  friend bool operator==(const BasicDtnParams&, const BasicDtnParams&) = default;
};
using DtnParams = BasicDtnParams<double>;

/// Per-head weight ratios lambda in [0, 1] for the mean and the variance.
template <std::floating_point Real>
struct MixingWeights {
  std::vector<Real> mean;
  std::vector<Real> var;

  static MixingWeights constant(std::size_t heads, Real lambda) {
    return {std::vector<Real>(heads, lambda), std::vector<Real>(heads, lambda)};
  }
};

template <std::floating_point Real>
MixingWeights<Real> mixing_weights(const BasicDtnParams<Real>& p) {
  MixingWeights<Real> w;
  for (Real o : p.omega_mean) w.mean.push_back(static_cast<Real>(sigmoid(o)));
  for (Real o : p.omega_var) w.var.push_back(static_cast<Real>(sigmoid(o)));
  return w;
}

/// Row-stochastic T' x T' matrix of one head.
template <std::floating_point Real>
struct PositionalAttention {
  BasicTensor<Real> p;
  std::size_t head_index = 0;
};

/// P = row-softmax of the logits <R_ij, a>.
template <std::floating_point Real>
PositionalAttention<Real> build_positional_attention(const RelPosEmbedding& r,
                                                     const std::array<Real, 3>& a,
                                                     std::size_t head_index = 0) {
  for (Real v : a) {
    if (!std::isfinite(v)) throw NonFiniteError("positional attention coefficients not finite");
  }
  const std::size_t n = r.tokens();
  BasicTensor<Real> logits({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const auto& rij = r.at(i, j);
      logits(i, j) = static_cast<Real>(rij[0] * a[0] + rij[1] * a[1] + rij[2] * a[2]);
    }
  return {softmax_rows(logits), head_index};
}

template <std::floating_point Real>
std::vector<PositionalAttention<Real>> build_all_positional_attention(
    const RelPosEmbedding& r, const BasicDtnParams<Real>& params) {
  std::vector<PositionalAttention<Real>> out;
  out.reserve(params.heads());
  for (std::size_t h = 0; h < params.heads(); ++h)
    out.push_back(build_positional_attention(r, params.a[h], h));
  return out;
}

/// Row-normalized k-banded matrix (ones where |i-j| <= (k-1)/2). k odd.
template <std::floating_point Real = double>
BasicTensor<Real> banded_matrix(std::size_t n, std::size_t k) {
  if (n == 0) throw ConfigError("banded_matrix: length must be positive");
  if (k == 0 || k % 2 == 0) {
    throw ConfigError("banded_matrix: band width must be odd, got " + std::to_string(k));
  }
  const std::size_t half = (k - 1) / 2;
  BasicTensor<Real> m({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t lo = i >= half ? i - half : 0;
    const std::size_t hi = std::min(n - 1, i + half);
    const Real w = Real(1) / static_cast<Real>(hi - lo + 1);
    for (std::size_t j = lo; j <= hi; ++j) m(i, j) = w;
  }
  return m;
}

template <std::floating_point Real = double>
BasicTensor<Real> uniform_matrix(std::size_t n) {
  return BasicTensor<Real>({n, n}, Real(1) / static_cast<Real>(n));
}

/// Wraps plain matrices as per-head positional attention (head h gets
/// matrices[h], or matrices[0] for every head when only one is given).
template <std::floating_point Real>
std::vector<PositionalAttention<Real>> as_positional_attention(
    std::vector<BasicTensor<Real>> matrices, std::size_t heads) {
  std::vector<PositionalAttention<Real>> out;
  for (std::size_t h = 0; h < heads; ++h)
    out.push_back({matrices.size() == 1 ? matrices[0] : matrices.at(h), h});
  return out;
}

namespace detail {

/// Every intermediate of the DTN statistics, kept for the backward pass.
template <std::floating_point Real>
struct DtnCache {
  TokenDims dims{};
  std::size_t heads = 0;
  std::size_t width = 0;
  std::size_t pooled = 0;
  std::vector<std::size_t> owner;
  std::size_t window = 1;
  std::vector<Real> mu_ln;   // (B*T)
  std::vector<Real> var_ln;  // (B*T)
  BasicTensor<Real> xb;      // pooled tokens (B,T',C)
  BasicTensor<Real> m;       // P xb
  BasicTensor<Real> sq;      // P (xb*xb)
  BasicTensor<Real> v_raw;   // sq - m*m, before clamping
  BasicNormStats<Real> stats;
};

template <std::floating_point Real>
DtnCache<Real> compute_dtn_stats(const BasicTensor<Real>& x, const MixingWeights<Real>& lambdas,
                                 std::span<const PositionalAttention<Real>> attention,
                                 const GridGeometry& g) {
  g.validate(true);
  const auto d = token_dims(x);
  if (d.tokens != g.tokens()) {
    throw DimensionError("dtn: tensor has " + std::to_string(d.tokens) +
                         " tokens but grid " + std::to_string(g.rows) + "x" +
                         std::to_string(g.cols) + " has " + std::to_string(g.tokens()));
  }
  const std::size_t heads = g.heads;
  if (lambdas.mean.size() != heads || lambdas.var.size() != heads ||
      attention.size() != heads) {
    throw DimensionError("dtn: head-count mismatch between parameters (" +
                         std::to_string(lambdas.mean.size()) + " mixing weights, " +
                         std::to_string(attention.size()) +
                         " attention matrices) and geometry (" + std::to_string(heads) + ")");
  }
  const std::size_t tp = g.pooled_tokens();
  for (const auto& pa : attention) {
    if (pa.p.rank() != 2 || pa.p.dim(0) != tp || pa.p.dim(1) != tp) {
      throw DimensionError("dtn: positional attention must be " + std::to_string(tp) + "x" +
                           std::to_string(tp) + ", got " + shape_string(pa.p.shape()));
    }
  }

  DtnCache<Real> k;
  k.dims = d;
  k.heads = heads;
  k.width = head_width(d.channels, heads);
  k.pooled = tp;

  k.mu_ln.resize(d.batch * d.tokens);
  k.var_ln.resize(d.batch * d.tokens);
  for (std::size_t bt = 0; bt < d.batch * d.tokens; ++bt) {
    const auto mv = reduce_stats<Real>(x.data().subspan(bt * d.channels, d.channels));
    k.mu_ln[bt] = mv.mean;
    k.var_ln[bt] = mv.var;
  }

  auto pooled = pool_tokens(x, g);
  k.xb = std::move(pooled.tokens);
  k.owner = std::move(pooled.owner);
  k.window = pooled.window;

  k.m = BasicTensor<Real>({d.batch, tp, d.channels});
  k.sq = BasicTensor<Real>({d.batch, tp, d.channels});
  k.v_raw = BasicTensor<Real>({d.batch, tp, d.channels});
  for (std::size_t b = 0; b < d.batch; ++b)
    for (std::size_t h = 0; h < heads; ++h) {
      const auto& P = attention[h].p;
      const std::size_t c0 = h * k.width;
      for (std::size_t p = 0; p < tp; ++p)
        for (std::size_t q = 0; q < tp; ++q) {
          const Real w = P(p, q);
          for (std::size_t c = c0; c < c0 + k.width; ++c) {
            const Real v = k.xb(b, q, c);
            k.m(b, p, c) += w * v;
            k.sq(b, p, c) += w * v * v;
          }
        }
    }
  for (std::size_t i = 0; i < k.m.size(); ++i) k.v_raw[i] = k.sq[i] - k.m[i] * k.m[i];

  k.stats = {BasicTensor<Real>(x.shape()), BasicTensor<Real>(x.shape()),
             StatsProvenance::kDynamic};
  for (std::size_t b = 0; b < d.batch; ++b)
    for (std::size_t t = 0; t < d.tokens; ++t) {
      const std::size_t bt = b * d.tokens + t;
      const std::size_t p = k.owner[t];
      for (std::size_t c = 0; c < d.channels; ++c) {
        const std::size_t h = c / k.width;
        const Real lm = lambdas.mean[h];
        const Real lv = lambdas.var[h];
        const Real inter_var = std::max(k.v_raw(b, p, c), Real{0});
        k.stats.mean(b, t, c) = lm * k.mu_ln[bt] + (Real(1) - lm) * k.m(b, p, c);
        k.stats.var(b, t, c) = lv * k.var_ln[bt] + (Real(1) - lv) * inter_var;
      }
    }
  return k;
}

}  // namespace detail

/// Mixed intra-/inter-token statistics, concatenated over heads. `attention`
/// holds one matrix per head on the pooled grid of `g`.
template <std::floating_point Real>
BasicNormStats<Real> dtn_stats(const BasicTensor<Real>& x, const MixingWeights<Real>& lambdas,
                               std::span<const PositionalAttention<Real>> attention,
                               const GridGeometry& g) {
  require_finite<Real>(x.data(), "dtn input");
  return detail::compute_dtn_stats(x, lambdas, attention, g).stats;
}

template <std::floating_point Real>
BasicNormStats<Real> dtn_stats(const BasicTensor<Real>& x, const BasicDtnParams<Real>& params,
                               std::span<const PositionalAttention<Real>> attention,
                               const GridGeometry& g) {
  params.validate();
  return dtn_stats(x, mixing_weights(params), attention, g);
}

/// Full forward pass: lambda = sigmoid(omega), P^h = softmax(R a^h), mixed
/// statistics, then the affine normalization.
template <std::floating_point Real>
BasicTensor<Real> dtn_forward(const BasicTensor<Real>& x, const BasicDtnParams<Real>& params,
                              const GridGeometry& g, Real eps = Real(kDefaultEps)) {
  params.validate();
  if (params.heads() != g.heads) {
    throw DimensionError("dtn_forward: params have " + std::to_string(params.heads()) +
                         " heads, geometry has " + std::to_string(g.heads));
  }
  const auto r = build_rel_pos(g);
  const auto attention = build_all_positional_attention(r, params);
  const auto stats = dtn_stats(x, mixing_weights(params),
                               std::span<const PositionalAttention<Real>>(attention), g);
  return affine_normalize(x, stats, params.affine, eps);
}

/// Same as dtn_forward but with explicit mixing weights and attention
/// matrices; used to pin the degenerate cases (lambda = 0 or 1, uniform or
/// banded P).
template <std::floating_point Real>
BasicTensor<Real> dtn_forward_with(const BasicTensor<Real>& x, const MixingWeights<Real>& lambdas,
                                   std::span<const PositionalAttention<Real>> attention,
                                   const BasicAffineParams<Real>& affine, const GridGeometry& g,
                                   Real eps = Real(kDefaultEps)) {
  return affine_normalize(x, dtn_stats(x, lambdas, attention, g), affine, eps);
}

/// Geometry plus its precomputed relative embedding, shared by every forward
/// pass of a layer.
struct DtnContext {
  GridGeometry geometry;
  RelPosEmbedding rel_pos;

  explicit DtnContext(const GridGeometry& g) : geometry(g), rel_pos(build_rel_pos(g)) {
    g.validate(true);
  }
};

namespace ops {

/// Differentiable DTN layer. x: (B,T,C); omega_mean, omega_var: (H);
/// a: (H,3); gamma, beta: (C). `forced_lambda` pins both mixing weights to a
/// constant and cuts the gradient to omega.
inline Var dtn(GradTape& tape, Var x, Var omega_mean, Var omega_var, Var a, Var gamma, Var beta,
               const DtnContext& ctx, double eps = kDefaultEps,
               std::optional<double> forced_lambda = std::nullopt) {
  if (!(eps > 0)) throw ConfigError("dtn: eps must be positive");
  const GridGeometry& g = ctx.geometry;
  const Tensor& xv = tape.value(x);
  require_finite<double>(xv.data(), "dtn input");
  const std::size_t heads = g.heads;
  const Tensor& av = tape.value(a);
  if (av.size() != heads * 3 || tape.value(omega_mean).size() != heads ||
      tape.value(omega_var).size() != heads) {
    throw DimensionError("dtn: parameter head count does not match geometry (" +
                         std::to_string(heads) + " heads)");
  }

  MixingWeights<double> lambdas;
  for (std::size_t h = 0; h < heads; ++h) {
    lambdas.mean.push_back(forced_lambda ? *forced_lambda : sigmoid(tape.value(omega_mean)[h]));
    lambdas.var.push_back(forced_lambda ? *forced_lambda : sigmoid(tape.value(omega_var)[h]));
  }
  std::vector<PositionalAttention<double>> attention;
  for (std::size_t h = 0; h < heads; ++h)
    attention.push_back(
        build_positional_attention<double>(ctx.rel_pos, {av[3 * h], av[3 * h + 1], av[3 * h + 2]}, h));

  auto cache = dtn::detail::compute_dtn_stats<double>(xv, lambdas, attention, g);
  AffineParams affine;
  affine.gamma = tape.value(gamma).storage();
  affine.beta = tape.value(beta).storage();
  Tensor y = affine_normalize(xv, cache.stats, affine, eps);

  return tape.record(
      std::move(y), {x, omega_mean, omega_var, a, gamma, beta},
      [x, omega_mean, omega_var, a, gamma, beta, eps, forced = forced_lambda.has_value(),
       lambdas = std::move(lambdas), attention = std::move(attention),
       cache = std::move(cache), &ctx](GradTape& t, const Tensor& g) {
        const TokenDims d = cache.dims;
        const std::size_t heads = cache.heads;
        const std::size_t width = cache.width;
        const std::size_t tp = cache.pooled;
        const Tensor& xv = t.value(x);
        const Tensor& gam = t.value(gamma);
        const Tensor& mean = cache.stats.mean;
        const Tensor& var = cache.stats.var;

        Tensor gx(xv.shape());
        Tensor g_gamma({d.channels});
        Tensor g_beta({d.channels});
        Tensor gmu(xv.shape());   // dL/dmean
        Tensor gvar(xv.shape());  // dL/dvar
        for (std::size_t i = 0; i < xv.size(); ++i) {
          const std::size_t c = i % d.channels;
          const double rstd = 1.0 / std::sqrt(var[i] + eps);
          const double xhat = (xv[i] - mean[i]) * rstd;
          g_gamma[c] += g[i] * xhat;
          g_beta[c] += g[i];
          const double gh = g[i] * gam[c];
          gx[i] += gh * rstd;
          gmu[i] = -gh * rstd;
          gvar[i] = -0.5 * gh * xhat * rstd * rstd;
        }

        // Mixture: d/dlambda, intra-token stats, pooled inter-token terms.
        std::vector<double> g_lm(heads, 0.0), g_lv(heads, 0.0);
        std::vector<double> g_mu_ln(d.batch * d.tokens, 0.0), g_var_ln(d.batch * d.tokens, 0.0);
        Tensor g_m(cache.m.shape());
        Tensor g_vclamped(cache.m.shape());
        for (std::size_t b = 0; b < d.batch; ++b)
          for (std::size_t tt = 0; tt < d.tokens; ++tt) {
            const std::size_t bt = b * d.tokens + tt;
            const std::size_t p = cache.owner[tt];
            for (std::size_t c = 0; c < d.channels; ++c) {
              const std::size_t h = c / width;
              const double gm = gmu(b, tt, c);
              const double gv = gvar(b, tt, c);
              const double inter_var = std::max(cache.v_raw(b, p, c), 0.0);
              g_lm[h] += gm * (cache.mu_ln[bt] - cache.m(b, p, c));
              g_lv[h] += gv * (cache.var_ln[bt] - inter_var);
              g_mu_ln[bt] += gm * lambdas.mean[h];
              g_var_ln[bt] += gv * lambdas.var[h];
              g_m(b, p, c) += gm * (1.0 - lambdas.mean[h]);
              g_vclamped(b, p, c) += gv * (1.0 - lambdas.var[h]);
            }
          }

        // Intra-token statistics over all C channels of each token.
        const double inv_c = 1.0 / static_cast<double>(d.channels);
        for (std::size_t bt = 0; bt < d.batch * d.tokens; ++bt)
          for (std::size_t c = 0; c < d.channels; ++c) {
            const std::size_t i = bt * d.channels + c;
            gx[i] += g_mu_ln[bt] * inv_c + g_var_ln[bt] * 2.0 * (xv[i] - cache.mu_ln[bt]) * inv_c;
          }

        // v = max(sq - m*m, 0) -> gradients into sq and m.
        Tensor g_sq(cache.m.shape());
        for (std::size_t i = 0; i < g_m.size(); ++i) {
          if (cache.v_raw[i] > 0) {
            g_sq[i] = g_vclamped[i];
            g_m[i] -= 2.0 * cache.m[i] * g_vclamped[i];
          }
        }

        // m = P xb, sq = P (xb*xb): gradients into xb and P (shared over batch).
        Tensor g_xb(cache.xb.shape());
        std::vector<Tensor> g_p(heads, Tensor({tp, tp}));
        for (std::size_t b = 0; b < d.batch; ++b)
          for (std::size_t h = 0; h < heads; ++h) {
            const Tensor& P = attention[h].p;
            const std::size_t c0 = h * width;
            for (std::size_t p = 0; p < tp; ++p)
              for (std::size_t q = 0; q < tp; ++q) {
                const double w = P(p, q);
                double gp = 0;
                for (std::size_t c = c0; c < c0 + width; ++c) {
                  const double v = cache.xb(b, q, c);
                  gp += g_m(b, p, c) * v + g_sq(b, p, c) * v * v;
                  g_xb(b, q, c) += w * (g_m(b, p, c) + 2.0 * v * g_sq(b, p, c));
                }
                g_p[h](p, q) += gp;
              }
          }

        // Pooling: each original token receives 1/(s*s) of its pooled grad.
        const double inv_w = 1.0 / static_cast<double>(cache.window);
        for (std::size_t b = 0; b < d.batch; ++b)
          for (std::size_t tt = 0; tt < d.tokens; ++tt) {
            const std::size_t p = cache.owner[tt];
            for (std::size_t c = 0; c < d.channels; ++c) gx(b, tt, c) += g_xb(b, p, c) * inv_w;
          }

        if (t.requires_grad(x)) {
          Tensor& gbuf = t.grad_buffer(x);
          for (std::size_t i = 0; i < gx.size(); ++i) gbuf[i] += gx[i];
        }
        if (t.requires_grad(gamma)) {
          Tensor& gbuf = t.grad_buffer(gamma);
          for (std::size_t c = 0; c < d.channels; ++c) gbuf[c] += g_gamma[c];
        }
        if (t.requires_grad(beta)) {
          Tensor& gbuf = t.grad_buffer(beta);
          for (std::size_t c = 0; c < d.channels; ++c) gbuf[c] += g_beta[c];
        }
        if (!forced) {
          if (t.requires_grad(omega_mean)) {
            Tensor& gbuf = t.grad_buffer(omega_mean);
            for (std::size_t h = 0; h < heads; ++h)
              gbuf[h] += g_lm[h] * lambdas.mean[h] * (1.0 - lambdas.mean[h]);
          }
          if (t.requires_grad(omega_var)) {
            Tensor& gbuf = t.grad_buffer(omega_var);
            for (std::size_t h = 0; h < heads; ++h)
              gbuf[h] += g_lv[h] * lambdas.var[h] * (1.0 - lambdas.var[h]);
          }
        }
        if (t.requires_grad(a)) {
          // Softmax rows, then logits = <R_pq, a^h>.
          Tensor& gbuf = t.grad_buffer(a);
          for (std::size_t h = 0; h < heads; ++h) {
            const Tensor& P = attention[h].p;
            for (std::size_t p = 0; p < tp; ++p) {
              double dot = 0;
              for (std::size_t q = 0; q < tp; ++q) dot += P(p, q) * g_p[h](p, q);
              for (std::size_t q = 0; q < tp; ++q) {
                const double gl = P(p, q) * (g_p[h](p, q) - dot);
                const auto& r = ctx.rel_pos.at(p, q);
                gbuf[3 * h] += gl * r[0];
                gbuf[3 * h + 1] += gl * r[1];
                gbuf[3 * h + 2] += gl * r[2];
              }
            }
          }
        }
      });
}

}  // namespace ops
}  // namespace dtn
