#pragma once

#include <cmath>
#include <concepts>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "dtn/tape.hpp"
#include "dtn/tensor.hpp"

namespace dtn {

inline constexpr double kDefaultEps = 1e-5;

/// Channel-wise scale and shift, gamma = 1 and beta = 0 at construction.
template <std::floating_point Real>
struct BasicAffineParams {
  std::vector<Real> gamma;
  std::vector<Real> beta;

  BasicAffineParams() = default;
  explicit BasicAffineParams(std::size_t channels) : gamma(channels, Real{1}), beta(channels, Real{0}) {}

  std::size_t channels() const noexcept { return gamma.size(); }
  friend bool operator==(const BasicAffineParams&, const BasicAffineParams&) = default;
};
using AffineParams = BasicAffineParams<double>;

enum class StatsProvenance { kLayer, kInstance, kDynamic };

inline const char* to_string(StatsProvenance p) {
  switch (p) {
    case StatsProvenance::kLayer: return "ln";
    case StatsProvenance::kInstance: return "in";
    case StatsProvenance::kDynamic: return "dtn";
  }
  return "?";
}

/// Normalization constants broadcast to the full (B,T,C) shape.
template <std::floating_point Real>
struct BasicNormStats {
  BasicTensor<Real> mean;
  BasicTensor<Real> var;
  StatsProvenance provenance;
};
using NormStats = BasicNormStats<double>;

/// Intra-token statistics: mean/variance over the C channels of each token.
template <std::floating_point Real>
BasicNormStats<Real> ln_stats(const BasicTensor<Real>& x) {
  const auto d = token_dims(x);
  BasicNormStats<Real> s{BasicTensor<Real>(x.shape()), BasicTensor<Real>(x.shape()),
                         StatsProvenance::kLayer};
  for (std::size_t b = 0; b < d.batch; ++b)
    for (std::size_t t = 0; t < d.tokens; ++t) {
      const auto row = x.data().subspan((b * d.tokens + t) * d.channels, d.channels);
      const auto mv = reduce_stats<Real>(row);
      for (std::size_t c = 0; c < d.channels; ++c) {
        s.mean(b, t, c) = mv.mean;
        s.var(b, t, c) = mv.var;
      }
    }
  return s;
}

/// Inter-token statistics: per sample, per channel, over the T tokens.
/// T = 1 is allowed and yields zero variance.
template <std::floating_point Real>
BasicNormStats<Real> in_stats(const BasicTensor<Real>& x) {
  const auto d = token_dims(x);
  BasicNormStats<Real> s{BasicTensor<Real>(x.shape()), BasicTensor<Real>(x.shape()),
                         StatsProvenance::kInstance};
  std::vector<Real> column(d.tokens);
  for (std::size_t b = 0; b < d.batch; ++b)
    for (std::size_t c = 0; c < d.channels; ++c) {
      for (std::size_t t = 0; t < d.tokens; ++t) column[t] = x(b, t, c);
      const auto mv = reduce_stats<Real>(column);
      for (std::size_t t = 0; t < d.tokens; ++t) {
        s.mean(b, t, c) = mv.mean;
        s.var(b, t, c) = mv.var;
      }
    }
  return s;
}

/// gamma * (x - mean) / sqrt(var + eps) + beta, channel-wise gamma/beta.
template <std::floating_point Real>
BasicTensor<Real> affine_normalize(const BasicTensor<Real>& x, const BasicNormStats<Real>& s,
                                   const BasicAffineParams<Real>& p, Real eps = Real(kDefaultEps)) {
  if (!(eps > 0)) throw ConfigError("affine_normalize: eps must be positive");
  const auto d = token_dims(x);
  if (!s.mean.same_shape(x) || !s.var.same_shape(x)) {
    throw DimensionError("affine_normalize: stats shape does not match input " +
                         shape_string(x.shape()));
  }
  if (p.gamma.size() != d.channels || p.beta.size() != d.channels) {
    throw DimensionError("affine_normalize: affine params have length " +
                         std::to_string(p.gamma.size()) + ", expected " +
                         std::to_string(d.channels));
  }
  BasicTensor<Real> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const std::size_t c = i % d.channels;
    y[i] = p.gamma[c] * (x[i] - s.mean[i]) / std::sqrt(s.var[i] + eps) + p.beta[c];
  }
  return y;
}

template <std::floating_point Real>
BasicTensor<Real> layer_norm(const BasicTensor<Real>& x, const BasicAffineParams<Real>& p,
                             Real eps = Real(kDefaultEps)) {
  require_finite<Real>(x.data(), "layer_norm input");
  return affine_normalize(x, ln_stats(x), p, eps);
}

template <std::floating_point Real>
BasicTensor<Real> instance_norm(const BasicTensor<Real>& x, const BasicAffineParams<Real>& p,
                                Real eps = Real(kDefaultEps)) {
  require_finite<Real>(x.data(), "instance_norm input");
  return affine_normalize(x, in_stats(x), p, eps);
}

namespace ops {
namespace detail {

enum class NormAxis { kChannels, kTokens };

inline Var axis_norm(GradTape& tape, Var x, Var gamma, Var beta, double eps, NormAxis axis) {
  const Tensor& xv = tape.value(x);
  require_finite<double>(xv.data(), axis == NormAxis::kChannels ? "layer_norm input"
                                                                 : "instance_norm input");
  const auto d = token_dims(xv);
  AffineParams affine;
  affine.gamma = tape.value(gamma).storage();
  affine.beta = tape.value(beta).storage();
  NormStats st = axis == NormAxis::kChannels ? ln_stats(xv) : in_stats(xv);
  Tensor y = affine_normalize(xv, st, affine, eps);

  Tensor xhat(xv.shape());
  Tensor rstd(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    rstd[i] = 1.0 / std::sqrt(st.var[i] + eps);
    xhat[i] = (xv[i] - st.mean[i]) * rstd[i];
  }
  return tape.record(
      std::move(y), {x, gamma, beta},
      [x, gamma, beta, d, axis, xhat = std::move(xhat), rstd = std::move(rstd)](
          GradTape& t, const Tensor& g) {
        const Tensor& gv = t.value(gamma);
        if (t.requires_grad(gamma) || t.requires_grad(beta)) {
          Tensor& gg = t.grad_buffer(gamma);
          Tensor& gb = t.grad_buffer(beta);
          for (std::size_t i = 0; i < g.size(); ++i) {
            const std::size_t c = i % d.channels;
            gg[c] += g[i] * xhat[i];
            gb[c] += g[i];
          }
        }
        if (!t.requires_grad(x)) return;
        Tensor& gx = t.grad_buffer(x);
        // dx = rstd * (gxhat - mean(gxhat) - xhat * mean(gxhat * xhat)) per group.
        auto apply = [&](std::size_t count, auto index) {
          double m1 = 0, m2 = 0;
          for (std::size_t k = 0; k < count; ++k) {
            const std::size_t i = index(k);
            const double gh = g[i] * gv[i % d.channels];
            m1 += gh;
            m2 += gh * xhat[i];
          }
          m1 /= static_cast<double>(count);
          m2 /= static_cast<double>(count);
          for (std::size_t k = 0; k < count; ++k) {
            const std::size_t i = index(k);
            const double gh = g[i] * gv[i % d.channels];
            gx[i] += rstd[i] * (gh - m1 - xhat[i] * m2);
          }
        };
        for (std::size_t b = 0; b < d.batch; ++b) {
          if (axis == NormAxis::kChannels) {
            for (std::size_t tt = 0; tt < d.tokens; ++tt) {
              const std::size_t base = (b * d.tokens + tt) * d.channels;
              apply(d.channels, [base](std::size_t k) { return base + k; });
            }
          } else {
            for (std::size_t c = 0; c < d.channels; ++c) {
              const std::size_t base = b * d.tokens * d.channels + c;
              const std::size_t stride = d.channels;
              apply(d.tokens, [base, stride](std::size_t k) { return base + k * stride; });
            }
          }
        }
      });
}

}  // namespace detail

inline Var layer_norm(GradTape& tape, Var x, Var gamma, Var beta, double eps = kDefaultEps) {
  return detail::axis_norm(tape, x, gamma, beta, eps, detail::NormAxis::kChannels);
}

inline Var instance_norm(GradTape& tape, Var x, Var gamma, Var beta, double eps = kDefaultEps) {
  return detail::axis_norm(tape, x, gamma, beta, eps, detail::NormAxis::kTokens);
}

}  // namespace ops
}  // namespace dtn
