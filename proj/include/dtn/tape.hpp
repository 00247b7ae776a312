#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dtn/tensor.hpp"

namespace dtn {

/// Handle to a value recorded on a GradTape.
struct Var {
  std::size_t id = std::numeric_limits<std::size_t>::max();
  bool valid() const noexcept { return id != std::numeric_limits<std::size_t>::max(); }
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so a reverse
/// sweep visits every consumer before its producers. One tape per thread.
class GradTape {
 public:
  /// Propagates the gradient of node `self` into its inputs.
  using Backward = std::function<void(GradTape&, const Tensor& out_grad)>;

  Var constant(Tensor value) { return push(std::move(value), false, {}); }
  Var parameter(Tensor value) { return push(std::move(value), true, {}); }

  Var record(Tensor value, std::initializer_list<Var> inputs, Backward backward) {
    bool needs = false;
    for (Var v : inputs) needs = needs || node(v).requires_grad;
    return push(std::move(value), needs, needs ? std::move(backward) : Backward{});
  }

  const Tensor& value(Var v) const { return node(v).value; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }

  /// Gradient buffer of `v`, zero-allocated on first touch. Only call for
  /// nodes that require grad.
  Tensor& grad_buffer(Var v) {
    Node& n = node(v);
    if (n.grad.size() != n.value.size() || !n.grad.same_shape(n.value)) {
      n.grad = Tensor(n.value.shape());
    }
    return n.grad;
  }

  /// Gradient of `v` after backward(); zeros if nothing flowed into it.
  Tensor grad(Var v) const {
    const Node& n = node(v);
    if (n.grad.same_shape(n.value) && n.grad.size() == n.value.size()) return n.grad;
    return Tensor(n.value.shape());
  }

  void backward(Var output) {
    Node& out = node(output);
    if (out.value.size() != 1) {
      throw DimensionError("backward: output must be a scalar, got shape " +
                           shape_string(out.value.shape()));
    }
    if (!out.requires_grad) return;
    grad_buffer(output)[0] = 1.0;
    for (std::size_t i = output.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.size() == 0) continue;
      n.backward(*this, n.grad);
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Backward backward;
  };

  Var push(Tensor value, bool requires_grad, Backward backward) {
    nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad, std::move(backward)});
    return Var{nodes_.size() - 1};
  }

  Node& node(Var v) {
    if (v.id >= nodes_.size()) throw std::out_of_range("GradTape: invalid Var");
    return nodes_[v.id];
  }
  const Node& node(Var v) const {
    if (v.id >= nodes_.size()) throw std::out_of_range("GradTape: invalid Var");
    return nodes_[v.id];
  }

  std::vector<Node> nodes_;
};

namespace ops {

/// y = x W + b over the last axis. x: (..., in), W: (in, out), b: (out).
inline Var linear(GradTape& tape, Var x, Var w, Var b) {
  const Tensor& xv = tape.value(x);
  const Tensor& wv = tape.value(w);
  const Tensor& bv = tape.value(b);
  if (wv.rank() != 2 || xv.rank() == 0 || xv.shape().back() != wv.dim(0) ||
      bv.size() != wv.dim(1)) {
    throw DimensionError("linear: incompatible shapes x" + shape_string(xv.shape()) + " W" +
                         shape_string(wv.shape()) + " b" + shape_string(bv.shape()));
  }
  const std::size_t in = wv.dim(0), out = wv.dim(1);
  const std::size_t rows = xv.size() / in;
  auto shape = xv.shape();
  shape.back() = out;
  Tensor y(shape);
  for (std::size_t r = 0; r < rows; ++r) {
    double* __restrict yr = &y[r * out];
    for (std::size_t o = 0; o < out; ++o) yr[o] = bv[o];
    const double* __restrict xr = &xv[r * in];
    for (std::size_t i = 0; i < in; ++i) {
      const double xi = xr[i];
      const double* __restrict wi = &wv[i * out];
      for (std::size_t o = 0; o < out; ++o) yr[o] += xi * wi[o];
    }
  }
  return tape.record(std::move(y), {x, w, b}, [x, w, b, rows, in, out](GradTape& t, const Tensor& g) {
    const Tensor& xv = t.value(x);
    const Tensor& wv = t.value(w);
    if (t.requires_grad(x)) {
      // gx = g W^T, accumulated row by row against a transposed copy of W.
      std::vector<double> wt(in * out);
      for (std::size_t i = 0; i < in; ++i)
        for (std::size_t o = 0; o < out; ++o) wt[o * in + i] = wv[i * out + o];
      Tensor& gx = t.grad_buffer(x);
      for (std::size_t r = 0; r < rows; ++r) {
        double* __restrict gxr = &gx[r * in];
        for (std::size_t o = 0; o < out; ++o) {
          const double go = g[r * out + o];
          const double* __restrict wo = &wt[o * in];
          for (std::size_t i = 0; i < in; ++i) gxr[i] += go * wo[i];
        }
      }
    }
    if (t.requires_grad(w)) {
      Tensor& gw = t.grad_buffer(w);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* __restrict gr = &g[r * out];
        for (std::size_t i = 0; i < in; ++i) {
          const double xi = xv[r * in + i];
          double* __restrict gwi = &gw[i * out];
          for (std::size_t o = 0; o < out; ++o) gwi[o] += xi * gr[o];
        }
      }
    }
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad_buffer(b);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t o = 0; o < out; ++o) gb[o] += g[r * out + o];
    }
  });
}

inline Var add(GradTape& tape, Var a, Var b) {
  const Tensor& av = tape.value(a);
  const Tensor& bv = tape.value(b);
  if (!av.same_shape(bv)) {
    throw DimensionError("add: shapes " + shape_string(av.shape()) + " and " +
                         shape_string(bv.shape()) + " differ");
  }
  Tensor y = av;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
  return tape.record(std::move(y), {a, b}, [a, b](GradTape& t, const Tensor& g) {
    for (Var v : {a, b}) {
      if (!t.requires_grad(v)) continue;
      Tensor& gv = t.grad_buffer(v);
      for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
    }
  });
}

/// x (B,T,C) + p (T,C) broadcast over the batch.
inline Var add_token_bias(GradTape& tape, Var x, Var p) {
  const Tensor& xv = tape.value(x);
  const Tensor& pv = tape.value(p);
  const auto d = token_dims(xv);
  if (pv.rank() != 2 || pv.dim(0) != d.tokens || pv.dim(1) != d.channels) {
    throw DimensionError("add_token_bias: bias shape " + shape_string(pv.shape()) +
                         " does not match tokens of " + shape_string(xv.shape()));
  }
  Tensor y = xv;
  const std::size_t tc = d.tokens * d.channels;
  for (std::size_t b = 0; b < d.batch; ++b)
    for (std::size_t i = 0; i < tc; ++i) y[b * tc + i] += pv[i];
  return tape.record(std::move(y), {x, p}, [x, p, d, tc](GradTape& t, const Tensor& g) {
    if (t.requires_grad(x)) {
      Tensor& gx = t.grad_buffer(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (t.requires_grad(p)) {
      Tensor& gp = t.grad_buffer(p);
      for (std::size_t b = 0; b < d.batch; ++b)
        for (std::size_t i = 0; i < tc; ++i) gp[i] += g[b * tc + i];
    }
  });
}

/// Exact (erf) GELU.
inline Var gelu(GradTape& tape, Var x) {
  const Tensor& xv = tape.value(x);
  Tensor y(xv.shape());
  for (std::size_t i = 0; i < y.size(); ++i)
    y[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * std::numbers::sqrt2 / 2.0));
  return tape.record(std::move(y), {x}, [x](GradTape& t, const Tensor& g) {
    const Tensor& xv = t.value(x);
    Tensor& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xv[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
      const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi);
      gx[i] += g[i] * (cdf + v * pdf);
    }
  });
}

/// Appends token `tok` (C) to every sequence of x (B,T,C) as token T.
inline Var append_token(GradTape& tape, Var x, Var tok) {
  const Tensor& xv = tape.value(x);
  const Tensor& tv = tape.value(tok);
  const auto d = token_dims(xv);
  if (tv.size() != d.channels) {
    throw DimensionError("append_token: token width " + std::to_string(tv.size()) +
                         " != channels " + std::to_string(d.channels));
  }
  Tensor y({d.batch, d.tokens + 1, d.channels});
  for (std::size_t b = 0; b < d.batch; ++b) {
    for (std::size_t t = 0; t < d.tokens; ++t)
      for (std::size_t c = 0; c < d.channels; ++c) y(b, t, c) = xv(b, t, c);
    for (std::size_t c = 0; c < d.channels; ++c) y(b, d.tokens, c) = tv[c];
  }
  return tape.record(std::move(y), {x, tok}, [x, tok, d](GradTape& t, const Tensor& g) {
    if (t.requires_grad(x)) {
      Tensor& gx = t.grad_buffer(x);
      for (std::size_t b = 0; b < d.batch; ++b)
        for (std::size_t tt = 0; tt < d.tokens; ++tt)
          for (std::size_t c = 0; c < d.channels; ++c) gx(b, tt, c) += g(b, tt, c);
    }
    if (t.requires_grad(tok)) {
      Tensor& gt = t.grad_buffer(tok);
      for (std::size_t b = 0; b < d.batch; ++b)
        for (std::size_t c = 0; c < d.channels; ++c) gt[c] += g(b, d.tokens, c);
    }
  });
}

/// Picks token `index` of every sequence: (B,T,C) -> (B,C).
inline Var select_token(GradTape& tape, Var x, std::size_t index) {
  const Tensor& xv = tape.value(x);
  const auto d = token_dims(xv);
  if (index >= d.tokens) throw DimensionError("select_token: index out of range");
  Tensor y({d.batch, d.channels});
  for (std::size_t b = 0; b < d.batch; ++b)
    for (std::size_t c = 0; c < d.channels; ++c) y(b, c) = xv(b, index, c);
  return tape.record(std::move(y), {x}, [x, d, index](GradTape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(x);
    for (std::size_t b = 0; b < d.batch; ++b)
      for (std::size_t c = 0; c < d.channels; ++c) gx(b, index, c) += g(b, c);
  });
}

/// Mean softmax cross-entropy of logits (B,K) against integer labels.
inline Var cross_entropy(GradTape& tape, Var logits, std::span<const int> labels) {
  const Tensor& lv = tape.value(logits);
  if (lv.rank() != 2 || lv.dim(0) != labels.size()) {
    throw DimensionError("cross_entropy: logits " + shape_string(lv.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = lv.dim(0), k = lv.dim(1);
  Tensor probs = softmax_rows(lv);
  double loss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto label = static_cast<std::size_t>(labels[i]);
    if (labels[i] < 0 || label >= k) throw DimensionError("cross_entropy: label out of range");
    double mx = lv(i, 0);
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, lv(i, j));
    double se = 0;
    for (std::size_t j = 0; j < k; ++j) se += std::exp(lv(i, j) - mx);
    loss += std::log(se) + mx - lv(i, label);
  }
  loss /= static_cast<double>(n);
  std::vector<int> lab(labels.begin(), labels.end());
  return tape.record(Tensor::scalar(loss), {logits},
                     [logits, probs = std::move(probs), lab = std::move(lab), n, k](
                         GradTape& t, const Tensor& g) {
                       Tensor& gl = t.grad_buffer(logits);
                       const double scale = g[0] / static_cast<double>(n);
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t j = 0; j < k; ++j) {
                           const double target =
                               j == static_cast<std::size_t>(lab[i]) ? 1.0 : 0.0;
                           gl(i, j) += scale * (probs(i, j) - target);
                         }
                     });
}

/// sum_i x_i * w_i against a constant weight tensor; used as a probe loss.
inline Var weighted_sum(GradTape& tape, Var x, const Tensor& weights) {
  const Tensor& xv = tape.value(x);
  if (!xv.same_shape(weights)) throw DimensionError("weighted_sum: shape mismatch");
  double s = 0;
  for (std::size_t i = 0; i < xv.size(); ++i) s += xv[i] * weights[i];
  return tape.record(Tensor::scalar(s), {x}, [x, weights](GradTape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[0] * weights[i];
  });
}

}  // namespace ops
}  // namespace dtn
