#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dtn/dynamic_token_norm.hpp"
#include "dtn/norm.hpp"
#include "dtn/tape.hpp"
#include "dtn/tensor.hpp"

namespace dtn {

enum class NormKind { kLayer, kInstance, kDynamic };

inline const char* to_string(NormKind k) {
  switch (k) {
    case NormKind::kLayer: return "ln";
    case NormKind::kInstance: return "in";
    case NormKind::kDynamic: return "dtn";
  }
  return "?";
}

inline NormKind norm_kind_from_string(const std::string& s) {
  if (s == "ln") return NormKind::kLayer;
  if (s == "in") return NormKind::kInstance;
  if (s == "dtn") return NormKind::kDynamic;
  throw ConfigError("unknown normalizer \"" + s + "\" (expected ln, in or dtn)");
}

/// Encoder-only transformer over a rows x cols grid of patch features.
///
/// Blocks [0, l_dtn) run on the patch tokens alone with `early_norm`; the
/// class token is appended afterwards and blocks [l_dtn, layers) use LN.
struct ModelConfig {
  std::size_t layers = 3;
  std::size_t l_dtn = 2;
  std::size_t heads = 4;
  std::size_t channels = 16;
  std::size_t rows = 6;
  std::size_t cols = 6;
  std::size_t patch_dim = 16;
  std::size_t mlp_ratio = 2;
  std::size_t classes = 2;
  std::size_t pool = 1;
  NormKind early_norm = NormKind::kDynamic;
  double eps = kDefaultEps;

  /// l_dtn = floor(5L/6).
  static std::size_t default_l_dtn(std::size_t layers) { return 5 * layers / 6; }

  std::size_t tokens() const { return rows * cols; }
  GridGeometry geometry() const { return {rows, cols, heads, pool}; }
  NormKind block_norm(std::size_t block) const {
    return block < l_dtn ? early_norm : NormKind::kLayer;
  }

  void validate() const {
    if (layers == 0) throw ConfigError("model needs at least one layer");
    if (l_dtn > layers) {
      throw ConfigError("l_dtn " + std::to_string(l_dtn) + " exceeds layer count " +
                        std::to_string(layers));
    }
    if (channels == 0 || patch_dim == 0 || mlp_ratio == 0 || classes == 0) {
      throw ConfigError("model extents must be positive");
    }
    head_width(channels, heads);
    if (!(eps > 0)) throw ConfigError("eps must be positive");
    geometry().validate(l_dtn > 0 && early_norm == NormKind::kDynamic);
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct NormWeights {
  Tensor gamma;
  Tensor beta;
  Tensor omega_mean;  // DTN only
  Tensor omega_var;   // DTN only
  Tensor a;           // DTN only, (H,3)
};

struct BlockWeights {
  NormWeights norm1;
  Tensor w_qkv, b_qkv;
  Tensor w_out, b_out;
  NormWeights norm2;
  Tensor w_fc1, b_fc1;
  Tensor w_fc2, b_fc2;
};

struct NamedParam {
  std::string name;
  Tensor* value;
  bool decay;  // subject to weight decay
};

struct ModelWeights {
  Tensor w_patch, b_patch;
  Tensor pos;  // (T, C)
  Tensor cls;  // (C)
  std::vector<BlockWeights> blocks;
  NormWeights final_norm;
  Tensor w_head, b_head;

  /// Every learnable tensor with a stable dotted name, in a fixed order.
  std::vector<NamedParam> parameters() {
    std::vector<NamedParam> out;
    auto add = [&](const std::string& name, Tensor& t, bool decay) {
      if (t.size() > 0) out.push_back({name, &t, decay});
    };
    auto add_norm = [&](const std::string& prefix, NormWeights& n) {
      add(prefix + ".gamma", n.gamma, false);
      add(prefix + ".beta", n.beta, false);
      add(prefix + ".omega_mean", n.omega_mean, false);
      add(prefix + ".omega_var", n.omega_var, false);
      add(prefix + ".a", n.a, false);
    };
    add("patch.w", w_patch, true);
    add("patch.b", b_patch, false);
    add("pos", pos, false);
    add("cls", cls, false);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const std::string p = "blocks." + std::to_string(i);
      auto& b = blocks[i];
      add_norm(p + ".norm1", b.norm1);
      add(p + ".attn.w_qkv", b.w_qkv, true);
      add(p + ".attn.b_qkv", b.b_qkv, false);
      add(p + ".attn.w_out", b.w_out, true);
      add(p + ".attn.b_out", b.b_out, false);
      add_norm(p + ".norm2", b.norm2);
      add(p + ".mlp.w_fc1", b.w_fc1, true);
      add(p + ".mlp.b_fc1", b.b_fc1, false);
      add(p + ".mlp.w_fc2", b.w_fc2, true);
      add(p + ".mlp.b_fc2", b.b_fc2, false);
    }
    add_norm("final_norm", final_norm);
    add("head.w", w_head, true);
    add("head.b", b_head, false);
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.value->size();
    return n;
  }
};

inline NormWeights init_norm(std::size_t channels, std::size_t heads, NormKind kind) {
  NormWeights n;
  n.gamma = Tensor({channels}, 1.0);
  n.beta = Tensor({channels}, 0.0);
  if (kind == NormKind::kDynamic) {
    const auto p = DtnParams::init(channels, heads);
    n.omega_mean = Tensor({heads}, p.omega_mean);
    n.omega_var = Tensor({heads}, p.omega_var);
    n.a = Tensor({heads, 3});
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t k = 0; k < 3; ++k) n.a(h, k) = p.a[h][k];
  }
  return n;
}

/// DTN layer parameters held by a DTN norm slot.
inline DtnParams dtn_params_of(const NormWeights& n) {
  if (n.omega_mean.size() == 0) throw ConfigError("norm slot has no DTN parameters");
  DtnParams p;
  p.omega_mean.assign(n.omega_mean.storage().begin(), n.omega_mean.storage().end());
  p.omega_var.assign(n.omega_var.storage().begin(), n.omega_var.storage().end());
  for (std::size_t h = 0; h < n.a.dim(0); ++h) p.a.push_back({n.a(h, 0), n.a(h, 1), n.a(h, 2)});
  p.affine = AffineParams(n.gamma.size());
  p.affine.gamma.assign(n.gamma.storage().begin(), n.gamma.storage().end());
  p.affine.beta.assign(n.beta.storage().begin(), n.beta.storage().end());
  return p;
}

/// Weight initialization: linear maps ~ N(0, 1/fan_in), embeddings
/// ~ N(0, 0.02^2), biases and the head bias zero.
inline ModelWeights init_weights(const ModelConfig& cfg, std::uint64_t seed,
                                 bool zero_head = false) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto gaussian = [&](std::vector<std::size_t> shape, double std) {
    Tensor t(std::move(shape));
    for (auto& v : t.storage()) v = std * normal(rng);
    return t;
  };
  auto linear = [&](std::size_t in, std::size_t out) {
    return gaussian({in, out}, 1.0 / std::sqrt(static_cast<double>(in)));
  };
  const std::size_t c = cfg.channels;
  const std::size_t hidden = c * cfg.mlp_ratio;
  ModelWeights w;
  w.w_patch = linear(cfg.patch_dim, c);
  w.b_patch = Tensor({c});
  w.pos = gaussian({cfg.tokens(), c}, 0.02);
  w.cls = gaussian({c}, 0.02);
  for (std::size_t i = 0; i < cfg.layers; ++i) {
    BlockWeights b;
    b.norm1 = init_norm(c, cfg.heads, cfg.block_norm(i));
    b.w_qkv = linear(c, 3 * c);
    b.b_qkv = Tensor({3 * c});
    b.w_out = linear(c, c);
    b.b_out = Tensor({c});
    b.norm2 = init_norm(c, cfg.heads, cfg.block_norm(i));
    b.w_fc1 = linear(c, hidden);
    b.b_fc1 = Tensor({hidden});
    b.w_fc2 = linear(hidden, c);
    b.b_fc2 = Tensor({c});
    w.blocks.push_back(std::move(b));
  }
  w.final_norm = init_norm(c, cfg.heads, NormKind::kLayer);
  w.w_head = zero_head ? Tensor({c, cfg.classes}) : linear(c, cfg.classes);
  w.b_head = Tensor({cfg.classes});
  return w;
}

/// Attention weights of one layer, shape (B, H, T, T).
struct AttentionRecord {
  std::size_t layer = 0;
  Tensor weights;
};

namespace ops {

/// Scaled dot-product attention over packed qkv (B,T,3C) -> (B,T,C).
/// Appends the (B,H,T,T) weights to `trace` when given.
inline Var attention(GradTape& tape, Var qkv, std::size_t heads, Tensor* trace = nullptr) {
  const Tensor& in = tape.value(qkv);
  const auto d = token_dims(in);
  if (d.channels % 3 != 0) throw DimensionError("attention: qkv width must be 3C");
  const std::size_t c = d.channels / 3;
  const std::size_t w = head_width(c, heads);
  const std::size_t n = d.tokens;
  const double scale = 1.0 / std::sqrt(static_cast<double>(w));

  Tensor probs({d.batch, heads, n, n});
  Tensor out({d.batch, n, c});
  auto q_at = [&](std::size_t b, std::size_t t, std::size_t k) { return in(b, t, k); };
  auto k_at = [&](std::size_t b, std::size_t t, std::size_t k) { return in(b, t, c + k); };
  auto v_at = [&](std::size_t b, std::size_t t, std::size_t k) { return in(b, t, 2 * c + k); };
  std::vector<double> row(n);
  for (std::size_t b = 0; b < d.batch; ++b)
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t c0 = h * w;
      for (std::size_t i = 0; i < n; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
          double s = 0;
          for (std::size_t k = c0; k < c0 + w; ++k) s += q_at(b, i, k) * k_at(b, j, k);
          row[j] = s * scale;
          mx = std::max(mx, row[j]);
        }
        double sum = 0;
        for (std::size_t j = 0; j < n; ++j) {
          row[j] = std::exp(row[j] - mx);
          sum += row[j];
        }
        const std::size_t base = ((b * heads + h) * n + i) * n;
        for (std::size_t j = 0; j < n; ++j) probs[base + j] = row[j] / sum;
        for (std::size_t j = 0; j < n; ++j) {
          const double a = probs[base + j];
          for (std::size_t k = c0; k < c0 + w; ++k) out(b, i, k) += a * v_at(b, j, k);
        }
      }
    }
  if (trace) *trace = probs;
  return tape.record(
      std::move(out), {qkv},
      [qkv, heads, d, c, w, n, scale, probs = std::move(probs)](GradTape& t, const Tensor& g) {
        const Tensor& in = t.value(qkv);
        Tensor& gin = t.grad_buffer(qkv);
        std::vector<double> gp(n);
        for (std::size_t b = 0; b < d.batch; ++b)
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t c0 = h * w;
            for (std::size_t i = 0; i < n; ++i) {
              const std::size_t base = ((b * heads + h) * n + i) * n;
              double dot = 0;
              for (std::size_t j = 0; j < n; ++j) {
                double s = 0;
                for (std::size_t k = c0; k < c0 + w; ++k) s += g(b, i, k) * in(b, j, 2 * c + k);
                gp[j] = s;
                dot += s * probs[base + j];
                // dV_j += A_ij * dO_i
                const double a = probs[base + j];
                for (std::size_t k = c0; k < c0 + w; ++k) gin(b, j, 2 * c + k) += a * g(b, i, k);
              }
              for (std::size_t j = 0; j < n; ++j) {
                const double gs = probs[base + j] * (gp[j] - dot) * scale;
                for (std::size_t k = c0; k < c0 + w; ++k) {
                  gin(b, i, k) += gs * in(b, j, c + k);
                  gin(b, j, c + k) += gs * in(b, i, k);
                }
              }
            }
          }
      });
}

}  // namespace ops

/// Maps parameter tensors to tape leaves, creating each leaf once.
class ParamBinder {
 public:
  ParamBinder(GradTape& tape, bool track_grads) : tape_(tape), track_(track_grads) {}

  Var operator()(const Tensor& t) {
    auto it = vars_.find(&t);
    if (it != vars_.end()) return it->second;
    Var v = track_ ? tape_.parameter(t) : tape_.constant(t);
    vars_.emplace(&t, v);
    return v;
  }

  /// Leaf of `t`, if it was used in the forward pass.
  std::optional<Var> find(const Tensor& t) const {
    auto it = vars_.find(&t);
    if (it == vars_.end()) return std::nullopt;
    return it->second;
  }

  GradTape& tape() { return tape_; }

 private:
  GradTape& tape_;
  bool track_;
  std::unordered_map<const Tensor*, Var> vars_;
};

struct ForwardOptions {
  /// Pins every DTN layer's mixing weights to this value.
  std::optional<double> forced_lambda;
  /// Receives one record per block when set.
  std::vector<AttentionRecord>* attention_trace = nullptr;
};

/// Weights plus configuration; the DTN context (relative embedding) is
/// built once per model.
class ToyTransformer {
 public:
  ToyTransformer(ModelConfig cfg, ModelWeights weights)
      : cfg_(std::move(cfg)), weights_(std::move(weights)) {
    cfg_.validate();
    if (weights_.blocks.size() != cfg_.layers) {
      throw DimensionError("ToyTransformer: weights have " +
                           std::to_string(weights_.blocks.size()) + " blocks, config " +
                           std::to_string(cfg_.layers));
    }
    if (cfg_.l_dtn > 0 && cfg_.early_norm == NormKind::kDynamic) {
      ctx_ = std::make_unique<DtnContext>(cfg_.geometry());
    }
  }

  ToyTransformer(const ToyTransformer& o) : ToyTransformer(o.cfg_, o.weights_) {}
  ToyTransformer& operator=(const ToyTransformer& o) {
    if (this != &o) *this = ToyTransformer(o);
    return *this;
  }
  ToyTransformer(ToyTransformer&&) noexcept = default;
  ToyTransformer& operator=(ToyTransformer&&) noexcept = default;

  const ModelConfig& config() const { return cfg_; }
  ModelWeights& weights() { return weights_; }
  const ModelWeights& weights() const { return weights_; }

  /// Normalizer of the given kind on x.
  Var normalize(ParamBinder& bind, Var x, const NormWeights& n, NormKind kind,
                const ForwardOptions& opt) const {
    GradTape& tape = bind.tape();
    switch (kind) {
      case NormKind::kLayer:
        return ops::layer_norm(tape, x, bind(n.gamma), bind(n.beta), cfg_.eps);
      case NormKind::kInstance:
        return ops::instance_norm(tape, x, bind(n.gamma), bind(n.beta), cfg_.eps);
      case NormKind::kDynamic:
        return ops::dtn(tape, x, bind(n.omega_mean), bind(n.omega_var), bind(n.a), bind(n.gamma),
                        bind(n.beta), *ctx_, cfg_.eps, opt.forced_lambda);
    }
    throw ConfigError("unknown normalizer kind");
  }

  /// Multi-head self-attention sub-layer (without residual).
  Var mhsa(ParamBinder& bind, Var x, const BlockWeights& b, Tensor* trace = nullptr) const {
    GradTape& tape = bind.tape();
    Var qkv = ops::linear(tape, x, bind(b.w_qkv), bind(b.b_qkv));
    Var att = ops::attention(tape, qkv, cfg_.heads, trace);
    return ops::linear(tape, att, bind(b.w_out), bind(b.b_out));
  }

  /// Pre-norm block: x + MHSA(norm1(x)), then x + MLP(norm2(x)).
  Var block(ParamBinder& bind, Var x, std::size_t index, const ForwardOptions& opt) const {
    GradTape& tape = bind.tape();
    const BlockWeights& b = weights_.blocks[index];
    const NormKind kind = cfg_.block_norm(index);
    Tensor* trace = nullptr;
    if (opt.attention_trace) {
      opt.attention_trace->push_back({index, Tensor{}});
      trace = &opt.attention_trace->back().weights;
    }
    Var h = normalize(bind, x, b.norm1, kind, opt);
    x = ops::add(tape, x, mhsa(bind, h, b, trace));
    h = normalize(bind, x, b.norm2, kind, opt);
    h = ops::linear(tape, h, bind(b.w_fc1), bind(b.b_fc1));
    h = ops::gelu(tape, h);
    h = ops::linear(tape, h, bind(b.w_fc2), bind(b.b_fc2));
    return ops::add(tape, x, h);
  }

  /// patches (B, T, patch_dim) -> logits (B, classes).
  Var forward(ParamBinder& bind, const Tensor& patches, const ForwardOptions& opt = {}) const {
    GradTape& tape = bind.tape();
    const auto d = token_dims(patches);
    if (d.tokens != cfg_.tokens() || d.channels != cfg_.patch_dim) {
      throw DimensionError("model input " + shape_string(patches.shape()) + " does not match " +
                           std::to_string(cfg_.tokens()) + " tokens of width " +
                           std::to_string(cfg_.patch_dim));
    }
    Var x = tape.constant(patches);
    x = ops::linear(tape, x, bind(weights_.w_patch), bind(weights_.b_patch));
    x = ops::add_token_bias(tape, x, bind(weights_.pos));
    for (std::size_t i = 0; i < cfg_.l_dtn; ++i) x = block(bind, x, i, opt);
    x = ops::append_token(tape, x, bind(weights_.cls));
    for (std::size_t i = cfg_.l_dtn; i < cfg_.layers; ++i) x = block(bind, x, i, opt);
    x = ops::layer_norm(tape, x, bind(weights_.final_norm.gamma), bind(weights_.final_norm.beta),
                        cfg_.eps);
    Var cls = ops::select_token(tape, x, cfg_.tokens());
    return ops::linear(tape, cls, bind(weights_.w_head), bind(weights_.b_head));
  }

  Tensor logits(const Tensor& patches, const ForwardOptions& opt = {}) const {
    GradTape tape;
    ParamBinder bind(tape, false);
    return tape.value(forward(bind, patches, opt));
  }

  /// Patch embedding plus position embedding: the input of block 0.
  Tensor embed(const Tensor& patches) const {
    GradTape tape;
    ParamBinder bind(tape, false);
    Var x = ops::linear(tape, tape.constant(patches), bind(weights_.w_patch),
                        bind(weights_.b_patch));
    return tape.value(ops::add_token_bias(tape, x, bind(weights_.pos)));
  }

 private:
  ModelConfig cfg_;
  ModelWeights weights_;
  std::unique_ptr<DtnContext> ctx_;
};

/// Attention sub-layer alone on a (B,T,C) tensor: qkv projection,
/// attention, output projection. No normalization or residual.
inline std::pair<Tensor, AttentionRecord> mhsa_forward(const Tensor& x, const BlockWeights& w,
                                                       std::size_t heads) {
  const auto d = token_dims(x);
  head_width(d.channels, heads);
  GradTape tape;
  ParamBinder bind(tape, false);
  AttentionRecord rec;
  Var qkv = ops::linear(tape, tape.constant(x), bind(w.w_qkv), bind(w.b_qkv));
  Var att = ops::attention(tape, qkv, heads, &rec.weights);
  Var out = ops::linear(tape, att, bind(w.w_out), bind(w.b_out));
  return {tape.value(out), std::move(rec)};
}

/// Plain forward: patches -> logits.
inline Tensor model_forward(const ToyTransformer& model, const Tensor& patches,
                            const ForwardOptions& opt = {}) {
  return model.logits(patches, opt);
}

}  // namespace dtn
