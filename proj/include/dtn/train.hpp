#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "dtn/dynamic_token_norm.hpp"
#include "dtn/model.hpp"
#include "dtn/serialize.hpp"
#include "dtn/tasks.hpp"

namespace dtn {

/// Decoupled weight decay Adam with a linear-warmup cosine schedule.
struct TrainConfig {
  std::size_t steps = 600;
  std::size_t batch_size = 16;
  double lr = 3e-3;
  double min_lr = 0.0;
  std::size_t warmup = 60;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double mixture_lr_scale = 10.0;  // multiplies lr for the omega logits
  std::uint64_t seed = 0;
  std::size_t eval_threads = 1;  // final accuracy only; training stays single-threaded
};

inline double cosine_lr(const TrainConfig& tc, std::size_t step) {
  if (step < tc.warmup) {
    return tc.lr * static_cast<double>(step + 1) / static_cast<double>(tc.warmup);
  }
  const double span = static_cast<double>(std::max<std::size_t>(tc.steps - tc.warmup, 1));
  const double progress = static_cast<double>(step - tc.warmup) / span;
  return tc.min_lr + 0.5 * (tc.lr - tc.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

class AdamW {
 public:
  explicit AdamW(const TrainConfig& tc) : tc_(tc) {}

  /// params and grads are parallel; decay flags come from the params.
  void step(std::vector<NamedParam>& params, const std::vector<Tensor>& grads, double lr) {
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.emplace_back(p.value->shape());
        v_.emplace_back(p.value->shape());
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(tc_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(tc_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor& w = *params[i].value;
      const Tensor& g = grads[i];
      const double decay = params[i].decay ? tc_.weight_decay : 0.0;
      const bool mixture = params[i].name.find(".omega_") != std::string::npos;
      const double rate = mixture ? lr * tc_.mixture_lr_scale : lr;
      for (std::size_t k = 0; k < w.size(); ++k) {
        m_[i][k] = tc_.beta1 * m_[i][k] + (1.0 - tc_.beta1) * g[k];
        v_[i][k] = tc_.beta2 * v_[i][k] + (1.0 - tc_.beta2) * g[k] * g[k];
        const double mh = m_[i][k] / bc1;
        const double vh = v_[i][k] / bc2;
        w[k] -= rate * (mh / (std::sqrt(vh) + tc_.adam_eps) + decay * w[k]);
      }
    }
  }

 private:
  TrainConfig tc_;
  std::vector<Tensor> m_, v_;
  std::size_t t_ = 0;
};

/// One row of a lambda trace CSV.
struct LambdaTraceRow {
  std::size_t step = 0;
  std::size_t layer = 0;
  std::size_t head = 0;
  double lambda_mean = 0;
  double lambda_var = 0;
  friend bool operator==(const LambdaTraceRow&, const LambdaTraceRow&) = default;
};

inline void append_lambda_trace(std::vector<LambdaTraceRow>& trace, std::size_t step,
                                const ToyTransformer& model) {
  const auto& cfg = model.config();
  if (cfg.early_norm != NormKind::kDynamic) return;
  for (std::size_t l = 0; l < cfg.l_dtn; ++l) {
    // Traced layer index is 2 * block + slot (norm1 = 0, norm2 = 1).
    const auto& b = model.weights().blocks[l];
    for (std::size_t which = 0; which < 2; ++which) {
      const NormWeights& n = which == 0 ? b.norm1 : b.norm2;
      for (std::size_t h = 0; h < cfg.heads; ++h) {
        trace.push_back({step, 2 * l + which, h, sigmoid(n.omega_mean[h]),
                         sigmoid(n.omega_var[h])});
      }
    }
  }
}

/// Serialized model: config plus every parameter array.
inline json checkpoint_to_json(ToyTransformer& model, std::uint64_t seed, std::size_t step) {
  const auto& c = model.config();
  json cfg = {{"layers", c.layers},     {"l_dtn", c.l_dtn},     {"heads", c.heads},
              {"channels", c.channels}, {"rows", c.rows},       {"cols", c.cols},
              {"patch_dim", c.patch_dim}, {"mlp_ratio", c.mlp_ratio}, {"classes", c.classes},
              {"pool_s", c.pool},       {"early_norm", to_string(c.early_norm)},
              {"eps", real_to_string(c.eps)}};
  json params = json::object();
  for (const auto& p : model.weights().parameters()) params[p.name] = tensor_to_json(*p.value);
  return json{{"config", cfg}, {"seed", seed}, {"step", step}, {"params", params}};
}

inline ModelConfig model_config_from_json(const json& j) {
  const std::string where = "checkpoint config";
  reject_unknown_keys(j, {"layers", "l_dtn", "heads", "channels", "rows", "cols", "patch_dim",
                          "mlp_ratio", "classes", "pool_s", "early_norm", "eps"},
                      where);
  ModelConfig c;
  c.layers = size_from_json(j, "layers", where);
  c.l_dtn = size_from_json(j, "l_dtn", where);
  c.heads = size_from_json(j, "heads", where);
  c.channels = size_from_json(j, "channels", where);
  c.rows = size_from_json(j, "rows", where);
  c.cols = size_from_json(j, "cols", where);
  c.patch_dim = size_from_json(j, "patch_dim", where);
  c.mlp_ratio = size_from_json(j, "mlp_ratio", where);
  c.classes = size_from_json(j, "classes", where);
  c.pool = size_from_json(j, "pool_s", where);
  const json& norm = require_key(j, "early_norm", where);
  if (!norm.is_string()) throw ParseError(where + ": early_norm must be a string");
  const json& eps = require_key(j, "eps", where);
  if (!eps.is_string()) throw ParseError(where + ": eps must be a decimal string");
  try {
    c.early_norm = norm_kind_from_string(norm.get<std::string>());
    c.eps = real_from_string(eps.get<std::string>());
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ParseError(where + ": " + e.what());
  }
  return c;
}

struct LoadedCheckpoint {
  ToyTransformer model;
  std::uint64_t seed;
  std::size_t step;
};

inline LoadedCheckpoint checkpoint_from_json(const json& j) {
  reject_unknown_keys(j, {"config", "seed", "step", "params"}, "checkpoint");
  const ModelConfig cfg = model_config_from_json(require_key(j, "config", "checkpoint"));
  ModelWeights w = init_weights(cfg, 0);
  const json& params = require_key(j, "params", "checkpoint");
  auto named = w.parameters();
  if (!params.is_object() || params.size() != named.size()) {
    throw ParseError("checkpoint: expected " + std::to_string(named.size()) + " parameter arrays");
  }
  for (auto& p : named) {
    if (!params.contains(p.name)) throw ParseError("checkpoint: missing parameter " + p.name);
    Tensor t = tensor_from_json(params.at(p.name), p.name);
    if (!t.same_shape(*p.value)) {
      throw ParseError("checkpoint: parameter " + p.name + " has shape " +
                       shape_string(t.shape()) + ", expected " + shape_string(p.value->shape()));
    }
    *p.value = std::move(t);
  }
  return {ToyTransformer(cfg, std::move(w)), size_from_json(j, "seed", "checkpoint"),
          size_from_json(j, "step", "checkpoint")};
}

/// Fraction of samples [begin, end) classified correctly. Batches may be
/// spread over `threads`; per-sample results make the total order-free.
inline double evaluate_accuracy(const ToyTransformer& model, const Dataset& ds, std::size_t begin,
                                std::size_t end, std::size_t threads = 1,
                                std::size_t batch = 64) {
  if (end <= begin) return 0.0;
  std::vector<char> correct(end - begin, 0);
  std::vector<std::pair<std::size_t, std::size_t>> chunks;
  for (std::size_t s = begin; s < end; s += batch) chunks.emplace_back(s, std::min(end, s + batch));
  const std::function<void(std::size_t)> run = [&](std::size_t worker) {
    for (std::size_t ci = worker; ci < chunks.size(); ci += threads) {
      std::vector<std::size_t> idx(chunks[ci].second - chunks[ci].first);
      std::iota(idx.begin(), idx.end(), chunks[ci].first);
      const Tensor logits = model.logits(ds.batch(idx));
      for (std::size_t i = 0; i < idx.size(); ++i) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < logits.dim(1); ++k)
          if (logits(i, k) > logits(i, best)) best = k;
        correct[idx[i] - begin] = static_cast<int>(best) == ds.labels[idx[i]];
      }
    }
  };
  threads = std::max<std::size_t>(1, threads);
  if (threads == 1) {
    run(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < threads; ++w) pool.emplace_back(run, w);
    for (auto& t : pool) t.join();
  }
  const auto hits = std::count(correct.begin(), correct.end(), 1);
  return static_cast<double>(hits) / static_cast<double>(end - begin);
}

struct TrainResult {
  ToyTransformer model;
  std::vector<LambdaTraceRow> lambda_trace;
  std::vector<double> losses;  // per step
  double final_loss = 0;
  double train_accuracy = 0;
  double test_accuracy = 0;
  bool diverged = false;
  std::size_t steps_done = 0;
  json last_good_checkpoint;
};

/// Trains on ds[0, train_count) and evaluates on the rest. Single-threaded
/// and deterministic for a fixed seed. A non-finite loss stops training and
/// restores the weights of the last completed epoch.
inline TrainResult train_toy(const ModelConfig& cfg, const Dataset& ds, const TrainConfig& tc) {
  if (ds.tokens() != cfg.tokens() || ds.patch_dim() != cfg.patch_dim ||
      ds.classes != cfg.classes) {
    throw ConfigError("train_toy: dataset does not match model configuration");
  }
  if (ds.train_count == 0 || tc.batch_size == 0) throw ConfigError("train_toy: empty training set");
  ToyTransformer model(cfg, init_weights(cfg, tc.seed));
  std::mt19937_64 rng(tc.seed ^ 0x9e3779b97f4a7c15ULL);
  AdamW opt(tc);
  TrainResult res{model, {}, {}, 0, 0, 0, false, 0, checkpoint_to_json(model, tc.seed, 0)};
  append_lambda_trace(res.lambda_trace, 0, model);

  std::vector<std::size_t> order(ds.train_count);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;
  for (std::size_t step = 0; step < tc.steps; ++step) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < tc.batch_size; ++i) {
      idx.push_back(order[cursor++]);
      if (cursor == order.size()) {
        // Epoch boundary.
        cursor = 0;
        std::shuffle(order.begin(), order.end(), rng);
      }
    }
    GradTape tape;
    ParamBinder bind(tape, true);
    const auto labels = ds.batch_labels(idx);
    double loss_value = NAN;
    std::optional<Var> loss;
    try {
      loss = ops::cross_entropy(tape, model.forward(bind, ds.batch(idx)), labels);
      loss_value = tape.value(*loss)[0];
    } catch (const NonFiniteError&) {
      // A normalizer saw non-finite activations: same as a NaN loss.
    }
    auto params = model.weights().parameters();
    if (std::isfinite(loss_value)) {
      tape.backward(*loss);
      std::vector<Tensor> grads;
      grads.reserve(params.size());
      for (const auto& p : params) {
        const auto v = bind.find(*p.value);
        grads.push_back(v ? tape.grad(*v) : Tensor(p.value->shape()));
      }
      opt.step(params, grads, cosine_lr(tc, step));
    }
    const bool finite_weights = std::all_of(params.begin(), params.end(), [](const NamedParam& p) {
      return std::all_of(p.value->storage().begin(), p.value->storage().end(),
                         [](double v) { return std::isfinite(v); });
    });
    if (!std::isfinite(loss_value) || !finite_weights) {
      res.diverged = true;
      model = checkpoint_from_json(res.last_good_checkpoint).model;
      break;
    }
    res.losses.push_back(loss_value);
    res.steps_done = step + 1;

    const bool epoch_end = (step + 1) * tc.batch_size / ds.train_count >
                           step * tc.batch_size / ds.train_count;
    if (epoch_end || step + 1 == tc.steps) {
      append_lambda_trace(res.lambda_trace, step + 1, model);
      res.last_good_checkpoint = checkpoint_to_json(model, tc.seed, step + 1);
    }
  }
  res.final_loss = res.losses.empty() ? 0.0 : res.losses.back();
  res.train_accuracy = evaluate_accuracy(model, ds, 0, ds.train_count, tc.eval_threads);
  res.test_accuracy = evaluate_accuracy(model, ds, ds.train_count, ds.size(), tc.eval_threads);
  res.model = std::move(model);
  return res;
}

}  // namespace dtn
