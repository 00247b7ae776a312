#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "dtn/tensor.hpp"

namespace dtn {

struct TaskOptions {
  std::size_t rows = 6;
  std::size_t cols = 6;
  std::size_t patch_side = 4;  // each patch is patch_side x patch_side pixels
  std::size_t samples = 2000;
  double noise = 0.5;
  double train_fraction = 0.8;
  // local-texture only: per-patch stripe amplitude range and brightness spread.
  double min_contrast = 0.5;
  double max_contrast = 2.0;
  double brightness = 1.0;
};

/// Synthetic classification data over a grid of patches.
struct Dataset {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t patch_side = 0;
  std::size_t classes = 2;
  std::size_t train_count = 0;  // samples [0, train_count) train, the rest are held out
  Tensor inputs;                // (N, rows*cols, patch_side^2)
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t tokens() const { return rows * cols; }
  std::size_t patch_dim() const { return patch_side * patch_side; }

  /// Rows `indices` gathered into a (B, T, P) batch.
  Tensor batch(std::span<const std::size_t> indices) const {
    const std::size_t stride = tokens() * patch_dim();
    Tensor out({indices.size(), tokens(), patch_dim()});
    for (std::size_t i = 0; i < indices.size(); ++i)
      std::copy_n(&inputs[indices[i] * stride], stride, &out[i * stride]);
    return out;
  }
  std::vector<int> batch_labels(std::span<const std::size_t> indices) const {
    std::vector<int> out;
    for (std::size_t i : indices) out.push_back(labels[i]);
    return out;
  }
};

class UnknownTaskError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline const std::vector<std::string>& task_names() {
  static const std::vector<std::string> names = {"local-texture", "global-shape",
                                                 "constant-label"};
  return names;
}

namespace detail {

enum class Stripe { kHorizontal, kVertical, kChecker };

inline void paint(Dataset& ds, std::size_t sample, std::size_t patch, Stripe s, double amp) {
  const std::size_t side = ds.patch_side;
  const std::size_t base = (sample * ds.tokens() + patch) * ds.patch_dim();
  for (std::size_t r = 0; r < side; ++r)
    for (std::size_t c = 0; c < side; ++c) {
      std::size_t parity = 0;
      switch (s) {
        case Stripe::kHorizontal: parity = r % 2; break;
        case Stripe::kVertical: parity = c % 2; break;
        case Stripe::kChecker: parity = (r + c) % 2; break;
      }
      ds.inputs[base + r * side + c] += parity ? -amp : amp;
    }
}

inline void shift(Dataset& ds, std::size_t sample, std::size_t patch, double offset) {
  const std::size_t base = (sample * ds.tokens() + patch) * ds.patch_dim();
  for (std::size_t k = 0; k < ds.patch_dim(); ++k) ds.inputs[base + k] += offset;
}

/// Half the samples (rounded down) get label 1, in shuffled order.
inline std::vector<int> balanced_labels(std::size_t n, std::mt19937_64& rng) {
  std::vector<int> labels(n, 0);
  for (std::size_t i = 0; i < n / 2; ++i) labels[i] = 1;
  std::shuffle(labels.begin(), labels.end(), rng);
  return labels;
}

}  // namespace detail

/// Designated patch of the local-texture task.
inline std::size_t local_texture_target(const TaskOptions& o) {
  return (o.rows / 2) * o.cols + o.cols / 2;
}

/// Deterministic synthetic dataset.
///
/// local-texture: every patch shows horizontal or vertical stripes at
/// random, with its own contrast and brightness; the label is the
/// orientation inside one designated patch.
/// global-shape: two identical checker markers sit on noise; label 0 when
/// they share a row, 1 when they share a column.
/// constant-label: pure noise, every label 0.
inline Dataset toy_task_generator(const std::string& name, std::uint64_t seed,
                                  const TaskOptions& o = {}) {
  if (std::find(task_names().begin(), task_names().end(), name) == task_names().end()) {
    throw UnknownTaskError("unknown task \"" + name + "\"");
  }
  if (o.rows == 0 || o.cols == 0 || o.patch_side < 2 || o.samples < 2) {
    throw ConfigError("task options: grid, patch side >= 2 and samples >= 2 required");
  }
  if (name == "global-shape" && (o.rows < 2 || o.cols < 2)) {
    throw ConfigError("global-shape needs at least a 2x2 grid");
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Dataset ds;
  ds.name = name;
  ds.rows = o.rows;
  ds.cols = o.cols;
  ds.patch_side = o.patch_side;
  ds.classes = 2;
  ds.train_count = static_cast<std::size_t>(std::floor(o.train_fraction * o.samples));
  ds.inputs = Tensor({o.samples, ds.tokens(), ds.patch_dim()});
  for (auto& v : ds.inputs.storage()) v = o.noise * normal(rng);

  if (name == "constant-label") {
    ds.labels.assign(o.samples, 0);
    return ds;
  }
  ds.labels = detail::balanced_labels(o.samples, rng);
  if (name == "local-texture") {
    const std::size_t target = local_texture_target(o);
    std::bernoulli_distribution coin(0.5);
    std::uniform_real_distribution<double> contrast(o.min_contrast, o.max_contrast);
    for (std::size_t s = 0; s < o.samples; ++s)
      for (std::size_t p = 0; p < ds.tokens(); ++p) {
        const bool vertical = p == target ? ds.labels[s] == 1 : coin(rng);
        detail::paint(ds, s, p, vertical ? detail::Stripe::kVertical : detail::Stripe::kHorizontal,
                      contrast(rng));
        detail::shift(ds, s, p, o.brightness * normal(rng));
      }
  } else {  // global-shape
    for (std::size_t s = 0; s < o.samples; ++s) {
      std::size_t a = 0, b = 0;
      if (ds.labels[s] == 0) {
        const std::size_t r = std::uniform_int_distribution<std::size_t>(0, o.rows - 1)(rng);
        const std::size_t c0 = std::uniform_int_distribution<std::size_t>(0, o.cols - 1)(rng);
        std::size_t c1 = std::uniform_int_distribution<std::size_t>(0, o.cols - 2)(rng);
        if (c1 >= c0) ++c1;
        a = r * o.cols + c0;
        b = r * o.cols + c1;
      } else {
        const std::size_t c = std::uniform_int_distribution<std::size_t>(0, o.cols - 1)(rng);
        const std::size_t r0 = std::uniform_int_distribution<std::size_t>(0, o.rows - 1)(rng);
        std::size_t r1 = std::uniform_int_distribution<std::size_t>(0, o.rows - 2)(rng);
        if (r1 >= r0) ++r1;
        a = r0 * o.cols + c;
        b = r1 * o.cols + c;
      }
      detail::paint(ds, s, a, detail::Stripe::kChecker, 1.0);
      detail::paint(ds, s, b, detail::Stripe::kChecker, 1.0);
    }
  }
  return ds;
}

/// Held-out accuracy of a logistic regression that sees only one patch
/// (binary tasks). Features are the patch pixels and their squares.
inline double single_patch_probe_accuracy(const Dataset& ds, std::size_t patch,
                                          std::size_t iterations = 300, double lr = 0.5) {
  if (patch >= ds.tokens()) throw DimensionError("probe: patch index out of range");
  const std::size_t pd = ds.patch_dim();
  const std::size_t f = 2 * pd + 1;
  auto features = [&](std::size_t s) {
    std::vector<double> v(f);
    const std::size_t base = (s * ds.tokens() + patch) * pd;
    for (std::size_t k = 0; k < pd; ++k) {
      v[k] = ds.inputs[base + k];
      v[pd + k] = v[k] * v[k];
    }
    v[2 * pd] = 1.0;
    return v;
  };
  std::vector<std::vector<double>> feats(ds.size());
  for (std::size_t s = 0; s < ds.size(); ++s) feats[s] = features(s);
  std::vector<double> w(f, 0.0);
  const std::size_t n_train = ds.train_count;
  for (std::size_t it = 0; it < iterations; ++it) {
    std::vector<double> grad(f, 0.0);
    for (std::size_t s = 0; s < n_train; ++s) {
      double z = 0;
      for (std::size_t k = 0; k < f; ++k) z += w[k] * feats[s][k];
      const double p = 1.0 / (1.0 + std::exp(-z));
      const double err = p - (ds.labels[s] == 1 ? 1.0 : 0.0);
      for (std::size_t k = 0; k < f; ++k) grad[k] += err * feats[s][k];
    }
    for (std::size_t k = 0; k < f; ++k) w[k] -= lr * grad[k] / static_cast<double>(n_train);
  }
  std::size_t correct = 0;
  for (std::size_t s = n_train; s < ds.size(); ++s) {
    double z = 0;
    for (std::size_t k = 0; k < f; ++k) z += w[k] * feats[s][k];
    correct += ((z > 0) == (ds.labels[s] == 1)) ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size() - n_train);
}

}  // namespace dtn
