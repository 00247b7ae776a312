#pragma once

#include <array>
#include <concepts>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "dtn/tensor.hpp"

namespace dtn {

/// Token-grid layout: rows x cols patches, H heads, s x s pooling for the
/// inter-token statistics.
struct GridGeometry {
  std::size_t rows = 1;
  std::size_t cols = 1;
  std::size_t heads = 1;
  std::size_t pool = 1;

  std::size_t tokens() const noexcept { return rows * cols; }
  std::size_t pooled_rows() const noexcept { return rows / pool; }
  std::size_t pooled_cols() const noexcept { return cols / pool; }
  std::size_t pooled_tokens() const noexcept { return pooled_rows() * pooled_cols(); }

  /// Throws ConfigError on an invalid layout. With `inter_token`, the pooled
  /// grid must hold at least two tokens.
  void validate(bool inter_token = true) const {
    if (rows == 0 || cols == 0) throw ConfigError("grid rows and cols must be positive");
    if (heads == 0) throw ConfigError("head count must be positive");
    if (pool == 0) throw ConfigError("pooling factor must be >= 1");
    if (rows % pool != 0 || cols % pool != 0) {
      throw ConfigError("pooling factor " + std::to_string(pool) + " does not divide grid " +
                        std::to_string(rows) + "x" + std::to_string(cols));
    }
    if (inter_token && pooled_tokens() < 2) {
      throw ConfigError("pooled grid has " + std::to_string(pooled_tokens()) +
                        " token(s); inter-token statistics need at least 2");
    }
  }

  friend bool operator==(const GridGeometry&, const GridGeometry&) = default;
};

/// Constant T' x T' x 3 tensor with R_ij = [dx^2 + dy^2, dx, dy], where
/// (dx, dy) is the signed column/row shift from token i to token j on the
/// pooled grid.
class RelPosEmbedding {
 public:
  RelPosEmbedding() = default;
  RelPosEmbedding(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols) {
    const std::size_t n = rows * cols;
    values_.resize(n * n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double dx = static_cast<double>(j % cols) - static_cast<double>(i % cols);
        const double dy = static_cast<double>(j / cols) - static_cast<double>(i / cols);
        values_[i * n + j] = {dx * dx + dy * dy, dx, dy};
      }
  }

  std::size_t tokens() const noexcept { return rows_ * cols_; }
  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  const std::array<double, 3>& at(std::size_t i, std::size_t j) const {
    return values_[i * tokens() + j];
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::array<double, 3>> values_;
};

/// Relative embedding on the pooled grid of `g`.
inline RelPosEmbedding build_rel_pos(const GridGeometry& g) {
  g.validate(false);
  return RelPosEmbedding(g.pooled_rows(), g.pooled_cols());
}

/// Attention centre of one head: horizontal and vertical patch offset.
struct Offset {
  int dx = 0;
  int dy = 0;
  friend bool operator==(const Offset&, const Offset&) = default;
};

/// Offsets of a centred ceil(sqrt(H)) x ceil(sqrt(H)) window, row-major with
/// dx varying fastest, truncated to the first H.
inline std::vector<Offset> init_offsets(std::size_t heads) {
  if (heads == 0) throw ConfigError("init_offsets: head count must be positive");
  int side = 1;
  while (static_cast<std::size_t>(side) * static_cast<std::size_t>(side) < heads) ++side;
  const int lo = -((side - 1) / 2);
  std::vector<Offset> out;
  out.reserve(heads);
  for (int dy = lo; dy < lo + side && out.size() < heads; ++dy)
    for (int dx = lo; dx < lo + side && out.size() < heads; ++dx) out.push_back({dx, dy});
  return out;
}

/// Result of non-overlapping s x s average pooling over the token grid.
template <std::floating_point Real>
struct PooledTokens {
  BasicTensor<Real> tokens;        // (B, T', C)
  std::vector<std::size_t> owner;  // original token t -> pooled token
  std::size_t window = 1;          // s*s original tokens per pooled token

  std::vector<std::size_t> covered(std::size_t pooled) const {
    std::vector<std::size_t> out;
    for (std::size_t t = 0; t < owner.size(); ++t)
      if (owner[t] == pooled) out.push_back(t);
    return out;
  }
};

/// Maps each original token (row-major) to its pooled token.
inline std::vector<std::size_t> pooling_owner_map(const GridGeometry& g) {
  std::vector<std::size_t> owner(g.tokens());
  for (std::size_t r = 0; r < g.rows; ++r)
    for (std::size_t c = 0; c < g.cols; ++c)
      owner[r * g.cols + c] = (r / g.pool) * g.pooled_cols() + c / g.pool;
  return owner;
}

template <std::floating_point Real>
PooledTokens<Real> pool_tokens(const BasicTensor<Real>& x, const GridGeometry& g) {
  g.validate(false);
  const auto d = token_dims(x);
  if (d.tokens != g.tokens()) {
    throw DimensionError("pool_tokens: tensor has " + std::to_string(d.tokens) +
                         " tokens but grid has " + std::to_string(g.tokens()));
  }
  PooledTokens<Real> out;
  out.owner = pooling_owner_map(g);
  out.window = g.pool * g.pool;
  if (g.pool == 1) {
    out.tokens = x;
    return out;
  }
  out.tokens = BasicTensor<Real>({d.batch, g.pooled_tokens(), d.channels});
  for (std::size_t b = 0; b < d.batch; ++b)
    for (std::size_t t = 0; t < d.tokens; ++t)
      for (std::size_t c = 0; c < d.channels; ++c) out.tokens(b, out.owner[t], c) += x(b, t, c);
  const auto window = static_cast<Real>(out.window);
  for (auto& v : out.tokens.storage()) v /= window;
  return out;
}

}  // namespace dtn
