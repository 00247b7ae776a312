#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dtn {

/// Raised when tensor shapes or head counts do not line up.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised for invalid hyper-parameters (eps <= 0, even band width, ...).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a kernel receives NaN/Inf.
class NonFiniteError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Dense row-major array with a dynamic shape. Rank 3 tensors are token
/// tensors laid out as (batch, tokens, channels); rank 2 are matrices.
template <std::floating_point Real>
class BasicTensor {
 public:
  using value_type = Real;

  BasicTensor() = default;

  explicit BasicTensor(std::vector<std::size_t> shape, Real fill = Real{0})
      : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

  BasicTensor(std::vector<std::size_t> shape, std::vector<Real> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != element_count(shape_)) {
      throw DimensionError("tensor data size " + std::to_string(data_.size()) +
                           " does not match shape element count " +
                           std::to_string(element_count(shape_)));
    }
  }

  static BasicTensor scalar(Real v) { return BasicTensor({}, std::vector<Real>{v}); }

  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<Real> data() noexcept { return data_; }
  std::span<const Real> data() const noexcept { return data_; }
  std::vector<Real>& storage() noexcept { return data_; }
  const std::vector<Real>& storage() const noexcept { return data_; }

  Real& operator[](std::size_t i) { return data_[i]; }
  const Real& operator[](std::size_t i) const { return data_[i]; }

  Real& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  const Real& operator()(std::size_t i, std::size_t j) const {
    return data_[i * shape_[1] + j];
  }
  Real& operator()(std::size_t b, std::size_t t, std::size_t c) {
    return data_[(b * shape_[1] + t) * shape_[2] + c];
  }
  const Real& operator()(std::size_t b, std::size_t t, std::size_t c) const {
    return data_[(b * shape_[1] + t) * shape_[2] + c];
  }

  void fill(Real v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const BasicTensor& other) const noexcept { return shape_ == other.shape_; }

  template <std::floating_point Other>
  BasicTensor<Other> cast() const {
    return BasicTensor<Other>(shape_, std::vector<Other>(data_.begin(), data_.end()));
  }

  friend bool operator==(const BasicTensor&, const BasicTensor&) = default;

  static std::size_t element_count(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           std::multiplies<>{});
  }

 private:
  std::vector<std::size_t> shape_;
  std::vector<Real> data_;
};

using Tensor = BasicTensor<double>;
using TensorF = BasicTensor<float>;

inline std::string shape_string(const std::vector<std::size_t>& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

/// (B, T, C) extents of a token tensor.
struct TokenDims {
  std::size_t batch;
  std::size_t tokens;
  std::size_t channels;
};

template <std::floating_point Real>
void require_finite(std::span<const Real> values, const char* what) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NonFiniteError(std::string(what) + ": non-finite value at flat index " +
                           std::to_string(i));
    }
  }
}

/// Validates the token-tensor invariants and returns its extents.
template <std::floating_point Real>
TokenDims token_dims(const BasicTensor<Real>& x) {
  if (x.rank() != 3) {
    throw DimensionError("token tensor must be rank 3 (B,T,C), got shape " +
                         shape_string(x.shape()));
  }
  if (x.dim(0) == 0 || x.dim(1) == 0 || x.dim(2) == 0) {
    throw DimensionError("token tensor extents must be positive, got " +
                         shape_string(x.shape()));
  }
  return {x.dim(0), x.dim(1), x.dim(2)};
}

template <std::floating_point Real>
BasicTensor<Real> make_tokens(std::size_t b, std::size_t t, std::size_t c, Real fill = 0) {
  return BasicTensor<Real>({b, t, c}, fill);
}

/// Non-owning view of the channel slice [h*C/H, (h+1)*C/H) of a token tensor.
template <std::floating_point Real>
class HeadView {
 public:
  HeadView(const BasicTensor<Real>& x, std::size_t head_index, std::size_t head_width)
      : x_(&x), head_(head_index), width_(head_width) {}

  std::size_t head_index() const noexcept { return head_; }
  std::size_t batch() const { return x_->dim(0); }
  std::size_t tokens() const { return x_->dim(1); }
  std::size_t channels() const noexcept { return width_; }
  std::size_t channel_offset() const noexcept { return head_ * width_; }

  const Real& operator()(std::size_t b, std::size_t t, std::size_t c) const {
    return (*x_)(b, t, head_ * width_ + c);
  }

  BasicTensor<Real> materialize() const {
    BasicTensor<Real> out({batch(), tokens(), width_});
    for (std::size_t b = 0; b < batch(); ++b)
      for (std::size_t t = 0; t < tokens(); ++t)
        for (std::size_t c = 0; c < width_; ++c) out(b, t, c) = (*this)(b, t, c);
    return out;
  }

 private:
  const BasicTensor<Real>* x_;
  std::size_t head_;
  std::size_t width_;
};

inline std::size_t head_width(std::size_t channels, std::size_t heads) {
  if (heads == 0 || channels % heads != 0) {
    throw DimensionError("head count " + std::to_string(heads) +
                         " does not divide channel count " + std::to_string(channels));
  }
  return channels / heads;
}

template <std::floating_point Real>
std::vector<HeadView<Real>> split_heads(const BasicTensor<Real>& x, std::size_t heads) {
  const auto dims = token_dims(x);
  const std::size_t width = head_width(dims.channels, heads);
  std::vector<HeadView<Real>> views;
  views.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) views.emplace_back(x, h, width);
  return views;
}

template <std::floating_point Real>
BasicTensor<Real> concat_heads(std::span<const HeadView<Real>> views) {
  if (views.empty()) throw DimensionError("concat_heads: no heads given");
  const std::size_t b_n = views[0].batch();
  const std::size_t t_n = views[0].tokens();
  std::size_t total = 0;
  for (const auto& v : views) {
    if (v.batch() != b_n || v.tokens() != t_n) {
      throw DimensionError("concat_heads: heads disagree on (B,T)");
    }
    total += v.channels();
  }
  BasicTensor<Real> out({b_n, t_n, total});
  std::size_t offset = 0;
  for (const auto& v : views) {
    for (std::size_t b = 0; b < b_n; ++b)
      for (std::size_t t = 0; t < t_n; ++t)
        for (std::size_t c = 0; c < v.channels(); ++c) out(b, t, offset + c) = v(b, t, c);
    offset += v.channels();
  }
  return out;
}

template <std::floating_point Real>
BasicTensor<Real> concat_heads(const std::vector<HeadView<Real>>& views) {
  return concat_heads(std::span<const HeadView<Real>>(views));
}

/// Population mean and biased (divide-by-n) variance.
template <std::floating_point Real>
struct MeanVar {
  Real mean;
  Real var;
};

template <std::floating_point Real>
MeanVar<Real> reduce_stats(std::span<const Real> v) {
  if (v.empty()) throw DimensionError("reduce_stats: empty vector");
  const Real n = static_cast<Real>(v.size());
  Real sum = 0;
  for (Real e : v) sum += e;
  const Real mean = sum / n;
  Real ss = 0;
  for (Real e : v) ss += (e - mean) * (e - mean);
  return {mean, ss / n};
}

template <std::floating_point Real>
MeanVar<Real> reduce_stats(const std::vector<Real>& v) {
  return reduce_stats(std::span<const Real>(v));
}

/// Row-wise softmax of a rank-2 tensor with row-max subtraction.
template <std::floating_point Real>
BasicTensor<Real> softmax_rows(const BasicTensor<Real>& m) {
  if (m.rank() != 2) throw DimensionError("softmax_rows expects a matrix");
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (std::isnan(m[i])) {
      throw NonFiniteError("softmax_rows: NaN at row " + std::to_string(i / m.dim(1)) +
                           ", column " + std::to_string(i % m.dim(1)));
    }
  }
  BasicTensor<Real> out(m.shape());
  const std::size_t rows = m.dim(0), cols = m.dim(1);
  for (std::size_t i = 0; i < rows; ++i) {
    Real mx = m(i, 0);
    for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, m(i, j));
    Real sum = 0;
    for (std::size_t j = 0; j < cols; ++j) {
      out(i, j) = std::exp(m(i, j) - mx);
      sum += out(i, j);
    }
    for (std::size_t j = 0; j < cols; ++j) out(i, j) /= sum;
  }
  return out;
}

template <std::floating_point Real>
Real max_abs_diff(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
  if (!a.same_shape(b)) {
    throw DimensionError("max_abs_diff: shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()) + " differ");
  }
  Real m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace dtn
