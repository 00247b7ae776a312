#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dtn/geometry.hpp"
#include "dtn/norm.hpp"
#include "dtn/serialize.hpp"
#include "dtn/tensor.hpp"
#include "dtn/train.hpp"

namespace dtn {

inline constexpr double kRowSumTolerance = 1e-4;
inline constexpr double kVariationEps = 1e-8;

/// Euclidean distance between tokens i and j of a row-major grid.
inline double grid_distance(std::size_t i, std::size_t j, std::size_t cols) {
  const double dx = static_cast<double>(j % cols) - static_cast<double>(i % cols);
  const double dy = static_cast<double>(j / cols) - static_cast<double>(i / cols);
  return std::sqrt(dx * dx + dy * dy);
}

/// d = (1/T) sum_i sum_j A_ij * dist(i, j), in patch units.
inline double mean_attention_distance(const Tensor& a, const GridGeometry& g) {
  const std::size_t n = g.tokens();
  if (a.rank() != 2 || a.dim(0) != n || a.dim(1) != n) {
    throw DimensionError("mean_attention_distance: attention " + shape_string(a.shape()) +
                         " does not match a " + std::to_string(g.rows) + "x" +
                         std::to_string(g.cols) + " grid");
  }
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double row_sum = 0, di = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (a(i, j) < 0) throw DimensionError("mean_attention_distance: negative attention weight");
      row_sum += a(i, j);
      di += a(i, j) * grid_distance(i, j, g.cols);
    }
    if (std::abs(row_sum - 1.0) > kRowSumTolerance) {
      throw DimensionError("mean_attention_distance: row " + std::to_string(i) + " sums to " +
                           std::to_string(row_sum));
    }
    total += di;
  }
  return total / static_cast<double>(n);
}

/// Patch-token block of an attention matrix that also holds trailing
/// tokens (the class token), with each row renormalized.
inline Tensor patch_attention(const Tensor& a, std::size_t patch_tokens) {
  if (a.rank() != 2 || a.dim(0) < patch_tokens || a.dim(1) != a.dim(0)) {
    throw DimensionError("patch_attention: matrix too small");
  }
  Tensor out({patch_tokens, patch_tokens});
  for (std::size_t i = 0; i < patch_tokens; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < patch_tokens; ++j) s += a(i, j);
    for (std::size_t j = 0; j < patch_tokens; ++j) out(i, j) = a(i, j) / s;
  }
  return out;
}

/// Per-head mean attention distance of a (B,H,N,N) record, averaged over
/// the batch. Tokens beyond the grid (class token) are dropped first.
inline std::vector<double> mean_attention_distance_per_head(const Tensor& weights,
                                                            const GridGeometry& g) {
  if (weights.rank() != 4) throw DimensionError("attention record must be (B,H,N,N)");
  const std::size_t b_n = weights.dim(0), h_n = weights.dim(1), n = weights.dim(2);
  std::vector<double> out(h_n, 0.0);
  for (std::size_t b = 0; b < b_n; ++b)
    for (std::size_t h = 0; h < h_n; ++h) {
      Tensor a({n, n});
      std::copy_n(&weights[((b * h_n + h) * n) * n], n * n, &a[0]);
      out[h] += mean_attention_distance(n == g.tokens() ? a : patch_attention(a, g.tokens()), g);
    }
  for (double& v : out) v /= static_cast<double>(b_n);
  return out;
}

/// Mean over all elements of |x - mu| / max(|x|, eps).
inline double variation_coefficient(const Tensor& x, const NormStats& s) {
  if (!s.mean.same_shape(x)) throw DimensionError("variation_coefficient: shape mismatch");
  double total = 0;
  for (std::size_t i = 0; i < x.size(); ++i)
    total += std::abs(x[i] - s.mean[i]) / std::max(std::abs(x[i]), kVariationEps);
  return total / static_cast<double>(x.size());
}

/// Deterministic (1, rows*cols, C) input: left half of the grid sits at +10,
/// right half at -10, each token with its own wobble amplitude.
inline Tensor two_domain_tokens(std::size_t rows, std::size_t cols, std::size_t channels) {
  Tensor x({1, rows * cols, channels});
  for (std::size_t t = 0; t < rows * cols; ++t) {
    const double offset = (t % cols) < cols / 2 ? 10.0 : -10.0;
    const double amp = 1.0 + 0.25 * static_cast<double>(t % 7);
    for (std::size_t c = 0; c < channels; ++c)
      x(0, t, c) = offset + amp * std::sin(1.3 * static_cast<double>(c) + 0.7 * static_cast<double>(t));
  }
  return x;
}

/// L2 norm of each token's head slice, shape (B, H, T).
inline Tensor token_magnitude(const Tensor& x, std::size_t heads) {
  const auto d = token_dims(x);
  const std::size_t w = head_width(d.channels, heads);
  Tensor out({d.batch, heads, d.tokens});
  for (std::size_t b = 0; b < d.batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < d.tokens; ++t) {
        double ss = 0;
        for (std::size_t c = h * w; c < (h + 1) * w; ++c) ss += x(b, t, c) * x(b, t, c);
        out[(b * heads + h) * d.tokens + t] = std::sqrt(ss);
      }
  return out;
}

/// L2 norm of each full token embedding, shape (B, T).
inline Tensor token_norms(const Tensor& x) {
  const auto d = token_dims(x);
  Tensor out({d.batch, d.tokens});
  for (std::size_t b = 0; b < d.batch; ++b)
    for (std::size_t t = 0; t < d.tokens; ++t) {
      double ss = 0;
      for (std::size_t c = 0; c < d.channels; ++c) ss += x(b, t, c) * x(b, t, c);
      out(b, t) = std::sqrt(ss);
    }
  return out;
}

// ---------------------------------------------------------------------------
// Lambda traces

inline std::string lambda_trace_csv(const std::vector<LambdaTraceRow>& rows) {
  std::ostringstream out;
  out << "step,layer,head,lambda_mean,lambda_var\n";
  for (const auto& r : rows) {
    out << r.step << ',' << r.layer << ',' << r.head << ',' << real_to_string(r.lambda_mean) << ','
        << real_to_string(r.lambda_var) << '\n';
  }
  return out.str();
}

inline std::vector<LambdaTraceRow> parse_lambda_trace_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  std::vector<LambdaTraceRow> rows;
  auto fail = [&](const std::string& why) {
    throw ParseError("lambda trace line " + std::to_string(line_no) + ": " + why);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line_no == 1) {
      if (line != "step,layer,head,lambda_mean,lambda_var") fail("unexpected header \"" + line + "\"");
      continue;
    }
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() != 5) fail("expected 5 columns, got " + std::to_string(cells.size()));
    LambdaTraceRow r;
    auto integer = [&](const std::string& s) {
      std::size_t v = 0;
      auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      if (ec != std::errc{} || end != s.data() + s.size()) fail("bad integer \"" + s + "\"");
      return v;
    };
    r.step = integer(cells[0]);
    r.layer = integer(cells[1]);
    r.head = integer(cells[2]);
    try {
      r.lambda_mean = real_from_string(cells[3]);
      r.lambda_var = real_from_string(cells[4]);
    } catch (const ParseError& e) {
      fail(e.what());
    }
    rows.push_back(r);
  }
  if (line_no == 0) throw ParseError("lambda trace line 1: empty input");
  return rows;
}

struct LambdaSummary {
  std::size_t layer = 0;
  std::size_t head = 0;
  double final_mean = 0;
  double final_var = 0;
  double max_delta_mean = 0;  // largest change between consecutive records
  double max_delta_var = 0;
  bool prefers_inter_token = false;  // a final lambda below 0.5
  friend bool operator==(const LambdaSummary&, const LambdaSummary&) = default;
};

/// Per (layer, head), ordered by layer then head.
inline std::vector<LambdaSummary> summarize_lambda(const std::vector<LambdaTraceRow>& trace) {
  std::map<std::pair<std::size_t, std::size_t>, std::vector<LambdaTraceRow>> groups;
  for (const auto& r : trace) groups[{r.layer, r.head}].push_back(r);
  std::vector<LambdaSummary> out;
  for (auto& [key, rows] : groups) {
    std::stable_sort(rows.begin(), rows.end(),
                     [](const auto& a, const auto& b) { return a.step < b.step; });
    LambdaSummary s;
    s.layer = key.first;
    s.head = key.second;
    s.final_mean = rows.back().lambda_mean;
    s.final_var = rows.back().lambda_var;
    for (std::size_t i = 1; i < rows.size(); ++i) {
      s.max_delta_mean =
          std::max(s.max_delta_mean, std::abs(rows[i].lambda_mean - rows[i - 1].lambda_mean));
      s.max_delta_var =
          std::max(s.max_delta_var, std::abs(rows[i].lambda_var - rows[i - 1].lambda_var));
    }
    s.prefers_inter_token = s.final_mean < 0.5 || s.final_var < 0.5;
    out.push_back(s);
  }
  return out;
}

/// Largest |lambda - 0.5| over the last record of every head.
inline double max_lambda_departure(const std::vector<LambdaTraceRow>& trace) {
  double best = 0;
  for (const auto& s : summarize_lambda(trace))
    best = std::max({best, std::abs(s.final_mean - 0.5), std::abs(s.final_var - 0.5)});
  return best;
}

inline std::string lambda_summary_csv(const std::vector<LambdaSummary>& rows) {
  std::ostringstream out;
  out << "layer,head,final_lambda_mean,final_lambda_var,max_delta_mean,max_delta_var,"
         "prefers_inter_token\n";
  for (const auto& s : rows) {
    out << s.layer << ',' << s.head << ',' << real_to_string(s.final_mean) << ','
        << real_to_string(s.final_var) << ',' << real_to_string(s.max_delta_mean) << ','
        << real_to_string(s.max_delta_var) << ',' << (s.prefers_inter_token ? 1 : 0) << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Heatmaps

struct Heatmap {
  std::string pgm;      // binary P5 image
  std::string sidecar;  // min/max used for the normalization
};

/// 8-bit PGM of a rows x cols map, min-max normalized per map.
inline Heatmap make_heatmap(std::span<const double> values, std::size_t rows, std::size_t cols,
                            const std::string& title) {
  if (values.size() != rows * cols) throw DimensionError("make_heatmap: size mismatch");
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = *lo_it, hi = *hi_it;
  Heatmap h;
  h.pgm = "P5\n" + std::to_string(cols) + " " + std::to_string(rows) + "\n255\n";
  for (double v : values) {
    const double u = hi > lo ? (v - lo) / (hi - lo) : 0.0;
    h.pgm.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * u))));
  }
  h.sidecar = title + "\nnormalization: per-map min-max to [0,255]\nmin " + real_to_string(lo) +
              "\nmax " + real_to_string(hi) + "\n";
  return h;
}

inline void write_heatmap(const std::string& stem, const Heatmap& h) {
  std::ofstream pgm(stem + ".pgm", std::ios::binary);
  if (!pgm) throw std::runtime_error("cannot write " + stem + ".pgm");
  pgm << h.pgm;
  write_text_file(stem + ".txt", h.sidecar);
}

}  // namespace dtn
