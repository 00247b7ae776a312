#pragma once

#include <charconv>
#include <cstdint>
#include <cmath>
#include <fstream>
#include <initializer_list>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <system_error>
#include <vector>

#include <json.hpp>

#include "dtn/dynamic_token_norm.hpp"
#include "dtn/geometry.hpp"
#include "dtn/tensor.hpp"

namespace dtn {

using json = nlohmann::json;

/// Malformed file content: bad syntax, unknown or missing keys, bad reals.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shortest decimal string that parses back to exactly `v`.
inline std::string real_to_string(double v) {
  if (!std::isfinite(v)) throw NonFiniteError("cannot serialize non-finite real");
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc{}) throw std::runtime_error("real_to_string: conversion failed");
  return std::string(buf, end);
}

inline double real_from_string(const std::string& s) {
  double v = 0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || end != s.data() + s.size() || !std::isfinite(v)) {
    throw ParseError("invalid real \"" + s + "\"");
  }
  return v;
}

inline json reals_to_json(const std::vector<double>& v) {
  json arr = json::array();
  for (double x : v) arr.push_back(real_to_string(x));
  return arr;
}

inline std::vector<double> reals_from_json(const json& j, const std::string& key) {
  if (!j.is_array()) throw ParseError("\"" + key + "\" must be an array of real strings");
  std::vector<double> out;
  out.reserve(j.size());
  for (const auto& e : j) {
    if (!e.is_string()) throw ParseError("\"" + key + "\" entries must be decimal strings");
    out.push_back(real_from_string(e.get<std::string>()));
  }
  return out;
}

inline void reject_unknown_keys(const json& j, std::initializer_list<const char*> allowed,
                                const std::string& where) {
  if (!j.is_object()) throw ParseError(where + ": expected an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!ok.count(it.key())) throw ParseError(where + ": unknown key \"" + it.key() + "\"");
  }
}

inline const json& require_key(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw ParseError(where + ": missing key \"" + std::string(key) + "\"");
  return j.at(key);
}

inline std::size_t size_from_json(const json& j, const char* key, const std::string& where) {
  const json& v = require_key(j, key, where);
  if (!v.is_number_unsigned()) {
    throw ParseError(where + ": \"" + std::string(key) + "\" must be a non-negative integer");
  }
  return v.get<std::size_t>();
}

inline json tensor_to_json(const Tensor& t) {
  return json{{"shape", t.shape()}, {"data", reals_to_json(t.storage())}};
}

inline Tensor tensor_from_json(const json& j, const std::string& where) {
  reject_unknown_keys(j, {"shape", "data"}, where);
  const json& shape = require_key(j, "shape", where);
  if (!shape.is_array()) throw ParseError(where + ": shape must be an array");
  std::vector<std::size_t> dims;
  for (const auto& d : shape) {
    if (!d.is_number_unsigned()) throw ParseError(where + ": shape entries must be integers");
    dims.push_back(d.get<std::size_t>());
  }
  auto data = reals_from_json(require_key(j, "data", where), where + ".data");
  if (data.size() != Tensor::element_count(dims)) {
    throw ParseError(where + ": data length does not match shape");
  }
  return Tensor(std::move(dims), std::move(data));
}

/// One serialized DTN layer: its learnables plus the grid it runs on.
struct DtnLayerFile {
  GridGeometry geometry;
  DtnParams params;
  std::optional<std::uint64_t> seed;
};

inline json to_json(const DtnLayerFile& f) {
  const auto& p = f.params;
  std::vector<double> a_flat;
  for (const auto& row : p.a) a_flat.insert(a_flat.end(), row.begin(), row.end());
  json j = {
      {"rows", f.geometry.rows},
      {"cols", f.geometry.cols},
      {"H", f.geometry.heads},
      {"pool_s", f.geometry.pool},
      {"omega_mean", reals_to_json(p.omega_mean)},
      {"omega_var", reals_to_json(p.omega_var)},
      {"a", reals_to_json(a_flat)},
      {"gamma", reals_to_json(p.affine.gamma)},
      {"beta", reals_to_json(p.affine.beta)},
  };
  if (f.seed) j["seed"] = *f.seed;
  return j;
}

inline DtnLayerFile dtn_layer_from_json(const json& j) {
  const std::string where = "dtn layer";
  reject_unknown_keys(j, {"rows", "cols", "H", "pool_s", "omega_mean", "omega_var", "a", "gamma",
                          "beta", "seed"},
                      where);
  DtnLayerFile f;
  f.geometry.rows = size_from_json(j, "rows", where);
  f.geometry.cols = size_from_json(j, "cols", where);
  f.geometry.heads = size_from_json(j, "H", where);
  f.geometry.pool = size_from_json(j, "pool_s", where);
  f.params.omega_mean = reals_from_json(require_key(j, "omega_mean", where), "omega_mean");
  f.params.omega_var = reals_from_json(require_key(j, "omega_var", where), "omega_var");
  const auto a_flat = reals_from_json(require_key(j, "a", where), "a");
  if (a_flat.size() != 3 * f.geometry.heads) {
    throw ParseError(where + ": \"a\" must hold H*3 reals, got " + std::to_string(a_flat.size()));
  }
  for (std::size_t h = 0; h < f.geometry.heads; ++h)
    f.params.a.push_back({a_flat[3 * h], a_flat[3 * h + 1], a_flat[3 * h + 2]});
  f.params.affine.gamma = reals_from_json(require_key(j, "gamma", where), "gamma");
  f.params.affine.beta = reals_from_json(require_key(j, "beta", where), "beta");
  if (j.contains("seed")) f.seed = size_from_json(j, "seed", where);
  try {
    f.geometry.validate(false);
    f.params.validate();
  } catch (const std::invalid_argument& e) {
    throw ParseError(where + ": " + e.what());
  }
  if (f.params.heads() != f.geometry.heads) {
    throw ParseError(where + ": omega arrays have " + std::to_string(f.params.heads()) +
                     " heads but H = " + std::to_string(f.geometry.heads));
  }
  return f;
}

inline json parse_json_text(const std::string& text, const std::string& where) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(where + ": " + e.what());
  }
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
}

}  // namespace dtn
