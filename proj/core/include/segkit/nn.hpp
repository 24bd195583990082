#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "segkit/ops.hpp"

namespace segkit {

using Rng = std::mt19937_64;

struct Init {
  enum class Kind { Zeros, Ones, Constant, TruncNormal, Uniform };
  Kind kind = Kind::Zeros;
  double scale = 0.0;

  static Init zeros() { return {Kind::Zeros, 0.0}; }
  static Init ones() { return {Kind::Ones, 0.0}; }
  static Init constant(double v) { return {Kind::Constant, v}; }
  /// Normal truncated at two standard deviations.
  static Init trunc_normal(double std) { return {Kind::TruncNormal, std}; }
  static Init uniform(double bound) { return {Kind::Uniform, bound}; }
  /// He-style init for a layer with the given fan-in.
  static Init kaiming(std::int64_t fan_in);
};

Tensor make_tensor(const Shape& shape, const Init& init, Rng& rng);

struct Parameter {
  std::string name;
  Shape shape;
  Var var;          // undefined when the set only records shapes
  bool decay = true;  // receives decoupled weight decay
};

/// Named, ordered trainable parameters. Registration order and seed fix the
/// initial values. A shape-only set records names and shapes without
/// allocating, which lets presets report parameter counts cheaply.
class ParameterSet {
 public:
  explicit ParameterSet(std::uint64_t seed = 0, bool materialize = true);

  Var add(const std::string& name, const Shape& shape, const Init& init, bool decay = true);

  const std::vector<Parameter>& items() const { return params_; }
  std::vector<Parameter>& items() { return params_; }
  const Parameter* find(const std::string& name) const;
  Parameter* find(const std::string& name);
  bool materialized() const { return materialize_; }

  std::int64_t count() const;
  void zero_grad();
  /// Detaches every parameter from gradient tracking (frozen models).
  void freeze();

 private:
  std::vector<Parameter> params_;
  Rng rng_;
  bool materialize_;
};

struct Linear {
  Var weight;  // [in, out]
  Var bias;    // [out] or undefined
  Var operator()(const Var& x) const { return ops::linear(x, weight, bias); }
};

struct LayerNorm {
  Var gamma, beta;
  double eps = 1e-6;
  Var operator()(const Var& x) const { return ops::layer_norm(x, gamma, beta, eps); }
};

struct Conv2d {
  Var weight;  // [k*k*in, out]
  Var bias;
  int kernel = 3, stride = 1, pad = 1;
  Var operator()(const Var& x) const { return ops::conv2d(x, weight, bias, kernel, stride, pad); }
};

Linear make_linear(ParameterSet& ps, const std::string& name, std::int64_t in, std::int64_t out,
                   const Init& init, bool bias = true);
LayerNorm make_layer_norm(ParameterSet& ps, const std::string& name, std::int64_t dim, double eps = 1e-6);
Conv2d make_conv(ParameterSet& ps, const std::string& name, std::int64_t in, std::int64_t out, int kernel,
                 int stride, int pad, bool bias = true);

}  // namespace segkit
