#include "segkit/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace segkit {

Init Init::kaiming(std::int64_t fan_in) {
  return trunc_normal(std::sqrt(2.0 / static_cast<double>(std::max<std::int64_t>(fan_in, 1))));
}

Tensor make_tensor(const Shape& shape, const Init& init, Rng& rng) {
  Tensor t(shape);
  switch (init.kind) {
    case Init::Kind::Zeros:
      break;
    case Init::Kind::Ones:
      t.fill(1.0);
      break;
    case Init::Kind::Constant:
      t.fill(init.scale);
      break;
    case Init::Kind::TruncNormal: {
      std::normal_distribution<double> nd(0.0, 1.0);
      for (auto& v : t.values()) {
        double z = nd(rng);
        while (std::abs(z) > 2.0) z = nd(rng);
        v = z * init.scale;
      }
      break;
    }
    case Init::Kind::Uniform: {
      std::uniform_real_distribution<double> ud(-init.scale, init.scale);
      for (auto& v : t.values()) v = ud(rng);
      break;
    }
  }
  return t;
}

ParameterSet::ParameterSet(std::uint64_t seed, bool materialize) : rng_(seed), materialize_(materialize) {}

Var ParameterSet::add(const std::string& name, const Shape& shape, const Init& init, bool decay) {
  if (find(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  Parameter p{name, shape, Var(), decay};
  if (materialize_) p.var = Var(make_tensor(shape, init, rng_), true);
  params_.push_back(std::move(p));
  return params_.back().var;
}

const Parameter* ParameterSet::find(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

Parameter* ParameterSet::find(const std::string& name) {
  for (auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

std::int64_t ParameterSet::count() const {
  std::int64_t n = 0;
  for (const auto& p : params_) n += shape_numel(p.shape);
  return n;
}

void ParameterSet::zero_grad() {
  for (auto& p : params_)
    if (p.var.defined()) p.var.zero_grad();
}

void ParameterSet::freeze() {
  for (auto& p : params_)
    if (p.var.defined()) p.var.node()->requires_grad = false;
}

Linear make_linear(ParameterSet& ps, const std::string& name, std::int64_t in, std::int64_t out, const Init& init,
                   bool bias) {
  Linear l;
  l.weight = ps.add(name + ".weight", {in, out}, init, true);
  if (bias) l.bias = ps.add(name + ".bias", {out}, Init::zeros(), false);
  return l;
}

LayerNorm make_layer_norm(ParameterSet& ps, const std::string& name, std::int64_t dim, double eps) {
  LayerNorm ln;
  ln.gamma = ps.add(name + ".weight", {dim}, Init::ones(), false);
  ln.beta = ps.add(name + ".bias", {dim}, Init::zeros(), false);
  ln.eps = eps;
  return ln;
}

Conv2d make_conv(ParameterSet& ps, const std::string& name, std::int64_t in, std::int64_t out, int kernel, int stride,
                 int pad, bool bias) {
  Conv2d c;
  const auto fan_in = static_cast<std::int64_t>(kernel) * kernel * in;
  c.weight = ps.add(name + ".weight", {fan_in, out}, Init::kaiming(fan_in), true);
  if (bias) c.bias = ps.add(name + ".bias", {out}, Init::zeros(), false);
  c.kernel = kernel;
  c.stride = stride;
  c.pad = pad;
  return c;
}

}  // namespace segkit
