#include "segkit/optim.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace segkit {

void adamw_update(std::span<double> theta, std::span<const double> grad, std::span<double> m, std::span<double> v,
                  std::int64_t t, const AdamWConfig& config, double lr, bool apply_decay) {
  const double b1 = config.beta1, b2 = config.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
  const double wd = apply_decay ? config.weight_decay : 0.0;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double g = grad[i];
    m[i] = b1 * m[i] + (1.0 - b1) * g;
    v[i] = b2 * v[i] + (1.0 - b2) * g * g;
    const double mhat = m[i] / c1;
    const double vhat = v[i] / c2;
    theta[i] -= lr * (mhat / (std::sqrt(vhat) + config.eps) + wd * theta[i]);
  }
}

AdamW::AdamW(ParameterSet& params, AdamWConfig config) : params_(&params), config_(config) {
  if (!(config_.lr > 0)) throw std::invalid_argument("AdamW: lr must be positive");
  if (config_.beta1 < 0 || config_.beta1 >= 1 || config_.beta2 < 0 || config_.beta2 >= 1) {
    throw std::invalid_argument("AdamW: betas must lie in [0, 1)");
  }
  for (const auto& p : params_->items()) {
    state_.first_moment.emplace_back(p.shape);
    state_.second_moment.emplace_back(p.shape);
  }
}

void AdamW::step(double lr) {
  auto& items = params_->items();
  if (items.size() != state_.first_moment.size()) throw std::logic_error("AdamW: parameter set changed size");
  for (const auto& p : items) {
    const auto& g = p.var.grad();
    if (g.size() != p.var.value().size()) continue;
    for (double x : g.values()) {
      if (!std::isfinite(x)) throw std::runtime_error("AdamW: non-finite gradient in " + p.name);
    }
  }
  ++state_.step;
  for (std::size_t i = 0; i < items.size(); ++i) {
    auto& p = items[i];
    if (!p.var.requires_grad()) continue;
    const auto& g = p.var.grad();
    if (g.size() != p.var.value().size()) continue;
    adamw_update(p.var.mutable_value().values(), g.values(), state_.first_moment[i].values(),
                 state_.second_moment[i].values(), state_.step, config_, lr, p.decay);
  }
}

double LrSchedule::at(std::int64_t t) const {
  if (total <= warmup) throw std::invalid_argument("LrSchedule: total iterations must exceed warmup");
  if (t < warmup) return base * static_cast<double>(std::max<std::int64_t>(t, 1)) / static_cast<double>(warmup);
  const double progress = static_cast<double>(t - warmup) / static_cast<double>(total - warmup);
  return base * std::pow(std::max(0.0, 1.0 - progress), power);
}

}  // namespace segkit
