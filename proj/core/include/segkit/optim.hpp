#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "segkit/nn.hpp"

namespace segkit {

struct AdamWConfig {
  double lr = 1e-3;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimizerState {
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
  std::int64_t step = 0;
};

/// One decoupled-weight-decay Adam update of a flat parameter block at step
/// `t` (1-based): theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta).
void adamw_update(std::span<double> theta, std::span<const double> grad, std::span<double> m, std::span<double> v,
                  std::int64_t t, const AdamWConfig& config, double lr, bool apply_decay);

/// AdamW over every parameter of a set that has received a gradient.
/// Parameters flagged `decay = false` (norms, biases, embeddings) skip weight decay.
class AdamW {
 public:
  AdamW(ParameterSet& params, AdamWConfig config);

  /// Applies one update with learning rate `lr`. Throws on a non-finite gradient.
  void step(double lr);
  void step() { step(config_.lr); }

  const AdamWConfig& config() const { return config_; }
  const OptimizerState& state() const { return state_; }
  OptimizerState& state() { return state_; }

 private:
  ParameterSet* params_;
  AdamWConfig config_;
  OptimizerState state_;
};

/// Linear warmup then polynomial decay. The iteration index t is 0-based;
/// t = 0 uses the t = 1 warmup value so the first update is not wasted.
struct LrSchedule {
  double base = 1e-3;
  std::int64_t warmup = 0;
  std::int64_t total = 1;
  double power = 0.9;

  double at(std::int64_t t) const;
};

}  // namespace segkit
