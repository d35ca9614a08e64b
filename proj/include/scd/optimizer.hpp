#pragma once

#include <cmath>
#include <cstdint>

#include "scd/errors.hpp"
#include "scd/params.hpp"

namespace scd {

struct OptimizerConfig {
  double base_lr = 0.005;
  double poly_power = 0.9;
  double momentum = 0.9;
  double weight_decay = 0.0001;
  std::int64_t total_steps = 1;

  void validate() const {
    if (base_lr <= 0.0) throw ConfigError("optimizer: base_lr must be positive");
    if (momentum < 0.0 || momentum >= 1.0)
      throw ConfigError("optimizer: momentum must be in [0,1)");
    if (weight_decay < 0.0) throw ConfigError("optimizer: weight_decay must be >= 0");
    if (total_steps < 1) throw ConfigError("optimizer: total_steps must be >= 1");
  }
};

// lr(step) = base_lr * (1 - step/total_steps)^power, clamped to 0 past the end.
inline double poly_lr(const OptimizerConfig& cfg, std::int64_t step) {
  if (step >= cfg.total_steps) return 0.0;
  const double frac = 1.0 - static_cast<double>(step) / static_cast<double>(cfg.total_steps);
  return cfg.base_lr * std::pow(frac, cfg.poly_power);
}

// Classic coupled SGD: v <- m*v + g + wd*theta; theta <- theta - lr*v.
inline void sgd_step(ParamRegistry& params, const OptimizerConfig& cfg, std::int64_t step) {
  cfg.validate();
  const double lr = poly_lr(cfg, step);
  for (auto& [name, p] : params.all()) {
    auto& theta = p.tensor.values();
    auto& g = p.tensor.grad();
    auto& v = p.momentum;
    const std::size_t n = theta.size();
    for (std::size_t i = 0; i < n; ++i) {
      v[i] = cfg.momentum * v[i] + g[i] + cfg.weight_decay * theta[i];
      theta[i] -= lr * v[i];
    }
  }
}

}  // namespace scd
