#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "utamoe/tensor.hpp"

namespace utamoe {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct OptimizerState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::size_t step = 0;
};

// One AdamW update with bias correction and decoupled weight decay. Every
// parameter must carry a populated gradient (zero_grad() before backward counts).
inline void adamw_step(std::vector<Tensor>& params, OptimizerState& state, const AdamWConfig& cfg, double lr) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.numel(), 0.0);
      state.v.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw ContractError("adamw_step: parameter list changed between steps");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (!params[i].has_grad())
      throw ContractError("adamw_step: trainable parameter #" + std::to_string(i) + " has no gradient");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].mutable_data();
    const auto g = params[i].grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      w[j] -= lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * w[j]);
    }
  }
}

// lr0 * (1 + cos(pi * step / total)) / 2, never below 0.
inline double cosine_lr(std::size_t step, std::size_t total_steps, double lr0) {
  if (total_steps == 0) return lr0;
  const double frac = static_cast<double>(std::min(step, total_steps)) / static_cast<double>(total_steps);
  return std::max(0.0, lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * frac)));
}

}  // namespace utamoe
