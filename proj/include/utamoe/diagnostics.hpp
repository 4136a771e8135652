#pragma once

// Finite-difference checks of three representative graphs and a router
// learnability probe, shared by the CLI, the tests and the acceptance binary.

#include <string>
#include <vector>

#include "utamoe/grad_check.hpp"
#include "utamoe/moe_layer.hpp"
#include "utamoe/optim.hpp"
#include "utamoe/router.hpp"
#include "utamoe/synth_tasks.hpp"
#include "utamoe/training.hpp"
#include "utamoe/transformer.hpp"

namespace utamoe {

struct GradCheckCase {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
};

// Softmax + cross-entropy over a [4×6] logit matrix.
inline GradCheckCase gradcheck_softmax_ce(std::uint64_t seed, double eps = 1e-5) {
  Rng rng = make_rng(seed, 0xCE);
  Tensor logits = gaussian_tensor({4, 6}, 1.0, rng);
  std::vector<std::size_t> targets;
  for (int i = 0; i < 4; ++i) targets.push_back(uniform_index(rng, 6));
  auto r = grad_check_detailed([&] { return cross_entropy(logits, targets, std::vector<double>(4, 1.0)); }, {logits}, eps);
  return {"softmax_ce", r.max_rel_error, r.coordinates};
}

// One MoE layer: two groups of two experts, k=2, a shared expert, and a
// random linear readout of the output.
inline GradCheckCase gradcheck_moe_layer(std::uint64_t seed, double eps = 1e-5) {
  Rng rng = make_rng(seed, 0x30E);
  const std::size_t d = 4, h = 6, n = 5;
  MoEConfig cfg;
  cfg.experts_per_group = 2;
  cfg.top_k = 2;
  cfg.router_init_std = 0.5;
  MoEParams p = init_moe_fresh(d, h, cfg, rng);
  Tensor x = gaussian_tensor({n, d}, 1.0, rng);
  const Tensor readout = gaussian_tensor({n, d}, 1.0, rng, false);
  std::vector<Tensor> inputs{x, p.alpha};
  for (const auto& s : p.score_matrices) inputs.push_back(s.weight);
  for (const auto& g : p.group_experts)
    for (const auto& e : g) inputs.insert(inputs.end(), {e.w1.value, e.b1, e.w2.value, e.b2});
  for (const auto& s : p.shared_experts) inputs.insert(inputs.end(), {s.w1.value, s.b1, s.w2.value, s.b2});
  auto r = grad_check_detailed([&] { return sum(mul(moe_forward(x, p).y, readout)); }, inputs, eps);
  return {"moe_layer", r.max_rel_error, r.coordinates};
}

// Two-block MoE transformer on a mixed batch, through the full training loss
// (both task terms plus group loss).
inline GradCheckCase gradcheck_model(std::uint64_t seed, double eps = 1e-5) {
  Rng rng = make_rng(seed, 0x3D);
  ModelConfig mc;
  mc.d_model = 8;
  mc.n_heads = 2;
  mc.d_ff = 8;
  mc.n_layers = 2;
  mc.max_len = 9;
  MoEConfig moe;
  moe.router_init_std = 0.5;
  ModelParams model = assemble_fresh_moe_model(ModelParams::init_dense(mc, rng), moe, rng);
  TaskConfig tc;
  tc.min_len = 3;
  tc.max_len = 4;
  const TaskBatch batch = make_mixed_batch(rng, 3, tc);
  TrainingConfig tcfg;
  std::vector<Tensor> inputs;
  for (auto& [name, t] : trainable_parameters(model)) inputs.push_back(t);
  auto r = grad_check_detailed([&] { return compute_losses(model, batch, tcfg, {}).total; }, inputs, eps);
  return {"two_block_model", r.max_rel_error, r.coordinates};
}

// Task router alone on two Gaussian clusters (unit variance, means 6 sigma
// apart along a random direction), trained only by the group loss. Returns
// held-out group accuracy.
inline double router_learnability(std::uint64_t seed, std::size_t steps = 200, std::size_t d = 16) {
  Rng rng = make_rng(seed, 0x4017);
  std::vector<double> dir(d);
  double norm = 0.0;
  for (auto& v : dir) {
    v = gaussian(rng);
    norm += v * v;
  }
  for (auto& v : dir) v *= 3.0 / std::sqrt(norm);
  const auto draw = [&](std::size_t n, std::vector<int>& labels) {
    std::vector<double> x(n * d);
    labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      labels[i] = uniform_unit(rng) < 0.5 ? 1 : 2;
      const double sign = labels[i] == 1 ? 1.0 : -1.0;
      for (std::size_t j = 0; j < d; ++j) x[i * d + j] = sign * dir[j] + gaussian(rng);
    }
    return Tensor::from_data({n, d}, std::move(x));
  };
  TaskRouterParams router = TaskRouterParams::init(d, 0.02, rng);
  std::vector<Tensor> params{router.weight, router.bias};
  OptimizerState state;
  for (std::size_t s = 0; s < steps; ++s) {
    std::vector<int> labels;
    const Tensor x = draw(32, labels);
    for (auto& p : params) p.zero_grad();
    backward(group_loss({task_route(x, router).logits}, labels));
    adamw_step(params, state, AdamWConfig{}, 1e-2);
  }
  std::vector<int> labels;
  const Tensor x = draw(1000, labels);
  NoGradGuard guard;
  const auto groups = task_route(x, router).group;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < groups.size(); ++i) hits += groups[i] == group_index(labels[i]);
  return static_cast<double>(hits) / static_cast<double>(groups.size());
}

inline std::vector<GradCheckCase> gradcheck_suite(std::uint64_t seed, double eps = 1e-5) {
  return {gradcheck_softmax_ce(seed, eps), gradcheck_moe_layer(seed, eps), gradcheck_model(seed, eps)};
}

}  // namespace utamoe
