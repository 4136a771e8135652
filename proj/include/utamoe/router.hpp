#pragma once

// Hierarchical expert routing: a hard task-group classifier followed by a
// top-k scorer inside the chosen group.
//
// Groups are 0-based internally (0 = understanding, 1 = generation); the
// ground-truth label g* is carried as 1/2 and converted at the boundary.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "utamoe/rng.hpp"
#include "utamoe/tensor.hpp"

namespace utamoe {

inline constexpr std::size_t kTaskGroups = 2;

enum class Task : int { understanding = 1, generation = 2 };

inline std::size_t group_index(int g_star) {
  if (g_star != 1 && g_star != 2) throw IndexError("group label must be 1 or 2, got " + std::to_string(g_star));
  return static_cast<std::size_t>(g_star - 1);
}

struct TaskRouterParams {
  Tensor weight;  // [2×d]
  Tensor bias;    // [2]

  static TaskRouterParams init(std::size_t d, double stddev, Rng& rng) {
    return {gaussian_tensor({kTaskGroups, d}, stddev, rng), gaussian_tensor({kTaskGroups}, stddev, rng)};
  }
  TaskRouterParams clone() const { return {weight.clone(), bias.clone()}; }
};

struct GroupAssignment {
  std::vector<std::size_t> group;  // per token, 0-based
  Tensor logits;                   // [n×2], stays on the tape
  Tensor probabilities;            // [n×2], detached values
};

// Softmax(Linear(x)) per token, then a hard argmax (ties → group 0). When
// `forced` is given (teacher forcing by label), it replaces the argmax.
inline GroupAssignment task_route(const Tensor& x, const TaskRouterParams& params,
                                  const std::vector<std::size_t>* forced = nullptr) {
  if (x.rank() != 2 || x.dim(1) != params.weight.dim(1))
    throw DimensionError("task_route: input " + shape_str(x.shape()) + " vs router " + shape_str(params.weight.shape()));
  GroupAssignment out;
  out.logits = add_bias(matmul(x, transpose(params.weight)), params.bias);
  {
    NoGradGuard guard;
    out.probabilities = softmax(out.logits.detach(), 1);
  }
  if (forced) {
    if (forced->size() != x.dim(0)) throw DimensionError("task_route: forced labels do not cover every token");
    out.group = *forced;
  } else {
    out.group = argmax_rows(out.probabilities);
  }
  return out;
}

// Cross-entropy of router logits against per-token ground-truth groups,
// averaged over tokens within a layer and then over layers.
inline Tensor group_loss(const std::vector<Tensor>& router_logits, const std::vector<int>& token_g_star) {
  if (router_logits.empty()) throw EmptyReductionError("group_loss: no MoE layers");
  std::vector<std::size_t> targets;
  targets.reserve(token_g_star.size());
  for (int g : token_g_star) targets.push_back(group_index(g));
  const std::vector<double> mask(targets.size(), 1.0);
  std::vector<Tensor> per_layer;
  for (const auto& logits : router_logits) {
    if (logits.dim(0) != targets.size())
      throw DimensionError("group_loss: " + std::to_string(targets.size()) + " labels for logits " +
                           shape_str(logits.shape()));
    per_layer.push_back(cross_entropy(logits, targets, mask));
  }
  return scale(add_n(per_layer), 1.0 / static_cast<double>(per_layer.size()));
}

// Group-specific expert scoring matrix W_e^(g).
struct ExpertScoreMatrix {
  Tensor weight;  // [e×d]

  std::size_t experts() const { return weight.dim(0); }
};

struct ExpertSelection {
  std::vector<std::size_t> selected;
  std::vector<double> gate_weights;
  Tensor all_scores;  // [e], softmax over the whole group
};

// Top-k of a probability row and the weights renormalised over the selected set.
inline ExpertSelection select_experts(std::span<const double> scores, std::size_t k) {
  ExpertSelection sel;
  sel.selected = top_k(scores, k);
  double total = 0.0;
  for (auto i : sel.selected) total += scores[i];
  for (auto i : sel.selected) sel.gate_weights.push_back(scores[i] / total);
  sel.all_scores = Tensor::from_data({scores.size()}, std::vector<double>(scores.begin(), scores.end()));
  return sel;
}

// Top_k(Softmax(W_e^(g) x)) for one token x[d].
inline ExpertSelection dynamic_route(const Tensor& x, std::size_t group, const std::vector<ExpertScoreMatrix>& scores,
                                     std::size_t k) {
  if (group >= scores.size()) throw IndexError("dynamic_route: group " + std::to_string(group) + " does not exist");
  const auto& w = scores[group].weight;
  if (k == 0 || k > w.dim(0))
    throw ConfigError("dynamic_route: k=" + std::to_string(k) + " but the group has " + std::to_string(w.dim(0)) +
                      " experts");
  if (x.numel() != w.dim(1)) throw DimensionError("dynamic_route: token " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
  NoGradGuard guard;
  auto probs = softmax(matmul(reshape(x, {1, x.numel()}), transpose(w)), 1);
  return select_experts(probs.data(), k);
}

}  // namespace utamoe
