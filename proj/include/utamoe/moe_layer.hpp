#pragma once

// Task-aware MoE layer: two task-specific expert groups behind a hard task
// router, top-k dynamic assignment inside the group, renormalised gate
// weighting of the selected experts, and an always-on shared expert scaled by
// a learnable alpha.

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "utamoe/rng.hpp"
#include "utamoe/router.hpp"
#include "utamoe/tensor.hpp"
#include "utamoe/weight.hpp"

namespace utamoe {

// Two-layer GELU feed-forward block, d -> h -> d.
struct ExpertFFN {
  Weight w1;  // [d×h]
  Tensor b1;  // [h]
  Weight w2;  // [h×d]
  Tensor b2;  // [d]

  static ExpertFFN init(std::size_t d, std::size_t h, Rng& rng) {
    ExpertFFN f;
    f.w1 = Weight(gaussian_tensor({d, h}, 1.0 / std::sqrt(static_cast<double>(d)), rng));
    f.b1 = Tensor::zeros({h}, true);
    f.w2 = Weight(gaussian_tensor({h, d}, 1.0 / std::sqrt(static_cast<double>(h)), rng));
    f.b2 = Tensor::zeros({d}, true);
    return f;
  }

  std::size_t d_model() const { return w1.shape()[0]; }
  std::size_t hidden() const { return w1.shape()[1]; }

  Tensor forward(const Tensor& x) const {
    return add_bias(matmul(gelu(add_bias(matmul(x, w1.effective()), b1)), w2.effective()), b2);
  }

  ExpertFFN clone() const { return {w1.clone(), b1.clone(), w2.clone(), b2.clone()}; }
};

struct MoEConfig {
  std::size_t groups = 2;  // 2: task-aware routing; 1: one flat pool without a task router
  std::size_t experts_per_group = 2;
  std::size_t shared_experts = 1;
  std::size_t top_k = 1;
  double alpha_init = 0.2;
  bool gate_full_softmax = false;
  bool force_group_by_label = false;
  double router_init_std = 0.02;
  double expert_noise = 0.01;  // relative to each copied matrix's RMS

  void validate() const {
    if (groups != 1 && groups != 2) throw ConfigError("moe: groups must be 1 or 2");
    if (experts_per_group == 0 && shared_experts == 0)
      throw ConfigError("moe: no group experts and no shared expert leaves no compute path");
    if (experts_per_group > 0 && (top_k == 0 || top_k > experts_per_group))
      throw ConfigError("moe: top_k=" + std::to_string(top_k) + " with " + std::to_string(experts_per_group) +
                        " experts per group");
    if (!std::isfinite(alpha_init)) throw ConfigError("moe: alpha_init must be finite");
    if (expert_noise < 0.0) throw ConfigError("moe: expert_noise must be non-negative");
  }
};

struct MoEParams {
  std::optional<TaskRouterParams> task_router;          // present iff groups == 2
  std::vector<ExpertScoreMatrix> score_matrices;        // one per group, empty when e == 0
  std::vector<std::vector<ExpertFFN>> group_experts;    // [group][expert]
  std::vector<ExpertFFN> shared_experts;
  Tensor alpha;                                         // [1]
  std::size_t top_k = 1;
  bool gate_full_softmax = false;

  std::size_t groups() const { return group_experts.size(); }
  std::size_t experts_per_group() const { return group_experts.empty() ? 0 : group_experts.front().size(); }
  std::size_t total_group_experts() const { return groups() * experts_per_group(); }

  MoEParams clone() const {
    MoEParams p;
    if (task_router) p.task_router = task_router->clone();
    for (const auto& s : score_matrices) p.score_matrices.push_back({s.weight.clone()});
    for (const auto& g : group_experts) {
      auto& dst = p.group_experts.emplace_back();
      for (const auto& e : g) dst.push_back(e.clone());
    }
    for (const auto& s : shared_experts) p.shared_experts.push_back(s.clone());
    p.alpha = alpha.clone();
    p.top_k = top_k;
    p.gate_full_softmax = gate_full_softmax;
    return p;
  }
};

struct TokenRoute {
  std::size_t group = 0;
  std::vector<std::size_t> experts;  // indices within the group
  std::vector<double> gates;
};

// Routing outcome of one MoE layer for every token of one forward call.
struct RoutingRecord {
  std::size_t layer = 0;
  std::size_t groups = 0;
  std::size_t experts_per_group = 0;
  std::vector<TokenRoute> tokens;
  std::vector<int> token_task;  // g* per token when known, else 0

  // Experts are numbered group-major: group g, local j -> g * e + j.
  std::size_t global_expert(const TokenRoute& t, std::size_t k) const { return t.group * experts_per_group + t.experts[k]; }
};

struct MoEOutput {
  Tensor y;
  RoutingRecord record;
  std::optional<GroupAssignment> assignment;
};

// y = sum_{e in s} gate_e * Expert_e(x) + alpha * sum SharedExpert(x), per token.
inline MoEOutput moe_forward(const Tensor& x, const MoEParams& params,
                             const std::vector<std::size_t>* forced_groups = nullptr, std::size_t layer = 0) {
  if (x.rank() != 2) throw DimensionError("moe_forward: expected [n×d], got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0);
  const std::size_t e = params.experts_per_group();
  if (e == 0 && params.shared_experts.empty()) throw ConfigError("moe_forward: layer has no experts");

  MoEOutput out;
  out.record.layer = layer;
  out.record.groups = e > 0 ? params.groups() : 0;
  out.record.experts_per_group = e;
  out.record.tokens.resize(n);
  out.record.token_task.assign(n, 0);

  std::vector<Tensor> terms;
  if (e > 0) {
    std::vector<std::size_t> groups(n, 0);
    if (params.task_router) {
      out.assignment = task_route(x, *params.task_router, forced_groups);
      groups = out.assignment->group;
    } else if (params.groups() != 1) {
      throw ConfigError("moe_forward: two expert groups need a task router");
    }
    for (std::size_t g = 0; g < params.groups(); ++g) {
      std::vector<std::size_t> idx;
      for (std::size_t t = 0; t < n; ++t)
        if (groups[t] == g) idx.push_back(t);
      if (idx.empty()) continue;
      const auto& w = params.score_matrices.at(g).weight;
      if (w.dim(1) != x.dim(1))
        throw DimensionError("moe_forward: scores " + shape_str(w.shape()) + " vs input " + shape_str(x.shape()));
      const Tensor xg = gather_rows(x, idx);
      const Tensor logits = matmul(xg, transpose(w));  // [m×e]
      const std::size_t m = idx.size();
      std::vector<std::uint8_t> mask(m * e, 0);
      std::vector<ExpertSelection> sel(m);
      {
        NoGradGuard guard;
        const Tensor probs = softmax(logits.detach(), 1);
        for (std::size_t r = 0; r < m; ++r) {
          sel[r] = select_experts(probs.data().subspan(r * e, e), params.top_k);
          for (auto j : sel[r].selected) mask[r * e + j] = 1;
        }
      }
      Tensor gates;
      if (params.gate_full_softmax) {
        std::vector<double> m01(mask.begin(), mask.end());
        gates = mul(softmax(logits, 1), Tensor::from_data({m, e}, std::move(m01)));
      } else {
        gates = masked_softmax(logits, mask);
      }
      for (std::size_t r = 0; r < m; ++r) {
        auto& route = out.record.tokens[idx[r]];
        route.group = g;
        route.experts = sel[r].selected;
        route.gates.clear();
        for (auto j : sel[r].selected) route.gates.push_back(gates[r * e + j]);
      }
      for (std::size_t j = 0; j < e; ++j) {
        std::vector<std::size_t> rows, global;
        for (std::size_t r = 0; r < m; ++r)
          if (mask[r * e + j]) {
            rows.push_back(r);
            global.push_back(idx[r]);
          }
        if (rows.empty()) continue;
        const Tensor h = params.group_experts[g][j].forward(gather_rows(xg, rows));
        const Tensor gate = gather_rows(slice_cols(gates, j, j + 1), rows);
        terms.push_back(scatter_rows(mul_rows(h, gate), global, n));
      }
    }
  }
  if (!params.shared_experts.empty()) {
    std::vector<Tensor> shared;
    for (const auto& s : params.shared_experts) shared.push_back(s.forward(x));
    terms.push_back(mul(params.alpha, shared.size() == 1 ? shared.front() : add_n(shared)));
  }
  out.y = add_n(terms);
  return out;
}

namespace detail {

inline double rms(const Tensor& t) {
  double acc = 0.0;
  for (double v : t.data()) acc += v * v;
  return std::sqrt(acc / static_cast<double>(t.numel()));
}

inline Tensor perturbed_copy(const Tensor& src, double rel_sigma, Rng& rng) {
  auto out = src.detach();
  out.set_requires_grad(true);
  const double sigma = rel_sigma * rms(src);
  if (sigma > 0.0)
    for (auto& v : out.mutable_data()) v += gaussian(rng, 0.0, sigma);
  return out;
}

inline ExpertFFN copy_ffn(const ExpertFFN& src, double rel_sigma, Rng& rng) {
  // Copies take the effective (merged) weights so a LoRA-adapted source is flattened.
  const Tensor w1 = src.w1.lora ? merge_lora(*src.w1.lora) : src.w1.value;
  const Tensor w2 = src.w2.lora ? merge_lora(*src.w2.lora) : src.w2.value;
  return {Weight(perturbed_copy(w1, rel_sigma, rng)), perturbed_copy(src.b1, rel_sigma, rng),
          Weight(perturbed_copy(w2, rel_sigma, rng)), perturbed_copy(src.b2, rel_sigma, rng)};
}

inline Tensor average(const Tensor& a, const Tensor& b) {
  auto out = a.detach();
  auto d = out.mutable_data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = (d[i] + bd[i]) / 2.0;
  out.set_requires_grad(true);
  return out;
}

inline void finish_routers(MoEParams& p, std::size_t d, std::size_t e, const MoEConfig& cfg, Rng& rng) {
  if (cfg.groups == 2 && e > 0) p.task_router = TaskRouterParams::init(d, cfg.router_init_std, rng);
  if (e > 0)
    for (std::size_t g = 0; g < cfg.groups; ++g)
      p.score_matrices.push_back({gaussian_tensor({e, d}, cfg.router_init_std, rng)});
  p.alpha = Tensor::scalar(cfg.alpha_init, true);
  p.top_k = cfg.top_k;
  p.gate_full_softmax = cfg.gate_full_softmax;
}

}  // namespace detail

// Stage-2 assembly: group 0 from the understanding FFN, group 1 from the
// generation FFN, shared experts from their elementwise mean. Copies after the
// first within a group get Gaussian noise at expert_noise × matrix RMS. With a
// single flat pool the first ceil(e/2) experts come from und_ffn, the rest from gen_ffn.
inline MoEParams build_moe_from_ffn(const ExpertFFN& und_ffn, const ExpertFFN& gen_ffn, const MoEConfig& cfg, Rng& rng) {
  cfg.validate();
  if (und_ffn.w1.shape() != gen_ffn.w1.shape() || und_ffn.w2.shape() != gen_ffn.w2.shape())
    throw DimensionError("build_moe_from_ffn: FFN widths differ, " + shape_str(und_ffn.w1.shape()) + " vs " +
                         shape_str(gen_ffn.w1.shape()));
  const std::size_t d = und_ffn.d_model();
  const std::size_t e = cfg.experts_per_group;
  MoEParams p;
  if (cfg.groups == 2) {
    for (const ExpertFFN* src : {&und_ffn, &gen_ffn}) {
      auto& group = p.group_experts.emplace_back();
      for (std::size_t j = 0; j < e; ++j) group.push_back(detail::copy_ffn(*src, j == 0 ? 0.0 : cfg.expert_noise, rng));
    }
  } else {
    auto& pool = p.group_experts.emplace_back();
    const std::size_t from_und = (e + 1) / 2;
    for (std::size_t j = 0; j < e; ++j) {
      const bool und = j < from_und;
      const std::size_t copy = und ? j : j - from_und;
      pool.push_back(detail::copy_ffn(und ? und_ffn : gen_ffn, copy == 0 ? 0.0 : cfg.expert_noise, rng));
    }
  }
  if (e == 0) p.group_experts.clear();
  if (cfg.shared_experts > 0) {
    ExpertFFN mean_ffn{Weight(detail::average(und_ffn.w1.lora ? merge_lora(*und_ffn.w1.lora) : und_ffn.w1.value,
                                              gen_ffn.w1.lora ? merge_lora(*gen_ffn.w1.lora) : gen_ffn.w1.value)),
                       detail::average(und_ffn.b1, gen_ffn.b1),
                       Weight(detail::average(und_ffn.w2.lora ? merge_lora(*und_ffn.w2.lora) : und_ffn.w2.value,
                                              gen_ffn.w2.lora ? merge_lora(*gen_ffn.w2.lora) : gen_ffn.w2.value)),
                       detail::average(und_ffn.b2, gen_ffn.b2)};
    for (std::size_t j = 0; j < cfg.shared_experts; ++j)
      p.shared_experts.push_back(detail::copy_ffn(mean_ffn, j == 0 ? 0.0 : cfg.expert_noise, rng));
  }
  detail::finish_routers(p, d, e, cfg, rng);
  return p;
}

// "Pure" initialisation: every expert (group and shared) freshly drawn.
inline MoEParams init_moe_fresh(std::size_t d, std::size_t h, const MoEConfig& cfg, Rng& rng) {
  cfg.validate();
  MoEParams p;
  const std::size_t e = cfg.experts_per_group;
  if (e > 0)
    for (std::size_t g = 0; g < cfg.groups; ++g) {
      auto& group = p.group_experts.emplace_back();
      for (std::size_t j = 0; j < e; ++j) group.push_back(ExpertFFN::init(d, h, rng));
    }
  for (std::size_t j = 0; j < cfg.shared_experts; ++j) p.shared_experts.push_back(ExpertFFN::init(d, h, rng));
  detail::finish_routers(p, d, e, cfg, rng);
  return p;
}

// ---------------------------------------------------------------------------
// Expert load analytics
// ---------------------------------------------------------------------------

struct ExpertLoadStats {
  std::size_t num_experts = 0;              // group experts only; shared experts are always active
  std::vector<std::size_t> layers;          // layer ids, ascending
  std::vector<std::vector<double>> load;    // [layer][expert] fraction of routings
  std::vector<std::size_t> routings;        // per layer, number of token-routings counted

  // Combined load of experts [first, last) on layer row `i`.
  double combined(std::size_t i, std::size_t first, std::size_t last) const {
    double s = 0.0;
    for (std::size_t j = first; j < last; ++j) s += load[i][j];
    return s;
  }
};

// Fraction of token-routings per global expert id, per layer. `task_filter`
// keeps only tokens whose sample label matches.
inline ExpertLoadStats expert_load_stats(const std::vector<RoutingRecord>& records,
                                         std::optional<Task> task_filter = std::nullopt) {
  if (records.empty()) throw EmptyReductionError("expert_load_stats: no routing records");
  ExpertLoadStats stats;
  const std::size_t e = records.front().experts_per_group;
  stats.num_experts = records.front().groups * e;
  if (stats.num_experts == 0) throw EmptyReductionError("expert_load_stats: layers have no routed experts");
  std::vector<std::size_t> layer_ids;
  for (const auto& r : records) layer_ids.push_back(r.layer);
  std::sort(layer_ids.begin(), layer_ids.end());
  layer_ids.erase(std::unique(layer_ids.begin(), layer_ids.end()), layer_ids.end());
  stats.layers = layer_ids;
  std::vector<std::vector<double>> counts(layer_ids.size(), std::vector<double>(stats.num_experts, 0.0));
  stats.routings.assign(layer_ids.size(), 0);
  for (const auto& r : records) {
    if (r.experts_per_group != e || r.groups * e != stats.num_experts) throw DimensionError("expert_load_stats: records disagree on experts per group");
    const std::size_t li = static_cast<std::size_t>(
        std::lower_bound(layer_ids.begin(), layer_ids.end(), r.layer) - layer_ids.begin());
    for (std::size_t t = 0; t < r.tokens.size(); ++t) {
      if (task_filter && (t >= r.token_task.size() || r.token_task[t] != static_cast<int>(*task_filter))) continue;
      const auto& route = r.tokens[t];
      for (std::size_t k = 0; k < route.experts.size(); ++k) {
        counts[li][r.global_expert(route, k)] += 1.0;
        ++stats.routings[li];
      }
    }
  }
  for (std::size_t li = 0; li < layer_ids.size(); ++li) {
    if (stats.routings[li] == 0)
      throw EmptyReductionError("expert_load_stats: no routed tokens on layer " + std::to_string(layer_ids[li]));
    for (auto& c : counts[li]) c /= static_cast<double>(stats.routings[li]);
  }
  stats.load = std::move(counts);
  return stats;
}

// CSV with header `layer,expert_id,load_fraction`.
inline void write_expert_load_csv(const ExpertLoadStats& stats, std::ostream& os) {
  os << "layer,expert_id,load_fraction\n";
  os << std::setprecision(17);
  for (std::size_t i = 0; i < stats.layers.size(); ++i)
    for (std::size_t j = 0; j < stats.num_experts; ++j) os << stats.layers[i] << ',' << j << ',' << stats.load[i][j] << '\n';
}

// One text line per (layer, expert) with a proportional bar.
inline std::string render_expert_load_bars(const ExpertLoadStats& stats, std::size_t width = 40) {
  std::ostringstream os;
  for (std::size_t i = 0; i < stats.layers.size(); ++i) {
    os << "layer " << stats.layers[i] << '\n';
    for (std::size_t j = 0; j < stats.num_experts; ++j) {
      const double f = stats.load[i][j];
      const auto len = static_cast<std::size_t>(std::lround(f * static_cast<double>(width)));
      os << "  expert " << j << " |" << std::string(len, '#') << std::string(width - std::min(len, width), ' ') << "| "
         << std::fixed << std::setprecision(3) << f << '\n';
      os.unsetf(std::ios_base::floatfield);
    }
  }
  return os.str();
}

}  // namespace utamoe
