#pragma once

// Composite loss, training loop and the two-stage recipe:
//   stage 1 - per-task FFN training on a frozen skeleton;
//   stage 2 - FFNs assembled into task-aware MoE layers, LoRA attached,
//             mixed-task fine-tuning with the group loss.

#include <cmath>
#include <functional>
#include <iomanip>
#include <numeric>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "utamoe/eval.hpp"
#include "utamoe/lora.hpp"
#include "utamoe/moe_layer.hpp"
#include "utamoe/optim.hpp"
#include "utamoe/router.hpp"
#include "utamoe/synth_tasks.hpp"
#include "utamoe/transformer.hpp"

namespace utamoe {

struct TrainingConfig {
  int stage = 1;
  std::size_t batch_size = 2;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.0;
  std::size_t steps = 200;
  double lambda_und = 0.3;
  double lambda_gen = 0.3;
  double gamma = 0.1;
  double alpha_init = 0.2;
  std::uint64_t seed = 0;

  static TrainingConfig stage1_defaults() { return {}; }
  static TrainingConfig stage2_defaults() {
    TrainingConfig c;
    c.stage = 2;
    c.lr = 2e-5;
    c.steps = 400;
    return c;
  }

  void validate() const {
    if (lambda_und < 0.0 || lambda_gen < 0.0 || gamma < 0.0)
      throw ConfigError("training: loss weights lambda_und, lambda_gen, gamma must be >= 0");
    if (steps == 0) throw ConfigError("training: steps must be >= 1");
    if (batch_size == 0) throw ConfigError("training: batch_size must be >= 1");
    if (!(lr >= 0.0)) throw ConfigError("training: lr must be >= 0");
  }

  AdamWConfig adamw() const { return {beta1, beta2, 1e-8, weight_decay}; }
};

// lambda_und * L_und + lambda_gen * L_gen + gamma * L_group. Undefined
// tensors stand for losses absent from the batch and contribute 0.
inline Tensor total_loss(const Tensor& l_und, const Tensor& l_gen, const Tensor& l_group, const TrainingConfig& cfg) {
  if (cfg.lambda_und < 0.0 || cfg.lambda_gen < 0.0 || cfg.gamma < 0.0)
    throw ConfigError("total_loss: negative loss weight");
  std::vector<Tensor> terms;
  if (l_und.defined()) terms.push_back(scale(l_und, cfg.lambda_und));
  if (l_gen.defined()) terms.push_back(scale(l_gen, cfg.lambda_gen));
  if (l_group.defined() && cfg.gamma > 0.0) terms.push_back(scale(l_group, cfg.gamma));
  if (terms.empty()) return Tensor::scalar(0.0);
  return terms.size() == 1 ? terms.front() : add_n(terms);
}

struct LossOptions {
  bool mse_generation = false;  // generation loss on the regression head instead of CE
  bool use_group_loss = true;
  bool force_group_by_label = false;
};

struct BatchLosses {
  Tensor und, gen, group, total;
  std::vector<RoutingRecord> routing;
};

inline BatchLosses compute_losses(const ModelParams& model, const TaskBatch& batch, const TrainingConfig& cfg,
                                  const LossOptions& opts) {
  ForwardOptions fo;
  fo.g_star = &batch.g_star;
  fo.force_group_by_label = opts.force_group_by_label;
  auto res = forward(model, batch.sequences(), fo);

  std::vector<std::size_t> targets;
  std::vector<double> mask_und, mask_gen;
  std::vector<std::size_t> gen_rows;
  std::vector<double> gen_values;
  for (std::size_t s = 0; s < batch.size(); ++s) {
    const bool und = batch.g_star[s] == static_cast<int>(Task::understanding);
    for (std::size_t j = 0; j < batch.lengths[s]; ++j) {
      const double m = batch.mask[s][j];
      targets.push_back(batch.targets[s][j]);
      mask_und.push_back(und ? m : 0.0);
      mask_gen.push_back(und ? 0.0 : m);
      if (!und && m != 0.0) {
        gen_rows.push_back(res.offsets[s] + j);
        gen_values.push_back(batch.regression[s][j]);
      }
    }
  }
  const auto any = [](const std::vector<double>& m) {
    for (double v : m)
      if (v != 0.0) return true;
    return false;
  };
  BatchLosses out;
  if (any(mask_und)) out.und = ar_loss(res.logits, targets, mask_und);
  if (any(mask_gen)) {
    if (opts.mse_generation) {
      if (!res.regression.defined()) throw ConfigError("MSE generation loss needs a model with a regression head");
      out.gen = mse(gather_rows(res.regression, gen_rows), Tensor::from_data({gen_rows.size(), 1}, gen_values));
    } else {
      out.gen = ar_loss(res.logits, targets, mask_gen);
    }
  }
  if (opts.use_group_loss && !res.router_logits.empty()) out.group = group_loss(res.router_logits, res.token_task);
  out.total = total_loss(out.und, out.gen, out.group, cfg);
  out.routing = std::move(res.routing);
  return out;
}

// ---------------------------------------------------------------------------
// History
// ---------------------------------------------------------------------------

struct StepRecord {
  std::size_t step = 0;
  double lr = 0.0;
  double l_und = TaskMetrics::kNone;
  double l_gen = TaskMetrics::kNone;
  double l_group = TaskMetrics::kNone;
  double l_total = 0.0;
};

struct EvalRecord {
  std::size_t epoch = 0;
  std::size_t step = 0;
  TaskMetrics metrics;
};

struct TrainingHistory {
  std::vector<StepRecord> steps;
  std::vector<EvalRecord> evals;
  std::size_t steps_per_epoch = 0;
  std::optional<TaskMetrics> final_metrics;
};

namespace detail {
inline void csv_value(std::ostream& os, double v) {
  if (!std::isnan(v)) os << v;
}
}  // namespace detail

// Columns: step,lr,l_und,l_gen,l_group,l_total. Losses absent at a step are empty.
inline void write_history_csv(const TrainingHistory& h, std::ostream& os) {
  os << "step,lr,l_und,l_gen,l_group,l_total\n" << std::setprecision(17);
  for (const auto& r : h.steps) {
    os << r.step << ',' << r.lr << ',';
    detail::csv_value(os, r.l_und);
    os << ',';
    detail::csv_value(os, r.l_gen);
    os << ',';
    detail::csv_value(os, r.l_group);
    os << ',' << r.l_total << '\n';
  }
}

// First epoch whose evaluation and the next one both have
// min(und_acc, gen_acc) >= target; nullopt if that never happens.
inline std::optional<std::size_t> epochs_to_convergence(const TrainingHistory& h, double target) {
  for (std::size_t i = 0; i + 1 < h.evals.size(); ++i)
    if (h.evals[i].metrics.weakest() >= target && h.evals[i + 1].metrics.weakest() >= target) return h.evals[i].epoch;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainOptions {
  const Dataset* train = nullptr;
  const Dataset* val = nullptr;  // evaluated after each epoch (and at the end) when set
  LossOptions loss;
  bool eval_each_epoch = true;
  std::function<void(const StepRecord&)> on_step;
};

inline std::vector<std::pair<std::string, Tensor>> trainable_parameters(ModelParams& model) {
  std::vector<std::pair<std::string, Tensor>> out;
  visit_parameters(model, [&](const std::string& name, Tensor& t) {
    if (t.requires_grad()) out.emplace_back(name, t);
  });
  return out;
}

inline void freeze_all(ModelParams& model) {
  visit_parameters(model, [](const std::string&, Tensor& t) {
    t.set_requires_grad(false);
    t.clear_grad();
  });
}

// Sets requires_grad from a name predicate, leaving LoRA bases frozen.
inline void set_trainable(ModelParams& model, const std::function<bool(const std::string&)>& pred) {
  std::set<const detail::Node*> lora_bases;
  visit_weights(model, [&](const std::string&, Weight& w) {
    if (w.lora) lora_bases.insert(w.value.node());
  });
  visit_parameters(model, [&](const std::string& name, Tensor& t) {
    const bool on = pred(name) && !lora_bases.count(t.node());
    t.set_requires_grad(on);
    if (!on) t.clear_grad();
  });
}

inline TrainingHistory train_model(ModelParams& model, const TrainingConfig& cfg, const TrainOptions& opts) {
  cfg.validate();
  if (!opts.train || opts.train->samples.empty()) throw ConfigError("train_model: empty training set");
  auto named = trainable_parameters(model);
  if (named.empty()) throw ConfigError("train_model: model has no trainable parameters");
  std::vector<Tensor> params;
  for (auto& [_, t] : named) params.push_back(t);

  const auto& samples = opts.train->samples;
  const std::size_t n = samples.size();
  TrainingHistory hist;
  hist.steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  OptimizerState state;
  std::vector<std::size_t> perm(n);
  bool evaluated_last = false;

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const std::size_t epoch = step / hist.steps_per_epoch;
    const std::size_t pos = step % hist.steps_per_epoch;
    if (pos == 0) {
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      Rng rng = make_rng(cfg.seed, 0x5348554646ULL + epoch);
      for (std::size_t i = n - 1; i > 0; --i) std::swap(perm[i], perm[uniform_index(rng, i + 1)]);
    }
    std::vector<const TaskSample*> chosen;
    for (std::size_t i = pos * cfg.batch_size; i < std::min(n, (pos + 1) * cfg.batch_size); ++i)
      chosen.push_back(&samples[perm[i]]);
    const TaskBatch batch = collate(chosen);

    for (auto& p : params) p.zero_grad();
    const double lr = cosine_lr(step, cfg.steps, cfg.lr);
    StepRecord rec;
    rec.step = step;
    rec.lr = lr;
    {
      auto losses = compute_losses(model, batch, cfg, opts.loss);
      rec.l_total = losses.total.item();
      if (losses.und.defined()) rec.l_und = losses.und.item();
      if (losses.gen.defined()) rec.l_gen = losses.gen.item();
      if (losses.group.defined()) rec.l_group = losses.group.item();
      if (!std::isfinite(rec.l_total))
        throw NumericError("non-finite loss at step " + std::to_string(step));
      if (losses.total.requires_grad()) backward(losses.total);
    }
    adamw_step(params, state, cfg.adamw(), lr);
    for (const auto& p : params)
      if (!all_finite(p)) throw NumericError("non-finite parameter after step " + std::to_string(step));
    hist.steps.push_back(rec);
    if (opts.on_step) opts.on_step(rec);

    evaluated_last = false;
    if (opts.val && opts.eval_each_epoch && pos + 1 == hist.steps_per_epoch) {
      hist.evals.push_back({epoch + 1, step + 1, eval_task_accuracy(model, *opts.val)});
      evaluated_last = true;
    }
  }
  if (opts.val) hist.final_metrics = evaluated_last ? hist.evals.back().metrics : eval_task_accuracy(model, *opts.val);
  for (auto& p : params) p.clear_grad();
  return hist;
}

// ---------------------------------------------------------------------------
// Two-stage recipe
// ---------------------------------------------------------------------------

inline bool is_ffn_parameter(const std::string& name) { return name.find(".ffn.") != std::string::npos; }

inline std::vector<ExpertFFN> extract_ffns(const ModelParams& model) {
  std::vector<ExpertFFN> out;
  for (const auto& b : model.blocks) {
    if (!b.ffn) throw ConfigError("extract_ffns: model has MoE sublayers");
    out.push_back(b.ffn->clone());
  }
  return out;
}

struct Stage1Result {
  ModelParams model;
  std::vector<ExpertFFN> ffns;  // trained FFN per layer
  TrainingHistory history;
};

// Trains only the FFN sublayers of a copy of `skeleton` on one task.
inline Stage1Result train_stage1(const ModelParams& skeleton, Task task, const DatasetSplit& data,
                                 const TrainingConfig& cfg, LossOptions loss = {}) {
  if (skeleton.kind() != SublayerKind::dense) throw ConfigError("train_stage1: needs dense FFN sublayers");
  Stage1Result r{skeleton.clone(), {}, {}};
  set_trainable(r.model, is_ffn_parameter);
  const Dataset train = data.train.only(task);
  const Dataset val = data.val.only(task);
  loss.use_group_loss = false;
  TrainOptions opts;
  opts.train = &train;
  opts.val = &val;
  opts.loss = loss;
  r.history = train_model(r.model, cfg, opts);
  r.ffns = extract_ffns(r.model);
  return r;
}

// Copies the skeleton's non-FFN parameters and replaces every FFN with a
// task-aware MoE layer assembled from the stage-1 FFNs of that layer.
inline ModelParams assemble_moe_model(const ModelParams& skeleton, const std::vector<ExpertFFN>& und_ffns,
                                      const std::vector<ExpertFFN>& gen_ffns, const MoEConfig& moe_cfg, Rng& rng) {
  if (und_ffns.size() != skeleton.blocks.size() || gen_ffns.size() != skeleton.blocks.size())
    throw ConfigError("assemble_moe_model: " + std::to_string(und_ffns.size()) + "/" + std::to_string(gen_ffns.size()) +
                      " stage-1 FFN layers for a " + std::to_string(skeleton.blocks.size()) + "-layer model");
  ModelParams m = skeleton.clone();
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    m.blocks[i].moe = build_moe_from_ffn(und_ffns[i], gen_ffns[i], moe_cfg, rng);
    m.blocks[i].ffn.reset();
  }
  return m;
}

// Same layout with freshly initialised ("pure") experts.
inline ModelParams assemble_fresh_moe_model(const ModelParams& skeleton, const MoEConfig& moe_cfg, Rng& rng) {
  ModelParams m = skeleton.clone();
  for (auto& b : m.blocks) {
    b.moe = init_moe_fresh(m.config.d_model, m.config.d_ff, moe_cfg, rng);
    b.ffn.reset();
  }
  return m;
}

inline bool is_stage2_full_parameter(const std::string& name) {
  return name.rfind("lora.", 0) == 0 || name.find(".moe.router.") != std::string::npos ||
         name.find(".moe.scores") != std::string::npos || name.find(".moe.alpha") != std::string::npos ||
         name.find(".moe.shared") != std::string::npos;
}

// Attaches LoRA and sets the stage-2 trainable set: adapters, routers, score
// matrices, alpha and shared experts. Everything else is frozen.
inline std::size_t prepare_stage2(ModelParams& model, const LoraConfig& lora_cfg, Rng& rng) {
  freeze_all(model);
  const std::size_t adapted = attach_lora(model, lora_cfg, rng);
  set_trainable(model, is_stage2_full_parameter);
  return adapted;
}

struct Stage2Result {
  ModelParams model;
  TrainingHistory history;
};

inline Stage2Result train_stage2(ModelParams assembled, const DatasetSplit& data, const TrainingConfig& cfg,
                                 const LoraConfig& lora_cfg, LossOptions loss = {}, bool eval_each_epoch = true) {
  if (assembled.kind() != SublayerKind::moe) throw ConfigError("train_stage2: model has no MoE sublayers");
  Rng rng = make_rng(cfg.seed, 0x4C4F5241);
  prepare_stage2(assembled, lora_cfg, rng);
  TrainOptions opts;
  opts.train = &data.train;
  opts.val = &data.val;
  opts.loss = loss;
  opts.eval_each_epoch = eval_each_epoch;
  auto hist = train_model(assembled, cfg, opts);
  return {std::move(assembled), std::move(hist)};
}

// Stage-1 outputs in, trained UTAMoE out.
inline Stage2Result train_stage2(const ModelParams& skeleton, const std::vector<ExpertFFN>& und_ffns,
                                 const std::vector<ExpertFFN>& gen_ffns, const DatasetSplit& data,
                                 const TrainingConfig& cfg, const MoEConfig& moe_cfg, const LoraConfig& lora_cfg,
                                 LossOptions loss = {}) {
  Rng rng = make_rng(cfg.seed, 0x4D4F45);
  loss.force_group_by_label = loss.force_group_by_label || moe_cfg.force_group_by_label;
  return train_stage2(assemble_moe_model(skeleton, und_ffns, gen_ffns, moe_cfg, rng), data, cfg, lora_cfg, loss);
}

}  // namespace utamoe
