#pragma once

// Experiment runners behind the CLI: full pipeline, conflict validation,
// ablations A-E, group:shared ratio sweep and expert-load reporting.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "utamoe/checkpoint.hpp"
#include "utamoe/config.hpp"
#include "utamoe/eval.hpp"
#include "utamoe/lora.hpp"
#include "utamoe/moe_layer.hpp"
#include "utamoe/training.hpp"

namespace utamoe {

using Json = nlohmann::ordered_json;

// RNG stream ids, kept apart so every phase is reproducible on its own.
namespace stream {
inline constexpr std::uint64_t kSkeleton = 1;
inline constexpr std::uint64_t kBase = 2;
inline constexpr std::uint64_t kStage1Und = 3;
inline constexpr std::uint64_t kStage1Gen = 4;
inline constexpr std::uint64_t kStage2 = 5;
inline constexpr std::uint64_t kAssembly = 6;
inline constexpr std::uint64_t kConflict = 7;
inline constexpr std::uint64_t kData = 8;
}  // namespace stream

// ---------------------------------------------------------------------------
// JSON helpers
// ---------------------------------------------------------------------------

inline Json number_or_null(double v) { return std::isnan(v) ? Json(nullptr) : Json(v); }

inline Json metrics_json(const TaskMetrics& m) {
  Json j;
  j["und_accuracy"] = number_or_null(m.und_accuracy);
  j["gen_accuracy"] = number_or_null(m.gen_accuracy);
  j["und_token_accuracy"] = number_or_null(m.und_token_accuracy);
  j["gen_token_accuracy"] = number_or_null(m.gen_token_accuracy);
  j["token_accuracy"] = number_or_null(m.token_accuracy);
  j["joint_accuracy"] = number_or_null(m.joint());
  j["und_count"] = m.und_count;
  j["gen_count"] = m.gen_count;
  return j;
}

inline Json optional_json(const std::optional<std::size_t>& v) { return v ? Json(*v) : Json(nullptr); }

inline Json training_config_json(const TrainingConfig& cfg) {
  return {{"stage", cfg.stage},
          {"steps", cfg.steps},
          {"lr", cfg.lr},
          {"batch_size", cfg.batch_size},
          {"betas", {cfg.beta1, cfg.beta2}},
          {"weight_decay", cfg.weight_decay},
          {"schedule", "cosine"},
          {"lambda_und", cfg.lambda_und},
          {"lambda_gen", cfg.lambda_gen},
          {"gamma", cfg.gamma},
          {"alpha_init", cfg.alpha_init},
          {"seed", cfg.seed}};
}

// JSON summary of one training run.
inline Json history_json(const TrainingHistory& h, const TrainingConfig& cfg, double target) {
  Json j;
  j["config"] = training_config_json(cfg);
  j["steps_per_epoch"] = h.steps_per_epoch;
  if (!h.steps.empty()) j["final_loss"] = h.steps.back().l_total;
  j["final_metrics"] = h.final_metrics ? metrics_json(*h.final_metrics) : Json(nullptr);
  j["convergence_target"] = target;
  j["convergence_epoch"] = optional_json(epochs_to_convergence(h, target));
  Json evals = Json::array();
  for (const auto& e : h.evals) {
    Json row = metrics_json(e.metrics);
    row["epoch"] = e.epoch;
    row["step"] = e.step;
    evals.push_back(row);
  }
  j["evals"] = evals;
  return j;
}

inline Json load_json(const ExpertLoadStats& s) {
  Json j;
  j["num_experts"] = s.num_experts;
  Json layers = Json::array();
  for (std::size_t i = 0; i < s.layers.size(); ++i) layers.push_back({{"layer", s.layers[i]}, {"load", s.load[i]}});
  j["layers"] = layers;
  return j;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

inline void write_json(const std::filesystem::path& path, const Json& j) { write_text(path, j.dump(2) + "\n"); }

inline void write_history(const std::filesystem::path& path, const TrainingHistory& h) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_history_csv(h, out);
}

inline void write_load(const std::filesystem::path& path, const ExpertLoadStats& s) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_expert_load_csv(s, out);
}

// ---------------------------------------------------------------------------
// Pipeline building blocks
// ---------------------------------------------------------------------------

inline DatasetSplit experiment_data(const ExperimentConfig& cfg, bool mse_mode = false) {
  TaskConfig t = cfg.task;
  t.mse_mode = mse_mode;
  return make_split(mix_seed(cfg.seed, stream::kData), t);
}

inline ModelParams init_skeleton(const ExperimentConfig& cfg, bool regression_head = false) {
  Rng rng = make_rng(cfg.seed, stream::kSkeleton);
  return ModelParams::init_dense(cfg.model_config(regression_head), rng);
}

// Random skeleton, then joint dense pretraining of every parameter when
// base.steps > 0. Stands in for a backbone that already handles both tasks.
inline ModelParams build_skeleton(const ExperimentConfig& cfg, const DatasetSplit& data,
                                  TrainingHistory* history = nullptr) {
  ModelParams model = init_skeleton(cfg);
  if (cfg.base.steps == 0) return model;
  TrainingConfig t = cfg.training_config(cfg.base, 0, stream::kBase);
  TrainOptions opts;
  opts.train = &data.train;
  opts.val = &data.val;
  opts.eval_each_epoch = false;
  opts.loss.use_group_loss = false;
  auto h = train_model(model, t, opts);
  if (history) *history = std::move(h);
  return model;
}

struct Stage1Pair {
  Stage1Result und;
  Stage1Result gen;
};

inline Stage1Pair run_stage1_pair(const ExperimentConfig& cfg, const ModelParams& skeleton, const DatasetSplit& data) {
  return {train_stage1(skeleton, Task::understanding, data, cfg.training_config(cfg.stage1, 1, stream::kStage1Und)),
          train_stage1(skeleton, Task::generation, data, cfg.training_config(cfg.stage1, 1, stream::kStage1Gen))};
}

// Stage-1 cost in mixed-dataset epochs: both per-task runs together see
// stage1.steps * batch samples of each task.
inline std::size_t stage1_epoch_equivalent(const ExperimentConfig& cfg) {
  const std::size_t seen = cfg.stage1.steps * cfg.stage1.batch;
  return (seen + cfg.task.train_per_task - 1) / cfg.task.train_per_task;
}

inline LoraConfig lora_for(const ExperimentConfig& cfg, const MoEConfig& moe) {
  LoraConfig l = cfg.lora_config();
  if (moe.experts_per_group == 0) std::erase(l.targets, std::string("expert"));
  if (moe.shared_experts == 0) std::erase(l.targets, std::string("shared"));
  if (l.targets.empty()) l.targets.push_back("attn");
  return l;
}

inline Stage2Result run_stage2(const ExperimentConfig& cfg, const ModelParams& skeleton, const Stage1Pair& s1,
                               const DatasetSplit& data, const MoEConfig& moe, double gamma) {
  TrainingConfig t = cfg.training_config(cfg.stage2, 2, stream::kStage2);
  t.gamma = gamma;
  LossOptions loss;
  loss.force_group_by_label = moe.force_group_by_label;
  Rng rng = make_rng(cfg.seed, stream::kAssembly);
  auto model = assemble_moe_model(skeleton, s1.und.ffns, s1.gen.ffns, moe, rng);
  return train_stage2(std::move(model), data, t, lora_for(cfg, moe), loss);
}

// Routing of `samples` instances of one task, tagged with their labels.
inline ExpertLoadStats report_expert_load(const ModelParams& model, const Dataset& data, Task filter,
                                          std::size_t samples = 100, bool force_group_by_label = false) {
  if (model.kind() != SublayerKind::moe) throw ConfigError("expert load: model has no MoE sublayers");
  const Dataset pool = data.only(filter);
  if (pool.samples.empty()) throw EmptyReductionError("expert load: no samples of the requested task");
  const std::size_t n = std::min(samples, pool.size());
  std::vector<RoutingRecord> records;
  NoGradGuard guard;
  for (std::size_t start = 0; start < n; start += 32) {
    std::vector<const TaskSample*> chunk;
    for (std::size_t i = start; i < std::min(n, start + 32); ++i) chunk.push_back(&pool.samples[i]);
    const TaskBatch batch = collate(chunk);
    ForwardOptions fo;
    fo.g_star = &batch.g_star;
    fo.force_group_by_label = force_group_by_label;
    auto res = forward(model, batch.sequences(), fo);
    for (auto& r : res.routing) records.push_back(std::move(r));
  }
  return expert_load_stats(records, filter);
}

// Combined load of a task's own group, per layer.
inline std::vector<double> own_group_share(const ExpertLoadStats& s, Task task, std::size_t experts_per_group) {
  const std::size_t g = group_index(static_cast<int>(task));
  std::vector<double> out;
  for (std::size_t i = 0; i < s.layers.size(); ++i)
    out.push_back(s.combined(i, g * experts_per_group, (g + 1) * experts_per_group));
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint round trips for the stage1 -> stage2 hand-off
// ---------------------------------------------------------------------------

inline ModelParams load_dense_checkpoint(const ExperimentConfig& cfg, const std::filesystem::path& path) {
  ModelParams m = init_skeleton(cfg);
  load_model_state(m, load_checkpoint(path.string()));
  return m;
}

// Empty MoE model with the layout of `moe`, ready for load_model_state.
inline ModelParams moe_layout(const ExperimentConfig& cfg, const MoEConfig& moe, bool with_lora) {
  Rng rng = make_rng(cfg.seed, stream::kAssembly);
  ModelParams m = assemble_fresh_moe_model(init_skeleton(cfg), moe, rng);
  if (with_lora) attach_lora(m, lora_for(cfg, moe), rng);
  return m;
}

// ---------------------------------------------------------------------------
// Canonical experiments
// ---------------------------------------------------------------------------

struct PipelineResult {
  ModelParams skeleton;
  TrainingHistory base_history;
  Stage1Pair stage1;
  Stage2Result stage2;
  ExpertLoadStats und_load;
  ExpertLoadStats gen_load;
};

inline Json run_header(const char* experiment, const ExperimentConfig& cfg) {
  Json j;
  j["experiment"] = experiment;
  j["seed"] = cfg.seed;
  j["config"] = config_to_json(cfg);
  return j;
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct Stage1Outputs {
  ModelParams skeleton;
  TrainingHistory base_history;
  Stage1Pair stage1;
  Json report;
};

// Base pretraining plus stage 1 for both tasks. Writes skeleton.tamo,
// stage1_und.tamo, stage1_gen.tamo, history CSVs and report.json.
inline Stage1Outputs run_stage1_experiment(const ExperimentConfig& cfg, const std::optional<std::filesystem::path>& out) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto data = experiment_data(cfg);
  Stage1Outputs r{{}, {}, {}, run_header("stage1", cfg)};
  r.skeleton = build_skeleton(cfg, data, &r.base_history);
  r.stage1 = run_stage1_pair(cfg, r.skeleton, data);
  const double target = cfg.convergence_target;
  if (cfg.base.steps > 0) r.report["base"] = history_json(r.base_history, cfg.training_config(cfg.base, 0, stream::kBase), target);
  r.report["stage1_und"] = history_json(r.stage1.und.history, cfg.training_config(cfg.stage1, 1, stream::kStage1Und), target);
  r.report["stage1_gen"] = history_json(r.stage1.gen.history, cfg.training_config(cfg.stage1, 1, stream::kStage1Gen), target);
  r.report["timing"] = {{"wall_seconds", seconds_since(t0)}};
  if (out) {
    std::filesystem::create_directories(*out);
    save_checkpoint(model_state_dict(r.skeleton), (*out / "skeleton.tamo").string());
    save_checkpoint(model_state_dict(r.stage1.und.model), (*out / "stage1_und.tamo").string());
    save_checkpoint(model_state_dict(r.stage1.gen.model), (*out / "stage1_gen.tamo").string());
    write_history(*out / "history_stage1_und.csv", r.stage1.und.history);
    write_history(*out / "history_stage1_gen.csv", r.stage1.gen.history);
    if (cfg.base.steps > 0) write_history(*out / "history_base.csv", r.base_history);
    write_json(*out / "report.json", r.report);
  }
  return r;
}

inline void fill_stage2_report(Json& report, const ExperimentConfig& cfg, const Stage2Result& s2,
                               const ExpertLoadStats& und_load, const ExpertLoadStats& gen_load) {
  report["stage2"] = history_json(s2.history, cfg.training_config(cfg.stage2, 2, stream::kStage2), cfg.convergence_target);
  report["final_metrics"] = s2.history.final_metrics ? metrics_json(*s2.history.final_metrics) : Json(nullptr);
  report["alpha"] = Json::array();
  for (const auto& b : s2.model.blocks) report["alpha"].push_back(b.moe->alpha.item());
  Json load;
  load["samples"] = cfg.load_samples;
  load["understanding"] = load_json(und_load);
  load["generation"] = load_json(gen_load);
  load["understanding_own_group_share"] = own_group_share(und_load, Task::understanding, cfg.experts_per_group);
  load["generation_own_group_share"] = own_group_share(gen_load, Task::generation, cfg.experts_per_group);
  report["expert_load"] = load;
}

inline void write_stage2_outputs(const std::filesystem::path& out, const Json& report, Stage2Result& s2,
                                 const ExpertLoadStats& und_load, const ExpertLoadStats& gen_load) {
  std::filesystem::create_directories(out);
  write_history(out / "history.csv", s2.history);
  write_load(out / "expert_load.csv", und_load);
  write_load(out / "expert_load_gen.csv", gen_load);
  write_text(out / "expert_load.txt", render_expert_load_bars(und_load));
  save_checkpoint(model_state_dict(s2.model), (out / "model.tamo").string());
  save_checkpoint(lora_state_dict(s2.model), (out / "lora.tamo").string());
  write_json(out / "report.json", report);
}

// Stage 2 from the checkpoints a previous `stage1` run left in `dir`.
inline Json run_stage2_experiment(const ExperimentConfig& cfg, const std::filesystem::path& dir) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto data = experiment_data(cfg);
  const ModelParams skeleton = load_dense_checkpoint(cfg, dir / "skeleton.tamo");
  Stage1Pair s1;
  s1.und.ffns = extract_ffns(load_dense_checkpoint(cfg, dir / "stage1_und.tamo"));
  s1.gen.ffns = extract_ffns(load_dense_checkpoint(cfg, dir / "stage1_gen.tamo"));
  auto s2 = run_stage2(cfg, skeleton, s1, data, cfg.moe_config(), cfg.gamma);
  const auto und_load = report_expert_load(s2.model, data.val, Task::understanding, cfg.load_samples, cfg.force_group_by_label);
  const auto gen_load = report_expert_load(s2.model, data.val, Task::generation, cfg.load_samples, cfg.force_group_by_label);
  Json report = run_header("stage2", cfg);
  fill_stage2_report(report, cfg, s2, und_load, gen_load);
  report["timing"] = {{"wall_seconds", seconds_since(t0)}};
  write_stage2_outputs(dir, report, s2, und_load, gen_load);
  return report;
}

inline PipelineResult run_pipeline(const ExperimentConfig& cfg, const DatasetSplit& data) {
  PipelineResult r;
  r.skeleton = build_skeleton(cfg, data, &r.base_history);
  r.stage1 = run_stage1_pair(cfg, r.skeleton, data);
  r.stage2 = run_stage2(cfg, r.skeleton, r.stage1, data, cfg.moe_config(), cfg.gamma);
  r.und_load = report_expert_load(r.stage2.model, data.val, Task::understanding, cfg.load_samples, cfg.force_group_by_label);
  r.gen_load = report_expert_load(r.stage2.model, data.val, Task::generation, cfg.load_samples, cfg.force_group_by_label);
  return r;
}

// Full pipeline: base, stage 1 (both tasks), stage 2, evaluation, expert load.
inline Json run_experiment(const ExperimentConfig& cfg, const std::optional<std::filesystem::path>& out) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const auto data = experiment_data(cfg);
  auto r = run_pipeline(cfg, data);
  Json report = run_header("run", cfg);
  const double target = cfg.convergence_target;
  if (cfg.base.steps > 0) report["base"] = history_json(r.base_history, cfg.training_config(cfg.base, 0, stream::kBase), target);
  report["stage1_und"] = history_json(r.stage1.und.history, cfg.training_config(cfg.stage1, 1, stream::kStage1Und), target);
  report["stage1_gen"] = history_json(r.stage1.gen.history, cfg.training_config(cfg.stage1, 1, stream::kStage1Gen), target);
  fill_stage2_report(report, cfg, r.stage2, r.und_load, r.gen_load);
  report["timing"] = {{"wall_seconds", seconds_since(t0)}};
  if (out) {
    std::filesystem::create_directories(*out);
    write_history(*out / "history_stage1_und.csv", r.stage1.und.history);
    write_history(*out / "history_stage1_gen.csv", r.stage1.gen.history);
    if (cfg.base.steps > 0) write_history(*out / "history_base.csv", r.base_history);
    write_stage2_outputs(*out, report, r.stage2, r.und_load, r.gen_load);
  }
  return report;
}

// Conflict validation: (a) understanding-only, (b) generation-only and (c)
// joint dense models from the same initialisation and step budget. A fourth
// joint run with the regression head records the loss dynamics.
struct ConflictRow {
  std::string name;
  TaskMetrics metrics;
};

struct ConflictResult {
  std::vector<ConflictRow> rows;  // a, b, c
  double delta_und = 0.0;         // c - a
  double delta_gen = 0.0;         // c - b
  TrainingHistory dynamics;       // MSE-mode joint run
  Json report;
};

inline void write_loss_dynamics_csv(const TrainingHistory& h, std::ostream& os) {
  os << "step,l_und,l_gen\n" << std::setprecision(17);
  for (const auto& r : h.steps) {
    os << r.step << ',';
    detail::csv_value(os, r.l_und);
    os << ',';
    detail::csv_value(os, r.l_gen);
    os << '\n';
  }
}

inline ConflictResult run_conflict_validation(const ExperimentConfig& cfg, const std::optional<std::filesystem::path>& out,
                                              bool with_dynamics = true) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const auto data = experiment_data(cfg);
  const TrainingConfig t = cfg.training_config(cfg.conflict, 0, stream::kConflict);
  ConflictResult r;

  const auto train_on = [&](const Dataset& train, const Dataset& val) {
    ModelParams m = init_skeleton(cfg);
    TrainOptions opts;
    opts.train = &train;
    opts.val = &val;
    opts.eval_each_epoch = false;
    opts.loss.use_group_loss = false;
    return *train_model(m, t, opts).final_metrics;
  };
  const Dataset und_train = data.train.only(Task::understanding), und_val = data.val.only(Task::understanding);
  const Dataset gen_train = data.train.only(Task::generation), gen_val = data.val.only(Task::generation);
  r.rows.push_back({"a_understanding_only", train_on(und_train, und_val)});
  r.rows.push_back({"b_generation_only", train_on(gen_train, gen_val)});
  r.rows.push_back({"c_joint", train_on(data.train, data.val)});
  r.delta_und = r.rows[2].metrics.und_accuracy - r.rows[0].metrics.und_accuracy;
  r.delta_gen = r.rows[2].metrics.gen_accuracy - r.rows[1].metrics.gen_accuracy;

  if (with_dynamics) {
    const auto mse_data = experiment_data(cfg, true);
    ModelParams m = init_skeleton(cfg, true);
    TrainOptions opts;
    opts.train = &mse_data.train;
    opts.eval_each_epoch = false;
    opts.loss.use_group_loss = false;
    opts.loss.mse_generation = true;
    r.dynamics = train_model(m, t, opts);
  }

  r.report = run_header("conflict", cfg);
  Json rows = Json::array();
  for (const auto& row : r.rows) {
    Json j = metrics_json(row.metrics);
    j["row"] = row.name;
    rows.push_back(j);
  }
  r.report["rows"] = rows;
  r.report["delta_und"] = r.delta_und;
  r.report["delta_gen"] = r.delta_gen;
  r.report["training"] = training_config_json(t);
  r.report["timing"] = {{"wall_seconds", seconds_since(t0)}};
  if (out) {
    std::filesystem::create_directories(*out);
    write_json(*out / "report.json", r.report);
    if (with_dynamics) {
      std::ofstream os(*out / "loss_dynamics.csv");
      write_loss_dynamics_csv(r.dynamics, os);
    }
  }
  return r;
}

// Ablation variants. Neighbours differ by exactly one named component.
struct AblationVariant {
  std::string name;
  bool task_router = true;
  bool group_loss = true;
  bool shared_expert = true;
  bool two_stage = true;
};

inline std::vector<AblationVariant> ablation_variants() {
  return {{"A", false, false, false, true},
          {"B", true, true, false, true},
          {"C", true, true, true, true},
          {"D", true, true, true, false},
          {"E", true, true, true, true}};
}

inline std::vector<std::string> variant_diff(const AblationVariant& a, const AblationVariant& b) {
  std::vector<std::string> d;
  if (a.task_router != b.task_router) d.push_back("task_router");
  if (a.group_loss != b.group_loss) d.push_back("group_loss");
  if (a.shared_expert != b.shared_expert) d.push_back("shared_expert");
  if (a.two_stage != b.two_stage) d.push_back("two_stage");
  return d;
}

inline MoEConfig variant_moe(const ExperimentConfig& cfg, const AblationVariant& v) {
  MoEConfig m = cfg.moe_config();
  if (!v.task_router) {
    m.groups = 1;
    m.experts_per_group = 2 * cfg.experts_per_group;
    m.force_group_by_label = false;
  }
  m.shared_experts = v.shared_expert ? std::max<std::size_t>(cfg.shared_experts, 1) : 0;
  return m;
}

struct AblationRow {
  AblationVariant variant;
  TaskMetrics metrics;
  std::optional<std::size_t> stage2_convergence;  // epoch within the final stage
  std::optional<std::size_t> convergence;         // total, counting stage-1 epochs for two-stage runs
  std::vector<std::string> diff_from_previous;
};

struct AblationResult {
  std::vector<AblationRow> rows;
  Json report;

  const AblationRow& row(const std::string& name) const {
    for (const auto& r : rows)
      if (r.variant.name == name) return r;
    throw IndexError("no ablation row " + name);
  }
};

// Single-stage MoE: pure (freshly drawn) experts trained with exactly the
// stage-2 recipe, so it differs from the two-stage model only in expert init.
inline Stage2Result train_single_stage(const ExperimentConfig& cfg, const ModelParams& skeleton, const DatasetSplit& data,
                                       const MoEConfig& moe, double gamma) {
  TrainingConfig t = cfg.training_config(cfg.stage2, 2, stream::kStage2);
  t.gamma = gamma;
  LossOptions loss;
  loss.force_group_by_label = moe.force_group_by_label;
  Rng rng = make_rng(cfg.seed, stream::kAssembly);
  return train_stage2(assemble_fresh_moe_model(skeleton, moe, rng), data, t, lora_for(cfg, moe), loss);
}

inline AblationResult run_ablation_suite(const ExperimentConfig& cfg, const std::optional<std::filesystem::path>& out) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const auto data = experiment_data(cfg);
  const ModelParams skeleton = build_skeleton(cfg, data);
  const Stage1Pair s1 = run_stage1_pair(cfg, skeleton, data);
  const std::size_t s1_epochs = stage1_epoch_equivalent(cfg);
  const double target = cfg.convergence_target;

  AblationResult r;
  std::optional<Stage2Result> c_run;
  const auto variants = ablation_variants();
  for (std::size_t i = 0; i < variants.size(); ++i) {
    const auto& v = variants[i];
    const MoEConfig moe = variant_moe(cfg, v);
    AblationRow row;
    row.variant = v;
    if (i > 0) row.diff_from_previous = variant_diff(variants[i - 1], v);
    const double gamma = v.group_loss ? cfg.gamma : 0.0;
    const Stage2Result* run = nullptr;
    std::optional<Stage2Result> own;
    if (v.name == "E" && c_run) {
      run = &*c_run;  // identical configuration to C
    } else if (v.two_stage) {
      own = run_stage2(cfg, skeleton, s1, data, moe, gamma);
      run = &*own;
    } else {
      own = train_single_stage(cfg, skeleton, data, moe, gamma);
      run = &*own;
    }
    row.metrics = *run->history.final_metrics;
    row.stage2_convergence = epochs_to_convergence(run->history, target);
    row.convergence = row.stage2_convergence;
    if (v.two_stage && row.convergence) *row.convergence += s1_epochs;
    if (v.name == "C") c_run = std::move(own);
    r.rows.push_back(row);
  }

  r.report = run_header("ablate", cfg);
  r.report["stage1_epoch_equivalent"] = s1_epochs;
  r.report["convergence_target"] = target;
  Json rows = Json::array();
  for (const auto& row : r.rows) {
    Json j = metrics_json(row.metrics);
    j["model"] = row.variant.name;
    j["task_router"] = row.variant.task_router;
    j["group_loss"] = row.variant.group_loss;
    j["shared_expert"] = row.variant.shared_expert;
    j["two_stage"] = row.variant.two_stage;
    j["diff_from_previous"] = row.diff_from_previous;
    j["final_stage_convergence_epoch"] = optional_json(row.stage2_convergence);
    j["convergence_epoch"] = optional_json(row.convergence);
    rows.push_back(j);
  }
  r.report["rows"] = rows;
  r.report["timing"] = {{"wall_seconds", seconds_since(t0)}};
  if (out) {
    std::filesystem::create_directories(*out);
    write_json(*out / "report.json", r.report);
  }
  return r;
}

struct RatioRow {
  std::size_t experts_per_group = 0;
  std::size_t shared = 0;
  TaskMetrics metrics;
  std::string reading;
};

struct RatioSweepResult {
  std::vector<RatioRow> rows;
  Json report;
};

inline RatioSweepResult run_ratio_sweep(const ExperimentConfig& cfg, const std::optional<std::filesystem::path>& out) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const auto data = experiment_data(cfg);
  const ModelParams skeleton = build_skeleton(cfg, data);
  const Stage1Pair s1 = run_stage1_pair(cfg, skeleton, data);
  RatioSweepResult r;
  for (const auto& [e, s] : cfg.sweep) {
    MoEConfig moe = cfg.moe_config();
    moe.experts_per_group = e;
    moe.shared_experts = s;
    moe.top_k = std::min(std::max<std::size_t>(cfg.top_k, 1), std::max<std::size_t>(e, 1));
    moe.validate();
    auto run = run_stage2(cfg, skeleton, s1, data, moe, cfg.gamma);
    RatioRow row{e, s, *run.history.final_metrics, {}};
    if (e == 0) row.reading = "shared only: y = alpha * shared(x), no routed term";
    else if (s == 0) row.reading = "no shared expert: alpha term absent";
    else row.reading = "routed experts + alpha * shared";
    r.rows.push_back(row);
  }
  r.report = run_header("ratio-sweep", cfg);
  Json rows = Json::array();
  for (const auto& row : r.rows) {
    Json j = metrics_json(row.metrics);
    j["experts_per_group"] = row.experts_per_group;
    j["shared_experts"] = row.shared;
    j["ratio"] = std::to_string(row.experts_per_group) + ":" + std::to_string(row.shared);
    j["reading"] = row.reading;
    rows.push_back(j);
  }
  r.report["rows"] = rows;
  r.report["timing"] = {{"wall_seconds", seconds_since(t0)}};
  if (out) {
    std::filesystem::create_directories(*out);
    write_json(*out / "report.json", r.report);
  }
  return r;
}

// Report with the wall-clock part removed, for determinism comparisons.
inline Json without_timing(Json report) {
  report.erase("timing");
  return report;
}

}  // namespace utamoe
