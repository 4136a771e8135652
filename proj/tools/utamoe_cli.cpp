// Experiment runner. Exit codes: 0 ok, 1 other failure, 2 config error,
// 3 numeric failure (NaN/Inf during training).

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "utamoe.hpp"

namespace fs = std::filesystem;
using namespace utamoe;

namespace {

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  std::optional<std::size_t> steps;
};

void add_common(CLI::App* sub, CommonOptions& o) {
  sub->add_option("--config", o.config, "Experiment config file (key = value)")->check(CLI::ExistingFile);
  sub->add_option("--seed", o.seed, "Override the config seed");
  sub->add_option("--out", o.out, "Output directory")->capture_default_str();
  sub->add_option("--steps", o.steps, "Override every training stage's step budget")->check(CLI::PositiveNumber);
}

ExperimentConfig resolve_config(const CommonOptions& o) {
  ExperimentConfig cfg = o.config.empty() ? default_experiment_config() : load_config(o.config);
  if (o.seed) cfg.seed = *o.seed;
  if (o.steps) {
    for (StageBudget* b : {&cfg.stage1, &cfg.stage2, &cfg.conflict}) b->steps = *o.steps;
    if (cfg.base.steps > 0) cfg.base.steps = *o.steps;
  }
  cfg.validate();
  return cfg;
}

std::string pct(double v) {
  if (std::isnan(v)) return "   -  ";
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << std::setw(6) << 100.0 * v;
  return os.str();
}

std::string epochs(const std::optional<std::size_t>& e) { return e ? std::to_string(*e) : "n/a"; }

void print_metrics(const char* label, const Json& m) {
  if (m.is_null()) return;
  const auto get = [&](const char* k) { return m[k].is_null() ? std::nan("") : m[k].get<double>(); };
  std::cout << label << ": und " << pct(get("und_accuracy")) << "%  gen " << pct(get("gen_accuracy")) << "%\n";
}

int cmd_stage1(const CommonOptions& o) {
  const auto cfg = resolve_config(o);
  const fs::path out = o.out;
  auto r = run_stage1_experiment(cfg, out);
  const auto data = experiment_data(cfg);
  std::ofstream train(out / "train.jsonl"), val(out / "val.jsonl");
  write_jsonl(data.train, train);
  write_jsonl(data.val, val);
  print_metrics("stage1 understanding FFNs", r.report["stage1_und"]["final_metrics"]);
  print_metrics("stage1 generation FFNs", r.report["stage1_gen"]["final_metrics"]);
  std::cout << "wrote " << out.string() << "/{skeleton,stage1_und,stage1_gen}.tamo, report.json\n";
  return 0;
}

void print_stage2_summary(const Json& report, const fs::path& out) {
  print_metrics("final", report["final_metrics"]);
  std::cout << "alpha per layer:";
  for (const auto& a : report["alpha"]) std::cout << ' ' << a.get<double>();
  std::cout << "\nown-group load (und):";
  for (const auto& v : report["expert_load"]["understanding_own_group_share"]) std::cout << ' ' << pct(v.get<double>()) << '%';
  std::cout << "\nown-group load (gen):";
  for (const auto& v : report["expert_load"]["generation_own_group_share"]) std::cout << ' ' << pct(v.get<double>()) << '%';
  std::cout << "\nwrote " << (out / "report.json").string() << '\n';
}

int cmd_stage2(const CommonOptions& o) {
  const auto cfg = resolve_config(o);
  for (const char* f : {"skeleton.tamo", "stage1_und.tamo", "stage1_gen.tamo"})
    if (!fs::exists(fs::path(o.out) / f))
      throw std::runtime_error("stage2: " + (fs::path(o.out) / f).string() + " missing; run stage1 with the same --out first");
  print_stage2_summary(run_stage2_experiment(cfg, o.out), o.out);
  return 0;
}

int cmd_run(const CommonOptions& o) {
  const auto cfg = resolve_config(o);
  print_stage2_summary(run_experiment(cfg, fs::path(o.out)), o.out);
  return 0;
}

int cmd_conflict(const CommonOptions& o) {
  const auto cfg = resolve_config(o);
  const auto r = run_conflict_validation(cfg, fs::path(o.out));
  std::cout << "row                     und%    gen%\n";
  for (const auto& row : r.rows)
    std::cout << std::left << std::setw(22) << row.name << std::right << ' ' << pct(row.metrics.und_accuracy) << "  "
              << pct(row.metrics.gen_accuracy) << '\n';
  std::cout << "delta und (c - a): " << pct(r.delta_und) << " points\n"
            << "delta gen (c - b): " << pct(r.delta_gen) << " points\n"
            << "wrote report.json, loss_dynamics.csv to " << o.out << '\n';
  return 0;
}

int cmd_ablate(const CommonOptions& o) {
  const auto cfg = resolve_config(o);
  const auto r = run_ablation_suite(cfg, fs::path(o.out));
  std::cout << "model  und%    gen%    joint%  epochs  diff vs previous\n";
  for (const auto& row : r.rows) {
    std::string diff;
    for (const auto& d : row.diff_from_previous) diff += (diff.empty() ? "" : ",") + d;
    std::cout << "  " << row.variant.name << "   " << pct(row.metrics.und_accuracy) << "  " << pct(row.metrics.gen_accuracy)
              << "  " << pct(row.metrics.joint()) << "  " << std::setw(6) << epochs(row.convergence) << "  "
              << diff << '\n';
  }
  return 0;
}

int cmd_ratio_sweep(const CommonOptions& o) {
  const auto cfg = resolve_config(o);
  const auto r = run_ratio_sweep(cfg, fs::path(o.out));
  std::cout << "e:s   und%    gen%    reading\n";
  for (const auto& row : r.rows)
    std::cout << row.experts_per_group << ':' << row.shared << "   " << pct(row.metrics.und_accuracy) << "  "
              << pct(row.metrics.gen_accuracy) << "  " << row.reading << '\n';
  return 0;
}

int cmd_expert_load(const CommonOptions& o, const std::string& checkpoint, const std::string& task,
                    std::optional<std::size_t> samples) {
  auto cfg = resolve_config(o);
  if (samples) cfg.load_samples = *samples;
  const fs::path ckpt = checkpoint.empty() ? fs::path(o.out) / "model.tamo" : fs::path(checkpoint);
  if (!fs::exists(ckpt)) throw std::runtime_error("expert-load: checkpoint " + ckpt.string() + " not found");
  const auto dict = load_checkpoint(ckpt.string());
  const bool with_lora = std::any_of(dict.begin(), dict.end(), [](const auto& kv) { return kv.first.rfind("lora.", 0) == 0; });
  ModelParams model = moe_layout(cfg, cfg.moe_config(), with_lora);
  load_model_state(model, dict);
  const Task filter = task == "gen" ? Task::generation : Task::understanding;
  const auto data = experiment_data(cfg);
  const auto stats = report_expert_load(model, data.val, filter, cfg.load_samples, cfg.force_group_by_label);
  fs::create_directories(o.out);
  write_load(fs::path(o.out) / "expert_load.csv", stats);
  std::cout << "expert load, " << (filter == Task::understanding ? "understanding" : "generation") << " task, "
            << std::min(cfg.load_samples, data.val.only(filter).size()) << " samples\n"
            << render_expert_load_bars(stats);
  const auto share = own_group_share(stats, filter, cfg.experts_per_group);
  std::cout << "own-group share per layer:";
  for (double v : share) std::cout << ' ' << pct(v) << '%';
  std::cout << '\n';
  return 0;
}

int cmd_gradcheck(const CommonOptions& o, std::size_t seeds, double eps, double tol) {
  const std::uint64_t base = o.seed.value_or(0);
  double worst = 0.0;
  std::vector<double> per_case(3, 0.0);
  std::vector<std::string> names;
  for (std::size_t s = 0; s < seeds; ++s) {
    const auto cases = gradcheck_suite(base + s, eps);
    if (names.empty())
      for (const auto& c : cases) names.push_back(c.name);
    for (std::size_t i = 0; i < cases.size(); ++i) per_case[i] = std::max(per_case[i], cases[i].max_rel_error);
  }
  for (std::size_t i = 0; i < names.size(); ++i) {
    std::cout << std::left << std::setw(16) << names[i] << std::right << " max rel error " << std::scientific
              << per_case[i] << std::defaultfloat << '\n';
    worst = std::max(worst, per_case[i]);
  }
  const bool ok = worst < tol;
  std::cout << (ok ? "PASS" : "FAIL") << ": worst " << std::scientific << worst << " over " << seeds
            << " seeds (tolerance " << tol << ")\n";
  return ok ? 0 : 1;
}

TransformSet transform_set(const std::string& name) {
  if (name == "identity") return TransformSet::identity_only();
  if (name == "rotations") return TransformSet::rotations();
  if (name == "all") return TransformSet::all();
  throw ConfigError("anyres-demo: --transforms must be identity, rotations or all");
}

int cmd_anyres(const CommonOptions& o, const std::string& input, std::size_t rows, std::size_t cols, std::size_t patch,
               std::size_t dim, const std::string& transforms) {
  std::ifstream in(input);
  if (!in) throw ConfigError("anyres-demo: cannot open " + input);
  const Grid image = read_grid_csv(in);
  AnyResConfig cfg;
  cfg.rows = rows;
  cfg.cols = cols;
  cfg.seed = o.seed.value_or(0);
  Rng rng = make_rng(cfg.seed, 0xA4E5);
  const PatchEncoder enc = PatchEncoder::init(patch, dim, rng);
  const auto res = anyres_encode(image, cfg, transform_set(transforms), enc);
  fs::create_directories(o.out);
  const fs::path path = fs::path(o.out) / "anyres_features.csv";
  std::ofstream os(path);
  write_matrix_csv(res.features, os);
  std::cout << "input " << image.height << "x" << image.width << ", " << res.patches << " patches of "
            << image.height / rows << "x" << image.width / cols << ", T_p=" << res.tokens_per_patch << ", D=" << dim
            << "\nfeatures " << res.features.dim(0) << "x" << res.features.dim(1) << " = (" << res.patches << "+1)*"
            << res.tokens_per_patch << " x " << dim << "\ntransforms:";
  const auto ts = transform_set(transforms);
  for (auto id : res.transform_ids) std::cout << ' ' << ts.transforms[id].name();
  std::cout << "\nwrote " << path.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Task-aware mixture-of-experts experiments at desk scale"};
  app.require_subcommand(1);
  CommonOptions common;

  auto* stage1 = app.add_subcommand("stage1", "Base pretraining and per-task FFN training");
  auto* stage2 = app.add_subcommand("stage2", "Assemble MoE from stage-1 checkpoints in --out and fine-tune with LoRA");
  auto* run = app.add_subcommand("run", "Full pipeline: stage 1, stage 2, evaluation, expert load");
  auto* conflict = app.add_subcommand("conflict", "Single-task vs joint dense models under equal budgets");
  auto* ablate = app.add_subcommand("ablate", "Ablation models A-E");
  auto* sweep = app.add_subcommand("ratio-sweep", "Group:shared expert count sweep");
  auto* load = app.add_subcommand("expert-load", "Expert load of a trained checkpoint");
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  auto* anyres = app.add_subcommand("anyres-demo", "Encode a CSV grid with the any-resolution pipeline");
  for (auto* s : {stage1, stage2, run, conflict, ablate, sweep, load, gradcheck, anyres}) add_common(s, common);

  std::string checkpoint, task = "und";
  std::optional<std::size_t> samples;
  load->add_option("--checkpoint", checkpoint, "Model checkpoint (default: <out>/model.tamo)");
  load->add_option("--task", task, "und or gen")->check(CLI::IsMember({"und", "gen"}))->capture_default_str();
  load->add_option("--samples", samples, "Instances to sample (default from config)")->check(CLI::PositiveNumber);

  std::size_t gc_seeds = 20;
  double gc_eps = 1e-5, gc_tol = 1e-4;
  gradcheck->add_option("--seeds", gc_seeds, "Number of seeds")->check(CLI::PositiveNumber)->capture_default_str();
  gradcheck->add_option("--eps", gc_eps, "Central-difference step")->capture_default_str();
  gradcheck->add_option("--tol", gc_tol, "Maximum relative error")->capture_default_str();

  std::string grid_csv, transforms = "all";
  std::size_t rows = 2, cols = 2, patch = 2, dim = 8;
  anyres->add_option("--input", grid_csv, "Grid CSV, one row per line")->required()->check(CLI::ExistingFile);
  anyres->add_option("--rows", rows, "Patch rows")->check(CLI::PositiveNumber)->capture_default_str();
  anyres->add_option("--cols", cols, "Patch columns")->check(CLI::PositiveNumber)->capture_default_str();
  anyres->add_option("--patch", patch, "Encoder patch size")->check(CLI::PositiveNumber)->capture_default_str();
  anyres->add_option("--dim", dim, "Feature width D")->check(CLI::PositiveNumber)->capture_default_str();
  anyres->add_option("--transforms", transforms, "identity, rotations or all")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*stage1) return cmd_stage1(common);
    if (*stage2) return cmd_stage2(common);
    if (*run) return cmd_run(common);
    if (*conflict) return cmd_conflict(common);
    if (*ablate) return cmd_ablate(common);
    if (*sweep) return cmd_ratio_sweep(common);
    if (*load) return cmd_expert_load(common, checkpoint, task, samples);
    if (*gradcheck) return cmd_gradcheck(common, gc_seeds, gc_eps, gc_tol);
    if (*anyres) return cmd_anyres(common, grid_csv, rows, cols, patch, dim, transforms);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
