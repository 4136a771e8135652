// Acceptance suite: one PASS/FAIL line per criterion. Tolerances and budgets
// are fixed here on purpose; the experiment presets live in configs/.
//
//   acceptance                 all eleven
//   acceptance --only 5,6,7    a subset
//   acceptance --configs DIR   presets from elsewhere

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "utamoe.hpp"

using namespace utamoe;
namespace fs = std::filesystem;

namespace {

// Pinned thresholds.
constexpr double kGradRelTol = 1e-4;
constexpr double kGradEps = 1e-5;
constexpr std::size_t kGradSeeds = 20;
constexpr double kGateSumTol = 1e-12;
constexpr std::size_t kRoutingInstances = 1000;
constexpr double kRouterAccuracy = 0.99;
constexpr std::size_t kRouterSteps = 200;
constexpr double kConflictGap = 0.02;
constexpr double kAblationMargin = 0.02;
constexpr double kOwnGroupLoad = 0.60;
constexpr double kLoraTol = 1e-12;
constexpr std::size_t kTransformDraws = 10000;
constexpr double kAdamTol = 1e-12;
constexpr std::uint64_t kSeeds[] = {0, 1, 2};

// Wall-clock budgets in seconds.
constexpr double kGradBudget = 60;
constexpr double kRouterBudget = 60;
constexpr double kConflictBudget = 20 * 60;
constexpr double kAblationBudget = 30 * 60;

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Timer {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
  }

 private:
  std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

std::string pts(double v) { return fmt(100.0 * v, 3); }

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return std::numeric_limits<double>::infinity();
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// --- 1 -----------------------------------------------------------------------

Outcome gradient_correctness() {
  Timer t;
  std::map<std::string, double> worst;
  for (std::uint64_t s = 0; s < kGradSeeds; ++s)
    for (const auto& c : gradcheck_suite(s, kGradEps)) worst[c.name] = std::max(worst[c.name], c.max_rel_error);
  const double secs = t.seconds();
  bool ok = secs < kGradBudget;
  std::string d;
  for (const auto& [name, e] : worst) {
    ok = ok && e < kGradRelTol;
    d += name + " " + fmt(e, 3) + ", ";
  }
  return {ok, d + fmt(secs, 3) + " s over " + std::to_string(kGradSeeds) + " seeds"};
}

// --- 2 -----------------------------------------------------------------------

Outcome routing_algebra() {
  Rng rng = make_rng(2024, 2);
  const std::size_t d = 6;
  std::size_t bad_sum = 0, bad_k1 = 0, bad_order = 0;
  double worst = 0.0;
  for (std::size_t n = 0; n < kRoutingInstances; ++n) {
    const std::size_t e = 2 + uniform_index(rng, 7);
    const Tensor x = gaussian_tensor({d}, 1.0, rng, false);
    const std::vector<ExpertScoreMatrix> scores{{gaussian_tensor({e, d}, 2.0, rng, false)}};

    // Oracle: plain softmax, then a full stable sort by descending probability.
    std::vector<double> p(e);
    for (std::size_t i = 0; i < e; ++i)
      for (std::size_t j = 0; j < d; ++j) p[i] += scores[0].weight.at(i, j) * x[j];
    const double mx = *std::max_element(p.begin(), p.end());
    double z = 0.0;
    for (auto& v : p) z += (v = std::exp(v - mx));
    for (auto& v : p) v /= z;
    std::vector<std::size_t> order(e);
    std::iota(order.begin(), order.end(), 0u);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return p[a] > p[b]; });

    for (std::size_t k : {std::size_t{1}, std::size_t{2}, e}) {
      const auto sel = dynamic_route(x, 0, scores, k);
      const double sum = std::accumulate(sel.gate_weights.begin(), sel.gate_weights.end(), 0.0);
      worst = std::max(worst, std::abs(sum - 1.0));
      if (std::abs(sum - 1.0) > kGateSumTol) ++bad_sum;
      if (k == 1 && sel.gate_weights[0] != 1.0) ++bad_k1;
      if (!std::equal(sel.selected.begin(), sel.selected.end(), order.begin())) ++bad_order;
    }
  }
  return {bad_sum == 0 && bad_k1 == 0 && bad_order == 0,
          "worst |sum-1| " + fmt(worst, 3) + ", k=1 misses " + std::to_string(bad_k1) + ", order mismatches " +
              std::to_string(bad_order) + " over " + std::to_string(kRoutingInstances) + " instances"};
}

// --- 3 -----------------------------------------------------------------------

Outcome router_learnability_check() {
  Timer t;
  bool ok = true;
  std::string d;
  for (auto s : kSeeds) {
    const double acc = router_learnability(s, kRouterSteps);
    ok = ok && acc >= kRouterAccuracy;
    d += "seed " + std::to_string(s) + " " + pts(acc) + "%, ";
  }
  const double secs = t.seconds();
  return {ok && secs < kRouterBudget, d + fmt(secs, 3) + " s"};
}

// --- 4 -----------------------------------------------------------------------

Outcome conflict_reproduction(const fs::path& preset) {
  Timer t;
  ExperimentConfig cfg = load_config(preset.string());
  std::size_t hold = 0;
  double best_gap = 0.0;
  std::string d;
  for (auto s : kSeeds) {
    cfg.seed = s;
    const auto r = run_conflict_validation(cfg, std::nullopt, false);
    const bool joint_not_better = r.delta_und <= 0.0 && r.delta_gen <= 0.0;
    if (joint_not_better) {
      ++hold;
      best_gap = std::max({best_gap, -r.delta_und, -r.delta_gen});
    }
    d += "seed " + std::to_string(s) + " dUnd " + pts(r.delta_und) + " dGen " + pts(r.delta_gen) + "; ";
  }
  const double secs = t.seconds();
  return {hold >= 2 && best_gap >= kConflictGap && secs < kConflictBudget,
          d + "held " + std::to_string(hold) + "/3, largest gap " + pts(best_gap) + " pts, " + fmt(secs, 4) + " s"};
}

// --- 5, 6 ---------------------------------------------------------------------

struct AblationRuns {
  std::vector<AblationResult> seeds;
  double seconds = 0.0;
  double target = 0.0;
};

const AblationRuns& ablation_runs(const fs::path& preset) {
  static std::optional<AblationRuns> cache;
  if (!cache) {
    Timer t;
    AblationRuns r;
    ExperimentConfig cfg = load_config(preset.string());
    r.target = cfg.convergence_target;
    for (auto s : kSeeds) {
      cfg.seed = s;
      r.seeds.push_back(run_ablation_suite(cfg, std::nullopt));
    }
    r.seconds = t.seconds();
    cache = std::move(r);
  }
  return *cache;
}

Outcome ablation_ordering(const fs::path& preset) {
  const auto& runs = ablation_runs(preset);
  std::size_t ordered = 0;
  bool margin = true;
  std::string d;
  for (std::size_t i = 0; i < runs.seeds.size(); ++i) {
    const auto& r = runs.seeds[i];
    const double a = r.row("A").metrics.joint(), b = r.row("B").metrics.joint(), c = r.row("C").metrics.joint();
    ordered += c >= b && b >= a;
    margin = margin && c - a >= kAblationMargin;
    d += "seed " + std::to_string(kSeeds[i]) + " A " + pts(a) + " B " + pts(b) + " C " + pts(c) + "; ";
  }
  return {ordered >= 2 && margin && runs.seconds < kAblationBudget,
          d + "ordered " + std::to_string(ordered) + "/3, " + fmt(runs.seconds, 4) + " s"};
}

Outcome two_stage_advantage(const fs::path& preset) {
  const auto& runs = ablation_runs(preset);
  const auto show = [](const std::optional<std::size_t>& e) { return e ? std::to_string(*e) : std::string("never"); };
  std::size_t wins = 0;
  std::string d;
  for (std::size_t i = 0; i < runs.seeds.size(); ++i) {
    const auto& dr = runs.seeds[i].row("D");
    const auto& er = runs.seeds[i].row("E");
    wins += er.convergence && (!dr.convergence || *er.convergence < *dr.convergence);
    d += "seed " + std::to_string(kSeeds[i]) + " D " + show(dr.convergence) + " (und " + pts(dr.metrics.und_accuracy) +
         " gen " + pts(dr.metrics.gen_accuracy) + ") E " + show(er.convergence) + " (und " + pts(er.metrics.und_accuracy) +
         " gen " + pts(er.metrics.gen_accuracy) + "); ";
  }
  return {wins >= 2, d + "target " + fmt(runs.target, 3) + ", E faster in " + std::to_string(wins) + "/3"};
}

// --- 7 -----------------------------------------------------------------------

Outcome expert_load_specialisation(const fs::path& preset) {
  ExperimentConfig cfg = load_config(preset.string());
  cfg.seed = kSeeds[0];
  const Json report = run_experiment(cfg, std::nullopt);
  const auto& load = report.at("expert_load");
  bool ok = true;
  std::string d;
  for (const char* key : {"understanding_own_group_share", "generation_own_group_share"}) {
    std::size_t above = 0, layers = 0;
    d += std::string(key).substr(0, 3) + " [";
    for (const auto& v : load.at(key)) {
      above += v.get<double>() > kOwnGroupLoad;
      ++layers;
      d += pts(v.get<double>()) + " ";
    }
    d.back() = ']';
    d += " ";
    ok = ok && 2 * above > layers;
  }
  return {ok, d + "% own-group load per layer"};
}

// --- 8 -----------------------------------------------------------------------

Outcome lora_identity() {
  ModelConfig mc;
  mc.d_model = 16;
  mc.n_heads = 2;
  mc.d_ff = 24;
  mc.n_layers = 2;
  mc.max_len = 17;
  const TokenSequence seq = {32, 4, 4, 9, 4, 34};
  Rng rng = make_rng(88);
  ModelParams m = assemble_fresh_moe_model(ModelParams::init_dense(mc, rng), MoEConfig{}, rng);

  const Tensor before = forward(m, {seq}).logits;
  prepare_stage2(m, LoraConfig{}, rng);
  const double attach_diff = max_abs_diff(forward(m, {seq}).logits, before);

  visit_weights(m, [&](const std::string&, Weight& w) {
    if (!w.lora) return;
    for (auto& v : w.lora->a.mutable_data()) v = gaussian(rng, 0.0, 0.3);
    for (auto& v : w.lora->b.mutable_data()) v = gaussian(rng, 0.0, 0.3);
  });

  // Frozen bases: no gradient reaches any adapted base weight.
  const TaskBatch batch = collate(std::vector<TaskSample>{understanding_from_content({1, 1, 2}),
                                                          generation_from_content({4, 5, 6})});
  backward(compute_losses(m, batch, TrainingConfig{}, {}).total);
  std::size_t leaking = 0;
  visit_weights(m, [&](const std::string&, Weight& w) {
    if (!w.lora) return;
    if (w.value.requires_grad()) ++leaking;
    if (w.value.has_grad())
      for (double g : w.value.grad()) leaking += g != 0.0;
  });

  const Tensor adapted = forward(m, {seq}).logits;
  merge_lora(m);
  const double merge_diff = max_abs_diff(forward(m, {seq}).logits, adapted);
  return {attach_diff <= kLoraTol && merge_diff <= kLoraTol && leaking == 0,
          "attach " + fmt(attach_diff, 3) + ", merge " + fmt(merge_diff, 3) + ", base-gradient leaks " +
              std::to_string(leaking)};
}

// --- 9 -----------------------------------------------------------------------

Grid random_grid(std::size_t h, std::size_t w, Rng& rng) {
  Grid g(h, w);
  for (auto& v : g.values) v = uniform_unit(rng);
  return g;
}

Outcome anyres_pipeline() {
  Rng rng = make_rng(99);
  std::size_t reassembly_failures = 0, shape_failures = 0;
  for (int n = 0; n < 200; ++n) {
    const std::size_t rows = 1 + uniform_index(rng, 4), cols = 1 + uniform_index(rng, 4);
    const std::size_t ph = 1 + uniform_index(rng, 3), pw = 1 + uniform_index(rng, 3);
    const Grid g = random_grid(rows * ph, cols * pw, rng);
    reassembly_failures += reassemble_grid(split_grid(g, rows, cols), rows, cols) != g;
  }
  // Square patches so every transform keeps the token count.
  const TransformSet all = TransformSet::all();
  for (std::size_t p : {1u, 2u}) {
    const PatchEncoder enc = PatchEncoder::init(p, 5, rng);
    for (std::size_t grid : {1u, 2u, 3u}) {
      const std::size_t side = 2 * p * grid;
      AnyResConfig cfg{grid, grid, 0, 0, 7};
      const auto out = anyres_encode(random_grid(side, side, rng), cfg, all, enc);
      const std::size_t tp = (side / grid / p) * (side / grid / p);
      shape_failures += out.features.shape() != Shape{(grid * grid + 1) * tp, 5};
    }
  }
  // Identity-only set on a 1x1 split: patch tokens are the plain encoding.
  const PatchEncoder enc = PatchEncoder::init(2, 4, rng);
  const Grid img = random_grid(4, 6, rng);
  const auto degenerate = anyres_encode(img, AnyResConfig{1, 1, 0, 0, 3}, TransformSet::identity_only(), enc);
  const Tensor plain = enc.encode(img);
  double degenerate_diff = 0.0;
  for (std::size_t i = 0; i < plain.numel(); ++i) degenerate_diff = std::max(degenerate_diff, std::abs(degenerate.features[i] - plain[i]));
  degenerate_diff = std::max(degenerate_diff, 2.0 * plain.numel() == degenerate.features.numel() ? 0.0 : 1.0);

  // Four rotations, 10k draws: each count within 3 sigma of n/4.
  const TransformSet rot = TransformSet::rotations();
  std::vector<std::size_t> counts(rot.size());
  for (std::uint64_t k = 0; k < kTransformDraws; ++k) ++counts[choose_transform(rot, 11, k)];
  const double expect = static_cast<double>(kTransformDraws) / rot.size();
  const double sigma = std::sqrt(kTransformDraws * (1.0 / rot.size()) * (1.0 - 1.0 / rot.size()));
  double worst_z = 0.0;
  for (auto c : counts) worst_z = std::max(worst_z, std::abs(static_cast<double>(c) - expect) / sigma);

  return {reassembly_failures == 0 && shape_failures == 0 && degenerate_diff == 0.0 && worst_z <= 3.0,
          "reassembly failures " + std::to_string(reassembly_failures) + ", shape failures " +
              std::to_string(shape_failures) + ", identity diff " + fmt(degenerate_diff, 3) + ", worst |z| " +
              fmt(worst_z, 3)};
}

// --- 10 ----------------------------------------------------------------------

std::string report_without_timing(const fs::path& file) {
  std::ifstream in(file);
  return without_timing(Json::parse(in)).dump();
}

Outcome determinism(const fs::path& preset) {
  const ExperimentConfig cfg = load_config(preset.string());
  const fs::path base = fs::temp_directory_path() / "utamoe_acceptance_determinism";
  fs::remove_all(base);
  run_experiment(cfg, base / "a");
  run_experiment(cfg, base / "b");
  const std::string a = report_without_timing(base / "a" / "report.json");
  const std::string b = report_without_timing(base / "b" / "report.json");
  fs::remove_all(base);
  return {a == b && !a.empty(), std::to_string(a.size()) + " bytes of metric fields, " + (a == b ? "identical" : "differ")};
}

// --- 11 ----------------------------------------------------------------------

Outcome closed_forms() {
  bool ok = true;
  for (std::size_t total : {1u, 7u, 200u, 10000u})
    for (double lr : {1e-4, 3e-3, 1.0}) ok = ok && cosine_lr(0, total, lr) == lr && cosine_lr(total, total, lr) == 0.0;
  const bool cosine_ok = ok;

  // First step from zero moments: bias correction leaves lr * g / (|g| + eps).
  double worst = 0.0;
  const AdamWConfig ac;
  for (double g : {1.0, -0.5, 1e-3, 42.0, -7e-6})
    for (double lr : {1e-3, 0.1}) {
      Tensor p = Tensor::scalar(2.0, true);
      std::vector<Tensor> params{p};
      OptimizerState st;
      p.zero_grad();
      backward(mul(p, Tensor::scalar(g)));
      adamw_step(params, st, ac, lr);
      worst = std::max(worst, std::abs((2.0 - p.item()) - lr * g / (std::abs(g) + ac.eps)));
    }
  return {cosine_ok && worst <= kAdamTol,
          std::string("cosine endpoints ") + (cosine_ok ? "exact" : "inexact") + ", AdamW first step error " + fmt(worst, 3)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string only;
  std::string configs = fs::path(UTAMOE_SOURCE_DIR) / "configs";
  app.add_option("--only", only, "Comma-separated criterion numbers");
  app.add_option("--configs", configs, "Directory holding the acceptance presets")->capture_default_str();
  CLI11_PARSE(app, argc, argv);

  const fs::path dir = configs;
  const fs::path conflict = dir / "acceptance_conflict.conf";
  const fs::path ablation = dir / "acceptance_ablation.conf";
  const fs::path smoke = dir / "smoke.conf";

  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"gradient correctness", gradient_correctness},
      {"routing algebra", routing_algebra},
      {"router learnability", router_learnability_check},
      {"conflict reproduction", [&] { return conflict_reproduction(conflict); }},
      {"ablation ordering", [&] { return ablation_ordering(ablation); }},
      {"two-stage advantage", [&] { return two_stage_advantage(ablation); }},
      {"expert-load specialisation", [&] { return expert_load_specialisation(ablation); }},
      {"LoRA identity", lora_identity},
      {"any-resolution pipeline", anyres_pipeline},
      {"determinism", [&] { return determinism(smoke); }},
      {"schedule and optimizer closed forms", closed_forms},
  };

  std::set<std::size_t> selected;
  std::stringstream ss(only);
  for (std::string tok; std::getline(ss, tok, ',');) {
    try {
      const std::size_t n = std::stoul(tok);
      if (n < 1 || n > criteria.size()) throw std::out_of_range(tok);
      selected.insert(n);
    } catch (const std::exception&) {
      std::cerr << "bad criterion number: " << tok << "\n";
      return 2;
    }
  }
  if (selected.empty())
    for (std::size_t i = 1; i <= criteria.size(); ++i) selected.insert(i);

  std::size_t passed = 0;
  for (std::size_t n : selected) {
    const auto& [name, fn] = criteria[n - 1];
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    passed += o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << n << "] " << name << ": " << o.detail << std::endl;
  }
  std::cout << passed << "/" << selected.size() << " criteria passed" << std::endl;
  return passed == selected.size() ? 0 : 1;
}
