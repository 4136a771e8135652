#pragma once

// Flat key = value experiment configuration. '#' starts a comment; unknown
// keys, malformed values and (for files) missing required keys are errors.

#include <charconv>
#include <fstream>
#include <istream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>

#include "utamoe/errors.hpp"
#include "utamoe/lora.hpp"
#include "utamoe/moe_layer.hpp"
#include "utamoe/synth_tasks.hpp"
#include "utamoe/training.hpp"
#include "utamoe/transformer.hpp"

namespace utamoe {

struct StageBudget {
  std::size_t steps = 0;
  double lr = 0.0;
  std::size_t batch = 2;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;

  std::size_t d_model = 32;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t d_ff = 64;

  TaskConfig task{4, 8, 0.5, false, 512, 128};

  std::size_t experts_per_group = 2;
  std::size_t shared_experts = 1;
  std::size_t top_k = 1;
  double alpha_init = 0.2;
  double gamma = 0.1;
  bool gate_full_softmax = false;
  bool force_group_by_label = false;
  double expert_noise = 0.01;
  double router_init_std = 0.02;

  double lambda_und = 0.3;
  double lambda_gen = 0.3;
  double weight_decay = 0.0;

  std::size_t lora_rank = 8;
  double lora_alpha = 16.0;
  std::vector<std::string> lora_targets = {"attn", "expert"};

  // Joint dense pretraining of the shared skeleton; 0 keeps it random.
  StageBudget base{2000, 3e-3, 16};
  StageBudget stage1{300, 1e-3, 16};
  StageBudget stage2{600, 1e-3, 16};
  StageBudget conflict{800, 3e-3, 16};

  double convergence_target = 0.9;
  std::size_t load_samples = 100;
  std::vector<std::pair<std::size_t, std::size_t>> sweep = {{1, 0}, {0, 1}, {1, 1}, {2, 1}, {3, 1}};

  ModelConfig model_config(bool regression_head = false) const {
    ModelConfig m;
    m.vocab = vocab::kSize;
    m.d_model = d_model;
    m.n_heads = n_heads;
    m.d_ff = d_ff;
    m.n_layers = n_layers;
    m.max_len = task.longest_input();
    m.regression_head = regression_head;
    return m;
  }

  MoEConfig moe_config() const {
    MoEConfig c;
    c.experts_per_group = experts_per_group;
    c.shared_experts = shared_experts;
    c.top_k = top_k;
    c.alpha_init = alpha_init;
    c.gate_full_softmax = gate_full_softmax;
    c.force_group_by_label = force_group_by_label;
    c.expert_noise = expert_noise;
    c.router_init_std = router_init_std;
    return c;
  }

  LoraConfig lora_config() const {
    LoraConfig c;
    c.rank = lora_rank;
    c.lora_alpha = lora_alpha;
    c.targets = lora_targets;
    return c;
  }

  TrainingConfig training_config(const StageBudget& b, int stage, std::uint64_t stream) const {
    TrainingConfig t;
    t.stage = stage;
    t.steps = b.steps;
    t.lr = b.lr;
    t.batch_size = b.batch;
    t.lambda_und = lambda_und;
    t.lambda_gen = lambda_gen;
    t.gamma = gamma;
    t.alpha_init = alpha_init;
    t.weight_decay = weight_decay;
    t.seed = mix_seed(seed, stream);
    return t;
  }

  void validate() const;
};

namespace detail {

static_assert(std::is_same_v<std::uint64_t, std::size_t>, "seed shares the size_t slot type");
using ConfigSlot = std::variant<std::size_t*, double*, bool*, std::vector<std::string>*,
                                std::vector<std::pair<std::size_t, std::size_t>>*>;

inline std::vector<std::pair<std::string, ConfigSlot>> config_slots(ExperimentConfig& c) {
  return {
      {"seed", &c.seed},
      {"d_model", &c.d_model},
      {"n_layers", &c.n_layers},
      {"n_heads", &c.n_heads},
      {"d_ff", &c.d_ff},
      {"min_len", &c.task.min_len},
      {"max_len", &c.task.max_len},
      {"und_probability", &c.task.und_probability},
      {"train_per_task", &c.task.train_per_task},
      {"val_per_task", &c.task.val_per_task},
      {"experts_per_group", &c.experts_per_group},
      {"shared_experts", &c.shared_experts},
      {"top_k", &c.top_k},
      {"alpha_init", &c.alpha_init},
      {"gamma", &c.gamma},
      {"gate_full_softmax", &c.gate_full_softmax},
      {"force_group_by_label", &c.force_group_by_label},
      {"expert_noise", &c.expert_noise},
      {"router_init_std", &c.router_init_std},
      {"lambda_und", &c.lambda_und},
      {"lambda_gen", &c.lambda_gen},
      {"weight_decay", &c.weight_decay},
      {"lora_rank", &c.lora_rank},
      {"lora_alpha", &c.lora_alpha},
      {"lora_targets", &c.lora_targets},
      {"base_steps", &c.base.steps},
      {"base_lr", &c.base.lr},
      {"base_batch", &c.base.batch},
      {"stage1_steps", &c.stage1.steps},
      {"stage1_lr", &c.stage1.lr},
      {"stage1_batch", &c.stage1.batch},
      {"stage2_steps", &c.stage2.steps},
      {"stage2_lr", &c.stage2.lr},
      {"stage2_batch", &c.stage2.batch},
      {"conflict_steps", &c.conflict.steps},
      {"conflict_lr", &c.conflict.lr},
      {"conflict_batch", &c.conflict.batch},
      {"convergence_target", &c.convergence_target},
      {"load_samples", &c.load_samples},
      {"sweep", &c.sweep},
  };
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (auto t = trim(item); !t.empty()) out.push_back(t);
  return out;
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) throw ConfigError("config: bad value for '" + key + "': '" + text + "'");
  return v;
}

inline void assign_slot(const std::string& key, const std::string& text, const ConfigSlot& slot) {
  std::visit(
      [&](auto* p) {
        using T = std::remove_pointer_t<decltype(p)>;
        if constexpr (std::is_same_v<T, bool>) {
          if (text == "true" || text == "1") *p = true;
          else if (text == "false" || text == "0") *p = false;
          else throw ConfigError("config: '" + key + "' expects true/false, got '" + text + "'");
        } else if constexpr (std::is_same_v<T, std::vector<std::string>>) {
          *p = split_list(text);
        } else if constexpr (std::is_same_v<T, std::vector<std::pair<std::size_t, std::size_t>>>) {
          p->clear();
          for (const auto& item : split_list(text)) {
            const auto colon = item.find(':');
            if (colon == std::string::npos) throw ConfigError("config: sweep entries look like e:shared, got '" + item + "'");
            p->emplace_back(parse_number<std::size_t>(key, trim(item.substr(0, colon))),
                            parse_number<std::size_t>(key, trim(item.substr(colon + 1))));
          }
        } else {
          *p = parse_number<T>(key, text);
        }
      },
      slot);
}

inline nlohmann::json slot_json(const ConfigSlot& slot) {
  return std::visit(
      [](auto* p) -> nlohmann::json {
        using T = std::remove_pointer_t<decltype(p)>;
        if constexpr (std::is_same_v<T, std::vector<std::pair<std::size_t, std::size_t>>>) {
          std::vector<std::string> items;
          for (const auto& [e, s] : *p) items.push_back(std::to_string(e) + ":" + std::to_string(s));
          return items;
        } else {
          return *p;
        }
      },
      slot);
}

}  // namespace detail

inline const std::vector<std::string>& required_config_keys() {
  static const std::vector<std::string> keys = {"seed", "d_model", "n_layers", "n_heads", "d_ff"};
  return keys;
}

inline void ExperimentConfig::validate() const {
  model_config().validate();
  task.validate();
  moe_config().validate();
  if (d_model % n_heads != 0) throw ConfigError("config: d_model must be divisible by n_heads");
  for (const StageBudget* b : {&stage1, &stage2, &conflict})
    if (b->steps == 0 || b->batch == 0) throw ConfigError("config: stage steps and batch sizes must be >= 1");
  if (base.steps > 0 && base.batch == 0) throw ConfigError("config: base_batch must be >= 1");
  if (lambda_und < 0 || lambda_gen < 0 || gamma < 0) throw ConfigError("config: loss weights must be >= 0");
  if (lora_rank == 0) throw ConfigError("config: lora_rank must be >= 1");
  if (convergence_target < 0.0 || convergence_target > 1.0) throw ConfigError("config: convergence_target outside [0,1]");
  if (load_samples == 0) throw ConfigError("config: load_samples must be >= 1");
  for (const auto& [e, s] : sweep)
    if (e == 0 && s == 0) throw ConfigError("config: sweep pair 0:0 has no compute path");
}

// Applies `key = value` lines on top of `base`. Collects every unknown key
// before failing so the error lists them all.
inline ExperimentConfig parse_config(std::istream& is, ExperimentConfig base = {}, bool require_keys = true) {
  auto slots = detail::config_slots(base);
  std::map<std::string, detail::ConfigSlot> by_name(slots.begin(), slots.end());
  std::set<std::string> seen;
  std::vector<std::string> unknown;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    const auto it = by_name.find(key);
    if (it == by_name.end()) {
      unknown.push_back(key);
      continue;
    }
    if (!seen.insert(key).second) throw ConfigError("config: key '" + key + "' given twice");
    detail::assign_slot(key, value, it->second);
  }
  if (!unknown.empty()) {
    std::string msg = "config: unknown key(s):";
    for (const auto& k : unknown) msg += " " + k;
    throw ConfigError(msg);
  }
  if (require_keys)
    for (const auto& k : required_config_keys())
      if (!seen.count(k)) throw ConfigError("config: missing required key '" + k + "'");
  base.validate();
  return base;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  return parse_config(in);
}

// Every key in declaration order.
inline nlohmann::ordered_json config_to_json(const ExperimentConfig& cfg) {
  ExperimentConfig copy = cfg;
  nlohmann::ordered_json j;
  for (const auto& [name, slot] : detail::config_slots(copy)) j[name] = detail::slot_json(slot);
  return j;
}

inline std::string config_to_text(const ExperimentConfig& cfg) {
  std::string out;
  const auto j = config_to_json(cfg);  // items() only views j, so it must outlive the loop
  for (const auto& [key, value] : j.items()) {
    std::string v;
    if (value.is_array()) {
      for (const auto& item : value) v += (v.empty() ? "" : ",") + item.get<std::string>();
    } else {
      v = value.dump();
    }
    out += key + " = " + v + "\n";
  }
  return out;
}

// Built-in preset used when no --config is given.
inline ExperimentConfig default_experiment_config() { return {}; }

}  // namespace utamoe
