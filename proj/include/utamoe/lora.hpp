#pragma once

// Attaching, merging and persisting LoRA adapters on model weight slots.

#include <set>
#include <string>
#include <vector>

#include "utamoe/checkpoint.hpp"
#include "utamoe/rng.hpp"
#include "utamoe/transformer.hpp"
#include "utamoe/weight.hpp"

namespace utamoe {

struct LoraConfig {
  std::size_t rank = 8;
  double lora_alpha = 16.0;
  // Selectors: "attn", "attn.wq|wk|wv|wo", "expert", "expert.w1|w2", "shared",
  // "shared.w1|w2", "ffn", "ffn.w1|w2", or a full weight name.
  std::vector<std::string> targets = {"attn", "expert"};
  double init_std = 0.02;
};

namespace detail {

inline bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

inline bool lora_selector_matches(const std::string& selector, const std::string& name) {
  if (selector == name) return true;
  const auto has = [&](const char* part) { return name.find(part) != std::string::npos; };
  if (selector == "attn") return has(".attn.");
  if (selector.rfind("attn.", 0) == 0) return ends_with(name, "." + selector);
  if (selector == "expert") return has(".moe.group");
  if (selector == "expert.w1" || selector == "expert.w2") return has(".moe.group") && ends_with(name, selector.substr(6));
  if (selector == "shared") return has(".moe.shared");
  if (selector == "shared.w1" || selector == "shared.w2") return has(".moe.shared") && ends_with(name, selector.substr(6));
  if (selector == "ffn") return has(".ffn.");
  if (selector == "ffn.w1" || selector == "ffn.w2") return ends_with(name, "." + selector);
  return false;
}

}  // namespace detail

// Wraps every selected weight with a LoraAdapter (B = 0, A ~ N(0, init_std))
// and freezes its base. Returns the number of adapted matrices.
inline std::size_t attach_lora(ModelParams& model, const LoraConfig& cfg, Rng& rng) {
  if (cfg.rank == 0) throw ConfigError("attach_lora: rank must be >= 1");
  std::set<std::string> used;
  std::size_t attached = 0;
  visit_weights(model, [&](const std::string& name, Weight& w) {
    bool selected = false;
    for (const auto& sel : cfg.targets)
      if (detail::lora_selector_matches(sel, name)) {
        selected = true;
        used.insert(sel);
      }
    if (!selected || w.lora) return;
    const std::size_t m = w.shape()[0], n = w.shape()[1];
    w.value.set_requires_grad(false);
    w.value.clear_grad();
    w.lora = LoraAdapter{w.value, gaussian_tensor({cfg.rank, n}, cfg.init_std, rng), Tensor::zeros({m, cfg.rank}, true),
                         cfg.rank, cfg.lora_alpha / static_cast<double>(cfg.rank)};
    ++attached;
  });
  for (const auto& sel : cfg.targets)
    if (!used.count(sel)) throw ConfigError("attach_lora: unknown target '" + sel + "'");
  return attached;
}

// Folds every adapter into its base and removes it. The merged base keeps the
// trainable flag it had before attachment was frozen (false).
inline void merge_lora(ModelParams& model) {
  visit_weights(model, [](const std::string&, Weight& w) {
    if (!w.lora) return;
    w.value = merge_lora(*w.lora);
    w.lora.reset();
  });
}

// Adapter-only state: "lora.<weight>.a", "lora.<weight>.b", "lora.<weight>.scale".
inline TensorDict lora_state_dict(ModelParams& model) {
  TensorDict dict;
  visit_weights(model, [&](const std::string& name, Weight& w) {
    if (!w.lora) return;
    dict["lora." + name + ".a"] = w.lora->a.detach();
    dict["lora." + name + ".b"] = w.lora->b.detach();
    dict["lora." + name + ".scale"] = Tensor::scalar(w.lora->scale);
  });
  return dict;
}

// Attaches (or overwrites) adapters from a dict produced by lora_state_dict.
inline std::size_t load_lora_state(ModelParams& model, const TensorDict& dict) {
  std::size_t loaded = 0;
  visit_weights(model, [&](const std::string& name, Weight& w) {
    const auto a = dict.find("lora." + name + ".a");
    if (a == dict.end()) return;
    const auto b = dict.find("lora." + name + ".b");
    const auto s = dict.find("lora." + name + ".scale");
    if (b == dict.end() || s == dict.end()) throw ConfigError("load_lora_state: incomplete adapter for " + name);
    const std::size_t r = a->second.dim(0);
    if (a->second.dim(1) != w.shape()[1] || b->second.dim(0) != w.shape()[0] || b->second.dim(1) != r)
      throw DimensionError("load_lora_state: adapter shapes do not fit " + name);
    w.value.set_requires_grad(false);
    w.lora = LoraAdapter{w.value, a->second.clone().set_requires_grad(true), b->second.clone().set_requires_grad(true), r,
                         s->second.item()};
    ++loaded;
  });
  return loaded;
}

// Full model state: every parameter by name plus adapter scales.
inline TensorDict model_state_dict(ModelParams& model) {
  TensorDict dict = lora_state_dict(model);
  visit_parameters(model, [&](const std::string& name, Tensor& t) { dict[name] = t.detach(); });
  return dict;
}

// Restores a model whose structure already matches the checkpoint (same
// config, sublayer kind and expert counts). Adapters present in the dict are attached.
inline void load_model_state(ModelParams& model, const TensorDict& dict) {
  load_lora_state(model, dict);
  visit_parameters(model, [&](const std::string& name, Tensor& t) {
    const auto it = dict.find(name);
    if (it == dict.end()) throw ConfigError("checkpoint lacks parameter " + name);
    if (it->second.shape() != t.shape())
      throw DimensionError("checkpoint tensor " + name + " has shape " + shape_str(it->second.shape()) + ", model expects " +
                           shape_str(t.shape()));
    std::copy(it->second.data().begin(), it->second.data().end(), t.mutable_data().begin());
  });
}

}  // namespace utamoe
