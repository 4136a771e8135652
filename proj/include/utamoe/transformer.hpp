#pragma once

// Toy pre-norm autoregressive transformer whose FFN sublayers are either dense
// or task-aware MoE. Sequences of a batch are packed row-wise into one
// [n_total×d] matrix; only attention is evaluated per sequence.

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "utamoe/moe_layer.hpp"
#include "utamoe/rng.hpp"
#include "utamoe/tensor.hpp"
#include "utamoe/weight.hpp"

namespace utamoe {

using TokenSequence = std::vector<std::size_t>;

enum class SublayerKind { dense, moe };

struct ModelConfig {
  std::size_t vocab = 36;
  std::size_t d_model = 64;
  std::size_t n_heads = 2;
  std::size_t d_ff = 128;
  std::size_t n_layers = 4;
  std::size_t max_len = 32;
  bool regression_head = false;

  void validate() const {
    if (vocab == 0 || d_model == 0 || d_ff == 0 || n_layers == 0 || max_len == 0 || n_heads == 0)
      throw ConfigError("model: all extents must be positive");
    if (d_model % n_heads != 0) throw ConfigError("model: d_model must be divisible by n_heads");
  }
};

struct LayerNormParams {
  Tensor gain;
  Tensor bias;

  static LayerNormParams init(std::size_t d) { return {Tensor::full({d}, 1.0, true), Tensor::zeros({d}, true)}; }
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias); }
  LayerNormParams clone() const { return {gain.clone(), bias.clone()}; }
};

struct AttentionParams {
  Weight wq, wk, wv, wo;  // each [d×d], x·W convention
  std::size_t n_heads = 1;

  static AttentionParams init(std::size_t d, std::size_t heads, Rng& rng) {
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    AttentionParams a;
    a.wq = Weight(gaussian_tensor({d, d}, s, rng));
    a.wk = Weight(gaussian_tensor({d, d}, s, rng));
    a.wv = Weight(gaussian_tensor({d, d}, s, rng));
    a.wo = Weight(gaussian_tensor({d, d}, s, rng));
    a.n_heads = heads;
    return a;
  }
  AttentionParams clone() const { return {wq.clone(), wk.clone(), wv.clone(), wo.clone(), n_heads}; }
};

struct Block {
  LayerNormParams ln1, ln2;
  AttentionParams attn;
  std::optional<ExpertFFN> ffn;  // dense sublayer
  std::optional<MoEParams> moe;  // task-aware MoE sublayer

  Block clone() const {
    Block b{ln1.clone(), ln2.clone(), attn.clone(), std::nullopt, std::nullopt};
    if (ffn) b.ffn = ffn->clone();
    if (moe) b.moe = moe->clone();
    return b;
  }
};

struct ModelParams {
  ModelConfig config;
  Tensor token_embedding;     // [V×d]
  Tensor position_embedding;  // [L_max×d]
  std::vector<Block> blocks;
  LayerNormParams ln_f;
  Tensor lm_head;                        // [d×V]
  std::optional<Tensor> regression_head;  // [d×1]

  SublayerKind kind() const { return blocks.front().moe ? SublayerKind::moe : SublayerKind::dense; }

  ModelParams clone() const {
    ModelParams m{config, token_embedding.clone(), position_embedding.clone(), {}, ln_f.clone(), lm_head.clone(),
                  std::nullopt};
    for (const auto& b : blocks) m.blocks.push_back(b.clone());
    if (regression_head) m.regression_head = regression_head->clone();
    return m;
  }

  // Randomly initialised model with dense FFN sublayers.
  static ModelParams init_dense(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    const std::size_t d = cfg.d_model;
    ModelParams m;
    m.config = cfg;
    m.token_embedding = gaussian_tensor({cfg.vocab, d}, 1.0, rng);
    m.position_embedding = gaussian_tensor({cfg.max_len, d}, 1.0, rng);
    for (std::size_t i = 0; i < cfg.n_layers; ++i) {
      Block b{LayerNormParams::init(d), LayerNormParams::init(d), AttentionParams::init(d, cfg.n_heads, rng),
              ExpertFFN::init(d, cfg.d_ff, rng), std::nullopt};
      m.blocks.push_back(std::move(b));
    }
    m.ln_f = LayerNormParams::init(d);
    m.lm_head = gaussian_tensor({d, cfg.vocab}, 1.0 / std::sqrt(static_cast<double>(d)), rng);
    if (cfg.regression_head) m.regression_head = gaussian_tensor({d, 1}, 1.0 / std::sqrt(static_cast<double>(d)), rng);
    return m;
  }
};

// ---------------------------------------------------------------------------
// Parameter naming
// ---------------------------------------------------------------------------

using WeightVisitor = std::function<void(const std::string&, Weight&)>;
using TensorVisitor = std::function<void(const std::string&, Tensor&)>;

namespace detail {

inline void visit_ffn_weights(const std::string& prefix, ExpertFFN& f, const WeightVisitor& fn) {
  fn(prefix + ".w1", f.w1);
  fn(prefix + ".w2", f.w2);
}

inline void visit_weight_tensors(const std::string& name, Weight& w, const TensorVisitor& fn) {
  fn(name, w.value);
  if (w.lora) {
    fn("lora." + name + ".a", w.lora->a);
    fn("lora." + name + ".b", w.lora->b);
  }
}

inline void visit_ffn(const std::string& prefix, ExpertFFN& f, const TensorVisitor& fn) {
  visit_weight_tensors(prefix + ".w1", f.w1, fn);
  fn(prefix + ".b1", f.b1);
  visit_weight_tensors(prefix + ".w2", f.w2, fn);
  fn(prefix + ".b2", f.b2);
}

}  // namespace detail

// Every matrix slot that can carry a LoRA adapter.
inline void visit_weights(ModelParams& m, const WeightVisitor& fn) {
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    auto& b = m.blocks[i];
    const std::string p = "blocks." + std::to_string(i);
    fn(p + ".attn.wq", b.attn.wq);
    fn(p + ".attn.wk", b.attn.wk);
    fn(p + ".attn.wv", b.attn.wv);
    fn(p + ".attn.wo", b.attn.wo);
    if (b.ffn) detail::visit_ffn_weights(p + ".ffn", *b.ffn, fn);
    if (b.moe) {
      for (std::size_t g = 0; g < b.moe->group_experts.size(); ++g)
        for (std::size_t j = 0; j < b.moe->group_experts[g].size(); ++j)
          detail::visit_ffn_weights(p + ".moe.group" + std::to_string(g) + ".expert" + std::to_string(j),
                                    b.moe->group_experts[g][j], fn);
      for (std::size_t j = 0; j < b.moe->shared_experts.size(); ++j)
        detail::visit_ffn_weights(p + ".moe.shared" + std::to_string(j), b.moe->shared_experts[j], fn);
    }
  }
}

// Every tensor of the model under a stable dotted name. LoRA factors appear as
// "lora.<weight>.a" / "lora.<weight>.b" next to their base.
inline void visit_parameters(ModelParams& m, const TensorVisitor& fn) {
  fn("tok_emb", m.token_embedding);
  fn("pos_emb", m.position_embedding);
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    auto& b = m.blocks[i];
    const std::string p = "blocks." + std::to_string(i);
    fn(p + ".ln1.gain", b.ln1.gain);
    fn(p + ".ln1.bias", b.ln1.bias);
    detail::visit_weight_tensors(p + ".attn.wq", b.attn.wq, fn);
    detail::visit_weight_tensors(p + ".attn.wk", b.attn.wk, fn);
    detail::visit_weight_tensors(p + ".attn.wv", b.attn.wv, fn);
    detail::visit_weight_tensors(p + ".attn.wo", b.attn.wo, fn);
    fn(p + ".ln2.gain", b.ln2.gain);
    fn(p + ".ln2.bias", b.ln2.bias);
    if (b.ffn) detail::visit_ffn(p + ".ffn", *b.ffn, fn);
    if (b.moe) {
      auto& moe = *b.moe;
      if (moe.task_router) {
        fn(p + ".moe.router.w", moe.task_router->weight);
        fn(p + ".moe.router.b", moe.task_router->bias);
      }
      for (std::size_t g = 0; g < moe.score_matrices.size(); ++g)
        fn(p + ".moe.scores" + std::to_string(g), moe.score_matrices[g].weight);
      for (std::size_t g = 0; g < moe.group_experts.size(); ++g)
        for (std::size_t j = 0; j < moe.group_experts[g].size(); ++j)
          detail::visit_ffn(p + ".moe.group" + std::to_string(g) + ".expert" + std::to_string(j), moe.group_experts[g][j], fn);
      for (std::size_t j = 0; j < moe.shared_experts.size(); ++j)
        detail::visit_ffn(p + ".moe.shared" + std::to_string(j), moe.shared_experts[j], fn);
      fn(p + ".moe.alpha", moe.alpha);
    }
  }
  fn("ln_f.gain", m.ln_f.gain);
  fn("ln_f.bias", m.ln_f.bias);
  fn("lm_head", m.lm_head);
  if (m.regression_head) fn("reg_head", *m.regression_head);
}

inline std::size_t count_parameters(ModelParams& m, bool trainable_only) {
  std::size_t n = 0;
  visit_parameters(m, [&](const std::string&, Tensor& t) {
    if (!trainable_only || t.requires_grad()) n += t.numel();
  });
  return n;
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

namespace detail {

// Per-head causal attention for the rows [off, off+len) of packed q/k/v.
inline Tensor attend_sequence(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t off, std::size_t len,
                              std::size_t heads, std::vector<Tensor>* probs_out = nullptr) {
  const std::size_t d = q.dim(1);
  const std::size_t dh = d / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto mask = causal_mask(len);
  std::vector<Tensor> outs;
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor qh = block(q, off, off + len, h * dh, (h + 1) * dh);
    const Tensor kh = block(k, off, off + len, h * dh, (h + 1) * dh);
    const Tensor vh = block(v, off, off + len, h * dh, (h + 1) * dh);
    const Tensor p = masked_softmax(scale(matmul(qh, transpose(kh)), inv), mask);
    if (probs_out) probs_out->push_back(p);
    outs.push_back(matmul(p, vh));
  }
  return heads == 1 ? outs.front() : concat_cols(outs);
}

inline Tensor attention_packed(const Tensor& x, const AttentionParams& a, const std::vector<std::size_t>& offsets,
                               const std::vector<std::size_t>& lengths) {
  const Tensor q = matmul(x, a.wq.effective());
  const Tensor k = matmul(x, a.wk.effective());
  const Tensor v = matmul(x, a.wv.effective());
  std::vector<Tensor> parts;
  for (std::size_t s = 0; s < offsets.size(); ++s) parts.push_back(attend_sequence(q, k, v, offsets[s], lengths[s], a.n_heads));
  const Tensor ctx = parts.size() == 1 ? parts.front() : concat_rows(parts);
  return matmul(ctx, a.wo.effective());
}

}  // namespace detail

// Multi-head scaled dot-product self-attention over one sequence x[n×d] with a
// lower-triangular mask.
inline Tensor causal_attention(const Tensor& x, const AttentionParams& params) {
  if (x.rank() != 2 || x.dim(1) != params.wq.shape()[0])
    throw DimensionError("causal_attention: input " + shape_str(x.shape()) + " vs width " +
                         std::to_string(params.wq.shape()[0]));
  return detail::attention_packed(x, params, {0}, {x.dim(0)});
}

// Per-head attention probability matrices [n×n] for one sequence.
inline std::vector<Tensor> attention_probabilities(const Tensor& x, const AttentionParams& params) {
  NoGradGuard guard;
  const Tensor q = matmul(x, params.wq.effective());
  const Tensor k = matmul(x, params.wk.effective());
  const Tensor v = matmul(x, params.wv.effective());
  std::vector<Tensor> probs;
  detail::attend_sequence(q, k, v, 0, x.dim(0), params.n_heads, &probs);
  return probs;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

struct ForwardOptions {
  const std::vector<int>* g_star = nullptr;  // per sequence, 1 or 2; tags routing records
  bool force_group_by_label = false;         // route by g* instead of the task router
};

struct ForwardResult {
  Tensor logits;                      // [n_total×V]
  Tensor regression;                  // [n_total×1] when the model has a regression head
  std::vector<Tensor> router_logits;  // one [n_total×2] per MoE layer with a task router
  std::vector<RoutingRecord> routing;
  std::vector<std::size_t> offsets;   // first packed row of each sequence
  std::vector<std::size_t> lengths;
  std::vector<int> token_task;        // per packed row, 0 when unknown
};

inline ForwardResult forward(const ModelParams& model, const std::vector<TokenSequence>& batch,
                             const ForwardOptions& opts = {}) {
  if (batch.empty()) throw DimensionError("forward: empty batch");
  if (opts.g_star && opts.g_star->size() != batch.size())
    throw DimensionError("forward: g_star has " + std::to_string(opts.g_star->size()) + " labels for " +
                         std::to_string(batch.size()) + " sequences");
  const auto& cfg = model.config;
  ForwardResult res;
  std::vector<std::size_t> tokens, positions;
  for (std::size_t s = 0; s < batch.size(); ++s) {
    const auto& seq = batch[s];
    if (seq.empty()) throw DimensionError("forward: empty sequence");
    if (seq.size() > cfg.max_len)
      throw IndexError("forward: sequence length " + std::to_string(seq.size()) + " exceeds max_len " +
                       std::to_string(cfg.max_len));
    res.offsets.push_back(tokens.size());
    res.lengths.push_back(seq.size());
    for (std::size_t i = 0; i < seq.size(); ++i) {
      if (seq[i] >= cfg.vocab)
        throw IndexError("forward: token " + std::to_string(seq[i]) + " outside vocabulary of " + std::to_string(cfg.vocab));
      tokens.push_back(seq[i]);
      positions.push_back(i);
      res.token_task.push_back(opts.g_star ? (*opts.g_star)[s] : 0);
    }
  }
  std::vector<std::size_t> forced;
  if (opts.force_group_by_label) {
    if (!opts.g_star) throw ContractError("forward: force_group_by_label needs g_star labels");
    for (int g : res.token_task) forced.push_back(group_index(g));
  }

  Tensor h = add(gather_rows(model.token_embedding, tokens), gather_rows(model.position_embedding, positions));
  for (std::size_t li = 0; li < model.blocks.size(); ++li) {
    const auto& b = model.blocks[li];
    h = add(h, detail::attention_packed(b.ln1(h), b.attn, res.offsets, res.lengths));
    const Tensor z = b.ln2(h);
    if (b.moe) {
      auto out = moe_forward(z, *b.moe, forced.empty() ? nullptr : &forced, li);
      out.record.token_task = res.token_task;
      if (out.assignment) res.router_logits.push_back(out.assignment->logits);
      res.routing.push_back(std::move(out.record));
      h = add(h, out.y);
    } else if (b.ffn) {
      h = add(h, b.ffn->forward(z));
    } else {
      throw ContractError("forward: block " + std::to_string(li) + " has no sublayer");
    }
  }
  const Tensor hf = model.ln_f(h);
  res.logits = matmul(hf, model.lm_head);
  if (model.regression_head) res.regression = matmul(hf, *model.regression_head);
  return res;
}

// Masked mean next-token cross-entropy.
inline Tensor ar_loss(const Tensor& logits, const std::vector<std::size_t>& targets, const std::vector<double>& mask) {
  return cross_entropy(logits, targets, mask);
}

// Greedy decoding; ties go to the lower token id.
inline TokenSequence generate(const ModelParams& model, const TokenSequence& prompt, std::size_t max_new) {
  if (prompt.empty()) throw DimensionError("generate: empty prompt");
  if (prompt.size() + max_new > model.config.max_len)
    throw ContractError("generate: prompt of " + std::to_string(prompt.size()) + " plus " + std::to_string(max_new) +
                        " new tokens exceeds max_len " + std::to_string(model.config.max_len));
  NoGradGuard guard;
  TokenSequence seq = prompt;
  for (std::size_t step = 0; step < max_new; ++step) {
    const auto res = forward(model, {seq});
    const std::size_t v = res.logits.dim(1);
    seq.push_back(argmax(res.logits.data().subspan((seq.size() - 1) * v, v)));
  }
  return seq;
}

}  // namespace utamoe
