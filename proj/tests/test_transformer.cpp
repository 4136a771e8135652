#include <cmath>
#include <sstream>

#include "test_util.hpp"

using namespace utamoe;
using testutil::random_tensor;
using testutil::tiny_model;

namespace {

ModelParams dense_model(std::uint64_t seed, std::size_t layers = 2) {
  Rng rng = make_rng(seed);
  return ModelParams::init_dense(tiny_model(layers), rng);
}

}  // namespace

TEST(Forward, CausalityFutureTokensDoNotMatter) {
  const ModelParams m = dense_model(1);
  const TokenSequence a = {3, 7, 1, 9, 12, 4};
  TokenSequence b = a;
  b[4] = 30;
  b[5] = 0;
  const Tensor la = forward(m, {a}).logits, lb = forward(m, {b}).logits;
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t v = 0; v < m.config.vocab; ++v) EXPECT_EQ(la.at(i, v), lb.at(i, v)) << i;
  EXPECT_NE(la.at(4, 0), lb.at(4, 0));
}

TEST(Forward, CausalityHoldsForMoEModelsToo) {
  Rng rng = make_rng(2);
  const ModelParams m = assemble_fresh_moe_model(ModelParams::init_dense(tiny_model(), rng), MoEConfig{}, rng);
  TokenSequence a = {33, 5, 5, 6, 34}, b = a;
  b[3] = 20;
  const Tensor la = forward(m, {a}).logits, lb = forward(m, {b}).logits;
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t v = 0; v < m.config.vocab; ++v) EXPECT_EQ(la.at(i, v), lb.at(i, v));
}

TEST(Forward, SingleTokenShape) {
  const auto res = forward(dense_model(3), {{5}});
  EXPECT_EQ(res.logits.shape(), (Shape{1, 36}));
}

TEST(Forward, PackedBatchEqualsSeparateCalls) {
  const ModelParams m = dense_model(4);
  const TokenSequence a = {1, 2, 3}, b = {4, 5, 6, 7, 8};
  const Tensor both = forward(m, {a, b}).logits;
  const Tensor la = forward(m, {a}).logits, lb = forward(m, {b}).logits;
  for (std::size_t v = 0; v < 36; ++v) {
    EXPECT_NEAR(both.at(0, v), la.at(0, v), 1e-12);
    EXPECT_NEAR(both.at(3 + 4, v), lb.at(4, v), 1e-12);
  }
}

TEST(Forward, DenseEqualsSingleExpertMoE) {
  ModelParams dense = dense_model(5);
  ModelParams moe = dense.clone();
  MoEConfig cfg;
  cfg.groups = 1;
  cfg.experts_per_group = 1;
  cfg.shared_experts = 0;
  Rng rng = make_rng(6);
  for (auto& b : moe.blocks) {
    b.moe = build_moe_from_ffn(*b.ffn, *b.ffn, cfg, rng);
    b.ffn.reset();
  }
  const TokenSequence seq = {32, 1, 2, 3, 34};
  testutil::expect_all_near(forward(dense, {seq}).logits, forward(moe, {seq}).logits, 1e-12);
}

TEST(Forward, Errors) {
  const ModelParams m = dense_model(7);
  EXPECT_THROW(forward(m, {{1, 36}}), IndexError);
  EXPECT_THROW(forward(m, {TokenSequence(18, 1)}), IndexError);
  EXPECT_THROW(forward(m, {}), DimensionError);
  EXPECT_THROW(forward(m, {{}}), DimensionError);
}

TEST(Forward, PreNormResidualBlockByHand) {
  ModelParams m = dense_model(8, 1);
  const TokenSequence seq = {4, 9, 2};
  const auto& b = m.blocks[0];
  Tensor h = add(gather_rows(m.token_embedding, seq), gather_rows(m.position_embedding, {0, 1, 2}));
  h = add(h, causal_attention(b.ln1(h), b.attn));
  h = add(h, b.ffn->forward(b.ln2(h)));
  const Tensor logits = matmul(m.ln_f(h), m.lm_head);
  testutil::expect_all_near(forward(m, {seq}).logits, logits, 1e-12);
}

TEST(Attention, SingleTokenIsValueThenOutputProjection) {
  Rng rng = make_rng(9);
  const AttentionParams a = AttentionParams::init(4, 2, rng);
  const Tensor x = random_tensor({1, 4}, 10, false);
  const Tensor expect = matmul(matmul(x, a.wv.value), a.wo.value);
  testutil::expect_all_near(causal_attention(x, a), expect, 1e-12);
}

TEST(Attention, UniformQueryKeyGivesUniformPrefixWeights) {
  AttentionParams a;
  a.wq = Weight(Tensor::zeros({4, 4}));
  a.wk = Weight(Tensor::zeros({4, 4}));
  a.wv = Weight(Tensor::identity(4));
  a.wo = Weight(Tensor::identity(4));
  a.n_heads = 1;
  const Tensor x = random_tensor({4, 4}, 11, false);
  const auto probs = attention_probabilities(x, a);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(probs[0].at(i, j), j <= i ? 1.0 / (i + 1) : 0.0, 1e-15);
  // Output row i is the prefix mean.
  const Tensor y = causal_attention(x, a);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(y.at(2, c), (x.at(0, c) + x.at(1, c) + x.at(2, c)) / 3.0, 1e-12);
}

TEST(Attention, ThreeTokenHandOracle) {
  Rng rng = make_rng(12);
  const AttentionParams a = AttentionParams::init(2, 1, rng);
  const Tensor x = random_tensor({3, 2}, 13, false);
  const Tensor q = matmul(x, a.wq.value), k = matmul(x, a.wk.value), v = matmul(x, a.wv.value);
  std::vector<double> ctx(6, 0.0);
  for (std::size_t i = 0; i < 3; ++i) {
    std::vector<double> s(i + 1);
    double mx = -1e300, z = 0.0;
    for (std::size_t j = 0; j <= i; ++j) {
      s[j] = (q.at(i, 0) * k.at(j, 0) + q.at(i, 1) * k.at(j, 1)) / std::sqrt(2.0);
      mx = std::max(mx, s[j]);
    }
    for (auto& e : s) z += (e = std::exp(e - mx));
    for (std::size_t j = 0; j <= i; ++j)
      for (std::size_t c = 0; c < 2; ++c) ctx[i * 2 + c] += s[j] / z * v.at(j, c);
  }
  const Tensor expect = matmul(Tensor::from_data({3, 2}, ctx), a.wo.value);
  testutil::expect_all_near(causal_attention(x, a), expect, 1e-12);
}

TEST(Attention, RowsSumToOneOverVisiblePrefix) {
  Rng rng = make_rng(14);
  const AttentionParams a = AttentionParams::init(8, 2, rng);
  const auto probs = attention_probabilities(random_tensor({6, 8}, 15, false), a);
  ASSERT_EQ(probs.size(), 2u);
  for (const auto& p : probs)
    for (std::size_t i = 0; i < 6; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < 6; ++j) {
        if (j > i) {
          EXPECT_EQ(p.at(i, j), 0.0);
        }
        acc += p.at(i, j);
      }
      EXPECT_NEAR(acc, 1.0, 1e-12);
    }
}

TEST(ArLoss, UniformAndSaturated) {
  const Tensor uniform = Tensor::zeros({3, 36});
  EXPECT_NEAR(ar_loss(uniform, {1, 2, 3}, {1, 1, 0}).item(), std::log(36.0), 1e-12);
  Tensor perfect = Tensor::zeros({2, 36});
  perfect.mutable_data()[5] = 30.0;
  perfect.mutable_data()[36 + 7] = 30.0;
  EXPECT_LT(ar_loss(perfect, {5, 7}, {1, 1}).item(), 1e-8);
  EXPECT_THROW(ar_loss(uniform, {1, 2, 3}, {0, 0, 0}), EmptyReductionError);
}

TEST(ArLoss, EqualsCrossEntropyOnMaskedRows) {
  const Tensor logits = random_tensor({5, 36}, 16, false);
  const std::vector<std::size_t> t = {1, 2, 3, 4, 5};
  const Tensor picked = gather_rows(logits, {1, 3});
  EXPECT_NEAR(ar_loss(logits, t, {0, 1, 0, 1, 0}).item(), cross_entropy(picked, {2, 4}, {1, 1}).item(), 1e-12);
}

TEST(ArLoss, EndToEndGradCheckEveryParameterGroup) {
  Rng rng = make_rng(17);
  ModelConfig mc = tiny_model();
  mc.d_model = 16;
  mc.d_ff = 16;
  mc.max_len = 9;
  ModelParams m = ModelParams::init_dense(mc, rng);
  const TaskSample s = generation_from_content({3, 1, 4, 1});
  const TaskBatch batch = collate(std::vector<TaskSample>{s});
  const auto loss = [&] { return ar_loss(forward(m, batch.sequences()).logits, batch.targets[0], batch.mask[0]); };
  for (auto& [name, t] : trainable_parameters(m)) EXPECT_LT(grad_check(loss, {t}), 1e-4) << name;
}

TEST(Generate, NoOpDeterministicAndOverflow) {
  const ModelParams m = dense_model(18);
  const TokenSequence prompt = {33, 1, 2, 34};
  EXPECT_EQ(generate(m, prompt, 0), prompt);
  EXPECT_EQ(generate(m, prompt, 5), generate(m, prompt, 5));
  EXPECT_THROW(generate(m, prompt, 14), ContractError);
}

TEST(Generate, ReproducesAMemorisedPair) {
  ModelParams m = dense_model(19);
  const TaskSample s = generation_from_content({7, 3, 11, 5});
  TaskBatch batch = collate(std::vector<TaskSample>{s});
  TrainingConfig cfg;
  auto named = trainable_parameters(m);
  std::vector<Tensor> params;
  for (auto& [n, t] : named) params.push_back(t);
  OptimizerState st;
  for (int step = 0; step < 150; ++step) {
    for (auto& p : params) p.zero_grad();
    backward(compute_losses(m, batch, cfg, {}).total);
    adamw_step(params, st, cfg.adamw(), 1e-2);
  }
  const auto out = generate(m, s.input, s.target.size());
  EXPECT_EQ(TokenSequence(out.begin() + static_cast<std::ptrdiff_t>(s.input.size()), out.end()), s.target);
}

TEST(Checkpoint, BitExactRoundTripAndLayout) {
  ModelParams m = dense_model(20);
  const TensorDict dict = model_state_dict(m);
  std::stringstream ss;
  write_checkpoint(dict, ss);
  const std::string bytes = ss.str();
  ASSERT_GE(bytes.size(), 5u);
  EXPECT_EQ(bytes.substr(0, 4), "TAMO");
  EXPECT_EQ(static_cast<int>(bytes[4]), 1);
  const TensorDict back = read_checkpoint(ss);
  ASSERT_EQ(back.size(), dict.size());
  for (const auto& [name, t] : dict) {
    const auto& u = back.at(name);
    ASSERT_EQ(u.shape(), t.shape()) << name;
    EXPECT_EQ(std::memcmp(u.data().data(), t.data().data(), t.numel() * sizeof(double)), 0) << name;
  }
}

TEST(Checkpoint, FirstEntryByteLayout) {
  TensorDict d;
  d["ab"] = Tensor::mat({{1.5, -2.0}});
  std::stringstream ss;
  write_checkpoint(d, ss);
  const std::string b = ss.str();
  // magic(4) version(1) len(4) name(2) rank(4) extents(2*8) payload(2*8)
  ASSERT_EQ(b.size(), 4u + 1 + 4 + 2 + 4 + 16 + 16);
  std::uint32_t len;
  std::memcpy(&len, b.data() + 5, 4);
  EXPECT_EQ(len, 2u);
  EXPECT_EQ(b.substr(9, 2), "ab");
  std::uint64_t e1;
  std::memcpy(&e1, b.data() + 15 + 8, 8);
  EXPECT_EQ(e1, 2u);
  double v;
  std::memcpy(&v, b.data() + 31 + 8, 8);
  EXPECT_EQ(v, -2.0);
}

TEST(Checkpoint, LoadRestoresIdenticalLogitsAndRejectsBadInput) {
  ModelParams a = dense_model(21), b = dense_model(22);
  load_model_state(b, model_state_dict(a));
  const TokenSequence seq = {1, 2, 3};
  testutil::expect_all_near(forward(a, {seq}).logits, forward(b, {seq}).logits, 0.0);
  std::stringstream bad("NOPE");
  EXPECT_THROW(read_checkpoint(bad), std::runtime_error);
  EXPECT_THROW(load_checkpoint("/nonexistent/x.tamo"), std::runtime_error);
  TensorDict partial = model_state_dict(a);
  partial.erase("lm_head");
  EXPECT_THROW(load_model_state(b, partial), ConfigError);
}
