#include <algorithm>
#include <map>
#include <sstream>

#include "test_util.hpp"

using namespace utamoe;

namespace {

// Independent label oracles.
std::size_t count_majority(const TokenSequence& c) {
  std::map<std::size_t, std::size_t> n;
  for (auto s : c) ++n[s];
  std::size_t best = c[0];
  for (auto [s, k] : n)
    if (k > n[best] || (k == n[best] && s < best)) best = s;
  return best;
}

TokenSequence reversed(TokenSequence c) {
  std::reverse(c.begin(), c.end());
  return c;
}

}  // namespace

TEST(Vocab, SpecialsAreOutsideContentRange) {
  EXPECT_EQ(vocab::kSize, 36u);
  for (auto s : {vocab::kUnd, vocab::kGen, vocab::kSep, vocab::kPad}) EXPECT_GE(s, vocab::kSymbols);
  EXPECT_THROW(majority_symbol({1, vocab::kSep}), IndexError);
}

TEST(Understanding, HandExamples) {
  EXPECT_EQ(understanding_from_content({3, 3, 7}).target, (TokenSequence{3}));
  EXPECT_EQ(understanding_from_content({5, 5, 5, 5, 1}).target, (TokenSequence{5}));
  EXPECT_EQ(majority_symbol({9, 2, 9, 2}), 2u);  // tie goes low
  const auto s = understanding_from_content({3, 3, 7});
  EXPECT_EQ(s.input, (TokenSequence{vocab::kUnd, 3, 3, 7, vocab::kSep}));
  EXPECT_EQ(s.mask, (std::vector<std::uint8_t>{1}));
  EXPECT_EQ(s.g_star, 1);
}

TEST(Understanding, GeneratedSamplesHaveStrictMajorityAndCorrectLabel) {
  Rng rng = make_rng(1);
  for (int i = 0; i < 10000; ++i) {
    const std::size_t len = 3 + uniform_index(rng, 12);
    const auto s = make_understanding_sample(rng, len);
    const auto c = s.content();
    ASSERT_EQ(c.size(), len);
    ASSERT_EQ(s.target[0], count_majority(c));
    const auto n = static_cast<std::size_t>(std::count(c.begin(), c.end(), s.target[0]));
    ASSERT_GE(n, (len + 1) / 2 + 1);
    ASSERT_EQ(s.input.front(), vocab::kUnd);
    ASSERT_EQ(s.input.back(), vocab::kSep);
  }
  EXPECT_THROW(make_understanding_sample(rng, 2), ConfigError);
}

TEST(Generation, HandExamples) {
  const auto s = generation_from_content({1, 2, 3});
  EXPECT_EQ(s.target, (TokenSequence{3, 2, 1}));
  EXPECT_EQ(s.mask, (std::vector<std::uint8_t>{1, 1, 1}));
  EXPECT_EQ(s.g_star, 2);
  EXPECT_EQ(generation_from_content({4, 9, 4}).target, (TokenSequence{4, 9, 4}));
  const auto m = generation_from_content({0, 31}, true);
  EXPECT_EQ(m.regression, (std::vector<double>{1.0, 0.0}));
}

TEST(Generation, GeneratedSamplesMatchReversalOracle) {
  Rng rng = make_rng(2);
  for (int i = 0; i < 10000; ++i) {
    const auto s = make_generation_sample(rng, 2 + uniform_index(rng, 12));
    ASSERT_EQ(s.target, reversed(s.content()));
    ASSERT_EQ(s.mask.size(), s.target.size());
    ASSERT_EQ(s.input.front(), vocab::kGen);
  }
  EXPECT_THROW(make_generation_sample(rng, 1), ConfigError);
}

TEST(Samples, TeacherForcedLayout) {
  const auto s = generation_from_content({7, 8});
  EXPECT_EQ(s.model_input(), (TokenSequence{vocab::kGen, 7, 8, vocab::kSep, 8}));
  EXPECT_EQ(s.answer_offset(), 3u);
}

TEST(Samples, SeededStreamIsReproducible) {
  TaskConfig cfg;
  for (std::uint64_t i = 0; i < 50; ++i) {
    EXPECT_EQ(sample_at(5, i, Task::generation, cfg).input, sample_at(5, i, Task::generation, cfg).input);
    const auto s = sample_at(5, i, Task::understanding, cfg);
    EXPECT_GE(s.content().size(), cfg.min_len);
    EXPECT_LE(s.content().size(), cfg.max_len);
  }
  EXPECT_NE(sample_at(5, 0, Task::generation, cfg).input, sample_at(6, 0, Task::generation, cfg).input);
}

TEST(Dataset, SplitIsDisjointAndOrdered) {
  TaskConfig cfg = testutil::tiny_task();
  const auto split = make_split(3, cfg);
  EXPECT_EQ(split.train.size(), 2 * cfg.train_per_task);
  EXPECT_EQ(split.train.count(Task::understanding), cfg.train_per_task);
  EXPECT_EQ(split.train.samples.front().g_star, 1);
  EXPECT_EQ(split.train.samples.back().g_star, 2);
  std::set<TokenSequence> train;
  for (const auto& s : split.train.samples) train.insert(s.input);
  std::size_t shared = 0;
  for (const auto& s : split.val.samples) shared += train.count(s.input);
  EXPECT_LE(shared, 2u);  // only chance collisions of short prompts
}

TEST(MixedBatch, DegenerateMixes) {
  TaskConfig cfg;
  cfg.und_probability = 1.0;
  Rng rng = make_rng(4);
  for (int g : make_mixed_batch(rng, 64, cfg).g_star) EXPECT_EQ(g, 1);
  cfg.und_probability = 0.0;
  for (int g : make_mixed_batch(rng, 64, cfg).g_star) EXPECT_EQ(g, 2);
  EXPECT_THROW(make_mixed_batch(rng, 0, cfg), ConfigError);
}

TEST(MixedBatch, HalfMixWithinThreeSigma) {
  Rng rng = make_rng(5);
  std::size_t und = 0;
  for (int b = 0; b < 100; ++b)
    for (int g : make_mixed_batch(rng, 100, TaskConfig{}).g_star) und += g == 1;
  EXPECT_GE(und, 4700u);
  EXPECT_LE(und, 5300u);
}

TEST(MixedBatch, PaddingIsMaskedEverywhere) {
  Rng rng = make_rng(6);
  const auto b = make_mixed_batch(rng, 32, TaskConfig{});
  for (std::size_t i = 0; i < b.size(); ++i) {
    ASSERT_EQ(b.tokens[i].size(), b.mask[i].size());
    for (std::size_t j = 0; j < b.tokens[i].size(); ++j) {
      if (j >= b.lengths[i]) {
        EXPECT_EQ(b.tokens[i][j], vocab::kPad);
        EXPECT_EQ(b.mask[i][j], 0.0);
      }
      if (b.targets[i][j] == vocab::kPad) {
        EXPECT_EQ(b.mask[i][j], 0.0);
      }
    }
  }
}

TEST(MixedBatch, MaskSelectsOnlyAnswerPositions) {
  const auto u = understanding_from_content({1, 1, 2, 1});
  const auto b = collate(std::vector<TaskSample>{u, generation_from_content({3, 4, 5, 6, 7})});
  EXPECT_EQ(b.mask[0], (std::vector<double>{0, 0, 0, 0, 0, 1, 0, 0, 0, 0, 0}));
  EXPECT_EQ(b.targets[0][5], 1u);
  EXPECT_EQ(b.targets[1][6], 7u);
  EXPECT_EQ(b.targets[1][10], 3u);
  EXPECT_EQ(b.lengths, (std::vector<std::size_t>{6, 11}));
}

TEST(Jsonl, RoundTripAndFieldNames) {
  Dataset d;
  d.samples = {understanding_from_content({2, 2, 3}), generation_from_content({4, 5}, true)};
  std::stringstream ss;
  write_jsonl(d, ss);
  const std::string text = ss.str();
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 2);
  EXPECT_NE(text.find("\"tokens\":[32,2,2,3,34]"), std::string::npos);
  EXPECT_NE(text.find("\"g_star\":2"), std::string::npos);
  const Dataset back = read_jsonl(ss);
  ASSERT_EQ(back.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back.samples[i].input, d.samples[i].input);
    EXPECT_EQ(back.samples[i].target, d.samples[i].target);
    EXPECT_EQ(back.samples[i].mask, d.samples[i].mask);
    EXPECT_EQ(back.samples[i].g_star, d.samples[i].g_star);
    EXPECT_EQ(back.samples[i].regression, d.samples[i].regression);
  }
}

TEST(Jsonl, RejectsMalformedRecords) {
  std::stringstream bad(R"({"tokens":[32,1,34],"target":[1],"mask":[1,1],"g_star":1})");
  EXPECT_THROW(read_jsonl(bad), DimensionError);
  std::stringstream badg(R"({"tokens":[32,1,34],"target":[1],"mask":[1],"g_star":3})");
  EXPECT_THROW(read_jsonl(badg), IndexError);
  std::stringstream missing(R"({"tokens":[32,1,34],"mask":[1],"g_star":1})");
  EXPECT_THROW(read_jsonl(missing), nlohmann::json::exception);
}

TEST(EvalAccuracy, ChanceLevelForUntrainedModels) {
  // One random model is biased towards a few tokens, so average over many:
  // a uniformly random favourite token hits the majority with chance 1/36.
  ModelConfig mc = testutil::tiny_model();
  mc.max_len = 25;
  const Dataset d = make_dataset(8, 2000, TaskConfig{}).only(Task::understanding);
  std::vector<double> acc;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    Rng rng = make_rng(seed, 77);
    acc.push_back(eval_task_accuracy(ModelParams::init_dense(mc, rng), d).und_accuracy);
  }
  double mean = 0.0, var = 0.0;
  for (double a : acc) mean += a / acc.size();
  for (double a : acc) var += (a - mean) * (a - mean) / (acc.size() - 1);
  EXPECT_NEAR(mean, 1.0 / 36.0, 3.0 * std::sqrt(var / acc.size()) + 0.002) << "sd " << std::sqrt(var);
}

TEST(EvalAccuracy, EchoAndPerfectPredictors) {
  const Dataset d = make_dataset(9, 300, TaskConfig{});
  // Perfect: predict the teacher-forced next token everywhere.
  const Predictor perfect = [&](const std::vector<TokenSequence>& seqs) {
    std::vector<TokenSequence> out;
    for (const auto& s : seqs) {
      const auto it = std::find_if(d.samples.begin(), d.samples.end(), [&](const TaskSample& t) { return t.model_input() == s; });
      TokenSequence p(s.size(), 0);
      for (std::size_t j = 0; j < it->target.size(); ++j) p[it->answer_offset() + j] = it->target[j];
      out.push_back(p);
    }
    return out;
  };
  const auto pm = eval_task_accuracy(perfect, d);
  EXPECT_EQ(pm.und_accuracy, 1.0);
  EXPECT_EQ(pm.gen_accuracy, 1.0);
  EXPECT_EQ(pm.token_accuracy, 1.0);

  // Echo: answer position j repeats content symbol j (copies instead of reversing).
  const Predictor echo = [](const std::vector<TokenSequence>& seqs) {
    std::vector<TokenSequence> out;
    for (const auto& s : seqs) {
      const auto sep = static_cast<std::size_t>(std::find(s.begin(), s.end(), vocab::kSep) - s.begin());
      TokenSequence p(s.size(), 0);
      for (std::size_t j = 0; sep + j < s.size(); ++j) p[sep + j] = s[1 + j];
      out.push_back(p);
    }
    return out;
  };
  std::size_t palindromes = 0;
  for (const auto& s : d.samples)
    if (s.task() == Task::generation && s.target == s.content()) ++palindromes;
  EXPECT_DOUBLE_EQ(eval_task_accuracy(echo, d).gen_accuracy, palindromes / 300.0);
  EXPECT_THROW(eval_task_accuracy(echo, Dataset{}), EmptyReductionError);
}
