#pragma once

// Synthetic dual-task benchmark.
//
// Understanding: [UND] c_1..c_L [SEP] -> the majority symbol (order-invariant
// abstraction). Generation: [GEN] c_1..c_L [SEP] -> c_L..c_1 (order-sensitive
// detail preservation). Every sample is a pure function of (seed, index).

#include <algorithm>
#include <array>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "utamoe/rng.hpp"
#include "utamoe/router.hpp"
#include "utamoe/transformer.hpp"

namespace utamoe {

namespace vocab {
inline constexpr std::size_t kSymbols = 32;
inline constexpr std::size_t kUnd = 32;
inline constexpr std::size_t kGen = 33;
inline constexpr std::size_t kSep = 34;
inline constexpr std::size_t kPad = 35;
inline constexpr std::size_t kSize = 36;
}  // namespace vocab

struct TaskSample {
  TokenSequence input;               // prompt, ends with SEP
  TokenSequence target;              // answer tokens
  std::vector<std::uint8_t> mask;    // per answer position
  int g_star = 1;
  std::vector<double> regression;    // MSE mode: normalised answer values

  Task task() const { return static_cast<Task>(g_star); }
  TokenSequence content() const { return TokenSequence(input.begin() + 1, input.end() - 1); }

  // Teacher-forced model input: prompt followed by all but the last answer token.
  TokenSequence model_input() const {
    TokenSequence seq = input;
    seq.insert(seq.end(), target.begin(), target.end() - 1);
    return seq;
  }
  // Row of the model input whose prediction is answer token 0.
  std::size_t answer_offset() const { return input.size() - 1; }
};

// Most frequent symbol; ties go to the lowest symbol.
inline std::size_t majority_symbol(const TokenSequence& content) {
  if (content.empty()) throw DimensionError("majority_symbol: empty content");
  std::array<std::size_t, vocab::kSymbols> counts{};
  for (auto c : content) {
    if (c >= vocab::kSymbols) throw IndexError("majority_symbol: " + std::to_string(c) + " is not a content symbol");
    ++counts[c];
  }
  std::size_t best = 0;
  for (std::size_t s = 1; s < counts.size(); ++s)
    if (counts[s] > counts[best]) best = s;
  return best;
}

inline double symbol_value(std::size_t symbol) {
  return static_cast<double>(symbol) / static_cast<double>(vocab::kSymbols - 1);
}

inline TaskSample understanding_from_content(const TokenSequence& content) {
  TaskSample s;
  s.input.push_back(vocab::kUnd);
  s.input.insert(s.input.end(), content.begin(), content.end());
  s.input.push_back(vocab::kSep);
  s.target = {majority_symbol(content)};
  s.mask = {1};
  s.g_star = static_cast<int>(Task::understanding);
  return s;
}

inline TaskSample generation_from_content(const TokenSequence& content, bool mse_mode = false) {
  if (content.empty()) throw DimensionError("generation sample needs content");
  TaskSample s;
  s.input.push_back(vocab::kGen);
  s.input.insert(s.input.end(), content.begin(), content.end());
  s.input.push_back(vocab::kSep);
  s.target.assign(content.rbegin(), content.rend());
  s.mask.assign(s.target.size(), 1);
  s.g_star = static_cast<int>(Task::generation);
  if (mse_mode)
    for (auto c : s.target) s.regression.push_back(symbol_value(c));
  return s;
}

// L content symbols with one symbol repeated at least ceil(L/2)+1 times.
inline TaskSample make_understanding_sample(Rng& rng, std::size_t length) {
  if (length < 3) throw ConfigError("understanding sample needs L >= 3, got " + std::to_string(length));
  const std::size_t major = uniform_index(rng, vocab::kSymbols);
  const std::size_t min_count = (length + 1) / 2 + 1;
  const std::size_t count = min_count + uniform_index(rng, length - min_count + 1);
  TokenSequence content(length, major);
  for (std::size_t i = count; i < length; ++i) {
    std::size_t other = uniform_index(rng, vocab::kSymbols - 1);
    if (other >= major) ++other;
    content[i] = other;
  }
  for (std::size_t i = length - 1; i > 0; --i) std::swap(content[i], content[uniform_index(rng, i + 1)]);
  return understanding_from_content(content);
}

inline TaskSample make_generation_sample(Rng& rng, std::size_t length, bool mse_mode = false) {
  if (length < 2) throw ConfigError("generation sample needs L >= 2, got " + std::to_string(length));
  TokenSequence content(length);
  for (auto& c : content) c = uniform_index(rng, vocab::kSymbols);
  return generation_from_content(content, mse_mode);
}

struct TaskConfig {
  std::size_t min_len = 4;
  std::size_t max_len = 12;
  double und_probability = 0.5;
  bool mse_mode = false;
  std::size_t train_per_task = 2048;
  std::size_t val_per_task = 512;

  void validate() const {
    if (min_len < 3 || max_len < min_len) throw ConfigError("task: need 3 <= min_len <= max_len");
    if (und_probability < 0.0 || und_probability > 1.0) throw ConfigError("task: und_probability outside [0,1]");
    if (train_per_task == 0 || val_per_task == 0) throw ConfigError("task: dataset sizes must be positive");
  }
  // Longest teacher-forced model input (generation: 2L + 1).
  std::size_t longest_input() const { return 2 * max_len + 1; }
};

inline TaskSample sample_at(std::uint64_t seed, std::uint64_t index, Task task, const TaskConfig& cfg) {
  Rng rng = make_rng(seed, index * 2 + (task == Task::generation ? 1 : 0));
  const std::size_t length = cfg.min_len + uniform_index(rng, cfg.max_len - cfg.min_len + 1);
  return task == Task::understanding ? make_understanding_sample(rng, length)
                                     : make_generation_sample(rng, length, cfg.mse_mode);
}

struct Dataset {
  std::vector<TaskSample> samples;

  std::size_t size() const { return samples.size(); }
  std::size_t count(Task t) const {
    return static_cast<std::size_t>(std::count_if(samples.begin(), samples.end(),
                                                  [t](const TaskSample& s) { return s.task() == t; }));
  }
  Dataset only(Task t) const {
    Dataset d;
    for (const auto& s : samples)
      if (s.task() == t) d.samples.push_back(s);
    return d;
  }
};

// n samples per task, understanding first.
inline Dataset make_dataset(std::uint64_t seed, std::size_t per_task, const TaskConfig& cfg) {
  cfg.validate();
  Dataset d;
  for (Task t : {Task::understanding, Task::generation})
    for (std::size_t i = 0; i < per_task; ++i) d.samples.push_back(sample_at(seed, i, t, cfg));
  return d;
}

struct DatasetSplit {
  Dataset train;
  Dataset val;
};

// Train and validation come from disjoint seed streams.
inline DatasetSplit make_split(std::uint64_t seed, const TaskConfig& cfg) {
  return {make_dataset(mix_seed(seed, 0x7261696E), cfg.train_per_task, cfg),
          make_dataset(mix_seed(seed, 0x76616C), cfg.val_per_task, cfg)};
}

// Padded, teacher-forced batch. Row i of `tokens` predicts row i of `targets`;
// mask is 1 only at answer positions, so PAD never contributes.
struct TaskBatch {
  std::vector<TokenSequence> tokens;
  std::vector<TokenSequence> targets;
  std::vector<std::vector<double>> mask;
  std::vector<std::vector<double>> regression;  // MSE mode targets, 0 where masked
  std::vector<int> g_star;
  std::vector<std::size_t> lengths;

  std::size_t size() const { return tokens.size(); }

  std::vector<TokenSequence> sequences() const {
    std::vector<TokenSequence> out;
    for (std::size_t i = 0; i < tokens.size(); ++i)
      out.emplace_back(tokens[i].begin(), tokens[i].begin() + static_cast<std::ptrdiff_t>(lengths[i]));
    return out;
  }
};

inline TaskBatch collate(const std::vector<const TaskSample*>& samples) {
  TaskBatch b;
  std::size_t width = 0;
  for (const auto* s : samples) width = std::max(width, s->input.size() + s->target.size() - 1);
  for (const auto* s : samples) {
    TokenSequence seq = s->model_input();
    TokenSequence tgt(width, vocab::kPad);
    std::vector<double> mask(width, 0.0), reg(width, 0.0);
    const std::size_t off = s->answer_offset();
    for (std::size_t j = 0; j < s->target.size(); ++j) {
      tgt[off + j] = s->target[j];
      mask[off + j] = s->mask[j];
      if (!s->regression.empty()) reg[off + j] = s->regression[j];
    }
    for (std::size_t j = 0; j < off; ++j) tgt[j] = seq[j + 1];
    b.lengths.push_back(seq.size());
    seq.resize(width, vocab::kPad);
    b.tokens.push_back(std::move(seq));
    b.targets.push_back(std::move(tgt));
    b.mask.push_back(std::move(mask));
    b.regression.push_back(std::move(reg));
    b.g_star.push_back(s->g_star);
  }
  return b;
}

inline TaskBatch collate(const std::vector<TaskSample>& samples) {
  std::vector<const TaskSample*> ptrs;
  for (const auto& s : samples) ptrs.push_back(&s);
  return collate(ptrs);
}

// Each sample independently understanding with probability und_probability.
inline TaskBatch make_mixed_batch(Rng& rng, std::size_t batch_size, const TaskConfig& cfg) {
  if (batch_size == 0) throw ConfigError("make_mixed_batch: batch size must be >= 1");
  cfg.validate();
  std::vector<TaskSample> samples;
  for (std::size_t i = 0; i < batch_size; ++i) {
    const bool und = uniform_unit(rng) < cfg.und_probability;
    const std::size_t length = cfg.min_len + uniform_index(rng, cfg.max_len - cfg.min_len + 1);
    samples.push_back(und ? make_understanding_sample(rng, length) : make_generation_sample(rng, length, cfg.mse_mode));
  }
  return collate(samples);
}

// ---------------------------------------------------------------------------
// Line-delimited JSON exchange
// ---------------------------------------------------------------------------

inline nlohmann::json sample_to_json(const TaskSample& s) {
  nlohmann::json j;
  j["tokens"] = s.input;
  j["target"] = s.target;
  j["mask"] = s.mask;
  j["g_star"] = s.g_star;
  if (!s.regression.empty()) j["regression"] = s.regression;
  return j;
}

inline TaskSample sample_from_json(const nlohmann::json& j) {
  TaskSample s;
  s.input = j.at("tokens").get<TokenSequence>();
  s.target = j.at("target").get<TokenSequence>();
  s.mask = j.at("mask").get<std::vector<std::uint8_t>>();
  s.g_star = j.at("g_star").get<int>();
  if (j.contains("regression")) s.regression = j.at("regression").get<std::vector<double>>();
  group_index(s.g_star);
  if (s.mask.size() != s.target.size()) throw DimensionError("sample: mask and target lengths differ");
  if (s.input.size() < 2 || s.target.empty()) throw DimensionError("sample: empty prompt or answer");
  return s;
}

inline void write_jsonl(const Dataset& d, std::ostream& os) {
  for (const auto& s : d.samples) os << sample_to_json(s).dump() << '\n';
}

inline Dataset read_jsonl(std::istream& is) {
  Dataset d;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    d.samples.push_back(sample_from_json(nlohmann::json::parse(line)));
  }
  return d;
}

}  // namespace utamoe
