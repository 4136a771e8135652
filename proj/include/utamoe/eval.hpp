#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "utamoe/synth_tasks.hpp"
#include "utamoe/transformer.hpp"

namespace utamoe {

struct TaskMetrics {
  static constexpr double kNone = std::numeric_limits<double>::quiet_NaN();

  double und_accuracy = kNone;        // majority token correct
  double gen_accuracy = kNone;        // full reversal exact
  double und_token_accuracy = kNone;
  double gen_token_accuracy = kNone;
  double token_accuracy = kNone;      // over all answer positions
  std::size_t und_count = 0;
  std::size_t gen_count = 0;

  // Mean of the per-task accuracies that exist.
  double joint() const {
    if (std::isnan(und_accuracy)) return gen_accuracy;
    if (std::isnan(gen_accuracy)) return und_accuracy;
    return 0.5 * (und_accuracy + gen_accuracy);
  }
  double weakest() const {
    if (std::isnan(und_accuracy)) return gen_accuracy;
    if (std::isnan(gen_accuracy)) return und_accuracy;
    return std::min(und_accuracy, gen_accuracy);
  }
};

// Greedy next-token prediction at every position of each (teacher-forced) sequence.
using Predictor = std::function<std::vector<TokenSequence>(const std::vector<TokenSequence>&)>;

inline Predictor model_predictor(const ModelParams& model) {
  return [&model](const std::vector<TokenSequence>& seqs) {
    NoGradGuard guard;
    const auto res = forward(model, seqs);
    const auto preds = argmax_rows(res.logits);
    std::vector<TokenSequence> out;
    for (std::size_t s = 0; s < seqs.size(); ++s)
      out.emplace_back(preds.begin() + static_cast<std::ptrdiff_t>(res.offsets[s]),
                       preds.begin() + static_cast<std::ptrdiff_t>(res.offsets[s] + res.lengths[s]));
    return out;
  };
}

// Scores each sample from one teacher-forced pass. Exact match under teacher
// forcing equals exact match under free-running greedy decoding: both agree
// until the first wrong argmax, and a wrong argmax fails either way.
inline TaskMetrics eval_task_accuracy(const Predictor& predict, const Dataset& data, std::size_t batch = 64) {
  if (data.samples.empty()) throw EmptyReductionError("eval_task_accuracy: empty dataset");
  std::size_t und_ok = 0, gen_ok = 0, und_n = 0, gen_n = 0;
  std::size_t und_tok_ok = 0, gen_tok_ok = 0, und_tok = 0, gen_tok = 0;
  for (std::size_t start = 0; start < data.samples.size(); start += batch) {
    const std::size_t end = std::min(data.samples.size(), start + batch);
    std::vector<TokenSequence> seqs;
    for (std::size_t i = start; i < end; ++i) seqs.push_back(data.samples[i].model_input());
    const auto preds = predict(seqs);
    for (std::size_t i = start; i < end; ++i) {
      const auto& s = data.samples[i];
      const auto& p = preds[i - start];
      std::size_t ok = 0;
      for (std::size_t j = 0; j < s.target.size(); ++j) ok += p[s.answer_offset() + j] == s.target[j];
      const bool exact = ok == s.target.size();
      if (s.task() == Task::understanding) {
        ++und_n;
        und_ok += exact;
        und_tok_ok += ok;
        und_tok += s.target.size();
      } else {
        ++gen_n;
        gen_ok += exact;
        gen_tok_ok += ok;
        gen_tok += s.target.size();
      }
    }
  }
  TaskMetrics m;
  m.und_count = und_n;
  m.gen_count = gen_n;
  const auto frac = [](std::size_t a, std::size_t b) { return static_cast<double>(a) / static_cast<double>(b); };
  if (und_n) {
    m.und_accuracy = frac(und_ok, und_n);
    m.und_token_accuracy = frac(und_tok_ok, und_tok);
  }
  if (gen_n) {
    m.gen_accuracy = frac(gen_ok, gen_n);
    m.gen_token_accuracy = frac(gen_tok_ok, gen_tok);
  }
  m.token_accuracy = frac(und_tok_ok + gen_tok_ok, und_tok + gen_tok);
  return m;
}

inline TaskMetrics eval_task_accuracy(const ModelParams& model, const Dataset& data) {
  return eval_task_accuracy(model_predictor(model), data);
}

}  // namespace utamoe
