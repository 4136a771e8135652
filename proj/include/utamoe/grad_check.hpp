#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "utamoe/tensor.hpp"

namespace utamoe {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  std::size_t coordinates = 0;
};

// Compares the tape gradient of a scalar function with central differences.
// `inputs` must be leaf tensors the function reads; their data is perturbed in
// place and restored. Error per coordinate is |analytic - numeric| / max(1, |numeric|).
inline GradCheckResult grad_check_detailed(const std::function<Tensor()>& f, std::vector<Tensor> inputs,
                                           double eps = 1e-5) {
  if (eps < 1e-7 || eps > 1e-3) throw ContractError("grad_check: eps must lie in [1e-7, 1e-3]");
  for (auto& in : inputs) {
    in.set_requires_grad(true);
    in.zero_grad();
  }
  {
    Tensor loss = f();
    backward(loss);
  }
  GradCheckResult result;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    auto& in = inputs[t];
    const std::vector<double> analytic(in.grad().begin(), in.grad().end());
    auto values = in.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      double plus, minus;
      {
        NoGradGuard guard;
        values[i] = saved + eps;
        plus = f().item();
        values[i] = saved - eps;
        minus = f().item();
      }
      values[i] = saved;
      const double numeric = (plus - minus) / (2.0 * eps);
      const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric));
      ++result.coordinates;
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_input = t;
        result.worst_index = i;
      }
    }
  }
  return result;
}

inline double grad_check(const std::function<Tensor()>& f, std::vector<Tensor> inputs, double eps = 1e-5) {
  return grad_check_detailed(f, std::move(inputs), eps).max_rel_error;
}

}  // namespace utamoe
