#pragma once

#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "utamoe.hpp"

namespace testutil {

inline utamoe::Tensor random_tensor(utamoe::Shape shape, std::uint64_t seed, bool grad = true, double std = 1.0) {
  utamoe::Rng rng = utamoe::make_rng(seed, 0x7E57);
  return utamoe::gaussian_tensor(std::move(shape), std, rng, grad);
}

inline void expect_all_near(std::span<const double> a, std::span<const double> b, double tol) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], tol) << "at " << i;
}

inline void expect_all_near(const utamoe::Tensor& a, const utamoe::Tensor& b, double tol) {
  ASSERT_EQ(a.shape(), b.shape());
  expect_all_near(a.data(), b.data(), tol);
}

inline double max_abs_diff(const utamoe::Tensor& a, const utamoe::Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Small model config used across tests.
inline utamoe::ModelConfig tiny_model(std::size_t layers = 2) {
  utamoe::ModelConfig m;
  m.d_model = 8;
  m.n_heads = 2;
  m.d_ff = 12;
  m.n_layers = layers;
  m.max_len = 17;
  return m;
}

inline utamoe::TaskConfig tiny_task() {
  utamoe::TaskConfig t;
  t.min_len = 3;
  t.max_len = 8;
  t.train_per_task = 32;
  t.val_per_task = 16;
  return t;
}

}  // namespace testutil
