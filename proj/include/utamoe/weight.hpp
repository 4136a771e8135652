#pragma once

#include <optional>

#include "utamoe/tensor.hpp"

namespace utamoe {

// Low-rank delta on a frozen base: effective = base + scale * B * A.
struct LoraAdapter {
  Tensor base;  // m×n, frozen
  Tensor a;     // r×n
  Tensor b;     // m×r, zero at attach time
  std::size_t rank = 0;
  double scale = 1.0;

  Tensor effective() const { return add(base, utamoe::scale(matmul(b, a), scale)); }
};

// Dense tensor with base + scale * B * A folded in; detached from any tape.
inline Tensor merge_lora(const LoraAdapter& adapter) {
  NoGradGuard guard;
  if (adapter.scale == 0.0) return adapter.base.detach();
  return adapter.effective().detach();
}

// A weight matrix slot that may carry a LoRA adapter.
struct Weight {
  Tensor value;
  std::optional<LoraAdapter> lora;

  Weight() = default;
  explicit Weight(Tensor t) : value(std::move(t)) {}

  Tensor effective() const { return lora ? lora->effective() : value; }
  const Shape& shape() const { return value.shape(); }
  Weight clone() const {
    Weight w(value.clone());
    if (lora) {
      w.lora = LoraAdapter{w.value, lora->a.clone(), lora->b.clone(), lora->rank, lora->scale};
    }
    return w;
  }
};

}  // namespace utamoe
