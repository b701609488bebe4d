#pragma once

#include <cmath>
#include <vector>

#include "pami/rng.hpp"
#include "pami/tensor.hpp"

namespace pami {

// Trainable leaf drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <typename T>
ad::Tensor<T> uniform_param(ad::Shape shape, int fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<T> v(ad::numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  return ad::Tensor<T>(std::move(shape), std::move(v), true);
}

template <typename T>
ad::Tensor<T> constant_param(ad::Shape shape, T value) {
  std::vector<T> v(ad::numel(shape), value);
  return ad::Tensor<T>(std::move(shape), std::move(v), true);
}

// Same values in another precision, still trainable.
template <typename U, typename T>
ad::Tensor<U> cast_param(const ad::Tensor<T>& t) {
  std::vector<U> v(t.values().begin(), t.values().end());
  return ad::Tensor<U>(t.shape(), std::move(v), t.requires_grad());
}

}  // namespace pami
