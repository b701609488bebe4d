#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <vector>

#include "pami/image.hpp"
#include "pami/rng.hpp"
#include "pami/tensor.hpp"

namespace pami {
namespace fs = std::filesystem;
}

namespace pami::test {

using TensorD = ad::Tensor<double>;

inline TensorD random_leaf(ad::Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(ad::numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return TensorD(std::move(shape), std::move(v), true);
}

inline TensorD random_const(ad::Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(ad::numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return TensorD(std::move(shape), std::move(v), false);
}

// Largest relative error between backward() gradients and central
// differences of f over every element of every leaf. The relative error
// uses max(|a|, |n|, floor) as the denominator, so components below the
// floor are judged on absolute error instead. Central differences of a loss
// near 20 at step 1e-5 carry about 2e-10 of round-off, which swamps
// structurally zero gradients (biases ahead of a normalization, key biases
// under a row softmax); deep compositions therefore pass kCompositeFloor.
inline constexpr double kCompositeFloor = 1e-4;

inline double grad_check(const std::vector<TensorD>& leaves, const std::function<TensorD()>& f,
                         double step = 1e-5, double floor = 1e-6, std::size_t max_per_leaf = 0) {
  for (auto leaf : leaves) leaf.zero_grad();
  f().backward();
  std::vector<std::vector<double>> analytic;
  for (auto leaf : leaves) analytic.emplace_back(leaf.grad_mut().begin(), leaf.grad_mut().end());
  double worst = 0;
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    TensorD leaf = leaves[l];
    auto v = leaf.values_mut();
    const std::size_t stride = max_per_leaf && v.size() > max_per_leaf ? v.size() / max_per_leaf : 1;
    for (std::size_t i = 0; i < v.size(); i += stride) {
      const double keep = v[i];
      v[i] = keep + step;
      const double up = f().item();
      v[i] = keep - step;
      const double down = f().item();
      v[i] = keep;
      const double numeric = (up - down) / (2 * step);
      const double a = analytic[l][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), floor});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

// Weighted sum with fixed random weights, so every output element matters.
inline TensorD probe_sum(const TensorD& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  std::vector<double> w(y.numel());
  for (auto& x : w) x = rng.uniform(0.5, 1.5);
  return ad::sum_all(ad::mul(y, TensorD(y.shape(), std::move(w))));
}

inline Mask rect_mask(int h, int w, int r0, int c0, int r1, int c1) {
  Mask m(h, w, 0);
  for (int r = r0; r <= r1; ++r)
    for (int c = c0; c <= c1; ++c) m(r, c) = 1;
  return m;
}

inline Mask random_blob_mask(int h, int w, Rng& rng) {
  Mask m(h, w, 0);
  const int blobs = 1 + static_cast<int>(rng.below(3));
  for (int b = 0; b < blobs; ++b) {
    const double cr = rng.uniform(0, h), cc = rng.uniform(0, w);
    const double rr = rng.uniform(1.5, h / 3.0), rc = rng.uniform(1.5, w / 3.0);
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c)
        if ((r - cr) * (r - cr) / (rr * rr) + (c - cc) * (c - cc) / (rc * rc) <= 1.0) m(r, c) = 1;
  }
  if (count_nonzero(m) == 0) m(static_cast<int>(rng.below(h)), static_cast<int>(rng.below(w))) = 1;
  return m;
}

inline Image2D random_image(int h, int w, Rng& rng) {
  Image2D img(h, w);
  for (auto& v : img.data) v = static_cast<float>(rng.uniform());
  return img;
}

}  // namespace pami::test
