#pragma once

// Regional prototype learning: masked average pooling, the coarse query
// prototype branch and per-region support prototypes.

#include <string>

#include "pami/partition.hpp"
#include "pami/rng.hpp"
#include "pami/tensor.hpp"

namespace pami {

inline constexpr double kDefaultAlpha = 20.0;
inline constexpr double kCosineEps = 1e-8;
inline constexpr double kVanishingMask = 1e-12;

// Two fully-connected layers C -> C/2 -> 1 with a ReLU in between.
template <typename T>
struct ThresholdParams {
  ad::Tensor<T> w1, b1, w2, b2;

  static ThresholdParams init(int channels, Rng& rng);

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".w1", w1);
    f(prefix + ".b1", b1);
    f(prefix + ".w2", w2);
    f(prefix + ".b2", b2);
  }
};

// Per-channel weighted mean of fm[C×H×W] under mask[H×W] -> [1×C].
// Throws "empty-mask" when the weights sum to zero.
template <typename T>
ad::Tensor<T> masked_average_pool(const ad::Tensor<T>& fm, const ad::Tensor<T>& mask);

// -alpha·cos(fm[:,i], p) -> [h×w]. Zero-norm pixels score 0. Throws
// "degenerate-prototype" for a zero prototype.
template <typename T>
ad::Tensor<T> negative_cosine_map(const ad::Tensor<T>& fm, const ad::Tensor<T>& p, T alpha);

// tau = FC2(relu(FC1(spatial mean of fm))), a one-element tensor.
template <typename T>
ad::Tensor<T> learnable_threshold(const ad::Tensor<T>& fm, const ThresholdParams<T>& params);

template <typename T>
struct QpgResult {
  ad::Tensor<T> mask;       // [h×w] soft mask in [0,1]
  ad::Tensor<T> prototype;  // [1×C]
};

// mask = 1 - sigmoid(S(fm_q, p) - tau) at feature resolution, prototype =
// soft-masked average of fm_q.
template <typename T>
QpgResult<T> qpg(const ad::Tensor<T>& fm_q, const ad::Tensor<T>& p,
                 const ThresholdParams<T>& params, T alpha);

// One prototype per region, rows in region order -> [N×C]. fm_s must
// already be at mask resolution.
template <typename T>
ad::Tensor<T> regional_prototypes(const ad::Tensor<T>& fm_s, const RegionMaskSet& regions);

// Adds the coarse query prototype to every regional prototype.
template <typename T>
ad::Tensor<T> enhance_prototypes(const ad::Tensor<T>& ps, const ad::Tensor<T>& pq);

}  // namespace pami
