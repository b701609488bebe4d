#pragma once

#include "pami/image.hpp"
#include "pami/protolearn.hpp"
#include "pami/tensor.hpp"

namespace pami {

inline constexpr double kDefaultLambda = 0.7;
inline constexpr double kBceEps = 1e-7;

struct APConfig {
  double lambda = kDefaultLambda;
  double alpha = kDefaultAlpha;

  void validate() const;
};

// Full-resolution soft masks [H×W].
template <typename T>
struct PredictionPair {
  ad::Tensor<T> support;  // from the row-mean of the support prototypes
  ad::Tensor<T> query;    // from the query prototype
  ad::Tensor<T> blended;  // lambda·support + (1 - lambda)·query
};

// Both branches score the query feature map; the threshold is recomputed
// from it with the shared threshold head. Masks are upsampled to
// height×width before blending.
template <typename T>
PredictionPair<T> assembled_prediction(const ad::Tensor<T>& fm_q, const ad::Tensor<T>& ps,
                                       const ad::Tensor<T>& pq, const ThresholdParams<T>& threshold,
                                       const APConfig& cfg, int height, int width);

template <typename T>
ad::Tensor<T> bce_loss(const ad::Tensor<T>& pred, const Mask& target);

// pixel = 1 iff value >= t
Mask binarize(std::span<const float> soft, int height, int width, double t = 0.5);
Mask binarize(const Image2D& soft, double t = 0.5);

// 2|a∩b| / (|a| + |b|), and 1 when both are empty.
double dice_score(const Mask& a, const Mask& b);

}  // namespace pami
