#include "pami/protolearn.hpp"

#include "pami/error.hpp"
#include "pami/init.hpp"

namespace pami {

template <typename T>
ThresholdParams<T> ThresholdParams<T>::init(int channels, Rng& rng) {
  const int hidden = std::max(1, channels / 2);
  ThresholdParams p;
  p.w1 = uniform_param<T>({channels, hidden}, channels, rng);
  p.b1 = uniform_param<T>({1, hidden}, channels, rng);
  p.w2 = uniform_param<T>({hidden, 1}, hidden, rng);
  p.b2 = uniform_param<T>({1, 1}, hidden, rng);
  return p;
}

template <typename T>
ad::Tensor<T> masked_average_pool(const ad::Tensor<T>& fm, const ad::Tensor<T>& mask) {
  return ad::weighted_pool(fm, mask);
}

template <typename T>
ad::Tensor<T> negative_cosine_map(const ad::Tensor<T>& fm, const ad::Tensor<T>& p, T alpha) {
  if (!(alpha > T(0))) throw Error("invalid-alpha", "alpha must be positive");
  return ad::neg_cosine(fm, p, alpha, static_cast<T>(kCosineEps));
}

template <typename T>
ad::Tensor<T> learnable_threshold(const ad::Tensor<T>& fm, const ThresholdParams<T>& params) {
  const auto pooled = ad::global_avg_pool(fm);
  const auto hidden = ad::relu(ad::linear(pooled, params.w1, params.b1));
  return ad::reshape(ad::linear(hidden, params.w2, params.b2), {1});
}

template <typename T>
QpgResult<T> qpg(const ad::Tensor<T>& fm_q, const ad::Tensor<T>& p,
                 const ThresholdParams<T>& params, T alpha) {
  const auto tau = learnable_threshold(fm_q, params);
  const auto score = negative_cosine_map(fm_q, p, alpha);
  // 1 - sigmoid(s - tau) == sigmoid(tau - s)
  auto mask = ad::sigmoid(ad::add_scalar(ad::scale(score, T(-1)), tau));
  T total = 0;
  for (T v : mask.values()) total += v;
  if (!(total >= static_cast<T>(kVanishingMask)))
    throw Error("vanishing-mask", "coarse query mask has no weight");
  auto proto = masked_average_pool(fm_q, mask);
  return {std::move(mask), std::move(proto)};
}

template <typename T>
ad::Tensor<T> regional_prototypes(const ad::Tensor<T>& fm_s, const RegionMaskSet& regions) {
  if (fm_s.rank() != 3 || fm_s.dim(1) != regions.height || fm_s.dim(2) != regions.width)
    throw Error("bad-shape", "features " + ad::shape_str(fm_s.shape()) + " vs regions " +
                                 std::to_string(regions.height) + "x" +
                                 std::to_string(regions.width));
  return ad::label_pool(fm_s, std::span<const int>(regions.labels), regions.count);
}

template <typename T>
ad::Tensor<T> enhance_prototypes(const ad::Tensor<T>& ps, const ad::Tensor<T>& pq) {
  if (ps.rank() != 2 || static_cast<int>(pq.numel()) != ps.dim(1))
    throw Error("bad-shape",
                "prototypes " + ad::shape_str(ps.shape()) + " vs query " + ad::shape_str(pq.shape()));
  return ad::add_rowvec(ps, pq);
}

#define PAMI_PROTOLEARN(T)                                                                       \
  template struct ThresholdParams<T>;                                                            \
  template ad::Tensor<T> masked_average_pool(const ad::Tensor<T>&, const ad::Tensor<T>&);        \
  template ad::Tensor<T> negative_cosine_map(const ad::Tensor<T>&, const ad::Tensor<T>&, T);     \
  template ad::Tensor<T> learnable_threshold(const ad::Tensor<T>&, const ThresholdParams<T>&);   \
  template QpgResult<T> qpg(const ad::Tensor<T>&, const ad::Tensor<T>&, const ThresholdParams<T>&, \
                            T);                                                                  \
  template ad::Tensor<T> regional_prototypes(const ad::Tensor<T>&, const RegionMaskSet&);        \
  template ad::Tensor<T> enhance_prototypes(const ad::Tensor<T>&, const ad::Tensor<T>&);

PAMI_PROTOLEARN(float)
PAMI_PROTOLEARN(double)

}  // namespace pami
