#include "pami/inference.hpp"

#include "pami/error.hpp"

namespace pami {

void APConfig::validate() const {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw Error("invalid-lambda", "lambda must be in [0,1]");
  if (!(alpha > 0.0)) throw Error("invalid-alpha", "alpha must be positive");
}

namespace {

template <typename T>
ad::Tensor<T> to_full_resolution(const ad::Tensor<T>& mask, int height, int width) {
  const auto up = ad::upsample_bilinear(ad::reshape(mask, {1, mask.dim(0), mask.dim(1)}), height, width);
  return ad::reshape(up, {height, width});
}

}  // namespace

template <typename T>
PredictionPair<T> assembled_prediction(const ad::Tensor<T>& fm_q, const ad::Tensor<T>& ps,
                                       const ad::Tensor<T>& pq, const ThresholdParams<T>& threshold,
                                       const APConfig& cfg, int height, int width) {
  cfg.validate();
  const T alpha = static_cast<T>(cfg.alpha);
  const auto tau = learnable_threshold(fm_q, threshold);
  auto score_mask = [&](const ad::Tensor<T>& proto) {
    const auto s = negative_cosine_map(fm_q, proto, alpha);
    return to_full_resolution(ad::sigmoid(ad::add_scalar(ad::scale(s, T(-1)), tau)), height, width);
  };
  PredictionPair<T> out;
  out.support = score_mask(ad::mean_rows(ps));
  out.query = score_mask(pq);
  const T lambda = static_cast<T>(cfg.lambda);
  out.blended = ad::add(ad::scale(out.support, lambda), ad::scale(out.query, T(1) - lambda));
  return out;
}

template <typename T>
ad::Tensor<T> bce_loss(const ad::Tensor<T>& pred, const Mask& target) {
  if (pred.numel() != target.size() ||
      (pred.rank() == 2 && (pred.dim(0) != target.height || pred.dim(1) != target.width)))
    throw Error("bad-shape", "prediction " + ad::shape_str(pred.shape()) + " vs target " +
                                 std::to_string(target.height) + "x" + std::to_string(target.width));
  std::vector<T> gt(target.size());
  for (std::size_t i = 0; i < gt.size(); ++i) gt[i] = target.data[i] ? T(1) : T(0);
  return ad::binary_cross_entropy(pred, std::span<const T>(gt), static_cast<T>(kBceEps));
}

Mask binarize(std::span<const float> soft, int height, int width, double t) {
  if (soft.size() != static_cast<std::size_t>(height) * static_cast<std::size_t>(width))
    throw Error("bad-shape", "soft mask size");
  Mask m(height, width, 0);
  for (std::size_t i = 0; i < soft.size(); ++i) m.data[i] = soft[i] >= t;
  return m;
}

Mask binarize(const Image2D& soft, double t) {
  return binarize(std::span<const float>(soft.data), soft.height, soft.width, t);
}

double dice_score(const Mask& a, const Mask& b) {
  if (!a.same_shape(b)) throw Error("bad-shape", "dice_score masks differ in shape");
  std::size_t inter = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a.data[i] != 0, y = b.data[i] != 0;
    inter += x && y;
    na += x;
    nb += y;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

template PredictionPair<float> assembled_prediction(const ad::Tensor<float>&, const ad::Tensor<float>&,
                                                    const ad::Tensor<float>&,
                                                    const ThresholdParams<float>&, const APConfig&,
                                                    int, int);
template PredictionPair<double> assembled_prediction(const ad::Tensor<double>&,
                                                     const ad::Tensor<double>&,
                                                     const ad::Tensor<double>&,
                                                     const ThresholdParams<double>&,
                                                     const APConfig&, int, int);
template ad::Tensor<float> bce_loss(const ad::Tensor<float>&, const Mask&);
template ad::Tensor<double> bce_loss(const ad::Tensor<double>&, const Mask&);

}  // namespace pami
