#pragma once

// End-to-end forward pass for one episode: encode, partition the support
// foreground, regional prototypes + coarse query prototype, M debiasing
// modules, assembled prediction.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "pami/debias.hpp"
#include "pami/encoder.hpp"
#include "pami/image.hpp"
#include "pami/inference.hpp"
#include "pami/partition.hpp"
#include "pami/protolearn.hpp"

namespace pami {

struct ModelConfig {
  int channels = 64;
  EncoderArch encoder = EncoderArch::with_channels(64);
  AttentionConfig attention;
  int gate_hidden = 16;
  int m_modules = kDefaultModuleCount;
  bool share_prd_weights = false;

  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct ForwardConfig {
  int n_f = kDefaultRegionCount;
  APConfig ap;
};

template <typename T>
struct PipelineParams {
  ModelConfig config;
  EncoderParams<T> encoder;
  ThresholdParams<T> threshold;
  // One entry per stacked module, or a single shared entry.
  std::vector<PRDModuleParams<T>> prd;

  static PipelineParams init(const ModelConfig& config, std::uint64_t seed);

  // The module list applied in order (shared entries repeated).
  std::vector<PRDModuleParams<T>> module_sequence() const;

  template <typename F>
  void visit(F&& f) {
    encoder.visit("encoder", f);
    threshold.visit("threshold", f);
    for (std::size_t i = 0; i < prd.size(); ++i) prd[i].visit("prd." + std::to_string(i), f);
  }

  std::vector<std::pair<std::string, ad::Tensor<T>>> named_tensors();
  std::size_t parameter_count();
  void zero_grad();

  template <typename U>
  PipelineParams<U> cast() const;
};

template <typename T>
struct ForwardResult {
  PredictionPair<T> prediction;
  ad::Tensor<T> support_prototypes;  // after the stack [N×C]
  ad::Tensor<T> query_prototype;     // after the stack [1×C]
  ad::Tensor<T> query_features;      // F_q [C×h×w]
};

// Debug hook receiving intermediate prototype sets by name.
template <typename T>
using ProbeFn = std::function<void(const std::string&, const ad::Tensor<T>&)>;

// Forward pass from precomputed feature maps (F_s, F_q at feature
// resolution) and an explicit region partition of the support mask.
template <typename T>
ForwardResult<T> forward_features(const PipelineParams<T>& params, const ad::Tensor<T>& fm_s,
                                  const ad::Tensor<T>& fm_q, const Mask& support_mask,
                                  const RegionMaskSet& regions, const ForwardConfig& cfg,
                                  const ProbeFn<T>& probe = {});

// Full forward pass from images; the support foreground is partitioned
// with the given seed.
template <typename T>
ForwardResult<T> forward_images(const PipelineParams<T>& params, const Image2D& support,
                                const Mask& support_mask, const Image2D& query,
                                const ForwardConfig& cfg, std::uint64_t partition_seed,
                                const ProbeFn<T>& probe = {});

}  // namespace pami
