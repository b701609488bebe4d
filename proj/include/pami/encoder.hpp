#pragma once

#include <string>
#include <vector>

#include "pami/image.hpp"
#include "pami/rng.hpp"
#include "pami/tensor.hpp"

namespace pami {

// Architecture descriptor for the convolutional feature encoder. The
// default is four 3×3 blocks of widths 32/64/64/C with stride 2 in the
// first two (total stride 4); each block is conv -> per-channel
// normalization -> ReLU.
struct EncoderArch {
  std::vector<int> widths{32, 64, 64, 64};
  std::vector<int> strides{2, 2, 1, 1};
  int in_channels = 3;  // the slice is replicated across input channels
  int kernel = 3;
  bool normalize = true;
  double norm_eps = 1e-5;

  int out_channels() const { return widths.back(); }
  int total_stride() const;
  void validate() const;

  static EncoderArch with_channels(int channels);
};

template <typename T>
struct ConvBlockParams {
  ad::Tensor<T> weight;  // [Cout×Cin×k×k]
  ad::Tensor<T> bias;    // [Cout]
  ad::Tensor<T> gain;    // [Cout]
  ad::Tensor<T> shift;   // [Cout]
};

template <typename T>
struct EncoderParams {
  EncoderArch arch;
  std::vector<ConvBlockParams<T>> blocks;

  static EncoderParams init(const EncoderArch& arch, Rng& rng);

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const std::string p = prefix + "." + std::to_string(i) + ".";
      f(p + "weight", blocks[i].weight);
      f(p + "bias", blocks[i].bias);
      f(p + "gain", blocks[i].gain);
      f(p + "shift", blocks[i].shift);
    }
  }
};

// Feature map F = f(I) of shape [C×H/s×W/s]. When pre_norm is given, the
// convolution outputs of every block (before normalization) are appended.
template <typename T>
ad::Tensor<T> encode(const Image2D& image, const EncoderParams<T>& params,
                     std::vector<ad::Tensor<T>>* pre_norm = nullptr);

// Bilinear resampling of a [C×h×w] map to [C×H×W], corner alignment off.
template <typename T>
ad::Tensor<T> upsample_features(const ad::Tensor<T>& fm, int height, int width);

}  // namespace pami
