#include "pami/encoder.hpp"

#include <cmath>

#include "pami/error.hpp"
#include "pami/init.hpp"

namespace pami {

int EncoderArch::total_stride() const {
  int s = 1;
  for (int v : strides) s *= v;
  return s;
}

void EncoderArch::validate() const {
  if (widths.empty() || widths.size() != strides.size())
    throw Error("bad-shape", "encoder widths/strides must be non-empty and equally long");
  for (int w : widths)
    if (w < 1) throw Error("bad-shape", "encoder width must be >= 1");
  for (int s : strides)
    if (s < 1) throw Error("bad-shape", "encoder stride must be >= 1");
  if (in_channels < 1 || kernel < 1 || kernel % 2 == 0)
    throw Error("bad-shape", "encoder kernel must be odd and positive");
}

EncoderArch EncoderArch::with_channels(int channels) {
  EncoderArch arch;
  arch.widths.back() = channels;
  return arch;
}

template <typename T>
EncoderParams<T> EncoderParams<T>::init(const EncoderArch& arch, Rng& rng) {
  arch.validate();
  EncoderParams p;
  p.arch = arch;
  int cin = arch.in_channels;
  for (int cout : arch.widths) {
    const int fan_in = cin * arch.kernel * arch.kernel;
    ConvBlockParams<T> b;
    b.weight = uniform_param<T>({cout, cin, arch.kernel, arch.kernel}, fan_in, rng);
    b.bias = uniform_param<T>({cout}, fan_in, rng);
    b.gain = constant_param<T>({cout}, T(1));
    b.shift = constant_param<T>({cout}, T(0));
    p.blocks.push_back(std::move(b));
    cin = cout;
  }
  return p;
}

template <typename T>
ad::Tensor<T> encode(const Image2D& image, const EncoderParams<T>& params,
                     std::vector<ad::Tensor<T>>* pre_norm) {
  const EncoderArch& arch = params.arch;
  const int s = arch.total_stride();
  if (image.height < 1 || image.width < 1 || image.height % s != 0 || image.width % s != 0)
    throw Error("bad-shape", "image " + std::to_string(image.height) + "x" +
                                 std::to_string(image.width) + " not divisible by stride " +
                                 std::to_string(s));
  const std::size_t hw = image.size();
  std::vector<T> input(hw * static_cast<std::size_t>(arch.in_channels));
  for (int c = 0; c < arch.in_channels; ++c)
    for (std::size_t i = 0; i < hw; ++i) input[c * hw + i] = static_cast<T>(image.data[i]);
  ad::Tensor<T> x({arch.in_channels, image.height, image.width}, std::move(input));

  const int pad = arch.kernel / 2;
  for (std::size_t i = 0; i < params.blocks.size(); ++i) {
    const auto& b = params.blocks[i];
    x = ad::conv2d(x, b.weight, b.bias, arch.strides[i], pad);
    if (pre_norm) pre_norm->push_back(x);
    if (arch.normalize) x = ad::instance_norm(x, b.gain, b.shift, static_cast<T>(arch.norm_eps));
    x = ad::relu(x);
  }
  return x;
}

template <typename T>
ad::Tensor<T> upsample_features(const ad::Tensor<T>& fm, int height, int width) {
  return ad::upsample_bilinear(fm, height, width);
}

template struct EncoderParams<float>;
template struct EncoderParams<double>;
template ad::Tensor<float> encode(const Image2D&, const EncoderParams<float>&,
                                  std::vector<ad::Tensor<float>>*);
template ad::Tensor<double> encode(const Image2D&, const EncoderParams<double>&,
                                   std::vector<ad::Tensor<double>>*);
template ad::Tensor<float> upsample_features(const ad::Tensor<float>&, int, int);
template ad::Tensor<double> upsample_features(const ad::Tensor<double>&, int, int);

}  // namespace pami
