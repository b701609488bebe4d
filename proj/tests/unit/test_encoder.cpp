#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "pami/encoder.hpp"
#include "pami/error.hpp"

using namespace pami;

namespace {

// Direct evaluation of the half-pixel bilinear formula at one output pixel.
double bilinear_at(const std::vector<double>& src, int h, int w, int oh, int ow, int r, int c) {
  auto coord = [](int o, int in, int out) {
    const double x = (o + 0.5) * in / out - 0.5;
    return std::clamp(x, 0.0, static_cast<double>(in - 1));
  };
  const double y = coord(r, h, oh), x = coord(c, w, ow);
  const int y0 = static_cast<int>(std::floor(y)), x0 = static_cast<int>(std::floor(x));
  const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double fy = y - y0, fx = x - x0;
  return (1 - fy) * ((1 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1]) +
         fy * ((1 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1]);
}

}  // namespace

TEST_SUITE("encoder") {
  TEST_CASE("default architecture and output shape") {
    const EncoderArch arch;
    CHECK(arch.widths == std::vector<int>{32, 64, 64, 64});
    CHECK(arch.total_stride() == 4);
    Rng rng(1);
    auto params = EncoderParams<float>::init(arch, rng);
    Rng irng(2);
    auto fm = encode(test::random_image(64, 64, irng), params);
    CHECK(fm.shape() == ad::Shape{64, 16, 16});
    CHECK(EncoderArch::with_channels(16).out_channels() == 16);
  }

  TEST_CASE("zero image with zero biases gives zero pre-normalization activations") {
    Rng rng(3);
    auto params = EncoderParams<double>::init(EncoderArch{}, rng);
    for (auto& b : params.blocks)
      for (auto& v : b.bias.values_mut()) v = 0;
    std::vector<ad::Tensor<double>> pre;
    encode(Image2D(16, 16, 0.0f), params, &pre);
    REQUIRE(pre.size() == 4);
    for (const auto& t : pre)
      for (double v : t.values()) CHECK(v == 0.0);
  }

  TEST_CASE("encoding is deterministic") {
    Rng rng(4);
    auto params = EncoderParams<float>::init(EncoderArch{}, rng);
    Rng irng(5);
    const Image2D img = test::random_image(32, 32, irng);
    auto a = encode(img, params), b = encode(img, params);
    CHECK(std::equal(a.values().begin(), a.values().end(), b.values().begin()));
  }

  TEST_CASE("image size must divide by the stride") {
    Rng rng(6);
    auto params = EncoderParams<float>::init(EncoderArch{}, rng);
    try {
      encode(Image2D(30, 32, 0.0f), params);
      FAIL("expected a throw");
    } catch (const Error& e) {
      CHECK(e.code() == "bad-shape");
    }
  }

  TEST_CASE("pure convolution is translation covariant on interior crops") {
    EncoderArch arch;
    arch.widths = {4, 4};
    arch.strides = {1, 1};
    arch.normalize = false;
    Rng rng(7);
    auto params = EncoderParams<double>::init(arch, rng);
    Rng irng(8);
    const Image2D img = test::random_image(20, 20, irng);
    Image2D shifted(20, 20, 0.0f);
    const int dr = 2, dc = 3;
    for (int r = 0; r + dr < 20; ++r)
      for (int c = 0; c + dc < 20; ++c) shifted(r + dr, c + dc) = img(r, c);
    auto a = encode(img, params), b = encode(shifted, params);
    for (int ch = 0; ch < 4; ++ch)
      for (int r = 3; r < 14; ++r)
        for (int c = 3; c < 14; ++c)
          CHECK(b.values()[(ch * 20 + r + dr) * 20 + c + dc] ==
                doctest::Approx(a.values()[(ch * 20 + r) * 20 + c]).epsilon(1e-12));
  }

  TEST_CASE("upsampling: identity, constants and the formula oracle") {
    Rng rng(9);
    auto fm = test::random_const({3, 4, 5}, rng);
    auto same = upsample_features(fm, 4, 5);
    CHECK(std::equal(same.values().begin(), same.values().end(), fm.values().begin()));

    auto constant = upsample_features(ad::Tensor<double>::full({2, 3, 3}, 0.25), 11, 7);
    for (double v : constant.values()) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));

    const std::vector<double> src{1, 2, 3, 4};
    auto up = upsample_features(ad::Tensor<double>({1, 2, 2}, src), 4, 4);
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c) CHECK(up.values()[r * 4 + c] == doctest::Approx(bilinear_at(src, 2, 2, 4, 4, r, c)));

    try {
      upsample_features(fm, 2, 5);
      FAIL("expected a throw");
    } catch (const Error& e) {
      CHECK(e.code() == "downsample-unsupported");
    }
  }

  TEST_CASE("upsampling commutes with channel permutation") {
    Rng rng(10);
    auto fm = test::random_const({3, 3, 3}, rng);
    std::vector<double> perm;
    for (int ch : {2, 0, 1})
      for (int i = 0; i < 9; ++i) perm.push_back(fm.values()[ch * 9 + i]);
    auto a = upsample_features(fm, 8, 6);
    auto b = upsample_features(ad::Tensor<double>({3, 3, 3}, perm), 8, 6);
    const int order[] = {2, 0, 1};
    for (int k = 0; k < 3; ++k)
      for (int i = 0; i < 48; ++i) CHECK(b.values()[k * 48 + i] == a.values()[order[k] * 48 + i]);
  }

  TEST_CASE("gradient check through a tiny encoder") {
    EncoderArch arch;
    arch.widths = {3, 4};
    arch.strides = {2, 1};
    Rng rng(11);
    auto params = EncoderParams<double>::init(arch, rng);
    std::vector<test::TensorD> leaves;
    params.visit("e", [&](const std::string&, test::TensorD& t) { leaves.push_back(t); });
    Rng irng(12);
    const Image2D img = test::random_image(8, 8, irng);
    CHECK(test::grad_check(leaves, [&] { return test::probe_sum(encode(img, params)); }, 1e-5, test::kCompositeFloor) < 1e-4);
  }
}
