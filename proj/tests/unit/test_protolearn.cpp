#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "oracles.hpp"
#include "pami/error.hpp"
#include "pami/protolearn.hpp"

using namespace pami;
using pami::test::TensorD;

namespace {

std::string error_code(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return "";
}

ThresholdParams<double> zero_bias_threshold(int c, Rng& rng) {
  auto p = ThresholdParams<double>::init(c, rng);
  for (auto& v : p.b1.values_mut()) v = 0;
  for (auto& v : p.b2.values_mut()) v = 0;
  return p;
}

}  // namespace

TEST_SUITE("protolearn") {
  TEST_CASE("masked average pooling worked example") {
    TensorD fm({2, 2, 2}, {1, 2, 3, 4, 0, 0, 10, 10});
    TensorD mask({2, 2}, {1, 0, 1, 0});
    auto p = masked_average_pool(fm, mask);
    CHECK(p.at(0) == doctest::Approx(2.0));
    CHECK(p.at(1) == doctest::Approx(5.0));
  }

  TEST_CASE("masked average pooling of a constant map and a full mask") {
    TensorD fm = TensorD::full({3, 4, 4}, 0.75);
    Rng rng(1);
    auto mask = test::random_const({4, 4}, rng, 0.1, 1.0);
    const auto pooled = masked_average_pool(fm, mask);
    for (double v : pooled.values()) CHECK(v == doctest::Approx(0.75));
    auto x = test::random_const({3, 4, 4}, rng);
    auto full = masked_average_pool(x, TensorD::full({4, 4}, 1.0));
    auto gap = ad::global_avg_pool(x);
    for (int k = 0; k < 3; ++k) CHECK(full.at(k) == doctest::Approx(gap.at(k)));
  }

  TEST_CASE("masked average pooling rejects an empty mask") {
    TensorD fm = TensorD::full({2, 2, 2}, 1.0);
    CHECK(error_code([&] { masked_average_pool(fm, TensorD::full({2, 2}, 0.0)); }) == "empty-mask");
  }

  TEST_CASE("masked average pooling matches a loop oracle on random instances") {
    Rng rng(77);
    for (int t = 0; t < 100; ++t) {
      const int c = 1 + static_cast<int>(rng.below(8)), h = 1 + static_cast<int>(rng.below(9)),
                w = 1 + static_cast<int>(rng.below(9));
      auto fm = test::random_const({c, h, w}, rng, -3, 3);
      auto mask = test::random_const({h, w}, rng, 0.0, 1.0);
      const std::vector<double> fv(fm.values().begin(), fm.values().end()),
          mv(mask.values().begin(), mask.values().end());
      const auto want = oracle::masked_average(fv, c, h, w, mv);
      const auto got = masked_average_pool(fm, mask);
      for (int k = 0; k < c; ++k) CHECK(got.at(k) == doctest::Approx(want[k]).epsilon(1e-6));
    }
  }

  TEST_CASE("negative cosine map: parallel, orthogonal, anti-parallel") {
    TensorD fm({2, 1, 3}, {2, 0, -1, 0, 3, 0});
    TensorD p({1, 2}, {1, 0});
    auto s = negative_cosine_map(fm, p, 20.0);
    CHECK(s.at(0) == doctest::Approx(-20.0));
    CHECK(s.at(1) == doctest::Approx(0.0));
    CHECK(s.at(2) == doctest::Approx(20.0));
  }

  TEST_CASE("negative cosine map is scale-invariant in the prototype") {
    Rng rng(4);
    auto fm = test::random_const({5, 4, 4}, rng);
    auto p = test::random_const({1, 5}, rng);
    auto a = negative_cosine_map(fm, p, 20.0), b = negative_cosine_map(fm, ad::scale(p, 3.7), 20.0);
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a.values()[i] == doctest::Approx(b.values()[i]).epsilon(1e-12));
  }

  TEST_CASE("negative cosine map errors") {
    TensorD fm = TensorD::full({2, 2, 2}, 1.0);
    CHECK(error_code([&] { negative_cosine_map(fm, TensorD::full({1, 2}, 0.0), 20.0); }) == "degenerate-prototype");
    CHECK(error_code([&] { negative_cosine_map(fm, TensorD::full({1, 2}, 1.0), 0.0); }) == "invalid-alpha");
  }

  TEST_CASE("learnable threshold") {
    Rng rng(9);
    auto p = zero_bias_threshold(8, rng);
    CHECK(learnable_threshold(TensorD::full({8, 4, 4}, 0.0), p).item() == 0.0);
    auto q = ThresholdParams<double>::init(8, rng);
    const double small = learnable_threshold(TensorD::full({8, 2, 2}, 0.3), q).item();
    const double large = learnable_threshold(TensorD::full({8, 7, 5}, 0.3), q).item();
    CHECK(small == doctest::Approx(large).epsilon(1e-12));
    auto fm = test::random_const({8, 4, 4}, rng);
    const std::vector<double> fv(fm.values().begin(), fm.values().end());
    CHECK(learnable_threshold(fm, q).item() == doctest::Approx(oracle::threshold(fv, 8, 16, q)).epsilon(1e-12));
    CHECK(q.w1.dim(1) == 4);
  }

  TEST_CASE("qpg: parallel features, orthogonal pixel and a two-pixel oracle") {
    Rng rng(3);
    auto params = zero_bias_threshold(2, rng);
    for (auto& v : params.w2.values_mut()) v = 0;  // tau = 0
    TensorD p({1, 2}, {1, 0});

    TensorD parallel({2, 1, 2}, {1, 2, 0, 0});
    auto r = qpg(parallel, p, params, 20.0);
    for (double v : r.mask.values()) CHECK(v == doctest::Approx(1.0 - 1.0 / (1.0 + std::exp(20.0))).epsilon(1e-12));
    CHECK(r.prototype.at(0) == doctest::Approx(1.5));

    TensorD ortho({2, 1, 1}, {0, 1});
    CHECK(qpg(ortho, p, params, 20.0).mask.at(0) == 0.5);

    auto q = ThresholdParams<double>::init(2, rng);
    TensorD mixed({2, 1, 2}, {0.8, -0.3, 0.6, 0.9});
    TensorD p2({1, 2}, {0.5, 1.0});
    const std::vector<double> fv{0.8, -0.3, 0.6, 0.9};
    const double tau = oracle::threshold(fv, 2, 2, q);
    const auto want_mask = oracle::qpg_mask(fv, 2, 1, 2, {0.5, 1.0}, tau, 20.0);
    const auto want_proto = oracle::masked_average(fv, 2, 1, 2, want_mask);
    auto got = qpg(mixed, p2, q, 20.0);
    for (int i = 0; i < 2; ++i) {
      CHECK(got.mask.at(i) == doctest::Approx(want_mask[i]).epsilon(1e-12));
      CHECK(got.prototype.at(i) == doctest::Approx(want_proto[i]).epsilon(1e-12));
    }
  }

  TEST_CASE("qpg mask is monotone in the similarity of one pixel") {
    Rng rng(12);
    auto params = ThresholdParams<double>::init(4, rng);
    TensorD p({1, 4}, {1, 0, 0, 0});
    double last = -1;
    for (int step = 0; step <= 10; ++step) {
      const double t = step / 10.0;  // rotate pixel 0 from orthogonal to parallel
      TensorD fm({4, 1, 2}, {t, 0.5, std::sqrt(1 - t * t), 0.5, 0, 0.5, 0, 0.5});
      const double v = qpg(fm, p, params, 20.0).mask.at(0);
      CHECK(v >= last);
      last = v;
    }
  }

  TEST_CASE("regional prototypes") {
    TensorD fm({2, 2, 2}, {1, 2, 3, 4, 0, 0, 10, 10});
    RegionMaskSet one{2, 2, 1, {0, -1, 0, -1}};
    auto p1 = regional_prototypes(fm, one);
    CHECK(p1.dim(0) == 1);
    CHECK(p1.at(0, 0) == doctest::Approx(2.0));
    CHECK(p1.at(0, 1) == doctest::Approx(5.0));

    RegionMaskSet two{2, 2, 2, {0, 1, 0, 1}};
    auto p2 = regional_prototypes(fm, two);
    CHECK(p2.at(0, 0) == doctest::Approx(2.0));
    CHECK(p2.at(0, 1) == doctest::Approx(5.0));
    CHECK(p2.at(1, 0) == doctest::Approx(3.0));
    CHECK(p2.at(1, 1) == doctest::Approx(5.0));

    auto constant = regional_prototypes(TensorD::full({3, 2, 2}, 0.4), two);
    for (int k = 0; k < 3; ++k) CHECK(constant.at(0, k) == constant.at(1, k));
  }

  TEST_CASE("enhance prototypes") {
    Rng rng(6);
    auto ps = test::random_const({3, 4}, rng);
    auto pq = test::random_const({1, 4}, rng);
    auto out = enhance_prototypes(ps, pq);
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 4; ++c) CHECK(out.at(r, c) == doctest::Approx(ps.at(r, c) + pq.at(c)));
    auto same = enhance_prototypes(ps, TensorD::full({1, 4}, 0.0));
    CHECK(std::equal(same.values().begin(), same.values().end(), ps.values().begin()));
    CHECK(error_code([&] { enhance_prototypes(ps, TensorD::full({1, 3}, 0.0)); }) == "bad-shape");
  }

  TEST_CASE("gradient checks at C=8 on 4x4 features") {
    Rng rng(21);
    auto fm = test::random_leaf({8, 4, 4}, rng);
    auto mask = test::random_leaf({4, 4}, rng, 0.1, 1.0);
    auto p = test::random_leaf({1, 8}, rng);
    auto th = ThresholdParams<double>::init(8, rng);
    CHECK(test::grad_check({fm, mask}, [&] { return test::probe_sum(masked_average_pool(fm, mask)); }) < 1e-4);
    CHECK(test::grad_check({fm, p}, [&] { return test::probe_sum(negative_cosine_map(fm, p, 20.0)); }) < 1e-4);
    CHECK(test::grad_check({fm, th.w1, th.b1, th.w2, th.b2},
                           [&] { return learnable_threshold(fm, th); }) < 1e-4);
    CHECK(test::grad_check({fm, p, th.w1, th.w2}, [&] {
            auto r = qpg(fm, p, th, 20.0);
            return ad::add(test::probe_sum(r.prototype), test::probe_sum(r.mask, 5));
          }) < 1e-4);
    RegionMaskSet regions{4, 4, 3, {}};
    for (int i = 0; i < 16; ++i) regions.labels.push_back(i % 5 == 4 ? -1 : i % 3);
    auto pq = test::random_leaf({1, 8}, rng);
    CHECK(test::grad_check({fm, pq}, [&] {
            return test::probe_sum(enhance_prototypes(regional_prototypes(fm, regions), pq));
          }) < 1e-4);
  }
}
