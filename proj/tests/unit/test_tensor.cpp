#include <cmath>
#include <limits>

#include "doctest.h"
#include "helpers.hpp"
#include "pami/error.hpp"
#include "pami/tensor.hpp"

using namespace pami;
using pami::test::TensorD;
using pami::test::grad_check;
using pami::test::probe_sum;
using pami::test::random_const;
using pami::test::random_leaf;

namespace {

void check_values(const TensorD& t, const std::vector<double>& expected, double tol = 1e-6) {
  REQUIRE(t.numel() == expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) CHECK(t.values()[i] == doctest::Approx(expected[i]).epsilon(tol));
}

}  // namespace

TEST_SUITE("tensor") {
  TEST_CASE("matmul and transposed variants") {
    TensorD a({2, 3}, {1, 2, 3, 4, 5, 6});
    TensorD b({3, 2}, {7, 8, 9, 10, 11, 12});
    check_values(ad::matmul(a, b), {58, 64, 139, 154});
    check_values(ad::matmul(a, a, false, true), {14, 32, 32, 77});
    check_values(ad::matmul(a, a, true, false), {17, 22, 27, 22, 29, 36, 27, 36, 45});
  }

  TEST_CASE("shape mismatch throws bad-shape") {
    TensorD a({2, 3}, std::vector<double>(6, 1.0));
    try {
      (void)ad::matmul(a, a);
      FAIL("expected a throw");
    } catch (const Error& e) {
      CHECK(e.code() == "bad-shape");
    }
  }

  TEST_CASE("layer norm oracle") {
    TensorD x({1, 3}, {1, 2, 3});
    auto y = ad::layer_norm(x, TensorD::full({1, 3}, 1.0), TensorD::full({1, 3}, 0.0), 1e-5);
    check_values(y, {-1.2247356859083902, 0.0, 1.2247356859083902}, 1e-12);
  }

  TEST_CASE("softmax rows, including -inf entries") {
    TensorD x({1, 3}, {0, 1, 2});
    check_values(ad::softmax_rows(x), {0.09003057317038046, 0.24472847105479764, 0.6652409557748219}, 1e-12);
    const double inf = std::numeric_limits<double>::infinity();
    auto y = ad::softmax_rows(TensorD({1, 3}, {-inf, 0.0, 0.0}));
    CHECK(y.at(0) == 0.0);
    CHECK(y.at(1) == doctest::Approx(0.5));
    CHECK(y.at(2) == doctest::Approx(0.5));
  }

  TEST_CASE("conv2d matches torch for stride 1 and 2") {
    std::vector<double> xv(18);
    for (int i = 0; i < 18; ++i) xv[i] = (i + 1) / 10.0;
    TensorD x({2, 3, 3}, xv);
    TensorD w({1, 2, 3, 3}, {1, 0, -1, 2, 0, -2, 1, 0, -1, 0.5, 0.5, 0.5, 0, 0, 0, -0.5, -0.5, -0.5});
    TensorD b({1}, {0.1});
    check_values(ad::conv2d(x, w, b, 2, 1), {-2.15, -0.45, -0.65, 3.65}, 1e-6);
    check_values(ad::conv2d(x, w, b, 1, 1), {-2.15, -2.6, -0.45, -2.5, -1.6, 1.5, -0.65, 1.6, 3.65}, 1e-6);
  }

  TEST_CASE("instance norm matches torch") {
    TensorD y({2, 2, 2}, {1, 2, 3, 5, 0, 0, 1, -1});
    auto out = ad::instance_norm(y, TensorD::full({2}, 1.0), TensorD::full({2}, 0.0), 1e-5);
    check_values(out, {-1.183213233947754, -0.5070914030075073, 0.16903042793273926, 1.5212740898132324, 0, 0,
                       1.4141994714736938, -1.4141994714736938},
                 1e-6);
  }

  TEST_CASE("bilinear upsampling matches torch with corner alignment off") {
    TensorD x({1, 2, 2}, {1, 2, 3, 4});
    check_values(ad::upsample_bilinear(x, 4, 4),
                 {1, 1.25, 1.75, 2, 1.5, 1.75, 2.25, 2.5, 2.5, 2.75, 3.25, 3.5, 3, 3.25, 3.75, 4}, 1e-12);
    check_values(ad::upsample_bilinear(x, 3, 5), {1, 1.1, 1.5, 1.9, 2, 2, 2.1, 2.5, 2.9, 3, 3, 3.1, 3.5, 3.9, 4}, 1e-6);
    TensorD y({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    try {
      (void)ad::upsample_bilinear(y, 2, 2);
      FAIL("expected a throw");
    } catch (const Error& e) {
      CHECK(e.code() == "downsample-unsupported");
    }
    check_values(ad::upsample_bilinear(y, 3, 3), {1, 2, 3, 4, 5, 6, 7, 8, 9}, 1e-12);
  }

  TEST_CASE("pooling helpers") {
    TensorD fm({2, 2, 2}, {1, 2, 3, 4, 10, 20, 30, 40});
    check_values(ad::global_avg_pool(fm), {2.5, 25});
    check_values(ad::weighted_pool(fm, TensorD({2, 2}, {1, 0, 0, 1})), {2.5, 25});
    check_values(ad::weighted_pool(fm, TensorD({2, 2}, {0.5, 0, 0, 0.5})), {2.5, 25});
    const std::vector<int> labels{0, 1, -1, 1};
    check_values(ad::label_pool(fm, labels, 2), {1, 10, 3, 30});
  }

  TEST_CASE("negative cosine guards zero-norm pixels") {
    TensorD fm({2, 1, 3}, {1, 0, 0, 0, 1, 0});
    TensorD p({1, 2}, {1, 0});
    check_values(ad::neg_cosine(fm, p, 20.0, 1e-8), {-20, 0, 0}, 1e-9);
  }

  TEST_CASE("binary cross entropy") {
    TensorD half({2, 2}, std::vector<double>(4, 0.5));
    const std::vector<double> target{1, 0, 0, 1};
    CHECK(ad::binary_cross_entropy(half, std::span<const double>(target), 1e-7).item() ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));
    TensorD p({1, 2}, {0.9, 0.2});
    const std::vector<double> t2{1, 0};
    CHECK(ad::binary_cross_entropy(p, std::span<const double>(t2), 1e-7).item() ==
          doctest::Approx(0.164252033486018).epsilon(1e-12));
  }

  TEST_CASE("finite-difference gradients of every op") {
    Rng rng(5);
    auto a = random_leaf({3, 4}, rng), b = random_leaf({4, 2}, rng), c = random_leaf({3, 4}, rng);
    auto row = random_leaf({1, 4}, rng), col = random_leaf({3, 1}, rng), bias = random_leaf({1, 2}, rng);
    const double tol = 1e-6;

    CHECK(grad_check({a, b}, [&] { return probe_sum(ad::matmul(a, b)); }) < tol);
    CHECK(grad_check({a, c}, [&] { return probe_sum(ad::matmul(a, c, false, true)); }) < tol);
    CHECK(grad_check({a, c}, [&] { return probe_sum(ad::matmul(a, c, true, false)); }) < tol);
    CHECK(grad_check({a, b, bias}, [&] { return probe_sum(ad::linear(a, b, bias)); }) < tol);
    CHECK(grad_check({a}, [&] { return probe_sum(ad::transpose(a)); }) < tol);
    CHECK(grad_check({a}, [&] { return probe_sum(ad::reshape(a, {2, 6})); }) < tol);
    CHECK(grad_check({a, c}, [&] { return probe_sum(ad::add(a, c)); }) < tol);
    CHECK(grad_check({a, c}, [&] { return probe_sum(ad::sub(a, c)); }) < tol);
    CHECK(grad_check({a, c}, [&] { return probe_sum(ad::mul(a, c)); }) < tol);
    CHECK(grad_check({a}, [&] { return probe_sum(ad::scale(a, 2.5)); }) < tol);
    CHECK(grad_check({a}, [&] { return probe_sum(ad::add_const(a, 2.5)); }) < tol);
    auto s = random_leaf({1}, rng);
    CHECK(grad_check({a, s}, [&] { return probe_sum(ad::add_scalar(a, s)); }) < tol);
    CHECK(grad_check({a}, [&] { return probe_sum(ad::sigmoid(a)); }) < tol);
    CHECK(grad_check({a}, [&] { return probe_sum(ad::relu(a)); }) < tol);
    CHECK(grad_check({a, row}, [&] { return probe_sum(ad::add_rowvec(a, row)); }) < tol);
    CHECK(grad_check({a, row}, [&] { return probe_sum(ad::mul_rowvec(a, row)); }) < tol);
    CHECK(grad_check({a, col}, [&] { return probe_sum(ad::mul_colvec(a, col)); }) < tol);
    CHECK(grad_check({a}, [&] { return probe_sum(ad::mean_rows(a)); }) < tol);
    CHECK(grad_check({a}, [&] { return probe_sum(ad::max_rows(a)); }) < tol);
    CHECK(grad_check({a}, [&] { return probe_sum(ad::mean_cols(a)); }) < tol);
    CHECK(grad_check({a}, [&] { return probe_sum(ad::max_cols(a)); }) < tol);
    CHECK(grad_check({a}, [&] { return ad::sum_all(a); }) < tol);
    CHECK(grad_check({a}, [&] { return ad::mean_all(a); }) < tol);
    CHECK(grad_check({a, c}, [&] { return probe_sum(ad::concat_cols<double>({a, c})); }) < tol);
    CHECK(grad_check({a}, [&] { return probe_sum(ad::slice_cols(a, 1, 2)); }) < tol);
    CHECK(grad_check({a}, [&] { return probe_sum(ad::softmax_rows(a)); }) < tol);
    auto gain = random_leaf({1, 4}, rng, 0.5, 1.5), lb = random_leaf({1, 4}, rng);
    CHECK(grad_check({a, gain, lb}, [&] { return probe_sum(ad::layer_norm(a, gain, lb, 1e-5)); }) < 1e-5);

    auto fm = random_leaf({2, 5, 5}, rng);
    auto w = random_leaf({3, 2, 3, 3}, rng), wb = random_leaf({3}, rng);
    CHECK(grad_check({fm, w, wb}, [&] { return probe_sum(ad::conv2d(fm, w, wb, 1, 1)); }) < tol);
    CHECK(grad_check({fm, w, wb}, [&] { return probe_sum(ad::conv2d(fm, w, wb, 2, 1)); }) < tol);
    auto ig = random_leaf({2}, rng, 0.5, 1.5), ib = random_leaf({2}, rng);
    CHECK(grad_check({fm, ig, ib}, [&] { return probe_sum(ad::instance_norm(fm, ig, ib, 1e-5)); }) < 1e-5);
    CHECK(grad_check({fm}, [&] { return probe_sum(ad::upsample_bilinear(fm, 9, 11)); }) < tol);
    CHECK(grad_check({fm}, [&] { return probe_sum(ad::upsample_bilinear(fm, 5, 7)); }) < tol);
    CHECK(grad_check({fm}, [&] { return probe_sum(ad::global_avg_pool(fm)); }) < tol);
    auto wm = random_leaf({5, 5}, rng, 0.1, 1.0);
    CHECK(grad_check({fm, wm}, [&] { return probe_sum(ad::weighted_pool(fm, wm)); }) < tol);
    std::vector<int> labels(25);
    for (int i = 0; i < 25; ++i) labels[i] = i % 4 == 3 ? -1 : i % 3;
    CHECK(grad_check({fm}, [&] { return probe_sum(ad::label_pool(fm, labels, 3)); }) < tol);
    auto p = random_leaf({1, 2}, rng);
    CHECK(grad_check({fm, p}, [&] { return probe_sum(ad::neg_cosine(fm, p, 20.0, 1e-8)); }) < 1e-5);
    auto pred = random_leaf({3, 3}, rng, 0.05, 0.95);
    const std::vector<double> target{1, 0, 1, 1, 0, 0, 1, 0, 1};
    CHECK(grad_check({pred}, [&] { return ad::binary_cross_entropy(pred, std::span<const double>(target), 1e-7); }) <
          tol);
  }

  TEST_CASE("gradients accumulate across shared uses") {
    TensorD x({1, 2}, {1.5, -2.0}, true);
    auto y = ad::sum_all(ad::mul(x, x));
    y.backward();
    CHECK(x.grad()[0] == doctest::Approx(3.0));
    CHECK(x.grad()[1] == doctest::Approx(-4.0));
    x.zero_grad();
    CHECK(x.grad()[0] == 0.0);
  }

  TEST_CASE("detached tensors stop gradients") {
    Rng rng(1);
    auto a = random_leaf({2, 2}, rng);
    auto y = ad::sum_all(ad::mul(a, a.detached()));
    y.backward();
    for (std::size_t i = 0; i < 4; ++i) CHECK(a.grad()[i] == doctest::Approx(a.values()[i]));
  }

  TEST_CASE("random constants do not receive gradients") {
    Rng rng(2);
    auto a = random_leaf({2, 2}, rng);
    auto k = random_const({2, 2}, rng);
    ad::sum_all(ad::mul(a, k)).backward();
    CHECK_FALSE(k.requires_grad());
  }
}
