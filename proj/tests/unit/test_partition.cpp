#include <algorithm>
#include <set>

#include "doctest.h"
#include "helpers.hpp"
#include "oracles.hpp"
#include "pami/error.hpp"
#include "pami/partition.hpp"

using namespace pami;

namespace {

Mask filled_ellipse(int h, int w) {
  Mask m(h, w, 0);
  const double cr = (h - 1) / 2.0, cc = (w - 1) / 2.0, rr = h / 2.0, rc = w / 2.0;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      if ((r - cr) * (r - cr) / (rr * rr) + (c - cc) * (c - cc) / (rc * rc) <= 1.0) m(r, c) = 1;
  return m;
}

std::string error_code(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return "";
}

}  // namespace

TEST_SUITE("partition") {
  TEST_CASE("three-pixel foreground with three seeds returns each pixel once") {
    Mask m(5, 5, 0);
    m(0, 0) = m(2, 3) = m(4, 1) = 1;
    auto s = sample_seeds(m, 3, 11);
    REQUIRE(s.count() == 3);
    std::set<PixelCoord> uniq(s.coords.begin(), s.coords.end());
    CHECK(uniq == std::set<PixelCoord>{{0, 0}, {2, 3}, {4, 1}});
    CHECK_FALSE(s.has_duplicates);
  }

  TEST_CASE("single seed is deterministic and yields the whole foreground") {
    Rng rng(3);
    const Mask m = test::random_blob_mask(20, 20, rng);
    auto a = sample_seeds(m, 1, 42), b = sample_seeds(m, 1, 42);
    REQUIRE(a.count() == 1);
    CHECK(a.coords == b.coords);
    auto regions = voronoi_partition(m, a);
    CHECK(regions.count == 1);
    CHECK(regions.mask(0) == m);
  }

  TEST_CASE("farthest-point seeds match an exhaustive re-run on a 32x32 ellipse") {
    const Mask m = filled_ellipse(32, 32);
    const auto s = sample_seeds(m, 64, 7);
    REQUIRE(s.count() == 64);
    std::set<PixelCoord> uniq(s.coords.begin(), s.coords.end());
    CHECK(uniq.size() == 64);
    for (const auto& p : s.coords) CHECK(m(p.row, p.col) == 1);
    const auto brute = oracle::brute_force_fps(m, s.coords.front(), 64);
    CHECK(brute == s.coords);
    CHECK(oracle::min_pairwise_distance(s.coords) == oracle::min_pairwise_distance(brute));
  }

  TEST_CASE("4x8 rectangle with two seeds splits at column 4") {
    const Mask m = test::rect_mask(4, 8, 0, 0, 3, 7);
    SeedSet s;
    s.coords = {{1, 1}, {1, 6}};
    const auto regions = voronoi_partition(m, s);
    REQUIRE(regions.count == 2);
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 8; ++c) CHECK(regions.labels[r * 8 + c] == (c <= 3 ? 0 : 1));
  }

  TEST_CASE("equidistant pixels go to the lower seed index") {
    const Mask m = test::rect_mask(1, 3, 0, 0, 0, 2);
    SeedSet s;
    s.coords = {{0, 2}, {0, 0}};
    const auto regions = voronoi_partition(m, s);
    CHECK(regions.labels == std::vector<int>{1, 0, 0});
  }

  TEST_CASE("small foreground cycles seeds and collapses duplicates") {
    Mask m(4, 4, 0);
    m(1, 1) = m(2, 2) = 1;
    const auto s = sample_seeds(m, 5, 0);
    CHECK(s.count() == 5);
    CHECK(s.has_duplicates);
    CHECK(s.coords == std::vector<PixelCoord>{{1, 1}, {2, 2}, {1, 1}, {2, 2}, {1, 1}});
    const auto regions = voronoi_partition(m, s);
    CHECK(regions.count == 2);
    CHECK(regions.region_sizes() == std::vector<int>{1, 1});
  }

  TEST_CASE("errors") {
    Mask empty(4, 4, 0);
    CHECK(error_code([&] { sample_seeds(empty, 3, 0); }) == "empty-foreground");
    const Mask m = test::rect_mask(4, 4, 1, 1, 2, 2);
    CHECK(error_code([&] { sample_seeds(m, 0, 0); }) == "invalid-count");
    SeedSet off;
    off.coords = {{0, 0}};
    CHECK(error_code([&] { voronoi_partition(m, off); }) == "seed-outside-mask");
  }

  TEST_CASE("random masks: disjoint, covering, non-empty and equal to the naive oracle") {
    Rng rng(2024);
    for (int trial = 0; trial < 40; ++trial) {
      const int h = 8 + static_cast<int>(rng.below(40)), w = 8 + static_cast<int>(rng.below(40));
      const Mask m = test::random_blob_mask(h, w, rng);
      const int n_f = 1 + static_cast<int>(rng.below(80));
      SeedSet seeds;
      const auto regions = partition_foreground(m, n_f, rng.next(), &seeds);
      CHECK(regions.count <= n_f);
      auto sizes = regions.region_sizes();
      CHECK(std::all_of(sizes.begin(), sizes.end(), [](int s) { return s > 0; }));
      for (std::size_t i = 0; i < m.size(); ++i) CHECK((regions.labels[i] >= 0) == (m.data[i] != 0));
      std::vector<PixelCoord> unique;
      for (const auto& s : seeds.coords)
        if (std::find(unique.begin(), unique.end(), s) == unique.end()) unique.push_back(s);
      CHECK(regions.labels == oracle::nearest_seed_labels(m, unique));
    }
  }

  TEST_CASE("identical inputs give identical partitions") {
    Rng rng(8);
    const Mask m = test::random_blob_mask(30, 30, rng);
    CHECK(partition_foreground(m, 64, 5) == partition_foreground(m, 64, 5));
  }

  TEST_CASE("permuted relabels regions") {
    const Mask m = test::rect_mask(4, 8, 0, 0, 3, 7);
    SeedSet s;
    s.coords = {{1, 1}, {1, 6}};
    const auto regions = voronoi_partition(m, s);
    const auto swapped = regions.permuted({1, 0});
    CHECK(swapped.mask(0) == regions.mask(1));
    CHECK(swapped.mask(1) == regions.mask(0));
  }

  TEST_CASE("default region count") { CHECK(kDefaultRegionCount == 64); }
}
