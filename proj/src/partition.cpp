#include "pami/partition.hpp"

#include <limits>
#include <random>

#include "pami/error.hpp"

namespace pami {

Mask RegionMaskSet::mask(int n) const {
  Mask m(height, width, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) m.data[i] = labels[i] == n;
  return m;
}

std::vector<int> RegionMaskSet::region_sizes() const {
  std::vector<int> sizes(static_cast<std::size_t>(count), 0);
  for (int l : labels)
    if (l >= 0) ++sizes[l];
  return sizes;
}

RegionMaskSet RegionMaskSet::permuted(const std::vector<int>& order) const {
  if (static_cast<int>(order.size()) != count) throw Error("bad-shape", "permutation size");
  std::vector<int> inverse(static_cast<std::size_t>(count), -1);
  for (int k = 0; k < count; ++k) inverse[order[k]] = k;
  RegionMaskSet out = *this;
  for (auto& l : out.labels)
    if (l >= 0) l = inverse[l];
  return out;
}

namespace {

std::vector<PixelCoord> foreground_pixels(const Mask& mask) {
  std::vector<PixelCoord> px;
  for (int r = 0; r < mask.height; ++r)
    for (int c = 0; c < mask.width; ++c)
      if (mask(r, c)) px.push_back({r, c});
  return px;
}

long long dist2(PixelCoord a, PixelCoord b) {
  const long long dr = a.row - b.row, dc = a.col - b.col;
  return dr * dr + dc * dc;
}

}  // namespace

SeedSet sample_seeds(const Mask& mask, int n_f, std::uint64_t rng_seed) {
  if (n_f < 1) throw Error("invalid-count", "n_f must be >= 1, got " + std::to_string(n_f));
  const auto px = foreground_pixels(mask);  // already in (row, col) order
  if (px.empty()) throw Error("empty-foreground", "mask has no foreground pixels");

  SeedSet seeds;
  const int p = static_cast<int>(px.size());
  if (p < n_f) {
    seeds.coords = px;
    for (int i = p; i < n_f; ++i) seeds.coords.push_back(px[i % p]);
    seeds.has_duplicates = true;
    return seeds;
  }

  std::mt19937_64 rng(rng_seed);
  const auto first = static_cast<std::size_t>(rng() % static_cast<std::uint64_t>(p));
  seeds.coords.push_back(px[first]);
  std::vector<long long> nearest(px.size());
  for (std::size_t i = 0; i < px.size(); ++i) nearest[i] = dist2(px[i], px[first]);
  while (seeds.count() < n_f) {
    // Strict '>' keeps the first (smallest row, col) pixel among ties.
    std::size_t best = 0;
    for (std::size_t i = 1; i < px.size(); ++i)
      if (nearest[i] > nearest[best]) best = i;
    seeds.coords.push_back(px[best]);
    for (std::size_t i = 0; i < px.size(); ++i)
      nearest[i] = std::min(nearest[i], dist2(px[i], px[best]));
  }
  return seeds;
}

RegionMaskSet voronoi_partition(const Mask& mask, const SeedSet& seeds) {
  if (seeds.coords.empty()) throw Error("invalid-count", "no seeds");
  // Collapse duplicates onto their first occurrence; region ids follow the
  // order of first appearance.
  std::vector<PixelCoord> unique;
  for (const auto& s : seeds.coords) {
    if (s.row < 0 || s.row >= mask.height || s.col < 0 || s.col >= mask.width || !mask(s.row, s.col))
      throw Error("seed-outside-mask",
                  "seed (" + std::to_string(s.row) + "," + std::to_string(s.col) + ") not on foreground");
    bool dup = false;
    for (const auto& u : unique) dup = dup || u == s;
    if (!dup) unique.push_back(s);
  }

  RegionMaskSet out;
  out.height = mask.height;
  out.width = mask.width;
  out.count = static_cast<int>(unique.size());
  out.labels.assign(mask.size(), -1);
  for (int r = 0; r < mask.height; ++r)
    for (int c = 0; c < mask.width; ++c) {
      if (!mask(r, c)) continue;
      int best = 0;
      long long best_d = std::numeric_limits<long long>::max();
      for (int k = 0; k < out.count; ++k) {
        const long long d = dist2({r, c}, unique[k]);
        if (d < best_d) {
          best_d = d;
          best = k;
        }
      }
      out.labels[static_cast<std::size_t>(r) * mask.width + c] = best;
    }
  return out;
}

RegionMaskSet partition_foreground(const Mask& mask, int n_f, std::uint64_t rng_seed,
                                   SeedSet* seeds_out) {
  SeedSet seeds = sample_seeds(mask, n_f, rng_seed);
  RegionMaskSet regions = voronoi_partition(mask, seeds);
  if (seeds_out) *seeds_out = std::move(seeds);
  return regions;
}

}  // namespace pami
