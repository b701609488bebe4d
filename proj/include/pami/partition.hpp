#pragma once

#include <cstdint>
#include <vector>

#include "pami/image.hpp"

namespace pami {

struct PixelCoord {
  int row = 0;
  int col = 0;
  friend bool operator==(const PixelCoord&, const PixelCoord&) = default;
  friend auto operator<=>(const PixelCoord&, const PixelCoord&) = default;
};

struct SeedSet {
  std::vector<PixelCoord> coords;
  // True when the foreground had fewer pixels than requested seeds and
  // coordinates were reused.
  bool has_duplicates = false;
  int count() const { return static_cast<int>(coords.size()); }
};

// N disjoint non-empty masks whose union is the partitioned foreground.
// Stored as a per-pixel region index (-1 outside the foreground).
struct RegionMaskSet {
  int height = 0;
  int width = 0;
  int count = 0;
  std::vector<int> labels;

  Mask mask(int n) const;
  std::vector<int> region_sizes() const;
  // Relabel so that new region k is old region order[k].
  RegionMaskSet permuted(const std::vector<int>& order) const;
  friend bool operator==(const RegionMaskSet&, const RegionMaskSet&) = default;
};

inline constexpr int kDefaultRegionCount = 64;

// Farthest-point sampling over the foreground pixels. The first seed is a
// uniformly drawn foreground pixel; each later seed maximizes the minimum
// Euclidean distance to the seeds so far, ties to the smallest (row, col).
SeedSet sample_seeds(const Mask& mask, int n_f, std::uint64_t rng_seed);

// Nearest-seed assignment of every foreground pixel, ties to the lowest seed
// index. Duplicate seeds collapse, so the result may hold fewer than
// seeds.count() regions.
RegionMaskSet voronoi_partition(const Mask& mask, const SeedSet& seeds);

// sample_seeds followed by voronoi_partition.
RegionMaskSet partition_foreground(const Mask& mask, int n_f, std::uint64_t rng_seed,
                                   SeedSet* seeds_out = nullptr);

}  // namespace pami
