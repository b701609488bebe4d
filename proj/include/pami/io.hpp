#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pami/image.hpp"
#include "pami/partition.hpp"
#include "pami/tensor.hpp"

namespace pami::io {

namespace fs = std::filesystem;

// Grayscale PNG contents widened to 16 bits per sample; bit_depth records
// the stored depth (1, 8 or 16).
struct GrayPng {
  int height = 0;
  int width = 0;
  int bit_depth = 8;
  std::vector<std::uint16_t> samples;
};

void write_png_gray(const fs::path& path, const GrayPng& png);
GrayPng read_png_gray(const fs::path& path);
void write_png_rgb(const fs::path& path, int height, int width, const std::vector<std::uint8_t>& rgb);

// Slices: 16-bit grayscale, intensity v stored as round(v·65535).
void write_slice_png(const fs::path& path, const Image2D& image);
Image2D read_slice_png(const fs::path& path);
// Label maps: 8-bit.
void write_label_png(const fs::path& path, const Grid<std::uint8_t>& labels);
Grid<std::uint8_t> read_label_png(const fs::path& path);
// Binary masks as 8-bit 0/255.
void write_mask_png(const fs::path& path, const Mask& mask);
// Any grayscale PNG; nonzero -> 1.
Mask read_mask_png(const fs::path& path);

// Region masks: one 1-bit PNG per region (region_000.png, ...) plus
// regions.json {n_f, rng_seed, seed_coords, count}.
void write_region_masks(const fs::path& dir, const RegionMaskSet& regions, const SeedSet& seeds,
                        int n_f, std::uint64_t rng_seed);

// Feature blob: 8-byte header (C, h, w as little-endian uint16 + 2 reserved
// zero bytes) followed by C·h·w little-endian float32 values, and a sibling
// JSON file <path>.json with the same dimensions.
void write_features(const fs::path& path, const ad::Tensor<float>& fm, const std::string& source = "");
ad::Tensor<float> read_features(const fs::path& path);

void write_text(const fs::path& path, const std::string& text);
std::string read_text(const fs::path& path);

}  // namespace pami::io
