#include <fstream>
#include <iterator>

#include "doctest.h"
#include "helpers.hpp"
#include "json.hpp"
#include "pami/error.hpp"
#include "pami/io.hpp"

using namespace pami;
using nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("pami_io_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<unsigned char> bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_SUITE("io") {
  TEST_CASE("png round trips") {
    const auto dir = scratch("png");
    Rng rng(1);
    const Image2D img = test::random_image(9, 13, rng);
    io::write_slice_png(dir / "s.png", img);
    const Image2D back = io::read_slice_png(dir / "s.png");
    REQUIRE(back.same_shape(img));
    for (std::size_t i = 0; i < img.size(); ++i) CHECK(std::abs(back.data[i] - img.data[i]) <= 0.5f / 65535.0f + 1e-7f);
    CHECK(io::read_png_gray(dir / "s.png").bit_depth == 16);

    Grid<std::uint8_t> labels(5, 6, 0);
    labels(1, 2) = 3;
    labels(4, 5) = 1;
    io::write_label_png(dir / "l.png", labels);
    CHECK(io::read_label_png(dir / "l.png") == labels);

    const Mask m = test::rect_mask(7, 7, 1, 2, 4, 5);
    io::write_mask_png(dir / "m.png", m);
    const auto raw = io::read_png_gray(dir / "m.png");
    CHECK(raw.bit_depth == 8);
    CHECK(raw.samples[1 * 7 + 2] == 255);
    CHECK(raw.samples[0] == 0);
    CHECK(io::read_mask_png(dir / "m.png") == m);
    fs::remove_all(dir);
  }

  TEST_CASE("missing files raise io") {
    try {
      io::read_png_gray("/nonexistent/pami/none.png");
      FAIL("expected a throw");
    } catch (const Error& e) {
      CHECK(e.code() == "io");
    }
  }

  TEST_CASE("region masks export as 1-bit pages plus an index") {
    const auto dir = scratch("regions");
    const Mask m = test::rect_mask(4, 8, 0, 0, 3, 7);
    SeedSet seeds;
    seeds.coords = {{1, 1}, {1, 6}};
    const auto regions = voronoi_partition(m, seeds);
    io::write_region_masks(dir, regions, seeds, 2, 17);
    const json j = json::parse(io::read_text(dir / "regions.json"));
    CHECK(j.at("n_f") == 2);
    CHECK(j.at("rng_seed") == 17);
    CHECK(j.at("seed_coords").size() == 2);
    CHECK(j.at("seed_coords")[1] == json::array({1, 6}));
    for (int n = 0; n < 2; ++n) {
      const fs::path page = dir / (n == 0 ? "region_000.png" : "region_001.png");
      CHECK(io::read_png_gray(page).bit_depth == 1);
      CHECK(io::read_mask_png(page) == regions.mask(n));
    }
    fs::remove_all(dir);
  }

  TEST_CASE("feature blobs have the documented header and round trip") {
    const auto dir = scratch("features");
    std::vector<float> v(2 * 3 * 4);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.5f * static_cast<float>(i) - 3.0f;
    const ad::Tensor<float> fm({2, 3, 4}, v);
    io::write_features(dir / "f.bin", fm, "unit");
    const auto raw = bytes(dir / "f.bin");
    REQUIRE(raw.size() == 8 + v.size() * 4);
    CHECK(raw[0] == 2);
    CHECK(raw[1] == 0);
    CHECK(raw[2] == 3);
    CHECK(raw[4] == 4);
    CHECK(raw[6] == 0);
    CHECK(raw[7] == 0);
    // -3.0f little endian is 00 00 40 c0
    CHECK(raw[8] == 0x00);
    CHECK(raw[10] == 0x40);
    CHECK(raw[11] == 0xc0);
    const auto back = io::read_features(dir / "f.bin");
    CHECK(back.shape() == fm.shape());
    CHECK(std::equal(back.values().begin(), back.values().end(), fm.values().begin()));
    const json meta = json::parse(io::read_text(dir / "f.bin.json"));
    CHECK(meta.at("channels") == 2);
    CHECK(meta.at("height") == 3);
    CHECK(meta.at("width") == 4);
    fs::remove_all(dir);
  }
}
