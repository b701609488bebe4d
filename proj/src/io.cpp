#include "pami/io.hpp"

#include <png.h>

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>

#include "json.hpp"

#include "pami/error.hpp"

namespace pami::io {

using nlohmann::json;

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const fs::path& path, const char* mode) {
  FilePtr f(std::fopen(path.string().c_str(), mode));
  if (!f) throw Error("io", "cannot open " + path.string());
  return f;
}

void ensure_parent(const fs::path& path) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    if (ec) throw Error("io", "cannot create " + path.parent_path().string() + ": " + ec.message());
  }
}

[[noreturn]] void png_fail(png_structp, png_const_charp msg) { throw Error("io", std::string("png: ") + msg); }

void write_png(const fs::path& path, int height, int width, int bit_depth, int color_type,
               const std::vector<std::vector<png_byte>>& rows) {
  ensure_parent(path);
  auto f = open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, nullptr);
  if (!png) throw Error("io", "png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp* p;
    png_infop* i;
    ~Guard() { png_destroy_write_struct(p, i); }
  } guard{&png, &info};
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), bit_depth,
               color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (const auto& r : rows) png_write_row(png, r.data());
  png_write_end(png, nullptr);
}

}  // namespace

void write_png_gray(const fs::path& path, const GrayPng& img) {
  const int bd = img.bit_depth;
  if (bd != 1 && bd != 8 && bd != 16) throw Error("io", "unsupported bit depth");
  std::vector<std::vector<png_byte>> rows(static_cast<std::size_t>(img.height));
  for (int r = 0; r < img.height; ++r) {
    auto& row = rows[r];
    const std::uint16_t* src = img.samples.data() + static_cast<std::size_t>(r) * img.width;
    if (bd == 16) {
      row.resize(static_cast<std::size_t>(img.width) * 2);
      for (int c = 0; c < img.width; ++c) {
        row[2 * c] = static_cast<png_byte>(src[c] >> 8);
        row[2 * c + 1] = static_cast<png_byte>(src[c] & 0xFF);
      }
    } else if (bd == 8) {
      row.resize(static_cast<std::size_t>(img.width));
      for (int c = 0; c < img.width; ++c) row[c] = static_cast<png_byte>(src[c]);
    } else {
      row.assign(static_cast<std::size_t>((img.width + 7) / 8), 0);
      for (int c = 0; c < img.width; ++c)
        if (src[c]) row[c / 8] |= static_cast<png_byte>(0x80 >> (c % 8));
    }
  }
  write_png(path, img.height, img.width, bd, PNG_COLOR_TYPE_GRAY, rows);
}

void write_png_rgb(const fs::path& path, int height, int width, const std::vector<std::uint8_t>& rgb) {
  if (rgb.size() != static_cast<std::size_t>(height) * width * 3) throw Error("bad-shape", "rgb buffer size");
  std::vector<std::vector<png_byte>> rows(static_cast<std::size_t>(height));
  for (int r = 0; r < height; ++r)
    rows[r].assign(rgb.begin() + static_cast<std::ptrdiff_t>(r) * width * 3,
                   rgb.begin() + static_cast<std::ptrdiff_t>(r + 1) * width * 3);
  write_png(path, height, width, 8, PNG_COLOR_TYPE_RGB, rows);
}

GrayPng read_png_gray(const fs::path& path) {
  auto f = open_file(path, "rb");
  png_byte sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8))
    throw Error("io", path.string() + " is not a PNG file");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, nullptr);
  if (!png) throw Error("io", "png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp* p;
    png_infop* i;
    ~Guard() { png_destroy_read_struct(p, i, nullptr); }
  } guard{&png, &info};
  png_init_io(png, f.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int width = static_cast<int>(png_get_image_width(png, info));
  const int height = static_cast<int>(png_get_image_height(png, info));
  const int bd = png_get_bit_depth(png, info);
  const int ct = png_get_color_type(png, info);
  if (ct != PNG_COLOR_TYPE_GRAY) throw Error("io", path.string() + " is not a grayscale PNG");
  GrayPng out{height, width, bd, {}};
  if (bd < 8) png_set_expand_gray_1_2_4_to_8(png);
  png_read_update_info(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  std::vector<png_byte> row(rowbytes);
  out.samples.resize(static_cast<std::size_t>(height) * width);
  for (int r = 0; r < height; ++r) {
    png_read_row(png, row.data(), nullptr);
    std::uint16_t* dst = out.samples.data() + static_cast<std::size_t>(r) * width;
    for (int c = 0; c < width; ++c) {
      if (bd == 16) dst[c] = static_cast<std::uint16_t>((row[2 * c] << 8) | row[2 * c + 1]);
      else if (bd == 8) dst[c] = row[c];
      else dst[c] = row[c] ? 1 : 0;  // expanded 1/2/4-bit: keep as binary-ish
    }
  }
  if (bd == 2 || bd == 4) {
    // Expansion scaled values to 8 bits; report as 8-bit data.
    out.bit_depth = 8;
  }
  png_read_end(png, nullptr);
  return out;
}

void write_slice_png(const fs::path& path, const Image2D& image) {
  GrayPng png{image.height, image.width, 16, std::vector<std::uint16_t>(image.size())};
  for (std::size_t i = 0; i < image.size(); ++i) {
    const float v = std::clamp(image.data[i], 0.0f, 1.0f);
    png.samples[i] = static_cast<std::uint16_t>(std::lround(v * 65535.0f));
  }
  write_png_gray(path, png);
}

Image2D read_slice_png(const fs::path& path) {
  const auto png = read_png_gray(path);
  Image2D img(png.height, png.width);
  const float scale = png.bit_depth == 16 ? 65535.0f : png.bit_depth == 8 ? 255.0f : 1.0f;
  for (std::size_t i = 0; i < img.size(); ++i) img.data[i] = static_cast<float>(png.samples[i]) / scale;
  return img;
}

void write_label_png(const fs::path& path, const Grid<std::uint8_t>& labels) {
  GrayPng png{labels.height, labels.width, 8, std::vector<std::uint16_t>(labels.data.begin(), labels.data.end())};
  write_png_gray(path, png);
}

Grid<std::uint8_t> read_label_png(const fs::path& path) {
  const auto png = read_png_gray(path);
  if (png.bit_depth != 8) throw Error("io", path.string() + " is not an 8-bit label map");
  Grid<std::uint8_t> g(png.height, png.width);
  for (std::size_t i = 0; i < g.size(); ++i) g.data[i] = static_cast<std::uint8_t>(png.samples[i]);
  return g;
}

void write_mask_png(const fs::path& path, const Mask& mask) {
  GrayPng png{mask.height, mask.width, 8, std::vector<std::uint16_t>(mask.size())};
  for (std::size_t i = 0; i < mask.size(); ++i) png.samples[i] = mask.data[i] ? 255 : 0;
  write_png_gray(path, png);
}

Mask read_mask_png(const fs::path& path) {
  const auto png = read_png_gray(path);
  Mask m(png.height, png.width, 0);
  for (std::size_t i = 0; i < m.size(); ++i) m.data[i] = png.samples[i] != 0;
  return m;
}

void write_region_masks(const fs::path& dir, const RegionMaskSet& regions, const SeedSet& seeds,
                        int n_f, std::uint64_t rng_seed) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error("io", "cannot create " + dir.string());
  json files = json::array();
  for (int n = 0; n < regions.count; ++n) {
    char name[32];
    std::snprintf(name, sizeof name, "region_%03d.png", n);
    const Mask m = regions.mask(n);
    GrayPng png{m.height, m.width, 1, std::vector<std::uint16_t>(m.data.begin(), m.data.end())};
    write_png_gray(dir / name, png);
    files.push_back(name);
  }
  json coords = json::array();
  for (const auto& s : seeds.coords) coords.push_back({s.row, s.col});
  json index = {{"n_f", n_f},
                {"rng_seed", rng_seed},
                {"seed_coords", coords},
                {"count", regions.count},
                {"height", regions.height},
                {"width", regions.width},
                {"duplicate_seeds", seeds.has_duplicates},
                {"files", files}};
  write_text(dir / "regions.json", index.dump(2) + "\n");
}

namespace {

void put_u16(std::ostream& os, int v) {
  const unsigned char b[2] = {static_cast<unsigned char>(v & 0xFF), static_cast<unsigned char>((v >> 8) & 0xFF)};
  os.write(reinterpret_cast<const char*>(b), 2);
}

int get_u16(const unsigned char* p) { return p[0] | (p[1] << 8); }

}  // namespace

void write_features(const fs::path& path, const ad::Tensor<float>& fm, const std::string& source) {
  if (fm.rank() != 3) throw Error("bad-shape", "feature map must be [C×h×w]");
  for (int d : fm.shape())
    if (d < 1 || d > 65535) throw Error("bad-shape", "feature dimension out of uint16 range");
  ensure_parent(path);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("io", "cannot open " + path.string());
  put_u16(os, fm.dim(0));
  put_u16(os, fm.dim(1));
  put_u16(os, fm.dim(2));
  put_u16(os, 0);
  for (float v : fm.values()) {
    const auto bits = std::bit_cast<std::uint32_t>(v);
    const unsigned char b[4] = {static_cast<unsigned char>(bits), static_cast<unsigned char>(bits >> 8),
                                static_cast<unsigned char>(bits >> 16), static_cast<unsigned char>(bits >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
  }
  if (!os) throw Error("io", "write failed for " + path.string());
  json meta = {{"channels", fm.dim(0)}, {"height", fm.dim(1)}, {"width", fm.dim(2)},
               {"dtype", "float32-le"}, {"header_bytes", 8}, {"source", source}};
  write_text(fs::path(path.string() + ".json"), meta.dump(2) + "\n");
}

ad::Tensor<float> read_features(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("io", "cannot open " + path.string());
  unsigned char header[8];
  if (!is.read(reinterpret_cast<char*>(header), 8)) throw Error("io", "truncated feature header");
  const int c = get_u16(header), h = get_u16(header + 2), w = get_u16(header + 4);
  if (c < 1 || h < 1 || w < 1) throw Error("bad-shape", "feature header has a zero dimension");
  std::vector<float> values(static_cast<std::size_t>(c) * h * w);
  std::vector<unsigned char> raw(values.size() * 4);
  if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
    throw Error("io", "truncated feature payload in " + path.string());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::uint32_t bits = raw[4 * i] | (raw[4 * i + 1] << 8) | (raw[4 * i + 2] << 16) |
                               (static_cast<std::uint32_t>(raw[4 * i + 3]) << 24);
    values[i] = std::bit_cast<float>(bits);
  }
  const fs::path meta_path(path.string() + ".json");
  if (fs::exists(meta_path)) {
    const auto meta = json::parse(read_text(meta_path));
    if (meta.value("channels", c) != c || meta.value("height", h) != h || meta.value("width", w) != w)
      throw Error("bad-shape", "feature metadata disagrees with blob header");
  }
  return ad::Tensor<float>({c, h, w}, std::move(values));
}

void write_text(const fs::path& path, const std::string& text) {
  ensure_parent(path);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("io", "cannot open " + path.string());
  os << text;
  if (!os) throw Error("io", "write failed for " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("io", "cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace pami::io
