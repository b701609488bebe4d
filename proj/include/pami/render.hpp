#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "pami/image.hpp"

namespace pami::render {

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

struct Canvas {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel

  Canvas(int h, int w, Rgb fill = {255, 255, 255});
  void set(int r, int c, Rgb color);
  Rgb get(int r, int c) const;
  void line(int r0, int c0, int r1, int c1, Rgb color);
  void rect(int r0, int c0, int r1, int c1, Rgb color);
  // 3×5 bitmap glyphs scaled by `scale`; unknown characters draw as blanks.
  void text(int r, int c, const std::string& s, Rgb color, int scale = 1);
};

int text_width(const std::string& s, int scale = 1);

inline constexpr Rgb kPredictionColor{255, 64, 64};
inline constexpr Rgb kTruthColor{64, 224, 64};
inline constexpr Rgb kBothColor{255, 224, 32};

// Boundary pixels of a mask (4-neighbourhood).
Mask contour(const Mask& m);

// Grayscale query underlay, prediction and ground-truth contours, DSC in the
// top-left corner; every source pixel becomes scale×scale output pixels.
Canvas overlay(const Image2D& query, const Mask& prediction, const Mask& truth, double dsc, int scale = 4);

struct Series {
  std::string label;
  std::vector<double> x, y;
};

// Line plot with markers, axes and min/max tick labels.
Canvas line_plot(const std::vector<Series>& series, const std::string& title, const std::string& x_label,
                 const std::string& y_label, int height = 320, int width = 480);

}  // namespace pami::render
