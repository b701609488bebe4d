#include "pami/render.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <map>

#include "pami/error.hpp"

namespace pami::render {

namespace {

const std::map<char, const char*>& glyphs() {
  static const std::map<char, const char*> g = {
      {'0', "111101101101111"}, {'1', "010110010010111"}, {'2', "111001111100111"}, {'3', "111001111001111"},
      {'4', "101101111001001"}, {'5', "111100111001111"}, {'6', "111100111101111"}, {'7', "111001010010010"},
      {'8', "111101111101111"}, {'9', "111101111001111"}, {'.', "000000000000010"}, {'-', "000000111000000"},
      {'=', "000111000111000"}, {':', "000010000010000"}, {'_', "000000000000111"}, {'(', "010100100100010"},
      {')', "010001001001010"}, {'/', "001001010100100"}, {',', "000000000010100"}, {'A', "010101111101101"},
      {'B', "110101110101110"}, {'C', "011100100100011"}, {'D', "110101101101110"}, {'E', "111100110100111"},
      {'F', "111100110100100"}, {'G', "011100101101011"}, {'H', "101101111101101"}, {'I', "111010010010111"},
      {'J', "001001001101010"}, {'K', "101101110101101"}, {'L', "100100100100111"}, {'M', "101111111101101"},
      {'N', "110101101101101"}, {'O', "010101101101010"}, {'P', "110101110100100"}, {'Q', "010101101110011"},
      {'R', "110101110101101"}, {'S', "011100010001110"}, {'T', "111010010010010"}, {'U', "101101101101111"},
      {'V', "101101101101010"}, {'W', "101101111111101"}, {'X', "101101010101101"}, {'Y', "101101010010010"},
      {'Z', "111001010100111"}};
  return g;
}

}  // namespace

Canvas::Canvas(int h, int w, Rgb fill) : height(h), width(w), rgb(static_cast<std::size_t>(h) * w * 3) {
  if (h < 1 || w < 1) throw Error("bad-shape", "canvas must be at least 1x1");
  for (std::size_t i = 0; i < rgb.size(); i += 3) {
    rgb[i] = fill.r;
    rgb[i + 1] = fill.g;
    rgb[i + 2] = fill.b;
  }
}

void Canvas::set(int r, int c, Rgb color) {
  if (r < 0 || r >= height || c < 0 || c >= width) return;
  const std::size_t i = (static_cast<std::size_t>(r) * width + c) * 3;
  rgb[i] = color.r;
  rgb[i + 1] = color.g;
  rgb[i + 2] = color.b;
}

Rgb Canvas::get(int r, int c) const {
  const std::size_t i = (static_cast<std::size_t>(r) * width + c) * 3;
  return {rgb[i], rgb[i + 1], rgb[i + 2]};
}

void Canvas::line(int r0, int c0, int r1, int c1, Rgb color) {
  const int dr = std::abs(r1 - r0), dc = std::abs(c1 - c0);
  const int sr = r0 < r1 ? 1 : -1, sc = c0 < c1 ? 1 : -1;
  int err = dc - dr;
  for (;;) {
    set(r0, c0, color);
    if (r0 == r1 && c0 == c1) break;
    const int e2 = 2 * err;
    if (e2 > -dr) {
      err -= dr;
      c0 += sc;
    }
    if (e2 < dc) {
      err += dc;
      r0 += sr;
    }
  }
}

void Canvas::rect(int r0, int c0, int r1, int c1, Rgb color) {
  for (int r = std::min(r0, r1); r <= std::max(r0, r1); ++r)
    for (int c = std::min(c0, c1); c <= std::max(c0, c1); ++c) set(r, c, color);
}

int text_width(const std::string& s, int scale) { return static_cast<int>(s.size()) * 4 * scale - scale; }

void Canvas::text(int r, int c, const std::string& s, Rgb color, int scale) {
  const auto& g = glyphs();
  for (std::size_t k = 0; k < s.size(); ++k) {
    const auto it = g.find(static_cast<char>(std::toupper(static_cast<unsigned char>(s[k]))));
    if (it == g.end()) continue;
    const int c0 = c + static_cast<int>(k) * 4 * scale;
    for (int y = 0; y < 5; ++y)
      for (int x = 0; x < 3; ++x)
        if (it->second[y * 3 + x] == '1') rect(r + y * scale, c0 + x * scale, r + (y + 1) * scale - 1, c0 + (x + 1) * scale - 1, color);
  }
}

Mask contour(const Mask& m) {
  Mask out(m.height, m.width, 0);
  for (int r = 0; r < m.height; ++r)
    for (int c = 0; c < m.width; ++c) {
      if (!m(r, c)) continue;
      const bool edge = r == 0 || c == 0 || r == m.height - 1 || c == m.width - 1 || !m(r - 1, c) ||
                        !m(r + 1, c) || !m(r, c - 1) || !m(r, c + 1);
      out(r, c) = edge;
    }
  return out;
}

Canvas overlay(const Image2D& query, const Mask& prediction, const Mask& truth, double dsc, int scale) {
  if (!prediction.same_shape(truth) || prediction.height != query.height || prediction.width != query.width)
    throw Error("bad-shape", "overlay inputs differ in shape");
  if (scale < 1) throw Error("bad-shape", "overlay scale must be >= 1");
  Canvas cv(query.height * scale, query.width * scale);
  const Mask pc = contour(prediction), tc = contour(truth);
  for (int r = 0; r < query.height; ++r)
    for (int c = 0; c < query.width; ++c) {
      const auto v = static_cast<std::uint8_t>(std::lround(std::clamp(query(r, c), 0.0f, 1.0f) * 255.0f));
      Rgb color{v, v, v};
      if (pc(r, c) && tc(r, c)) color = kBothColor;
      else if (pc(r, c)) color = kPredictionColor;
      else if (tc(r, c)) color = kTruthColor;
      cv.rect(r * scale, c * scale, (r + 1) * scale - 1, (c + 1) * scale - 1, color);
    }
  char label[32];
  std::snprintf(label, sizeof label, "DSC %.3f", dsc);
  const int ts = std::max(1, scale / 2);
  cv.rect(0, 0, 5 * ts + 3, text_width(label, ts) + 3, {0, 0, 0});
  cv.text(2, 2, label, {255, 255, 255}, ts);
  return cv;
}

Canvas line_plot(const std::vector<Series>& series, const std::string& title, const std::string& x_label,
                 const std::string& y_label, int height, int width) {
  Canvas cv(height, width);
  const int left = 56, right = width - 16, top = 28, bottom = height - 40;
  double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  bool first = true;
  for (const auto& s : series) {
    if (s.x.size() != s.y.size()) throw Error("bad-shape", "series x/y lengths differ");
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (first) {
        xmin = xmax = s.x[i];
        ymin = ymax = s.y[i];
        first = false;
      }
      xmin = std::min(xmin, s.x[i]);
      xmax = std::max(xmax, s.x[i]);
      ymin = std::min(ymin, s.y[i]);
      ymax = std::max(ymax, s.y[i]);
    }
  }
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) ymax = ymin + 1;
  const double pad = 0.08 * (ymax - ymin);
  ymin -= pad;
  ymax += pad;
  auto px = [&](double x) { return left + static_cast<int>(std::lround((x - xmin) / (xmax - xmin) * (right - left))); };
  auto py = [&](double y) { return bottom - static_cast<int>(std::lround((y - ymin) / (ymax - ymin) * (bottom - top))); };

  const Rgb axis{0, 0, 0}, grid{225, 225, 225};
  for (int k = 1; k < 4; ++k) {
    const int r = top + k * (bottom - top) / 4;
    cv.line(r, left, r, right, grid);
  }
  cv.line(bottom, left, bottom, right, axis);
  cv.line(top, left, bottom, left, axis);
  char buf[32];
  auto tick_y = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.3f", v);
    cv.text(py(v) - 2, left - 6 - text_width(buf), buf, axis);
    cv.line(py(v), left - 3, py(v), left, axis);
  };
  tick_y(ymin + pad);
  tick_y(ymax - pad);
  for (const auto& s : series)
    for (double x : s.x) {
      std::snprintf(buf, sizeof buf, "%g", x);
      cv.line(bottom, px(x), bottom + 3, px(x), axis);
      cv.text(bottom + 6, px(x) - text_width(buf) / 2, buf, axis);
    }
  cv.text(8, (width - text_width(title, 2)) / 2, title, axis, 2);
  cv.text(height - 14, (left + right - text_width(x_label)) / 2, x_label, axis);
  cv.text(top - 10, 4, y_label, axis);

  static const Rgb palette[] = {{31, 119, 180}, {214, 39, 40}, {44, 160, 44}, {148, 103, 189}, {255, 127, 14}};
  for (std::size_t k = 0; k < series.size(); ++k) {
    const Rgb col = palette[k % 5];
    const auto& s = series[k];
    for (std::size_t i = 0; i + 1 < s.x.size(); ++i) cv.line(py(s.y[i]), px(s.x[i]), py(s.y[i + 1]), px(s.x[i + 1]), col);
    for (std::size_t i = 0; i < s.x.size(); ++i) cv.rect(py(s.y[i]) - 2, px(s.x[i]) - 2, py(s.y[i]) + 2, px(s.x[i]) + 2, col);
    cv.rect(top + 4 + 10 * static_cast<int>(k), right - 90, top + 8 + 10 * static_cast<int>(k), right - 84, col);
    cv.text(top + 4 + 10 * static_cast<int>(k), right - 80, s.label, col);
  }
  return cv;
}

}  // namespace pami::render
