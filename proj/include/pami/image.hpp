#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace pami {

// Dense row-major H×W grid.
template <typename V>
struct Grid {
  int height = 0;
  int width = 0;
  std::vector<V> data;

  Grid() = default;
  Grid(int h, int w, V fill = V{})
      : height(h), width(w), data(static_cast<std::size_t>(h) * static_cast<std::size_t>(w), fill) {}

  std::size_t size() const { return data.size(); }
  V& operator()(int r, int c) { return data[static_cast<std::size_t>(r) * width + c]; }
  const V& operator()(int r, int c) const { return data[static_cast<std::size_t>(r) * width + c]; }
  bool same_shape(const Grid& o) const { return height == o.height && width == o.width; }
  friend bool operator==(const Grid&, const Grid&) = default;
};

// One slice, intensities in [0,1].
using Image2D = Grid<float>;
// Binary mask (values 0/1).
using Mask = Grid<std::uint8_t>;
using LabelMap = Grid<int>;

inline std::size_t count_nonzero(const Mask& m) {
  std::size_t n = 0;
  for (auto v : m.data) n += v != 0;
  return n;
}

}  // namespace pami
