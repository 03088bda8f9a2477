#pragma once

#include <cassert>
#include <cstdint>
#include <vector>

namespace restlab {

/// Row-major single-channel 2-D array.
template <typename T>
struct Grid {
  int height = 0;
  int width = 0;
  std::vector<T> px;

  Grid() = default;
  Grid(int h, int w, T fill = T{}) : height(h), width(w), px(static_cast<std::size_t>(h) * w, fill) {}

  T& operator()(int r, int c) { return px[static_cast<std::size_t>(r) * width + c]; }
  const T& operator()(int r, int c) const { return px[static_cast<std::size_t>(r) * width + c]; }

  std::size_t size() const { return px.size(); }

  template <typename U>
  bool same_shape(const Grid<U>& other) const {
    return height == other.height && width == other.width;
  }

  friend bool operator==(const Grid&, const Grid&) = default;
};

using ProbMap = Grid<float>;
using BinaryGrid = Grid<std::uint8_t>;

/// Grayscale image with pixels in [0,1].
struct SampleGrid {
  int id = 0;
  Grid<float> pixels;

  friend bool operator==(const SampleGrid&, const SampleGrid&) = default;
};

/// Binary label; lesion_count is the number of 4-connected foreground components.
struct MaskGrid {
  BinaryGrid pixels;
  int lesion_count = 0;

  friend bool operator==(const MaskGrid&, const MaskGrid&) = default;
};

struct LabeledPair {
  SampleGrid image;
  MaskGrid mask;
};

}  // namespace restlab
