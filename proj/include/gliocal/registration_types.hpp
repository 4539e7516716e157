#pragma once

#include <vector>

#include "gliocal/errors.hpp"

namespace gliocal {

// Row-major raster, index = y*width + x, intensities in [0,1].
struct Image {
  int width = 0;
  int height = 0;
  std::vector<double> v;

  Image() = default;
  Image(int w, int h) : width(w), height(h), v(static_cast<size_t>(w) * h, 0.0) {
    if (w < 2 || h < 2) throw DimensionMismatch("image dimensions must be >= 2");
  }
  double& at(int x, int y) { return v[static_cast<size_t>(y) * width + x]; }
  double at(int x, int y) const { return v[static_cast<size_t>(y) * width + x]; }
};

struct LabelImage {
  int width = 0;
  int height = 0;
  std::vector<int> v;

  LabelImage() = default;
  LabelImage(int w, int h) : width(w), height(h), v(static_cast<size_t>(w) * h, 0) {}
  int& at(int x, int y) { return v[static_cast<size_t>(y) * width + x]; }
  int at(int x, int y) const { return v[static_cast<size_t>(y) * width + x]; }
};

// Per-pixel displacement; units are pixels unless a suffix says otherwise.
struct DisplacementField {
  int width = 0;
  int height = 0;
  std::vector<double> dx;
  std::vector<double> dy;

  DisplacementField() = default;
  DisplacementField(int w, int h)
      : width(w),
        height(h),
        dx(static_cast<size_t>(w) * h, 0.0),
        dy(static_cast<size_t>(w) * h, 0.0) {}
  size_t idx(int x, int y) const { return static_cast<size_t>(y) * width + x; }
};

}  // namespace gliocal
