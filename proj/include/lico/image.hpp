#pragma once

#include <cstddef>
#include <vector>

#include "lico/errors.hpp"
#include "lico/tensor.hpp"

namespace lico {

/// H x W x C image, row-major, values in [0, 1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, std::size_t c, float fill = 0.0f)
      : height(h), width(w), channels(c), pixels(h * w * c, fill) {}

  float& at(std::size_t r, std::size_t c, std::size_t ch) {
    return pixels[(r * width + c) * channels + ch];
  }
  float at(std::size_t r, std::size_t c, std::size_t ch) const {
    return pixels[(r * width + c) * channels + ch];
  }
  std::size_t area() const { return height * width; }

  bool operator==(const Image&) const = default;

  template <class Real>
  BasicTensor<Real> to_tensor() const {
    return BasicTensor<Real>({height, width, channels},
                             std::vector<Real>(pixels.begin(), pixels.end()));
  }
};

/// Axis-aligned box with inclusive integer corners.
struct Box {
  int x0 = 0;
  int y0 = 0;
  int x1 = 0;
  int y1 = 0;

  bool contains(int x, int y) const { return x >= x0 && x <= x1 && y >= y0 && y <= y1; }
  int area() const { return (x1 - x0 + 1) * (y1 - y0 + 1); }
  bool operator==(const Box&) const = default;
};

}  // namespace lico
