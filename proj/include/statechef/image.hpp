#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "statechef/errors.hpp"

namespace statechef {

/// Interleaved RGB image, H×W×3, float samples nominally in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;  // (y * width + x) * 3 + c

  Image() = default;
  Image(int h, int w, float fill = 0.0f) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, fill) {
    if (h < 1 || w < 1) throw DataError("image must be at least 1x1, got " + std::to_string(h) + "x" + std::to_string(w));
  }

  static constexpr int channels() { return 3; }

  float& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  float at(int y, int x, int c) const { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }

  void check_shape() const {
    if (height < 1 || width < 1 || pixels.size() != static_cast<std::size_t>(height) * width * 3)
      throw DataError("malformed image: " + std::to_string(height) + "x" + std::to_string(width) + " with " +
                      std::to_string(pixels.size()) + " samples (expected H*W*3)");
  }

  bool operator==(const Image&) const = default;
};

/// Bilinear sample with edge clamping.
inline float sample_bilinear(const Image& img, float y, float x, int c) {
  y = std::clamp(y, 0.0f, static_cast<float>(img.height - 1));
  x = std::clamp(x, 0.0f, static_cast<float>(img.width - 1));
  const int y0 = static_cast<int>(std::floor(y));
  const int x0 = static_cast<int>(std::floor(x));
  const int y1 = std::min(y0 + 1, img.height - 1);
  const int x1 = std::min(x0 + 1, img.width - 1);
  const float fy = y - static_cast<float>(y0);
  const float fx = x - static_cast<float>(x0);
  const float top = img.at(y0, x0, c) * (1 - fx) + img.at(y0, x1, c) * fx;
  const float bottom = img.at(y1, x0, c) * (1 - fx) + img.at(y1, x1, c) * fx;
  return top * (1 - fy) + bottom * fy;
}

inline Image resize_bilinear(const Image& src, int height, int width) {
  src.check_shape();
  if (src.height == height && src.width == width) return src;
  Image out(height, width);
  const float sy = static_cast<float>(src.height) / static_cast<float>(height);
  const float sx = static_cast<float>(src.width) / static_cast<float>(width);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const float fy = (static_cast<float>(y) + 0.5f) * sy - 0.5f;
      const float fx = (static_cast<float>(x) + 0.5f) * sx - 0.5f;
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = sample_bilinear(src, fy, fx, c);
    }
  }
  return out;
}

}  // namespace statechef
