#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

#include "statechef/errors.hpp"
#include "statechef/image.hpp"
#include "statechef/io.hpp"
#include "statechef/rng.hpp"

namespace statechef {

/// Online augmentation parameters. Defaults: flip p=0.5, rotation ±15°,
/// shift ±10% and zoom ±10%.
struct AugmentationConfig {
  bool enabled = true;
  double flip_probability = 0.5;
  double rotation_degrees = 15.0;
  double shift_fraction = 0.10;
  double zoom_range = 0.10;
  std::uint64_t seed = 0;

  static AugmentationConfig disabled() {
    AugmentationConfig c;
    c.enabled = false;
    return c;
  }

  void validate() const {
    if (!(flip_probability >= 0.0 && flip_probability <= 1.0))
      throw DataError("augmentation: flip probability must be in [0, 1]");
    if (!(rotation_degrees >= 0.0) || !(shift_fraction >= 0.0) || !(zoom_range >= 0.0))
      throw DataError("augmentation: ranges must be non-negative");
    if (zoom_range >= 1.0) throw DataError("augmentation: zoom range must be below 1");
  }

  bool is_identity() const {
    return !enabled || (flip_probability == 0.0 && rotation_degrees == 0.0 && shift_fraction == 0.0 &&
                        zoom_range == 0.0);
  }

  bool operator==(const AugmentationConfig&) const = default;
};

inline void to_json(json& j, const AugmentationConfig& c) {
  j = json{{"enabled", c.enabled},           {"flip_probability", c.flip_probability},
           {"rotation_degrees", c.rotation_degrees}, {"shift_fraction", c.shift_fraction},
           {"zoom_range", c.zoom_range},     {"seed", c.seed}};
}

inline void from_json(const json& j, AugmentationConfig& c) {
  AugmentationConfig d;
  c.enabled = j.value("enabled", d.enabled);
  c.flip_probability = j.value("flip_probability", d.flip_probability);
  c.rotation_degrees = j.value("rotation_degrees", d.rotation_degrees);
  c.shift_fraction = j.value("shift_fraction", d.shift_fraction);
  c.zoom_range = j.value("zoom_range", d.zoom_range);
  c.seed = j.value("seed", d.seed);
  c.validate();
}

inline Image flip_horizontal(const Image& img) {
  Image out = img;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(y, img.width - 1 - x, c);
  return out;
}

/// Draws one random view of `image`. Random draws come only from `draw`, in a
/// fixed order, so identical generator state gives a bit-identical result.
inline Image augment_view(const Image& image, const AugmentationConfig& config, Rng& draw) {
  image.check_shape();
  config.validate();
  if (config.is_identity()) return image;

  const bool flip = draw.bernoulli(config.flip_probability);
  const double angle = config.rotation_degrees > 0 ? draw.uniform(-config.rotation_degrees, config.rotation_degrees) : 0.0;
  const double shift_y = config.shift_fraction > 0 ? draw.uniform(-config.shift_fraction, config.shift_fraction) : 0.0;
  const double shift_x = config.shift_fraction > 0 ? draw.uniform(-config.shift_fraction, config.shift_fraction) : 0.0;
  const double zoom = config.zoom_range > 0 ? draw.uniform(1.0 - config.zoom_range, 1.0 + config.zoom_range) : 1.0;

  Image base = flip ? flip_horizontal(image) : image;
  if (angle == 0.0 && shift_y == 0.0 && shift_x == 0.0 && zoom == 1.0) return base;

  // Inverse mapping: output pixel -> source location, about the image centre.
  const double theta = angle * std::numbers::pi / 180.0;
  const double cos_t = std::cos(theta) / zoom;
  const double sin_t = std::sin(theta) / zoom;
  const double cy = (image.height - 1) / 2.0;
  const double cx = (image.width - 1) / 2.0;
  const double ty = shift_y * image.height;
  const double tx = shift_x * image.width;

  Image out(image.height, image.width);
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      const double dy = y - cy - ty;
      const double dx = x - cx - tx;
      const auto sy = static_cast<float>(cy + cos_t * dy - sin_t * dx);
      const auto sx = static_cast<float>(cx + sin_t * dy + cos_t * dx);
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = sample_bilinear(base, sy, sx, c);
    }
  }
  return out;
}

}  // namespace statechef
