#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include "statechef/errors.hpp"
#include "statechef/image.hpp"
#include "statechef/manifest.hpp"
#include "statechef/rng.hpp"
#include "statechef/taxonomy.hpp"

namespace statechef {

/// Resolves a record to pixels.
using ImageLoader = std::function<Image(const SampleRecord&)>;

/// Images with integer labels in [0, class_count).
struct LabeledImages {
  std::vector<Image> images;
  std::vector<int> labels;
  std::vector<std::string> ids;
  int class_count = 0;

  std::size_t size() const { return images.size(); }
  bool empty() const { return images.empty(); }
};

// ------------------------------------------------------- procedural textures

inline constexpr std::string_view kSyntheticScheme = "synth://texture/";

/// Texture for `class_index`: a class-specific colour, grating orientation and
/// frequency, with per-variant phase, contrast and pixel noise.
inline Image synthetic_texture(int class_index, std::uint64_t variant, int size) {
  Image img(size, size);
  Rng rng(derive_seed(0x7e47u, static_cast<std::uint64_t>(class_index), variant));
  const double golden = 0.61803398875;
  const double hue = std::fmod(class_index * golden, 1.0);
  auto channel = [&](double offset) { return 0.5 + 0.35 * std::cos(2 * std::numbers::pi * (hue + offset)); };
  const double base[3] = {channel(0.0), channel(1.0 / 3), channel(2.0 / 3)};
  const double theta = std::numbers::pi * class_index / 11.0 + rng.uniform(-0.08, 0.08);
  const double freq = (1.5 + (class_index % 4)) * 2 * std::numbers::pi / size;
  const double phase = rng.uniform(0, 2 * std::numbers::pi);
  const double contrast = rng.uniform(0.15, 0.3);
  const double brightness = rng.uniform(-0.06, 0.06);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double wave = std::sin(freq * (x * std::cos(theta) + y * std::sin(theta)) + phase);
      for (int c = 0; c < 3; ++c) {
        const double v = base[c] + brightness + contrast * wave + rng.uniform(-0.04, 0.04);
        img.at(y, x, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return img;
}

inline std::string synthetic_uri(int class_index, std::uint64_t variant, int size) {
  return std::string(kSyntheticScheme) + std::to_string(class_index) + "/" + std::to_string(variant) +
         "?size=" + std::to_string(size);
}

inline bool is_synthetic_uri(const std::string& uri) { return uri.rfind(kSyntheticScheme, 0) == 0; }

inline Image load_synthetic(const std::string& uri) {
  int cls = 0, size = 0;
  unsigned long long variant = 0;
  if (std::sscanf(uri.c_str() + kSyntheticScheme.size(), "%d/%llu?size=%d", &cls, &variant, &size) != 3 || cls < 0 ||
      size < 1)
    throw DataError("malformed synthetic URI '" + uri + "'");
  return synthetic_texture(cls, variant, size);
}

/// Loader for synthetic URIs; other URIs go to `fallback` when provided.
inline ImageLoader make_loader(ImageLoader fallback = {}) {
  return [fallback](const SampleRecord& r) -> Image {
    if (is_synthetic_uri(r.uri)) return load_synthetic(r.uri);
    if (fallback) return fallback(r);
    throw DataError("record '" + r.id + "': no decoder for '" + r.uri + "'");
  };
}

/// `per_class` synthetic records for each of the taxonomy's classes.
inline DatasetManifest synthetic_manifest(const Taxonomy& taxonomy, std::size_t per_class, int size,
                                          const std::string& object = "synthetic") {
  DatasetManifest m;
  m.taxonomy_version = taxonomy.version();
  for (const auto& c : taxonomy.classes()) {
    for (std::size_t i = 0; i < per_class; ++i) {
      SampleRecord r;
      r.id = "syn-" + c.name + "-" + std::to_string(i);
      r.uri = synthetic_uri(c.index, i, size);
      r.object = object;
      r.state = c.name;
      r.source = Source::synthetic;
      r.width = size;
      r.height = size;
      m.records.push_back(std::move(r));
    }
  }
  return m;
}

/// Per-class image counts of the reconstructed full dataset: 9309 images,
/// "whole" and "sliced" above 1000, the rest between 700 and 1000.
inline std::vector<std::size_t> reference_class_histogram() {
  return {1230, 760, 720, 1150, 880, 790, 740, 810, 770, 729, 730};
}

/// Synthetic-URI manifest with `counts[k]` records of class k.
inline DatasetManifest histogram_manifest(const Taxonomy& taxonomy, const std::vector<std::size_t>& counts) {
  if (counts.size() != taxonomy.class_count()) throw DataError("histogram must have one count per class");
  DatasetManifest m;
  m.taxonomy_version = taxonomy.version();
  for (std::size_t k = 0; k < counts.size(); ++k) {
    const auto& c = taxonomy.classes()[k];
    for (std::size_t i = 0; i < counts[k]; ++i) {
      SampleRecord r;
      r.id = c.name + "-" + std::to_string(100000 + i);
      r.uri = synthetic_uri(c.index, i, 32);
      r.object = "synthetic";
      r.state = c.name;
      r.source = Source::synthetic;
      m.records.push_back(std::move(r));
    }
  }
  return m;
}

/// Loads records, resizes to `input_size` and maps each state (synonyms folded)
/// to its position in `class_names`.
inline LabeledImages load_labeled(const std::vector<SampleRecord>& records, const std::vector<std::string>& class_names,
                                  const Taxonomy& taxonomy, const ImageLoader& loader, int input_size) {
  LabeledImages out;
  out.class_count = static_cast<int>(class_names.size());
  for (const auto& r : records) {
    const std::string& state = taxonomy.canonical_state(r.state);
    const auto it = std::find(class_names.begin(), class_names.end(), state);
    if (it == class_names.end())
      throw DataError("record '" + r.id + "': state '" + r.state + "' is not one of the model's classes");
    Image img = loader(r);
    out.images.push_back(resize_bilinear(img, input_size, input_size));
    out.labels.push_back(static_cast<int>(it - class_names.begin()));
    out.ids.push_back(r.id);
  }
  return out;
}

}  // namespace statechef
