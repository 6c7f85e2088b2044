#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "statechef/errors.hpp"

namespace statechef::nn {

/// Dense NCHW activation tensor.
template <typename T>
struct Tensor {
  std::array<int, 4> shape{0, 0, 0, 0};
  std::vector<T> data;

  Tensor() = default;
  Tensor(int n, int c, int h, int w, T fill = T(0))
      : shape{n, c, h, w}, data(static_cast<std::size_t>(n) * c * h * w, fill) {}

  int n() const { return shape[0]; }
  int c() const { return shape[1]; }
  int h() const { return shape[2]; }
  int w() const { return shape[3]; }
  std::size_t size() const { return data.size(); }
  std::size_t plane() const { return static_cast<std::size_t>(shape[2]) * shape[3]; }
  std::size_t sample_size() const { return static_cast<std::size_t>(shape[1]) * plane(); }

  T* sample(int i) { return data.data() + static_cast<std::size_t>(i) * sample_size(); }
  const T* sample(int i) const { return data.data() + static_cast<std::size_t>(i) * sample_size(); }

  T& at(int i, int ch, int y, int x) {
    return data[((static_cast<std::size_t>(i) * shape[1] + ch) * shape[2] + y) * shape[3] + x];
  }
  T at(int i, int ch, int y, int x) const {
    return data[((static_cast<std::size_t>(i) * shape[1] + ch) * shape[2] + y) * shape[3] + x];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

inline std::string shape_string(const std::array<int, 4>& s) {
  return std::to_string(s[0]) + "x" + std::to_string(s[1]) + "x" + std::to_string(s[2]) + "x" + std::to_string(s[3]);
}

}  // namespace statechef::nn
