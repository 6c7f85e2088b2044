#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "statechef/errors.hpp"

namespace statechef {

/// Row-major N×C matrix of class probabilities (or any per-sample scores).
struct ProbMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  ProbMatrix() = default;
  ProbMatrix(std::size_t n, std::size_t c, double fill = 0.0) : rows(n), cols(c), values(n * c, fill) {}

  static ProbMatrix from_rows(const std::vector<std::vector<double>>& rs) {
    ProbMatrix m;
    m.rows = rs.size();
    m.cols = rs.empty() ? 0 : rs.front().size();
    for (const auto& r : rs) {
      if (r.size() != m.cols) throw DataError("ragged probability rows");
      m.values.insert(m.values.end(), r.begin(), r.end());
    }
    return m;
  }

  double& at(std::size_t i, std::size_t j) { return values[i * cols + j]; }
  double at(std::size_t i, std::size_t j) const { return values[i * cols + j]; }

  std::span<double> row(std::size_t i) { return {values.data() + i * cols, cols}; }
  std::span<const double> row(std::size_t i) const { return {values.data() + i * cols, cols}; }

  bool same_shape(const ProbMatrix& o) const { return rows == o.rows && cols == o.cols; }
  std::string shape_string() const { return std::to_string(rows) + "x" + std::to_string(cols); }

  bool operator==(const ProbMatrix&) const = default;
};

}  // namespace statechef
