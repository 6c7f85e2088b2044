#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "statechef/errors.hpp"
#include "statechef/io.hpp"
#include "statechef/matrix.hpp"
#include "statechef/metrics.hpp"

namespace statechef {

/// Weighted soft vote: Σ w_m P_m / Σ w_m. Shapes must agree and weights be
/// non-negative with a positive sum.
inline ProbMatrix soft_vote(const std::vector<ProbMatrix>& members, const std::vector<double>& weights) {
  if (members.empty()) throw DataError("soft_vote: no members");
  if (members.size() != weights.size())
    throw DataError("soft_vote: " + std::to_string(members.size()) + " members but " + std::to_string(weights.size()) +
                    " weights");
  double total = 0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw DataError("soft_vote: weights must be finite and non-negative");
    total += w;
  }
  if (!(total > 0.0)) throw DataError("soft_vote: weights sum to zero");
  for (const auto& m : members)
    if (!m.same_shape(members.front()))
      throw DataError("soft_vote: shape mismatch, " + m.shape_string() + " vs " + members.front().shape_string());
  ProbMatrix out(members.front().rows, members.front().cols);
  for (std::size_t m = 0; m < members.size(); ++m) {
    if (weights[m] == 0.0) continue;
    for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] += weights[m] * members[m].values[i];
  }
  for (double& v : out.values) v /= total;
  return out;
}

/// Number of weight units per vector for a grid step: floor(1/step).
inline int grid_units(double step) {
  if (!(step > 0.0) || step > 1.0) throw DataError("grid step must lie in (0, 1]");
  return static_cast<int>(std::floor(1.0 / step + 1e-9));
}

/// Visits every vector of `m` non-negative integers summing to `units`, in
/// lexicographically ascending order.
inline void for_each_composition(std::size_t m, int units, const std::function<void(const std::vector<int>&)>& visit) {
  if (m == 0) return;
  std::vector<int> c(m, 0);
  std::function<void(std::size_t, int)> rec = [&](std::size_t pos, int left) {
    if (pos + 1 == m) {
      c[pos] = left;
      visit(c);
      return;
    }
    for (int v = 0; v <= left; ++v) {
      c[pos] = v;
      rec(pos + 1, left - v);
    }
  };
  rec(0, units);
}

/// C(units + m - 1, m - 1).
inline std::size_t composition_count(std::size_t m, int units) {
  double r = 1;
  for (std::size_t i = 1; i < m; ++i) r = r * static_cast<double>(static_cast<std::size_t>(units) + i) / static_cast<double>(i);
  return static_cast<std::size_t>(std::llround(r));
}

struct WeightSearchResult {
  std::vector<double> weights;
  double score = -1;
  std::size_t evaluated = 0;
};

/// Exhaustive search over weight vectors on the simplex grid with spacing
/// `step`, scoring each soft vote by macro per-class top-1 accuracy on
/// `labels`. Ties keep the lexicographically smallest vector.
inline WeightSearchResult search_weights(const std::vector<ProbMatrix>& members, const std::vector<int>& labels, double step) {
  if (members.empty()) throw DataError("search_weights: no members");
  if (labels.empty()) throw DataError("search_weights: empty validation set");
  for (const auto& m : members)
    if (!m.same_shape(members.front()))
      throw DataError("search_weights: shape mismatch, " + m.shape_string() + " vs " + members.front().shape_string());
  if (labels.size() != members.front().rows)
    throw DataError("search_weights: " + std::to_string(labels.size()) + " labels for " +
                    std::to_string(members.front().rows) + " rows");
  const int units = grid_units(step);
  WeightSearchResult best;
  std::vector<double> w(members.size());
  for_each_composition(members.size(), units, [&](const std::vector<int>& c) {
    ++best.evaluated;
    for (std::size_t i = 0; i < c.size(); ++i) w[i] = static_cast<double>(c[i]) / units;
    const double score = macro_top_k(soft_vote(members, w), labels, 1);
    if (score > best.score) {
      best.score = score;
      best.weights = w;
    }
  });
  return best;
}

inline json to_json(const WeightSearchResult& r, double step) {
  return json{{"weights", r.weights}, {"score", r.score}, {"evaluated", r.evaluated}, {"step", step}};
}

}  // namespace statechef
