#pragma once

#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include "statechef/matrix.hpp"
#include "statechef/rng.hpp"
#include "statechef/taxonomy.hpp"

namespace testing_support {

inline std::filesystem::path source_dir() { return STATECHEF_SOURCE_DIR; }

inline const statechef::Taxonomy& taxonomy() {
  static const statechef::Taxonomy t = statechef::Taxonomy::load(source_dir() / "data" / "taxonomy.json");
  return t;
}

inline statechef::json taxonomy_doc() { return statechef::read_json_file(source_dir() / "data" / "taxonomy.json"); }

class TempDir {
 public:
  TempDir() {
    std::string tmpl = (std::filesystem::temp_directory_path() / "statechef-test-XXXXXX").string();
    if (!::mkdtemp(tmpl.data())) throw std::runtime_error("mkdtemp failed");
    path_ = tmpl;
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

/// Random probability rows; with `ties`, values are drawn from a coarse grid so
/// equal entries are common.
inline statechef::ProbMatrix random_probs(statechef::Rng& rng, std::size_t n, std::size_t c, bool ties = false) {
  statechef::ProbMatrix m(n, c);
  for (std::size_t i = 0; i < n; ++i) {
    double sum = 0;
    for (std::size_t j = 0; j < c; ++j) {
      const double v = ties ? static_cast<double>(rng.below(4)) + 1.0 : rng.uniform() + 1e-3;
      m.at(i, j) = v;
      sum += v;
    }
    for (std::size_t j = 0; j < c; ++j) m.at(i, j) /= sum;
  }
  return m;
}

inline std::vector<int> random_labels(statechef::Rng& rng, std::size_t n, std::size_t c) {
  std::vector<int> y(n);
  for (auto& v : y) v = static_cast<int>(rng.below(c));
  return y;
}

}  // namespace testing_support
