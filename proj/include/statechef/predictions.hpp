#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "statechef/errors.hpp"
#include "statechef/io.hpp"
#include "statechef/matrix.hpp"

namespace statechef {

/// Per-sample class probabilities from one model, one JSON object per line:
/// {"sample_id", "model_id", "probs", "label"?, "object"?}.
struct PredictionDump {
  std::string model_id;
  std::vector<std::string> class_names;
  std::vector<std::string> sample_ids;
  std::vector<std::string> objects;  // empty strings when unknown
  ProbMatrix probs;
  std::vector<int> labels;  // empty when unlabeled

  bool labeled() const { return !labels.empty(); }
};

inline std::string dump_to_jsonl(const PredictionDump& d) {
  std::string out;
  for (std::size_t i = 0; i < d.probs.rows; ++i) {
    const auto row = d.probs.row(i);
    json j = {{"sample_id", d.sample_ids[i]}, {"model_id", d.model_id}, {"probs", std::vector<double>(row.begin(), row.end())}};
    if (d.labeled()) j["label"] = d.labels[i];
    if (!d.objects.empty() && !d.objects[i].empty()) j["object"] = d.objects[i];
    if (i == 0 && !d.class_names.empty()) j["class_names"] = d.class_names;
    out += j.dump() + "\n";
  }
  return out;
}

inline PredictionDump dump_from_jsonl(std::istream& in, const std::string& where) {
  PredictionDump d;
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t n = 0;
  std::size_t labeled = 0;
  while (std::getline(in, line)) {
    ++n;
    if (trim(line).empty()) continue;
    try {
      const json j = json::parse(line);
      d.sample_ids.push_back(j.at("sample_id").get<std::string>());
      const std::string model = j.value("model_id", std::string());
      if (rows.empty()) d.model_id = model;
      else if (model != d.model_id) throw DataError("mixed model ids '" + d.model_id + "' and '" + model + "'");
      rows.push_back(j.at("probs").get<std::vector<double>>());
      if (j.contains("label") && !j.at("label").is_null()) {
        d.labels.push_back(j.at("label").get<int>());
        ++labeled;
      } else {
        d.labels.push_back(-1);
      }
      d.objects.push_back(j.value("object", std::string()));
      if (j.contains("class_names")) d.class_names = j.at("class_names").get<std::vector<std::string>>();
    } catch (const json::exception& e) {
      throw DataError(where + ":" + std::to_string(n) + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError(where + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  if (labeled != 0 && labeled != rows.size()) throw DataError(where + ": some rows are labeled and some are not");
  if (labeled == 0) d.labels.clear();
  d.probs = ProbMatrix::from_rows(rows);
  if (!d.class_names.empty() && d.class_names.size() != d.probs.cols)
    throw DataError(where + ": class_names does not match the probability width");
  return d;
}

inline PredictionDump load_dump(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read predictions '" + path.string() + "'");
  return dump_from_jsonl(in, path.string());
}

/// Reorders `other` to the sample order of `reference`; both must cover the same samples.
inline PredictionDump align_dump(const PredictionDump& reference, const PredictionDump& other) {
  if (other.probs.rows != reference.probs.rows)
    throw DataError("prediction dumps cover different samples (" + std::to_string(reference.probs.rows) + " vs " +
                    std::to_string(other.probs.rows) + " rows)");
  std::map<std::string, std::size_t> pos;
  for (std::size_t i = 0; i < other.sample_ids.size(); ++i) pos[other.sample_ids[i]] = i;
  PredictionDump out = other;
  out.sample_ids = reference.sample_ids;
  out.probs = ProbMatrix(reference.probs.rows, other.probs.cols);
  out.objects.assign(reference.probs.rows, std::string());
  if (other.labeled()) out.labels.assign(reference.probs.rows, -1);
  for (std::size_t i = 0; i < reference.sample_ids.size(); ++i) {
    auto it = pos.find(reference.sample_ids[i]);
    if (it == pos.end()) throw DataError("sample '" + reference.sample_ids[i] + "' missing from '" + other.model_id + "'");
    const auto src = other.probs.row(it->second);
    std::copy(src.begin(), src.end(), out.probs.row(i).begin());
    out.objects[i] = other.objects.empty() ? std::string() : other.objects[it->second];
    if (other.labeled()) out.labels[i] = other.labels[it->second];
  }
  return out;
}

}  // namespace statechef
