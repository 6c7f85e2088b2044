#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "statechef/digest.hpp"
#include "statechef/errors.hpp"
#include "statechef/io.hpp"
#include "statechef/rng.hpp"
#include "statechef/taxonomy.hpp"

namespace statechef {

enum class Split { unassigned, train, test, val };
enum class Source { web_crawl, imagenet, synthetic };
enum class SampleFlag { multi_state, ambiguous, mislabeled_suspect };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::test: return "test";
    case Split::val: return "val";
    case Split::unassigned: break;
  }
  return "unassigned";
}

inline std::string_view to_string(Source s) {
  switch (s) {
    case Source::imagenet: return "imagenet";
    case Source::synthetic: return "synthetic";
    case Source::web_crawl: break;
  }
  return "web-crawl";
}

inline std::string_view to_string(SampleFlag f) {
  switch (f) {
    case SampleFlag::ambiguous: return "ambiguous";
    case SampleFlag::mislabeled_suspect: return "mislabeled_suspect";
    case SampleFlag::multi_state: break;
  }
  return "multi_state";
}

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  if (s == "val") return Split::val;
  if (s == "unassigned") return Split::unassigned;
  throw DataError("unknown split '" + std::string(s) + "'");
}

inline Source parse_source(std::string_view s) {
  if (s == "web-crawl") return Source::web_crawl;
  if (s == "imagenet") return Source::imagenet;
  if (s == "synthetic") return Source::synthetic;
  throw DataError("unknown source '" + std::string(s) + "'");
}

inline SampleFlag parse_flag(std::string_view s) {
  if (s == "multi_state") return SampleFlag::multi_state;
  if (s == "ambiguous") return SampleFlag::ambiguous;
  if (s == "mislabeled_suspect") return SampleFlag::mislabeled_suspect;
  throw DataError("unknown flag '" + std::string(s) + "'");
}

/// Outcome of human review, carried by records exported from the labeling workflow.
struct ReviewInfo {
  std::string status;    // "accepted" or "overridden"
  std::string proposed;  // model's top-1 state
  std::string model_ref;
  bool operator==(const ReviewInfo&) const = default;
};

struct SampleRecord {
  std::string id;
  std::string uri;
  std::string object;
  std::string state;
  Split split = Split::unassigned;
  Source source = Source::web_crawl;
  std::set<SampleFlag> flags;
  int width = 0;  // 0 when unknown
  int height = 0;
  std::optional<ReviewInfo> review;

  bool operator==(const SampleRecord&) const = default;
};

inline json record_to_json(const SampleRecord& r) {
  json flags = json::array();
  for (auto f : r.flags) flags.push_back(to_string(f));
  json j = {{"id", r.id},
            {"uri", r.uri},
            {"object", r.object},
            {"state", r.state},
            {"split", to_string(r.split)},
            {"source", to_string(r.source)},
            {"flags", flags},
            {"width", r.width},
            {"height", r.height}};
  if (r.review) {
    j["review"] = {{"status", r.review->status}, {"proposed", r.review->proposed}, {"model_ref", r.review->model_ref}};
  }
  return j;
}

inline SampleRecord record_from_json(const json& j) {
  if (!j.is_object()) throw DataError("record must be a JSON object");
  SampleRecord r;
  auto str = [&](const char* key) -> std::string {
    if (!j.contains(key) || !j.at(key).is_string()) throw DataError(std::string("record: missing string field '") + key + "'");
    return j.at(key).get<std::string>();
  };
  r.id = str("id");
  r.uri = str("uri");
  r.object = str("object");
  r.state = str("state");
  r.split = parse_split(j.value("split", std::string("unassigned")));
  r.source = parse_source(j.value("source", std::string("web-crawl")));
  if (j.contains("flags")) {
    for (const auto& f : j.at("flags")) r.flags.insert(parse_flag(f.get<std::string>()));
  }
  r.width = j.value("width", 0);
  r.height = j.value("height", 0);
  if (j.contains("review") && j.at("review").is_object()) {
    const auto& rv = j.at("review");
    r.review = ReviewInfo{rv.value("status", std::string()), rv.value("proposed", std::string()),
                          rv.value("model_ref", std::string())};
  }
  return r;
}

/// Train/test/val fractions.
struct SplitRatios {
  double train = 0.70;
  double test = 0.15;
  double val = 0.15;

  std::array<double, 3> as_array() const { return {train, test, val}; }

  void validate() const {
    for (double r : as_array())
      if (!(r >= 0.0)) throw DataError("split ratios must be non-negative");
    if (std::abs(train + test + val - 1.0) > 1e-9)
      throw DataError("split ratios must sum to 1 (got " + std::to_string(train + test + val) + ")");
  }

  static SplitRatios parse(const std::string& text) {
    const auto parts = split_string(text, ',');
    if (parts.size() != 3) throw DataError("ratios must be three comma-separated fractions: '" + text + "'");
    SplitRatios r;
    try {
      r.train = std::stod(parts[0]);
      r.test = std::stod(parts[1]);
      r.val = std::stod(parts[2]);
    } catch (const std::exception&) {
      throw DataError("ratios must be numeric: '" + text + "'");
    }
    r.validate();
    return r;
  }

  bool operator==(const SplitRatios&) const = default;
};

/// Value-semantic collection of sample records. Operations return new manifests.
struct DatasetManifest {
  std::vector<SampleRecord> records;
  std::optional<SplitRatios> ratios;
  std::string taxonomy_version;

  std::size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }

  std::vector<SampleRecord> in_split(Split s) const {
    std::vector<SampleRecord> out;
    std::copy_if(records.begin(), records.end(), std::back_inserter(out),
                 [s](const SampleRecord& r) { return r.split == s; });
    return out;
  }

  DatasetManifest subset(Split s) const {
    DatasetManifest m{in_split(s), ratios, taxonomy_version};
    return m;
  }

  /// Throws on duplicate ids, and on states outside the object's admissible set
  /// when a taxonomy is supplied ("other" is always allowed).
  void validate(const Taxonomy* taxonomy = nullptr) const {
    std::set<std::string_view> ids;
    for (const auto& r : records) {
      if (r.id.empty()) throw DataError("record with empty id");
      if (!ids.insert(r.id).second) throw DataError("duplicate record id '" + r.id + "'");
      if (taxonomy) {
        if (!taxonomy->find_class(r.state))
          throw DataError("record '" + r.id + "': unknown state '" + r.state + "'");
        if (taxonomy->find_object(r.object) && r.state != kOtherClass && !taxonomy->is_admissible(r.object, r.state))
          throw DataError("record '" + r.id + "': state '" + r.state + "' is not admissible for '" + r.object + "'");
      }
    }
  }

  bool operator==(const DatasetManifest&) const = default;
};

// ---------------------------------------------------------------- file format

inline std::string manifest_to_jsonl(const DatasetManifest& m) {
  std::string out;
  for (const auto& r : m.records) {
    out += record_to_json(r).dump();
    out += '\n';
  }
  return out;
}

inline DatasetManifest manifest_from_jsonl(std::istream& in, const std::string& where = "manifest") {
  DatasetManifest m;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      m.records.push_back(record_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw DataError(where + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError(where + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  m.validate();
  return m;
}

inline std::filesystem::path manifest_meta_path(const std::filesystem::path& path) {
  return path.string() + ".meta.json";
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read manifest '" + path.string() + "'");
  DatasetManifest m = manifest_from_jsonl(in, path.string());
  const auto meta = manifest_meta_path(path);
  if (std::filesystem::exists(meta)) {
    const json j = read_json_file(meta);
    if (j.contains("ratios") && j.at("ratios").is_array() && j.at("ratios").size() == 3) {
      m.ratios = SplitRatios{j["ratios"][0].get<double>(), j["ratios"][1].get<double>(), j["ratios"][2].get<double>()};
    }
    m.taxonomy_version = j.value("taxonomy_version", std::string());
  }
  return m;
}

/// Writes the line-delimited records plus a `.meta.json` sidecar (ratios,
/// taxonomy hash, provenance). Single writer per file, via an advisory lock.
inline void save_manifest(const std::filesystem::path& path, const DatasetManifest& m, const json& provenance = {}) {
  FileLock lock(path);
  write_file_atomic(path, manifest_to_jsonl(m));
  json meta = {{"record_count", m.records.size()}, {"taxonomy_version", m.taxonomy_version}};
  if (m.ratios) meta["ratios"] = {m.ratios->train, m.ratios->test, m.ratios->val};
  if (!provenance.is_null()) meta["provenance"] = provenance;
  write_json_file(manifest_meta_path(path), meta);
}

// ----------------------------------------------------------------- operations

/// Largest-remainder apportionment of `n` items over `ratios`; remainders
/// within 1e-9 are ties, resolved toward the earlier slot (train, then test).
inline std::array<std::size_t, 3> apportion(std::size_t n, const SplitRatios& ratios) {
  const auto r = ratios.as_array();
  std::array<std::size_t, 3> counts{};
  std::array<double, 3> remainder{};
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    const double exact = r[i] * static_cast<double>(n);
    const double fl = std::floor(exact + 1e-9);
    counts[i] = static_cast<std::size_t>(fl);
    remainder[i] = std::max(0.0, exact - fl);
    assigned += counts[i];
  }
  // Guard against floating overshoot.
  while (assigned > n) {
    const auto it = std::min_element(remainder.begin(), remainder.end());
    const auto k = static_cast<std::size_t>(it - remainder.begin());
    if (counts[k] == 0) break;
    --counts[k];
    --assigned;
  }
  std::array<std::size_t, 3> order = {0, 1, 2};
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b] + 1e-9; });
  for (std::size_t i = 0; assigned < n; i = (i + 1) % 3) {
    if (r[order[i]] > 0.0) {
      ++counts[order[i]];
      ++assigned;
    }
  }
  return counts;
}

/// Per-state-class stratified split. The assignment depends only on the seed
/// and the record ids (records are canonicalized by id before shuffling).
inline DatasetManifest stratified_split(const DatasetManifest& manifest, const SplitRatios& ratios, std::uint64_t seed,
                                        bool allow_reassign = false) {
  ratios.validate();
  manifest.validate();
  if (!allow_reassign) {
    for (const auto& r : manifest.records)
      if (r.split != Split::unassigned)
        throw DataError("record '" + r.id + "' already has split '" + std::string(to_string(r.split)) +
                        "'; pass the reassignment flag to re-split");
  }

  std::map<std::string, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < manifest.records.size(); ++i) by_class[manifest.records[i].state].push_back(i);

  DatasetManifest out = manifest;
  out.ratios = ratios;
  for (auto& [state, idx] : by_class) {
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return manifest.records[a].id < manifest.records[b].id; });
    Rng rng(derive_seed(seed, hash_string(state)));
    rng.shuffle(idx);
    const auto counts = apportion(idx.size(), ratios);
    std::size_t pos = 0;
    const std::array<Split, 3> slots = {Split::train, Split::test, Split::val};
    for (std::size_t s = 0; s < 3; ++s)
      for (std::size_t k = 0; k < counts[s]; ++k) out.records[idx[pos++]].split = slots[s];
  }
  return out;
}

/// Histogram over state names (as written in the records).
inline std::map<std::string, std::size_t> class_stats(const DatasetManifest& manifest) {
  std::map<std::string, std::size_t> counts;
  for (const auto& r : manifest.records) ++counts[r.state];
  return counts;
}

/// Histogram over the taxonomy's classes, in canonical order; synonyms are folded.
inline std::vector<std::size_t> class_stats(const DatasetManifest& manifest, const Taxonomy& taxonomy) {
  std::vector<std::size_t> counts(taxonomy.class_count(), 0);
  for (const auto& r : manifest.records) ++counts[static_cast<std::size_t>(taxonomy.class_index(r.state))];
  return counts;
}

struct LineError {
  std::size_t line = 0;
  std::string message;
};

struct CrawlImport {
  std::vector<SampleRecord> records;
  std::vector<LineError> errors;
};

inline bool is_well_formed_uri(const std::string& s) {
  static const std::regex uri(R"(^(https?|file)://[^\s/]*(/[^\s]*)?$)");
  static const std::regex abs_path(R"(^/[^\s]+$)");
  return std::regex_match(s, uri) || std::regex_match(s, abs_path);
}

/// Parses a crawl export (one URI per line, blank lines ignored). Malformed
/// lines are reported with line numbers and skipped.
inline CrawlImport import_crawl_list(std::istream& in, const std::string& object, const std::string& keyword_state) {
  CrawlImport result;
  std::set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string uri = trim(line);
    if (uri.empty()) continue;
    if (!is_well_formed_uri(uri)) {
      result.errors.push_back({lineno, "malformed URI '" + uri + "'"});
      continue;
    }
    if (!seen.insert(uri).second) {
      result.errors.push_back({lineno, "duplicate URI '" + uri + "'"});
      continue;
    }
    SampleRecord r;
    r.id = "crawl-" + sha256_hex(object + "\n" + keyword_state + "\n" + uri).substr(0, 16);
    r.uri = uri;
    r.object = object;
    r.state = keyword_state;
    r.split = Split::unassigned;
    r.source = Source::web_crawl;
    result.records.push_back(std::move(r));
  }
  return result;
}

inline CrawlImport import_crawl_list(const std::filesystem::path& path, const std::string& object,
                                     const std::string& keyword_state) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read crawl list '" + path.string() + "'");
  return import_crawl_list(in, object, keyword_state);
}

/// Uniform per-category sample of `per_category` records from `pool`, keyed on
/// the record's object field. Output is grouped in `categories` order.
inline DatasetManifest sample_imagenet_subset(const std::vector<std::string>& categories, std::size_t per_category,
                                              const DatasetManifest& pool, std::uint64_t seed) {
  DatasetManifest out;
  out.taxonomy_version = pool.taxonomy_version;
  if (per_category == 0) return out;
  for (const auto& cat : categories) {
    std::vector<const SampleRecord*> candidates;
    for (const auto& r : pool.records)
      if (r.object == cat) candidates.push_back(&r);
    if (candidates.size() < per_category)
      throw DataError("category '" + cat + "' has " + std::to_string(candidates.size()) + " records, " +
                      std::to_string(per_category) + " required");
    std::sort(candidates.begin(), candidates.end(),
              [](const SampleRecord* a, const SampleRecord* b) { return a->id < b->id; });
    Rng rng(derive_seed(seed, hash_string(cat)));
    // Partial Fisher-Yates: the first per_category slots are a uniform sample.
    for (std::size_t i = 0; i < per_category; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.below(candidates.size() - i));
      std::swap(candidates[i], candidates[j]);
      SampleRecord r = *candidates[i];
      r.split = Split::unassigned;
      out.records.push_back(std::move(r));
    }
  }
  return out;
}

}  // namespace statechef
