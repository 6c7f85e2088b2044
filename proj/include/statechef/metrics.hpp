#pragma once

#include <cmath>
#include <cstddef>
#include <cstdio>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "statechef/errors.hpp"
#include "statechef/io.hpp"
#include "statechef/matrix.hpp"

namespace statechef {

namespace detail {

inline void check_scored(const ProbMatrix& probs, const std::vector<int>& labels) {
  if (probs.rows == 0) throw DataError("empty input: no samples");
  if (probs.cols == 0) throw DataError("empty input: no classes");
  if (labels.size() != probs.rows)
    throw DataError("length mismatch: " + std::to_string(labels.size()) + " labels for " + std::to_string(probs.rows) +
                    " rows");
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= probs.cols)
      throw DataError("label " + std::to_string(y) + " out of range for " + std::to_string(probs.cols) + " classes");
}

inline void check_k(const ProbMatrix& probs, int k) {
  if (k < 1 || static_cast<std::size_t>(k) > probs.cols)
    throw DataError("k out of range: " + std::to_string(k) + " not in [1, " + std::to_string(probs.cols) + "]");
}

}  // namespace detail

/// Zero-based rank of `label` in `row` when sorted by descending probability,
/// equal probabilities ranked by ascending class index.
inline std::size_t label_rank(std::span<const double> row, std::size_t label) {
  std::size_t rank = 0;
  for (std::size_t j = 0; j < row.size(); ++j)
    if (row[j] > row[label] || (j < label && row[j] == row[label])) ++rank;
  return rank;
}

/// Highest-probability class, lowest index on ties.
inline std::size_t argmax(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j)
    if (row[j] > row[best]) best = j;
  return best;
}

inline double topk_accuracy(const ProbMatrix& probs, const std::vector<int>& labels, int k) {
  detail::check_scored(probs, labels);
  detail::check_k(probs, k);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < probs.rows; ++i)
    if (label_rank(probs.row(i), static_cast<std::size_t>(labels[i])) < static_cast<std::size_t>(k)) ++hits;
  return static_cast<double>(hits) / static_cast<double>(probs.rows);
}

struct PerClassAccuracy {
  std::vector<std::optional<double>> accuracy;  // nullopt for classes without samples
  std::vector<std::size_t> counts;
  double macro = 0;
};

inline PerClassAccuracy per_class_top_k(const ProbMatrix& probs, const std::vector<int>& labels, int k) {
  detail::check_scored(probs, labels);
  detail::check_k(probs, k);
  PerClassAccuracy out;
  out.counts.assign(probs.cols, 0);
  std::vector<std::size_t> hits(probs.cols, 0);
  for (std::size_t i = 0; i < probs.rows; ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    ++out.counts[y];
    if (label_rank(probs.row(i), y) < static_cast<std::size_t>(k)) ++hits[y];
  }
  out.accuracy.resize(probs.cols);
  double sum = 0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < probs.cols; ++c) {
    if (out.counts[c] == 0) continue;
    out.accuracy[c] = static_cast<double>(hits[c]) / static_cast<double>(out.counts[c]);
    sum += *out.accuracy[c];
    ++present;
  }
  out.macro = sum / static_cast<double>(present);
  return out;
}

inline PerClassAccuracy per_class_accuracy(const ProbMatrix& probs, const std::vector<int>& labels) {
  return per_class_top_k(probs, labels, 1);
}

inline double macro_top_k(const ProbMatrix& probs, const std::vector<int>& labels, int k) {
  return per_class_top_k(probs, labels, k).macro;
}

using ConfusionMatrix = std::vector<std::vector<std::size_t>>;

/// Entry (i, j) counts samples of true class i predicted as j.
inline ConfusionMatrix confusion_matrix(const ProbMatrix& probs, const std::vector<int>& labels) {
  detail::check_scored(probs, labels);
  ConfusionMatrix m(probs.cols, std::vector<std::size_t>(probs.cols, 0));
  for (std::size_t i = 0; i < probs.rows; ++i) ++m[static_cast<std::size_t>(labels[i])][argmax(probs.row(i))];
  return m;
}

/// Unweighted mean of a column.
inline double column_mean(const std::vector<double>& values) {
  if (values.empty()) throw DataError("cannot average an empty column");
  double s = 0;
  for (double v : values) s += v;
  return s / static_cast<double>(values.size());
}

// --------------------------------------------------------------------- report

/// One row of a per-object table, values keyed by column (percent or counts).
struct ObjectRow {
  std::string object;
  std::map<std::string, double> values;
};

struct EvaluationReport {
  std::map<int, double> topk;                    // sample-weighted, k = 1..3
  std::map<int, double> macro_topk;              // class-averaged
  std::vector<std::string> class_names;
  std::vector<std::optional<double>> per_class;  // top-1, by class index
  std::vector<std::size_t> class_counts;
  double macro = 0;
  ConfusionMatrix confusion;
  std::size_t sample_count = 0;
  std::vector<ObjectRow> objects;
  std::string model;

  bool has_scores() const { return sample_count > 0; }
  bool empty() const { return sample_count == 0 && objects.empty(); }
};

inline EvaluationReport build_report(const ProbMatrix& probs, const std::vector<int>& labels,
                                     std::vector<std::string> class_names = {}) {
  detail::check_scored(probs, labels);
  if (class_names.empty())
    for (std::size_t c = 0; c < probs.cols; ++c) class_names.push_back("class" + std::to_string(c));
  if (class_names.size() != probs.cols)
    throw DataError("report: " + std::to_string(class_names.size()) + " class names for " + std::to_string(probs.cols) +
                    " columns");
  EvaluationReport r;
  r.class_names = std::move(class_names);
  r.sample_count = probs.rows;
  for (int k = 1; k <= std::min<int>(3, static_cast<int>(probs.cols)); ++k) {
    r.topk[k] = topk_accuracy(probs, labels, k);
    r.macro_topk[k] = macro_top_k(probs, labels, k);
  }
  const auto pc = per_class_accuracy(probs, labels);
  r.per_class = pc.accuracy;
  r.class_counts = pc.counts;
  r.macro = pc.macro;
  r.confusion = confusion_matrix(probs, labels);
  return r;
}

/// Top-1/2/3 (percent) and sample count per object, for per-object layouts.
inline ObjectRow object_row(const std::string& object, const ProbMatrix& probs, const std::vector<int>& labels) {
  ObjectRow row{object, {}};
  for (int k = 1; k <= std::min<int>(3, static_cast<int>(probs.cols)); ++k)
    row.values["top" + std::to_string(k)] = 100.0 * topk_accuracy(probs, labels, k);
  row.values["test_set"] = static_cast<double>(probs.rows);
  return row;
}

inline json to_json(const EvaluationReport& r) {
  json j = json::object();
  if (!r.model.empty()) j["model"] = r.model;
  if (r.has_scores()) {
    json topk = json::object(), macro_topk = json::object(), per_class = json::object();
    for (const auto& [k, v] : r.topk) topk[std::to_string(k)] = v;
    for (const auto& [k, v] : r.macro_topk) macro_topk[std::to_string(k)] = v;
    for (std::size_t c = 0; c < r.class_names.size(); ++c)
      per_class[r.class_names[c]] = r.per_class[c] ? json(*r.per_class[c]) : json(nullptr);
    j["topk"] = topk;
    j["macro_topk"] = macro_topk;
    j["per_class"] = per_class;
    j["class_names"] = r.class_names;
    j["class_counts"] = r.class_counts;
    j["macro"] = r.macro;
    j["confusion"] = r.confusion;
    j["sample_count"] = r.sample_count;
  }
  if (!r.objects.empty()) {
    json rows = json::array();
    for (const auto& o : r.objects) {
      json row = json(o.values);
      row["object"] = o.object;
      rows.push_back(row);
    }
    j["objects"] = rows;
  }
  return j;
}

inline ObjectRow object_row_from_json(const json& j) {
  if (!j.is_object() || !j.contains("object") || !j.at("object").is_string())
    throw DataError("object row: expected an object with an 'object' name");
  ObjectRow row{j.at("object").get<std::string>(), {}};
  for (const auto& [key, value] : j.items()) {
    if (key == "object") continue;
    if (!value.is_number()) throw DataError("object row '" + row.object + "': column '" + key + "' is not numeric");
    row.values[key] = value.get<double>();
  }
  return row;
}

inline EvaluationReport report_from_json(const json& j) {
  EvaluationReport r;
  try {
    r.model = j.value("model", std::string());
    if (j.contains("sample_count")) {
      r.sample_count = j.at("sample_count").get<std::size_t>();
      r.class_names = j.at("class_names").get<std::vector<std::string>>();
      for (const auto& [k, v] : j.at("topk").items()) r.topk[std::stoi(k)] = v.get<double>();
      if (j.contains("macro_topk"))
        for (const auto& [k, v] : j.at("macro_topk").items()) r.macro_topk[std::stoi(k)] = v.get<double>();
      for (const auto& name : r.class_names) {
        const auto& v = j.at("per_class").at(name);
        r.per_class.push_back(v.is_null() ? std::nullopt : std::optional<double>(v.get<double>()));
      }
      r.class_counts = j.at("class_counts").get<std::vector<std::size_t>>();
      r.macro = j.at("macro").get<double>();
      r.confusion = j.at("confusion").get<ConfusionMatrix>();
    }
    if (j.contains("objects"))
      for (const auto& row : j.at("objects")) r.objects.push_back(object_row_from_json(row));
  } catch (const json::exception& e) {
    throw DataError(std::string("report: ") + e.what());
  }
  return r;
}

/// Rows of a per-object table file, one JSON object per line.
inline std::vector<ObjectRow> object_rows_from_jsonl(std::istream& in, const std::string& where) {
  std::vector<ObjectRow> rows;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (trim(line).empty()) continue;
    try {
      rows.push_back(object_row_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw DataError(where + ":" + std::to_string(n) + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError(where + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return rows;
}

// ------------------------------------------------------------------ rendering

struct Layout {
  std::string name;
  std::vector<std::string> required;  // per-object columns
  std::vector<std::string> optional;
};

inline const std::vector<Layout>& report_layouts() {
  static const std::vector<Layout> layouts = {
      {"table1", {}, {}},
      {"table2", {"top1", "voting"}, {"states", "test_set"}},
      {"table3", {"top1", "top2", "top3"}, {}},
      {"classes", {}, {}},
  };
  return layouts;
}

inline const Layout& find_layout(const std::string& name) {
  for (const auto& l : report_layouts())
    if (l.name == name) return l;
  throw DataError("unknown layout '" + name + "' (expected table1, table2, table3 or classes)");
}

struct RenderedTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> average;  // empty when the layout has no averages row
  json document;
};

namespace detail {

inline std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline std::string percent(double fraction) { return fixed(100.0 * fraction, 1); }

inline std::string format_table(const RenderedTable& t) {
  std::vector<std::size_t> width(t.header.size(), 0);
  auto grow = [&](const std::vector<std::string>& row) {
    for (std::size_t i = 0; i < row.size() && i < width.size(); ++i) width[i] = std::max(width[i], row[i].size());
  };
  grow(t.header);
  for (const auto& r : t.rows) grow(r);
  grow(t.average);
  auto line = [&](const std::vector<std::string>& row) {
    std::string s;
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) s += "  ";
      const std::string& cell = row[i];
      const std::string pad(width[i] - cell.size(), ' ');
      s += i == 0 ? cell + pad : pad + cell;
    }
    while (!s.empty() && s.back() == ' ') s.pop_back();
    return s + "\n";
  };
  std::string out = line(t.header);
  std::size_t total = 0;
  for (auto w : width) total += w;
  const std::string rule(total + 2 * (width.size() - 1), '-');
  out += rule + "\n";
  for (const auto& r : t.rows) out += line(r);
  if (!t.average.empty()) out += rule + "\n" + line(t.average);
  return out;
}

}  // namespace detail

/// Builds the table for `layout`. The averages row is always recomputed from
/// the rows as an unweighted mean.
inline RenderedTable tabulate(const EvaluationReport& report, const std::string& layout_name) {
  if (report.empty()) throw DataError("empty report: nothing to render");
  const Layout& layout = find_layout(layout_name);
  RenderedTable t;
  t.document = {{"layout", layout.name}};

  if (layout.name == "table1") {
    if (!report.has_scores()) throw DataError("layout table1 needs scored predictions (topk)");
    t.header = {"model", "top1", "top2", "top3", "macro_top1", "macro_top2", "macro_top3", "samples"};
    std::vector<std::string> row = {report.model.empty() ? "model" : report.model};
    json doc_row = {{"model", row[0]}, {"samples", report.sample_count}};
    for (int k = 1; k <= 3; ++k) {
      const auto it = report.topk.find(k);
      row.push_back(it == report.topk.end() ? "-" : detail::percent(it->second));
      if (it != report.topk.end()) doc_row["top" + std::to_string(k)] = 100.0 * it->second;
    }
    for (int k = 1; k <= 3; ++k) {
      const auto it = report.macro_topk.find(k);
      row.push_back(it == report.macro_topk.end() ? "-" : detail::percent(it->second));
      if (it != report.macro_topk.end()) doc_row["macro_top" + std::to_string(k)] = 100.0 * it->second;
    }
    row.push_back(std::to_string(report.sample_count));
    t.rows.push_back(row);
    t.document["rows"] = json::array({doc_row});
    return t;
  }

  if (layout.name == "classes") {
    if (!report.has_scores()) throw DataError("layout classes needs per-class accuracies");
    t.header = {"class", "top1", "samples"};
    json rows = json::array();
    std::vector<double> present;
    for (std::size_t c = 0; c < report.class_names.size(); ++c) {
      const auto& acc = report.per_class[c];
      t.rows.push_back({report.class_names[c], acc ? detail::percent(*acc) : "-", std::to_string(report.class_counts[c])});
      rows.push_back({{"class", report.class_names[c]},
                      {"top1", acc ? json(100.0 * *acc) : json(nullptr)},
                      {"samples", report.class_counts[c]}});
      if (acc) present.push_back(*acc);
    }
    const double macro = column_mean(present);
    t.average = {"average", detail::percent(macro), std::to_string(report.sample_count)};
    t.document["rows"] = rows;
    t.document["average"] = {{"top1", 100.0 * macro}};
    return t;
  }

  if (report.objects.empty()) throw DataError("layout " + layout.name + " needs per-object rows");
  std::vector<std::string> columns = layout.required;
  for (const auto& col : layout.required)
    for (const auto& o : report.objects)
      if (!o.values.contains(col))
        throw DataError("layout " + layout.name + ": object '" + o.object + "' is missing column '" + col + "'");
  for (const auto& col : layout.optional) {
    bool all = true;
    for (const auto& o : report.objects) all = all && o.values.contains(col);
    if (all) columns.push_back(col);
  }
  t.header = {"object"};
  t.header.insert(t.header.end(), columns.begin(), columns.end());
  json rows = json::array();
  std::map<std::string, std::vector<double>> by_column;
  for (const auto& o : report.objects) {
    std::vector<std::string> row = {o.object};
    json doc_row = {{"object", o.object}};
    for (const auto& col : columns) {
      const double v = o.values.at(col);
      by_column[col].push_back(v);
      const bool count = col == "states" || col == "test_set";
      row.push_back(count ? detail::fixed(v, 0) : detail::fixed(v, 1));
      doc_row[col] = v;
    }
    t.rows.push_back(row);
    rows.push_back(doc_row);
  }
  t.average = {"average"};
  json avg = json::object();
  for (const auto& col : columns) {
    const double m = column_mean(by_column[col]);
    t.average.push_back(detail::fixed(m, 1));
    avg[col] = m;
  }
  t.document["rows"] = rows;
  t.document["average"] = avg;
  return t;
}

/// Plain-text table.
inline std::string render_report(const EvaluationReport& report, const std::string& layout) {
  return detail::format_table(tabulate(report, layout));
}

/// Machine-readable rendering of the same table.
inline json render_report_json(const EvaluationReport& report, const std::string& layout) {
  return tabulate(report, layout).document;
}

}  // namespace statechef
