#include <gtest/gtest.h>

#include <fstream>

#include "oracles.hpp"
#include "statechef/metrics.hpp"
#include "statechef/predictions.hpp"
#include "support.hpp"

using namespace statechef;
using testing_support::random_labels;
using testing_support::random_probs;
using testing_support::source_dir;
using testing_support::TempDir;

namespace {

EvaluationReport fixture_report(const std::string& name) {
  std::ifstream in(source_dir() / "fixtures" / name);
  EvaluationReport r;
  r.objects = object_rows_from_jsonl(in, name);
  return r;
}

}  // namespace

TEST(TopK, HandExample) {
  const auto p = ProbMatrix::from_rows({{0.5, 0.3, 0.2}});
  EXPECT_EQ(topk_accuracy(p, {1}, 1), 0.0);
  EXPECT_EQ(topk_accuracy(p, {1}, 2), 1.0);
  EXPECT_EQ(topk_accuracy(p, {2}, 3), 1.0);
}

TEST(TopK, PerfectOneHot) {
  ProbMatrix p(5, 5);
  for (std::size_t i = 0; i < 5; ++i) p.at(i, i) = 1.0;
  EXPECT_EQ(topk_accuracy(p, {0, 1, 2, 3, 4}, 1), 1.0);
}

TEST(TopK, TiesRankLowerIndexFirst) {
  const auto p = ProbMatrix::from_rows({{0.25, 0.25, 0.25, 0.25}});
  EXPECT_EQ(topk_accuracy(p, {0}, 1), 1.0);
  EXPECT_EQ(topk_accuracy(p, {1}, 1), 0.0);
  EXPECT_EQ(topk_accuracy(p, {2}, 2), 0.0);
  EXPECT_EQ(topk_accuracy(p, {2}, 3), 1.0);
}

TEST(TopK, Errors) {
  const auto p = ProbMatrix::from_rows({{0.5, 0.5}});
  EXPECT_THROW(topk_accuracy(p, {0}, 0), DataError);
  EXPECT_THROW(topk_accuracy(p, {0}, 3), DataError);
  EXPECT_THROW(topk_accuracy(p, {0, 1}, 1), DataError);
  EXPECT_THROW(topk_accuracy(p, {2}, 1), DataError);
  EXPECT_THROW(topk_accuracy(ProbMatrix(0, 2), {}, 1), DataError);
  EXPECT_THROW(per_class_accuracy(ProbMatrix(0, 2), {}), DataError);
}

TEST(TopK, MatchesOracleOnRandomFixtures) {
  Rng rng(2024);
  for (int f = 0; f < 100; ++f) {
    const std::size_t n = 1 + rng.below(60), c = 2 + rng.below(10);
    const auto p = random_probs(rng, n, c, f % 2 == 0);
    const auto y = random_labels(rng, n, c);
    double prev = 0;
    for (int k = 1; k <= static_cast<int>(c); ++k) {
      const double v = topk_accuracy(p, y, k);
      EXPECT_DOUBLE_EQ(v, oracle::topk(p, y, k)) << f << " k=" << k;
      EXPECT_GE(v, prev);
      prev = v;
    }
    EXPECT_DOUBLE_EQ(prev, 1.0);
  }
}

TEST(Confusion, MatchesOracleAndInvariants) {
  Rng rng(77);
  for (int f = 0; f < 100; ++f) {
    const std::size_t n = 30, c = 2 + rng.below(8);
    const auto p = random_probs(rng, n, c, f % 3 == 0);
    const auto y = random_labels(rng, n, c);
    const auto m = confusion_matrix(p, y);
    EXPECT_EQ(m, oracle::confusion(p, y));
    std::size_t diag = 0, total = 0;
    const auto pc = per_class_accuracy(p, y);
    for (std::size_t i = 0; i < c; ++i) {
      diag += m[i][i];
      std::size_t row = 0;
      for (auto v : m[i]) row += v;
      total += row;
      EXPECT_EQ(row, pc.counts[i]);
    }
    EXPECT_EQ(total, n);
    EXPECT_DOUBLE_EQ(static_cast<double>(diag) / n, topk_accuracy(p, y, 1));
  }
}

TEST(Confusion, DiagonalAndSingleColumn) {
  ProbMatrix p(3, 3);
  for (std::size_t i = 0; i < 3; ++i) p.at(i, i) = 1.0;
  const auto m = confusion_matrix(p, {0, 1, 2});
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(m[i][j], i == j ? 1u : 0u);

  ProbMatrix whole(4, 3);
  for (std::size_t i = 0; i < 4; ++i) whole.at(i, 0) = 0.9;
  const auto w = confusion_matrix(whole, {0, 1, 2, 2});
  EXPECT_EQ(w[0][0] + w[1][0] + w[2][0], 4u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(w[i][1] + w[i][2], 0u);
}

TEST(PerClass, MacroOracleAndAbsentClasses) {
  Rng rng(5);
  for (int f = 0; f < 50; ++f) {
    const auto p = random_probs(rng, 40, 6, true);
    auto y = random_labels(rng, 40, 4);  // classes 4 and 5 absent
    const auto pc = per_class_accuracy(p, y);
    EXPECT_NEAR(pc.macro, oracle::macro_top1(p, y), 1e-12);
    EXPECT_FALSE(pc.accuracy[4].has_value());
    EXPECT_FALSE(pc.accuracy[5].has_value());
  }
}

TEST(PerClass, SingleClassPresent) {
  const auto p = ProbMatrix::from_rows({{0.9, 0.1}, {0.2, 0.8}, {0.6, 0.4}});
  EXPECT_NEAR(per_class_accuracy(p, {0, 0, 0}).macro, 2.0 / 3, 1e-12);
}

TEST(PerClass, MacroInvariantToDuplicatingAClass) {
  Rng rng(9);
  const auto p = random_probs(rng, 25, 4);
  const auto y = random_labels(rng, 25, 4);
  std::vector<std::vector<double>> rows;
  std::vector<int> y2;
  for (std::size_t i = 0; i < p.rows; ++i) {
    const int copies = y[i] == 2 ? 2 : 1;
    for (int c = 0; c < copies; ++c) {
      rows.emplace_back(p.row(i).begin(), p.row(i).end());
      y2.push_back(y[i]);
    }
  }
  EXPECT_NEAR(per_class_accuracy(ProbMatrix::from_rows(rows), y2).macro, per_class_accuracy(p, y).macro, 1e-12);
}

TEST(Report, InvariantsHold) {
  Rng rng(31);
  const auto p = random_probs(rng, 80, 11);
  const auto y = random_labels(rng, 80, 11);
  const auto r = build_report(p, y);
  EXPECT_LE(r.topk.at(1), r.topk.at(2));
  EXPECT_LE(r.topk.at(2), r.topk.at(3));
  double sum = 0;
  int n = 0;
  for (const auto& a : r.per_class)
    if (a) {
      sum += *a;
      ++n;
    }
  EXPECT_NEAR(r.macro, sum / n, 1e-12);
  const auto back = report_from_json(to_json(r));
  EXPECT_EQ(back.topk, r.topk);
  EXPECT_EQ(back.confusion, r.confusion);
  EXPECT_EQ(back.per_class, r.per_class);
  EXPECT_EQ(render_report(back, "table1"), render_report(r, "table1"));
  EXPECT_EQ(render_report(r, "classes"), render_report(r, "classes"));
}

TEST(Report, TableThreeAverages) {
  const auto r = fixture_report("table3.jsonl");
  ASSERT_EQ(r.objects.size(), 16u);
  const auto doc = render_report_json(r, "table3");
  EXPECT_NEAR(doc["average"]["top1"].get<double>(), 78.5, 0.05);
  EXPECT_NEAR(doc["average"]["top2"].get<double>(), 89.6, 0.05);
  EXPECT_NEAR(doc["average"]["top3"].get<double>(), 94.5, 0.05);
  const std::string text = render_report(r, "table3");
  EXPECT_NE(text.find("average"), std::string::npos);
  EXPECT_NE(text.find("78.5"), std::string::npos);
}

TEST(Report, TableTwoAverages) {
  const auto r = fixture_report("table2.jsonl");
  ASSERT_EQ(r.objects.size(), 16u);
  const auto doc = render_report_json(r, "table2");
  EXPECT_NEAR(doc["average"]["top1"].get<double>(), 86.9, 0.05);
  EXPECT_NEAR(doc["average"]["voting"].get<double>(), 88.3, 0.05);
  std::vector<double> top1;
  for (const auto& o : r.objects) top1.push_back(o.values.at("top1"));
  EXPECT_NEAR(column_mean(top1), 86.9, 0.05);
}

TEST(Report, AveragesRecomputedNotStored) {
  EvaluationReport r;
  r.objects = {{"a", {{"top1", 50}, {"top2", 60}, {"top3", 70}}}, {"b", {{"top1", 70}, {"top2", 80}, {"top3", 90}}}};
  const auto t = tabulate(r, "table3");
  EXPECT_EQ(t.average, (std::vector<std::string>{"average", "60.0", "70.0", "80.0"}));
  r.objects[0].values["top1"] = 90;
  EXPECT_EQ(tabulate(r, "table3").average[1], "80.0");
}

TEST(Report, EmptyAndIncompleteRejected) {
  EXPECT_THROW(render_report(EvaluationReport{}, "table3"), DataError);
  EvaluationReport r;
  r.objects = {{"a", {{"top1", 50}}}};
  EXPECT_THROW(render_report(r, "table3"), DataError);
  EXPECT_THROW(render_report(r, "table1"), DataError);
  EXPECT_THROW(render_report(r, "table9"), DataError);
}

TEST(Report, ObjectRowFromPredictions) {
  const auto p = ProbMatrix::from_rows({{0.5, 0.3, 0.2}, {0.1, 0.2, 0.7}});
  const auto row = object_row("garlic", p, {1, 2});
  EXPECT_DOUBLE_EQ(row.values.at("top1"), 50.0);
  EXPECT_DOUBLE_EQ(row.values.at("top2"), 100.0);
  EXPECT_DOUBLE_EQ(row.values.at("test_set"), 2.0);
}

TEST(PredictionDumpIo, RoundTripAndAlign) {
  PredictionDump d;
  d.model_id = "m1";
  d.class_names = {"a", "b"};
  d.sample_ids = {"s1", "s2", "s3"};
  d.objects = {"egg", "", "milk"};
  d.probs = ProbMatrix::from_rows({{0.1, 0.9}, {0.5, 0.5}, {0.7, 0.3}});
  d.labels = {1, 0, 0};
  TempDir dir;
  write_file_atomic(dir / "d.jsonl", dump_to_jsonl(d));
  const auto back = load_dump(dir / "d.jsonl");
  EXPECT_EQ(back.sample_ids, d.sample_ids);
  EXPECT_EQ(back.probs, d.probs);
  EXPECT_EQ(back.labels, d.labels);
  EXPECT_EQ(back.class_names, d.class_names);
  EXPECT_EQ(back.objects, d.objects);

  PredictionDump other = d;
  other.model_id = "m2";
  other.sample_ids = {"s3", "s1", "s2"};
  other.probs = ProbMatrix::from_rows({{0.7, 0.3}, {0.1, 0.9}, {0.5, 0.5}});
  other.labels = {0, 1, 0};
  const auto aligned = align_dump(d, other);
  EXPECT_EQ(aligned.probs, d.probs);
  EXPECT_EQ(aligned.labels, d.labels);
  other.sample_ids[0] = "zz";
  EXPECT_THROW(align_dump(d, other), DataError);
}
