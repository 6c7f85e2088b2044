#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

#include "statechef/dataset.hpp"
#include "statechef/manifest.hpp"
#include "support.hpp"

using namespace statechef;
using testing_support::taxonomy;
using testing_support::TempDir;

namespace {

std::map<std::string, std::array<std::size_t, 3>> per_class_splits(const DatasetManifest& m) {
  std::map<std::string, std::array<std::size_t, 3>> out;
  for (const auto& r : m.records) {
    auto& c = out[r.state];
    if (r.split == Split::train) ++c[0];
    else if (r.split == Split::test) ++c[1];
    else if (r.split == Split::val) ++c[2];
  }
  return out;
}

std::array<std::size_t, 3> totals(const DatasetManifest& m) {
  std::array<std::size_t, 3> t{};
  for (const auto& [state, c] : per_class_splits(m))
    for (int i = 0; i < 3; ++i) t[i] += c[i];
  return t;
}

std::map<std::string, Split> assignment(const DatasetManifest& m) {
  std::map<std::string, Split> out;
  for (const auto& r : m.records) out[r.id] = r.split;
  return out;
}

}  // namespace

TEST(Apportion, SmallCases) {
  EXPECT_EQ(apportion(10, {}), (std::array<std::size_t, 3>{7, 2, 1}));
  EXPECT_EQ(apportion(0, {}), (std::array<std::size_t, 3>{0, 0, 0}));
  EXPECT_EQ(apportion(1, {}), (std::array<std::size_t, 3>{1, 0, 0}));
  EXPECT_EQ(apportion(20, {}), (std::array<std::size_t, 3>{14, 3, 3}));
  EXPECT_EQ(apportion(5, {1.0, 0.0, 0.0}), (std::array<std::size_t, 3>{5, 0, 0}));
}

TEST(Apportion, SumsAndWithinOne) {
  const SplitRatios r;
  for (std::size_t n = 0; n < 2000; ++n) {
    const auto c = apportion(n, r);
    EXPECT_EQ(c[0] + c[1] + c[2], n);
    const auto ratios = r.as_array();
    for (int i = 0; i < 3; ++i) EXPECT_LT(std::abs(static_cast<double>(c[i]) - ratios[i] * n), 1.0 + 1e-9) << n;
  }
}

TEST(StratifiedSplit, ReferenceHistogramPerClassWithinOne) {
  const auto hist = reference_class_histogram();
  EXPECT_EQ(std::accumulate(hist.begin(), hist.end(), std::size_t{0}), 9309u);
  const auto m = stratified_split(histogram_manifest(taxonomy(), hist), {}, 42);
  const auto per = per_class_splits(m);
  ASSERT_EQ(per.size(), 11u);
  const SplitRatios r;
  for (const auto& [state, c] : per) {
    const double n = static_cast<double>(c[0] + c[1] + c[2]);
    EXPECT_LE(std::abs(c[0] - r.train * n), 1.0) << state;
    EXPECT_LE(std::abs(c[1] - r.test * n), 1.0) << state;
    EXPECT_LE(std::abs(c[2] - r.val * n), 1.0) << state;
  }
  EXPECT_EQ(totals(m), (std::array<std::size_t, 3>{6516, 1400, 1393}));
}

TEST(StratifiedSplit, RealizedFractionsReproduceReportedTotals) {
  const SplitRatios realized{6498.0 / 9309, 1413.0 / 9309, 1398.0 / 9309};
  const auto m = stratified_split(histogram_manifest(taxonomy(), reference_class_histogram()), realized, 42);
  const auto t = totals(m);
  EXPECT_LE(std::abs(static_cast<long>(t[0]) - 6498), 11);
  EXPECT_LE(std::abs(static_cast<long>(t[1]) - 1413), 11);
  EXPECT_LE(std::abs(static_cast<long>(t[2]) - 1398), 11);
}

TEST(StratifiedSplit, DeterministicAndPermutationInvariant) {
  const auto base = synthetic_manifest(taxonomy(), 37, 8);
  const auto a = stratified_split(base, {}, 7);
  const auto b = stratified_split(base, {}, 7);
  EXPECT_EQ(a, b);
  EXPECT_EQ(manifest_to_jsonl(a), manifest_to_jsonl(b));

  DatasetManifest shuffled = base;
  Rng rng(99);
  rng.shuffle(shuffled.records);
  EXPECT_EQ(assignment(stratified_split(shuffled, {}, 7)), assignment(a));

  EXPECT_NE(assignment(stratified_split(base, {}, 8)), assignment(a));
}

TEST(StratifiedSplit, EmptyManifest) {
  const auto m = stratified_split(DatasetManifest{}, {}, 1);
  EXPECT_TRUE(m.empty());
}

TEST(StratifiedSplit, BadRatiosRejected) {
  EXPECT_THROW(SplitRatios::parse("0.7,0.2,0.2"), DataError);
  EXPECT_THROW(SplitRatios::parse("0.7,0.3"), DataError);
  EXPECT_THROW(SplitRatios::parse("a,b,c"), DataError);
  EXPECT_THROW(SplitRatios::parse("1.2,-0.1,-0.1"), DataError);
  EXPECT_EQ(SplitRatios::parse("0.8,0.1,0.1"), (SplitRatios{0.8, 0.1, 0.1}));
  EXPECT_THROW(stratified_split(synthetic_manifest(taxonomy(), 2, 8), {0.5, 0.5, 0.5}, 1), DataError);
}

TEST(StratifiedSplit, ReassignmentRequiresFlag) {
  const auto once = stratified_split(synthetic_manifest(taxonomy(), 10, 8), {}, 1);
  EXPECT_THROW(stratified_split(once, {}, 2), DataError);
  const auto twice = stratified_split(once, {}, 2, true);
  EXPECT_EQ(twice.size(), once.size());
  EXPECT_EQ(totals(twice), totals(once));
}

TEST(StratifiedSplit, DuplicateIdsRejected) {
  auto m = synthetic_manifest(taxonomy(), 2, 8);
  m.records.push_back(m.records.front());
  EXPECT_THROW(stratified_split(m, {}, 1), DataError);
}

TEST(ClassStats, FoldsSynonyms) {
  DatasetManifest m;
  for (const char* s : {"diced", "chopped", "cubed", "whole", "paste"}) {
    SampleRecord r;
    r.id = std::string("r-") + s;
    r.uri = "/x";
    r.object = "potato";
    r.state = s;
    m.records.push_back(r);
  }
  const auto raw = class_stats(m);
  EXPECT_EQ(raw.size(), 5u);
  const auto folded = class_stats(m, taxonomy());
  EXPECT_EQ(folded[static_cast<std::size_t>(taxonomy().class_index("diced"))], 3u);
  EXPECT_EQ(folded[static_cast<std::size_t>(taxonomy().class_index("creamy"))], 1u);
  EXPECT_EQ(std::accumulate(folded.begin(), folded.end(), std::size_t{0}), 5u);
}

TEST(CrawlImport, ThreeWellFormedLines) {
  std::istringstream in("https://a.example/1.jpg\nhttps://a.example/2.jpg\n\nfile:///data/3.png\n");
  const auto r = import_crawl_list(in, "tomato", "diced");
  ASSERT_EQ(r.records.size(), 3u);
  EXPECT_TRUE(r.errors.empty());
  for (const auto& rec : r.records) {
    EXPECT_EQ(rec.object, "tomato");
    EXPECT_EQ(rec.state, "diced");
    EXPECT_EQ(rec.split, Split::unassigned);
    EXPECT_EQ(rec.source, Source::web_crawl);
  }
  std::istringstream again("https://a.example/1.jpg\n");
  EXPECT_EQ(import_crawl_list(again, "tomato", "diced").records.front().id, r.records.front().id);
}

TEST(CrawlImport, EmptyInput) {
  std::istringstream in("");
  const auto r = import_crawl_list(in, "tomato", "diced");
  EXPECT_TRUE(r.records.empty());
  EXPECT_TRUE(r.errors.empty());
}

TEST(CrawlImport, MalformedLineReported) {
  std::istringstream in("https://a.example/1.jpg\nnot a uri\nhttps://a.example/2.jpg\nhttps://a.example/3.jpg\n");
  const auto r = import_crawl_list(in, "onion", "sliced");
  EXPECT_EQ(r.records.size(), 3u);
  ASSERT_EQ(r.errors.size(), 1u);
  EXPECT_EQ(r.errors[0].line, 2u);
}

TEST(CrawlImport, DuplicateUriReported) {
  std::istringstream in("https://a.example/1.jpg\nhttps://a.example/1.jpg\n");
  const auto r = import_crawl_list(in, "onion", "sliced");
  EXPECT_EQ(r.records.size(), 1u);
  ASSERT_EQ(r.errors.size(), 1u);
  EXPECT_EQ(r.errors[0].line, 2u);
}

namespace {

DatasetManifest imagenet_pool(const std::vector<std::string>& cats, std::size_t each) {
  DatasetManifest pool;
  for (const auto& c : cats)
    for (std::size_t i = 0; i < each; ++i) {
      SampleRecord r;
      r.id = "in-" + c + "-" + std::to_string(i);
      r.uri = "file:///imagenet/" + c + "/" + std::to_string(i) + ".jpg";
      r.object = c;
      r.state = "other";
      r.source = Source::imagenet;
      pool.records.push_back(r);
    }
  return pool;
}

}  // namespace

TEST(ImagenetSample, EightCategoriesOfHundred) {
  std::vector<std::string> cats = {"dog", "car", "cup", "shoe", "tree", "bird", "lamp", "book"};
  const auto pool = imagenet_pool(cats, 150);
  const auto s = sample_imagenet_subset(cats, 100, pool, 5);
  EXPECT_EQ(s.size(), 800u);
  std::map<std::string, std::size_t> per;
  for (const auto& r : s.records) {
    ++per[r.object];
    EXPECT_EQ(r.state, "other");
  }
  for (const auto& c : cats) EXPECT_EQ(per[c], 100u);
  EXPECT_NO_THROW(s.validate());
  EXPECT_EQ(sample_imagenet_subset(cats, 100, pool, 5), s);
  EXPECT_NE(sample_imagenet_subset(cats, 100, pool, 6), s);
}

TEST(ImagenetSample, ZeroPerCategory) {
  const auto pool = imagenet_pool({"dog"}, 5);
  EXPECT_TRUE(sample_imagenet_subset({"dog"}, 0, pool, 1).empty());
}

TEST(ImagenetSample, DeficientCategoryNamed) {
  const auto pool = imagenet_pool({"dog", "cat"}, 5);
  try {
    sample_imagenet_subset({"dog", "cat", "owl"}, 3, pool, 1);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("owl"), std::string::npos);
  }
}

TEST(ManifestIo, JsonlRoundTrip) {
  TempDir dir;
  auto m = stratified_split(synthetic_manifest(taxonomy(), 3, 8), {}, 4);
  m.records[0].flags = {SampleFlag::ambiguous, SampleFlag::multi_state};
  m.records[1].review = ReviewInfo{"overridden", "sliced", "model-a"};
  save_manifest(dir / "m.jsonl", m, {{"command", "test"}});
  const auto back = load_manifest(dir / "m.jsonl");
  EXPECT_EQ(back, m);
  EXPECT_EQ(read_text_file(dir / "m.jsonl"), manifest_to_jsonl(m));
}

TEST(ManifestIo, MalformedLineReportsPosition) {
  std::istringstream in("{\"id\":\"a\",\"uri\":\"/a\",\"object\":\"egg\",\"state\":\"whole\"}\n{\"id\":\"b\"}\n");
  try {
    manifest_from_jsonl(in, "m.jsonl");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("m.jsonl:2"), std::string::npos) << e.what();
  }
}

TEST(ManifestValidate, InadmissibleStateRejected) {
  DatasetManifest m;
  SampleRecord r;
  r.id = "x";
  r.uri = "/x";
  r.object = "milk";
  r.state = "sliced";
  m.records.push_back(r);
  EXPECT_THROW(m.validate(&taxonomy()), DataError);
  m.records[0].state = "other";
  EXPECT_NO_THROW(m.validate(&taxonomy()));
}
