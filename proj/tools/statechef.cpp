// statechef command-line interface.

#include <atomic>
#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "statechef/dataset.hpp"
#include "statechef/ensemble.hpp"
#include "statechef/errors.hpp"
#include "statechef/io.hpp"
#include "statechef/labeling.hpp"
#include "statechef/manifest.hpp"
#include "statechef/metrics.hpp"
#include "statechef/model.hpp"
#include "statechef/predictions.hpp"
#include "statechef/taxonomy.hpp"
#include "statechef/training.hpp"
#include "statechef/image_io.hpp"
#include "statechef/labeling_server.hpp"

namespace fs = std::filesystem;
using namespace statechef;

namespace {

constexpr int kUsage = 1;
constexpr int kData = 2;
constexpr int kRuntime = 3;

fs::path data_root() {
  const char* env = std::getenv("STATECHEF_DATA_DIR");
  return env && *env ? fs::path(env) : fs::path("statechef-data");
}

fs::path default_taxonomy() {
  const fs::path local = data_root() / "taxonomy.json";
  if (fs::exists(local)) return local;
  return fs::path(STATECHEF_SOURCE_DIR) / "data" / "taxonomy.json";
}

struct Common {
  std::uint64_t seed = 0;
  std::string config;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--seed", c.seed, "Seed for every random choice");
  cmd->add_option("--config", c.config, "JSON file of option values; overrides flags");
  cmd->add_option("--out", c.out, "Output path");
}

/// Overwrites option values with the entries of the JSON config file.
void apply_config(CLI::App* cmd, const std::string& path) {
  if (path.empty()) return;
  const json doc = read_json_file(path);
  if (!doc.is_object()) throw DataError("config '" + path + "' must be a JSON object");
  for (const auto& [key, value] : doc.items()) {
    if (key == "config") continue;
    std::string name = key;
    for (auto& ch : name)
      if (ch == '_') ch = '-';
    CLI::Option* opt = cmd->get_option_no_throw("--" + name);
    if (!opt) opt = cmd->get_option_no_throw(key);
    if (!opt) throw DataError("config '" + path + "': unknown option '" + key + "'");
    auto text = [](const json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); };
    opt->clear();
    if (value.is_array()) {
      for (const auto& v : value) opt->add_result(text(v));
    } else {
      opt->add_result(text(value));
    }
    opt->run_callback();
  }
}

void require(const std::string& value, const std::string& flag) {
  if (value.empty()) throw CLI::RequiredError(flag);
}

void write_output(const std::string& path, const std::string& contents) {
  if (path.empty() || path == "-") std::cout << contents;
  else write_file_atomic(path, contents);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  for (const auto& part : split_string(s, ','))
    if (!trim(part).empty()) out.push_back(trim(part));
  return out;
}

std::vector<int> int_list(const std::string& s) {
  std::vector<int> out;
  for (const auto& part : split_list(s)) {
    try {
      out.push_back(std::stoi(part));
    } catch (const std::exception&) {
      throw DataError("expected a comma-separated list of integers, got '" + s + "'");
    }
  }
  return out;
}

void print_line_errors(const std::vector<LineError>& errors, const std::string& where) {
  for (const auto& e : errors) std::cerr << where << ":" << e.line << ": " << e.message << "\n";
}

// ------------------------------------------------------------------ taxonomy

struct TaxonomyArgs {
  Common common;
  std::string file;
};

int taxonomy_validate(const TaxonomyArgs& a) {
  const fs::path path = a.file.empty() ? default_taxonomy() : fs::path(a.file);
  const Taxonomy t = Taxonomy::load(path);
  std::size_t selected = 0;
  for (const auto& f : t.fine_states()) selected += f.selected ? 1 : 0;
  std::cout << "ok: " << path.string() << ": " << t.class_count() << " classes, " << t.fine_states().size()
            << " fine states (" << selected << " selected), " << t.objects().size() << " objects, version "
            << t.version().substr(0, 12) << "\n";
  if (!a.common.out.empty()) {
    json objects = json::object();
    for (const auto& o : t.objects()) objects[o.name] = o.state_count();
    write_json_file(a.common.out, {{"valid", true},
                                   {"classes", t.class_names()},
                                   {"fine_states", t.fine_states().size()},
                                   {"selected", selected},
                                   {"objects", objects},
                                   {"version", t.version()}});
  }
  return 0;
}

// ------------------------------------------------------------------ manifest

struct ManifestArgs {
  Common common;
  std::string input;
  std::string taxonomy;
  std::string object;
  std::string state;
  std::string source = "web-crawl";
  bool strict = false;
  std::string ratios = "0.7,0.15,0.15";
  bool reassign = false;
  std::string pool;
  std::string categories;
  std::size_t per_category = 50;
  std::size_t per_class = 20;
  int size = 32;
  std::string histogram;
};

Taxonomy load_taxonomy(const std::string& path) {
  return Taxonomy::load(path.empty() ? default_taxonomy() : fs::path(path));
}

int manifest_import(const ManifestArgs& a) {
  require(a.input, "list");
  require(a.object, "--object");
  require(a.state, "--state");
  require(a.common.out, "--out");
  const Taxonomy t = load_taxonomy(a.taxonomy);
  const std::string state = t.canonical_state(a.state);
  if (t.find_object(a.object) && state != kOtherClass && !t.is_admissible(a.object, state))
    throw DataError("state '" + state + "' is not admissible for object '" + a.object + "'");
  CrawlImport result = import_crawl_list(fs::path(a.input), a.object, state);
  const Source source = parse_source(a.source);
  for (auto& r : result.records) r.source = source;
  print_line_errors(result.errors, a.input);
  DatasetManifest m;
  m.records = std::move(result.records);
  m.taxonomy_version = t.version();
  m.validate(&t);
  save_manifest(a.common.out, m, {{"command", "manifest import"}, {"source_list", a.input}});
  std::cout << "imported " << m.size() << " records, " << result.errors.size() << " line errors -> " << a.common.out
            << "\n";
  return a.strict && !result.errors.empty() ? kData : 0;
}

int manifest_split(const ManifestArgs& a) {
  require(a.input, "manifest");
  require(a.common.out, "--out");
  const DatasetManifest m = load_manifest(a.input);
  const SplitRatios ratios = SplitRatios::parse(a.ratios);
  const DatasetManifest out = stratified_split(m, ratios, a.common.seed, a.reassign);
  save_manifest(a.common.out, out, {{"command", "manifest split"}, {"seed", a.common.seed}, {"ratios", a.ratios}});
  std::cout << "train " << out.in_split(Split::train).size() << ", test " << out.in_split(Split::test).size() << ", val "
            << out.in_split(Split::val).size() << " -> " << a.common.out << "\n";
  return 0;
}

int manifest_stats(const ManifestArgs& a) {
  require(a.input, "manifest");
  const DatasetManifest m = load_manifest(a.input);
  std::map<std::string, std::map<std::string, std::size_t>> table;
  for (const auto& r : m.records) {
    ++table[r.state][std::string(to_string(r.split))];
    ++table[r.state]["total"];
  }
  json doc = {{"records", m.size()}, {"classes", json::object()}};
  std::cout << "state          total  train   test    val\n";
  for (const auto& [state, counts] : table) {
    auto get = [&](const char* k) {
      auto it = counts.find(k);
      return it == counts.end() ? std::size_t{0} : it->second;
    };
    char buf[128];
    std::snprintf(buf, sizeof buf, "%-12s %7zu %6zu %6zu %6zu\n", state.c_str(), get("total"), get("train"), get("test"),
                  get("val"));
    std::cout << buf;
    doc["classes"][state] = counts;
  }
  std::cout << "records " << m.size() << "\n";
  if (!a.common.out.empty()) write_json_file(a.common.out, doc);
  return 0;
}

int manifest_sample(const ManifestArgs& a) {
  require(a.pool, "--pool");
  require(a.common.out, "--out");
  const DatasetManifest pool = load_manifest(a.pool);
  std::vector<std::string> cats = split_list(a.categories);
  if (cats.empty()) {
    std::set<std::string> seen;
    for (const auto& r : pool.records)
      if (seen.insert(r.object).second) cats.push_back(r.object);
  }
  DatasetManifest out = sample_imagenet_subset(cats, a.per_category, pool, a.common.seed);
  for (auto& r : out.records) r.source = Source::imagenet;
  save_manifest(a.common.out, out, {{"command", "manifest sample"}, {"seed", a.common.seed}, {"categories", cats}});
  std::cout << "sampled " << out.size() << " records from " << cats.size() << " categories -> " << a.common.out << "\n";
  return 0;
}

int manifest_synth(const ManifestArgs& a) {
  require(a.common.out, "--out");
  const Taxonomy t = load_taxonomy(a.taxonomy);
  DatasetManifest m;
  if (a.histogram.empty()) {
    m = synthetic_manifest(t, a.per_class, a.size);
  } else if (a.histogram == "reference") {
    m = histogram_manifest(t, reference_class_histogram());
  } else {
    std::vector<std::size_t> counts;
    for (int c : int_list(a.histogram)) counts.push_back(static_cast<std::size_t>(c));
    m = histogram_manifest(t, counts);
  }
  save_manifest(a.common.out, m, {{"command", "manifest synth"}});
  std::cout << "wrote " << m.size() << " synthetic records -> " << a.common.out << "\n";
  return 0;
}

// --------------------------------------------------------------------- train

struct TrainArgs {
  Common common;
  std::string manifest;
  std::string taxonomy;
  std::string schedule;
  std::string epochs;
  std::string base;
  std::string objects;
  std::string exclude = "dough";
  std::string weights;
  std::string history;
  bool tiny = false;
  bool pretrained = false;
  bool no_augment = false;
  int batch_size = 0;
  int workers = 1;
};

Schedule resolve_schedule(const TrainArgs& a, Schedule fallback) {
  Schedule s = a.schedule.empty() ? std::move(fallback) : load_schedule(a.schedule);
  if (!a.epochs.empty()) s = with_epochs(s, int_list(a.epochs));
  for (auto& st : s.stages) {
    if (a.no_augment) st.augmentation = AugmentationConfig::disabled();
    if (a.batch_size > 0) st.batch_size = a.batch_size;
  }
  s.validate();
  return s;
}

RunOptions run_options(const TrainArgs& a) {
  RunOptions o;
  o.workers = a.workers;
  o.on_epoch = [](const EpochRecord& e) {
    std::cerr << "stage " << e.stage << " epoch " << e.epoch << ": loss " << e.train_loss << ", accuracy "
              << e.train_accuracy;
    if (e.val_accuracy) std::cerr << ", val accuracy " << *e.val_accuracy;
    std::cerr << " (" << e.seconds << " s)\n";
  };
  return o;
}

int train_whole(const TrainArgs& a) {
  require(a.manifest, "--manifest");
  require(a.common.out, "--out");
  const Taxonomy t = load_taxonomy(a.taxonomy);
  const DatasetManifest m = load_manifest(a.manifest);
  m.validate(&t);
  const auto train_records = m.in_split(Split::train);
  if (train_records.empty()) throw DataError("manifest '" + a.manifest + "' has no train split; run `manifest split`");
  const Schedule schedule = resolve_schedule(a, whole_dataset_schedule());

  ModelSpec spec = a.tiny ? ModelSpec::tiny(static_cast<int>(t.class_count()), a.common.seed) : ModelSpec{};
  spec.seed = a.common.seed;
  spec.class_names = t.class_names();
  spec.head.class_count = static_cast<int>(t.class_count());
  if (a.pretrained) {
    spec.backbone.pretrained = true;
    spec.backbone.weights_path = a.weights;
  }
  const ImageLoader loader = file_loader();
  const LabeledImages train = load_labeled(train_records, spec.class_names, t, loader, spec.input_size);
  const LabeledImages val = load_labeled(m.in_split(Split::val), spec.class_names, t, loader, spec.input_size);

  RunOptions options = run_options(a);
  if (!val.empty()) options.validation = &val;
  const json extra = {{"schedule", to_json(schedule)},
                      {"seed", a.common.seed},
                      {"manifest", a.manifest},
                      {"train_samples", train.size()},
                      {"taxonomy_version", t.version()}};
  auto result = run_schedule(build_model<float>(spec), train, schedule, a.common.seed, options,
                             [&](const Model<float>& m, int stage) {
                               json meta = extra;
                               meta["stage"] = stage;
                               save_checkpoint(m, a.common.out + ".stage" + std::to_string(stage) + ".sckpt", meta);
                             });
  save_checkpoint(result.model, a.common.out, extra);
  if (result.best) {
    json meta = extra;
    meta["best_epoch"] = json{{"stage", result.best_epoch->stage},
                          {"epoch", result.best_epoch->epoch},
                          {"val_accuracy", *result.best_epoch->val_accuracy}};
    save_checkpoint(*result.best, a.common.out + ".best.sckpt", meta);
  }
  const std::string history = a.history.empty() ? a.common.out + ".history.jsonl" : a.history;
  write_file_atomic(history, result.history.to_jsonl());
  const auto ev = evaluate(result.model, train);
  std::cout << "trained " << schedule.name << " (" << schedule.total_epochs() << " epochs, " << train.size()
            << " images): train accuracy " << ev.accuracy << " -> " << a.common.out << "\n";
  return 0;
}

int train_object(const TrainArgs& a) {
  require(a.base, "--base");
  require(a.manifest, "--manifest");
  require(a.common.out, "--out");
  const Taxonomy t = load_taxonomy(a.taxonomy);
  const DatasetManifest m = load_manifest(a.manifest);
  m.validate(&t);
  const Model<float> base = load_checkpoint<float>(a.base);

  ObjectTrainingOptions options;
  options.schedule = resolve_schedule(a, object_finetune_schedule());
  options.seed = a.common.seed;
  options.excluded = split_list(a.exclude);
  options.run = run_options(a);
  const auto only = split_list(a.objects);
  if (!only.empty())
    for (const auto& o : t.objects())
      if (std::find(only.begin(), only.end(), o.name) == only.end()) options.excluded.push_back(o.name);

  std::map<std::string, DatasetManifest> by_object;
  for (const auto& r : m.records) {
    const auto* o = t.find_object(r.object);
    if (!o) continue;
    auto& dm = by_object[o->name];
    dm.taxonomy_version = m.taxonomy_version;
    dm.records.push_back(r);
  }
  const auto models = train_object_models(base, by_object, t, file_loader(), options);
  fs::create_directories(a.common.out);
  json index = json::array();
  for (const auto& om : models) {
    std::string file = om.object;
    for (auto& ch : file)
      if (ch == '/' || ch == ' ') ch = '_';
    const fs::path path = fs::path(a.common.out) / (file + ".sckpt");
    save_checkpoint(om.model, path, {{"object", om.object}, {"base", a.base}, {"schedule", to_json(options.schedule)},
                                     {"seed", a.common.seed}});
    write_file_atomic(path.string() + ".history.jsonl", om.history.to_jsonl());
    index.push_back({{"object", om.object}, {"checkpoint", path.filename().string()}, {"states", om.model.spec().class_names}});
    std::cout << om.object << ": " << om.model.class_count() << " states -> " << path.string() << "\n";
  }
  write_json_file(fs::path(a.common.out) / "index.json", {{"models", index}});
  std::cout << "trained " << models.size() << " object models\n";
  return 0;
}

// ---------------------------------------------------------------------- vote

struct VoteArgs {
  Common common;
  std::vector<std::string> predictions;
  double step = 0.1;
  std::string weights;
};

std::vector<PredictionDump> load_aligned(const std::vector<std::string>& paths) {
  if (paths.empty()) throw CLI::RequiredError("--predictions");
  std::vector<PredictionDump> dumps;
  for (const auto& p : paths) {
    PredictionDump d = load_dump(p);
    if (d.model_id.empty()) d.model_id = fs::path(p).stem().string();
    dumps.push_back(dumps.empty() ? std::move(d) : align_dump(dumps.front(), d));
  }
  return dumps;
}

int vote_search(const VoteArgs& a) {
  const auto dumps = load_aligned(a.predictions);
  if (!dumps.front().labeled()) throw DataError("vote search needs labeled predictions (validation split)");
  std::vector<ProbMatrix> members;
  std::vector<std::string> ids;
  for (const auto& d : dumps) {
    members.push_back(d.probs);
    ids.push_back(d.model_id);
  }
  const auto best = search_weights(members, dumps.front().labels, a.step);
  json doc = to_json(best, a.step);
  doc["models"] = ids;
  write_output(a.common.out, doc.dump(2) + "\n");
  if (!a.common.out.empty()) {
    std::cout << "best weights";
    for (double w : best.weights) std::cout << " " << w;
    std::cout << ", macro top-1 " << best.score << " (" << best.evaluated << " vectors)\n";
  }
  return 0;
}

int vote_apply(const VoteArgs& a) {
  require(a.weights, "--weights");
  const auto dumps = load_aligned(a.predictions);
  std::vector<double> w;
  if (fs::exists(a.weights)) {
    w = read_json_file(a.weights).at("weights").get<std::vector<double>>();
  } else {
    for (const auto& part : split_list(a.weights)) w.push_back(std::stod(part));
  }
  std::vector<ProbMatrix> members;
  for (const auto& d : dumps) members.push_back(d.probs);
  PredictionDump out = dumps.front();
  out.model_id = "vote";
  out.probs = soft_vote(members, w);
  write_output(a.common.out, dump_to_jsonl(out));
  return 0;
}

// ---------------------------------------------------------------------- eval

struct EvalArgs {
  Common common;
  std::string model;
  std::string manifest;
  std::string split = "test";
  std::string predictions;
  std::string dump;
  std::string taxonomy;
  std::string input;
  std::string layout = "table1";
  std::string format = "text";
};

PredictionDump predict_manifest(const Model<float>& model, const std::vector<SampleRecord>& records,
                                const Taxonomy& t, const std::string& model_id) {
  const auto& names = model.spec().class_names;
  if (names.empty()) throw DataError("checkpoint has no class names");
  const LabeledImages data = load_labeled(records, names, t, file_loader(), model.input_size());
  PredictionDump d;
  d.model_id = model_id;
  d.class_names = names;
  d.sample_ids = data.ids;
  d.labels = data.labels;
  for (const auto& r : records) d.objects.push_back(r.object);
  d.probs = ProbMatrix(0, names.size());
  std::vector<std::vector<double>> rows;
  for (std::size_t start = 0; start < data.size(); start += 64) {
    const std::size_t n = std::min<std::size_t>(64, data.size() - start);
    const ProbMatrix p = model.predict(std::span(data.images).subspan(start, n));
    for (std::size_t i = 0; i < n; ++i) rows.emplace_back(p.row(i).begin(), p.row(i).end());
  }
  d.probs = rows.empty() ? ProbMatrix(0, names.size()) : ProbMatrix::from_rows(rows);
  return d;
}

int eval_run(const EvalArgs& a) {
  PredictionDump d;
  if (!a.predictions.empty()) {
    d = load_dump(a.predictions);
  } else {
    require(a.model, "--model");
    require(a.manifest, "--manifest");
    const Taxonomy t = load_taxonomy(a.taxonomy);
    const DatasetManifest m = load_manifest(a.manifest);
    const auto records = a.split == "all" ? m.records : m.in_split(parse_split(a.split));
    if (records.empty()) throw DataError("manifest '" + a.manifest + "' has no records in split '" + a.split + "'");
    d = predict_manifest(load_checkpoint<float>(a.model), records, t, fs::path(a.model).stem().string());
  }
  if (!d.labeled()) throw DataError("evaluation needs labeled predictions");
  if (!a.dump.empty()) write_file_atomic(a.dump, dump_to_jsonl(d));
  EvaluationReport report = build_report(d.probs, d.labels, d.class_names);
  report.model = d.model_id;
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < d.objects.size(); ++i)
    if (!d.objects[i].empty()) groups[d.objects[i]].push_back(i);
  for (const auto& [object, rows] : groups) {
    ProbMatrix p(rows.size(), d.probs.cols);
    std::vector<int> labels;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      std::copy(d.probs.row(rows[i]).begin(), d.probs.row(rows[i]).end(), p.row(i).begin());
      labels.push_back(d.labels[rows[i]]);
    }
    report.objects.push_back(object_row(object, p, labels));
  }
  if (!a.common.out.empty()) write_json_file(a.common.out, to_json(report));
  std::cout << render_report(report, "table1") << "\n" << render_report(report, "classes");
  return 0;
}

int eval_report(const EvalArgs& a) {
  require(a.input, "input");
  EvaluationReport report;
  if (fs::path(a.input).extension() == ".jsonl") {
    std::ifstream in(a.input);
    if (!in) throw DataError("cannot read '" + a.input + "'");
    report.objects = object_rows_from_jsonl(in, a.input);
  } else {
    report = report_from_json(read_json_file(a.input));
  }
  if (a.format == "json") {
    write_output(a.common.out, render_report_json(report, a.layout).dump(2) + "\n");
  } else if (a.format == "text") {
    write_output(a.common.out, render_report(report, a.layout));
  } else {
    throw DataError("unknown format '" + a.format + "' (expected text or json)");
  }
  return 0;
}

// --------------------------------------------------------------------- label

struct LabelArgs {
  Common common;
  std::vector<std::string> models;
  std::string weights;
  std::string manifest;
  std::string store;
  std::string taxonomy;
  std::string host = "127.0.0.1";
  std::string ui;
  std::string port_file;
  int port = 8080;
  int k = 3;
};

fs::path store_dir(const LabelArgs& a) { return a.store.empty() ? data_root() / "labeling" : fs::path(a.store); }

Proposer load_proposer(const std::vector<std::string>& paths, const std::string& weights) {
  if (paths.empty()) throw CLI::RequiredError("--model");
  std::vector<std::shared_ptr<const Model<float>>> models;
  std::string ref;
  for (const auto& p : paths) {
    models.push_back(std::make_shared<const Model<float>>(load_checkpoint<float>(p)));
    ref += (ref.empty() ? "" : "+") + fs::path(p).filename().string();
  }
  if (models.size() == 1) return make_proposer(models.front(), ref);
  std::vector<double> w;
  if (weights.empty()) w.assign(models.size(), 1.0);
  else if (fs::exists(weights)) w = read_json_file(weights).at("weights").get<std::vector<double>>();
  else
    for (const auto& part : split_list(weights)) w.push_back(std::stod(part));
  return make_ensemble_proposer(models, w, ref);
}

int label_propose(const LabelArgs& a) {
  require(a.manifest, "--manifest");
  auto taxonomy = std::make_shared<const Taxonomy>(load_taxonomy(a.taxonomy));
  const Proposer proposer = load_proposer(a.models, a.weights);
  const DatasetManifest m = load_manifest(a.manifest);
  ProposalBatch batch = propose_labels(proposer, m.records, a.k, file_loader(), 32, taxonomy.get());
  print_line_errors(batch.skipped, a.manifest + " record");
  LabelingService service(store_dir(a), taxonomy);
  const auto ids = service.add_proposals(std::move(batch.proposals));
  std::cout << "added " << ids.size() << " proposals (" << batch.skipped.size() << " skipped) to "
            << store_dir(a).string() << "\n";
  if (!a.common.out.empty())
    write_json_file(a.common.out, {{"added", ids.size()}, {"skipped", batch.skipped.size()}, {"store", store_dir(a).string()}});
  return 0;
}

std::atomic<LabelingServer*> g_server{nullptr};

void on_signal(int) {
  if (auto* s = g_server.load()) s->stop();
}

int label_serve(const LabelArgs& a) {
  auto taxonomy = std::make_shared<const Taxonomy>(load_taxonomy(a.taxonomy));
  auto service = std::make_shared<LabelingService>(store_dir(a), taxonomy);
  ServerHooks hooks;
  hooks.loader = file_loader();
  hooks.encode_image = encode_record_image;
  if (!a.ui.empty()) hooks.static_dir = a.ui;
  if (!a.models.empty()) {
    auto proposer = std::make_shared<const Proposer>(load_proposer(a.models, a.weights));
    hooks.proposer = [proposer](const json&) { return *proposer; };
  }
  LabelingServer server(service, hooks);
  const int port = server.bind(a.host, a.port);
  if (!a.port_file.empty()) write_file_atomic(a.port_file, std::to_string(port) + "\n");
  std::cout << "serving " << store_dir(a).string() << " on http://" << a.host << ":" << port << "\n" << std::flush;
  g_server = &server;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  server.run();
  g_server = nullptr;
  server.wait_for_jobs();
  service->compact();
  return 0;
}

int label_export(const LabelArgs& a) {
  auto taxonomy = std::make_shared<const Taxonomy>(load_taxonomy(a.taxonomy));
  if (!fs::exists(LabelingService::log_path(store_dir(a))))
    throw DataError("no labeling store at '" + store_dir(a).string() + "'");
  LabelingService service(store_dir(a), taxonomy);
  const DatasetManifest m = service.export_accepted();
  if (a.common.out.empty() || a.common.out == "-") std::cout << manifest_to_jsonl(m);
  else save_manifest(a.common.out, m, {{"command", "label export"}, {"store", store_dir(a).string()}});
  if (!a.common.out.empty() && a.common.out != "-")
    std::cout << "exported " << m.size() << " reviewed records -> " << a.common.out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"statechef: cooking-object state identification toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "statechef 1.0.0");

  std::function<int()> action;
  CLI::App* selected = nullptr;
  std::string* config = nullptr;
  auto bind = [&](CLI::App* cmd, Common& c, std::function<int()> f) {
    add_common(cmd, c);
    cmd->callback([&, cmd, f] {
      selected = cmd;
      config = &c.config;
      action = f;
    });
  };

  // taxonomy
  auto* taxonomy = app.add_subcommand("taxonomy", "State taxonomy tools");
  taxonomy->require_subcommand(1);
  TaxonomyArgs tax;
  auto* tv = taxonomy->add_subcommand("validate", "Validate a taxonomy file");
  tv->add_option("file", tax.file, "Taxonomy JSON (default: bundled)");
  bind(tv, tax.common, [&] { return taxonomy_validate(tax); });

  // manifest
  auto* manifest = app.add_subcommand("manifest", "Dataset manifest tools");
  manifest->require_subcommand(1);
  ManifestArgs man;
  auto* mi = manifest->add_subcommand("import", "Import a crawl URI list");
  mi->add_option("list", man.input, "File with one URI per line");
  mi->add_option("--object", man.object, "Object category");
  mi->add_option("--state", man.state, "State keyword used for the crawl");
  mi->add_option("--source", man.source, "web-crawl, imagenet or synthetic");
  mi->add_option("--taxonomy", man.taxonomy, "Taxonomy JSON");
  mi->add_flag("--strict", man.strict, "Exit with status 2 when any line is rejected");
  bind(mi, man.common, [&] { return manifest_import(man); });
  auto* ms = manifest->add_subcommand("split", "Stratified train/test/val split");
  ms->add_option("manifest", man.input, "Manifest JSONL");
  ms->add_option("--ratios", man.ratios, "train,test,val fractions");
  ms->add_flag("--reassign", man.reassign, "Re-split records that already have a split");
  bind(ms, man.common, [&] { return manifest_split(man); });
  auto* mst = manifest->add_subcommand("stats", "Per-class counts by split");
  mst->add_option("manifest", man.input, "Manifest JSONL");
  bind(mst, man.common, [&] { return manifest_stats(man); });
  auto* msa = manifest->add_subcommand("sample", "Uniform per-category sample of a pool");
  msa->add_option("--pool", man.pool, "Pool manifest");
  msa->add_option("--categories", man.categories, "Comma-separated categories (default: all in pool)");
  msa->add_option("--per-category", man.per_category, "Records per category");
  bind(msa, man.common, [&] { return manifest_sample(man); });
  auto* msy = manifest->add_subcommand("synth", "Synthetic texture manifest");
  msy->add_option("--per-class", man.per_class, "Images per class");
  msy->add_option("--size", man.size, "Image side in pixels");
  msy->add_option("--histogram", man.histogram, "'reference' or comma-separated per-class counts");
  msy->add_option("--taxonomy", man.taxonomy, "Taxonomy JSON");
  bind(msy, man.common, [&] { return manifest_synth(man); });

  // train
  auto* train = app.add_subcommand("train", "Model training");
  train->require_subcommand(1);
  TrainArgs tr;
  auto add_train_options = [&](CLI::App* cmd) {
    cmd->add_option("--manifest", tr.manifest, "Manifest with train (and optional val) split");
    cmd->add_option("--taxonomy", tr.taxonomy, "Taxonomy JSON");
    cmd->add_option("--schedule", tr.schedule, "Schedule JSON (default: the standard schedule)");
    cmd->add_option("--epochs", tr.epochs, "Comma-separated epochs per stage");
    cmd->add_option("--batch-size", tr.batch_size, "Batch size");
    cmd->add_option("--workers", tr.workers, "Augmentation threads");
    cmd->add_flag("--no-augment", tr.no_augment, "Disable online augmentation");
  };
  auto* tw = train->add_subcommand("whole", "Two-phase training on the whole dataset");
  add_train_options(tw);
  tw->add_flag("--tiny", tr.tiny, "Use the tiny-random-test backbone");
  tw->add_flag("--pretrained", tr.pretrained, "Load pretrained backbone weights");
  tw->add_option("--weights", tr.weights, "Pretrained weights archive");
  tw->add_option("--history", tr.history, "Epoch history JSONL (default: <out>.history.jsonl)");
  bind(tw, tr.common, [&] { return train_whole(tr); });
  auto* to = train->add_subcommand("object", "Per-object four-stage fine-tuning");
  add_train_options(to);
  to->add_option("--base", tr.base, "Whole-dataset checkpoint");
  to->add_option("--objects", tr.objects, "Only these objects (comma-separated)");
  to->add_option("--exclude", tr.exclude, "Objects to skip (comma-separated)");
  bind(to, tr.common, [&] { return train_object(tr); });

  // vote
  auto* vote = app.add_subcommand("vote", "Weighted soft voting");
  vote->require_subcommand(1);
  VoteArgs vt;
  auto* vs = vote->add_subcommand("search", "Grid search for voting weights");
  vs->add_option("--predictions", vt.predictions, "Prediction dumps, one per model");
  vs->add_option("--step", vt.step, "Grid step");
  bind(vs, vt.common, [&] { return vote_search(vt); });
  auto* va = vote->add_subcommand("apply", "Combine prediction dumps");
  va->add_option("--predictions", vt.predictions, "Prediction dumps, one per model");
  va->add_option("--weights", vt.weights, "Weights JSON from `vote search` or comma-separated weights");
  bind(va, vt.common, [&] { return vote_apply(vt); });

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluation");
  eval->require_subcommand(1);
  EvalArgs ev;
  auto* er = eval->add_subcommand("run", "Score a model or prediction dump");
  er->add_option("--model", ev.model, "Checkpoint");
  er->add_option("--manifest", ev.manifest, "Labeled manifest");
  er->add_option("--split", ev.split, "train, test, val, unassigned or all");
  er->add_option("--predictions", ev.predictions, "Score this prediction dump instead of a model");
  er->add_option("--dump", ev.dump, "Write the model's prediction dump here");
  er->add_option("--taxonomy", ev.taxonomy, "Taxonomy JSON");
  bind(er, ev.common, [&] { return eval_run(ev); });
  auto* ep = eval->add_subcommand("report", "Render a report or per-object table");
  ep->add_option("input", ev.input, "Report JSON or per-object rows JSONL");
  ep->add_option("--layout", ev.layout, "table1, table2, table3 or classes");
  ep->add_option("--format", ev.format, "text or json");
  bind(ep, ev.common, [&] { return eval_report(ev); });

  // label
  auto* label = app.add_subcommand("label", "Semi-automatic labeling");
  label->require_subcommand(1);
  LabelArgs lb;
  auto add_store = [&](CLI::App* cmd) {
    cmd->add_option("--store", lb.store, "Store directory (default: $STATECHEF_DATA_DIR/labeling)");
    cmd->add_option("--taxonomy", lb.taxonomy, "Taxonomy JSON");
  };
  auto* lp = label->add_subcommand("propose", "Add top-k proposals for unlabeled records");
  add_store(lp);
  lp->add_option("--model", lb.models, "Checkpoint(s); several are soft-voted");
  lp->add_option("--weights", lb.weights, "Voting weights");
  lp->add_option("--manifest", lb.manifest, "Unlabeled manifest");
  lp->add_option("--k", lb.k, "Proposed states per record");
  bind(lp, lb.common, [&] { return label_propose(lb); });
  auto* lsv = label->add_subcommand("serve", "Run the labeling HTTP service");
  add_store(lsv);
  lsv->add_option("--model", lb.models, "Checkpoint(s) for POST /proposals");
  lsv->add_option("--weights", lb.weights, "Voting weights");
  lsv->add_option("--host", lb.host, "Bind address");
  lsv->add_option("--port", lb.port, "Port (0 = any free port)");
  lsv->add_option("--port-file", lb.port_file, "Write the bound port here");
  lsv->add_option("--ui", lb.ui, "Directory of static UI files served at /");
  bind(lsv, lb.common, [&] { return label_serve(lb); });
  auto* lx = label->add_subcommand("export", "Export accepted and overridden labels");
  add_store(lx);
  bind(lx, lb.common, [&] { return label_export(lb); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return kUsage;
  }

  try {
    if (config) apply_config(selected, *config);
    return action();
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n" << (selected ? selected->help() : app.help());
    return kUsage;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  } catch (const json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
}
