// Acceptance checks. Prints one PASS/FAIL line per criterion; exits 1 if any fail.

#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "../oracles.hpp"
#include "../support.hpp"
#include "statechef/dataset.hpp"
#include "statechef/ensemble.hpp"
#include "statechef/labeling.hpp"
#include "statechef/manifest.hpp"
#include "statechef/metrics.hpp"
#include "statechef/model.hpp"
#include "statechef/training.hpp"

using namespace statechef;
using testing_support::random_labels;
using testing_support::random_probs;
using testing_support::source_dir;
using testing_support::taxonomy;
using testing_support::TempDir;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;
  std::vector<std::string> failures;

  void check(bool ok, const std::string& what) {
    if (ok) return;
    pass = false;
    if (failures.size() < 5) failures.push_back(what);
  }
};

using Check = std::function<void(Outcome&)>;

LabeledImages tiny_data(std::size_t per_class) {
  const auto m = synthetic_manifest(taxonomy(), per_class, 32);
  return load_labeled(m.records, taxonomy().class_names(), taxonomy(), make_loader(), 32);
}

std::string fmt(double v, int digits = 2) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

void table_fixtures(Outcome& o) {
  auto load = [](const std::string& name) {
    std::ifstream in(source_dir() / "fixtures" / name);
    EvaluationReport r;
    r.objects = object_rows_from_jsonl(in, name);
    return r;
  };
  const auto t2 = render_report_json(load("table2.jsonl"), "table2")["average"];
  const auto t3 = render_report_json(load("table3.jsonl"), "table3")["average"];
  const std::vector<std::tuple<std::string, double, double>> expected = {
      {"table2 top1", t2["top1"].get<double>(), 86.9}, {"table2 voting", t2["voting"].get<double>(), 88.3},
      {"table3 top1", t3["top1"].get<double>(), 78.5}, {"table3 top2", t3["top2"].get<double>(), 89.6},
      {"table3 top3", t3["top3"].get<double>(), 94.5}};
  for (const auto& [name, got, want] : expected) {
    o.check(std::abs(got - want) <= 0.05, name + " != " + fmt(want, 1));
    o.detail << (o.detail.tellp() > 0 ? ", " : "") << name << " " << fmt(got, 3);
  }
}

void schedule_fidelity(Outcome& o) {
  const auto w = whole_dataset_schedule();
  o.check(w.stages.size() == 2, "whole schedule stage count");
  if (w.stages.size() == 2) {
    o.check(w.stages[0].learning_rate == 0.001 && w.stages[0].epochs == 100 &&
                w.stages[0].freeze_scope == FreezeScope::backbone_only,
            "whole stage 1");
    o.check(w.stages[1].learning_rate == 0.000005 && w.stages[1].epochs == 250 &&
                w.stages[1].freeze_scope == FreezeScope::none,
            "whole stage 2");
  }
  const auto f = object_finetune_schedule();
  o.check(f.stages.size() == 4, "object schedule stage count");
  const FreezeScope scopes[4] = {FreezeScope::all_but_final, FreezeScope::all_but_final,
                                 FreezeScope::added_layers_unfrozen, FreezeScope::none};
  const double rates[4] = {0.01, 0.001, 0.00001, 0.000005};
  const int epochs[4] = {40, 80, 120, 160};
  for (std::size_t i = 0; i < std::min<std::size_t>(4, f.stages.size()); ++i) {
    const auto& s = f.stages[i];
    o.check(s.freeze_scope == scopes[i] && s.learning_rate == rates[i] && s.epochs == epochs[i],
            "object stage " + std::to_string(i + 1));
  }
  for (const auto* s : {&w, &f})
    for (const auto& st : s->stages)
      o.check(st.beta1 == 0.9 && st.beta2 == 0.999 && st.epsilon == 1e-7, "adam constants");
  if (o.pass) o.detail << "2 + 4 stages match";
}

void freeze_bit_exact(Outcome& o) {
  const auto data = tiny_data(3);
  const auto base = build_model<float>(ModelSpec::tiny(11, 1));
  std::size_t frozen = 0, moved = 0;
  for (auto scope : {FreezeScope::all_but_final, FreezeScope::backbone_only, FreezeScope::added_layers_unfrozen,
                     FreezeScope::none}) {
    TrainingStage st;
    st.freeze_scope = scope;
    st.learning_rate = 0.01;
    st.epochs = 1;
    st.batch_size = 16;
    const auto before = snapshot_parameters(base);
    const auto after = snapshot_parameters(run_stage(base, data, st, 5).model);
    for (const auto* p : base.parameters()) {
      const bool same = before.at(p->name) == after.at(p->name);
      if (is_frozen(scope, p->group)) {
        o.check(same, std::string(to_string(scope)) + ": frozen " + p->name + " changed");
        ++frozen;
      } else if (p->learnable()) {
        o.check(!same, std::string(to_string(scope)) + ": trainable " + p->name + " unchanged");
        ++moved;
      }
    }
  }
  o.detail << frozen << " frozen tensors identical, " << moved << " trainable tensors changed";
}

void overfit(Outcome& o) {
  const auto data = tiny_data(20);
  auto sched = with_epochs(whole_dataset_schedule(), {30, 30});
  sched.stages[0].learning_rate = 0.01;
  sched.stages[1].learning_rate = 0.003;
  RunOptions opts;
  opts.workers = 4;
  const auto r = run_schedule(build_model<float>(ModelSpec::tiny(11, 1)), data, sched, 3, opts);
  const double acc = evaluate(r.model, data).accuracy;
  o.check(acc >= 0.95, "training top-1 " + fmt(acc, 4) + " < 0.95");
  o.detail << "training top-1 " << fmt(acc, 4) << " on " << data.size() << " images";
}

void gradient_check(Outcome& o) {
  auto model = build_model<double>(ModelSpec::tiny(11, 21));
  apply_freeze(model, FreezeScope::backbone_only);
  std::vector<Image> imgs;
  std::vector<int> labels;
  for (int i = 0; i < 6; ++i) {
    imgs.push_back(synthetic_texture(i * 2 % 11, static_cast<std::uint64_t>(i), 32));
    labels.push_back(i * 3 % 11);
  }
  const auto x = model.to_tensor(imgs);
  auto loss_of = [&]() {
    nn::Tape<double> tape;
    return softmax_cross_entropy<double>(model.forward(x, {true, &tape}), labels, nullptr).first;
  };
  nn::Tape<double> tape;
  nn::Tensor<double> dlogits;
  softmax_cross_entropy<double>(model.forward(x, {true, &tape}), labels, &dlogits);
  for (auto* p : model.parameters())
    if (p->trainable()) p->zero_grad();
  model.backward(dlogits, tape);

  const double h = 1e-6;
  double worst = 0;
  std::size_t checked = 0;
  for (auto* p : model.parameters()) {
    if (!p->trainable()) continue;
    for (std::size_t i = 0; i < p->size(); ++i) {
      const double saved = p->value[i];
      p->value[i] = saved + h;
      const double up = loss_of();
      p->value[i] = saved - h;
      const double down = loss_of();
      p->value[i] = saved;
      const double numeric = (up - down) / (2 * h);
      const double rel = std::abs(p->grad[i] - numeric) / std::max({std::abs(p->grad[i]), std::abs(numeric), 1e-6});
      worst = std::max(worst, rel);
      ++checked;
    }
  }
  o.check(checked > 0, "no trainable head parameters");
  o.check(worst <= 1e-3, "worst relative error " + std::to_string(worst));
  o.detail << checked << " head parameters, worst relative error " << std::scientific << std::setprecision(2)
           << worst;
}

void parameter_count(Outcome& o) {
  const ModelSpec spec;
  const std::size_t n = count_parameters(spec);
  o.check(n > 19'000'000 && n <= 30'000'000, std::to_string(n) + " outside (19M, 30M]");
  o.detail << n << " parameters";
}

void metric_oracles(Outcome& o) {
  Rng rng(2024);
  for (int f = 0; f < 100; ++f) {
    const std::size_t n = 1 + rng.below(60), c = 2 + rng.below(10);
    const auto p = random_probs(rng, n, c, f % 2 == 0);
    const auto y = random_labels(rng, n, c);
    double prev = 0;
    for (int k = 1; k <= static_cast<int>(c); ++k) {
      const double v = topk_accuracy(p, y, k);
      o.check(v == oracle::topk(p, y, k), "fixture " + std::to_string(f) + " top-" + std::to_string(k));
      o.check(v >= prev, "fixture " + std::to_string(f) + " not monotone");
      prev = v;
    }
    o.check(confusion_matrix(p, y) == oracle::confusion(p, y), "fixture " + std::to_string(f) + " confusion");
  }
  o.detail << "100 fixtures";
}

void voting_properties(Outcome& o) {
  Rng rng(6);
  for (int f = 0; f < 20; ++f) {
    std::vector<ProbMatrix> ms = {random_probs(rng, 40, 6), random_probs(rng, 40, 6), random_probs(rng, 40, 6)};
    const auto y = random_labels(rng, 40, 6);
    const std::string tag = "fixture " + std::to_string(f);
    for (std::size_t m = 0; m < ms.size(); ++m) {
      std::vector<double> w(ms.size(), 0.0);
      w[m] = 1.0;
      o.check(soft_vote(ms, w) == ms[m], tag + " one-hot");
    }
    const auto base = soft_vote(ms, {0.2, 0.3, 0.5});
    const auto scaled = soft_vote(ms, {2.0, 3.0, 5.0});
    double diff = 0;
    for (std::size_t i = 0; i < base.values.size(); ++i) diff = std::max(diff, std::abs(base.values[i] - scaled.values[i]));
    o.check(diff <= 1e-12, tag + " scaling");
    const auto r = search_weights(ms, y, 0.1);
    for (const auto& m : ms) o.check(r.score >= macro_top_k(m, y, 1) - 1e-12, tag + " dominance");
  }
  o.detail << "20 fixtures";
}

void split_properties(Outcome& o) {
  const auto hist = reference_class_histogram();
  const auto m = stratified_split(histogram_manifest(taxonomy(), hist), {}, 42);
  const SplitRatios r;
  std::map<std::string, std::array<std::size_t, 3>> per;
  for (const auto& rec : m.records) {
    auto& c = per[rec.state];
    if (rec.split == Split::train) ++c[0];
    else if (rec.split == Split::test) ++c[1];
    else if (rec.split == Split::val) ++c[2];
  }
  std::array<long, 3> totals{};
  const auto ratios = r.as_array();
  for (const auto& [state, c] : per) {
    const double n = static_cast<double>(c[0] + c[1] + c[2]);
    for (int i = 0; i < 3; ++i) {
      o.check(std::abs(static_cast<double>(c[i]) - ratios[i] * n) <= 1.0, state + " deviates by more than 1");
      totals[i] += static_cast<long>(c[i]);
    }
  }
  const std::array<long, 3> target = {6498, 1413, 1398};
  bool within = true;
  for (int i = 0; i < 3; ++i) within &= std::abs(totals[i] - target[i]) <= 11;
  o.check(within, "totals not within 11");
  o.detail << "totals (" << totals[0] << ", " << totals[1] << ", " << totals[2] << ") vs (6498, 1413, 1398)";

  const auto base = synthetic_manifest(taxonomy(), 37, 8);
  DatasetManifest shuffled = base;
  Rng rng(99);
  rng.shuffle(shuffled.records);
  auto assignment = [](const DatasetManifest& d) {
    std::map<std::string, Split> out;
    for (const auto& rec : d.records) out[rec.id] = rec.split;
    return out;
  };
  const auto a = stratified_split(base, {}, 7);
  o.check(a == stratified_split(base, {}, 7), "not deterministic");
  o.check(assignment(a) == assignment(stratified_split(shuffled, {}, 7)), "not permutation invariant");
}

std::vector<LabelProposal> garlic_proposals(std::size_t n) {
  Proposer p;
  p.class_names = taxonomy().class_names();
  p.model_ref = "acceptance";
  p.input_size = 8;
  p.predict = [](std::span<const Image> batch) {
    ProbMatrix out(batch.size(), 11);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      double sum = 0;
      for (std::size_t c = 0; c < 11; ++c) sum += out.at(i, c) = 1.0 + batch[i].pixels[c] * (c + 1);
      for (std::size_t c = 0; c < 11; ++c) out.at(i, c) /= sum;
    }
    return out;
  };
  std::vector<SampleRecord> records;
  for (std::size_t i = 0; i < n; ++i) {
    SampleRecord r;
    r.id = "g" + std::to_string(i);
    r.uri = synthetic_uri(static_cast<int>(i % 11), i, 8);
    r.object = "garlic";
    r.state = "other";
    records.push_back(r);
  }
  return propose_labels(p, records, 3, make_loader(), 32, &taxonomy()).proposals;
}

void labeling_durability(Outcome& o) {
  TempDir dir;
  auto tax = std::make_shared<const Taxonomy>(taxonomy());
  const pid_t pid = ::fork();
  if (pid < 0) {
    o.check(false, "fork failed");
    return;
  }
  if (pid == 0) {
    int code = 0;
    try {
      LabelingService svc(dir.path(), tax, {4});
      const auto ids = svc.add_proposals(garlic_proposals(8));
      auto s = svc.open_session("reviewer");
      s = svc.decide(s.id, ids[0], DecisionKind::accept, std::nullopt, s.version);
      s = svc.decide(s.id, ids[1], DecisionKind::discard, std::nullopt, s.version);
      const auto p2 = svc.proposal(ids[2]);
      const std::string alt = p2.top_state() == "whole" ? "peeled" : "whole";
      s = svc.decide(s.id, ids[2], DecisionKind::override_state, alt, s.version);
      s = svc.decide(s.id, ids[3], DecisionKind::accept, std::nullopt, s.version);
      s = svc.decide(s.id, ids[3], DecisionKind::reopen, std::nullopt, s.version);
      s = svc.decide(s.id, ids[4], DecisionKind::accept, std::nullopt, s.version);
      write_json_file(dir / "expected.json", svc.snapshot_store().to_json());
    } catch (...) {
      code = 1;
    }
    ::_exit(code);
  }
  int status = 0;
  ::waitpid(pid, &status, 0);
  o.check(WIFEXITED(status) && WEXITSTATUS(status) == 0, "writer process failed");
  if (!o.pass) return;
  const auto expected = ProposalStore::from_json(read_json_file(dir / "expected.json"));
  LabelingService svc(dir.path(), tax);
  o.check(svc.snapshot_store() == expected, "replayed store differs");
  const auto exported = svc.export_accepted();
  std::set<std::string> ids, want = {"g0", "g2", "g4"};
  for (const auto& r : exported.records) {
    ids.insert(r.id);
    o.check(r.review && (r.review->status == "accepted" || r.review->status == "overridden"), r.id + " review status");
  }
  o.check(ids == want, "export holds " + std::to_string(exported.size()) + " records");
  o.detail << "killed writer replayed to identical store, export " << exported.size() << " records";
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, Check>> checks = {
      {"table fixtures", table_fixtures},       {"schedule fidelity", schedule_fidelity},
      {"freeze bit-exactness", freeze_bit_exact}, {"overfit sanity", overfit},
      {"gradient check", gradient_check},       {"parameter count", parameter_count},
      {"metric oracles", metric_oracles},       {"voting properties", voting_properties},
      {"split properties", split_properties},   {"labeling durability", labeling_durability}};
  int failed = 0;
  for (const auto& [name, check] : checks) {
    Outcome o;
    const auto start = std::chrono::steady_clock::now();
    try {
      check(o);
    } catch (const std::exception& e) {
      o.check(false, std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << name << " (" << fmt(secs) << " s): " << o.detail.str();
    for (const auto& f : o.failures) std::cout << " [" << f << "]";
    std::cout << "\n" << std::flush;
    if (!o.pass) ++failed;
  }
  std::cout << (failed ? "FAIL" : "PASS") << "  " << checks.size() - failed << "/" << checks.size()
            << " criteria\n";
  return failed ? 1 : 0;
}
