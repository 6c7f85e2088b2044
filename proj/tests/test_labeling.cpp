#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <atomic>
#include <fstream>
#include <thread>

#include "statechef/dataset.hpp"
#include "statechef/labeling.hpp"
#include "support.hpp"

using namespace statechef;
using testing_support::taxonomy;
using testing_support::TempDir;

namespace {

std::shared_ptr<const Taxonomy> shared_taxonomy() { return std::make_shared<const Taxonomy>(taxonomy()); }

/// Deterministic stand-in model: probability mass follows pixel brightness.
Proposer fake_proposer() {
  Proposer p;
  p.class_names = taxonomy().class_names();
  p.model_ref = "fake-model";
  p.input_size = 8;
  p.predict = [](std::span<const Image> batch) {
    ProbMatrix out(batch.size(), 11);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      double sum = 0;
      for (std::size_t c = 0; c < 11; ++c) sum += out.at(i, c) = 1.0 + batch[i].pixels[c % batch[i].pixels.size()] * (c + 1);
      for (std::size_t c = 0; c < 11; ++c) out.at(i, c) /= sum;
    }
    return out;
  };
  return p;
}

std::vector<SampleRecord> garlic_records(std::size_t n) {
  std::vector<SampleRecord> out;
  for (std::size_t i = 0; i < n; ++i) {
    SampleRecord r;
    r.id = "g" + std::to_string(i);
    r.uri = synthetic_uri(static_cast<int>(i % 11), i, 8);
    r.object = "garlic";
    r.state = "other";
    out.push_back(r);
  }
  return out;
}

std::vector<LabelProposal> proposals(std::size_t n) {
  return propose_labels(fake_proposer(), garlic_records(n), 3, make_loader(), 32, &taxonomy()).proposals;
}

/// A garlic-admissible state different from the proposal's top-1.
std::string other_state(const LabelProposal& p) {
  for (const auto& s : taxonomy().object("garlic").admissible)
    if (s != p.top_state()) return s;
  return "other";
}

}  // namespace

TEST(Propose, TopKSortedAndSkipsUnreadable) {
  auto records = garlic_records(5);
  records[2].uri = "https://example.invalid/x.jpg";
  const auto batch = propose_labels(fake_proposer(), records, 3, make_loader(), 2);
  ASSERT_EQ(batch.proposals.size(), 4u);
  ASSERT_EQ(batch.skipped.size(), 1u);
  EXPECT_EQ(batch.skipped[0].line, 3u);
  for (const auto& p : batch.proposals) {
    ASSERT_EQ(p.proposed.size(), 3u);
    EXPECT_GE(p.proposed[0].probability, p.proposed[1].probability);
    EXPECT_GE(p.proposed[1].probability, p.proposed[2].probability);
    EXPECT_EQ(p.model_ref, "fake-model");
  }
  EXPECT_THROW(propose_labels(fake_proposer(), records, 0, make_loader()), DataError);
  EXPECT_THROW(propose_labels(fake_proposer(), records, 12, make_loader()), DataError);
}

TEST(Propose, RestrictedToAdmissibleStates) {
  auto records = garlic_records(11);
  records[0].object = "unicorn";
  const auto open = propose_labels(fake_proposer(), records, 3, make_loader());
  const auto batch = propose_labels(fake_proposer(), records, 3, make_loader(), 32, &taxonomy());
  ASSERT_EQ(batch.proposals.size(), 11u);
  EXPECT_EQ(batch.proposals[0].proposed, open.proposals[0].proposed);
  bool differs = false;
  for (std::size_t i = 1; i < 11; ++i) {
    const auto& p = batch.proposals[i];
    ASSERT_EQ(p.proposed.size(), 3u);
    for (const auto& s : p.proposed) EXPECT_TRUE(s.state == "other" || taxonomy().is_admissible("garlic", s.state));
    EXPECT_GE(p.proposed[0].probability, p.proposed[1].probability);
    differs |= !(p.proposed == open.proposals[i].proposed);
  }
  EXPECT_TRUE(differs);
}

TEST(Labeling, AcceptOfInadmissibleTopStateRejected) {
  TempDir dir;
  LabelingService svc(dir.path(), shared_taxonomy());
  auto raw = propose_labels(fake_proposer(), garlic_records(11), 3, make_loader()).proposals;
  std::erase_if(raw, [](const LabelProposal& p) {
    return p.top_state() == "other" || taxonomy().is_admissible("garlic", p.top_state());
  });
  ASSERT_FALSE(raw.empty());
  const auto ids = svc.add_proposals(raw);
  const auto s = svc.open_session("lee");
  EXPECT_THROW(svc.decide(s.id, ids[0], DecisionKind::accept, std::nullopt, 0), DataError);
  EXPECT_EQ(svc.decide(s.id, ids[0], DecisionKind::override_state, "whole", 0).version, 1u);
}

TEST(Propose, EnsembleProposerUsesModels) {
  auto spec = ModelSpec::tiny(11, 1);
  spec.class_names = taxonomy().class_names();
  auto a = std::make_shared<const Model<float>>(build_model<float>(spec));
  spec.seed = 2;
  auto b = std::make_shared<const Model<float>>(build_model<float>(spec));
  const auto single = propose_labels(make_proposer(a, "a"), garlic_records(3), 2, make_loader());
  const auto ens = propose_labels(make_ensemble_proposer<float>({a, b}, {1.0, 0.0}, "ab"), garlic_records(3), 2, make_loader());
  ASSERT_EQ(single.proposals.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(single.proposals[i].proposed, ens.proposals[i].proposed);
}

TEST(Labeling, DecisionsAndAuditTrail) {
  TempDir dir;
  LabelingService svc(dir.path(), shared_taxonomy());
  const auto ids = svc.add_proposals(proposals(5));
  ASSERT_EQ(ids.size(), 5u);
  EXPECT_EQ(ids[0], "p000001");
  EXPECT_TRUE(svc.add_proposals(proposals(5)).empty());

  auto s = svc.open_session("alice");
  EXPECT_EQ(s.version, 0u);
  EXPECT_THROW(svc.open_session("  "), DataError);

  s = svc.decide(s.id, ids[0], DecisionKind::accept, std::nullopt, s.version);
  const auto p1 = svc.proposal(ids[1]);
  s = svc.decide(s.id, ids[1], DecisionKind::override_state, other_state(p1), s.version);
  s = svc.decide(s.id, ids[2], DecisionKind::discard, std::nullopt, s.version);
  EXPECT_EQ(s.version, 3u);
  EXPECT_EQ(svc.audit(s.id).size(), 3u);
  EXPECT_EQ(svc.proposal(ids[0]).status, ProposalStatus::accepted);
  EXPECT_EQ(svc.proposal(ids[0]).final_state, svc.proposal(ids[0]).top_state());
  EXPECT_EQ(svc.proposal(ids[1]).status, ProposalStatus::overridden);
  EXPECT_EQ(svc.proposal(ids[1]).final_state, other_state(p1));
  EXPECT_EQ(svc.proposal(ids[2]).status, ProposalStatus::discarded);
  EXPECT_EQ(svc.next_pending()->id, ids[3]);
}

TEST(Labeling, StaleVersionConflicts) {
  TempDir dir;
  LabelingService svc(dir.path(), shared_taxonomy());
  const auto ids = svc.add_proposals(proposals(3));
  auto s = svc.open_session("bob");
  s = svc.decide(s.id, ids[0], DecisionKind::accept, std::nullopt, 0);
  try {
    svc.decide(s.id, ids[1], DecisionKind::accept, std::nullopt, 0);
    FAIL();
  } catch (const ConflictError& e) {
    EXPECT_EQ(e.current_version(), 1u);
  }
  EXPECT_EQ(svc.proposal(ids[1]).status, ProposalStatus::pending);
  EXPECT_EQ(svc.audit(s.id).size(), 1u);
  EXPECT_THROW(svc.decide(s.id, ids[0], DecisionKind::accept, std::nullopt, 1), ConflictError);
  EXPECT_THROW(svc.decide(s.id, ids[1], DecisionKind::reopen, std::nullopt, 1), ConflictError);
}

TEST(Labeling, OverrideValidation) {
  TempDir dir;
  LabelingService svc(dir.path(), shared_taxonomy());
  const auto ids = svc.add_proposals(proposals(1));
  const auto p = svc.proposal(ids[0]);
  auto s = svc.open_session("carol");
  EXPECT_THROW(svc.decide(s.id, ids[0], DecisionKind::override_state, std::nullopt, 0), DataError);
  EXPECT_THROW(svc.decide(s.id, ids[0], DecisionKind::override_state, "fried", 0), DataError);
  EXPECT_THROW(svc.decide(s.id, ids[0], DecisionKind::override_state, "juice", 0), DataError);  // not garlic
  EXPECT_THROW(svc.decide(s.id, ids[0], DecisionKind::override_state, p.top_state(), 0), DataError);
  EXPECT_THROW(svc.decide(s.id, "p999999", DecisionKind::accept, std::nullopt, 0), NotFoundError);
  EXPECT_THROW(svc.decide("s99", ids[0], DecisionKind::accept, std::nullopt, 0), NotFoundError);
  EXPECT_EQ(svc.session(s.id).version, 0u);
  s = svc.decide(s.id, ids[0], DecisionKind::override_state, p.top_state() == "other" ? "whole" : "other", 0);
  EXPECT_EQ(s.version, 1u);
}

TEST(Labeling, SynonymOverrideStoredCanonical) {
  TempDir dir;
  LabelingService svc(dir.path(), shared_taxonomy());
  const auto ids = svc.add_proposals(proposals(11));
  auto s = svc.open_session("dan");
  for (const auto& id : ids) {
    if (svc.proposal(id).top_state() == "creamy") continue;
    svc.decide(s.id, id, DecisionKind::override_state, "paste", s.version);
    EXPECT_EQ(svc.proposal(id).final_state, "creamy");
    return;
  }
  GTEST_SKIP() << "every proposal already ranks creamy first";
}

TEST(Labeling, ReopenCompensates) {
  TempDir dir;
  LabelingService svc(dir.path(), shared_taxonomy());
  const auto ids = svc.add_proposals(proposals(2));
  auto s = svc.open_session("erin");
  s = svc.decide(s.id, ids[0], DecisionKind::discard, std::nullopt, s.version);
  s = svc.decide(s.id, ids[0], DecisionKind::reopen, std::nullopt, s.version);
  EXPECT_EQ(svc.proposal(ids[0]).status, ProposalStatus::pending);
  EXPECT_FALSE(svc.proposal(ids[0]).final_state.has_value());
  s = svc.decide(s.id, ids[0], DecisionKind::accept, std::nullopt, s.version);
  const auto trail = svc.audit(s.id);
  ASSERT_EQ(trail.size(), 3u);
  EXPECT_EQ(trail[1].kind, DecisionKind::reopen);
  EXPECT_EQ(parse_decision("undo"), DecisionKind::reopen);
  EXPECT_EQ(trail.back().version, s.version);
}

TEST(Labeling, ExportContainsAcceptedAndOverridden) {
  TempDir dir;
  LabelingService svc(dir.path(), shared_taxonomy());
  const auto ids = svc.add_proposals(proposals(5));
  auto s = svc.open_session("fay");
  s = svc.decide(s.id, ids[0], DecisionKind::accept, std::nullopt, s.version);
  s = svc.decide(s.id, ids[1], DecisionKind::accept, std::nullopt, s.version);
  const auto p2 = svc.proposal(ids[2]);
  s = svc.decide(s.id, ids[2], DecisionKind::override_state, other_state(p2), s.version);
  s = svc.decide(s.id, ids[3], DecisionKind::discard, std::nullopt, s.version);
  const auto m = svc.export_accepted();
  ASSERT_EQ(m.size(), 3u);
  EXPECT_EQ(m.records[0].id, "g0");
  EXPECT_EQ(m.records[0].review->status, "accepted");
  EXPECT_EQ(m.records[2].state, other_state(p2));
  EXPECT_EQ(m.records[2].review->status, "overridden");
  EXPECT_EQ(m.records[2].review->proposed, p2.top_state());
  EXPECT_NO_THROW(m.validate(&taxonomy()));
}

TEST(Labeling, RestartReplaysToIdenticalStore) {
  TempDir dir;
  ProposalStore before;
  {
    LabelingService svc(dir.path(), shared_taxonomy(), {3});
    const auto ids = svc.add_proposals(proposals(6));
    auto s = svc.open_session("gus");
    s = svc.decide(s.id, ids[0], DecisionKind::accept, std::nullopt, s.version);
    s = svc.decide(s.id, ids[1], DecisionKind::discard, std::nullopt, s.version);
    s = svc.decide(s.id, ids[1], DecisionKind::reopen, std::nullopt, s.version);
    s = svc.decide(s.id, ids[2], DecisionKind::override_state, other_state(svc.proposal(ids[2])), s.version);
    before = svc.snapshot_store();
  }
  EXPECT_TRUE(std::filesystem::exists(LabelingService::snapshot_path(dir.path())));
  LabelingService again(dir.path(), shared_taxonomy());
  EXPECT_TRUE(again.snapshot_store() == before);
  EXPECT_TRUE(LabelingService::recover(dir.path()) == before);
  std::filesystem::remove(LabelingService::snapshot_path(dir.path()));
  EXPECT_TRUE(LabelingService::recover(dir.path()) == before);
}

TEST(Labeling, KilledProcessLosesNothingAcknowledged) {
  TempDir dir;
  const pid_t pid = ::fork();
  ASSERT_GE(pid, 0);
  if (pid == 0) {
    int code = 0;
    try {
      LabelingService svc(dir.path(), shared_taxonomy(), {0});
      const auto ids = svc.add_proposals(proposals(4));
      auto s = svc.open_session("hal");
      s = svc.decide(s.id, ids[0], DecisionKind::accept, std::nullopt, s.version);
      s = svc.decide(s.id, ids[1], DecisionKind::discard, std::nullopt, s.version);
      std::ofstream(dir / "ack") << s.version;
    } catch (...) {
      code = 1;
    }
    ::_exit(code);  // no destructors, no snapshot
  }
  int status = 0;
  ::waitpid(pid, &status, 0);
  ASSERT_TRUE(WIFEXITED(status));
  ASSERT_EQ(WEXITSTATUS(status), 0);
  EXPECT_FALSE(std::filesystem::exists(LabelingService::snapshot_path(dir.path())));
  LabelingService svc(dir.path(), shared_taxonomy());
  EXPECT_EQ(svc.session("s1").version, 2u);
  EXPECT_EQ(read_text_file(dir / "ack"), "2");
  EXPECT_EQ(svc.proposal("p000001").status, ProposalStatus::accepted);
  EXPECT_EQ(svc.proposal("p000002").status, ProposalStatus::discarded);
  EXPECT_EQ(svc.stats()["pending"], 2);
}

TEST(Labeling, TornFinalLineDropped) {
  TempDir dir;
  ProposalStore before;
  {
    LabelingService svc(dir.path(), shared_taxonomy(), {0});
    const auto ids = svc.add_proposals(proposals(2));
    auto s = svc.open_session("ivy");
    svc.decide(s.id, ids[0], DecisionKind::accept, std::nullopt, s.version);
    before = svc.snapshot_store();
  }
  {
    std::ofstream out(LabelingService::log_path(dir.path()), std::ios::app);
    out << R"({"type":"decision","decision":{"session_id":"s1","proposal_id":"p0000)";
  }
  LabelingService svc(dir.path(), shared_taxonomy());
  EXPECT_TRUE(svc.snapshot_store() == before);
}

TEST(Labeling, CorruptMiddleLineRejected) {
  TempDir dir;
  {
    LabelingService svc(dir.path(), shared_taxonomy(), {0});
    svc.add_proposals(proposals(2));
    svc.open_session("jo");
  }
  std::string text = read_text_file(LabelingService::log_path(dir.path()));
  text.insert(0, "{garbage\n");
  write_file_atomic(LabelingService::log_path(dir.path()), text);
  EXPECT_THROW(LabelingService(dir.path(), shared_taxonomy()), DataError);
}

TEST(Labeling, SingleWriterPerStore) {
  TempDir dir;
  LabelingService svc(dir.path(), shared_taxonomy());
  EXPECT_THROW(LabelingService(dir.path(), shared_taxonomy()), Error);
}

TEST(Labeling, ConcurrentDecisionsSerialize) {
  TempDir dir;
  LabelingService svc(dir.path(), shared_taxonomy());
  const auto ids = svc.add_proposals(proposals(40));
  const auto s = svc.open_session("kim");
  std::atomic<int> ok{0}, conflicts{0};
  std::vector<std::thread> threads;
  for (int t = 0; t < 4; ++t)
    threads.emplace_back([&, t] {
      for (int i = t; i < 40; i += 4) {
        for (;;) {
          try {
            svc.decide(s.id, ids[static_cast<std::size_t>(i)], DecisionKind::accept, std::nullopt,
                       svc.session(s.id).version);
            ++ok;
            break;
          } catch (const ConflictError&) {
            ++conflicts;
          }
        }
      }
    });
  for (auto& th : threads) th.join();
  EXPECT_EQ(ok.load(), 40);
  EXPECT_EQ(svc.session(s.id).version, 40u);
  EXPECT_EQ(svc.audit(s.id).size(), 40u);
  EXPECT_EQ(svc.export_accepted().size(), 40u);
}

TEST(Labeling, JsonRoundTrips) {
  const auto p = proposals(1).front();
  EXPECT_EQ(proposal_from_json(to_json(p)), p);
  Decision d{"s1", "p000001", DecisionKind::override_state, "sliced", 4};
  EXPECT_EQ(decision_from_json(to_json(d)), d);
  ProposalStore st;
  st.apply({{"type", "open_session"}, {"session_id", "s1"}, {"reviewer", "x"}});
  EXPECT_TRUE(ProposalStore::from_json(st.to_json()) == st);
}
