#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "statechef/dataset.hpp"
#include "statechef/ensemble.hpp"
#include "statechef/errors.hpp"
#include "statechef/io.hpp"
#include "statechef/manifest.hpp"
#include "statechef/matrix.hpp"
#include "statechef/metrics.hpp"
#include "statechef/model.hpp"
#include "statechef/taxonomy.hpp"

namespace statechef {

enum class ProposalStatus { pending, accepted, overridden, discarded };

inline std::string_view to_string(ProposalStatus s) {
  switch (s) {
    case ProposalStatus::pending: return "pending";
    case ProposalStatus::accepted: return "accepted";
    case ProposalStatus::overridden: return "overridden";
    case ProposalStatus::discarded: break;
  }
  return "discarded";
}

inline ProposalStatus parse_proposal_status(std::string_view s) {
  if (s == "pending") return ProposalStatus::pending;
  if (s == "accepted") return ProposalStatus::accepted;
  if (s == "overridden") return ProposalStatus::overridden;
  if (s == "discarded") return ProposalStatus::discarded;
  throw DataError("unknown proposal status '" + std::string(s) + "'");
}

struct ScoredState {
  std::string state;
  double probability = 0;
  bool operator==(const ScoredState&) const = default;
};

struct LabelProposal {
  std::string id;
  SampleRecord record;
  std::vector<ScoredState> proposed;  // non-increasing probability
  std::string model_ref;
  ProposalStatus status = ProposalStatus::pending;
  std::optional<std::string> final_state;

  const std::string& top_state() const { return proposed.front().state; }
  bool operator==(const LabelProposal&) const = default;
};

struct ReviewSession {
  std::string id;
  std::string reviewer;
  std::uint64_t version = 0;
  bool operator==(const ReviewSession&) const = default;
};

enum class DecisionKind { accept, override_state, discard, reopen };

inline std::string_view to_string(DecisionKind d) {
  switch (d) {
    case DecisionKind::accept: return "accept";
    case DecisionKind::override_state: return "override";
    case DecisionKind::discard: return "discard";
    case DecisionKind::reopen: break;
  }
  return "reopen";
}

inline DecisionKind parse_decision(std::string_view s) {
  if (s == "accept") return DecisionKind::accept;
  if (s == "override") return DecisionKind::override_state;
  if (s == "discard") return DecisionKind::discard;
  if (s == "reopen" || s == "undo") return DecisionKind::reopen;
  throw DataError("unknown decision '" + std::string(s) + "' (expected accept, override, discard or reopen)");
}

/// One applied decision. `reopen` is the compensating entry that returns a
/// decided proposal to pending; entries are never rewritten.
struct Decision {
  std::string session_id;
  std::string proposal_id;
  DecisionKind kind = DecisionKind::accept;
  std::optional<std::string> state;
  std::uint64_t version = 0;  // session version after the decision
  bool operator==(const Decision&) const = default;
};

inline json to_json(const LabelProposal& p) {
  json proposed = json::array();
  for (const auto& s : p.proposed) proposed.push_back({{"state", s.state}, {"probability", s.probability}});
  return json{{"id", p.id},
              {"sample_id", p.record.id},
              {"record", record_to_json(p.record)},
              {"proposed", proposed},
              {"model_ref", p.model_ref},
              {"status", to_string(p.status)},
              {"final_state", p.final_state ? json(*p.final_state) : json(nullptr)}};
}

inline LabelProposal proposal_from_json(const json& j) {
  LabelProposal p;
  p.id = j.at("id").get<std::string>();
  p.record = record_from_json(j.at("record"));
  for (const auto& s : j.at("proposed")) p.proposed.push_back({s.at("state").get<std::string>(), s.at("probability").get<double>()});
  p.model_ref = j.at("model_ref").get<std::string>();
  p.status = parse_proposal_status(j.at("status").get<std::string>());
  if (!j.at("final_state").is_null()) p.final_state = j.at("final_state").get<std::string>();
  return p;
}

inline json to_json(const ReviewSession& s) {
  return json{{"id", s.id}, {"reviewer", s.reviewer}, {"version", s.version}};
}

inline json to_json(const Decision& d) {
  return json{{"session_id", d.session_id},
              {"proposal_id", d.proposal_id},
              {"decision", to_string(d.kind)},
              {"state", d.state ? json(*d.state) : json(nullptr)},
              {"version", d.version}};
}

inline Decision decision_from_json(const json& j) {
  Decision d;
  d.session_id = j.at("session_id").get<std::string>();
  d.proposal_id = j.at("proposal_id").get<std::string>();
  d.kind = parse_decision(j.at("decision").get<std::string>());
  if (j.contains("state") && !j.at("state").is_null()) d.state = j.at("state").get<std::string>();
  d.version = j.at("version").get<std::uint64_t>();
  return d;
}

// ------------------------------------------------------------------ proposals

/// Anything that maps a batch of images to class probabilities.
struct Proposer {
  std::vector<std::string> class_names;
  std::string model_ref;
  int input_size = 224;
  std::function<ProbMatrix(std::span<const Image>)> predict;
};

template <typename T>
Proposer make_proposer(std::shared_ptr<const Model<T>> model, std::string model_ref) {
  Proposer p;
  p.class_names = model->spec().class_names;
  p.model_ref = std::move(model_ref);
  p.input_size = model->input_size();
  p.predict = [model](std::span<const Image> batch) { return model->predict(batch); };
  return p;
}

/// Soft vote over models sharing class names and input size.
template <typename T>
Proposer make_ensemble_proposer(std::vector<std::shared_ptr<const Model<T>>> models, std::vector<double> weights,
                                std::string model_ref) {
  if (models.empty()) throw DataError("ensemble proposer: no models");
  for (const auto& m : models)
    if (m->spec().class_names != models.front()->spec().class_names || m->input_size() != models.front()->input_size())
      throw DataError("ensemble proposer: members disagree on classes or input size");
  Proposer p;
  p.class_names = models.front()->spec().class_names;
  p.model_ref = std::move(model_ref);
  p.input_size = models.front()->input_size();
  p.predict = [models, weights](std::span<const Image> batch) {
    std::vector<ProbMatrix> members;
    for (const auto& m : models) members.push_back(m->predict(batch));
    return soft_vote(members, weights);
  };
  return p;
}

struct ProposalBatch {
  std::vector<LabelProposal> proposals;
  std::vector<LineError> skipped;  // line = record position, from 1
};

/// Top-k proposals for every readable record, in record order. Unreadable
/// images are skipped and reported. With a taxonomy, records of a known object
/// only receive its admissible states and "other".
inline ProposalBatch propose_labels(const Proposer& proposer, const std::vector<SampleRecord>& records, int k,
                                    const ImageLoader& loader, std::size_t batch_size = 32,
                                    const Taxonomy* taxonomy = nullptr) {
  if (k < 1) throw DataError("k must be at least 1");
  if (static_cast<std::size_t>(k) > proposer.class_names.size())
    throw DataError("k = " + std::to_string(k) + " exceeds the class count " + std::to_string(proposer.class_names.size()));
  ProposalBatch out;
  std::vector<Image> images;
  std::vector<const SampleRecord*> pending;
  auto flush = [&] {
    if (images.empty()) return;
    const ProbMatrix probs = proposer.predict(images);
    for (std::size_t i = 0; i < pending.size(); ++i) {
      const auto row = probs.row(i);
      std::vector<std::size_t> order(row.size());
      for (std::size_t j = 0; j < order.size(); ++j) order[j] = j;
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return row[a] > row[b]; });
      LabelProposal p;
      p.record = *pending[i];
      p.model_ref = proposer.model_ref;
      const bool restrict = taxonomy && taxonomy->find_object(p.record.object);
      for (std::size_t j : order) {
        if (p.proposed.size() == static_cast<std::size_t>(k)) break;
        const std::string& state = proposer.class_names[j];
        if (restrict && state != kOtherClass && !taxonomy->is_admissible(p.record.object, state)) continue;
        p.proposed.push_back({state, row[j]});
      }
      out.proposals.push_back(std::move(p));
    }
    images.clear();
    pending.clear();
  };
  for (std::size_t i = 0; i < records.size(); ++i) {
    try {
      Image img = loader(records[i]);
      img.check_shape();
      images.push_back(resize_bilinear(img, proposer.input_size, proposer.input_size));
      pending.push_back(&records[i]);
    } catch (const std::exception& e) {
      out.skipped.push_back({i + 1, records[i].id + ": " + e.what()});
      continue;
    }
    if (images.size() >= batch_size) flush();
  }
  flush();
  return out;
}

// ---------------------------------------------------------------------- store

/// In-memory proposal store. Mutations go through apply(), which is also what
/// log replay uses, so a recovered store is identical to the live one.
struct ProposalStore {
  std::vector<LabelProposal> proposals;
  std::map<std::string, std::size_t> by_id;
  std::map<std::string, std::size_t> by_sample;
  std::map<std::string, ReviewSession> sessions;
  std::map<std::string, std::vector<Decision>> audit;  // per session
  std::uint64_t sequence = 0;                          // log entries applied
  std::uint64_t next_proposal = 1;
  std::uint64_t next_session = 1;

  const LabelProposal& proposal(const std::string& id) const {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw NotFoundError("unknown proposal '" + id + "'");
    return proposals[it->second];
  }
  LabelProposal& proposal(const std::string& id) {
    return const_cast<LabelProposal&>(std::as_const(*this).proposal(id));
  }
  const ReviewSession& session(const std::string& id) const {
    auto it = sessions.find(id);
    if (it == sessions.end()) throw NotFoundError("unknown session '" + id + "'");
    return it->second;
  }

  std::size_t count(ProposalStatus s) const {
    return static_cast<std::size_t>(std::count_if(proposals.begin(), proposals.end(), [s](const auto& p) { return p.status == s; }));
  }

  /// Applies one log entry.
  void apply(const json& entry) {
    const std::string type = entry.at("type").get<std::string>();
    if (type == "add_proposals") {
      for (const auto& pj : entry.at("proposals")) {
        LabelProposal p = proposal_from_json(pj);
        by_id[p.id] = proposals.size();
        by_sample[p.record.id] = proposals.size();
        proposals.push_back(std::move(p));
        ++next_proposal;
      }
    } else if (type == "open_session") {
      ReviewSession s{entry.at("session_id").get<std::string>(), entry.at("reviewer").get<std::string>(), 0};
      sessions[s.id] = s;
      audit[s.id];
      ++next_session;
    } else if (type == "decision") {
      const Decision d = decision_from_json(entry.at("decision"));
      LabelProposal& p = proposal(d.proposal_id);
      switch (d.kind) {
        case DecisionKind::accept:
          p.status = ProposalStatus::accepted;
          p.final_state = p.top_state();
          break;
        case DecisionKind::override_state:
          p.status = ProposalStatus::overridden;
          p.final_state = d.state;
          break;
        case DecisionKind::discard:
          p.status = ProposalStatus::discarded;
          p.final_state.reset();
          break;
        case DecisionKind::reopen:
          p.status = ProposalStatus::pending;
          p.final_state.reset();
          break;
      }
      sessions.at(d.session_id).version = d.version;
      audit[d.session_id].push_back(d);
    } else {
      throw DataError("unknown log entry type '" + type + "'");
    }
    ++sequence;
  }

  json to_json() const {
    json ps = json::array();
    for (const auto& p : proposals) ps.push_back(statechef::to_json(p));
    json ss = json::array();
    for (const auto& [id, s] : sessions) ss.push_back(statechef::to_json(s));
    json au = json::object();
    for (const auto& [id, ds] : audit) {
      json arr = json::array();
      for (const auto& d : ds) arr.push_back(statechef::to_json(d));
      au[id] = arr;
    }
    return json{{"sequence", sequence},     {"next_proposal", next_proposal}, {"next_session", next_session},
                {"proposals", ps},          {"sessions", ss},                 {"audit", au}};
  }

  static ProposalStore from_json(const json& j) {
    ProposalStore s;
    s.sequence = j.at("sequence").get<std::uint64_t>();
    s.next_proposal = j.at("next_proposal").get<std::uint64_t>();
    s.next_session = j.at("next_session").get<std::uint64_t>();
    for (const auto& pj : j.at("proposals")) {
      LabelProposal p = proposal_from_json(pj);
      s.by_id[p.id] = s.proposals.size();
      s.by_sample[p.record.id] = s.proposals.size();
      s.proposals.push_back(std::move(p));
    }
    for (const auto& sj : j.at("sessions"))
      s.sessions[sj.at("id").get<std::string>()] = {sj.at("id").get<std::string>(), sj.at("reviewer").get<std::string>(),
                                                    sj.at("version").get<std::uint64_t>()};
    for (const auto& [id, arr] : j.at("audit").items()) {
      auto& trail = s.audit[id];
      for (const auto& dj : arr) trail.push_back(decision_from_json(dj));
    }
    return s;
  }

  bool operator==(const ProposalStore& o) const {
    return proposals == o.proposals && sessions == o.sessions && audit == o.audit && sequence == o.sequence &&
           next_proposal == o.next_proposal && next_session == o.next_session;
  }
};

// ---------------------------------------------------------------- durability

/// Append-only JSONL log; each append is fsync'd before returning.
class DecisionLog {
 public:
  explicit DecisionLog(std::filesystem::path path) : path_(std::move(path)) {
    if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
    fd_ = ::open(path_.c_str(), O_CREAT | O_WRONLY | O_APPEND | O_CLOEXEC, 0644);
    if (fd_ < 0) throw Error("cannot open log '" + path_.string() + "': " + std::strerror(errno));
  }
  DecisionLog(const DecisionLog&) = delete;
  DecisionLog& operator=(const DecisionLog&) = delete;
  ~DecisionLog() {
    if (fd_ >= 0) ::close(fd_);
  }

  void append(const json& entry) {
    const std::string line = entry.dump() + "\n";
    std::size_t done = 0;
    while (done < line.size()) {
      const ssize_t n = ::write(fd_, line.data() + done, line.size() - done);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw Error("log write failed: " + std::string(std::strerror(errno)));
      }
      done += static_cast<std::size_t>(n);
    }
    if (::fsync(fd_) != 0) throw Error("log fsync failed: " + std::string(std::strerror(errno)));
  }

  /// Complete entries in order. A torn final line (never acknowledged) is dropped.
  static std::vector<json> read(const std::filesystem::path& path) {
    std::vector<json> out;
    if (!std::filesystem::exists(path)) return out;
    const std::string text = read_text_file(path);
    std::size_t pos = 0, lineno = 0;
    while (pos < text.size()) {
      const auto nl = text.find('\n', pos);
      ++lineno;
      if (nl == std::string::npos) break;
      const std::string line = text.substr(pos, nl - pos);
      pos = nl + 1;
      if (trim(line).empty()) continue;
      try {
        out.push_back(json::parse(line));
      } catch (const json::exception& e) {
        throw DataError(path.string() + ":" + std::to_string(lineno) + ": corrupt log entry: " + e.what());
      }
    }
    return out;
  }

 private:
  std::filesystem::path path_;
  int fd_ = -1;
};

struct ServiceOptions {
  std::size_t snapshot_every = 256;  // log entries between compacted snapshots; 0 disables
};

/// Durable labeling workflow over a directory holding `decisions.log.jsonl`
/// and `snapshot.json`. Thread-safe.
class LabelingService {
 public:
  LabelingService(std::filesystem::path dir, std::shared_ptr<const Taxonomy> taxonomy, ServiceOptions options = {})
      : dir_(std::move(dir)), taxonomy_(std::move(taxonomy)), options_(options), lock_(dir_ / "store") {
    store_ = recover(dir_);
    log_ = std::make_unique<DecisionLog>(log_path(dir_));
  }

  static std::filesystem::path log_path(const std::filesystem::path& dir) { return dir / "decisions.log.jsonl"; }
  static std::filesystem::path snapshot_path(const std::filesystem::path& dir) { return dir / "snapshot.json"; }

  /// Rebuilds the store from the latest snapshot plus the log entries after it.
  static ProposalStore recover(const std::filesystem::path& dir) {
    ProposalStore store;
    if (std::filesystem::exists(snapshot_path(dir))) store = ProposalStore::from_json(read_json_file(snapshot_path(dir)));
    const auto entries = DecisionLog::read(log_path(dir));
    if (entries.size() < store.sequence)
      throw DataError("snapshot covers " + std::to_string(store.sequence) + " entries but the log has only " +
                      std::to_string(entries.size()));
    for (std::size_t i = store.sequence; i < entries.size(); ++i) store.apply(entries[i]);
    return store;
  }

  const Taxonomy& taxonomy() const { return *taxonomy_; }

  /// Adds pending proposals, assigning ids. Samples that already have a
  /// proposal are skipped. Returns the ids added.
  std::vector<std::string> add_proposals(std::vector<LabelProposal> batch) {
    std::lock_guard lock(mutex_);
    json arr = json::array();
    std::vector<std::string> ids;
    std::uint64_t next = store_.next_proposal;
    std::set<std::string> seen;
    for (auto& p : batch) {
      if (p.proposed.empty()) throw DataError("proposal for '" + p.record.id + "' has no states");
      for (std::size_t i = 1; i < p.proposed.size(); ++i)
        if (p.proposed[i].probability > p.proposed[i - 1].probability)
          throw DataError("proposal for '" + p.record.id + "': probabilities must be non-increasing");
      if (store_.by_sample.contains(p.record.id) || !seen.insert(p.record.id).second) continue;
      char buf[32];
      std::snprintf(buf, sizeof buf, "p%06llu", static_cast<unsigned long long>(next++));
      p.id = buf;
      p.status = ProposalStatus::pending;
      p.final_state.reset();
      ids.push_back(p.id);
      arr.push_back(to_json(p));
    }
    if (!ids.empty()) commit({{"type", "add_proposals"}, {"proposals", arr}});
    return ids;
  }

  ReviewSession open_session(const std::string& reviewer) {
    if (trim(reviewer).empty()) throw DataError("reviewer identifier required");
    std::lock_guard lock(mutex_);
    const std::string id = "s" + std::to_string(store_.next_session);
    commit({{"type", "open_session"}, {"session_id", id}, {"reviewer", reviewer}});
    return store_.sessions.at(id);
  }

  ReviewSession session(const std::string& id) const {
    std::lock_guard lock(mutex_);
    return store_.session(id);
  }

  LabelProposal proposal(const std::string& id) const {
    std::lock_guard lock(mutex_);
    return store_.proposal(id);
  }

  /// First pending proposal in store order, if any.
  std::optional<LabelProposal> next_pending() const {
    std::lock_guard lock(mutex_);
    for (const auto& p : store_.proposals)
      if (p.status == ProposalStatus::pending) return p;
    return std::nullopt;
  }

  std::vector<Decision> audit(const std::string& session_id) const {
    std::lock_guard lock(mutex_);
    store_.session(session_id);
    auto it = store_.audit.find(session_id);
    return it == store_.audit.end() ? std::vector<Decision>{} : it->second;
  }

  /// Compare-and-set decision. Persisted before returning; a stale
  /// `expected_version` raises ConflictError and changes nothing.
  ReviewSession decide(const std::string& session_id, const std::string& proposal_id, DecisionKind kind,
                       std::optional<std::string> state, std::uint64_t expected_version) {
    std::lock_guard lock(mutex_);
    const ReviewSession& s = store_.session(session_id);
    if (s.version != expected_version)
      throw ConflictError("version conflict: session '" + session_id + "' is at version " + std::to_string(s.version) +
                              ", expected " + std::to_string(expected_version),
                          s.version);
    const LabelProposal& p = store_.proposal(proposal_id);
    if (kind == DecisionKind::reopen) {
      if (p.status == ProposalStatus::pending)
        throw ConflictError("proposal '" + proposal_id + "' is already pending", s.version);
      state.reset();
    } else if (p.status != ProposalStatus::pending) {
      throw ConflictError("proposal '" + proposal_id + "' is already " + std::string(to_string(p.status)), s.version);
    }
    if (kind == DecisionKind::override_state) {
      if (!state) throw DataError("override requires a state");
      const auto cls = taxonomy_->find_class(*state);
      if (!cls) throw DataError("unknown state '" + *state + "'");
      const std::string canonical = taxonomy_->classes()[static_cast<std::size_t>(*cls)].name;
      if (taxonomy_->find_object(p.record.object) && canonical != kOtherClass &&
          !taxonomy_->is_admissible(p.record.object, canonical))
        throw DataError("state '" + canonical + "' is not admissible for '" + p.record.object + "'");
      if (canonical == p.top_state()) throw DataError("override state equals the proposed top-1 state; use accept");
      state = canonical;
    } else if (kind != DecisionKind::reopen) {
      state.reset();
    }
    if (kind == DecisionKind::accept && taxonomy_->find_object(p.record.object) && p.top_state() != kOtherClass &&
        !taxonomy_->is_admissible(p.record.object, p.top_state()))
      throw DataError("proposed state '" + p.top_state() + "' is not admissible for '" + p.record.object +
                      "'; override instead");
    Decision d{session_id, proposal_id, kind, state, s.version + 1};
    commit({{"type", "decision"}, {"decision", to_json(d)}});
    return store_.session(session_id);
  }

  /// Accepted and overridden proposals as labeled records, in store order.
  DatasetManifest export_accepted() const {
    std::lock_guard lock(mutex_);
    DatasetManifest m;
    m.taxonomy_version = taxonomy_->version();
    for (const auto& p : store_.proposals) {
      if (p.status != ProposalStatus::accepted && p.status != ProposalStatus::overridden) continue;
      SampleRecord r = p.record;
      r.state = *p.final_state;
      r.review = ReviewInfo{std::string(to_string(p.status)), p.top_state(), p.model_ref};
      m.records.push_back(std::move(r));
    }
    return m;
  }

  json stats() const {
    std::lock_guard lock(mutex_);
    return json{{"proposals", store_.proposals.size()},
                {"pending", store_.count(ProposalStatus::pending)},
                {"accepted", store_.count(ProposalStatus::accepted)},
                {"overridden", store_.count(ProposalStatus::overridden)},
                {"discarded", store_.count(ProposalStatus::discarded)},
                {"sessions", store_.sessions.size()},
                {"log_entries", store_.sequence}};
  }

  ProposalStore snapshot_store() const {
    std::lock_guard lock(mutex_);
    return store_;
  }

  /// Writes a compacted snapshot of the current store.
  void compact() {
    std::lock_guard lock(mutex_);
    write_snapshot();
  }

 private:
  void commit(const json& entry) {
    ProposalStore next = store_;
    next.apply(entry);  // validates before anything is written
    log_->append(entry);
    store_ = std::move(next);
    if (options_.snapshot_every && store_.sequence % options_.snapshot_every == 0) write_snapshot();
  }

  void write_snapshot() { write_json_file(snapshot_path(dir_), store_.to_json()); }

  std::filesystem::path dir_;
  std::shared_ptr<const Taxonomy> taxonomy_;
  ServiceOptions options_;
  FileLock lock_;
  mutable std::mutex mutex_;
  ProposalStore store_;
  std::unique_ptr<DecisionLog> log_;
};

}  // namespace statechef
