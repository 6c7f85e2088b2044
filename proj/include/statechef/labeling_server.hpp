#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "statechef/errors.hpp"
#include "statechef/io.hpp"
#include "statechef/labeling.hpp"
#include "statechef/manifest.hpp"

// keep below Eigen (resolv.h defines _res)
#include <httplib.h>

namespace statechef {

/// Encoded image bytes and their media type.
struct EncodedImage {
  std::string bytes;
  std::string content_type;
};

struct ServerHooks {
  /// Builds the proposer for a POST /proposals request body.
  std::function<Proposer(const json& request)> proposer;
  ImageLoader loader;
  std::function<EncodedImage(const SampleRecord&)> encode_image;
  std::filesystem::path static_dir;  // served at / when set
};

struct ProposalJob {
  std::string id;
  std::string status = "queued";  // queued, running, done, failed
  std::size_t records = 0;
  std::size_t added = 0;
  std::vector<LineError> skipped;
  std::string error;
};

inline json to_json(const ProposalJob& j) {
  json skipped = json::array();
  for (const auto& s : j.skipped) skipped.push_back({{"position", s.line}, {"message", s.message}});
  json out = {{"id", j.id}, {"status", j.status}, {"records", j.records}, {"added", j.added}, {"skipped", skipped}};
  if (!j.error.empty()) out["error"] = j.error;
  return out;
}

/// HTTP front end of a LabelingService. Request handlers run concurrently;
/// proposal generation runs on background threads.
class LabelingServer {
 public:
  LabelingServer(std::shared_ptr<LabelingService> service, ServerHooks hooks)
      : service_(std::move(service)), hooks_(std::move(hooks)) {
    routes();
  }

  LabelingServer(const LabelingServer&) = delete;
  LabelingServer& operator=(const LabelingServer&) = delete;

  ~LabelingServer() {
    stop();
    wait_for_jobs();
  }

  /// Binds and returns the port (an ephemeral one when `port` is 0).
  int bind(const std::string& host, int port) {
    if (port == 0) {
      port_ = server_.bind_to_any_port(host);
    } else {
      if (!server_.bind_to_port(host, port)) port_ = -1;
      else port_ = port;
    }
    if (port_ < 0) throw Error("cannot bind " + host + ":" + std::to_string(port));
    return port_;
  }

  /// Serves on a background thread.
  void start() {
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }

  /// Serves on the calling thread until stop().
  void run() { server_.listen_after_bind(); }

  void stop() {
    if (server_.is_running()) server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  void wait_for_jobs() {
    std::vector<std::thread> workers;
    {
      std::lock_guard lock(jobs_mutex_);
      workers.swap(workers_);
    }
    for (auto& t : workers)
      if (t.joinable()) t.join();
  }

  int port() const { return port_; }

  ProposalJob job(const std::string& id) const {
    std::lock_guard lock(jobs_mutex_);
    auto it = jobs_.find(id);
    if (it == jobs_.end()) throw NotFoundError("unknown job '" + id + "'");
    return it->second;
  }

 private:
  using Handler = std::function<void(const httplib::Request&, httplib::Response&)>;

  static void send_json(httplib::Response& res, const json& body, int status = 200) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  /// Maps library exceptions to status codes.
  static Handler guarded(Handler h) {
    return [h = std::move(h)](const httplib::Request& req, httplib::Response& res) {
      try {
        h(req, res);
      } catch (const ConflictError& e) {
        send_json(res, {{"error", e.what()}, {"current_version", e.current_version()}}, 409);
      } catch (const NotFoundError& e) {
        send_json(res, {{"error", e.what()}}, 404);
      } catch (const DataError& e) {
        send_json(res, {{"error", e.what()}}, 400);
      } catch (const json::exception& e) {
        send_json(res, {{"error", std::string("bad request: ") + e.what()}}, 400);
      } catch (const std::exception& e) {
        send_json(res, {{"error", e.what()}}, 500);
      }
    };
  }

  static json parse_body(const httplib::Request& req) {
    try {
      json body = json::parse(req.body.empty() ? "{}" : req.body);
      if (!body.is_object()) throw DataError("request body must be a JSON object");
      return body;
    } catch (const json::parse_error& e) {
      throw DataError(std::string("malformed JSON body: ") + e.what());
    }
  }

  json progress() const { return service_->stats(); }

  void routes() {
    server_.Get("/health", guarded([](const httplib::Request&, httplib::Response& res) { send_json(res, {{"ok", true}}); }));

    server_.Get("/taxonomy", guarded([this](const httplib::Request&, httplib::Response& res) {
      const Taxonomy& t = service_->taxonomy();
      json objects = json::object();
      for (const auto& o : t.objects()) objects[o.name] = o.admissible;
      send_json(res, {{"version", t.version()}, {"classes", t.class_names()}, {"objects", objects}});
    }));

    server_.Post("/proposals", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const json body = parse_body(req);
      if (!body.contains("manifest") || !body.at("manifest").is_string())
        throw DataError("'manifest' (path of an unlabeled manifest) is required");
      const int k = body.value("k", 3);
      if (k < 1) throw DataError("k must be at least 1");
      if (!hooks_.proposer) throw DataError("this server has no model configured for proposals");
      const std::string id = submit(body, k);
      send_json(res, {{"job_id", id}}, 202);
    }));

    server_.Get(R"(/jobs/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
      send_json(res, to_json(job(req.matches[1])));
    }));

    server_.Get("/proposals", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const std::string status = req.has_param("status") ? req.get_param_value("status") : "";
      const auto filter = status.empty() ? std::optional<ProposalStatus>() : parse_proposal_status(status);
      json arr = json::array();
      for (const auto& p : service_->snapshot_store().proposals)
        if (!filter || p.status == *filter) arr.push_back(to_json(p));
      send_json(res, {{"proposals", arr}});
    }));

    server_.Get(R"(/proposals/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
      send_json(res, to_json(service_->proposal(req.matches[1])));
    }));

    server_.Post("/sessions", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const json body = parse_body(req);
      const auto s = service_->open_session(body.value("reviewer", std::string()));
      send_json(res, to_json(s), 201);
    }));

    server_.Get(R"(/sessions/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto s = service_->session(req.matches[1]);
      json body = to_json(s);
      body["progress"] = progress();
      send_json(res, body);
    }));

    server_.Get(R"(/sessions/([^/]+)/next)", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto s = service_->session(req.matches[1]);
      const auto p = service_->next_pending();
      send_json(res, {{"session", to_json(s)}, {"proposal", p ? to_json(*p) : json(nullptr)}, {"progress", progress()}});
    }));

    server_.Get(R"(/sessions/([^/]+)/audit)", guarded([this](const httplib::Request& req, httplib::Response& res) {
      json arr = json::array();
      for (const auto& d : service_->audit(req.matches[1])) arr.push_back(to_json(d));
      send_json(res, {{"decisions", arr}});
    }));

    server_.Post(R"(/sessions/([^/]+)/decisions)", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const json body = parse_body(req);
      if (!body.contains("proposal_id") || !body.contains("decision") || !body.contains("expected_version"))
        throw DataError("'proposal_id', 'decision' and 'expected_version' are required");
      std::optional<std::string> state;
      if (body.contains("state") && !body.at("state").is_null()) state = body.at("state").get<std::string>();
      const auto s = service_->decide(req.matches[1], body.at("proposal_id").get<std::string>(),
                                      parse_decision(body.at("decision").get<std::string>()), state,
                                      body.at("expected_version").get<std::uint64_t>());
      json out = to_json(s);
      out["proposal"] = to_json(service_->proposal(body.at("proposal_id").get<std::string>()));
      send_json(res, out);
    }));

    server_.Get("/export", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const std::string status = req.has_param("status") ? req.get_param_value("status") : "accepted";
      if (status != "accepted") throw DataError("only status=accepted can be exported");
      res.set_content(manifest_to_jsonl(service_->export_accepted()), "application/x-ndjson");
    }));

    server_.Get(R"(/images/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const std::string sample = req.matches[1];
      const auto store = service_->snapshot_store();
      auto it = store.by_sample.find(sample);
      if (it == store.by_sample.end()) throw NotFoundError("unknown sample '" + sample + "'");
      if (!hooks_.encode_image) throw DataError("this server cannot encode images");
      const auto img = hooks_.encode_image(store.proposals[it->second].record);
      res.set_content(img.bytes, img.content_type);
    }));

    if (!hooks_.static_dir.empty()) server_.set_mount_point("/", hooks_.static_dir.string());
  }

  std::string submit(const json& body, int k) {
    std::lock_guard lock(jobs_mutex_);
    const std::string id = "job" + std::to_string(++job_counter_);
    jobs_[id] = ProposalJob{id};
    workers_.emplace_back([this, id, body, k] { run_job(id, body, k); });
    return id;
  }

  void update(const std::string& id, const std::function<void(ProposalJob&)>& f) {
    std::lock_guard lock(jobs_mutex_);
    f(jobs_.at(id));
  }

  void run_job(const std::string& id, const json& body, int k) {
    try {
      update(id, [](ProposalJob& j) { j.status = "running"; });
      const DatasetManifest manifest = load_manifest(body.at("manifest").get<std::string>());
      const Proposer proposer = hooks_.proposer(body);
      ProposalBatch batch = propose_labels(proposer, manifest.records, k, hooks_.loader, 32, &service_->taxonomy());
      const auto ids = service_->add_proposals(std::move(batch.proposals));
      update(id, [&](ProposalJob& j) {
        j.records = manifest.records.size();
        j.added = ids.size();
        j.skipped = batch.skipped;
        j.status = "done";
      });
    } catch (const std::exception& e) {
      update(id, [&](ProposalJob& j) {
        j.status = "failed";
        j.error = e.what();
      });
    }
  }

  std::shared_ptr<LabelingService> service_;
  ServerHooks hooks_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = -1;

  mutable std::mutex jobs_mutex_;
  std::map<std::string, ProposalJob> jobs_;
  std::vector<std::thread> workers_;
  std::size_t job_counter_ = 0;
};

}  // namespace statechef
