#include "minimon/service.hpp"

#include <chrono>
#include <fstream>
#include <sstream>

#define CPPHTTPLIB_NO_EXCEPTIONS 0
#include <httplib.h>

namespace minimon::service {

namespace fs = std::filesystem;

Json matrix_to_json(const query::Matrix& matrix) {
  Json out = Json::array();
  for (const query::SeriesResult& series : matrix) {
    Json sj;
    sj["key"] = series.key.canonical();
    sj["name"] = series.key.name;
    Json tags = Json::object();
    for (const auto& [tag, value] : series.key.tags) tags[tag] = value;
    sj["tags"] = std::move(tags);
    Json points = Json::array();
    for (const auto& [ts, value] : series.points) points.push_back({ts.ms, value});
    sj["points"] = std::move(points);
    out.push_back(std::move(sj));
  }
  return out;
}

Json doc_results_to_json(const std::vector<ingest::DocResult>& results) {
  Json out = Json::array();
  for (const ingest::DocResult& result : results) {
    Json rj;
    rj["ok"] = result.accepted;
    if (result.error.has_value()) {
      rj["reason"] = ingest::reason_name(result.error->reason);
      rj["detail"] = result.error->detail;
      rj["index"] = result.error->doc_index;
    }
    out.push_back(std::move(rj));
  }
  return out;
}

std::optional<Timestamp> parse_time_param(const std::string& value) { return parse_iso8601(value); }

Service::Service(ServiceOptions options) : options_(std::move(options)) {
  if (!options_.clock) options_.clock = now_wall;
  const config::ServiceConfig& cfg = options_.config;
  fs::path data(cfg.data_dir);
  fs::create_directories(data);

  bus::BusOptions bus_options;
  bus_options.clock = options_.clock;
  bus_ = std::make_unique<bus::Bus>(data / "bus", bus_options);

  registry_ = std::make_unique<ingest::Registry>(data / "producers.json");
  ingest::IngestorOptions ingest_options;
  ingest_options.clock = options_.clock;
  ingestor_ = std::make_unique<ingest::Ingestor>(*registry_, *bus_, ingest_options);

  docstore::DocStoreOptions doc_options;
  doc_options.dir = data / "docstore";
  doc_options.default_retention_days = cfg.doc_retention_days;
  doc_options.retention_days_by_type = cfg.doc_retention_overrides;
  docstore_ = std::make_unique<docstore::DocStore>(doc_options);

  tsdb::StoreOptions ts_options;
  ts_options.clock = options_.clock;
  ts_options.dir = data / "tsdb";
  tsdb_ = std::make_unique<tsdb::Store>(ts_options);

  archive::ArchiveOptions archive_options;
  archive_options.dir = data / "archive";
  archive_ = std::make_unique<archive::Archive>(archive_options);

  scraper_ = std::make_unique<ingest::Scraper>(*tsdb_, options_.clock);
  for (const ingest::ScrapeTarget& target : cfg.scrape_targets) scraper_->add_target(target);

  pushgw_ = std::make_unique<ingest::PushGateway>(*tsdb_);

  alerting::EngineConfig engine_config;
  if (options_.alerting.has_value()) {
    engine_config = *options_.alerting;
  } else if (!cfg.alerting_config_path.empty()) {
    std::ifstream in(cfg.alerting_config_path);
    if (in) {
      Json j = Json::parse(in, nullptr, false);
      auto parsed = alerting::parse_engine_config(j);
      if (parsed.config.has_value()) engine_config = std::move(*parsed.config);
    }
  }
  engine_ = std::make_unique<alerting::Engine>(*tsdb_, std::move(engine_config));

  pubsub::ServerOptions proxy_options;
  proxy_options.bind_host = cfg.bind_host;
  proxy_options.port = cfg.pubsub_port;
  proxy_options.tokens = cfg.tokens;
  proxy_ = std::make_unique<pubsub::Server>(proxy_options);

  http_ = std::make_unique<httplib::Server>();
  setup_http_routes();
}

Service::~Service() { stop(); }

bool Service::start(std::string* error) {
  if (!proxy_->start()) {
    if (error) *error = "cannot bind pub/sub listener";
    return false;
  }
  pubsub_port_ = proxy_->port();

  if (options_.config.http_port == 0) {
    http_port_ = http_->bind_to_any_port(options_.config.bind_host.c_str());
    if (http_port_ <= 0) {
      if (error) *error = "cannot bind HTTP listener";
      return false;
    }
  } else {
    if (!http_->bind_to_port(options_.config.bind_host.c_str(), options_.config.http_port)) {
      if (error)
        *error = "cannot bind HTTP port " + std::to_string(options_.config.http_port);
      return false;
    }
    http_port_ = options_.config.http_port;
  }
  http_thread_ = std::thread([this] { http_->listen_after_bind(); });
  http_->wait_until_ready();

  if (!options_.config.bridge_token.empty()) {
    pubsub::BridgeOptions bridge_options;
    bridge_options.host = options_.config.bind_host;
    bridge_options.port = pubsub_port_;
    bridge_options.token = options_.config.bridge_token;
    bridge_options.patterns = options_.config.bridge_patterns;
    bridge_ = std::make_unique<pubsub::Bridge>(*tsdb_, bridge_options);
    std::string bridge_error;
    if (!bridge_->start(&bridge_error)) {
      if (error) *error = "bridge: " + bridge_error;
      return false;
    }
  }

  threads_.emplace_back([this] { consumer_loop("docstore"); });
  threads_.emplace_back([this] { consumer_loop("tsdb"); });
  threads_.emplace_back([this] { consumer_loop("archive"); });
  threads_.emplace_back([this] { maintenance_loop(); });
  threads_.emplace_back([this] { scrape_loop(); });
  threads_.emplace_back([this] { alert_loop(); });
  return true;
}

void Service::stop() {
  if (stopping_.exchange(true)) return;
  if (http_) http_->stop();
  if (http_thread_.joinable()) http_thread_.join();
  if (bridge_) bridge_->stop();
  if (proxy_) proxy_->stop();
  for (std::thread& t : threads_) {
    if (t.joinable()) t.join();
  }
  threads_.clear();
  if (tsdb_) tsdb_->checkpoint();
  if (docstore_) docstore_->checkpoint();
}

pubsub::BridgeStats Service::bridge_stats() const {
  return bridge_ ? bridge_->stats() : pubsub::BridgeStats{};
}

void Service::process_record(const std::string& group, const bus::TopicRecord& record) {
  Json j = Json::parse(record.payload, nullptr, false);
  auto doc = Document::from_json(j);
  if (!doc.has_value()) return;  // unparseable records are skipped, not retried
  auto registration = registry_->lookup(doc->producer, doc->doc_type);
  if (!registration.has_value()) return;

  if (group == "docstore") {
    if (registration->route.to_docstore) docstore_->index_document(*doc);
  } else if (group == "archive") {
    if (registration->route.to_archive) archive_->append(doc->doc_type, {*doc});
  } else if (group == "tsdb") {
    if (!registration->route.to_tsdb) return;
    for (const std::string& field : registration->route.value_fields) {
      if (!doc->payload.contains(field) || !doc->payload[field].is_number()) continue;
      tsdb::MetricPoint point;
      point.key.name = doc->doc_type + "_" + field;
      for (const std::string& tag : registration->route.tag_fields) {
        if (doc->payload.contains(tag) && doc->payload[tag].is_string())
          point.key.tags.set(tag, doc->payload[tag].get<std::string>());
      }
      point.value = doc->payload[field].get<double>();
      point.ts = doc->timestamp;
      tsdb_->write(point);
    }
  }
}

void Service::consumer_loop(const std::string& group) {
  while (!stopping_) {
    bool worked = false;
    for (const std::string& topic : bus_->topics()) {
      if (topic.rfind("docs.", 0) != 0) continue;
      std::vector<bus::TopicRecord> batch = bus_->poll(group, topic, 256);
      if (batch.empty()) continue;
      worked = true;
      for (const bus::TopicRecord& record : batch) process_record(group, record);
      if (group == "tsdb") tsdb_->checkpoint();  // durable before the commit
      bus_->commit(group, topic, batch.back().offset);
    }
    if (!worked) std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }
}

void Service::run_maintenance(Timestamp now) {
  tsdb_->downsample_tick(now);
  tsdb_->apply_retention(now);
  docstore_->apply_retention(now);
  archive_->compact_eligible(now);
  bus_->apply_retention(now);
  tsdb_->checkpoint();
  docstore_->checkpoint();
}

void Service::maintenance_loop() {
  std::int64_t interval = options_.config.maintenance_interval_ms;
  auto last = std::chrono::steady_clock::now();
  while (!stopping_) {
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
    auto elapsed = std::chrono::duration_cast<std::chrono::milliseconds>(
                       std::chrono::steady_clock::now() - last)
                       .count();
    if (elapsed < interval) continue;
    last = std::chrono::steady_clock::now();
    run_maintenance(options_.clock());
  }
}

void Service::scrape_loop() {
  while (!stopping_) {
    std::this_thread::sleep_for(std::chrono::milliseconds(options_.config.scrape_poll_ms));
    if (stopping_) break;
    scraper_->scrape_due(options_.clock());
  }
}

void Service::alert_loop() {
  while (!stopping_) {
    std::this_thread::sleep_for(std::chrono::milliseconds(100));
    if (stopping_) break;
    Timestamp now = options_.clock();
    const alerting::EngineConfig& cfg = engine_->config();
    if (!cfg.outage_feed.empty() &&
        (last_outage_poll_.ms == 0 || now - last_outage_poll_ >= cfg.outage_poll_ms)) {
      last_outage_poll_ = now;
      std::string feed = cfg.outage_feed;
      if (feed.rfind("http://", 0) == 0) {
        std::string host_port = feed.substr(7);
        std::string path = "/";
        auto slash = host_port.find('/');
        if (slash != std::string::npos) {
          path = host_port.substr(slash);
          host_port = host_port.substr(0, slash);
        }
        httplib::Client client(("http://" + host_port).c_str());
        client.set_connection_timeout(2, 0);
        auto response = client.Get(path.c_str());
        if (response && response->status == 200) engine_->load_outage_feed(response->body);
      } else {
        std::ifstream in(feed);
        if (in) {
          std::stringstream buffer;
          buffer << in.rdbuf();
          engine_->load_outage_feed(buffer.str());
        }
      }
    }
    if (last_alert_tick_.ms == 0 || now - last_alert_tick_ >= cfg.eval_interval_ms) {
      last_alert_tick_ = now;
      engine_->tick(now);
    }
  }
}

bool Service::drain(std::int64_t timeout_ms) {
  auto deadline = std::chrono::steady_clock::now() + std::chrono::milliseconds(timeout_ms);
  const std::vector<std::string> groups = {"docstore", "tsdb", "archive"};
  while (std::chrono::steady_clock::now() < deadline) {
    bool done = true;
    for (const std::string& topic : bus_->topics()) {
      if (topic.rfind("docs.", 0) != 0) continue;
      std::int64_t end = static_cast<std::int64_t>(bus_->next_offset(topic)) - 1;
      for (const std::string& group : groups) {
        if (bus_->committed(group, topic) < end) {
          done = false;
          break;
        }
      }
      if (!done) break;
    }
    if (done) return true;
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }
  return false;
}

Json Service::status() const {
  Json j;
  j["time"] = options_.clock().ms;
  j["documents"] = docstore_->total_documents();
  tsdb::CardinalityStats stats = tsdb_->cardinality();
  Json ts;
  ts["active_series"] = stats.active_series;
  ts["total_points"] = stats.total_points;
  ts["inverted_index_entries"] = stats.inverted_index_entries;
  ts["daily_churn"] = stats.daily_churn;
  j["tsdb"] = std::move(ts);
  Json topics = Json::object();
  for (const std::string& topic : bus_->topics()) topics[topic] = bus_->next_offset(topic);
  j["bus_topics"] = std::move(topics);
  j["archive_partitions"] = archive_->partitions().size();
  j["alert_instances"] = engine_->instances().size();
  j["alert_eval_errors"] = engine_->rule_eval_errors();
  pubsub::BridgeStats bridge = bridge_stats();
  Json bj;
  bj["received"] = bridge.received;
  bj["written"] = bridge.written;
  bj["dropped"] = bridge.dropped;
  j["bridge"] = std::move(bj);
  return j;
}

void Service::setup_http_routes() {
  http_->Put("/api/v1/producers", [this](const httplib::Request& req, httplib::Response& res) {
    Json j = Json::parse(req.body, nullptr, false);
    auto reg = ingest::ProducerRegistration::from_json(j);
    if (!reg.has_value()) {
      res.status = 400;
      res.set_content(R"({"error":"malformed registration"})", "application/json");
      return;
    }
    bool replace = req.get_param_value("replace") == "true";
    auto err = registry_->register_producer(*reg, replace);
    if (err.has_value()) {
      res.status = 409;
      Json out;
      out["error"] = *err;
      res.set_content(out.dump(), "application/json");
      return;
    }
    res.set_content(R"({"ok":true})", "application/json");
  });

  http_->Get("/api/v1/producers", [this](const httplib::Request&, httplib::Response& res) {
    Json out = Json::array();
    for (const auto& reg : registry_->list()) out.push_back(reg.to_json());
    res.set_content(out.dump(), "application/json");
  });

  http_->Post("/api/v1/inject", [this](const httplib::Request& req, httplib::Response& res) {
    std::string producer = req.get_param_value("producer");
    std::string doc_type = req.get_param_value("type");
    Json batch = Json::parse(req.body, nullptr, false);
    if (batch.is_discarded()) {
      res.status = 400;
      res.set_content(R"({"error":"body is not valid JSON"})", "application/json");
      return;
    }
    auto results = ingestor_->inject(producer, doc_type, batch, options_.clock());
    res.set_content(doc_results_to_json(results).dump(), "application/json");
  });

  http_->Post(R"(/metrics/job/([A-Za-z_][A-Za-z0-9_]*))",
              [this](const httplib::Request& req, httplib::Response& res) {
                ingest::PushResult result =
                    pushgw_->push(req.matches[1], req.body, options_.clock());
                Json out;
                out["ok"] = result.ok;
                out["points"] = result.points;
                if (!result.ok) {
                  out["error"] = result.error;
                  res.status = 400;
                }
                res.set_content(out.dump(), "application/json");
              });

  http_->Get("/api/v1/targets", [this](const httplib::Request&, httplib::Response& res) {
    Json out = Json::array();
    for (const auto& target : scraper_->targets()) {
      Json tj;
      tj["url"] = target.url;
      tj["interval_ms"] = target.interval_ms;
      Json tags = Json::object();
      for (const auto& [tag, value] : target.static_tags) tags[tag] = value;
      tj["static_tags"] = std::move(tags);
      tj["last_status"] = ingest::target_status_name(target.last_status);
      if (target.last_error.has_value()) tj["last_error"] = *target.last_error;
      tj["points_written"] = target.points_written;
      out.push_back(std::move(tj));
    }
    res.set_content(out.dump(), "application/json");
  });

  http_->Get("/api/v1/docs/search", [this](const httplib::Request& req, httplib::Response& res) {
    std::string query_text =
        req.has_param("q") ? req.get_param_value("q") : req.body;
    Json qj = Json::parse(query_text, nullptr, false);
    if (!qj.is_object() || !qj.contains("doc_type")) {
      res.status = 400;
      res.set_content(R"({"error":"query must be JSON with doc_type"})", "application/json");
      return;
    }
    docstore::DocQuery query;
    query.doc_type = qj["doc_type"].get<std::string>();
    query.from = Timestamp{qj.value("from", 0ll)};
    query.to = Timestamp{qj.value("to", options_.clock().ms)};
    query.limit = qj.value("limit", 100ull);
    if (qj.contains("matchers")) {
      for (const Json& mj : qj["matchers"]) {
        FieldMatcher matcher;
        matcher.field = mj.value("field", "");
        auto op = match_op_from_name(mj.value("op", "eq"));
        if (!op.has_value() || matcher.field.empty()) {
          res.status = 400;
          res.set_content(R"({"error":"bad matcher"})", "application/json");
          return;
        }
        matcher.op = *op;
        if (mj.contains("value")) matcher.value = mj["value"];
        query.matchers.push_back(std::move(matcher));
      }
    }
    Json out = Json::array();
    for (const Document& doc : docstore_->search(query)) out.push_back(doc.to_json());
    res.set_content(out.dump(), "application/json");
  });

  http_->Get("/api/v1/docs/indexes", [this](const httplib::Request&, httplib::Response& res) {
    Json out = Json::array();
    for (const auto& info : docstore_->indexes()) {
      Json ij;
      ij["name"] = info.name;
      ij["docs"] = info.doc_count;
      ij["bytes"] = info.bytes;
      out.push_back(std::move(ij));
    }
    res.set_content(out.dump(), "application/json");
  });

  http_->Get("/api/v1/ts/query", [this](const httplib::Request& req, httplib::Response& res) {
    std::string text = req.get_param_value("q");
    auto parsed = query::parse_query(text);
    if (!parsed.ok()) {
      res.status = 400;
      Json out;
      out["error"] = parsed.error->to_string();
      out["pos"] = parsed.error->pos;
      res.set_content(out.dump(), "application/json");
      return;
    }
    auto from = parse_time_param(req.get_param_value("from"));
    auto to = parse_time_param(req.get_param_value("to"));
    std::int64_t step = 60000;
    if (req.has_param("step")) {
      auto parsed_step = config::parse_duration_ms(req.get_param_value("step"));
      if (parsed_step.has_value()) step = *parsed_step;
    }
    if (!from.has_value() || !to.has_value() || *from > *to || step <= 0) {
      res.status = 400;
      res.set_content(R"({"error":"need from <= to (ms or ISO8601) and step > 0"})",
                      "application/json");
      return;
    }
    Json out;
    out["query"] = parsed.ast->canonical();
    out["data"] = matrix_to_json(query::eval(*tsdb_, *parsed.ast, *from, *to, step));
    res.set_content(out.dump(), "application/json");
  });

  http_->Get("/api/v1/ts/cardinality", [this](const httplib::Request&, httplib::Response& res) {
    tsdb::CardinalityStats stats = tsdb_->cardinality();
    Json out;
    out["active_series"] = stats.active_series;
    out["total_points"] = stats.total_points;
    out["inverted_index_entries"] = stats.inverted_index_entries;
    out["daily_churn"] = stats.daily_churn;
    res.set_content(out.dump(), "application/json");
  });

  http_->Get("/api/v1/archive/partitions", [this](const httplib::Request&, httplib::Response& res) {
    Json out = Json::array();
    for (const auto& p : archive_->partitions()) {
      Json pj;
      pj["doc_type"] = p.doc_type;
      pj["day"] = p.day;
      pj["state"] = archive::partition_state_name(p.state);
      pj["raw_bytes"] = p.raw_bytes;
      pj["compacted_bytes"] = p.compacted_bytes;
      pj["records"] = p.record_count;
      pj["late_records"] = p.late_count;
      out.push_back(std::move(pj));
    }
    res.set_content(out.dump(), "application/json");
  });

  http_->Post("/api/v1/alerting/reload", [this](const httplib::Request&, httplib::Response& res) {
    if (options_.config.alerting_config_path.empty()) {
      res.status = 400;
      res.set_content(R"({"error":"no alerting_config path configured"})", "application/json");
      return;
    }
    std::ifstream in(options_.config.alerting_config_path);
    Json j = Json::parse(in, nullptr, false);
    auto parsed = alerting::parse_engine_config(j);
    if (!parsed.config.has_value()) {
      res.status = 400;
      Json out;
      out["errors"] = parsed.errors;
      res.set_content(out.dump(), "application/json");
      return;
    }
    engine_->reload(std::move(*parsed.config));
    res.set_content(R"({"ok":true})", "application/json");
  });

  http_->Get("/api/v1/silences", [this](const httplib::Request&, httplib::Response& res) {
    Json out = Json::array();
    for (const auto& silence : engine_->silences()) {
      Json sj;
      sj["id"] = silence.id;
      sj["starts_at"] = silence.starts_at.ms;
      sj["ends_at"] = silence.ends_at.ms;
      sj["creator"] = silence.creator;
      sj["comment"] = silence.comment;
      Json matchers = Json::array();
      for (const auto& m : silence.matchers) {
        Json mj;
        mj["tag"] = m.tag;
        mj["op"] = m.regex ? "=~" : "=";
        mj["value"] = m.value;
        matchers.push_back(std::move(mj));
      }
      sj["matchers"] = std::move(matchers);
      out.push_back(std::move(sj));
    }
    res.set_content(out.dump(), "application/json");
  });

  http_->Post("/api/v1/silences", [this](const httplib::Request& req, httplib::Response& res) {
    Json j = Json::parse(req.body, nullptr, false);
    if (!j.is_object() || !j.contains("matchers") || !j.contains("starts_at") ||
        !j.contains("ends_at")) {
      res.status = 400;
      res.set_content(R"({"error":"silence needs matchers, starts_at, ends_at"})",
                      "application/json");
      return;
    }
    alerting::Silence silence;
    for (const Json& mj : j["matchers"]) {
      alerting::LabelMatcher m;
      m.tag = mj.value("tag", "");
      m.regex = mj.value("op", "=") == "=~";
      m.value = mj.value("value", "");
      silence.matchers.push_back(std::move(m));
    }
    silence.starts_at = Timestamp{j["starts_at"].get<std::int64_t>()};
    silence.ends_at = Timestamp{j["ends_at"].get<std::int64_t>()};
    silence.creator = j.value("creator", "");
    silence.comment = j.value("comment", "");
    if (!(silence.starts_at < silence.ends_at)) {
      res.status = 400;
      res.set_content(R"({"error":"starts_at must be < ends_at"})", "application/json");
      return;
    }
    Json out;
    out["id"] = engine_->add_silence(std::move(silence));
    res.set_content(out.dump(), "application/json");
  });

  http_->Delete(R"(/api/v1/silences/(.+))",
                [this](const httplib::Request& req, httplib::Response& res) {
                  if (!engine_->remove_silence(req.matches[1])) {
                    res.status = 404;
                    res.set_content(R"({"error":"no such silence"})", "application/json");
                    return;
                  }
                  res.set_content(R"({"ok":true})", "application/json");
                });

  http_->Get("/api/v1/status", [this](const httplib::Request&, httplib::Response& res) {
    res.set_content(status().dump(), "application/json");
  });
}

}  // namespace minimon::service
