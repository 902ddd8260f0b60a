#pragma once

#include <atomic>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "minimon/alerting.hpp"
#include "minimon/archive.hpp"
#include "minimon/bus.hpp"
#include "minimon/config.hpp"
#include "minimon/core.hpp"
#include "minimon/docstore.hpp"
#include "minimon/ingest.hpp"
#include "minimon/pubsub.hpp"
#include "minimon/query.hpp"
#include "minimon/tsdb.hpp"

namespace httplib {
class Server;
}

namespace minimon::service {

struct ServiceOptions {
  config::ServiceConfig config;
  /// Injectable clock; every component reads time through this.
  std::function<Timestamp()> clock = now_wall;
  /// Pre-parsed alerting config; wins over config.alerting_config_path.
  std::optional<alerting::EngineConfig> alerting;
};

/// The pipeline service: HTTP API + ingest front door, the bus, the three
/// sinks consuming from it, scraping, the push gateway, the alert engine,
/// and the pub/sub proxy on its own listener.
class Service {
 public:
  explicit Service(ServiceOptions options);
  ~Service();

  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  bool start(std::string* error = nullptr);
  void stop();

  int http_port() const { return http_port_; }
  int pubsub_port() const { return pubsub_port_; }

  ingest::Registry& registry() { return *registry_; }
  ingest::Ingestor& ingestor() { return *ingestor_; }
  bus::Bus& message_bus() { return *bus_; }
  docstore::DocStore& documents() { return *docstore_; }
  tsdb::Store& timeseries() { return *tsdb_; }
  archive::Archive& archive() { return *archive_; }
  alerting::Engine* alert_engine() { return engine_.get(); }
  ingest::Scraper& scraper() { return *scraper_; }
  pubsub::BridgeStats bridge_stats() const;

  /// Runs one maintenance pass (downsample, retention, compaction, bus
  /// truncation, checkpoints) at the given instant.
  void run_maintenance(Timestamp now);

  /// Blocks until every sink group has committed through the current end
  /// of every docs.* topic (or the timeout elapses). Returns true when
  /// fully drained.
  bool drain(std::int64_t timeout_ms = 10000);

  Json status() const;

 private:
  void consumer_loop(const std::string& group);
  void process_record(const std::string& group, const bus::TopicRecord& record);
  void maintenance_loop();
  void scrape_loop();
  void alert_loop();
  void setup_http_routes();

  ServiceOptions options_;

  std::unique_ptr<bus::Bus> bus_;
  std::unique_ptr<ingest::Registry> registry_;
  std::unique_ptr<ingest::Ingestor> ingestor_;
  std::unique_ptr<docstore::DocStore> docstore_;
  std::unique_ptr<tsdb::Store> tsdb_;
  std::unique_ptr<archive::Archive> archive_;
  std::unique_ptr<ingest::Scraper> scraper_;
  std::unique_ptr<ingest::PushGateway> pushgw_;
  std::unique_ptr<alerting::Engine> engine_;
  std::unique_ptr<pubsub::Server> proxy_;
  std::unique_ptr<pubsub::Bridge> bridge_;
  std::unique_ptr<httplib::Server> http_;

  std::vector<std::thread> threads_;
  std::thread http_thread_;
  std::atomic<bool> stopping_{false};
  int http_port_ = 0;
  int pubsub_port_ = 0;
  Timestamp last_alert_tick_;
  Timestamp last_outage_poll_;
};

/// Shared helpers for HTTP handlers and the CLI.
Json matrix_to_json(const query::Matrix& matrix);
Json doc_results_to_json(const std::vector<ingest::DocResult>& results);
std::optional<Timestamp> parse_time_param(const std::string& value);

}  // namespace minimon::service
