#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "minimon/core.hpp"
#include "minimon/ingest.hpp"
#include "minimon/pubsub.hpp"

namespace minimon::config {

/// `12m`, `90s`, `1h`, `2d`; a bare integer is seconds.
std::optional<std::int64_t> parse_duration_ms(std::string_view text);

/// Service configuration, parsed from a line-oriented key-value file:
///
///   # comments and blank lines are ignored
///   data_dir = ./minimon-data
///   http_port = 8080
///   pubsub_port = 4222
///   alerting_config = alerts.json
///
///   [target]                      # one section per scrape target
///   url = http://127.0.0.1:9100/metrics
///   interval = 15s
///   tags = host=web1,site=T2_CH
///
///   [token]                       # one section per pub/sub auth token
///   token = s3cret
///   publish = cms.>
///   subscribe = cms.>,docs.*
struct ServiceConfig {
  std::string data_dir = "minimon-data";
  int http_port = 8080;
  int pubsub_port = 4222;
  std::string bind_host = "127.0.0.1";
  std::string alerting_config_path;
  std::int64_t maintenance_interval_ms = 10 * kMillisPerSecond;
  std::int64_t scrape_poll_ms = kMillisPerSecond;
  int doc_retention_days = 30;
  std::map<std::string, int> doc_retention_overrides;
  std::vector<ingest::ScrapeTarget> scrape_targets;
  std::map<std::string, pubsub::AuthToken> tokens;
  std::vector<std::string> bridge_patterns = {"cms.>"};
  std::string bridge_token;
};

struct ConfigParse {
  std::optional<ServiceConfig> config;
  std::vector<std::string> errors;
};

ConfigParse parse_service_config(std::string_view text);
ConfigParse load_service_config(const std::string& path);

}  // namespace minimon::config
