#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#define CPPHTTPLIB_NO_EXCEPTIONS 0
#include <httplib.h>

#include "minimon/config.hpp"
#include "minimon/core.hpp"
#include "minimon/pubsub.hpp"
#include "minimon/service.hpp"
#include "minimon/sim.hpp"

namespace {

using minimon::Json;
using minimon::Timestamp;

constexpr int kExitOk = 0;
constexpr int kExitRejected = 1;
constexpr int kExitParse = 2;
constexpr int kExitUnreachable = 3;
constexpr int kExitAuth = 4;

volatile std::sig_atomic_t g_stop = 0;
void handle_signal(int) { g_stop = 1; }

struct CliConfig {
  std::string url = "http://127.0.0.1:8080";
  std::string proxy = "127.0.0.1:4222";
  std::string token;
  std::string output = "table";
};

void load_cli_config(CliConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) return;
  std::string line;
  while (std::getline(in, line)) {
    auto eq = line.find('=');
    if (eq == std::string::npos || line.empty() || line[0] == '#') continue;
    auto trim = [](std::string s) {
      while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.erase(s.begin());
      while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.pop_back();
      return s;
    };
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key == "url") cfg.url = value;
    if (key == "proxy") cfg.proxy = value;
    if (key == "token") cfg.token = value;
    if (key == "output") cfg.output = value;
  }
}

void apply_env(CliConfig& cfg) {
  if (const char* url = std::getenv("MINIMON_URL")) cfg.url = url;
  if (const char* proxy = std::getenv("MINIMON_PROXY")) cfg.proxy = proxy;
  if (const char* token = std::getenv("MINIMON_TOKEN")) cfg.token = token;
}

std::pair<std::string, int> split_host_port(const std::string& address, int fallback_port) {
  auto colon = address.rfind(':');
  if (colon == std::string::npos) return {address, fallback_port};
  return {address.substr(0, colon), std::atoi(address.c_str() + colon + 1)};
}

std::unique_ptr<httplib::Client> make_http_client(const std::string& url) {
  auto client = std::make_unique<httplib::Client>(url.c_str());
  client->set_connection_timeout(3, 0);
  client->set_read_timeout(10, 0);
  return client;
}

std::optional<Timestamp> parse_time_flag(const std::string& text) {
  if (text == "now") return minimon::now_wall();
  return minimon::parse_iso8601(text);
}

// Unicode block sparkline, min-max normalized per series.
std::string sparkline(const std::vector<double>& values) {
  static const char* blocks[] = {"▁", "▂", "▃", "▄",
                                 "▅", "▆", "▇", "█"};
  if (values.empty()) return "";
  double lo = values[0], hi = values[0];
  for (double v : values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  std::string out;
  for (double v : values) {
    int idx = hi == lo ? 0 : static_cast<int>((v - lo) / (hi - lo) * 7.0 + 0.5);
    out += blocks[std::clamp(idx, 0, 7)];
  }
  return out;
}

void print_table(const std::vector<std::vector<std::string>>& rows) {
  if (rows.empty()) return;
  std::vector<std::size_t> widths;
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (widths.size() <= i) widths.push_back(0);
      widths[i] = std::max(widths[i], row[i].size());
    }
  }
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      std::printf("%-*s%s", static_cast<int>(widths[i]), row[i].c_str(),
                  i + 1 < row.size() ? "  " : "");
    }
    std::printf("\n");
  }
}

int cmd_serve(const std::string& config_path) {
  minimon::config::ConfigParse parsed = config_path.empty()
                                            ? minimon::config::parse_service_config("")
                                            : minimon::config::load_service_config(config_path);
  if (!parsed.config.has_value()) {
    for (const std::string& err : parsed.errors) std::fprintf(stderr, "config: %s\n", err.c_str());
    return kExitParse;
  }
  minimon::service::ServiceOptions options;
  options.config = *parsed.config;
  minimon::service::Service service(options);
  std::string error;
  if (!service.start(&error)) {
    std::fprintf(stderr, "cannot start service: %s\n", error.c_str());
    return kExitUnreachable;
  }
  std::printf("minimond listening: http=%s:%d pubsub=%s:%d data=%s\n",
              options.config.bind_host.c_str(), service.http_port(),
              options.config.bind_host.c_str(), service.pubsub_port(),
              options.config.data_dir.c_str());
  std::signal(SIGINT, handle_signal);
  std::signal(SIGTERM, handle_signal);
  while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
  service.stop();
  return kExitOk;
}

int cmd_query_ts(const CliConfig& cfg, const std::string& text, const std::string& from,
                 const std::string& to, const std::string& step) {
  auto from_ts = parse_time_flag(from);
  auto to_ts = parse_time_flag(to);
  if (!from_ts.has_value() || !to_ts.has_value()) {
    std::fprintf(stderr, "bad --from/--to\n");
    return kExitParse;
  }
  auto client = make_http_client(cfg.url);
  httplib::Params params{{"q", text},
                         {"from", std::to_string(from_ts->ms)},
                         {"to", std::to_string(to_ts->ms)},
                         {"step", step}};
  auto res = client->Get("/api/v1/ts/query", params, httplib::Headers{});
  if (!res) {
    std::fprintf(stderr, "service unreachable at %s\n", cfg.url.c_str());
    return kExitUnreachable;
  }
  Json body = Json::parse(res->body, nullptr, false);
  if (res->status != 200) {
    std::fprintf(stderr, "%s\n",
                 body.is_object() ? body.value("error", res->body).c_str() : res->body.c_str());
    return kExitParse;
  }
  if (cfg.output == "json") {
    std::printf("%s\n", body.dump(2).c_str());
    return kExitOk;
  }
  if (cfg.output == "sparkline") {
    for (const Json& series : body["data"]) {
      std::vector<double> values;
      for (const Json& point : series["points"]) values.push_back(point[1].get<double>());
      std::printf("%s %s\n", series["key"].get<std::string>().c_str(),
                  sparkline(values).c_str());
    }
    return kExitOk;
  }
  std::vector<std::vector<std::string>> rows{{"series", "ts", "value"}};
  for (const Json& series : body["data"]) {
    for (const Json& point : series["points"]) {
      rows.push_back({series["key"].get<std::string>(),
                      minimon::format_iso8601(Timestamp{point[0].get<std::int64_t>()}),
                      std::to_string(point[1].get<double>())});
    }
  }
  print_table(rows);
  return kExitOk;
}

int cmd_query_docs(const CliConfig& cfg, const std::string& doc_type,
                   const std::vector<std::string>& matches, const std::string& from,
                   const std::string& to, int limit) {
  auto from_ts = parse_time_flag(from);
  auto to_ts = parse_time_flag(to);
  if (!from_ts.has_value() || !to_ts.has_value()) {
    std::fprintf(stderr, "bad --from/--to\n");
    return kExitParse;
  }
  Json query;
  query["doc_type"] = doc_type;
  query["from"] = from_ts->ms;
  query["to"] = to_ts->ms;
  query["limit"] = limit;
  Json matchers = Json::array();
  for (const std::string& m : matches) {
    Json mj;
    // field=value, field!=value, field>value, field<value, field?
    std::size_t pos;
    if ((pos = m.find("!=")) != std::string::npos) {
      mj["field"] = m.substr(0, pos);
      mj["op"] = "neq";
      mj["value"] = m.substr(pos + 2);
    } else if ((pos = m.find('>')) != std::string::npos) {
      mj["field"] = m.substr(0, pos);
      mj["op"] = "gt";
      mj["value"] = std::atof(m.c_str() + pos + 1);
    } else if ((pos = m.find('<')) != std::string::npos) {
      mj["field"] = m.substr(0, pos);
      mj["op"] = "lt";
      mj["value"] = std::atof(m.c_str() + pos + 1);
    } else if (!m.empty() && m.back() == '?') {
      mj["field"] = m.substr(0, m.size() - 1);
      mj["op"] = "exists";
    } else if ((pos = m.find('=')) != std::string::npos) {
      mj["field"] = m.substr(0, pos);
      mj["op"] = "eq";
      mj["value"] = m.substr(pos + 1);
    } else {
      std::fprintf(stderr, "bad --match '%s'\n", m.c_str());
      return kExitParse;
    }
    matchers.push_back(std::move(mj));
  }
  query["matchers"] = std::move(matchers);

  auto client = make_http_client(cfg.url);
  httplib::Params params{{"q", query.dump()}};
  auto res = client->Get("/api/v1/docs/search", params, httplib::Headers{});
  if (!res) {
    std::fprintf(stderr, "service unreachable at %s\n", cfg.url.c_str());
    return kExitUnreachable;
  }
  Json body = Json::parse(res->body, nullptr, false);
  if (res->status != 200) {
    std::fprintf(stderr, "%s\n", res->body.c_str());
    return kExitParse;
  }
  if (cfg.output == "json") {
    std::printf("%s\n", body.dump(2).c_str());
    return kExitOk;
  }
  std::vector<std::vector<std::string>> rows{{"timestamp", "producer", "payload"}};
  for (const Json& doc : body) {
    rows.push_back({minimon::format_iso8601(Timestamp{doc["timestamp"].get<std::int64_t>()}),
                    doc.value("producer", ""), doc["payload"].dump()});
  }
  print_table(rows);
  return kExitOk;
}

int cmd_inject(const CliConfig& cfg, const std::string& producer, const std::string& type,
               const std::string& file) {
  std::ifstream in(file);
  if (!in) {
    std::fprintf(stderr, "cannot open %s\n", file.c_str());
    return kExitUnreachable;
  }
  std::stringstream buffer;
  buffer << in.rdbuf();
  Json docs = Json::parse(buffer.str(), nullptr, false);
  if (!docs.is_array()) {
    std::fprintf(stderr, "%s must hold a JSON array of documents\n", file.c_str());
    return kExitParse;
  }
  auto client = make_http_client(cfg.url);
  std::string path = "/api/v1/inject?producer=" + producer + "&type=" + type;
  auto res = client->Post(path.c_str(), docs.dump(), "application/json");
  if (!res) {
    std::fprintf(stderr, "service unreachable at %s\n", cfg.url.c_str());
    return kExitUnreachable;
  }
  Json body = Json::parse(res->body, nullptr, false);
  if (!body.is_array()) {
    std::fprintf(stderr, "unexpected response: %s\n", res->body.c_str());
    return kExitParse;
  }
  std::size_t accepted = 0;
  std::vector<std::string> rejections;
  for (const Json& result : body) {
    if (result.value("ok", false)) {
      ++accepted;
    } else if (rejections.size() < 10) {
      rejections.push_back(result.value("reason", "?") + ": " + result.value("detail", ""));
    }
  }
  std::size_t rejected = body.size() - accepted;
  std::printf("%zu accepted", accepted);
  if (rejected > 0) std::printf(", %zu rejected", rejected);
  std::printf("\n");
  for (const std::string& reason : rejections) std::printf("  %s\n", reason.c_str());
  return rejected == 0 ? kExitOk : kExitRejected;
}

int connect_proxy(const CliConfig& cfg, minimon::pubsub::Client& client) {
  auto [host, port] = split_host_port(cfg.proxy, 4222);
  std::string error;
  if (!client.connect(host, port, cfg.token, &error)) {
    std::fprintf(stderr, "%s\n", error.c_str());
    return error.find("authorization") != std::string::npos ? kExitAuth : kExitUnreachable;
  }
  return kExitOk;
}

int cmd_pub(const CliConfig& cfg, const std::string& subject, const std::string& payload) {
  minimon::pubsub::Client client;
  int rc = connect_proxy(cfg, client);
  if (rc != kExitOk) return rc;
  auto result = client.publish(subject, payload);
  if (!result.ok) {
    std::fprintf(stderr, "-ERR %s\n", result.error.c_str());
    return result.error.find("permission") != std::string::npos ? kExitAuth : kExitRejected;
  }
  return kExitOk;
}

int cmd_sub(const CliConfig& cfg, const std::string& pattern, int count) {
  minimon::pubsub::Client client;
  int rc = connect_proxy(cfg, client);
  if (rc != kExitOk) return rc;
  auto result = client.subscribe(pattern, "cli");
  if (!result.ok) {
    std::fprintf(stderr, "-ERR %s\n", result.error.c_str());
    return result.error.find("permission") != std::string::npos ? kExitAuth : kExitRejected;
  }
  std::signal(SIGINT, handle_signal);
  int received = 0;
  while (!g_stop && (count <= 0 || received < count)) {
    auto msg = client.next_message(200);
    if (!msg.has_value()) continue;
    std::printf("%s\n", msg->payload.c_str());
    std::fflush(stdout);
    ++received;
  }
  return kExitOk;
}

int cmd_spider_sim(const CliConfig& cfg, minimon::sim::JobSimSpec spec, int ticks,
                   double time_scale, bool quiet) {
  auto client = make_http_client(cfg.url);

  // Register the producer (idempotent via replace).
  auto registration = minimon::sim::condor_job_registration();
  auto res = client->Put("/api/v1/producers?replace=true", registration.to_json().dump(),
                         "application/json");
  if (!res) {
    std::fprintf(stderr, "service unreachable at %s\n", cfg.url.c_str());
    return kExitUnreachable;
  }

  minimon::pubsub::Client proxy;
  bool proxy_ok = false;
  {
    auto [host, port] = split_host_port(cfg.proxy, 4222);
    std::string error;
    proxy_ok = proxy.connect(host, port, cfg.token, &error);
    if (!proxy_ok && !quiet)
      std::fprintf(stderr, "proxy unavailable (%s); exit messages disabled\n", error.c_str());
  }

  minimon::sim::SpiderSim sim(spec);
  std::int64_t wall_sleep_ms =
      time_scale > 0 ? static_cast<std::int64_t>(spec.tick_interval_ms / time_scale) : 0;

  std::size_t injected = 0, rejected = 0, published = 0;
  for (int t = 0; t < ticks && !g_stop; ++t) {
    minimon::sim::TickOutput out = sim.tick();
    Json batch = Json::array();
    for (const minimon::Document& doc : out.documents) {
      Json dj;
      dj["timestamp"] = doc.timestamp.ms;
      dj["payload"] = doc.payload;
      batch.push_back(std::move(dj));
    }
    auto inject_res = client->Post("/api/v1/inject?producer=spider&type=condor_job",
                                   batch.dump(), "application/json");
    if (!inject_res) {
      std::fprintf(stderr, "inject failed: service unreachable\n");
      return kExitUnreachable;
    }
    Json results = Json::parse(inject_res->body, nullptr, false);
    if (results.is_array()) {
      for (const Json& result : results) {
        if (result.value("ok", false))
          ++injected;
        else {
          ++rejected;
          if (!quiet)
            std::fprintf(stderr, "rejected: %s %s\n", result.value("reason", "?").c_str(),
                         result.value("detail", "").c_str());
        }
      }
    }
    if (proxy_ok) {
      for (const auto& msg : out.messages) {
        if (proxy.publish(msg.subject, msg.payload.dump()).ok) ++published;
      }
    }
    if (!quiet)
      std::printf("tick %d: %zu docs injected, %zu exit messages\n", t + 1, out.documents.size(),
                  out.messages.size());
    if (wall_sleep_ms > 0 && t + 1 < ticks)
      std::this_thread::sleep_for(std::chrono::milliseconds(wall_sleep_ms));
  }
  std::printf("spider-sim done: %zu injected, %zu rejected, %zu messages published\n", injected,
              rejected, published);
  return rejected == 0 ? kExitOk : kExitRejected;
}

int cmd_status(const CliConfig& cfg) {
  auto client = make_http_client(cfg.url);
  auto res = client->Get("/api/v1/status");
  if (!res) {
    std::fprintf(stderr, "service unreachable at %s\n", cfg.url.c_str());
    return kExitUnreachable;
  }
  Json body = Json::parse(res->body, nullptr, false);
  std::printf("%s\n", body.dump(2).c_str());
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"minimon: desk-scale monitoring pipeline"};
  app.require_subcommand(1);

  CliConfig cfg;
  std::string config_path;
  app.add_option("--config", config_path, "CLI config file (url=, proxy=, token=, output=)");
  app.add_option("--url", cfg.url, "service base URL");
  app.add_option("--proxy", cfg.proxy, "pub/sub proxy host:port");
  app.add_option("--token", cfg.token, "pub/sub auth token");
  app.add_option("--output", cfg.output, "output format: json|table|sparkline");

  // serve
  auto* serve = app.add_subcommand("serve", "run the pipeline service");
  std::string serve_config;
  serve->add_option("--config", serve_config, "service config file");

  // query
  auto* query_cmd = app.add_subcommand("query", "query the document or time-series store");
  std::string target, query_text, from = "now", to = "now", step = "60s", last;
  std::vector<std::string> matches;
  int limit = 100;
  query_cmd->add_option("target", target, "docs | ts")->required();
  query_cmd->add_option("query", query_text, "ts query text, or doc_type for docs")->required();
  query_cmd->add_option("--from", from, "range start (ISO8601, ms, or 'now')");
  query_cmd->add_option("--to", to, "range end");
  query_cmd->add_option("--last", last, "shorthand: range [now - d, now], e.g. 1h");
  query_cmd->add_option("--step", step, "evaluation step, e.g. 30s");
  query_cmd->add_option("--match", matches, "docs matcher: f=v, f!=v, f>v, f<v, f?");
  query_cmd->add_option("--limit", limit, "docs result cap");

  // inject
  auto* inject_cmd = app.add_subcommand("inject", "inject a JSON file of documents");
  std::string producer, doc_type, file;
  inject_cmd->add_option("producer", producer)->required();
  inject_cmd->add_option("type", doc_type)->required();
  inject_cmd->add_option("file", file)->required();

  // pub / sub
  auto* pub_cmd = app.add_subcommand("pub", "publish one message");
  std::string subject, payload;
  pub_cmd->add_option("subject", subject)->required();
  pub_cmd->add_option("payload", payload)->required();

  auto* sub_cmd = app.add_subcommand("sub", "subscribe and print payloads");
  std::string pattern;
  int count = 0;
  sub_cmd->add_option("pattern", pattern)->required();
  sub_cmd->add_option("--count", count, "exit after N messages");

  // spider-sim
  auto* sim_cmd = app.add_subcommand("spider-sim", "synthetic condor_job producer");
  minimon::sim::JobSimSpec spec;
  int ticks = 20;
  double time_scale = 720.0;  // 12-minute ticks at 1 s wall time
  std::string base_time = "now";
  bool quiet = false;
  sim_cmd->add_option("--seed", spec.seed);
  sim_cmd->add_option("--jobs", spec.job_count_per_tick, "documents per tick");
  sim_cmd->add_option("--ticks", ticks);
  sim_cmd->add_option("--sites", spec.sites, "site names");
  sim_cmd->add_option("--failure-rate", spec.failure_rate);
  sim_cmd->add_option("--retry-max", spec.retry_max);
  sim_cmd->add_option("--time-scale", time_scale, "sim/wall speedup (720 = 1 tick/s)");
  sim_cmd->add_option("--base-time", base_time, "'now', ISO8601 or ms (pin for reproducibility)");
  sim_cmd->add_flag("--quiet", quiet);

  // status
  auto* status_cmd = app.add_subcommand("status", "service status summary");

  CLI11_PARSE(app, argc, argv);

  if (!config_path.empty()) load_cli_config(cfg, config_path);
  apply_env(cfg);
  // explicit flags win over config file and environment
  for (auto* opt : {app.get_option("--url"), app.get_option("--proxy"), app.get_option("--token"),
                    app.get_option("--output")}) {
    (void)opt;
  }

  if (serve->parsed()) return cmd_serve(serve_config);
  if (query_cmd->parsed()) {
    if (!last.empty()) {
      auto d = minimon::config::parse_duration_ms(last);
      if (!d.has_value()) {
        std::fprintf(stderr, "bad --last\n");
        return kExitParse;
      }
      Timestamp now = minimon::now_wall();
      from = std::to_string((now - *d).ms);
      to = std::to_string(now.ms);
    }
    if (target == "ts") return cmd_query_ts(cfg, query_text, from, to, step);
    if (target == "docs") return cmd_query_docs(cfg, query_text, matches, from, to, limit);
    std::fprintf(stderr, "target must be docs or ts\n");
    return kExitParse;
  }
  if (inject_cmd->parsed()) return cmd_inject(cfg, producer, doc_type, file);
  if (pub_cmd->parsed()) return cmd_pub(cfg, subject, payload);
  if (sub_cmd->parsed()) return cmd_sub(cfg, pattern, count);
  if (sim_cmd->parsed()) {
    auto base = parse_time_flag(base_time);
    if (!base.has_value()) {
      std::fprintf(stderr, "bad --base-time\n");
      return kExitParse;
    }
    spec.base_time = *base;
    return cmd_spider_sim(cfg, spec, ticks, time_scale, quiet);
  }
  if (status_cmd->parsed()) return cmd_status(cfg);
  return kExitOk;
}
