#include <doctest.h>

#define CPPHTTPLIB_NO_EXCEPTIONS 0
#include <httplib.h>

#include <memory>

#include "minimon/config.hpp"
#include "minimon/pubsub.hpp"
#include "minimon/service.hpp"
#include "minimon/sim.hpp"
#include "test_util.hpp"

using namespace minimon;
using minimon::testutil::TempDir;

namespace {

constexpr std::int64_t kBase = 1577836800000;

struct LiveService {
  TempDir dir;
  std::shared_ptr<std::int64_t> clock = std::make_shared<std::int64_t>(kBase);
  std::unique_ptr<service::Service> svc;
  std::unique_ptr<httplib::Client> http;

  LiveService() {
    config::ServiceConfig cfg;
    cfg.data_dir = (dir.path() / "data").string();
    cfg.http_port = 0;
    cfg.pubsub_port = 0;
    pubsub::AuthToken token;
    token.token = "testtoken";
    token.allowed_publish = {">"};
    token.allowed_subscribe = {">"};
    cfg.tokens[token.token] = token;
    cfg.bridge_token = "testtoken";
    cfg.bridge_patterns = {"cms.>"};

    service::ServiceOptions options;
    options.config = cfg;
    auto c = clock;
    options.clock = [c] { return Timestamp{*c}; };
    svc = std::make_unique<service::Service>(options);
    std::string error;
    REQUIRE_MESSAGE(svc->start(&error), error);
    http = std::make_unique<httplib::Client>(
        ("http://127.0.0.1:" + std::to_string(svc->http_port())).c_str());
    http->set_read_timeout(10, 0);
  }

  ~LiveService() { svc->stop(); }

  Json get(const std::string& path, int expect_status = 200) {
    auto res = http->Get(path.c_str());
    REQUIRE(res);
    CHECK(res->status == expect_status);
    return Json::parse(res->body, nullptr, false);
  }
};

}  // namespace

TEST_CASE("service config parsing") {
  std::string text = R"(# service config
data_dir = /tmp/mm
http_port = 9190
pubsub_port = 9191
doc_retention_days = 35
doc_retention_days.condor_job = 40

[target]
url = http://127.0.0.1:9100/metrics
interval = 15s
tags = host=web1,site=T2

[token]
token = s3cret
publish = cms.>
subscribe = cms.>,docs.*
)";
  auto parsed = config::parse_service_config(text);
  CAPTURE(parsed.errors);
  REQUIRE(parsed.config.has_value());
  CHECK(parsed.config->data_dir == "/tmp/mm");
  CHECK(parsed.config->http_port == 9190);
  CHECK(parsed.config->doc_retention_days == 35);
  CHECK(parsed.config->doc_retention_overrides.at("condor_job") == 40);
  REQUIRE(parsed.config->scrape_targets.size() == 1);
  CHECK(parsed.config->scrape_targets[0].interval_ms == 15000);
  CHECK(parsed.config->scrape_targets[0].static_tags.get_or_empty("host") == "web1");
  REQUIRE(parsed.config->tokens.count("s3cret"));
  CHECK(parsed.config->tokens.at("s3cret").allowed_subscribe.size() == 2);

  auto bad = config::parse_service_config("not a key value line\n");
  CHECK_FALSE(bad.config.has_value());
  CHECK(config::parse_duration_ms("12m") == 12 * kMillisPerMinute);
  CHECK(config::parse_duration_ms("90") == 90000);
  CHECK_FALSE(config::parse_duration_ms("m").has_value());
  CHECK_FALSE(config::parse_duration_ms("5x").has_value());
}

TEST_CASE("end-to-end: register, inject, fan out to all three sinks") {
  LiveService live;

  // Register via the HTTP surface.
  auto reg = sim::condor_job_registration();
  auto put = live.http->Put("/api/v1/producers", reg.to_json().dump(), "application/json");
  REQUIRE(put);
  CHECK(put->status == 200);

  // Duplicate registration without replace is a conflict.
  auto dup = live.http->Put("/api/v1/producers", reg.to_json().dump(), "application/json");
  CHECK(dup->status == 409);
  CHECK(live.http->Put("/api/v1/producers?replace=true", reg.to_json().dump(),
                       "application/json")->status == 200);

  auto listing = live.get("/api/v1/producers");
  REQUIRE(listing.is_array());
  CHECK(listing.size() == 1);

  // Inject three documents, one with a reserved field.
  Json batch = Json::array();
  for (int i = 0; i < 2; ++i) {
    Json doc;
    doc["timestamp"] = kBase + i * 1000;
    doc["payload"] = {{"job_id", "j" + std::to_string(i)}, {"site", "T1_US"},
                      {"status", "running"}, {"retry_index", 0}, {"cpu_hours", 1.5 + i}};
    batch.push_back(doc);
  }
  {
    Json doc;
    doc["timestamp"] = kBase;
    doc["payload"] = {{"job_id", "jx"}, {"site", "T1_US"}, {"status", "running"},
                      {"retry_index", 0}, {"uuid", "nope"}};
    batch.push_back(doc);
  }
  auto inject = live.http->Post("/api/v1/inject?producer=spider&type=condor_job", batch.dump(),
                                "application/json");
  REQUIRE(inject);
  Json results = Json::parse(inject->body);
  REQUIRE(results.size() == 3);
  CHECK(results[0]["ok"] == true);
  CHECK(results[1]["ok"] == true);
  CHECK(results[2]["ok"] == false);
  CHECK(results[2]["reason"] == "RESERVED_FIELD");

  REQUIRE(live.svc->drain());

  // Docstore sees both, via the search endpoint.
  Json query;
  query["doc_type"] = "condor_job";
  query["from"] = kBase - 1000;
  query["to"] = kBase + kMillisPerHour;
  query["matchers"] = Json::array({{{"field", "status"}, {"op", "eq"}, {"value", "running"}}});
  auto search = live.get("/api/v1/docs/search?q=" +
                         httplib::detail::encode_url(query.dump()));
  REQUIRE(search.is_array());
  CHECK(search.size() == 2);

  auto indexes = live.get("/api/v1/docs/indexes");
  REQUIRE(indexes.size() == 1);
  CHECK(indexes[0]["name"] == "condor_job-2020.01.01");
  CHECK(indexes[0]["docs"] == 2);

  // tsdb got the mapped points (2 docs x value fields cpu_hours+wallclock).
  auto card = live.get("/api/v1/ts/cardinality");
  CHECK(card["total_points"] == 2);  // wallclock_hours absent from payloads

  auto ts = live.get("/api/v1/ts/query?q=" +
                     httplib::detail::encode_url("condor_job_cpu_hours{site=\"T1_US\"}") +
                     "&from=" + std::to_string(kBase) + "&to=" + std::to_string(kBase + 2000) +
                     "&step=1s");
  REQUIRE(ts.contains("data"));
  CHECK(ts["data"].size() == 2);  // two series (distinct job_id tag)

  // Archive holds both records.
  auto partitions = live.get("/api/v1/archive/partitions");
  REQUIRE(partitions.size() == 1);
  CHECK(partitions[0]["records"] == 2);
  CHECK(partitions[0]["state"] == "OPEN");

  auto status = live.get("/api/v1/status");
  CHECK(status["documents"] == 2);
  CHECK(status["bus_topics"]["docs.condor_job"] == 2);
}

TEST_CASE("query endpoint surfaces position-annotated errors") {
  LiveService live;
  auto res = live.http->Get(("/api/v1/ts/query?q=" + httplib::detail::encode_url("cpu{host=}") +
                             "&from=0&to=1&step=1s")
                                .c_str());
  REQUIRE(res);
  CHECK(res->status == 400);
  Json body = Json::parse(res->body);
  CHECK(body["pos"] == 10);
  CHECK(body["error"].get<std::string>().find("syntax error at 10") != std::string::npos);
}

TEST_CASE("push gateway endpoint") {
  LiveService live;
  auto res = live.http->Post("/metrics/job/backup", "done 1\n", "text/plain");
  REQUIRE(res);
  CHECK(res->status == 200);
  Json body = Json::parse(res->body);
  CHECK(body["points"] == 1);

  res = live.http->Post("/metrics/job/backup", "}{bad\n", "text/plain");
  CHECK(res->status == 400);

  auto card = live.get("/api/v1/ts/cardinality");
  CHECK(card["total_points"] == 1);
}

TEST_CASE("silences API lifecycle") {
  LiveService live;
  Json silence;
  silence["matchers"] = Json::array({{{"tag", "site"}, {"op", "="}, {"value", "T1"}}});
  silence["starts_at"] = kBase;
  silence["ends_at"] = kBase + kMillisPerHour;
  silence["creator"] = "ops";
  auto post = live.http->Post("/api/v1/silences", silence.dump(), "application/json");
  REQUIRE(post);
  REQUIRE(post->status == 200);
  std::string id = Json::parse(post->body)["id"];

  auto list = live.get("/api/v1/silences");
  REQUIRE(list.size() == 1);
  CHECK(list[0]["id"] == id);

  auto del = live.http->Delete(("/api/v1/silences/" + id).c_str());
  CHECK(del->status == 200);
  CHECK(live.get("/api/v1/silences").empty());
  CHECK(live.http->Delete(("/api/v1/silences/" + id).c_str())->status == 404);

  // invalid silence
  silence["ends_at"] = kBase - 1;
  CHECK(live.http->Post("/api/v1/silences", silence.dump(), "application/json")->status == 400);
}

TEST_CASE("pub/sub proxy and bridge run against the live service") {
  LiveService live;

  pubsub::Client subscriber;
  REQUIRE(subscriber.connect("127.0.0.1", live.svc->pubsub_port(), "testtoken"));
  REQUIRE(subscriber.subscribe("cms.jobs.*", "s1").ok);

  pubsub::Client publisher;
  REQUIRE(publisher.connect("127.0.0.1", live.svc->pubsub_port(), "testtoken"));
  Json payload;
  payload["name"] = "exitCode";
  payload["tags"] = {{"site", "T2"}};
  payload["value"] = 0.0;
  payload["ts"] = kBase;
  REQUIRE(publisher.publish("cms.jobs.T2", payload.dump()).ok);

  auto msg = subscriber.next_message(3000);
  REQUIRE(msg.has_value());
  CHECK(msg->subject == "cms.jobs.T2");

  // The bridge consumed the same message into the tsdb.
  auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(5);
  pubsub::BridgeStats stats;
  while (std::chrono::steady_clock::now() < deadline) {
    stats = live.svc->bridge_stats();
    if (stats.written >= 1) break;
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }
  CHECK(stats.written == 1);
  auto card = live.get("/api/v1/ts/cardinality");
  CHECK(card["total_points"] == 1);

  subscriber.close();
  publisher.close();
}

TEST_CASE("maintenance pass compacts elapsed archive days and applies retention") {
  LiveService live;
  live.svc->registry().register_producer(sim::condor_job_registration());

  Json batch = Json::array();
  Json doc;
  doc["timestamp"] = kBase;
  doc["payload"] = {{"job_id", "j"}, {"site", "T1"}, {"status", "done"}, {"retry_index", 0}};
  batch.push_back(doc);
  batch.push_back(doc);  // exact duplicate, the archive keeps both until compaction
  auto res = live.http->Post("/api/v1/inject?producer=spider&type=condor_job", batch.dump(),
                             "application/json");
  REQUIRE(res);
  Json results = Json::parse(res->body);
  CHECK(results[0]["ok"] == true);
  CHECK(results[1]["ok"] == true);
  REQUIRE(live.svc->drain());

  CHECK(live.svc->documents().total_documents() == 1);  // docstore deduplicates
  auto partitions = live.get("/api/v1/archive/partitions");
  CHECK(partitions[0]["records"] == 2);  // archive does not, by design

  // Advance the virtual clock past day end + 1h and run maintenance.
  *live.clock = kBase + kMillisPerDay + 2 * kMillisPerHour;
  live.svc->run_maintenance(Timestamp{*live.clock});
  partitions = live.get("/api/v1/archive/partitions");
  CHECK(partitions[0]["state"] == "COMPACTED");
  CHECK(partitions[0]["records"] == 1);
}
