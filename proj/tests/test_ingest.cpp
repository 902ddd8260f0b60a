#include <doctest.h>

#include <random>

#include "minimon/bus.hpp"
#include "minimon/exposition.hpp"
#include "minimon/ingest.hpp"
#include "minimon/tsdb.hpp"
#include "test_util.hpp"

using namespace minimon;
using minimon::testutil::TempDir;

namespace {

constexpr std::int64_t kNow = 1584000000000;  // 2020-03-12T08:00:00Z

ingest::SchemaDef job_schema() {
  ingest::SchemaDef schema;
  schema.producer = "spider";
  schema.doc_type = "condor_job";
  schema.fields = {
      {"status", ingest::FieldType::String, true},
      {"site", ingest::FieldType::String, false},
      {"cpu_hours", ingest::FieldType::Float, false},
      {"retries", ingest::FieldType::Int, false},
      {"done", ingest::FieldType::Bool, false},
  };
  return schema;
}

ingest::ProducerRegistration job_registration(std::int64_t quota = 1 << 20) {
  ingest::ProducerRegistration reg;
  reg.producer = "spider";
  reg.doc_type = "condor_job";
  reg.schema = job_schema();
  reg.daily_quota_bytes = quota;
  reg.route.tag_fields = {"site", "status"};
  reg.route.value_fields = {"cpu_hours"};
  return reg;
}

Document job_doc(std::int64_t ts = kNow) {
  Document doc;
  doc.producer = "spider";
  doc.doc_type = "condor_job";
  doc.timestamp = Timestamp{ts};
  doc.payload["status"] = "running";
  doc.payload["site"] = "T1";
  return doc;
}

struct Fixture {
  TempDir dir;
  bus::Bus bus;
  ingest::Registry registry;
  ingest::Ingestor ingestor;

  Fixture()
      : bus(dir.path() / "bus",
            [] {
              bus::BusOptions o;
              o.fsync_interval_ms = 0;
              return o;
            }()),
        registry(),
        ingestor(registry, bus, [] {
          ingest::IngestorOptions o;
          o.clock = [] { return Timestamp{kNow}; };
          return o;
        }()) {}
};

}  // namespace

TEST_CASE("registration round trip and duplicate handling") {
  ingest::Registry registry;
  CHECK_FALSE(registry.register_producer(job_registration()).has_value());
  CHECK(registry.lookup("spider", "condor_job").has_value());
  CHECK(registry.list().size() == 1);

  auto dup = registry.register_producer(job_registration());
  REQUIRE(dup.has_value());
  CHECK(dup->find("already registered") != std::string::npos);

  CHECK_FALSE(registry.register_producer(job_registration(), /*replace=*/true).has_value());
}

TEST_CASE("schema with a reserved field is rejected") {
  auto reg = job_registration();
  reg.schema.fields.push_back({"uuid", ingest::FieldType::String, false});
  ingest::Registry registry;
  auto err = registry.register_producer(reg);
  REQUIRE(err.has_value());
  CHECK(err->find("reserved") != std::string::npos);
}

TEST_CASE("registration validates tsdb mapping types") {
  auto reg = job_registration();
  reg.route.tag_fields = {"cpu_hours"};  // numeric cannot be a tag
  CHECK(ingest::Registry().register_producer(reg).has_value());

  reg = job_registration();
  reg.route.value_fields = {"status"};  // string cannot be a value
  CHECK(ingest::Registry().register_producer(reg).has_value());

  reg = job_registration();
  reg.route.value_fields = {"nope"};
  CHECK(ingest::Registry().register_producer(reg).has_value());

  reg = job_registration();
  reg.daily_quota_bytes = 0;
  CHECK(ingest::Registry().register_producer(reg).has_value());
}

TEST_CASE("registry persists across restart") {
  TempDir dir;
  auto file = dir.path() / "producers.json";
  {
    ingest::Registry registry(file);
    registry.register_producer(job_registration());
  }
  ingest::Registry reloaded(file);
  CHECK(reloaded.lookup("spider", "condor_job").has_value());
}

TEST_CASE("validate_document check order and semantics") {
  auto schema = job_schema();
  Timestamp now{kNow};

  SUBCASE("ok document") {
    CHECK_FALSE(ingest::validate_document(job_doc(), schema, now).has_value());
  }
  SUBCASE("reserved field wins over everything") {
    Document doc = job_doc();
    doc.payload["timestamp"] = 1;
    doc.payload.erase("status");  // would also be MISSING_REQUIRED
    auto err = ingest::validate_document(doc, schema, now);
    REQUIRE(err.has_value());
    CHECK(err->reason == ingest::Reason::RESERVED_FIELD);
  }
  SUBCASE("missing required before type mismatch") {
    Document doc = job_doc();
    doc.payload.erase("status");
    doc.payload["retries"] = "many";  // also a type mismatch
    auto err = ingest::validate_document(doc, schema, now);
    REQUIRE(err.has_value());
    CHECK(err->reason == ingest::Reason::MISSING_REQUIRED);
  }
  SUBCASE("declared string with int value mismatches") {
    Document doc = job_doc();
    doc.payload["status"] = 42;
    auto err = ingest::validate_document(doc, schema, now);
    REQUIRE(err.has_value());
    CHECK(err->reason == ingest::Reason::TYPE_MISMATCH);
  }
  SUBCASE("int widens to float, never the reverse") {
    Document doc = job_doc();
    doc.payload["cpu_hours"] = 3;  // int where float declared: fine
    CHECK_FALSE(ingest::validate_document(doc, schema, now).has_value());
    doc.payload["cpu_hours"] = 3.5;
    CHECK_FALSE(ingest::validate_document(doc, schema, now).has_value());
    doc.payload["retries"] = 2.5;  // float where int declared: rejected
    auto err = ingest::validate_document(doc, schema, now);
    REQUIRE(err.has_value());
    CHECK(err->reason == ingest::Reason::TYPE_MISMATCH);
  }
  SUBCASE("bool is not an int") {
    Document doc = job_doc();
    doc.payload["retries"] = true;
    auto err = ingest::validate_document(doc, schema, now);
    REQUIRE(err.has_value());
    CHECK(err->reason == ingest::Reason::TYPE_MISMATCH);
  }
  SUBCASE("timestamp skew beyond 7 days") {
    Document doc = job_doc(kNow - 8 * kMillisPerDay);
    auto err = ingest::validate_document(doc, schema, now);
    REQUIRE(err.has_value());
    CHECK(err->reason == ingest::Reason::TIMESTAMP_SKEW);
    CHECK_FALSE(
        ingest::validate_document(job_doc(kNow - 6 * kMillisPerDay), schema, now).has_value());
  }
  SUBCASE("undeclared fields pass through") {
    Document doc = job_doc();
    doc.payload["extra"] = "anything";
    CHECK_FALSE(ingest::validate_document(doc, schema, now).has_value());
  }
  SUBCASE("validation is deterministic") {
    Document doc = job_doc();
    doc.payload["status"] = 42;
    for (int i = 0; i < 5; ++i) {
      auto err = ingest::validate_document(doc, schema, now);
      REQUIRE(err.has_value());
      CHECK(err->reason == ingest::Reason::TYPE_MISMATCH);
    }
  }
}

TEST_CASE("inject publishes valid documents to docs.<type>") {
  Fixture fx;
  fx.registry.register_producer(job_registration());
  std::vector<Document> batch = {job_doc(), job_doc(kNow + 1), job_doc(kNow + 2)};
  auto results = fx.ingestor.inject_documents("spider", "condor_job", batch, Timestamp{kNow});
  REQUIRE(results.size() == 3);
  for (const auto& result : results) CHECK(result.accepted);
  CHECK(fx.bus.next_offset("docs.condor_job") == 3);
}

TEST_CASE("unknown producer yields per-document UNKNOWN_PRODUCER") {
  Fixture fx;
  auto results =
      fx.ingestor.inject_documents("ghost", "condor_job", {job_doc()}, Timestamp{kNow});
  REQUIRE(results.size() == 1);
  CHECK_FALSE(results[0].accepted);
  CHECK(results[0].error->reason == ingest::Reason::UNKNOWN_PRODUCER);
  CHECK(fx.bus.next_offset("docs.condor_job") == 0);
}

TEST_CASE("partial batch acceptance reports per index") {
  Fixture fx;
  fx.registry.register_producer(job_registration());
  Document bad = job_doc(kNow + 1);
  bad.payload["status"] = 42;
  auto results = fx.ingestor.inject_documents("spider", "condor_job",
                                              {job_doc(), bad, job_doc(kNow + 2)}, Timestamp{kNow});
  REQUIRE(results.size() == 3);
  CHECK(results[0].accepted);
  CHECK_FALSE(results[1].accepted);
  CHECK(results[1].error->doc_index == 1);
  CHECK(results[2].accepted);
  CHECK(fx.bus.next_offset("docs.condor_job") == 2);
}

TEST_CASE("quota: offending document and the rest of the batch are rejected") {
  Fixture fx;
  auto reg = job_registration();
  Document probe = job_doc();
  std::int64_t doc_size = static_cast<std::int64_t>(probe.canonical_encoding().size());
  reg.daily_quota_bytes = doc_size + doc_size / 2;  // fits one, not two
  fx.registry.register_producer(reg);

  auto results = fx.ingestor.inject_documents(
      "spider", "condor_job", {job_doc(), job_doc(kNow + 1), job_doc(kNow + 2)}, Timestamp{kNow});
  REQUIRE(results.size() == 3);
  CHECK(results[0].accepted);
  CHECK(results[1].error->reason == ingest::Reason::QUOTA_EXCEEDED);
  CHECK(results[2].error->reason == ingest::Reason::QUOTA_EXCEEDED);
  CHECK(fx.bus.next_offset("docs.condor_job") == 1);

  // Byte accounting against the independent size-sum oracle.
  CHECK(fx.ingestor.charged_today("spider", "condor_job", Timestamp{kNow}) == doc_size);
}

TEST_CASE("quota byte accounting matches a size-sum oracle") {
  Fixture fx;
  auto reg = job_registration(1 << 28);
  fx.registry.register_producer(reg);

  std::mt19937_64 rng(3);
  std::int64_t oracle = 0;
  std::vector<Document> batch;
  for (int i = 0; i < 40; ++i) {
    Document doc = job_doc(kNow + i);
    doc.payload["site"] = "T" + std::to_string(rng() % 30);
    doc.payload["cpu_hours"] = static_cast<double>(rng() % 1000) / 8.0;
    oracle += static_cast<std::int64_t>(doc.canonical_encoding().size());
    batch.push_back(std::move(doc));
  }
  auto results = fx.ingestor.inject_documents("spider", "condor_job", batch, Timestamp{kNow});
  for (const auto& result : results) CHECK(result.accepted);
  CHECK(fx.ingestor.charged_today("spider", "condor_job", Timestamp{kNow}) == oracle);
}

TEST_CASE("quota resets at UTC midnight") {
  Fixture fx;
  Document probe = job_doc();
  std::int64_t doc_size = static_cast<std::int64_t>(probe.canonical_encoding().size());
  auto reg = job_registration(doc_size);  // exactly one per day
  fx.registry.register_producer(reg);

  auto day1 = fx.ingestor.inject_documents("spider", "condor_job", {job_doc()}, Timestamp{kNow});
  CHECK(day1[0].accepted);
  auto day1_again =
      fx.ingestor.inject_documents("spider", "condor_job", {job_doc(kNow + 1)}, Timestamp{kNow});
  CHECK(day1_again[0].error->reason == ingest::Reason::QUOTA_EXCEEDED);

  Timestamp next_day{day_start(Timestamp{kNow}).ms + kMillisPerDay};
  auto day2 = fx.ingestor.inject_documents("spider", "condor_job", {job_doc(next_day.ms)},
                                           next_day);
  CHECK(day2[0].accepted);
}

TEST_CASE("wire-format inject handles malformed entries") {
  Fixture fx;
  fx.registry.register_producer(job_registration());
  Json batch = Json::array();
  batch.push_back({{"timestamp", kNow}, {"payload", {{"status", "ok"}}}});
  batch.push_back(42);  // not an object
  Json nested;
  nested["timestamp"] = kNow;
  nested["payload"] = {{"status", "ok"}, {"deep", {{"deeper", {{"x", 1}}}}}};
  batch.push_back(nested);  // two levels of nesting
  auto results = fx.ingestor.inject("spider", "condor_job", batch, Timestamp{kNow});
  REQUIRE(results.size() == 3);
  CHECK(results[0].accepted);
  CHECK(results[1].error->reason == ingest::Reason::MALFORMED);
  CHECK(results[2].error->reason == ingest::Reason::MALFORMED);
  CHECK(fx.bus.next_offset("docs.condor_job") == 1);
}

// ---------------------------------------------------------------------------
// Exposition format

TEST_CASE("exposition: bare sample") {
  auto result = exposition::parse("up 1\n");
  REQUIRE(result.ok());
  REQUIRE(result.samples.size() == 1);
  CHECK(result.samples[0].key.name == "up");
  CHECK(result.samples[0].value == 1.0);
  CHECK_FALSE(result.samples[0].ts.has_value());
}

TEST_CASE("exposition: tags and explicit timestamp") {
  auto result = exposition::parse("http_reqs{code=\"200\"} 17 1577836800000\n");
  REQUIRE(result.ok());
  REQUIRE(result.samples.size() == 1);
  CHECK(result.samples[0].key.tags.get_or_empty("code") == "200");
  CHECK(result.samples[0].value == 17.0);
  CHECK(result.samples[0].ts->ms == 1577836800000);
}

TEST_CASE("exposition: malformed input fails whole body") {
  auto result = exposition::parse("good 1\nbad{{\n");
  CHECK_FALSE(result.ok());
  CHECK(result.samples.empty());
  CHECK(result.error->line == 2);
}

TEST_CASE("exposition: comments and blank lines are skipped") {
  auto result = exposition::parse("# HELP up is up\n\nup 1\n# TYPE up gauge\n");
  REQUIRE(result.ok());
  CHECK(result.samples.size() == 1);
}

TEST_CASE("exposition: grammar corner cases") {
  CHECK_FALSE(exposition::parse("name  1\n").ok());       // double space
  CHECK_FALSE(exposition::parse("name 1 2 3\n").ok());    // trailing junk
  CHECK_FALSE(exposition::parse("name{a=\"1\"\n").ok());  // unterminated tags
  CHECK_FALSE(exposition::parse("name{a=\"1\",a=\"2\"} 1\n").ok());  // duplicate tag
  CHECK_FALSE(exposition::parse("name 1 -5\n").ok());     // negative timestamp
  CHECK(exposition::parse("name{} 1\n").ok());            // empty tag block is fine
  CHECK(exposition::parse("n{a=\"x\\\"y\\\\z\"} 2\n").ok());
}

TEST_CASE("exposition round trip property") {
  std::mt19937_64 rng(17);
  std::vector<exposition::Sample> samples;
  for (int i = 0; i < 200; ++i) {
    exposition::Sample sample;
    sample.key.name = "m" + std::to_string(rng() % 50);
    int tags = static_cast<int>(rng() % 4);
    for (int t = 0; t < tags; ++t) {
      std::string value;
      for (int c = 0; c < 6; ++c) {
        const char alphabet[] = "ab\"\\xy_09 ";
        value.push_back(alphabet[rng() % (sizeof(alphabet) - 1)]);
      }
      sample.key.tags.set("t" + std::to_string(t), value);
    }
    std::uniform_real_distribution<double> dist(-1e6, 1e6);
    sample.value = dist(rng);
    if (rng() % 2) sample.ts = Timestamp{static_cast<std::int64_t>(rng() % 2000000000000ll)};
    samples.push_back(std::move(sample));
  }
  auto reparsed = exposition::parse(exposition::render(samples));
  REQUIRE(reparsed.ok());
  REQUIRE(reparsed.samples.size() == samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) CHECK(reparsed.samples[i] == samples[i]);
}

// ---------------------------------------------------------------------------
// Scrape + push gateway against an in-memory tsdb

namespace {

tsdb::StoreOptions mem_store_options() {
  tsdb::StoreOptions options;
  options.clock = [] { return Timestamp{kNow}; };
  return options;
}

}  // namespace

TEST_CASE("scraper ingests a body, static tags win") {
  tsdb::Store store(mem_store_options());
  ingest::Scraper scraper(store, [] { return Timestamp{kNow}; });
  ingest::ScrapeTarget target;
  target.url = "http://unused.example/metrics";
  target.static_tags.set("site", "T2");
  std::size_t index = scraper.add_target(target);

  std::string error;
  std::size_t written =
      scraper.ingest_body(index, "up{site=\"wrong\"} 1\ncpu 2.5\n", Timestamp{kNow}, &error);
  CHECK(written == 2);
  CHECK(scraper.targets()[index].last_status == ingest::TargetStatus::OK);

  auto ids = store.series_with_tag("site", "T2");
  CHECK(ids.size() == 2);  // the static tag overrode the body tag
  CHECK(store.series_with_tag("site", "wrong").empty());
}

TEST_CASE("scraper marks parse failures and writes nothing") {
  tsdb::Store store(mem_store_options());
  ingest::Scraper scraper(store, [] { return Timestamp{kNow}; });
  ingest::ScrapeTarget target;
  target.url = "http://unused.example/metrics";
  std::size_t index = scraper.add_target(target);

  std::string error;
  std::size_t written = scraper.ingest_body(index, "bad{{\n", Timestamp{kNow}, &error);
  CHECK(written == 0);
  CHECK(scraper.targets()[index].last_status == ingest::TargetStatus::FAIL);
  CHECK(scraper.targets()[index].last_error.has_value());
  CHECK(store.cardinality().total_points == 0);
}

TEST_CASE("scrape of an unreachable target fails without losing data") {
  tsdb::Store store(mem_store_options());
  ingest::Scraper scraper(store, [] { return Timestamp{kNow}; });
  ingest::ScrapeTarget target;
  target.url = "http://127.0.0.1:1/metrics";  // nothing listens there
  std::size_t index = scraper.add_target(target);
  scraper.ingest_body(index, "up 1\n", Timestamp{kNow}, nullptr);
  CHECK(store.cardinality().total_points == 1);

  scraper.scrape_once(index, Timestamp{kNow});
  CHECK(scraper.targets()[index].last_status == ingest::TargetStatus::FAIL);
  CHECK(store.cardinality().total_points == 1);  // previous data unaffected
}

TEST_CASE("push gateway forces the job tag and replaces groups") {
  tsdb::Store store(mem_store_options());
  ingest::PushGateway gateway(store);

  auto first = gateway.push("backup", "done 1\n", Timestamp{kNow});
  CHECK(first.ok);
  CHECK(first.points == 1);
  auto group = gateway.group("backup");
  REQUIRE(group.has_value());
  REQUIRE(group->size() == 1);
  CHECK((*group)[0].key.tags.get_or_empty("job") == "backup");

  auto second = gateway.push("backup", "done 0 " + std::to_string(kNow + 1000) + "\n",
                             Timestamp{kNow + 1000});
  CHECK(second.ok);
  group = gateway.group("backup");
  REQUIRE(group->size() == 1);
  CHECK((*group)[0].value == 0.0);

  // Latest value for the series is the replacement.
  auto ids = store.series_with_tag("job", "backup");
  REQUIRE(ids.size() == 1);
  auto raw = store.raw_in(ids[0], Timestamp{0}, Timestamp{kNow + kMillisPerHour});
  REQUIRE(raw.size() == 2);
  CHECK(raw.back().second == 0.0);
}

TEST_CASE("push gateway rejects bad job names and keeps previous group on parse error") {
  tsdb::Store store(mem_store_options());
  ingest::PushGateway gateway(store);
  CHECK_FALSE(gateway.push("a b", "x 1\n", Timestamp{kNow}).ok);

  CHECK(gateway.push("backup", "done 1\n", Timestamp{kNow}).ok);
  auto bad = gateway.push("backup", "}{borked\n", Timestamp{kNow + 1});
  CHECK_FALSE(bad.ok);
  auto group = gateway.group("backup");
  REQUIRE(group.has_value());
  CHECK((*group)[0].value == 1.0);  // previous group retained
}
