#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "minimon/core.hpp"

using namespace minimon;

TEST_CASE("canonical_series_key renders sorted tags") {
  TagSet tags{{"host", "a"}, {"site", "T1"}};
  CHECK(canonical_series_key("cpu", tags) == R"(cpu{host="a",site="T1"})");
}

TEST_CASE("canonical_series_key is insertion-order independent") {
  TagSet forward;
  forward.set("host", "a");
  forward.set("site", "T1");
  TagSet reverse;
  reverse.set("site", "T1");
  reverse.set("host", "a");
  CHECK(canonical_series_key("cpu", forward) == canonical_series_key("cpu", reverse));
}

TEST_CASE("canonical_series_key with empty tags is the bare name") {
  CHECK(canonical_series_key("up", {}) == "up");
}

TEST_CASE("canonical_series_key escapes quotes and backslashes") {
  TagSet tags{{"path", R"(C:\tmp)"}, {"msg", R"(say "hi")"}};
  CHECK(canonical_series_key("m", tags) == R"(m{msg="say \"hi\"",path="C:\\tmp"})");
}

TEST_CASE("canonical_series_key rejects bad identifiers") {
  CHECK_THROWS_AS(canonical_series_key("9lives", {}), std::invalid_argument);
  TagSet bad{{"a b", "v"}};
  CHECK_THROWS_AS(canonical_series_key("ok", bad), std::invalid_argument);
}

TEST_CASE("canonical key permutation property") {
  std::mt19937_64 rng(7);
  for (int round = 0; round < 200; ++round) {
    int n = 1 + static_cast<int>(rng() % 6);
    std::vector<int> names(10);
    std::iota(names.begin(), names.end(), 0);
    std::shuffle(names.begin(), names.end(), rng);
    std::vector<std::pair<std::string, std::string>> pairs;
    for (int i = 0; i < n; ++i) {
      pairs.push_back({"t" + std::to_string(names[i]), "v" + std::to_string(rng() % 100)});
    }
    TagSet in_order;
    for (const auto& [k, v] : pairs) in_order.set(k, v);
    std::shuffle(pairs.begin(), pairs.end(), rng);
    TagSet shuffled;
    for (const auto& [k, v] : pairs) shuffled.set(k, v);
    CHECK(SeriesKey{"m", in_order}.canonical() == SeriesKey{"m", shuffled}.canonical());
  }
}

TEST_CASE("canonical key distinguishes distinct tag sets") {
  // (name, tags) -> canonical must be injective; spot-check near-collisions.
  TagSet a{{"x", "1,y=\"2\""}};
  TagSet b{{"x", "1"}, {"y", "2"}};
  CHECK(SeriesKey{"m", a}.canonical() != SeriesKey{"m", b}.canonical());
}

TEST_CASE("bin_start floors to the resolution grid") {
  Timestamp t = *parse_iso8601("2020-01-01T00:13:00Z");
  CHECK(format_iso8601(bin_start(t, Resolution::M12)) == "2020-01-01T00:12:00.000Z");

  Timestamp boundary = *parse_iso8601("2020-01-01T00:00:00Z");
  CHECK(bin_start(boundary, Resolution::H1) == boundary);

  Timestamp afternoon = *parse_iso8601("2020-01-01T13:37:11Z");
  CHECK(format_iso8601(bin_start(afternoon, Resolution::D1)) == "2020-01-01T00:00:00.000Z");
}

TEST_CASE("bin_start rejects RAW") {
  CHECK_THROWS_AS(bin_start(Timestamp{0}, Resolution::RAW), std::invalid_argument);
}

TEST_CASE("bin_start idempotence and remainder bound") {
  std::mt19937_64 rng(11);
  const Resolution all[] = {Resolution::M12, Resolution::H1, Resolution::D1, Resolution::D7,
                            Resolution::D30};
  for (int round = 0; round < 500; ++round) {
    Timestamp t{static_cast<std::int64_t>(rng() % 4102444800000ll)};  // within [1970, 2100)
    for (Resolution res : all) {
      Timestamp start = bin_start(t, res);
      CHECK(bin_start(start, res) == start);
      CHECK(t - start >= 0);
      CHECK(t - start < resolution_ms(res));
    }
  }
}

TEST_CASE("resolution durations strictly increase") {
  CHECK(resolution_ms(Resolution::M12) < resolution_ms(Resolution::H1));
  CHECK(resolution_ms(Resolution::H1) < resolution_ms(Resolution::D1));
  CHECK(resolution_ms(Resolution::D1) < resolution_ms(Resolution::D7));
  CHECK(resolution_ms(Resolution::D7) < resolution_ms(Resolution::D30));
}

TEST_CASE("validate_name") {
  CHECK(validate_name("job_status"));
  CHECK_FALSE(validate_name("9lives"));
  CHECK_FALSE(validate_name(""));
  CHECK(validate_name("_x9"));
  CHECK_FALSE(validate_name("has space"));
  CHECK_FALSE(validate_name("dash-ed"));
  CHECK(validate_name(std::string(256, 'a')));
  CHECK_FALSE(validate_name(std::string(257, 'a')));
}

TEST_CASE("iso8601 round trip") {
  Timestamp t{1583404799123};
  CHECK(*parse_iso8601(format_iso8601(t)) == t);
  CHECK(format_day(t) == "2020.03.05");
  CHECK(parse_day("2020.03.05")->ms == day_start(t).ms);
}

TEST_CASE("document canonical encoding is key-sorted and stable") {
  Document doc;
  doc.producer = "spider";
  doc.doc_type = "condor_job";
  doc.timestamp = Timestamp{1000};
  doc.payload["b"] = 2;
  doc.payload["a"] = "x";
  std::string first = doc.canonical_encoding();

  Document same;
  same.producer = "spider";
  same.doc_type = "condor_job";
  same.timestamp = Timestamp{1000};
  same.payload["a"] = "x";
  same.payload["b"] = 2;
  CHECK(first == same.canonical_encoding());
  CHECK(doc.content_hash() == same.content_hash());

  auto parsed = Document::from_json(Json::parse(first));
  REQUIRE(parsed.has_value());
  CHECK(parsed->canonical_encoding() == first);
}

TEST_CASE("payload shape: one nesting level only") {
  Json ok = Json::object();
  ok["n"] = 1;
  ok["nested"] = Json::object();
  ok["nested"]["x"] = true;
  CHECK(payload_well_formed(ok));

  Json too_deep = Json::object();
  too_deep["nested"] = Json::object();
  too_deep["nested"]["again"] = Json::object();
  CHECK_FALSE(payload_well_formed(too_deep));

  Json array_value = Json::object();
  array_value["xs"] = Json::array();
  CHECK_FALSE(payload_well_formed(array_value));

  CHECK_FALSE(payload_well_formed(Json::array()));
}

TEST_CASE("field matchers") {
  Json payload;
  payload["status"] = "failed";
  payload["retries"] = 3;
  payload["meta"] = Json::object();
  payload["meta"]["site"] = "T1";

  CHECK(FieldMatcher{"status", MatchOp::EQ, "failed"}.matches(payload));
  CHECK_FALSE(FieldMatcher{"status", MatchOp::EQ, "done"}.matches(payload));
  CHECK(FieldMatcher{"status", MatchOp::NEQ, "done"}.matches(payload));
  CHECK_FALSE(FieldMatcher{"missing", MatchOp::NEQ, "x"}.matches(payload));  // requires presence
  CHECK(FieldMatcher{"retries", MatchOp::GT, 2}.matches(payload));
  CHECK_FALSE(FieldMatcher{"retries", MatchOp::GT, 3}.matches(payload));
  CHECK(FieldMatcher{"retries", MatchOp::LT, 3.5}.matches(payload));
  CHECK(FieldMatcher{"status", MatchOp::EXISTS, {}}.matches(payload));
  CHECK_FALSE(FieldMatcher{"nope", MatchOp::EXISTS, {}}.matches(payload));
  CHECK(FieldMatcher{"meta.site", MatchOp::EQ, "T1"}.matches(payload));
  // numbers never compare against strings
  CHECK_FALSE(FieldMatcher{"retries", MatchOp::GT, "2"}.matches(payload));
}

TEST_CASE("reserved fields") {
  CHECK(is_reserved_field("version"));
  CHECK(is_reserved_field("timestamp"));
  CHECK(is_reserved_field("uuid"));
  CHECK_FALSE(is_reserved_field("status"));
}
