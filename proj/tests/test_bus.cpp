#include <doctest.h>

#include <fstream>

#include "minimon/bus.hpp"
#include "test_util.hpp"

using namespace minimon;
using minimon::testutil::TempDir;

namespace {

bus::BusOptions sync_options(std::int64_t clock_ms = 1577836800000) {
  bus::BusOptions options;
  options.fsync_interval_ms = 0;  // synchronous, no flusher thread
  options.clock = [clock_ms] { return Timestamp{clock_ms}; };
  return options;
}

}  // namespace

TEST_CASE("publish assigns contiguous offsets from 0") {
  TempDir dir;
  bus::Bus bus(dir.path(), sync_options());
  CHECK(bus.publish("docs.jobs", "a") == 0);
  CHECK(bus.publish("docs.jobs", "b") == 1);
  CHECK(bus.publish("docs.jobs", "c") == 2);
  CHECK(bus.next_offset("docs.jobs") == 3);
}

TEST_CASE("publish rejects malformed topic names") {
  TempDir dir;
  bus::Bus bus(dir.path(), sync_options());
  CHECK_THROWS_AS(bus.publish("a b", "x"), std::invalid_argument);
  CHECK_THROWS_AS(bus.publish("", "x"), std::invalid_argument);
  CHECK_THROWS_AS(bus.publish("a..b", "x"), std::invalid_argument);
  CHECK_THROWS_AS(bus.publish(".a", "x"), std::invalid_argument);
  CHECK_NOTHROW(bus.publish("a.b_c.d", "x"));
}

TEST_CASE("poll redelivers until commit") {
  TempDir dir;
  bus::Bus bus(dir.path(), sync_options());
  for (int i = 0; i < 5; ++i) bus.publish("t", std::to_string(i));

  auto first = bus.poll("g", "t", 3);
  REQUIRE(first.size() == 3);
  CHECK(first[0].offset == 0);
  CHECK(first[2].offset == 2);

  auto again = bus.poll("g", "t", 3);
  REQUIRE(again.size() == 3);
  CHECK(again[0].offset == 0);
  CHECK(again[0].payload == "0");

  bus.commit("g", "t", 2);
  auto rest = bus.poll("g", "t", 10);
  REQUIRE(rest.size() == 2);
  CHECK(rest[0].offset == 3);
  CHECK(rest[1].offset == 4);
}

TEST_CASE("commit is a monotone max") {
  TempDir dir;
  bus::Bus bus(dir.path(), sync_options());
  for (int i = 0; i < 3; ++i) bus.publish("t", "x");
  bus.poll("g", "t", 10);
  bus.commit("g", "t", 1);
  bus.commit("g", "t", 0);
  CHECK(bus.committed("g", "t") == 1);
}

TEST_CASE("commit of an undelivered offset is rejected") {
  TempDir dir;
  bus::Bus bus(dir.path(), sync_options());
  for (int i = 0; i < 5; ++i) bus.publish("t", "x");
  bus.poll("g", "t", 2);  // delivered up to offset 1
  CHECK_THROWS_AS(bus.commit("g", "t", 99), std::invalid_argument);
  CHECK_THROWS_AS(bus.commit("g", "t", 4), std::invalid_argument);
  CHECK_NOTHROW(bus.commit("g", "t", 1));
}

TEST_CASE("restart resumes after the committed offset") {
  TempDir dir;
  {
    bus::Bus bus(dir.path(), sync_options());
    for (int i = 0; i < 5; ++i) bus.publish("t", "payload" + std::to_string(i));
    bus.poll("g", "t", 3);
    bus.commit("g", "t", 2);
  }
  bus::Bus restarted(dir.path(), sync_options());
  CHECK(restarted.next_offset("t") == 5);
  CHECK(restarted.committed("g", "t") == 2);
  auto records = restarted.poll("g", "t", 10);
  REQUIRE(records.size() == 2);
  CHECK(records[0].offset == 3);
  CHECK(records[0].payload == "payload3");
}

TEST_CASE("torn tail is truncated on recovery") {
  TempDir dir;
  {
    bus::Bus bus(dir.path(), sync_options());
    bus.publish("t", "good0");
    bus.publish("t", "good1");
  }
  {
    // Simulate a crash mid-append: length prefix promises more bytes than
    // are present.
    std::ofstream log(dir.path() / "topics" / "t.log", std::ios::binary | std::ios::app);
    const char torn[] = {0, 0, 0, 99, 'p', 'a', 'r'};
    log.write(torn, sizeof(torn));
  }
  bus::Bus restarted(dir.path(), sync_options());
  CHECK(restarted.next_offset("t") == 2);
  auto records = restarted.poll("g", "t", 10);
  REQUIRE(records.size() == 2);
  CHECK(records[1].payload == "good1");
  // Appends continue cleanly after the truncation.
  CHECK(restarted.publish("t", "good2") == 2);
  auto more = restarted.poll("g", "t", 10);
  CHECK(more.size() == 3);
}

TEST_CASE("corrupted CRC cuts the log at the bad record") {
  TempDir dir;
  {
    bus::Bus bus(dir.path(), sync_options());
    bus.publish("t", "aaaa");
    bus.publish("t", "bbbb");
  }
  {
    std::fstream log(dir.path() / "topics" / "t.log",
                     std::ios::binary | std::ios::in | std::ios::out);
    log.seekp(4 + 2);  // inside the first payload
    log.put('X');
  }
  bus::Bus restarted(dir.path(), sync_options());
  CHECK(restarted.next_offset("t") == 0);  // first record bad, everything after distrusted
}

TEST_CASE("all groups observe the identical per-topic order") {
  TempDir dir;
  bus::Bus bus(dir.path(), sync_options());
  for (int i = 0; i < 20; ++i) bus.publish("t", std::to_string(i));
  auto a = bus.poll("g1", "t", 100);
  auto b = bus.poll("g2", "t", 100);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].offset == b[i].offset);
    CHECK(a[i].payload == b[i].payload);
  }
}

TEST_CASE("retention truncates only what every group has committed") {
  TempDir dir;
  std::int64_t base = 1577836800000;
  auto clock_value = std::make_shared<std::int64_t>(base);
  bus::BusOptions options;
  options.fsync_interval_ms = 0;
  options.retention_ms = 7 * kMillisPerDay;
  options.clock = [clock_value] { return Timestamp{*clock_value}; };
  bus::Bus bus(dir.path(), options);

  bus.publish("t", "old0");
  bus.publish("t", "old1");
  *clock_value = base + 8 * kMillisPerDay;
  bus.publish("t", "new2");

  // Group committed only through offset 0: nothing past it may be dropped.
  bus.poll("g", "t", 10);
  bus.commit("g", "t", 0);
  CHECK(bus.apply_retention(Timestamp{*clock_value}) == 1);
  CHECK(bus.base_offset("t") == 1);

  bus.commit("g", "t", 2);
  CHECK(bus.apply_retention(Timestamp{*clock_value}) == 1);  // old1 now eligible
  CHECK(bus.base_offset("t") == 2);

  // A fresh group starts at the truncated base.
  auto records = bus.poll("g2", "t", 10);
  REQUIRE(records.size() == 1);
  CHECK(records[0].offset == 2);
  CHECK(records[0].payload == "new2");
}

TEST_CASE("on-disk framing is 4-byte BE length, payload, 4-byte BE CRC32") {
  TempDir dir;
  {
    bus::Bus bus(dir.path(), sync_options());
    bus.publish("t", "hi");
  }
  std::ifstream log(dir.path() / "topics" / "t.log", std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(log)), std::istreambuf_iterator<char>());
  REQUIRE(bytes.size() == 4 + 2 + 4);
  CHECK(bytes.substr(0, 4) == std::string("\x00\x00\x00\x02", 4));
  CHECK(bytes.substr(4, 2) == "hi");
  // CRC32("hi") = 0xd8932aac
  CHECK(static_cast<unsigned char>(bytes[6]) == 0xd8);
  CHECK(static_cast<unsigned char>(bytes[7]) == 0x93);
  CHECK(static_cast<unsigned char>(bytes[8]) == 0x2a);
  CHECK(static_cast<unsigned char>(bytes[9]) == 0xac);
}
