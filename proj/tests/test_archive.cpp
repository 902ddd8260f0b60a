#include <doctest.h>

#include <algorithm>
#include <map>
#include <random>

#include "minimon/archive.hpp"
#include "test_util.hpp"

using namespace minimon;
using minimon::testutil::TempDir;

namespace {

constexpr std::int64_t kDay = 1583366400000;  // 2020-03-05T00:00:00Z
const Timestamp kAfterClose{kDay + kMillisPerDay + 2 * kMillisPerHour};

Document make_record(std::int64_t ts, int id, const std::string& status = "done") {
  Document doc;
  doc.producer = "spider";
  doc.doc_type = "condor_job";
  doc.timestamp = Timestamp{ts};
  doc.payload["record"] = id;
  doc.payload["status"] = status;
  return doc;
}

archive::ArchiveOptions options_for(const TempDir& dir) {
  archive::ArchiveOptions options;
  options.dir = dir.path();
  return options;
}

// Dedup oracle: first occurrence of each canonical encoding, order kept.
std::vector<std::string> dedup_oracle(const std::vector<Document>& docs) {
  std::vector<std::string> out;
  std::map<std::string, bool> seen;
  for (const Document& doc : docs) {
    std::string encoded = doc.canonical_encoding();
    if (!seen.emplace(encoded, true).second) continue;
    out.push_back(std::move(encoded));
  }
  return out;
}

}  // namespace

TEST_CASE("append routes records to their day partition") {
  TempDir dir;
  archive::Archive archive(options_for(dir));
  std::vector<Document> batch;
  for (int i = 0; i < 10; ++i) batch.push_back(make_record(kDay + i * 1000, i));
  auto dispositions = archive.append("condor_job", batch);
  for (auto d : dispositions) CHECK(d == archive::AppendDisposition::MAIN);

  auto partitions = archive.partitions();
  REQUIRE(partitions.size() == 1);
  CHECK(partitions[0].day == "2020.03.05");
  CHECK(partitions[0].record_count == 10);
  CHECK(partitions[0].state == archive::PartitionState::OPEN);
}

TEST_CASE("records spanning midnight land in two partitions") {
  TempDir dir;
  archive::Archive archive(options_for(dir));
  archive.append("condor_job", {make_record(kDay + kMillisPerDay - 1, 1),
                                make_record(kDay + kMillisPerDay, 2)});
  auto partitions = archive.partitions();
  REQUIRE(partitions.size() == 2);
  CHECK(partitions[0].day == "2020.03.05");
  CHECK(partitions[1].day == "2020.03.06");
}

TEST_CASE("compact requires the day to have elapsed") {
  TempDir dir;
  archive::Archive archive(options_for(dir));
  archive.append("condor_job", {make_record(kDay + 1000, 1)});
  CHECK_THROWS_AS(archive.compact("condor_job", Timestamp{kDay}, Timestamp{kDay + kMillisPerDay}),
                  std::invalid_argument);
  CHECK_NOTHROW(archive.compact("condor_job", Timestamp{kDay}, kAfterClose));
}

TEST_CASE("compaction removes exact duplicates, preserving first-arrival order") {
  TempDir dir;
  archive::Archive archive(options_for(dir));

  std::mt19937_64 rng(11);
  std::vector<Document> batch;
  for (int i = 0; i < 400; ++i) {
    if (i % 2 == 1) {
      batch.push_back(batch[static_cast<std::size_t>(rng() % batch.size())]);  // exact duplicate
    } else {
      batch.push_back(make_record(kDay + static_cast<std::int64_t>(rng() % kMillisPerDay), i));
    }
  }
  archive.append("condor_job", batch);
  auto oracle = dedup_oracle(batch);

  auto report = archive.compact("condor_job", Timestamp{kDay}, kAfterClose);
  CHECK(report.duplicates_removed == batch.size() - oracle.size());
  CHECK(report.bytes_before > 0);
  CHECK(report.bytes_after > 0);
  CHECK(report.reduction_ratio > 0.0);
  CHECK(report.reduction_ratio < 1.0);

  auto records = archive.read("condor_job", Timestamp{kDay});
  REQUIRE(records.size() == oracle.size());
  for (std::size_t i = 0; i < records.size(); ++i)
    CHECK(records[i].canonical_encoding() == oracle[i]);

  auto partitions = archive.partitions();
  REQUIRE(partitions.size() == 1);
  CHECK(partitions[0].state == archive::PartitionState::COMPACTED);
  CHECK(partitions[0].compacted_bytes <= partitions[0].raw_bytes);
}

TEST_CASE("all-unique corpus still shrinks through compression") {
  TempDir dir;
  archive::Archive archive(options_for(dir));
  std::vector<Document> batch;
  for (int i = 0; i < 500; ++i) batch.push_back(make_record(kDay + i, i));
  archive.append("condor_job", batch);

  auto report = archive.compact("condor_job", Timestamp{kDay}, kAfterClose);
  CHECK(report.duplicates_removed == 0);
  CHECK(report.reduction_ratio > 0.0);  // repetitive field names deflate well
  CHECK(archive.read("condor_job", Timestamp{kDay}).size() == 500);
}

TEST_CASE("compacting twice is an idempotent no-op") {
  TempDir dir;
  archive::Archive archive(options_for(dir));
  archive.append("condor_job", {make_record(kDay, 1), make_record(kDay, 1)});
  auto first = archive.compact("condor_job", Timestamp{kDay}, kAfterClose);
  CHECK(first.duplicates_removed == 1);
  auto second = archive.compact("condor_job", Timestamp{kDay}, kAfterClose);
  CHECK(second.already_compacted);
  CHECK(second.duplicates_removed == 0);
  CHECK(archive.read("condor_job", Timestamp{kDay}).size() == 1);
}

TEST_CASE("appends after compaction land in the late sidecar and merge on read") {
  TempDir dir;
  archive::Archive archive(options_for(dir));
  archive.append("condor_job", {make_record(kDay + 1000, 1)});
  archive.compact("condor_job", Timestamp{kDay}, kAfterClose);

  auto dispositions = archive.append("condor_job", {make_record(kDay + 2000, 2)});
  REQUIRE(dispositions.size() == 1);
  CHECK(dispositions[0] == archive::AppendDisposition::LATE_SIDECAR);

  auto records = archive.read("condor_job", Timestamp{kDay});
  REQUIRE(records.size() == 2);
  CHECK(records[0].payload["record"] == 1);  // main first, then sidecar
  CHECK(records[1].payload["record"] == 2);

  auto partitions = archive.partitions();
  CHECK(partitions[0].late_count == 1);
}

TEST_CASE("read filters by matchers and tolerates missing partitions") {
  TempDir dir;
  archive::Archive archive(options_for(dir));
  archive.append("condor_job", {make_record(kDay, 1, "failed"), make_record(kDay + 1, 2, "done"),
                                make_record(kDay + 2, 3, "failed")});

  std::vector<FieldMatcher> failed = {{"status", MatchOp::EQ, Json("failed")}};
  CHECK(archive.read("condor_job", Timestamp{kDay}, failed).size() == 2);

  std::vector<FieldMatcher> absent = {{"nope", MatchOp::EQ, Json(1)}};
  CHECK(archive.read("condor_job", Timestamp{kDay}, absent).empty());

  CHECK(archive.read("condor_job", Timestamp{kDay + 5 * kMillisPerDay}).empty());
  CHECK(archive.read("other_type", Timestamp{kDay}).empty());
}

TEST_CASE("state and counts are rebuilt from disk") {
  TempDir dir;
  {
    archive::Archive archive(options_for(dir));
    archive.append("condor_job", {make_record(kDay, 1), make_record(kDay, 1),
                                  make_record(kDay + kMillisPerDay, 2)});
    archive.compact("condor_job", Timestamp{kDay}, kAfterClose);
    archive.append("condor_job", {make_record(kDay + 3000, 9)});  // late
  }
  archive::Archive reopened(options_for(dir));
  auto partitions = reopened.partitions();
  REQUIRE(partitions.size() == 2);
  CHECK(partitions[0].state == archive::PartitionState::COMPACTED);
  CHECK(partitions[0].record_count == 1);
  CHECK(partitions[0].late_count == 1);
  CHECK(partitions[1].state == archive::PartitionState::OPEN);
  CHECK(reopened.read("condor_job", Timestamp{kDay}).size() == 2);
}

TEST_CASE("compact_eligible seals only fully elapsed days") {
  TempDir dir;
  archive::Archive archive(options_for(dir));
  archive.append("condor_job", {make_record(kDay, 1), make_record(kDay + kMillisPerDay, 2)});
  auto reports = archive.compact_eligible(kAfterClose);  // second day not elapsed yet
  CHECK(reports.size() == 1);
  auto partitions = archive.partitions();
  CHECK(partitions[0].state == archive::PartitionState::COMPACTED);
  CHECK(partitions[1].state == archive::PartitionState::OPEN);
}

TEST_CASE("a crash at any compaction I/O step never loses a record") {
  std::vector<Document> batch;
  for (int i = 0; i < 100; ++i) batch.push_back(make_record(kDay + i % 40, i % 40));
  auto oracle = dedup_oracle(batch);

  for (const std::string& fault_step : archive::Archive::compaction_io_steps()) {
    CAPTURE(fault_step);
    TempDir dir;
    {
      archive::Archive archive(options_for(dir));
      archive.append("condor_job", batch);
      archive.set_compaction_fault_hook([&](const std::string& step) {
        if (step == fault_step) throw std::runtime_error("injected crash at " + step);
      });
      CHECK_THROWS_AS(archive.compact("condor_job", Timestamp{kDay}, kAfterClose),
                      std::runtime_error);
    }

    // Recovery: reopen the directory as a crashed process restart would.
    archive::Archive recovered(options_for(dir));
    auto records = recovered.read("condor_job", Timestamp{kDay});
    auto partitions = recovered.partitions();
    REQUIRE(partitions.size() == 1);

    if (partitions[0].state == archive::PartitionState::OPEN) {
      // Not yet sealed: every record (duplicates included) must survive,
      // and compaction must complete cleanly now.
      CHECK(records.size() == batch.size());
      auto report = recovered.compact("condor_job", Timestamp{kDay}, kAfterClose);
      CHECK(report.duplicates_removed == batch.size() - oracle.size());
      records = recovered.read("condor_job", Timestamp{kDay});
    }
    REQUIRE(records.size() == oracle.size());
    for (std::size_t i = 0; i < records.size(); ++i)
      CHECK(records[i].canonical_encoding() == oracle[i]);
  }
}
