#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "minimon/core.hpp"

namespace minimon::archive {

enum class PartitionState { OPEN, COMPACTED };

const char* partition_state_name(PartitionState s);

struct PartitionInfo {
  std::string doc_type;
  std::string day;  // YYYY.MM.DD
  PartitionState state = PartitionState::OPEN;
  std::uint64_t raw_bytes = 0;
  std::uint64_t compacted_bytes = 0;
  std::uint64_t record_count = 0;
  std::uint64_t late_count = 0;
};

struct CompactionReport {
  std::string doc_type;
  std::string day;
  std::uint64_t duplicates_removed = 0;
  std::uint64_t bytes_before = 0;
  std::uint64_t bytes_after = 0;
  double reduction_ratio = 0.0;  // 1 - after/before
  bool already_compacted = false;
};

enum class AppendDisposition { MAIN, LATE_SIDECAR };

struct ArchiveOptions {
  std::filesystem::path dir;
  /// Compaction becomes eligible this long after the partition's day ends.
  std::int64_t compact_after_ms = kMillisPerHour;
  /// Raw bytes per compressed block.
  std::size_t block_bytes = 4 * 1024 * 1024;
};

/// Long-term append-only sink partitioned by the UTC day of each record's
/// timestamp. Duplicates are permitted in OPEN partitions; compact()
/// collapses byte-identical canonical encodings to their first arrival,
/// deflate-compresses the survivors in 4 MiB blocks and seals the
/// partition. Appends to a sealed partition land in a `late` sidecar.
///
/// On-disk layout per partition `<dir>/<doc_type>/<YYYY.MM.DD>/`:
///   open.log  - length-prefixed records (4-byte BE length, payload,
///               4-byte BE CRC32) while OPEN
///   part.bin  - compacted file: magic "MMAR", u32 version, u32 codec
///               (1 = deflate), u32 block count, block table
///               (u64 offset, u64 compressed size, u64 raw size,
///               u32 record count each), then the blocks
///   late.log  - sidecar with the same framing as open.log
class Archive {
 public:
  explicit Archive(ArchiveOptions options);

  std::vector<AppendDisposition> append(const std::string& doc_type,
                                        const std::vector<Document>& records);

  /// Throws std::invalid_argument when the partition is OPEN but its day
  /// has not elapsed (day end + compact_after must be <= now). Compacting
  /// a COMPACTED partition is an idempotent no-op report.
  CompactionReport compact(const std::string& doc_type, Timestamp day, Timestamp now);

  /// Streams main + sidecar records in stored order, filtered by matchers.
  /// Missing partitions yield an empty result.
  std::vector<Document> read(const std::string& doc_type, Timestamp day,
                             const std::vector<FieldMatcher>& matchers = {}) const;

  std::vector<PartitionInfo> partitions() const;

  /// Compacts every OPEN partition whose day has elapsed.
  std::vector<CompactionReport> compact_eligible(Timestamp now);

  /// Test hook: invoked with a step label before each I/O step of
  /// compact(); throwing from it simulates a crash at that point.
  void set_compaction_fault_hook(std::function<void(const std::string&)> hook);

  static const std::vector<std::string>& compaction_io_steps();

 private:
  struct Partition {
    std::string doc_type;
    Timestamp day;
    PartitionState state = PartitionState::OPEN;
    std::uint64_t record_count = 0;
    std::uint64_t late_count = 0;
    std::uint64_t raw_bytes = 0;
    std::uint64_t compacted_bytes = 0;
  };

  Partition& partition_for(const std::string& doc_type, Timestamp day);
  std::filesystem::path partition_dir(const std::string& doc_type, Timestamp day) const;
  void load_from_disk();
  void fault_point(const std::string& step);

  ArchiveOptions options_;
  mutable std::mutex mutex_;
  std::map<std::pair<std::string, std::int64_t>, Partition> partitions_;
  std::function<void(const std::string&)> fault_hook_;
};

/// Framed-log helpers shared with the tests (same framing as the bus log).
void append_framed(const std::filesystem::path& file, const std::string& payload);
std::vector<std::string> read_framed(const std::filesystem::path& file);

}  // namespace minimon::archive
