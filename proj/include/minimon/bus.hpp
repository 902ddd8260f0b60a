#pragma once

#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "minimon/core.hpp"

namespace minimon::bus {

/// One record in a topic log. Offsets are assigned contiguously from 0 per
/// topic; the payload is opaque bytes and immutable after publish.
struct TopicRecord {
  std::string topic;
  std::uint64_t offset = 0;
  std::string payload;
  Timestamp enqueued_at;
};

struct BusOptions {
  /// Background fsync cadence. <= 0 means fsync synchronously on every
  /// append and commit.
  std::int64_t fsync_interval_ms = 100;
  /// Records older than this are truncated once every registered group has
  /// committed past them.
  std::int64_t retention_ms = 7 * kMillisPerDay;
  std::function<Timestamp()> clock = now_wall;
};

/// Topic names are dot-separated identifiers: `docs.condor_job`.
bool valid_topic_name(std::string_view name);

/// In-process persistent stream transport with at-least-once delivery to
/// named consumer groups. One append-only log file per topic under
/// `<dir>/topics/`, framed as 4-byte big-endian length, payload bytes,
/// 4-byte big-endian CRC32 of the payload. Group cursors live under
/// `<dir>/cursors/<group>.cursors` as `topic=committed_offset` lines.
///
/// Recovery re-scans the logs and truncates any torn tail whose CRC or
/// length does not check out. enqueued_at is not part of the on-disk
/// frame, so recovered records are aged from recovery time; retention
/// therefore never fires early after a restart.
class Bus {
 public:
  explicit Bus(std::filesystem::path dir, BusOptions options = {});
  ~Bus();

  Bus(const Bus&) = delete;
  Bus& operator=(const Bus&) = delete;

  /// Appends durably and returns the assigned offset. Throws
  /// std::invalid_argument for a malformed topic name, std::runtime_error
  /// if the append cannot be completed (no partial append remains).
  std::uint64_t publish(const std::string& topic, std::string_view payload);

  /// Up to `max` records with offset > the group's committed offset, in
  /// offset order. Polling registers the group; repeated polls without a
  /// commit return the same records.
  std::vector<TopicRecord> poll(const std::string& group, const std::string& topic,
                                std::size_t max);

  /// Advances the cursor to max(current, offset) and persists it. Throws
  /// std::invalid_argument when `offset` was never delivered to the group.
  void commit(const std::string& group, const std::string& topic, std::uint64_t offset);

  /// Committed offset for (group, topic); -1 when nothing committed.
  std::int64_t committed(const std::string& group, const std::string& topic) const;

  std::uint64_t next_offset(const std::string& topic) const;
  std::uint64_t base_offset(const std::string& topic) const;
  std::vector<std::string> topics() const;
  std::vector<std::string> groups() const;

  /// Truncates records older than the retention window that every
  /// registered group has committed past. Returns records dropped.
  std::size_t apply_retention(Timestamp now);

  /// fsyncs all dirty logs and cursors immediately.
  void flush();

 private:
  struct Topic;

  Topic& topic_state(const std::string& name);
  const Topic* topic_state_if_exists(const std::string& name) const;
  void load_from_disk();
  void persist_cursor_file(const std::string& group);
  void flusher_loop();

  std::filesystem::path dir_;
  BusOptions options_;

  mutable std::mutex registry_mutex_;
  std::map<std::string, std::unique_ptr<Topic>> topics_;
  // group -> topic -> committed offset (-1 = registered, nothing committed)
  std::map<std::string, std::map<std::string, std::int64_t>> cursors_;
  // group -> topic -> highest offset handed out by poll this process
  std::map<std::string, std::map<std::string, std::int64_t>> delivered_;

  std::thread flusher_;
  std::mutex flusher_mutex_;
  std::condition_variable flusher_cv_;
  bool stopping_ = false;
};

}  // namespace minimon::bus
