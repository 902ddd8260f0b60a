#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "minimon/core.hpp"

namespace minimon::tsdb {

using SeriesId = std::uint32_t;

struct MetricPoint {
  SeriesKey key;
  double value = 0.0;
  Timestamp ts;

  friend bool operator==(const MetricPoint&, const MetricPoint&) = default;
};

/// Fixed-resolution rollup of one series over one window.
struct AggregateBin {
  Resolution resolution = Resolution::M12;
  Timestamp window_start;
  std::uint64_t count = 0;
  double sum = 0.0;
  double min = 0.0;
  double max = 0.0;

  double avg() const { return sum / static_cast<double>(count); }
};

struct RetentionPolicy {
  int raw_days = 15;
  int m12_days = 7;
  int coarse_days = 1825;  // H1/D1/D7/D30
};

struct CardinalityStats {
  std::uint64_t active_series = 0;
  std::uint64_t total_points = 0;
  std::uint64_t inverted_index_entries = 0;
  std::uint64_t daily_churn = 0;  // series first seen in the last 24 h
};

enum class WriteError { NONE, NOT_FINITE, OUT_OF_WINDOW, DUPLICATE_TIMESTAMP };

struct WriteResult {
  WriteError error = WriteError::NONE;
  bool ok() const { return error == WriteError::NONE; }
};

const char* write_error_name(WriteError err);

struct StoreOptions {
  RetentionPolicy retention;
  /// Windows are finalized this long after they close, admitting slightly
  /// late points.
  std::int64_t grace_ms = kMillisPerMinute;
  /// Future skew tolerated at write.
  std::int64_t future_skew_ms = kMillisPerHour;
  std::function<Timestamp()> clock = now_wall;
  /// Empty: memory-only store. Otherwise the on-disk layout is
  /// `<dir>/series/<fnv1a64-hex>/` holding meta.txt (canonical key,
  /// first-seen), raw.blk (16-byte ts/value records) and bins.blk (41-byte
  /// bin records), plus `<dir>/index.ckpt`, a JSON checkpoint of the series
  /// index written by checkpoint().
  std::filesystem::path dir;
};

struct RetentionCounts {
  std::size_t raw_points = 0;
  std::size_t m12_bins = 0;
  std::size_t coarse_bins = 0;
  std::size_t series_removed = 0;
};

/// Time-series store: per-series raw sample buffer, 12-minute bins cascading
/// into 1h/1d/7d/30d, inverted label index and cardinality accounting.
///
/// Writers are serialized; reads take a shared lock and see a consistent
/// snapshot. downsample_tick and apply_retention are exclusive maintenance
/// passes.
class Store {
 public:
  explicit Store(StoreOptions options = {});
  ~Store();

  Store(const Store&) = delete;
  Store& operator=(const Store&) = delete;

  /// Appends one sample. Rejects non-finite values, timestamps outside
  /// (now - raw_days, now + future_skew), and writes into an M12 window
  /// that has already been finalized. A byte-identical duplicate (same
  /// series, ts and value) is acknowledged without storing a second copy;
  /// a conflicting value at an existing timestamp is rejected.
  WriteResult write(const MetricPoint& p);

  /// Finalizes every closed-and-graced window: M12 from raw points, H1
  /// from M12, D1 from H1, D7 and D30 from D1. Idempotent per window;
  /// windows with no data produce no bin. Returns bins finalized.
  std::size_t downsample_tick(Timestamp now);

  /// Drops raw points older than raw_days, M12 bins older than m12_days
  /// and coarse bins older than coarse_days; series left with no data are
  /// removed from the active set and the inverted index (their first-seen
  /// bookkeeping is retained for churn accounting).
  RetentionCounts apply_retention(Timestamp now);

  CardinalityStats cardinality() const;

  /// --- read surface used by the query evaluator ---

  std::vector<SeriesId> series_with_name(const std::string& metric) const;
  /// Posting list for one (tag, value) pair.
  std::vector<SeriesId> series_with_tag(const std::string& tag, const std::string& value) const;
  std::optional<SeriesKey> key_of(SeriesId id) const;
  /// Raw samples with from < ts <= to, sorted by ts.
  std::vector<std::pair<Timestamp, double>> raw_in(SeriesId id, Timestamp from,
                                                   Timestamp to) const;
  /// Finalized bins with from < window_start <= to, in window order.
  std::vector<AggregateBin> bins_in(SeriesId id, Resolution res, Timestamp from,
                                    Timestamp to) const;

  std::vector<SeriesId> all_series() const;

  /// Flushes buffered block appends and writes the index checkpoint.
  /// No-op for memory-only stores.
  void checkpoint();

  Timestamp clock_now() const { return options_.clock(); }
  const StoreOptions& options() const { return options_; }

 private:
  struct Series;

  SeriesId intern_series(const SeriesKey& key);
  void remove_series_postings(SeriesId id);
  std::size_t finalize_m12(Series& s, Timestamp frontier);
  std::size_t finalize_parent(Series& s, Resolution parent, Resolution child,
                              Timestamp frontier);
  void load_from_disk();
  std::filesystem::path series_dir(const Series& s) const;
  void flush_series(Series& s);

  StoreOptions options_;

  mutable std::shared_mutex mutex_;
  std::vector<std::unique_ptr<Series>> series_;
  std::unordered_map<std::string, SeriesId> by_canonical_;
  std::unordered_map<std::string, std::vector<SeriesId>> name_index_;
  // "tag\0value" -> posting list
  std::unordered_map<std::string, std::vector<SeriesId>> inverted_index_;
  std::uint64_t total_raw_points_ = 0;
  std::uint64_t posting_count_ = 0;
  // Lifetime first-seen bookkeeping, canonical key -> first seen; survives
  // series removal by retention.
  std::unordered_map<std::string, Timestamp> first_seen_;
  // Closed-window frontier per resolution (exclusive end boundary).
  std::array<Timestamp, 5> frontier_{};
};

/// Cascade order used by the downsampler: index into per-series bin maps.
constexpr std::array<Resolution, 5> kBinResolutions = {
    Resolution::M12, Resolution::H1, Resolution::D1, Resolution::D7, Resolution::D30};

constexpr int bin_slot(Resolution res) {
  switch (res) {
    case Resolution::M12: return 0;
    case Resolution::H1: return 1;
    case Resolution::D1: return 2;
    case Resolution::D7: return 3;
    case Resolution::D30: return 4;
    case Resolution::RAW: break;
  }
  return -1;
}

}  // namespace minimon::tsdb
