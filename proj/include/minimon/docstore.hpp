#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "minimon/core.hpp"

namespace minimon::docstore {

enum class DerivedMode { LATEST_BY_TIMESTAMP, NUMERIC_SUM };

const char* derived_mode_name(DerivedMode m);

struct DerivedIndexSpec {
  std::string name;
  std::string source_doc_type;
  std::string key_field;
  DerivedMode mode = DerivedMode::LATEST_BY_TIMESTAMP;
  std::vector<std::string> value_fields;  // NUMERIC_SUM only
};

struct DerivedEntry {
  std::string key;
  // LATEST_BY_TIMESTAMP
  Document latest;
  // NUMERIC_SUM
  std::map<std::string, double> sums;
  std::uint64_t doc_count = 0;
};

struct DocQuery {
  std::string doc_type;
  std::vector<FieldMatcher> matchers;
  Timestamp from;
  Timestamp to;
  std::size_t limit = 100;  // clamped to [1, 10000]
};

struct IndexInfo {
  std::string name;
  std::uint64_t doc_count = 0;
  std::uint64_t bytes = 0;
};

struct DocStoreOptions {
  std::filesystem::path dir;  // empty: memory only
  int default_retention_days = 30;
  std::map<std::string, int> retention_days_by_type;  // 30..40 overrides
};

/// Short-retention searchable document sink organized in daily indexes
/// named `<doc_type>-YYYY.MM.DD` (UTC day of the document timestamp).
///
/// Redelivery-safe: a byte-identical document (content-hash over the
/// canonical encoding) is stored once. Derived indexes are maintained
/// synchronously at store time; retention never prunes them.
class DocStore {
 public:
  explicit DocStore(DocStoreOptions options = {});
  ~DocStore();

  /// Returns true when stored, false when deduplicated.
  bool index_document(const Document& doc);

  /// Documents matching every matcher with from <= ts <= to, newest
  /// first, capped by limit. Unknown doc_type yields an empty result.
  std::vector<Document> search(const DocQuery& query) const;

  /// Drops daily indexes strictly older than their doc_type's retention,
  /// measured in whole UTC days. Returns dropped index names.
  std::vector<std::string> apply_retention(Timestamp now);

  void register_derived(const DerivedIndexSpec& spec);
  std::vector<DerivedIndexSpec> derived_specs() const;

  struct RebuildResult {
    std::uint64_t entries = 0;
    std::uint64_t skipped = 0;
  };
  /// Recomputes a derived index from the surviving documents in range.
  RebuildResult rebuild_derived(const std::string& spec_name, Timestamp from, Timestamp to);

  std::vector<DerivedEntry> derived_entries(const std::string& spec_name) const;
  std::uint64_t derived_skipped(const std::string& spec_name) const;

  std::vector<IndexInfo> indexes() const;
  std::uint64_t total_documents() const;

  /// Flushes derived snapshots (and field index sidecars) to disk.
  void checkpoint();

  static std::string index_name(const std::string& doc_type, Timestamp ts);

 private:
  struct DailyIndex {
    std::string name;
    std::string doc_type;
    Timestamp day;
    std::vector<Document> docs;
    std::vector<std::uint64_t> store_seq;
    std::unordered_map<std::uint64_t, std::vector<std::size_t>> by_hash;
    std::uint64_t bytes = 0;
  };

  struct DerivedState {
    DerivedIndexSpec spec;
    std::map<std::string, DerivedEntry> entries;
    // (timestamp, store order) of the current latest per key
    std::map<std::string, std::pair<std::int64_t, std::uint64_t>> latest_rank;
    std::unordered_set<std::uint64_t> folded_hashes;
    std::uint64_t skipped = 0;
  };

  DailyIndex& index_for(const Document& doc);
  void apply_derived(DerivedState& state, const Document& doc, std::uint64_t seq,
                     std::uint64_t hash);
  void persist_document(const DailyIndex& index, const Document& doc);
  void persist_derived_locked() const;
  void load_from_disk();

  DocStoreOptions options_;

  mutable std::shared_mutex mutex_;
  std::map<std::string, std::unique_ptr<DailyIndex>> indexes_;
  std::map<std::string, DerivedState> derived_;
  std::uint64_t next_seq_ = 0;
  std::uint64_t total_docs_ = 0;
};

/// Brute-force reference used by the search tests; matches the documented
/// matcher semantics exactly.
bool query_matches(const DocQuery& query, const Document& doc);

}  // namespace minimon::docstore
