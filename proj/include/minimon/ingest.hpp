#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "minimon/bus.hpp"
#include "minimon/core.hpp"
#include "minimon/exposition.hpp"
#include "minimon/tsdb.hpp"

namespace minimon::ingest {

enum class FieldType { Int, Float, String, Bool };

const char* field_type_name(FieldType t);
std::optional<FieldType> field_type_from_name(std::string_view name);

struct FieldDef {
  std::string name;
  FieldType type = FieldType::String;
  bool required = false;
};

/// Agreed document schema for one (producer, doc_type).
struct SchemaDef {
  std::string producer;
  std::string doc_type;
  std::vector<FieldDef> fields;

  /// nullopt when well-formed, otherwise the first problem found.
  std::optional<std::string> check() const;
  const FieldDef* find_field(const std::string& name) const;

  Json to_json() const;
  static std::optional<SchemaDef> from_json(const Json& j);
};

struct SinkRoute {
  bool to_docstore = true;
  bool to_tsdb = false;
  bool to_archive = true;
  /// Payload fields that become tags on derived metric points (string
  /// typed in the schema).
  std::vector<std::string> tag_fields;
  /// Numeric payload fields; each becomes a series `<doc_type>_<field>`.
  std::vector<std::string> value_fields;
};

struct ProducerRegistration {
  std::string producer;
  std::string doc_type;
  SchemaDef schema;
  std::int64_t daily_quota_bytes = 0;
  SinkRoute route;

  std::optional<std::string> check() const;

  Json to_json() const;
  static std::optional<ProducerRegistration> from_json(const Json& j);
};

enum class Reason {
  RESERVED_FIELD,
  TYPE_MISMATCH,
  MISSING_REQUIRED,
  UNKNOWN_PRODUCER,
  TIMESTAMP_SKEW,
  QUOTA_EXCEEDED,
  MALFORMED,
};

const char* reason_name(Reason r);

struct ValidationError {
  std::size_t doc_index = 0;
  Reason reason = Reason::MALFORMED;
  std::string detail;
};

/// Per-document outcome of an inject call.
struct DocResult {
  bool accepted = false;
  std::optional<ValidationError> error;
};

/// Validates a document against its schema. Checks run in the order
/// RESERVED_FIELD, MISSING_REQUIRED, TYPE_MISMATCH, TIMESTAMP_SKEW and the
/// first failure wins. Declared int fields accept only integers; declared
/// float fields accept ints as well (never the reverse). Payload fields the
/// schema does not declare pass through unvalidated.
std::optional<ValidationError> validate_document(const Document& doc, const SchemaDef& schema,
                                                 Timestamp now,
                                                 std::int64_t skew_ms = 7 * kMillisPerDay);

/// Producer registry with optional persistence to `<file>` as JSON.
class Registry {
 public:
  Registry() = default;
  explicit Registry(std::filesystem::path file);

  /// Fails on duplicate (unless replace) and on invalid registrations;
  /// returns an error message in that case.
  std::optional<std::string> register_producer(const ProducerRegistration& reg,
                                               bool replace = false);
  std::optional<ProducerRegistration> lookup(const std::string& producer,
                                             const std::string& doc_type) const;
  std::vector<ProducerRegistration> list() const;

 private:
  void persist() const;
  void load();

  mutable std::mutex mutex_;
  std::map<std::pair<std::string, std::string>, ProducerRegistration> entries_;
  std::filesystem::path file_;
};

struct IngestorOptions {
  std::int64_t timestamp_skew_ms = 7 * kMillisPerDay;
  std::function<Timestamp()> clock = now_wall;
};

/// Front door for document ingestion: validates against the registry,
/// charges the per-producer daily byte quota and publishes accepted
/// documents to the bus topic `docs.<doc_type>`.
///
/// Quota accounting keys on (producer, doc_type) and the UTC day of
/// arrival; once a document trips the quota, it and every later document
/// in the batch are rejected QUOTA_EXCEEDED.
class Ingestor {
 public:
  Ingestor(Registry& registry, bus::Bus& bus, IngestorOptions options = {});

  /// `raw_batch` is the wire form: an array of `{"timestamp": <ms>,
  /// "payload": {...}}` objects (timestamp optional, defaults to now).
  std::vector<DocResult> inject(const std::string& producer, const std::string& doc_type,
                                const Json& raw_batch, Timestamp now);

  std::vector<DocResult> inject_documents(const std::string& producer,
                                          const std::string& doc_type,
                                          const std::vector<Document>& batch, Timestamp now);

  /// Bytes charged so far for the UTC day of `now`.
  std::int64_t charged_today(const std::string& producer, const std::string& doc_type,
                             Timestamp now) const;

 private:
  struct PendingDoc {
    Document doc;
    std::optional<ValidationError> shape_error;
  };

  std::vector<DocResult> run_batch(const std::string& producer, const std::string& doc_type,
                                   const std::vector<PendingDoc>& batch, Timestamp now);

  Registry& registry_;
  bus::Bus& bus_;
  IngestorOptions options_;

  mutable std::mutex mutex_;
  // (producer, doc_type) -> (day start ms, bytes charged)
  std::map<std::pair<std::string, std::string>, std::pair<std::int64_t, std::int64_t>> quota_;
};

enum class TargetStatus { NEVER, OK, FAIL };

const char* target_status_name(TargetStatus s);

struct ScrapeTarget {
  std::string url;
  std::int64_t interval_ms = 15 * kMillisPerSecond;
  TagSet static_tags;
  TargetStatus last_status = TargetStatus::NEVER;
  std::optional<std::string> last_error;
  Timestamp last_attempt;
  std::uint64_t points_written = 0;
};

/// Pull-mode scraping of exporter endpoints. One in-flight request per
/// target; a failed fetch or parse marks the target FAIL and writes
/// nothing.
class Scraper {
 public:
  Scraper(tsdb::Store& store, std::function<Timestamp()> clock = now_wall);

  std::size_t add_target(ScrapeTarget target);
  std::vector<ScrapeTarget> targets() const;

  /// Scrapes one target now; returns points written.
  std::size_t scrape_once(std::size_t index, Timestamp now);
  /// Scrapes every target whose interval has elapsed.
  std::size_t scrape_due(Timestamp now);

  /// Parses an exposition body and writes points (used by scrape_once and
  /// directly by tests). static_tags win over body tags on collision.
  std::size_t ingest_body(std::size_t index, const std::string& body, Timestamp now,
                          std::string* error);

 private:
  tsdb::Store& store_;
  std::function<Timestamp()> clock_;
  mutable std::mutex mutex_;
  std::vector<ScrapeTarget> targets_;
};

struct PushResult {
  bool ok = false;
  std::size_t points = 0;
  std::string error;
};

/// Push-gateway for ephemeral jobs: the pushed group replaces the previous
/// group for the same job name (last write wins); a failed parse keeps the
/// previous group.
class PushGateway {
 public:
  PushGateway(tsdb::Store& store);

  PushResult push(const std::string& job, const std::string& body, Timestamp now);
  std::optional<std::vector<exposition::Sample>> group(const std::string& job) const;
  std::vector<std::string> jobs() const;

 private:
  tsdb::Store& store_;
  mutable std::mutex mutex_;
  std::map<std::string, std::vector<exposition::Sample>> groups_;
};

}  // namespace minimon::ingest
