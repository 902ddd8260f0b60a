#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace minimon {

using Json = nlohmann::json;

/// Milliseconds since the Unix epoch, always UTC. All window arithmetic in
/// the pipeline is done on this type; nothing ever converts to local time.
struct Timestamp {
  std::int64_t ms = 0;

  constexpr Timestamp() = default;
  constexpr explicit Timestamp(std::int64_t millis) : ms(millis) {}

  friend constexpr auto operator<=>(Timestamp, Timestamp) = default;

  constexpr Timestamp operator+(std::int64_t delta_ms) const { return Timestamp{ms + delta_ms}; }
  constexpr Timestamp operator-(std::int64_t delta_ms) const { return Timestamp{ms - delta_ms}; }
  constexpr std::int64_t operator-(Timestamp other) const { return ms - other.ms; }
};

constexpr std::int64_t kMillisPerSecond = 1000;
constexpr std::int64_t kMillisPerMinute = 60 * kMillisPerSecond;
constexpr std::int64_t kMillisPerHour = 60 * kMillisPerMinute;
constexpr std::int64_t kMillisPerDay = 24 * kMillisPerHour;

/// Wall clock reading in UTC milliseconds.
Timestamp now_wall();

/// ISO-8601 rendering (`2020-01-01T00:12:00.000Z`) and parsing. Parsing
/// accepts `...Z` with optional fractional seconds, or a bare integer
/// (treated as epoch milliseconds).
std::string format_iso8601(Timestamp ts);
std::optional<Timestamp> parse_iso8601(std::string_view text);

/// UTC day rendering used by daily index and partition names: `YYYY.MM.DD`.
std::string format_day(Timestamp ts);
std::optional<Timestamp> parse_day(std::string_view text);  // start of that day

/// Start of the UTC day containing ts.
Timestamp day_start(Timestamp ts);

/// Downsampling resolutions. RAW is the unaggregated sample stream; the rest
/// are the fixed bin widths of the aggregation cascade.
enum class Resolution { RAW, M12, H1, D1, D7, D30 };

constexpr std::int64_t resolution_ms(Resolution res) {
  switch (res) {
    case Resolution::M12: return 12 * kMillisPerMinute;
    case Resolution::H1: return kMillisPerHour;
    case Resolution::D1: return kMillisPerDay;
    case Resolution::D7: return 7 * kMillisPerDay;
    case Resolution::D30: return 30 * kMillisPerDay;
    case Resolution::RAW: return 0;
  }
  return 0;
}

const char* resolution_name(Resolution res);
std::optional<Resolution> resolution_from_name(std::string_view name);

/// True iff `s` matches [A-Za-z_][A-Za-z0-9_]* and is at most 256 chars.
bool validate_name(std::string_view s);

/// Sorted tag-name -> tag-value map. Identity is order-independent by
/// construction (std::map iterates in sorted name order).
class TagSet {
 public:
  using Map = std::map<std::string, std::string>;

  TagSet() = default;
  explicit TagSet(Map pairs) : pairs_(std::move(pairs)) {}
  TagSet(std::initializer_list<std::pair<const std::string, std::string>> init) : pairs_(init) {}

  bool empty() const { return pairs_.empty(); }
  std::size_t size() const { return pairs_.size(); }
  void set(std::string name, std::string value) { pairs_[std::move(name)] = std::move(value); }
  bool contains(const std::string& name) const { return pairs_.count(name) > 0; }
  std::optional<std::string> get(const std::string& name) const;
  /// Value with the Prometheus-style "absent means empty" convention.
  std::string get_or_empty(const std::string& name) const;

  const Map& pairs() const { return pairs_; }
  auto begin() const { return pairs_.begin(); }
  auto end() const { return pairs_.end(); }

  friend bool operator==(const TagSet&, const TagSet&) = default;
  friend auto operator<=>(const TagSet&, const TagSet&) = default;

 private:
  Map pairs_;
};

/// Identity of one time series: metric name plus canonical tag set.
struct SeriesKey {
  std::string name;
  TagSet tags;

  friend bool operator==(const SeriesKey&, const SeriesKey&) = default;
  friend auto operator<=>(const SeriesKey&, const SeriesKey&) = default;

  /// Deterministic rendering `name{k1="v1",k2="v2"}` (sorted tag names,
  /// `"` and `\` escaped in values); bare `name` when the tag set is empty.
  std::string canonical() const;
};

/// Renders the canonical series key, validating every identifier.
/// Throws std::invalid_argument naming the offending token.
std::string canonical_series_key(const std::string& name, const TagSet& tags);

/// Largest multiple of the resolution width (anchored at epoch 0 UTC) that
/// is <= ts. Throws std::invalid_argument for RAW.
Timestamp bin_start(Timestamp ts, Resolution res);

/// Payload field names producers may never use at the top level.
bool is_reserved_field(std::string_view name);
const std::vector<std::string>& reserved_fields();

/// The unit of ingestion: a timestamped, producer-tagged field map. The
/// payload is a JSON object whose values are scalars (int, float, string,
/// bool) or one level of nested object with scalar values.
struct Document {
  std::string producer;
  std::string doc_type;
  Timestamp timestamp;
  Json payload = Json::object();

  friend bool operator==(const Document&, const Document&) = default;

  /// Canonical byte encoding: JSON envelope with sorted keys and no
  /// whitespace. Two documents are duplicates iff these bytes are equal.
  std::string canonical_encoding() const;

  /// FNV-1a over the canonical encoding; idempotency key in the sinks.
  std::uint64_t content_hash() const;

  Json to_json() const;
  static std::optional<Document> from_json(const Json& j);
};

/// True iff the payload is an object of scalars with at most one level of
/// nested objects of scalars.
bool payload_well_formed(const Json& payload);

std::uint64_t fnv1a64(std::string_view bytes);

/// Field matchers shared by docstore search and archive reads.
enum class MatchOp { EQ, NEQ, GT, LT, EXISTS };

struct FieldMatcher {
  std::string field;  // top-level name, or "outer.inner" for nested lookup
  MatchOp op = MatchOp::EQ;
  Json value;  // ignored for EXISTS

  /// EQ/NEQ require the field present; GT/LT additionally require both
  /// sides numeric or both strings.
  bool matches(const Json& payload) const;
};

const char* match_op_name(MatchOp op);
std::optional<MatchOp> match_op_from_name(std::string_view name);

}  // namespace minimon
