#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "minimon/core.hpp"
#include "minimon/query.hpp"
#include "minimon/tsdb.hpp"

namespace minimon::alerting {

enum class Comparator { GT, LT, GE, LE };

const char* comparator_name(Comparator c);
std::optional<Comparator> comparator_from_name(std::string_view name);

struct AlertRule {
  std::string name;
  std::string query;
  Comparator comparator = Comparator::GT;
  double threshold = 0.0;
  std::int64_t for_ms = 0;
  TagSet labels;  // merged over the query result labels (rule wins)
  std::map<std::string, std::string> annotations;  // templates: $value, $labels.<tag>
};

enum class AlertState { PENDING, FIRING, RESOLVED };

const char* alert_state_name(AlertState s);

enum class SuppressKind { NONE, SILENCE, INHIBITION, OUTAGE };

const char* suppress_kind_name(SuppressKind k);

struct AlertInstance {
  std::string rule;
  TagSet labels;  // series labels + rule labels + alertname
  AlertState state = AlertState::PENDING;
  Timestamp started_at;
  Timestamp fired_at;
  Timestamp resolved_at;
  double value = 0.0;
  SuppressKind suppressed_by = SuppressKind::NONE;
  std::string suppress_ref;
  std::map<std::string, std::string> annotations;

  std::string fingerprint() const;
};

struct LabelMatcher {
  std::string tag;
  bool regex = false;  // false: equality
  std::string value;

  bool matches(const TagSet& labels) const;
};

/// All matchers must hold (AND semantics).
bool matchers_match(const std::vector<LabelMatcher>& matchers, const TagSet& labels);

struct Silence {
  std::string id;
  std::vector<LabelMatcher> matchers;
  Timestamp starts_at;
  Timestamp ends_at;
  std::string creator;
  std::string comment;

  bool active_at(Timestamp now) const { return starts_at <= now && now < ends_at; }
};

struct InhibitRule {
  std::vector<LabelMatcher> source_matchers;
  std::vector<LabelMatcher> target_matchers;
  std::vector<std::string> equal_labels;  // non-empty
};

struct OutageWindow {
  std::string source;
  std::vector<LabelMatcher> matchers;
  Timestamp starts_at;
  Timestamp ends_at;  // exclusive
  std::string ticket_id;
};

struct RouteConfig {
  std::vector<std::string> group_by;
  std::int64_t group_wait_ms = 30 * kMillisPerSecond;
  std::int64_t group_interval_ms = 5 * kMillisPerMinute;
  std::int64_t repeat_interval_ms = 4 * kMillisPerHour;
  std::string receiver = "default";
  bool annotate_only_outages = false;
};

enum class ReceiverKind { FILE, WEBHOOK, STDOUT_ };

struct Receiver {
  std::string name;
  ReceiverKind kind = ReceiverKind::STDOUT_;
  std::string destination;  // path or URL
};

/// One grouped message to a receiver. `rendered` is the canonical JSON
/// line appended to FILE receivers and posted to WEBHOOK receivers;
/// identical inputs render byte-identically.
struct Notification {
  Timestamp at;
  std::string group_key;
  std::string receiver;
  std::string status;  // "firing" | "resolved"
  Json payload;
  std::string rendered;
};

struct EngineConfig {
  std::vector<AlertRule> rules;
  RouteConfig route;
  std::vector<Receiver> receivers;
  std::vector<InhibitRule> inhibit_rules;
  std::vector<Silence> silences;
  std::string outage_feed;  // file path or http URL
  std::int64_t outage_poll_ms = 5 * kMillisPerMinute;
  std::int64_t eval_interval_ms = 60 * kMillisPerSecond;
};

/// Parses the alerting configuration file (JSON). Returns errors instead
/// of a config when malformed.
struct ConfigParse {
  std::optional<EngineConfig> config;
  std::vector<std::string> errors;
};
ConfigParse parse_engine_config(const Json& j);
Json engine_config_to_json(const EngineConfig& config);

struct StateChange {
  std::string fingerprint;
  AlertState from;
  AlertState to;
};

/// Rule evaluation loop with the full suppression pipeline. Each tick:
/// evaluate rules against the tsdb at `now`, update PENDING/FIRING/
/// RESOLVED lifecycles, apply silences, inhibition and outage overlays,
/// then group and notify. All steps are callable separately so scripted
/// scenarios can drive a virtual clock.
class Engine {
 public:
  Engine(tsdb::Store& store, EngineConfig config);

  std::vector<StateChange> evaluate_rules(Timestamp now);
  void apply_silences(Timestamp now);
  void apply_inhibition();
  void correlate_outages(Timestamp now);
  std::vector<Notification> route_and_notify(Timestamp now);

  /// Runs all five steps and dispatches notifications to receivers.
  std::vector<Notification> tick(Timestamp now);

  /// Replaces rules/route/receivers/inhibitions; keeps instance state and
  /// runtime silences.
  void reload(EngineConfig config);

  std::string add_silence(Silence silence);  // returns assigned id
  bool remove_silence(const std::string& id);
  std::vector<Silence> silences() const;

  void set_outages(std::vector<OutageWindow> outages);
  /// Parses a JSON array of outage windows; malformed entries are skipped
  /// and counted. Returns accepted count.
  std::size_t load_outage_feed(const std::string& json_text);
  std::uint64_t malformed_outage_entries() const;
  std::vector<OutageWindow> outages() const;

  std::vector<AlertInstance> instances() const;
  std::uint64_t rule_eval_errors() const;
  const EngineConfig& config() const { return config_; }

  /// Pending deliveries with backoff are retried here (base 10 s,
  /// cap 10 min); called by tick.
  void process_retries(Timestamp now);

 private:
  struct GroupState {
    Timestamp first_seen;
    Timestamp last_notified;
    bool notified_once = false;
    std::string last_content;
  };

  struct PendingDelivery {
    Notification notification;
    int attempts = 0;
    Timestamp next_attempt;
  };

  void dispatch(const Notification& notification, Timestamp now);
  bool deliver(const Notification& notification);
  const Receiver* receiver_by_name(const std::string& name) const;

  tsdb::Store& store_;
  EngineConfig config_;

  mutable std::mutex mutex_;
  std::map<std::string, AlertInstance> instances_;   // fingerprint ->
  std::map<std::string, Timestamp> breach_started_;  // fingerprint -> first breach
  std::map<std::string, GroupState> groups_;
  std::vector<OutageWindow> outages_;
  std::uint64_t malformed_outages_ = 0;
  std::uint64_t eval_errors_ = 0;
  std::uint64_t next_silence_id_ = 1;
  std::deque<PendingDelivery> retry_queue_;
};

/// $value / $labels.<tag> substitution used for annotations.
std::string render_template(const std::string& text, double value, const TagSet& labels);

}  // namespace minimon::alerting
