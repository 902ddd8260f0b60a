#include "minimon/alerting.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <regex>

#define CPPHTTPLIB_NO_EXCEPTIONS 0
#include <httplib.h>

namespace minimon::alerting {

const char* comparator_name(Comparator c) {
  switch (c) {
    case Comparator::GT: return ">";
    case Comparator::LT: return "<";
    case Comparator::GE: return ">=";
    case Comparator::LE: return "<=";
  }
  return "?";
}

std::optional<Comparator> comparator_from_name(std::string_view name) {
  if (name == ">") return Comparator::GT;
  if (name == "<") return Comparator::LT;
  if (name == ">=") return Comparator::GE;
  if (name == "<=") return Comparator::LE;
  return std::nullopt;
}

const char* alert_state_name(AlertState s) {
  switch (s) {
    case AlertState::PENDING: return "pending";
    case AlertState::FIRING: return "firing";
    case AlertState::RESOLVED: return "resolved";
  }
  return "?";
}

const char* suppress_kind_name(SuppressKind k) {
  switch (k) {
    case SuppressKind::NONE: return "none";
    case SuppressKind::SILENCE: return "silence";
    case SuppressKind::INHIBITION: return "inhibition";
    case SuppressKind::OUTAGE: return "outage";
  }
  return "?";
}

std::string AlertInstance::fingerprint() const {
  SeriesKey key{rule, labels};
  return key.canonical();
}

bool LabelMatcher::matches(const TagSet& labels) const {
  std::string actual = labels.get_or_empty(tag);
  if (!regex) return actual == value;
  std::regex re(value, std::regex::ECMAScript);
  return std::regex_match(actual, re);
}

bool matchers_match(const std::vector<LabelMatcher>& matchers, const TagSet& labels) {
  for (const LabelMatcher& m : matchers)
    if (!m.matches(labels)) return false;
  return true;
}

std::string render_template(const std::string& text, double value, const TagSet& labels) {
  std::string out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    if (text[pos] != '$') {
      out.push_back(text[pos++]);
      continue;
    }
    if (text.compare(pos, 6, "$value") == 0) {
      char buf[64];
      std::snprintf(buf, sizeof(buf), "%g", value);
      out += buf;
      pos += 6;
      continue;
    }
    if (text.compare(pos, 8, "$labels.") == 0) {
      std::size_t start = pos + 8;
      std::size_t end = start;
      while (end < text.size() &&
             (text[end] == '_' || std::isalnum(static_cast<unsigned char>(text[end]))))
        ++end;
      out += labels.get_or_empty(text.substr(start, end - start));
      pos = end;
      continue;
    }
    out.push_back(text[pos++]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Config parsing

namespace {

std::vector<LabelMatcher> matchers_from_json(const Json& j, std::vector<std::string>& errors,
                                             const std::string& where) {
  std::vector<LabelMatcher> out;
  if (!j.is_array()) {
    errors.push_back(where + ": matchers must be an array");
    return out;
  }
  for (const Json& mj : j) {
    if (!mj.is_object() || !mj.contains("tag") || !mj.contains("value")) {
      errors.push_back(where + ": matcher needs tag and value");
      continue;
    }
    LabelMatcher m;
    m.tag = mj["tag"].get<std::string>();
    m.value = mj["value"].get<std::string>();
    std::string op = mj.value("op", "=");
    m.regex = (op == "=~");
    if (op != "=" && op != "=~") {
      errors.push_back(where + ": matcher op must be = or =~");
      continue;
    }
    if (m.regex) {
      try {
        std::regex probe(m.value);
      } catch (const std::regex_error&) {
        errors.push_back(where + ": invalid regex '" + m.value + "'");
        continue;
      }
    }
    out.push_back(std::move(m));
  }
  return out;
}

Json matchers_to_json(const std::vector<LabelMatcher>& matchers) {
  Json out = Json::array();
  for (const LabelMatcher& m : matchers) {
    Json mj;
    mj["tag"] = m.tag;
    mj["op"] = m.regex ? "=~" : "=";
    mj["value"] = m.value;
    out.push_back(std::move(mj));
  }
  return out;
}

std::optional<std::int64_t> duration_from_json(const Json& j) {
  if (j.is_number_integer()) return j.get<std::int64_t>() * 1000;  // bare seconds
  if (!j.is_string()) return std::nullopt;
  std::string text = j.get<std::string>();
  if (text.empty()) return std::nullopt;
  char unit = text.back();
  std::int64_t scale;
  switch (unit) {
    case 's': scale = kMillisPerSecond; break;
    case 'm': scale = kMillisPerMinute; break;
    case 'h': scale = kMillisPerHour; break;
    case 'd': scale = kMillisPerDay; break;
    default: return std::nullopt;
  }
  try {
    return std::stoll(text.substr(0, text.size() - 1)) * scale;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

}  // namespace

ConfigParse parse_engine_config(const Json& j) {
  ConfigParse result;
  if (!j.is_object()) {
    result.errors.push_back("config must be a JSON object");
    return result;
  }
  EngineConfig config;

  if (j.contains("rules")) {
    for (const Json& rj : j["rules"]) {
      AlertRule rule;
      rule.name = rj.value("name", "");
      rule.query = rj.value("query", "");
      if (rule.name.empty() || rule.query.empty()) {
        result.errors.push_back("rule needs name and query");
        continue;
      }
      auto cmp = comparator_from_name(rj.value("comparator", ">"));
      if (!cmp.has_value()) {
        result.errors.push_back("rule " + rule.name + ": bad comparator");
        continue;
      }
      rule.comparator = *cmp;
      if (!rj.contains("threshold") || !rj["threshold"].is_number()) {
        result.errors.push_back("rule " + rule.name + ": threshold must be a number");
        continue;
      }
      rule.threshold = rj["threshold"].get<double>();
      if (rj.contains("for")) {
        auto d = duration_from_json(rj["for"]);
        if (!d.has_value() || *d < 0) {
          result.errors.push_back("rule " + rule.name + ": bad for duration");
          continue;
        }
        rule.for_ms = *d;
      }
      auto parsed = query::parse_query(rule.query);
      if (!parsed.ok()) {
        result.errors.push_back("rule " + rule.name + ": " + parsed.error->to_string());
        continue;
      }
      if (rj.contains("labels") && rj["labels"].is_object()) {
        for (const auto& [tag, value] : rj["labels"].items())
          if (value.is_string()) rule.labels.set(tag, value.get<std::string>());
      }
      if (rj.contains("annotations") && rj["annotations"].is_object()) {
        for (const auto& [key, value] : rj["annotations"].items())
          if (value.is_string()) rule.annotations[key] = value.get<std::string>();
      }
      for (const AlertRule& existing : config.rules) {
        if (existing.name == rule.name)
          result.errors.push_back("duplicate rule name " + rule.name);
      }
      config.rules.push_back(std::move(rule));
    }
  }

  if (j.contains("route") && j["route"].is_object()) {
    const Json& rj = j["route"];
    if (rj.contains("group_by")) config.route.group_by = rj["group_by"].get<std::vector<std::string>>();
    if (rj.contains("group_wait")) {
      auto d = duration_from_json(rj["group_wait"]);
      if (d.has_value()) config.route.group_wait_ms = *d;
    }
    if (rj.contains("group_interval")) {
      auto d = duration_from_json(rj["group_interval"]);
      if (d.has_value()) config.route.group_interval_ms = *d;
    }
    if (rj.contains("repeat_interval")) {
      auto d = duration_from_json(rj["repeat_interval"]);
      if (d.has_value()) config.route.repeat_interval_ms = *d;
    }
    config.route.receiver = rj.value("receiver", "default");
    config.route.annotate_only_outages = rj.value("annotate_only_outages", false);
    if (!(config.route.group_wait_ms <= config.route.group_interval_ms &&
          config.route.group_interval_ms <= config.route.repeat_interval_ms))
      result.errors.push_back("route: need group_wait <= group_interval <= repeat_interval");
  }

  if (j.contains("receivers")) {
    for (const Json& rj : j["receivers"]) {
      Receiver receiver;
      receiver.name = rj.value("name", "");
      std::string kind = rj.value("kind", "stdout");
      if (kind == "file")
        receiver.kind = ReceiverKind::FILE;
      else if (kind == "webhook")
        receiver.kind = ReceiverKind::WEBHOOK;
      else if (kind == "stdout")
        receiver.kind = ReceiverKind::STDOUT_;
      else {
        result.errors.push_back("receiver " + receiver.name + ": unknown kind " + kind);
        continue;
      }
      receiver.destination = rj.value("destination", "");
      if (receiver.name.empty()) {
        result.errors.push_back("receiver needs a name");
        continue;
      }
      for (const Receiver& existing : config.receivers)
        if (existing.name == receiver.name)
          result.errors.push_back("duplicate receiver name " + receiver.name);
      config.receivers.push_back(std::move(receiver));
    }
  }

  if (j.contains("inhibit_rules")) {
    for (const Json& ij : j["inhibit_rules"]) {
      InhibitRule rule;
      rule.source_matchers = matchers_from_json(ij.value("source_matchers", Json::array()),
                                                result.errors, "inhibit source");
      rule.target_matchers = matchers_from_json(ij.value("target_matchers", Json::array()),
                                                result.errors, "inhibit target");
      if (ij.contains("equal")) rule.equal_labels = ij["equal"].get<std::vector<std::string>>();
      if (rule.equal_labels.empty()) {
        result.errors.push_back("inhibit rule needs non-empty equal labels");
        continue;
      }
      config.inhibit_rules.push_back(std::move(rule));
    }
  }

  if (j.contains("silences")) {
    for (const Json& sj : j["silences"]) {
      Silence silence;
      silence.id = sj.value("id", "");
      silence.matchers = matchers_from_json(sj.value("matchers", Json::array()), result.errors,
                                            "silence");
      silence.starts_at = Timestamp{sj.value("starts_at", 0ll)};
      silence.ends_at = Timestamp{sj.value("ends_at", 0ll)};
      silence.creator = sj.value("creator", "");
      silence.comment = sj.value("comment", "");
      if (!(silence.starts_at < silence.ends_at)) {
        result.errors.push_back("silence must have starts_at < ends_at");
        continue;
      }
      config.silences.push_back(std::move(silence));
    }
  }

  config.outage_feed = j.value("outage_feed", "");
  if (j.contains("outage_poll")) {
    auto d = duration_from_json(j["outage_poll"]);
    if (d.has_value()) config.outage_poll_ms = *d;
  }
  if (j.contains("eval_interval")) {
    auto d = duration_from_json(j["eval_interval"]);
    if (d.has_value()) config.eval_interval_ms = *d;
  }

  if (result.errors.empty()) result.config = std::move(config);
  return result;
}

Json engine_config_to_json(const EngineConfig& config) {
  Json j;
  Json rules = Json::array();
  for (const AlertRule& rule : config.rules) {
    Json rj;
    rj["name"] = rule.name;
    rj["query"] = rule.query;
    rj["comparator"] = comparator_name(rule.comparator);
    rj["threshold"] = rule.threshold;
    rj["for"] = std::to_string(rule.for_ms / 1000) + "s";
    Json labels = Json::object();
    for (const auto& [tag, value] : rule.labels) labels[tag] = value;
    rj["labels"] = std::move(labels);
    Json annotations = Json::object();
    for (const auto& [key, value] : rule.annotations) annotations[key] = value;
    rj["annotations"] = std::move(annotations);
    rules.push_back(std::move(rj));
  }
  j["rules"] = std::move(rules);
  Json route;
  route["group_by"] = config.route.group_by;
  route["group_wait"] = std::to_string(config.route.group_wait_ms / 1000) + "s";
  route["group_interval"] = std::to_string(config.route.group_interval_ms / 1000) + "s";
  route["repeat_interval"] = std::to_string(config.route.repeat_interval_ms / 1000) + "s";
  route["receiver"] = config.route.receiver;
  route["annotate_only_outages"] = config.route.annotate_only_outages;
  j["route"] = std::move(route);
  Json receivers = Json::array();
  for (const Receiver& receiver : config.receivers) {
    Json rj;
    rj["name"] = receiver.name;
    rj["kind"] = receiver.kind == ReceiverKind::FILE      ? "file"
                 : receiver.kind == ReceiverKind::WEBHOOK ? "webhook"
                                                          : "stdout";
    rj["destination"] = receiver.destination;
    receivers.push_back(std::move(rj));
  }
  j["receivers"] = std::move(receivers);
  Json inhibits = Json::array();
  for (const InhibitRule& rule : config.inhibit_rules) {
    Json ij;
    ij["source_matchers"] = matchers_to_json(rule.source_matchers);
    ij["target_matchers"] = matchers_to_json(rule.target_matchers);
    ij["equal"] = rule.equal_labels;
    inhibits.push_back(std::move(ij));
  }
  j["inhibit_rules"] = std::move(inhibits);
  j["outage_feed"] = config.outage_feed;
  return j;
}

// ---------------------------------------------------------------------------
// Engine

Engine::Engine(tsdb::Store& store, EngineConfig config)
    : store_(store), config_(std::move(config)) {
  for (Silence& silence : config_.silences) {
    if (silence.id.empty()) silence.id = "cfg-" + std::to_string(next_silence_id_++);
  }
}

void Engine::reload(EngineConfig config) {
  std::lock_guard lock(mutex_);
  // Runtime silences (added via the API) survive a reload.
  std::vector<Silence> runtime;
  for (const Silence& s : config_.silences)
    if (s.id.rfind("rt-", 0) == 0) runtime.push_back(s);
  config_ = std::move(config);
  for (Silence& silence : config_.silences)
    if (silence.id.empty()) silence.id = "cfg-" + std::to_string(next_silence_id_++);
  for (Silence& silence : runtime) config_.silences.push_back(std::move(silence));
}

std::vector<StateChange> Engine::evaluate_rules(Timestamp now) {
  std::vector<StateChange> changes;
  std::lock_guard lock(mutex_);

  std::set<std::string> breaching_now;
  for (const AlertRule& rule : config_.rules) {
    auto parsed = query::parse_query(rule.query);
    if (!parsed.ok()) {
      ++eval_errors_;
      continue;
    }
    query::Matrix matrix;
    try {
      matrix = query::eval(store_, *parsed.ast, now, now, 1);
    } catch (const std::exception&) {
      ++eval_errors_;
      continue;  // existing instances untouched
    }

    for (const auto& series : matrix) {
      if (series.points.empty()) continue;
      double value = series.points.back().second;
      bool breach = false;
      switch (rule.comparator) {
        case Comparator::GT: breach = value > rule.threshold; break;
        case Comparator::LT: breach = value < rule.threshold; break;
        case Comparator::GE: breach = value >= rule.threshold; break;
        case Comparator::LE: breach = value <= rule.threshold; break;
      }
      if (!breach) continue;

      TagSet labels = series.key.tags;
      for (const auto& [tag, tag_value] : rule.labels) labels.set(tag, tag_value);
      labels.set("alertname", rule.name);

      AlertInstance instance;
      instance.rule = rule.name;
      instance.labels = labels;
      std::string fp = instance.fingerprint();
      breaching_now.insert(fp);

      auto it = instances_.find(fp);
      if (it == instances_.end() || it->second.state == AlertState::RESOLVED) {
        instance.state = AlertState::PENDING;
        instance.started_at = now;
        instance.value = value;
        breach_started_[fp] = now;
        if (rule.for_ms == 0) {
          instance.state = AlertState::FIRING;
          instance.fired_at = now;
          changes.push_back({fp, AlertState::PENDING, AlertState::FIRING});
        } else {
          changes.push_back({fp, AlertState::PENDING, AlertState::PENDING});
        }
        for (const auto& [key, tmpl] : rule.annotations)
          instance.annotations[key] = render_template(tmpl, value, labels);
        instances_[fp] = std::move(instance);
      } else {
        AlertInstance& existing = it->second;
        existing.value = value;
        for (const auto& [key, tmpl] : rule.annotations)
          existing.annotations[key] = render_template(tmpl, value, labels);
        if (existing.state == AlertState::PENDING &&
            now - breach_started_[fp] >= rule.for_ms) {
          existing.state = AlertState::FIRING;
          existing.fired_at = now;
          changes.push_back({fp, AlertState::PENDING, AlertState::FIRING});
        }
      }
    }
  }

  // Anything previously breaching that no longer is resolves.
  for (auto& [fp, instance] : instances_) {
    if (instance.state == AlertState::RESOLVED) continue;
    if (breaching_now.count(fp)) continue;
    AlertState from = instance.state;
    instance.state = AlertState::RESOLVED;
    instance.resolved_at = now;
    breach_started_.erase(fp);
    changes.push_back({fp, from, AlertState::RESOLVED});
  }

  // Suppression is recomputed from scratch each tick by the apply_* passes.
  for (auto& [fp, instance] : instances_) {
    instance.suppressed_by = SuppressKind::NONE;
    instance.suppress_ref.clear();
  }
  return changes;
}

void Engine::apply_silences(Timestamp now) {
  std::lock_guard lock(mutex_);
  for (auto& [fp, instance] : instances_) {
    if (instance.state != AlertState::FIRING) continue;
    if (instance.suppressed_by != SuppressKind::NONE) continue;
    for (const Silence& silence : config_.silences) {
      if (!silence.active_at(now)) continue;
      if (matchers_match(silence.matchers, instance.labels)) {
        instance.suppressed_by = SuppressKind::SILENCE;
        instance.suppress_ref = silence.id;
        break;
      }
    }
  }
}

void Engine::apply_inhibition() {
  std::lock_guard lock(mutex_);
  // Candidates: firing and not already suppressed (silence/outage).
  // A source only inhibits when no other candidate inhibits it first, so
  // suppression never cascades through an inhibited source.
  std::vector<const AlertInstance*> candidates;
  for (const auto& [fp, instance] : instances_) {
    if (instance.state == AlertState::FIRING && instance.suppressed_by == SuppressKind::NONE)
      candidates.push_back(&instance);
  }

  auto inhibits = [&](const AlertInstance& source, const AlertInstance& target) {
    if (&source == &target) return false;
    for (const InhibitRule& rule : config_.inhibit_rules) {
      if (!matchers_match(rule.source_matchers, source.labels)) continue;
      if (!matchers_match(rule.target_matchers, target.labels)) continue;
      bool equal = true;
      for (const std::string& tag : rule.equal_labels) {
        if (source.labels.get_or_empty(tag) != target.labels.get_or_empty(tag)) {
          equal = false;
          break;
        }
      }
      if (equal) return true;
    }
    return false;
  };

  std::vector<const AlertInstance*> primary_sources;
  for (const AlertInstance* source : candidates) {
    bool inhibited = false;
    for (const AlertInstance* other : candidates) {
      if (inhibits(*other, *source)) {
        inhibited = true;
        break;
      }
    }
    if (!inhibited) primary_sources.push_back(source);
  }

  for (auto& [fp, instance] : instances_) {
    if (instance.state != AlertState::FIRING) continue;
    if (instance.suppressed_by != SuppressKind::NONE) continue;
    for (const AlertInstance* source : primary_sources) {
      if (inhibits(*source, instance)) {
        instance.suppressed_by = SuppressKind::INHIBITION;
        instance.suppress_ref = source->fingerprint();
        break;
      }
    }
  }
}

void Engine::correlate_outages(Timestamp now) {
  std::lock_guard lock(mutex_);
  for (auto& [fp, instance] : instances_) {
    if (instance.state != AlertState::FIRING) continue;
    for (const OutageWindow& outage : outages_) {
      if (!(outage.starts_at <= now && now < outage.ends_at)) continue;  // end-exclusive
      if (!matchers_match(outage.matchers, instance.labels)) continue;
      instance.annotations["known_outage"] = outage.ticket_id;
      if (!config_.route.annotate_only_outages && instance.suppressed_by == SuppressKind::NONE) {
        instance.suppressed_by = SuppressKind::OUTAGE;
        instance.suppress_ref = outage.ticket_id;
      }
      break;
    }
  }
}

std::vector<Notification> Engine::route_and_notify(Timestamp now) {
  std::vector<Notification> emitted;
  std::lock_guard lock(mutex_);

  // Bucket notifiable instances by the group_by value tuple.
  struct GroupContent {
    std::vector<const AlertInstance*> members;
    TagSet group_labels;
  };
  std::map<std::string, GroupContent> buckets;
  for (const auto& [fp, instance] : instances_) {
    bool notifiable = false;
    if (instance.state == AlertState::FIRING && instance.suppressed_by == SuppressKind::NONE)
      notifiable = true;
    if (instance.state == AlertState::RESOLVED) notifiable = true;
    if (!notifiable) continue;

    TagSet group_labels;
    for (const std::string& tag : config_.route.group_by)
      group_labels.set(tag, instance.labels.get_or_empty(tag));
    std::string group_key = SeriesKey{"group", group_labels}.canonical();
    buckets[group_key].members.push_back(&instance);
    buckets[group_key].group_labels = group_labels;
  }

  std::vector<std::string> resolved_now;
  for (auto& [group_key, content] : buckets) {
    GroupState& state = groups_[group_key];
    if (state.first_seen.ms == 0) state.first_seen = now;

    std::sort(content.members.begin(), content.members.end(),
              [](const AlertInstance* a, const AlertInstance* b) {
                return a->fingerprint() < b->fingerprint();
              });

    Json alerts = Json::array();
    bool any_firing = false;
    std::string content_token;
    for (const AlertInstance* instance : content.members) {
      Json aj;
      Json labels = Json::object();
      for (const auto& [tag, value] : instance->labels) labels[tag] = value;
      aj["labels"] = std::move(labels);
      Json annotations = Json::object();
      for (const auto& [key, value] : instance->annotations) annotations[key] = value;
      aj["annotations"] = std::move(annotations);
      aj["value"] = instance->value;
      aj["state"] = alert_state_name(instance->state);
      aj["started_at"] = instance->started_at.ms;
      alerts.push_back(std::move(aj));
      if (instance->state == AlertState::FIRING) any_firing = true;
      content_token += instance->fingerprint() + "|" + alert_state_name(instance->state) + ";";
    }

    bool due;
    if (!state.notified_once) {
      due = now - state.first_seen >= config_.route.group_wait_ms;
    } else if (content_token != state.last_content) {
      due = now - state.last_notified >= config_.route.group_interval_ms;
    } else {
      due = now - state.last_notified >= config_.route.repeat_interval_ms;
    }
    if (!due) continue;

    Notification notification;
    notification.at = now;
    notification.group_key = group_key;
    notification.receiver = config_.route.receiver;
    notification.status = any_firing ? "firing" : "resolved";
    Json group_labels = Json::object();
    for (const auto& [tag, value] : content.group_labels) group_labels[tag] = value;
    Json payload;
    payload["group_labels"] = std::move(group_labels);
    payload["status"] = notification.status;
    payload["alerts"] = std::move(alerts);
    payload["at"] = now.ms;
    notification.payload = std::move(payload);
    notification.rendered = notification.payload.dump();
    emitted.push_back(notification);

    state.notified_once = true;
    state.last_notified = now;
    state.last_content = content_token;

    for (const AlertInstance* instance : content.members) {
      if (instance->state == AlertState::RESOLVED) resolved_now.push_back(instance->fingerprint());
    }
  }

  // Resolved instances leave the table once reported.
  for (const std::string& fp : resolved_now) instances_.erase(fp);

  // Groups with no notifiable members age out.
  for (auto it = groups_.begin(); it != groups_.end();) {
    if (buckets.count(it->first) == 0)
      it = groups_.erase(it);
    else
      ++it;
  }
  return emitted;
}

std::vector<Notification> Engine::tick(Timestamp now) {
  evaluate_rules(now);
  apply_silences(now);
  apply_inhibition();
  correlate_outages(now);
  std::vector<Notification> notifications = route_and_notify(now);
  for (const Notification& notification : notifications) dispatch(notification, now);
  process_retries(now);
  return notifications;
}

const Receiver* Engine::receiver_by_name(const std::string& name) const {
  for (const Receiver& receiver : config_.receivers)
    if (receiver.name == name) return &receiver;
  return nullptr;
}

bool Engine::deliver(const Notification& notification) {
  const Receiver* receiver = receiver_by_name(notification.receiver);
  if (receiver == nullptr) return true;  // nothing configured, drop silently
  switch (receiver->kind) {
    case ReceiverKind::STDOUT_:
      std::cout << notification.rendered << "\n";
      return true;
    case ReceiverKind::FILE: {
      std::ofstream out(receiver->destination, std::ios::app);
      if (!out) return false;
      out << notification.rendered << "\n";
      return static_cast<bool>(out);
    }
    case ReceiverKind::WEBHOOK: {
      std::string url = receiver->destination;
      std::string host_port = url;
      std::string path = "/";
      if (host_port.rfind("http://", 0) == 0) host_port = host_port.substr(7);
      auto slash = host_port.find('/');
      if (slash != std::string::npos) {
        path = host_port.substr(slash);
        host_port = host_port.substr(0, slash);
      }
      httplib::Client client(("http://" + host_port).c_str());
      client.set_connection_timeout(2, 0);
      auto response = client.Post(path.c_str(), notification.rendered, "application/json");
      return response && response->status >= 200 && response->status < 300;
    }
  }
  return false;
}

void Engine::dispatch(const Notification& notification, Timestamp now) {
  if (deliver(notification)) return;
  std::lock_guard lock(mutex_);
  PendingDelivery pending;
  pending.notification = notification;
  pending.attempts = 1;
  pending.next_attempt = now + 10 * kMillisPerSecond;
  retry_queue_.push_back(std::move(pending));
}

void Engine::process_retries(Timestamp now) {
  std::deque<PendingDelivery> due;
  {
    std::lock_guard lock(mutex_);
    for (auto it = retry_queue_.begin(); it != retry_queue_.end();) {
      if (it->next_attempt <= now) {
        due.push_back(std::move(*it));
        it = retry_queue_.erase(it);
      } else {
        ++it;
      }
    }
  }
  for (PendingDelivery& pending : due) {
    if (deliver(pending.notification)) continue;
    ++pending.attempts;
    std::int64_t backoff = 10 * kMillisPerSecond;
    for (int i = 1; i < pending.attempts && backoff < 10 * kMillisPerMinute; ++i) backoff *= 2;
    backoff = std::min<std::int64_t>(backoff, 10 * kMillisPerMinute);
    pending.next_attempt = now + backoff;
    std::lock_guard lock(mutex_);
    retry_queue_.push_back(std::move(pending));
  }
}

std::string Engine::add_silence(Silence silence) {
  std::lock_guard lock(mutex_);
  if (silence.id.empty()) silence.id = "rt-" + std::to_string(next_silence_id_++);
  std::string id = silence.id;
  config_.silences.push_back(std::move(silence));
  return id;
}

bool Engine::remove_silence(const std::string& id) {
  std::lock_guard lock(mutex_);
  auto before = config_.silences.size();
  std::erase_if(config_.silences, [&](const Silence& s) { return s.id == id; });
  return config_.silences.size() != before;
}

std::vector<Silence> Engine::silences() const {
  std::lock_guard lock(mutex_);
  return config_.silences;
}

void Engine::set_outages(std::vector<OutageWindow> outages) {
  std::lock_guard lock(mutex_);
  outages_ = std::move(outages);
}

std::size_t Engine::load_outage_feed(const std::string& json_text) {
  Json j = Json::parse(json_text, nullptr, false);
  std::vector<OutageWindow> parsed;
  std::uint64_t malformed = 0;
  if (!j.is_array()) {
    std::lock_guard lock(mutex_);
    ++malformed_outages_;
    return 0;
  }
  for (const Json& oj : j) {
    if (!oj.is_object() || !oj.contains("matchers") || !oj.contains("starts_at") ||
        !oj.contains("ends_at") || !oj.contains("ticket_id")) {
      ++malformed;
      continue;
    }
    OutageWindow outage;
    outage.source = oj.value("source", "");
    std::vector<std::string> errors;
    outage.matchers = matchers_from_json(oj["matchers"], errors, "outage");
    if (!errors.empty() || !oj["starts_at"].is_number_integer() ||
        !oj["ends_at"].is_number_integer()) {
      ++malformed;
      continue;
    }
    outage.starts_at = Timestamp{oj["starts_at"].get<std::int64_t>()};
    outage.ends_at = Timestamp{oj["ends_at"].get<std::int64_t>()};
    outage.ticket_id = oj["ticket_id"].get<std::string>();
    if (!(outage.starts_at < outage.ends_at)) {
      ++malformed;
      continue;
    }
    parsed.push_back(std::move(outage));
  }
  std::lock_guard lock(mutex_);
  outages_ = std::move(parsed);
  malformed_outages_ += malformed;
  return outages_.size();
}

std::uint64_t Engine::malformed_outage_entries() const {
  std::lock_guard lock(mutex_);
  return malformed_outages_;
}

std::vector<OutageWindow> Engine::outages() const {
  std::lock_guard lock(mutex_);
  return outages_;
}

std::vector<AlertInstance> Engine::instances() const {
  std::lock_guard lock(mutex_);
  std::vector<AlertInstance> out;
  for (const auto& [fp, instance] : instances_) out.push_back(instance);
  return out;
}

std::uint64_t Engine::rule_eval_errors() const {
  std::lock_guard lock(mutex_);
  return eval_errors_;
}

}  // namespace minimon::alerting
