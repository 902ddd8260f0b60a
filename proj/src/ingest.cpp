#include "minimon/ingest.hpp"

#include <fstream>
#include <set>

#define CPPHTTPLIB_NO_EXCEPTIONS 0
#include <httplib.h>

namespace minimon::ingest {

const char* field_type_name(FieldType t) {
  switch (t) {
    case FieldType::Int: return "int";
    case FieldType::Float: return "float";
    case FieldType::String: return "string";
    case FieldType::Bool: return "bool";
  }
  return "?";
}

std::optional<FieldType> field_type_from_name(std::string_view name) {
  if (name == "int") return FieldType::Int;
  if (name == "float") return FieldType::Float;
  if (name == "string") return FieldType::String;
  if (name == "bool") return FieldType::Bool;
  return std::nullopt;
}

const char* reason_name(Reason r) {
  switch (r) {
    case Reason::RESERVED_FIELD: return "RESERVED_FIELD";
    case Reason::TYPE_MISMATCH: return "TYPE_MISMATCH";
    case Reason::MISSING_REQUIRED: return "MISSING_REQUIRED";
    case Reason::UNKNOWN_PRODUCER: return "UNKNOWN_PRODUCER";
    case Reason::TIMESTAMP_SKEW: return "TIMESTAMP_SKEW";
    case Reason::QUOTA_EXCEEDED: return "QUOTA_EXCEEDED";
    case Reason::MALFORMED: return "MALFORMED";
  }
  return "?";
}

std::optional<std::string> SchemaDef::check() const {
  if (!validate_name(producer)) return "invalid producer name '" + producer + "'";
  if (!validate_name(doc_type)) return "invalid doc_type '" + doc_type + "'";
  if (fields.empty()) return "schema needs at least one field";
  std::set<std::string> seen;
  for (const FieldDef& f : fields) {
    if (!validate_name(f.name)) return "invalid field name '" + f.name + "'";
    if (is_reserved_field(f.name)) return "field '" + f.name + "' is reserved";
    if (!seen.insert(f.name).second) return "duplicate field '" + f.name + "'";
  }
  return std::nullopt;
}

const FieldDef* SchemaDef::find_field(const std::string& name) const {
  for (const FieldDef& f : fields)
    if (f.name == name) return &f;
  return nullptr;
}

Json SchemaDef::to_json() const {
  Json j;
  j["producer"] = producer;
  j["doc_type"] = doc_type;
  Json fields_json = Json::array();
  for (const FieldDef& f : fields) {
    Json fj;
    fj["name"] = f.name;
    fj["type"] = field_type_name(f.type);
    fj["required"] = f.required;
    fields_json.push_back(std::move(fj));
  }
  j["fields"] = std::move(fields_json);
  return j;
}

std::optional<SchemaDef> SchemaDef::from_json(const Json& j) {
  if (!j.is_object() || !j.contains("fields") || !j["fields"].is_array()) return std::nullopt;
  SchemaDef schema;
  schema.producer = j.value("producer", "");
  schema.doc_type = j.value("doc_type", "");
  for (const Json& fj : j["fields"]) {
    if (!fj.is_object() || !fj.contains("name") || !fj.contains("type")) return std::nullopt;
    FieldDef f;
    f.name = fj["name"].get<std::string>();
    auto type = field_type_from_name(fj["type"].get<std::string>());
    if (!type.has_value()) return std::nullopt;
    f.type = *type;
    f.required = fj.value("required", false);
    schema.fields.push_back(std::move(f));
  }
  return schema;
}

std::optional<std::string> ProducerRegistration::check() const {
  if (auto err = schema.check()) return err;
  if (schema.producer != producer || schema.doc_type != doc_type)
    return "schema producer/doc_type must match the registration";
  if (daily_quota_bytes <= 0) return "daily_quota_bytes must be positive";
  for (const std::string& f : route.tag_fields) {
    const FieldDef* def = schema.find_field(f);
    if (def == nullptr) return "tag field '" + f + "' is not in the schema";
    if (def->type != FieldType::String) return "tag field '" + f + "' must be string typed";
  }
  for (const std::string& f : route.value_fields) {
    const FieldDef* def = schema.find_field(f);
    if (def == nullptr) return "value field '" + f + "' is not in the schema";
    if (def->type != FieldType::Int && def->type != FieldType::Float)
      return "value field '" + f + "' must be numeric";
  }
  return std::nullopt;
}

Json ProducerRegistration::to_json() const {
  Json j;
  j["producer"] = producer;
  j["doc_type"] = doc_type;
  j["schema"] = schema.to_json();
  j["daily_quota_bytes"] = daily_quota_bytes;
  Json route_json;
  route_json["to_docstore"] = route.to_docstore;
  route_json["to_tsdb"] = route.to_tsdb;
  route_json["to_archive"] = route.to_archive;
  route_json["tag_fields"] = route.tag_fields;
  route_json["value_fields"] = route.value_fields;
  j["route"] = std::move(route_json);
  return j;
}

std::optional<ProducerRegistration> ProducerRegistration::from_json(const Json& j) {
  if (!j.is_object() || !j.contains("schema")) return std::nullopt;
  ProducerRegistration reg;
  reg.producer = j.value("producer", "");
  reg.doc_type = j.value("doc_type", "");
  auto schema = SchemaDef::from_json(j["schema"]);
  if (!schema.has_value()) return std::nullopt;
  reg.schema = std::move(*schema);
  if (reg.schema.producer.empty()) reg.schema.producer = reg.producer;
  if (reg.schema.doc_type.empty()) reg.schema.doc_type = reg.doc_type;
  if (!j.contains("daily_quota_bytes") || !j["daily_quota_bytes"].is_number_integer())
    return std::nullopt;
  reg.daily_quota_bytes = j["daily_quota_bytes"].get<std::int64_t>();
  if (j.contains("route") && j["route"].is_object()) {
    const Json& r = j["route"];
    reg.route.to_docstore = r.value("to_docstore", true);
    reg.route.to_tsdb = r.value("to_tsdb", false);
    reg.route.to_archive = r.value("to_archive", true);
    if (r.contains("tag_fields"))
      reg.route.tag_fields = r["tag_fields"].get<std::vector<std::string>>();
    if (r.contains("value_fields"))
      reg.route.value_fields = r["value_fields"].get<std::vector<std::string>>();
  }
  return reg;
}

namespace {

bool type_matches(FieldType declared, const Json& value) {
  switch (declared) {
    case FieldType::Int: return value.is_number_integer();
    case FieldType::Float: return value.is_number();  // int widens to float
    case FieldType::String: return value.is_string();
    case FieldType::Bool: return value.is_boolean();
  }
  return false;
}

}  // namespace

std::optional<ValidationError> validate_document(const Document& doc, const SchemaDef& schema,
                                                 Timestamp now, std::int64_t skew_ms) {
  for (const auto& [name, value] : doc.payload.items()) {
    (void)value;
    if (is_reserved_field(name))
      return ValidationError{0, Reason::RESERVED_FIELD, "payload field '" + name + "' is reserved"};
  }
  for (const FieldDef& f : schema.fields) {
    if (f.required && !doc.payload.contains(f.name))
      return ValidationError{0, Reason::MISSING_REQUIRED, "required field '" + f.name + "' missing"};
  }
  for (const auto& [name, value] : doc.payload.items()) {
    const FieldDef* def = schema.find_field(name);
    if (def == nullptr) continue;  // undeclared fields pass through
    if (!type_matches(def->type, value))
      return ValidationError{0, Reason::TYPE_MISMATCH,
                             "field '" + name + "' is not " + field_type_name(def->type)};
  }
  std::int64_t skew = doc.timestamp - now;
  if (skew < 0) skew = -skew;
  if (skew > skew_ms)
    return ValidationError{0, Reason::TIMESTAMP_SKEW,
                           "timestamp " + std::to_string(doc.timestamp.ms) + " skewed more than " +
                               std::to_string(skew_ms) + "ms from now"};
  return std::nullopt;
}

Registry::Registry(std::filesystem::path file) : file_(std::move(file)) {
  if (!file_.empty() && std::filesystem::exists(file_)) load();
}

std::optional<std::string> Registry::register_producer(const ProducerRegistration& reg,
                                                       bool replace) {
  if (auto err = reg.check()) return err;
  std::lock_guard lock(mutex_);
  auto key = std::make_pair(reg.producer, reg.doc_type);
  if (!replace && entries_.count(key))
    return "producer '" + reg.producer + "' doc_type '" + reg.doc_type +
           "' already registered (set replace to overwrite)";
  entries_[key] = reg;
  persist();
  return std::nullopt;
}

std::optional<ProducerRegistration> Registry::lookup(const std::string& producer,
                                                     const std::string& doc_type) const {
  std::lock_guard lock(mutex_);
  auto it = entries_.find({producer, doc_type});
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

std::vector<ProducerRegistration> Registry::list() const {
  std::lock_guard lock(mutex_);
  std::vector<ProducerRegistration> out;
  for (const auto& [key, reg] : entries_) out.push_back(reg);
  return out;
}

void Registry::persist() const {
  if (file_.empty()) return;
  Json j = Json::array();
  for (const auto& [key, reg] : entries_) j.push_back(reg.to_json());
  std::filesystem::path tmp = file_;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    out << j.dump(2);
  }
  std::filesystem::rename(tmp, file_);
}

void Registry::load() {
  std::ifstream in(file_);
  Json j = Json::parse(in, nullptr, false);
  if (!j.is_array()) return;
  for (const Json& entry : j) {
    auto reg = ProducerRegistration::from_json(entry);
    if (reg.has_value()) entries_[{reg->producer, reg->doc_type}] = std::move(*reg);
  }
}

Ingestor::Ingestor(Registry& registry, bus::Bus& bus, IngestorOptions options)
    : registry_(registry), bus_(bus), options_(std::move(options)) {
  if (!options_.clock) options_.clock = now_wall;
}

std::vector<DocResult> Ingestor::inject(const std::string& producer, const std::string& doc_type,
                                        const Json& raw_batch, Timestamp now) {
  if (!raw_batch.is_array()) {
    return {DocResult{false, ValidationError{0, Reason::MALFORMED, "body must be a JSON array"}}};
  }
  std::vector<PendingDoc> pending;
  std::size_t index = 0;
  for (const Json& raw : raw_batch) {
    PendingDoc entry;
    entry.doc.producer = producer;
    entry.doc.doc_type = doc_type;
    entry.doc.timestamp = now;
    if (!raw.is_object()) {
      entry.shape_error = ValidationError{index, Reason::MALFORMED, "document must be an object"};
    } else {
      if (raw.contains("timestamp")) {
        if (!raw["timestamp"].is_number_integer() || raw["timestamp"].get<std::int64_t>() < 0) {
          entry.shape_error =
              ValidationError{index, Reason::MALFORMED, "timestamp must be epoch milliseconds"};
        } else {
          entry.doc.timestamp = Timestamp{raw["timestamp"].get<std::int64_t>()};
        }
      }
      if (!entry.shape_error.has_value()) {
        entry.doc.payload = raw.value("payload", Json::object());
      }
    }
    pending.push_back(std::move(entry));
    ++index;
  }
  return run_batch(producer, doc_type, pending, now);
}

std::vector<DocResult> Ingestor::inject_documents(const std::string& producer,
                                                  const std::string& doc_type,
                                                  const std::vector<Document>& batch,
                                                  Timestamp now) {
  std::vector<PendingDoc> pending;
  pending.reserve(batch.size());
  for (const Document& doc : batch) pending.push_back(PendingDoc{doc, std::nullopt});
  return run_batch(producer, doc_type, pending, now);
}

std::vector<DocResult> Ingestor::run_batch(const std::string& producer,
                                           const std::string& doc_type,
                                           const std::vector<PendingDoc>& batch, Timestamp now) {
  std::vector<DocResult> results;
  results.reserve(batch.size());

  auto registration = registry_.lookup(producer, doc_type);
  bool quota_tripped = false;

  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Document& doc = batch[i].doc;
    if (!registration.has_value()) {
      results.push_back(DocResult{
          false, ValidationError{i, Reason::UNKNOWN_PRODUCER,
                                 "no registration for (" + producer + ", " + doc_type + ")"}});
      continue;
    }
    if (quota_tripped) {
      results.push_back(DocResult{
          false, ValidationError{i, Reason::QUOTA_EXCEEDED, "daily quota exhausted earlier in batch"}});
      continue;
    }
    if (batch[i].shape_error.has_value()) {
      ValidationError err = *batch[i].shape_error;
      err.doc_index = i;
      results.push_back(DocResult{false, err});
      continue;
    }
    if (!payload_well_formed(doc.payload)) {
      results.push_back(DocResult{
          false, ValidationError{i, Reason::MALFORMED,
                                 "payload must be a flat object (one nesting level)"}});
      continue;
    }
    auto validation = validate_document(doc, registration->schema, now, options_.timestamp_skew_ms);
    if (validation.has_value()) {
      validation->doc_index = i;
      results.push_back(DocResult{false, validation});
      continue;
    }

    std::string encoded = doc.canonical_encoding();
    std::int64_t size = static_cast<std::int64_t>(encoded.size());
    {
      std::lock_guard lock(mutex_);
      auto key = std::make_pair(producer, doc_type);
      auto& [day_ms, charged] = quota_[key];
      std::int64_t today = day_start(now).ms;
      if (day_ms != today) {
        day_ms = today;
        charged = 0;  // quota resets at UTC midnight
      }
      if (charged + size > registration->daily_quota_bytes) {
        quota_tripped = true;
        results.push_back(DocResult{
            false,
            ValidationError{i, Reason::QUOTA_EXCEEDED,
                            "charging " + std::to_string(size) + " bytes would exceed quota " +
                                std::to_string(registration->daily_quota_bytes)}});
        continue;
      }
      charged += size;
    }

    bus_.publish("docs." + doc_type, encoded);
    results.push_back(DocResult{true, std::nullopt});
  }
  return results;
}

std::int64_t Ingestor::charged_today(const std::string& producer, const std::string& doc_type,
                                     Timestamp now) const {
  std::lock_guard lock(mutex_);
  auto it = quota_.find({producer, doc_type});
  if (it == quota_.end()) return 0;
  if (it->second.first != day_start(now).ms) return 0;
  return it->second.second;
}

const char* target_status_name(TargetStatus s) {
  switch (s) {
    case TargetStatus::NEVER: return "NEVER";
    case TargetStatus::OK: return "OK";
    case TargetStatus::FAIL: return "FAIL";
  }
  return "?";
}

Scraper::Scraper(tsdb::Store& store, std::function<Timestamp()> clock)
    : store_(store), clock_(std::move(clock)) {
  if (!clock_) clock_ = now_wall;
}

std::size_t Scraper::add_target(ScrapeTarget target) {
  std::lock_guard lock(mutex_);
  if (target.interval_ms < kMillisPerSecond) target.interval_ms = kMillisPerSecond;
  targets_.push_back(std::move(target));
  return targets_.size() - 1;
}

std::vector<ScrapeTarget> Scraper::targets() const {
  std::lock_guard lock(mutex_);
  return targets_;
}

std::size_t Scraper::ingest_body(std::size_t index, const std::string& body, Timestamp now,
                                 std::string* error) {
  exposition::ParseResult parsed = exposition::parse(body);
  TagSet static_tags;
  {
    std::lock_guard lock(mutex_);
    if (index >= targets_.size()) {
      if (error) *error = "unknown target";
      return 0;
    }
    static_tags = targets_[index].static_tags;
  }
  if (!parsed.ok()) {
    std::string detail = "parse error at line " + std::to_string(parsed.error->line) + ": " +
                         parsed.error->detail;
    std::lock_guard lock(mutex_);
    targets_[index].last_status = TargetStatus::FAIL;
    targets_[index].last_error = detail;
    targets_[index].last_attempt = now;
    if (error) *error = detail;
    return 0;
  }

  std::size_t written = 0;
  for (const exposition::Sample& sample : parsed.samples) {
    tsdb::MetricPoint point;
    point.key = sample.key;
    for (const auto& [tag, value] : static_tags) point.key.tags.set(tag, value);
    point.value = sample.value;
    point.ts = sample.ts.value_or(now);
    if (store_.write(point).ok()) ++written;
  }
  {
    std::lock_guard lock(mutex_);
    targets_[index].last_status = TargetStatus::OK;
    targets_[index].last_error = std::nullopt;
    targets_[index].last_attempt = now;
    targets_[index].points_written += written;
  }
  return written;
}

std::size_t Scraper::scrape_once(std::size_t index, Timestamp now) {
  std::string url;
  {
    std::lock_guard lock(mutex_);
    if (index >= targets_.size()) return 0;
    url = targets_[index].url;
  }

  // Split http://host:port/path
  std::string host_port = url;
  std::string path = "/metrics";
  if (host_port.rfind("http://", 0) == 0) host_port = host_port.substr(7);
  auto slash = host_port.find('/');
  if (slash != std::string::npos) {
    path = host_port.substr(slash);
    host_port = host_port.substr(0, slash);
  }

  httplib::Client client(("http://" + host_port).c_str());
  client.set_connection_timeout(2, 0);
  client.set_read_timeout(5, 0);
  auto response = client.Get(path.c_str());
  if (!response || response->status != 200) {
    std::string detail = !response ? "unreachable: " + httplib::to_string(response.error())
                                   : "http status " + std::to_string(response->status);
    std::lock_guard lock(mutex_);
    targets_[index].last_status = TargetStatus::FAIL;
    targets_[index].last_error = detail;
    targets_[index].last_attempt = now;
    return 0;
  }
  return ingest_body(index, response->body, now, nullptr);
}

std::size_t Scraper::scrape_due(Timestamp now) {
  std::vector<std::size_t> due;
  {
    std::lock_guard lock(mutex_);
    for (std::size_t i = 0; i < targets_.size(); ++i) {
      const ScrapeTarget& t = targets_[i];
      if (t.last_status == TargetStatus::NEVER || now - t.last_attempt >= t.interval_ms)
        due.push_back(i);
    }
  }
  std::size_t total = 0;
  for (std::size_t i : due) total += scrape_once(i, now);
  return total;
}

PushGateway::PushGateway(tsdb::Store& store) : store_(store) {}

PushResult PushGateway::push(const std::string& job, const std::string& body, Timestamp now) {
  if (!validate_name(job)) return {false, 0, "invalid job name '" + job + "'"};
  exposition::ParseResult parsed = exposition::parse(body);
  if (!parsed.ok()) {
    return {false, 0,
            "parse error at line " + std::to_string(parsed.error->line) + ": " +
                parsed.error->detail};
  }

  std::size_t written = 0;
  for (exposition::Sample& sample : parsed.samples) {
    sample.key.tags.set("job", job);  // forced, overrides any body tag
    tsdb::MetricPoint point{sample.key, sample.value, sample.ts.value_or(now)};
    if (store_.write(point).ok()) ++written;
  }
  {
    std::lock_guard lock(mutex_);
    groups_[job] = std::move(parsed.samples);  // last write wins
  }
  return {true, written, ""};
}

std::optional<std::vector<exposition::Sample>> PushGateway::group(const std::string& job) const {
  std::lock_guard lock(mutex_);
  auto it = groups_.find(job);
  if (it == groups_.end()) return std::nullopt;
  return it->second;
}

std::vector<std::string> PushGateway::jobs() const {
  std::lock_guard lock(mutex_);
  std::vector<std::string> out;
  for (const auto& [job, group] : groups_) out.push_back(job);
  return out;
}

}  // namespace minimon::ingest
