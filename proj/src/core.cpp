#include "minimon/core.hpp"

#include <chrono>
#include <cstdio>
#include <stdexcept>

namespace minimon {

Timestamp now_wall() {
  auto now = std::chrono::system_clock::now().time_since_epoch();
  return Timestamp{std::chrono::duration_cast<std::chrono::milliseconds>(now).count()};
}

namespace {

struct CivilDate {
  int year;
  unsigned month;
  unsigned day;
};

// Days-from-civil / civil-from-days (Howard Hinnant's algorithms).
std::int64_t days_from_civil(int y, unsigned m, unsigned d) {
  y -= m <= 2;
  const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
  const unsigned yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

CivilDate civil_from_days(std::int64_t z) {
  z += 719468;
  const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
  const unsigned doe = static_cast<unsigned>(z - era * 146097);
  const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
  const std::int64_t y = static_cast<std::int64_t>(yoe) + era * 400;
  const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
  const unsigned mp = (5 * doy + 2) / 153;
  const unsigned d = doy - (153 * mp + 2) / 5 + 1;
  const unsigned m = mp + (mp < 10 ? 3 : -9);
  return CivilDate{static_cast<int>(y + (m <= 2)), m, d};
}

std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  std::int64_t q = a / b;
  if ((a % b) != 0 && ((a < 0) != (b < 0))) --q;
  return q;
}

std::int64_t positive_mod(std::int64_t a, std::int64_t b) {
  std::int64_t r = a % b;
  return r < 0 ? r + b : r;
}

}  // namespace

std::string format_iso8601(Timestamp ts) {
  std::int64_t days = floor_div(ts.ms, kMillisPerDay);
  std::int64_t rem = positive_mod(ts.ms, kMillisPerDay);
  CivilDate date = civil_from_days(days);
  int hour = static_cast<int>(rem / kMillisPerHour);
  int minute = static_cast<int>((rem / kMillisPerMinute) % 60);
  int second = static_cast<int>((rem / kMillisPerSecond) % 60);
  int millis = static_cast<int>(rem % 1000);
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%04d-%02u-%02uT%02d:%02d:%02d.%03dZ", date.year, date.month,
                date.day, hour, minute, second, millis);
  return buf;
}

std::optional<Timestamp> parse_iso8601(std::string_view text) {
  if (text.empty()) return std::nullopt;
  bool all_digits = true;
  for (char c : text)
    if (c < '0' || c > '9') {
      all_digits = false;
      break;
    }
  if (all_digits) {
    try {
      return Timestamp{std::stoll(std::string(text))};
    } catch (const std::exception&) {
      return std::nullopt;
    }
  }
  int year, hour = 0, minute = 0;
  unsigned month, day;
  double second = 0.0;
  char zone = '\0';
  std::string s(text);
  int matched =
      std::sscanf(s.c_str(), "%d-%u-%uT%d:%d:%lf%c", &year, &month, &day, &hour, &minute, &second, &zone);
  if (matched < 3) return std::nullopt;
  if (matched >= 7 && zone != 'Z') return std::nullopt;
  if (month < 1 || month > 12 || day < 1 || day > 31) return std::nullopt;
  if (hour < 0 || hour > 23 || minute < 0 || minute > 59 || second < 0.0 || second >= 61.0)
    return std::nullopt;
  std::int64_t ms = days_from_civil(year, month, day) * kMillisPerDay + hour * kMillisPerHour +
                    minute * kMillisPerMinute + static_cast<std::int64_t>(second * 1000.0 + 0.5);
  return Timestamp{ms};
}

std::string format_day(Timestamp ts) {
  CivilDate date = civil_from_days(floor_div(ts.ms, kMillisPerDay));
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%04d.%02u.%02u", date.year, date.month, date.day);
  return buf;
}

std::optional<Timestamp> parse_day(std::string_view text) {
  int year;
  unsigned month, day;
  std::string s(text);
  if (std::sscanf(s.c_str(), "%d.%u.%u", &year, &month, &day) != 3 &&
      std::sscanf(s.c_str(), "%d-%u-%u", &year, &month, &day) != 3)
    return std::nullopt;
  if (month < 1 || month > 12 || day < 1 || day > 31) return std::nullopt;
  return Timestamp{days_from_civil(year, month, day) * kMillisPerDay};
}

Timestamp day_start(Timestamp ts) {
  return Timestamp{floor_div(ts.ms, kMillisPerDay) * kMillisPerDay};
}

const char* resolution_name(Resolution res) {
  switch (res) {
    case Resolution::RAW: return "raw";
    case Resolution::M12: return "m12";
    case Resolution::H1: return "h1";
    case Resolution::D1: return "d1";
    case Resolution::D7: return "d7";
    case Resolution::D30: return "d30";
  }
  return "?";
}

std::optional<Resolution> resolution_from_name(std::string_view name) {
  if (name == "raw") return Resolution::RAW;
  if (name == "m12") return Resolution::M12;
  if (name == "h1") return Resolution::H1;
  if (name == "d1") return Resolution::D1;
  if (name == "d7") return Resolution::D7;
  if (name == "d30") return Resolution::D30;
  return std::nullopt;
}

bool validate_name(std::string_view s) {
  if (s.empty() || s.size() > 256) return false;
  auto head = s[0];
  if (!(head == '_' || (head >= 'A' && head <= 'Z') || (head >= 'a' && head <= 'z'))) return false;
  for (char c : s.substr(1)) {
    if (!(c == '_' || (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9')))
      return false;
  }
  return true;
}

std::optional<std::string> TagSet::get(const std::string& name) const {
  auto it = pairs_.find(name);
  if (it == pairs_.end()) return std::nullopt;
  return it->second;
}

std::string TagSet::get_or_empty(const std::string& name) const {
  auto it = pairs_.find(name);
  return it == pairs_.end() ? std::string() : it->second;
}

namespace {

void append_escaped(std::string& out, const std::string& value) {
  for (char c : value) {
    if (c == '"' || c == '\\') out.push_back('\\');
    out.push_back(c);
  }
}

}  // namespace

std::string SeriesKey::canonical() const {
  std::string out = name;
  if (tags.empty()) return out;
  out.push_back('{');
  bool first = true;
  for (const auto& [k, v] : tags) {
    if (!first) out.push_back(',');
    first = false;
    out += k;
    out += "=\"";
    append_escaped(out, v);
    out.push_back('"');
  }
  out.push_back('}');
  return out;
}

std::string canonical_series_key(const std::string& name, const TagSet& tags) {
  if (!validate_name(name)) throw std::invalid_argument("invalid metric name: '" + name + "'");
  for (const auto& [k, v] : tags) {
    if (!validate_name(k)) throw std::invalid_argument("invalid tag name: '" + k + "'");
  }
  return SeriesKey{name, tags}.canonical();
}

Timestamp bin_start(Timestamp ts, Resolution res) {
  if (res == Resolution::RAW) throw std::invalid_argument("bin_start: RAW has no bin width");
  std::int64_t width = resolution_ms(res);
  return Timestamp{floor_div(ts.ms, width) * width};
}

const std::vector<std::string>& reserved_fields() {
  static const std::vector<std::string> names = {"version", "timestamp", "uuid"};
  return names;
}

bool is_reserved_field(std::string_view name) {
  for (const auto& r : reserved_fields())
    if (name == r) return true;
  return false;
}

bool payload_well_formed(const Json& payload) {
  if (!payload.is_object()) return false;
  auto scalar = [](const Json& v) {
    return v.is_number() || v.is_string() || v.is_boolean();
  };
  for (const auto& [key, value] : payload.items()) {
    (void)key;
    if (scalar(value)) continue;
    if (!value.is_object()) return false;
    for (const auto& [inner_key, inner] : value.items()) {
      (void)inner_key;
      if (!scalar(inner)) return false;
    }
  }
  return true;
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t hash = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    hash ^= c;
    hash *= 1099511628211ull;
  }
  return hash;
}

std::string Document::canonical_encoding() const {
  // nlohmann::json objects iterate in sorted key order, so dump() without
  // indentation is already the canonical no-whitespace form.
  Json envelope;
  envelope["doc_type"] = doc_type;
  envelope["payload"] = payload;
  envelope["producer"] = producer;
  envelope["timestamp"] = timestamp.ms;
  return envelope.dump();
}

std::uint64_t Document::content_hash() const { return fnv1a64(canonical_encoding()); }

Json Document::to_json() const {
  Json j;
  j["producer"] = producer;
  j["doc_type"] = doc_type;
  j["timestamp"] = timestamp.ms;
  j["payload"] = payload;
  return j;
}

std::optional<Document> Document::from_json(const Json& j) {
  if (!j.is_object()) return std::nullopt;
  Document doc;
  if (!j.contains("producer") || !j["producer"].is_string()) return std::nullopt;
  if (!j.contains("doc_type") || !j["doc_type"].is_string()) return std::nullopt;
  if (!j.contains("timestamp") || !j["timestamp"].is_number_integer()) return std::nullopt;
  doc.producer = j["producer"].get<std::string>();
  doc.doc_type = j["doc_type"].get<std::string>();
  doc.timestamp = Timestamp{j["timestamp"].get<std::int64_t>()};
  doc.payload = j.value("payload", Json::object());
  if (doc.timestamp.ms < 0) return std::nullopt;
  return doc;
}

namespace {

const Json* lookup_field(const Json& payload, const std::string& path) {
  if (!payload.is_object()) return nullptr;
  auto dot = path.find('.');
  if (dot == std::string::npos) {
    auto it = payload.find(path);
    return it == payload.end() ? nullptr : &*it;
  }
  auto outer = payload.find(path.substr(0, dot));
  if (outer == payload.end() || !outer->is_object()) return nullptr;
  auto inner = outer->find(path.substr(dot + 1));
  return inner == outer->end() ? nullptr : &*inner;
}

// Numeric if both numeric, lexicographic if both strings; otherwise
// incomparable and GT/LT never match.
int compare_scalars(const Json& a, const Json& b, bool& comparable) {
  comparable = true;
  if (a.is_number() && b.is_number()) {
    double lhs = a.get<double>(), rhs = b.get<double>();
    return lhs < rhs ? -1 : (lhs > rhs ? 1 : 0);
  }
  if (a.is_string() && b.is_string()) {
    return a.get<std::string>().compare(b.get<std::string>());
  }
  comparable = false;
  return 0;
}

}  // namespace

bool FieldMatcher::matches(const Json& payload) const {
  const Json* v = lookup_field(payload, field);
  if (op == MatchOp::EXISTS) return v != nullptr;
  if (v == nullptr) return false;
  bool comparable = false;
  switch (op) {
    case MatchOp::EQ:
      return *v == value || (compare_scalars(*v, value, comparable) == 0 && comparable);
    case MatchOp::NEQ: {
      if (*v == value) return false;
      int cmp = compare_scalars(*v, value, comparable);
      return !comparable || cmp != 0;
    }
    case MatchOp::GT: {
      int cmp = compare_scalars(*v, value, comparable);
      return comparable && cmp > 0;
    }
    case MatchOp::LT: {
      int cmp = compare_scalars(*v, value, comparable);
      return comparable && cmp < 0;
    }
    case MatchOp::EXISTS: return true;
  }
  return false;
}

const char* match_op_name(MatchOp op) {
  switch (op) {
    case MatchOp::EQ: return "eq";
    case MatchOp::NEQ: return "neq";
    case MatchOp::GT: return "gt";
    case MatchOp::LT: return "lt";
    case MatchOp::EXISTS: return "exists";
  }
  return "?";
}

std::optional<MatchOp> match_op_from_name(std::string_view name) {
  if (name == "eq" || name == "=") return MatchOp::EQ;
  if (name == "neq" || name == "!=") return MatchOp::NEQ;
  if (name == "gt" || name == ">") return MatchOp::GT;
  if (name == "lt" || name == "<") return MatchOp::LT;
  if (name == "exists") return MatchOp::EXISTS;
  return std::nullopt;
}

}  // namespace minimon
