#include "minimon/config.hpp"

#include <fstream>
#include <sstream>

namespace minimon::config {

std::optional<std::int64_t> parse_duration_ms(std::string_view text) {
  if (text.empty()) return std::nullopt;
  char unit = text.back();
  std::int64_t scale = kMillisPerSecond;
  std::string_view digits = text;
  switch (unit) {
    case 's': scale = kMillisPerSecond; digits = text.substr(0, text.size() - 1); break;
    case 'm': scale = kMillisPerMinute; digits = text.substr(0, text.size() - 1); break;
    case 'h': scale = kMillisPerHour; digits = text.substr(0, text.size() - 1); break;
    case 'd': scale = kMillisPerDay; digits = text.substr(0, text.size() - 1); break;
    default:
      if (unit < '0' || unit > '9') return std::nullopt;
      break;
  }
  if (digits.empty()) return std::nullopt;
  std::int64_t n = 0;
  for (char c : digits) {
    if (c < '0' || c > '9') return std::nullopt;
    n = n * 10 + (c - '0');
  }
  return n * scale;
}

namespace {

std::string trim(std::string_view s) {
  std::size_t a = 0, b = s.size();
  while (a < b && (s[a] == ' ' || s[a] == '\t')) ++a;
  while (b > a && (s[b - 1] == ' ' || s[b - 1] == '\t' || s[b - 1] == '\r')) --b;
  return std::string(s.substr(a, b - a));
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t comma = text.find(',', start);
    std::string item = trim(comma == std::string::npos ? text.substr(start)
                                                       : text.substr(start, comma - start));
    if (!item.empty()) out.push_back(item);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

}  // namespace

ConfigParse parse_service_config(std::string_view text) {
  ConfigParse result;
  ServiceConfig config;

  enum class Section { TOP, TARGET, TOKEN };
  Section section = Section::TOP;
  ingest::ScrapeTarget target;
  pubsub::AuthToken token;

  auto flush_section = [&](std::size_t line_no) {
    if (section == Section::TARGET) {
      if (target.url.empty())
        result.errors.push_back("line " + std::to_string(line_no) + ": [target] needs a url");
      else
        config.scrape_targets.push_back(target);
      target = ingest::ScrapeTarget{};
    } else if (section == Section::TOKEN) {
      if (token.token.empty())
        result.errors.push_back("line " + std::to_string(line_no) + ": [token] needs a token");
      else
        config.tokens[token.token] = token;
      token = pubsub::AuthToken{};
    }
  };

  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t nl = text.find('\n', start);
    std::string line = trim(nl == std::string_view::npos ? text.substr(start)
                                                         : text.substr(start, nl - start));
    start = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (line.empty() || line[0] == '#') continue;

    if (line.front() == '[' && line.back() == ']') {
      flush_section(line_no);
      std::string name = trim(line.substr(1, line.size() - 2));
      if (name == "target")
        section = Section::TARGET;
      else if (name == "token")
        section = Section::TOKEN;
      else {
        result.errors.push_back("line " + std::to_string(line_no) + ": unknown section [" + name +
                                "]");
        section = Section::TOP;
      }
      continue;
    }

    auto eq = line.find('=');
    if (eq == std::string::npos) {
      result.errors.push_back("line " + std::to_string(line_no) + ": expected key = value");
      continue;
    }
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));

    if (section == Section::TARGET) {
      if (key == "url") {
        target.url = value;
      } else if (key == "interval") {
        auto d = parse_duration_ms(value);
        if (!d.has_value())
          result.errors.push_back("line " + std::to_string(line_no) + ": bad interval");
        else
          target.interval_ms = *d;
      } else if (key == "tags") {
        for (const std::string& pair : split_list(value)) {
          auto tag_eq = pair.find('=');
          if (tag_eq == std::string::npos)
            result.errors.push_back("line " + std::to_string(line_no) + ": tags need k=v");
          else
            target.static_tags.set(trim(pair.substr(0, tag_eq)), trim(pair.substr(tag_eq + 1)));
        }
      } else {
        result.errors.push_back("line " + std::to_string(line_no) + ": unknown target key " + key);
      }
      continue;
    }

    if (section == Section::TOKEN) {
      if (key == "token")
        token.token = value;
      else if (key == "publish")
        token.allowed_publish = split_list(value);
      else if (key == "subscribe")
        token.allowed_subscribe = split_list(value);
      else
        result.errors.push_back("line " + std::to_string(line_no) + ": unknown token key " + key);
      continue;
    }

    if (key == "data_dir") {
      config.data_dir = value;
    } else if (key == "http_port") {
      config.http_port = std::stoi(value);
    } else if (key == "pubsub_port") {
      config.pubsub_port = std::stoi(value);
    } else if (key == "bind_host") {
      config.bind_host = value;
    } else if (key == "alerting_config") {
      config.alerting_config_path = value;
    } else if (key == "maintenance_interval") {
      auto d = parse_duration_ms(value);
      if (d.has_value())
        config.maintenance_interval_ms = *d;
      else
        result.errors.push_back("line " + std::to_string(line_no) + ": bad duration");
    } else if (key == "doc_retention_days") {
      config.doc_retention_days = std::stoi(value);
    } else if (key.rfind("doc_retention_days.", 0) == 0) {
      config.doc_retention_overrides[key.substr(19)] = std::stoi(value);
    } else if (key == "bridge_patterns") {
      config.bridge_patterns = split_list(value);
    } else if (key == "bridge_token") {
      config.bridge_token = value;
    } else {
      result.errors.push_back("line " + std::to_string(line_no) + ": unknown key " + key);
    }
  }
  flush_section(line_no);

  if (result.errors.empty()) result.config = std::move(config);
  return result;
}

ConfigParse load_service_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    ConfigParse result;
    result.errors.push_back("cannot open config file " + path);
    return result;
  }
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_service_config(buffer.str());
}

}  // namespace minimon::config
