#include "minimon/exposition.hpp"

#include <cctype>
#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <cstring>

namespace minimon::exposition {

namespace {

struct LineParser {
  std::string_view line;
  std::size_t pos = 0;

  bool at_end() const { return pos >= line.size(); }
  char peek() const { return line[pos]; }

  bool consume(char c) {
    if (at_end() || line[pos] != c) return false;
    ++pos;
    return true;
  }

  std::string_view take_identifier() {
    std::size_t start = pos;
    while (!at_end()) {
      char c = line[pos];
      if (c == '_' || std::isalnum(static_cast<unsigned char>(c)))
        ++pos;
      else
        break;
    }
    return line.substr(start, pos - start);
  }
};

bool parse_tags(LineParser& p, TagSet& tags, std::string& error) {
  // cursor sits just past '{'
  if (p.consume('}')) return true;
  while (true) {
    std::string_view tag_name = p.take_identifier();
    if (tag_name.empty() || !validate_name(tag_name)) {
      error = "expected tag name";
      return false;
    }
    if (!p.consume('=') || !p.consume('"')) {
      error = "expected =\"value\" after tag name";
      return false;
    }
    std::string value;
    while (true) {
      if (p.at_end()) {
        error = "unterminated tag value";
        return false;
      }
      char c = p.line[p.pos++];
      if (c == '\\') {
        if (p.at_end()) {
          error = "dangling escape in tag value";
          return false;
        }
        char esc = p.line[p.pos++];
        if (esc != '"' && esc != '\\') {
          error = "unsupported escape in tag value";
          return false;
        }
        value.push_back(esc);
      } else if (c == '"') {
        break;
      } else {
        value.push_back(c);
      }
    }
    if (tags.contains(std::string(tag_name))) {
      error = "duplicate tag name '" + std::string(tag_name) + "'";
      return false;
    }
    tags.set(std::string(tag_name), std::move(value));
    if (p.consume('}')) return true;
    if (!p.consume(',')) {
      error = "expected ',' or '}' in tag list";
      return false;
    }
  }
}

}  // namespace

ParseResult parse(std::string_view body) {
  ParseResult result;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= body.size()) {
    if (start == body.size()) break;
    std::size_t nl = body.find('\n', start);
    std::string_view line =
        nl == std::string_view::npos ? body.substr(start) : body.substr(start, nl - start);
    start = nl == std::string_view::npos ? body.size() : nl + 1;
    ++line_no;

    if (line.empty()) continue;
    if (line.front() == '#') continue;

    auto fail = [&](std::string detail) {
      result.samples.clear();
      result.error = ParseError{line_no, std::move(detail)};
      return result;
    };

    LineParser p{line};
    std::string_view name = p.take_identifier();
    if (name.empty() || !validate_name(name)) return fail("expected metric name");

    Sample sample;
    sample.key.name = std::string(name);
    if (p.consume('{')) {
      std::string tag_error;
      if (!parse_tags(p, sample.key.tags, tag_error)) return fail(tag_error);
    }
    if (!p.consume(' ')) return fail("expected single space before value");

    std::size_t value_end = p.line.find(' ', p.pos);
    std::string_view value_token = value_end == std::string_view::npos
                                       ? p.line.substr(p.pos)
                                       : p.line.substr(p.pos, value_end - p.pos);
    if (value_token.empty()) return fail("expected value");
    {
      std::string token(value_token);
      char* end = nullptr;
      errno = 0;
      double v = std::strtod(token.c_str(), &end);
      if (errno != 0 || end == token.c_str() || *end != '\0') return fail("malformed value");
      sample.value = v;
    }
    p.pos += value_token.size();

    if (p.consume(' ')) {
      std::string_view ts_token = p.line.substr(p.pos);
      if (ts_token.empty()) return fail("expected timestamp after space");
      std::string token(ts_token);
      char* end = nullptr;
      errno = 0;
      long long ts = std::strtoll(token.c_str(), &end, 10);
      if (errno != 0 || end == token.c_str() || *end != '\0' || ts < 0)
        return fail("malformed timestamp");
      sample.ts = Timestamp{ts};
      p.pos += ts_token.size();
    }
    if (!p.at_end()) return fail("trailing characters after sample");

    result.samples.push_back(std::move(sample));
  }
  return result;
}

std::string render_value(double value) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", value);
  // Prefer the shortest representation that round-trips.
  for (int precision = 1; precision < 17; ++precision) {
    char probe[64];
    std::snprintf(probe, sizeof(probe), "%.*g", precision, value);
    if (std::strtod(probe, nullptr) == value) return probe;
  }
  return buf;
}

std::string render(const std::vector<Sample>& samples) {
  std::string out;
  for (const Sample& s : samples) {
    out += s.key.canonical();
    out.push_back(' ');
    out += render_value(s.value);
    if (s.ts.has_value()) {
      out.push_back(' ');
      out += std::to_string(s.ts->ms);
    }
    out.push_back('\n');
  }
  return out;
}

}  // namespace minimon::exposition
