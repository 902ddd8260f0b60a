#include "minimon/query.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <set>
#include <stdexcept>

namespace minimon::query {

namespace {

bool full_regex_match(const std::string& value, const std::string& pattern) {
  std::regex re(pattern, std::regex::ECMAScript);
  return std::regex_match(value, re);
}

}  // namespace

bool LabelMatcher::matches(const TagSet& tags) const {
  std::string actual = tags.get_or_empty(tag);
  switch (op) {
    case MatcherOp::Eq: return actual == value;
    case MatcherOp::Neq: return actual != value;
    case MatcherOp::Regex: return full_regex_match(actual, value);
  }
  return false;
}

const char* range_func_name(RangeFunc f) {
  switch (f) {
    case RangeFunc::AvgOverTime: return "avg_over_time";
    case RangeFunc::MaxOverTime: return "max_over_time";
    case RangeFunc::MinOverTime: return "min_over_time";
    case RangeFunc::SumOverTime: return "sum_over_time";
    case RangeFunc::CountOverTime: return "count_over_time";
    case RangeFunc::Rate: return "rate";
  }
  return "?";
}

const char* agg_op_name(AggOp op) {
  switch (op) {
    case AggOp::Sum: return "sum";
    case AggOp::Avg: return "avg";
    case AggOp::Max: return "max";
    case AggOp::Min: return "min";
  }
  return "?";
}

std::string SyntaxError::to_string() const {
  return "syntax error at " + std::to_string(pos) + ": " + message;
}

namespace {

std::string render_window(std::int64_t ms) {
  if (ms % kMillisPerDay == 0) return std::to_string(ms / kMillisPerDay) + "d";
  if (ms % kMillisPerHour == 0) return std::to_string(ms / kMillisPerHour) + "h";
  if (ms % kMillisPerMinute == 0) return std::to_string(ms / kMillisPerMinute) + "m";
  return std::to_string(ms / kMillisPerSecond) + "s";
}

const char* matcher_op_text(MatcherOp op) {
  switch (op) {
    case MatcherOp::Eq: return "=";
    case MatcherOp::Neq: return "!=";
    case MatcherOp::Regex: return "=~";
  }
  return "?";
}

}  // namespace

std::string QueryAST::canonical() const {
  std::string out;
  if (agg.has_value()) {
    out += agg_op_name(*agg);
    out += " by (";
    for (std::size_t i = 0; i < agg_by.size(); ++i) {
      if (i > 0) out += ",";
      out += agg_by[i];
    }
    out += ") ";
  }
  if (func.has_value()) {
    out += range_func_name(*func);
    out += "(";
  }
  out += selector.metric;
  if (!selector.matchers.empty()) {
    out += "{";
    for (std::size_t i = 0; i < selector.matchers.size(); ++i) {
      const LabelMatcher& m = selector.matchers[i];
      if (i > 0) out += ",";
      out += m.tag;
      out += matcher_op_text(m.op);
      out += "\"";
      for (char c : m.value) {
        if (c == '"' || c == '\\') out.push_back('\\');
        out.push_back(c);
      }
      out += "\"";
    }
    out += "}";
  }
  if (func.has_value()) {
    out += "[" + render_window(window_ms) + "]";
    out += ")";
  }
  return out;
}

namespace {

enum class TokKind {
  Identifier,
  String,    // quoted, value holds the unescaped text
  Duration,  // value holds the raw token, duration_ms the width
  LBrace,
  RBrace,
  LParen,
  RParen,
  LBracket,
  RBracket,
  Comma,
  Eq,
  Neq,
  EqRegex,
  End,
};

struct Token {
  TokKind kind = TokKind::End;
  std::string text;
  std::int64_t duration_ms = 0;
  std::size_t pos = 0;  // 1-based offset of the first character
};

class Lexer {
 public:
  explicit Lexer(std::string_view text) : text_(text) {}

  // Throws SyntaxError on malformed input.
  std::vector<Token> run() {
    std::vector<Token> out;
    while (true) {
      skip_spaces();
      std::size_t start = pos_ + 1;
      if (pos_ >= text_.size()) {
        out.push_back({TokKind::End, "", 0, start});
        return out;
      }
      char c = text_[pos_];
      if (c == '{') { out.push_back({TokKind::LBrace, "{", 0, start}); ++pos_; continue; }
      if (c == '}') { out.push_back({TokKind::RBrace, "}", 0, start}); ++pos_; continue; }
      if (c == '(') { out.push_back({TokKind::LParen, "(", 0, start}); ++pos_; continue; }
      if (c == ')') { out.push_back({TokKind::RParen, ")", 0, start}); ++pos_; continue; }
      if (c == '[') { out.push_back({TokKind::LBracket, "[", 0, start}); ++pos_; continue; }
      if (c == ']') { out.push_back({TokKind::RBracket, "]", 0, start}); ++pos_; continue; }
      if (c == ',') { out.push_back({TokKind::Comma, ",", 0, start}); ++pos_; continue; }
      if (c == '=') {
        if (pos_ + 1 < text_.size() && text_[pos_ + 1] == '~') {
          out.push_back({TokKind::EqRegex, "=~", 0, start});
          pos_ += 2;
        } else {
          out.push_back({TokKind::Eq, "=", 0, start});
          ++pos_;
        }
        continue;
      }
      if (c == '!') {
        if (pos_ + 1 < text_.size() && text_[pos_ + 1] == '=') {
          out.push_back({TokKind::Neq, "!=", 0, start});
          pos_ += 2;
          continue;
        }
        throw SyntaxError{start, "unexpected '!'"};
      }
      if (c == '"') {
        ++pos_;
        std::string value;
        while (true) {
          if (pos_ >= text_.size()) throw SyntaxError{start, "unterminated string"};
          char ch = text_[pos_++];
          if (ch == '\\') {
            if (pos_ >= text_.size()) throw SyntaxError{start, "dangling escape in string"};
            value.push_back(text_[pos_++]);
          } else if (ch == '"') {
            break;
          } else {
            value.push_back(ch);
          }
        }
        out.push_back({TokKind::String, std::move(value), 0, start});
        continue;
      }
      if (std::isdigit(static_cast<unsigned char>(c))) {
        std::size_t begin = pos_;
        while (pos_ < text_.size() && std::isdigit(static_cast<unsigned char>(text_[pos_]))) ++pos_;
        if (pos_ >= text_.size()) throw SyntaxError{start, "expected duration unit"};
        char unit = text_[pos_];
        std::int64_t scale;
        switch (unit) {
          case 's': scale = kMillisPerSecond; break;
          case 'm': scale = kMillisPerMinute; break;
          case 'h': scale = kMillisPerHour; break;
          case 'd': scale = kMillisPerDay; break;
          default: throw SyntaxError{start, "expected duration unit s, m, h or d"};
        }
        std::int64_t n = std::stoll(std::string(text_.substr(begin, pos_ - begin)));
        ++pos_;
        if (n <= 0) throw SyntaxError{start, "duration must be positive"};
        out.push_back(
            {TokKind::Duration, std::string(text_.substr(begin, pos_ - begin + 1)), n * scale, start});
        continue;
      }
      if (c == '_' || std::isalpha(static_cast<unsigned char>(c))) {
        std::size_t begin = pos_;
        while (pos_ < text_.size() &&
               (text_[pos_] == '_' || std::isalnum(static_cast<unsigned char>(text_[pos_]))))
          ++pos_;
        out.push_back({TokKind::Identifier, std::string(text_.substr(begin, pos_ - begin)), 0, start});
        continue;
      }
      throw SyntaxError{start, std::string("unexpected character '") + c + "'"};
    }
  }

 private:
  void skip_spaces() {
    while (pos_ < text_.size() && text_[pos_] == ' ') ++pos_;
  }

  std::string_view text_;
  std::size_t pos_ = 0;
};

class Parser {
 public:
  explicit Parser(std::vector<Token> tokens) : tokens_(std::move(tokens)) {}

  QueryAST run() {
    QueryAST ast;
    parse_agg(ast);
    parse_func_and_selector(ast);
    const Token& trailing = peek();
    if (trailing.kind != TokKind::End)
      throw SyntaxError{trailing.pos, "unexpected trailing input '" + trailing.text + "'"};
    return ast;
  }

 private:
  static std::optional<AggOp> agg_from_text(const std::string& text) {
    if (text == "sum") return AggOp::Sum;
    if (text == "avg") return AggOp::Avg;
    if (text == "max") return AggOp::Max;
    if (text == "min") return AggOp::Min;
    return std::nullopt;
  }

  static std::optional<RangeFunc> func_from_text(const std::string& text) {
    if (text == "avg_over_time") return RangeFunc::AvgOverTime;
    if (text == "max_over_time") return RangeFunc::MaxOverTime;
    if (text == "min_over_time") return RangeFunc::MinOverTime;
    if (text == "sum_over_time") return RangeFunc::SumOverTime;
    if (text == "count_over_time") return RangeFunc::CountOverTime;
    if (text == "rate") return RangeFunc::Rate;
    return std::nullopt;
  }

  void parse_agg(QueryAST& ast) {
    const Token& t = peek();
    if (t.kind != TokKind::Identifier) return;
    auto op = agg_from_text(t.text);
    // Only an aggregation when followed by `by`; otherwise `sum` is a
    // perfectly good metric name.
    if (!op.has_value() || peek(1).kind != TokKind::Identifier || peek(1).text != "by") return;
    consume();  // op
    consume();  // by
    expect(TokKind::LParen, "expected '(' after by");
    while (true) {
      const Token& tag = expect(TokKind::Identifier, "expected tag name in by clause");
      if (!validate_name(tag.text)) throw SyntaxError{tag.pos, "invalid tag name"};
      ast.agg_by.push_back(tag.text);
      if (peek().kind == TokKind::Comma) {
        consume();
        continue;
      }
      expect(TokKind::RParen, "expected ')' to close by clause");
      break;
    }
    ast.agg = op;
  }

  void parse_func_and_selector(QueryAST& ast) {
    const Token& t = peek();
    if (t.kind != TokKind::Identifier)
      throw SyntaxError{t.pos, "expected metric name"};
    auto func = func_from_text(t.text);
    bool has_func = func.has_value() && peek(1).kind == TokKind::LParen;
    if (has_func) {
      ast.func = func;
      consume();  // func name
      consume();  // (
    }
    parse_selector(ast);
    if (peek().kind == TokKind::LBracket) {
      const Token& bracket = consume();
      if (!ast.func.has_value())
        throw SyntaxError{bracket.pos, "window requires a range function"};
      const Token& window = expect(TokKind::Duration, "expected window duration like 5m");
      ast.window_ms = window.duration_ms;
      expect(TokKind::RBracket, "expected ']' after window");
    }
    if (has_func) {
      if (ast.window_ms == 0) {
        const Token& here = peek();
        throw SyntaxError{here.pos,
                          std::string(range_func_name(*ast.func)) + " requires a [window]"};
      }
      expect(TokKind::RParen, "expected ')' to close range function");
    }
  }

  void parse_selector(QueryAST& ast) {
    const Token& name = expect(TokKind::Identifier, "expected metric name");
    if (!validate_name(name.text)) throw SyntaxError{name.pos, "invalid metric name"};
    ast.selector.metric = name.text;
    if (peek().kind != TokKind::LBrace) return;
    consume();
    if (peek().kind == TokKind::RBrace) {  // empty matcher list
      consume();
      return;
    }
    while (true) {
      const Token& tag = expect(TokKind::Identifier, "expected tag name in matcher");
      if (!validate_name(tag.text)) throw SyntaxError{tag.pos, "invalid tag name"};
      LabelMatcher matcher;
      matcher.tag = tag.text;
      const Token& op = consume();
      switch (op.kind) {
        case TokKind::Eq: matcher.op = MatcherOp::Eq; break;
        case TokKind::Neq: matcher.op = MatcherOp::Neq; break;
        case TokKind::EqRegex: matcher.op = MatcherOp::Regex; break;
        default: throw SyntaxError{op.pos, "expected matcher operator =, != or =~"};
      }
      const Token& value = peek();
      if (value.kind != TokKind::String)
        throw SyntaxError{value.pos, "expected quoted matcher value"};
      consume();
      matcher.value = value.text;
      if (matcher.op == MatcherOp::Regex) {
        try {
          std::regex probe(matcher.value, std::regex::ECMAScript);
        } catch (const std::regex_error& e) {
          throw SyntaxError{value.pos, std::string("invalid regex: ") + e.what()};
        }
      }
      ast.selector.matchers.push_back(std::move(matcher));
      if (peek().kind == TokKind::Comma) {
        consume();
        continue;
      }
      expect(TokKind::RBrace, "expected ',' or '}' in matcher list");
      break;
    }
  }

  const Token& peek(std::size_t ahead = 0) const {
    std::size_t at = std::min(index_ + ahead, tokens_.size() - 1);
    return tokens_[at];
  }

  const Token& consume() {
    const Token& t = tokens_[std::min(index_, tokens_.size() - 1)];
    if (index_ < tokens_.size() - 1) ++index_;
    return t;
  }

  const Token& expect(TokKind kind, const char* message) {
    const Token& t = peek();
    if (t.kind != kind) throw SyntaxError{t.pos, message};
    return consume();
  }

  std::vector<Token> tokens_;
  std::size_t index_ = 0;
};

}  // namespace

ParseOutcome parse_query(std::string_view text) {
  ParseOutcome outcome;
  try {
    Lexer lexer(text);
    Parser parser(lexer.run());
    outcome.ast = parser.run();
  } catch (const SyntaxError& err) {
    outcome.error = err;
  }
  return outcome;
}

std::vector<tsdb::SeriesId> resolve_selector(const tsdb::Store& store, const Selector& selector) {
  std::vector<tsdb::SeriesId> candidates = store.series_with_name(selector.metric);

  // Equality matchers with a non-empty value narrow through the inverted
  // index; everything else filters below.
  for (const LabelMatcher& m : selector.matchers) {
    if (m.op != MatcherOp::Eq || m.value.empty()) continue;
    std::vector<tsdb::SeriesId> posting = store.series_with_tag(m.tag, m.value);
    std::vector<tsdb::SeriesId> narrowed;
    std::set<tsdb::SeriesId> posting_set(posting.begin(), posting.end());
    for (tsdb::SeriesId id : candidates)
      if (posting_set.count(id)) narrowed.push_back(id);
    candidates = std::move(narrowed);
  }

  std::vector<tsdb::SeriesId> out;
  for (tsdb::SeriesId id : candidates) {
    auto key = store.key_of(id);
    if (!key.has_value()) continue;
    bool ok = true;
    for (const LabelMatcher& m : selector.matchers) {
      if (!m.matches(key->tags)) {
        ok = false;
        break;
      }
    }
    if (ok) out.push_back(id);
  }
  return out;
}

namespace {

struct PseudoSample {
  Timestamp ts;
  double value;
};

// Samples feeding one range-function window: raw when present, otherwise
// per-component bin substitutes from the finest covering resolution.
struct WindowData {
  bool from_raw = false;
  std::vector<std::pair<Timestamp, double>> raw;
  std::vector<tsdb::AggregateBin> bins;
};

WindowData window_data(const tsdb::Store& store, tsdb::SeriesId id, Timestamp from, Timestamp to) {
  WindowData data;
  data.raw = store.raw_in(id, from, to);
  if (!data.raw.empty()) {
    data.from_raw = true;
    return data;
  }
  for (Resolution res : tsdb::kBinResolutions) {
    data.bins = store.bins_in(id, res, from, to);
    if (!data.bins.empty()) break;
  }
  return data;
}

std::optional<double> apply_range_func(RangeFunc func, const WindowData& data) {
  if (data.from_raw) {
    const auto& samples = data.raw;
    if (samples.empty()) return std::nullopt;
    switch (func) {
      case RangeFunc::AvgOverTime: {
        double sum = 0;
        for (const auto& [ts, v] : samples) sum += v;
        return sum / static_cast<double>(samples.size());
      }
      case RangeFunc::SumOverTime: {
        double sum = 0;
        for (const auto& [ts, v] : samples) sum += v;
        return sum;
      }
      case RangeFunc::MinOverTime: {
        double best = samples.front().second;
        for (const auto& [ts, v] : samples) best = std::min(best, v);
        return best;
      }
      case RangeFunc::MaxOverTime: {
        double best = samples.front().second;
        for (const auto& [ts, v] : samples) best = std::max(best, v);
        return best;
      }
      case RangeFunc::CountOverTime:
        return static_cast<double>(samples.size());
      case RangeFunc::Rate: {
        if (samples.size() < 2) return std::nullopt;
        std::int64_t span_ms = samples.back().first - samples.front().first;
        if (span_ms <= 0) return std::nullopt;
        double increase = 0;
        for (std::size_t i = 1; i < samples.size(); ++i) {
          double delta = samples[i].second - samples[i - 1].second;
          if (delta > 0) increase += delta;  // counter resets clamp to 0
        }
        return increase / (static_cast<double>(span_ms) / 1000.0);
      }
    }
    return std::nullopt;
  }

  const auto& bins = data.bins;
  if (bins.empty()) return std::nullopt;
  switch (func) {
    case RangeFunc::AvgOverTime: {
      double sum = 0;
      for (const auto& b : bins) sum += b.avg();
      return sum / static_cast<double>(bins.size());
    }
    case RangeFunc::SumOverTime: {
      double sum = 0;
      for (const auto& b : bins) sum += b.sum;
      return sum;
    }
    case RangeFunc::MinOverTime: {
      double best = bins.front().min;
      for (const auto& b : bins) best = std::min(best, b.min);
      return best;
    }
    case RangeFunc::MaxOverTime: {
      double best = bins.front().max;
      for (const auto& b : bins) best = std::max(best, b.max);
      return best;
    }
    case RangeFunc::CountOverTime: {
      double total = 0;
      for (const auto& b : bins) total += static_cast<double>(b.count);
      return total;
    }
    case RangeFunc::Rate: {
      if (bins.size() < 2) return std::nullopt;
      std::int64_t span_ms = bins.back().window_start - bins.front().window_start;
      if (span_ms <= 0) return std::nullopt;
      double increase = 0;
      for (std::size_t i = 1; i < bins.size(); ++i) {
        double delta = bins[i].avg() - bins[i - 1].avg();
        if (delta > 0) increase += delta;
      }
      return increase / (static_cast<double>(span_ms) / 1000.0);
    }
  }
  return std::nullopt;
}

std::optional<double> instant_value(const tsdb::Store& store, tsdb::SeriesId id, Timestamp t,
                                    std::int64_t lookback_ms) {
  WindowData data = window_data(store, id, t - lookback_ms, t);
  if (data.from_raw) return data.raw.back().second;
  if (!data.bins.empty()) return data.bins.back().avg();
  return std::nullopt;
}

}  // namespace

Matrix eval(const tsdb::Store& store, const QueryAST& ast, Timestamp from, Timestamp to,
            std::int64_t step_ms, const EvalOptions& options) {
  if (from > to) throw std::invalid_argument("eval: from must be <= to");
  if (step_ms <= 0) throw std::invalid_argument("eval: step must be > 0");

  std::vector<tsdb::SeriesId> ids = resolve_selector(store, ast.selector);

  // Per input series values at each instant.
  struct SeriesValues {
    SeriesKey key;
    std::vector<std::pair<Timestamp, double>> points;
  };
  std::vector<SeriesValues> evaluated;
  evaluated.reserve(ids.size());

  for (tsdb::SeriesId id : ids) {
    auto key = store.key_of(id);
    if (!key.has_value()) continue;
    SeriesValues sv;
    sv.key = *key;
    for (Timestamp t = from; t <= to; t = t + step_ms) {
      std::optional<double> value;
      if (ast.func.has_value()) {
        WindowData data = window_data(store, id, t - ast.window_ms, t);
        value = apply_range_func(*ast.func, data);
      } else {
        value = instant_value(store, id, t, options.lookback_ms);
      }
      if (value.has_value()) sv.points.push_back({t, *value});
    }
    if (!sv.points.empty()) evaluated.push_back(std::move(sv));
  }

  Matrix matrix;
  if (!ast.agg.has_value()) {
    for (auto& sv : evaluated) matrix.push_back({std::move(sv.key), std::move(sv.points)});
  } else {
    // Group by the tuple of agg_by tag values, dropping all other tags.
    std::map<std::string, SeriesResult> groups;
    std::map<std::string, std::map<std::int64_t, std::pair<double, std::size_t>>> accum;
    for (const auto& sv : evaluated) {
      SeriesKey grouped;
      grouped.name = ast.selector.metric;
      for (const std::string& tag : ast.agg_by) {
        auto v = sv.key.tags.get(tag);
        if (v.has_value()) grouped.tags.set(tag, *v);
      }
      std::string group_key = grouped.canonical();
      groups.emplace(group_key, SeriesResult{grouped, {}});
      auto& per_instant = accum[group_key];
      for (const auto& [ts, v] : sv.points) {
        auto it = per_instant.find(ts.ms);
        if (it == per_instant.end()) {
          per_instant[ts.ms] = {v, 1};
        } else {
          auto& [value, count] = it->second;
          switch (*ast.agg) {
            case AggOp::Sum: value += v; break;
            case AggOp::Avg: value += v; break;  // divided below
            case AggOp::Max: value = std::max(value, v); break;
            case AggOp::Min: value = std::min(value, v); break;
          }
          ++count;
        }
      }
    }
    for (auto& [group_key, result] : groups) {
      for (const auto& [ts, entry] : accum[group_key]) {
        double value = entry.first;
        if (*ast.agg == AggOp::Avg) value /= static_cast<double>(entry.second);
        result.points.push_back({Timestamp{ts}, value});
      }
      if (!result.points.empty()) matrix.push_back(std::move(result));
    }
  }

  std::sort(matrix.begin(), matrix.end(), [](const SeriesResult& a, const SeriesResult& b) {
    return a.key.canonical() < b.key.canonical();
  });
  return matrix;
}

}  // namespace minimon::query
