#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "minimon/core.hpp"

namespace minimon::exposition {

/// One parsed sample line. The timestamp is absent when the line carried
/// none; callers substitute their own notion of "now".
struct Sample {
  SeriesKey key;
  double value = 0.0;
  std::optional<Timestamp> ts;

  friend bool operator==(const Sample&, const Sample&) = default;
};

struct ParseError {
  std::size_t line = 0;  // 1-based
  std::string detail;
};

struct ParseResult {
  std::vector<Sample> samples;
  std::optional<ParseError> error;

  bool ok() const { return !error.has_value(); }
};

/// Parses the line-oriented exposition format:
///
///   name{tag="value",...} <float> [<int ms timestamp>]
///
/// Lines starting with `#` are skipped, fields are separated by single
/// spaces, the line terminator is `\n`. Tag values escape `"` as `\"` and
/// `\` as `\\`. Any malformed line fails the whole body.
ParseResult parse(std::string_view body);

/// Renders samples back to exposition text, one line per sample, tags in
/// canonical sorted order. parse(render(s)) == s for finite values.
std::string render(const std::vector<Sample>& samples);

std::string render_value(double value);

}  // namespace minimon::exposition
