#pragma once

#include <optional>
#include <regex>
#include <string>
#include <string_view>
#include <vector>

#include "minimon/core.hpp"
#include "minimon/tsdb.hpp"

namespace minimon::query {

enum class MatcherOp { Eq, Neq, Regex };

struct LabelMatcher {
  std::string tag;
  MatcherOp op = MatcherOp::Eq;
  std::string value;

  /// Prometheus convention: an absent tag behaves as the empty string.
  bool matches(const TagSet& tags) const;
};

struct Selector {
  std::string metric;
  std::vector<LabelMatcher> matchers;
};

enum class RangeFunc { AvgOverTime, MaxOverTime, MinOverTime, SumOverTime, CountOverTime, Rate };
enum class AggOp { Sum, Avg, Max, Min };

const char* range_func_name(RangeFunc f);
const char* agg_op_name(AggOp op);

struct QueryAST {
  std::optional<AggOp> agg;
  std::vector<std::string> agg_by;
  std::optional<RangeFunc> func;
  std::int64_t window_ms = 0;  // > 0 iff func is set
  Selector selector;

  /// Stable textual rendering used by golden tests and the CLI.
  std::string canonical() const;
};

struct SyntaxError {
  std::size_t pos = 0;  // 1-based character offset into the query text
  std::string message;

  std::string to_string() const;
};

struct ParseOutcome {
  std::optional<QueryAST> ast;
  std::optional<SyntaxError> error;

  bool ok() const { return ast.has_value(); }
};

/// Grammar:
///   expr    := [agg] [func "("] selector ["[" window "]"] [")"]
///   selector:= name ["{" matcher ("," matcher)* "}"]
///   matcher := tag op '"' value '"'        op in {=, !=, =~}
///   agg     := ("sum"|"avg"|"max"|"min") "by" "(" tag ("," tag)* ")"
///   window  := integer suffixed s|m|h|d, e.g. 5m, 1h, 12m, 1d
/// A window requires a range function and vice versa. Regex matchers are
/// validated at parse time and anchored to the whole value.
ParseOutcome parse_query(std::string_view text);

struct EvalOptions {
  /// Instant lookback for selector-only queries.
  std::int64_t lookback_ms = 5 * kMillisPerMinute;
};

struct SeriesResult {
  SeriesKey key;
  std::vector<std::pair<Timestamp, double>> points;
};

using Matrix = std::vector<SeriesResult>;

/// Evaluates at instants t = from, from+step, ... <= to.
///
/// Range functions read the half-open window (t - window, t]. Raw samples
/// are used whenever the series has any in the window; otherwise the
/// finest resolution with a finalized bin whose window_start lies in the
/// window substitutes bin aggregates for samples (avg for avg_over_time,
/// sum for sum_over_time, min/max likewise, counts summed; rate sees bin
/// averages placed at their window_start).
///
/// rate needs >= 2 points and divides the reset-clamped increase
/// (negative deltas clamped to 0 segment-wise) by the covered seconds.
///
/// `by` aggregation merges series sharing the listed tag values and drops
/// every other tag. Output series are sorted by canonical key.
Matrix eval(const tsdb::Store& store, const QueryAST& ast, Timestamp from, Timestamp to,
            std::int64_t step_ms, const EvalOptions& options = {});

/// Series selection used by eval: all active series whose name equals the
/// selector's metric and whose tags satisfy every matcher.
std::vector<tsdb::SeriesId> resolve_selector(const tsdb::Store& store, const Selector& selector);

}  // namespace minimon::query
