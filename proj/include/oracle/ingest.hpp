#pragma once
// Raw annotated-log ingestion: parsing, per-day second timelines, boundary
// extension, Other-gap infill, 5-minute discretization, and filtering.
//
// Expected line grammar (UTF-8, whitespace separated):
//   YYYY-MM-DD HH:MM:SS[.ffffff] <sensor> <value> [<activity label> <begin|end>]
// Activity labels may contain spaces; the marker is always the last token.
// Sensor readings without an annotation are skipped.

#include <iosfwd>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "oracle/activity.hpp"
#include "oracle/dataset.hpp"
#include "oracle/rules.hpp"

namespace oracle {

struct RawEvent {
  std::string date;     // YYYY-MM-DD
  int second = 0;       // seconds since local midnight
  std::string label;    // original activity string
  bool is_begin = true;
  int line_no = 0;
};

struct ParseResult {
  std::vector<RawEvent> events;          // sorted by (date, second, line_no)
  std::vector<std::string> diagnostics;  // malformed lines, non-fatal
};

ParseResult parse_log(std::istream& in, const std::string& origin = "<log>");

// Table 2 consolidation: original label -> class id, or -1 for labels that
// fall outside the twelve major activities. Case-insensitive, trimmed.
int consolidate(std::string_view label);

// Per-second labels for one day. Entries index into `labels`; -1 is the
// unlabeled Other placeholder.
struct SecondTimeline {
  std::string day;
  std::vector<std::string> labels;  // interned original labels
  std::vector<int16_t> seconds;     // 86400 entries, -1 = Other

  int label_id(const std::string& name);
};

// Brackets each second by its begin/end pair, resolves overlaps by
// latest-begin-wins, closes dangling markers at the day edges, and extends
// the first/last labeled activity to the day boundaries. Throws
// EmptyDataError when the day has no annotated activity.
SecondTimeline build_timeline(const std::vector<RawEvent>& events,
                              const std::string& day);

// Replaces every maximal Other run: the first ceil(L/2) seconds take the
// preceding activity, the rest the subsequent one.
void fill_other(SecondTimeline& timeline);

// Majority vote per 300-second window over consolidated classes; ties go to
// the class whose first second in the window is earliest. Requires a
// timeline with no Other seconds and no unconsolidatable labels.
DailySequence discretize(const SecondTimeline& timeline);

struct FilterOutcome {
  std::vector<DailySequence> kept;
  std::vector<std::pair<std::string, PlausibilityReport>> rejected;
};

FilterOutcome filter_dataset(const std::vector<DailySequence>& days,
                             const RuleSet& rules);

struct IngestResult {
  std::vector<DailySequence> days;       // one per usable calendar day
  std::vector<std::string> diagnostics;  // parse + per-day problems
};

// Full pipeline over one or more log files: parse, consolidate, per-day
// timeline/infill/discretize. Days without annotations are skipped with a
// diagnostic. Events whose label consolidates outside the 12 classes are
// treated as unlabeled time.
IngestResult ingest_logs(const std::vector<std::string>& paths);

}  // namespace oracle
