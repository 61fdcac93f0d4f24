#include "oracle/ingest.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>
#include <unordered_map>

namespace oracle {

namespace {

std::string trim_lower(std::string_view s) {
  size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  std::string out(s.substr(b, e - b));
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  return out;
}

const std::unordered_map<std::string, int>& consolidation_map() {
  static const std::unordered_map<std::string, int> map = [] {
    std::unordered_map<std::string, int> m;
    auto add = [&m](int cls, std::initializer_list<const char*> names) {
      for (const char* n : names) m[n] = cls;
    };
    add(kSleep, {"sleep", "sleep out of bed", "go to sleep", "nap", "wake up"});
    add(kOuting, {"leave home", "enter home", "step out", "single leave",
                  "single enter", "staff leave", "staff enter",
                  "single step out"});
    add(kRest, {"watch tv", "entertain guests", "read", "relax", "phone",
                "exercise", "pet activity", "sew"});
    add(kWork, {"work", "work on computer", "work at table", "work at desk"});
    add(kHygiene, {"personal hygiene", "groom", "bathe", "shower"});
    add(kToilet, {"toilet", "bed toilet transition"});
    add(kDress, {"dress"});
    add(kCook, {"cook", "cook breakfast", "cook lunch", "cook dinner"});
    add(kMeal, {"eat breakfast", "eat lunch", "eat dinner"});
    add(kChore, {"wash dishes", "wash breakfast dishes", "wash lunch dishes",
                 "wash dinner dishes", "laundry", "housekeeping",
                 "put groceries away"});
    add(kSnack, {"drink", "eat"});
    add(kMedicine, {"take medicine", "morning meds", "evening meds"});
    // The major class names map to themselves so preprocessed labels and
    // synthetic logs round-trip.
    for (int c = 0; c < kNumClasses; ++c) m[trim_lower(class_name(c))] = c;
    return m;
  }();
  return map;
}

// "HH:MM:SS" or "HH:MM:SS.ffffff" -> seconds since midnight, or -1.
int parse_time_of_day(const std::string& t) {
  if (t.size() < 8 || t[2] != ':' || t[5] != ':') return -1;
  for (int i : {0, 1, 3, 4, 6, 7}) {
    if (!std::isdigit(static_cast<unsigned char>(t[i]))) return -1;
  }
  int h = (t[0] - '0') * 10 + (t[1] - '0');
  int m = (t[3] - '0') * 10 + (t[4] - '0');
  int s = (t[6] - '0') * 10 + (t[7] - '0');
  if (t.size() > 8 && t[8] != '.') return -1;
  if (h > 23 || m > 59 || s > 59) return -1;
  return h * 3600 + m * 60 + s;
}

bool looks_like_date(const std::string& d) {
  if (d.size() != 10 || d[4] != '-' || d[7] != '-') return false;
  for (int i : {0, 1, 2, 3, 5, 6, 8, 9}) {
    if (!std::isdigit(static_cast<unsigned char>(d[i]))) return false;
  }
  return true;
}

}  // namespace

ParseResult parse_log(std::istream& in, const std::string& origin) {
  if (!in) throw IoError("unreadable log stream: " + origin);
  ParseResult result;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ls(line);
    std::vector<std::string> tokens;
    std::string tok;
    while (ls >> tok) tokens.push_back(tok);
    if (tokens.empty()) continue;
    auto diag = [&](const std::string& why) {
      result.diagnostics.push_back(origin + " line " +
                                   std::to_string(line_no) + ": " + why);
    };
    if (tokens.size() < 4) {
      diag("expected at least date, time, sensor, value");
      continue;
    }
    if (!looks_like_date(tokens[0])) {
      diag("bad date '" + tokens[0] + "'");
      continue;
    }
    int second = parse_time_of_day(tokens[1]);
    if (second < 0) {
      diag("bad time '" + tokens[1] + "'");
      continue;
    }
    if (tokens.size() == 4) continue;  // plain sensor reading, no annotation
    if (tokens.size() == 5) {
      diag("annotation without begin/end marker");
      continue;
    }
    std::string marker = trim_lower(tokens.back());
    if (marker != "begin" && marker != "end") {
      diag("marker '" + tokens.back() + "' is neither begin nor end");
      continue;
    }
    std::string label = tokens[4];
    for (size_t i = 5; i + 1 < tokens.size(); ++i) label += " " + tokens[i];
    result.events.push_back(
        {tokens[0], second, label, marker == "begin", line_no});
  }
  std::stable_sort(result.events.begin(), result.events.end(),
                   [](const RawEvent& a, const RawEvent& b) {
                     if (a.date != b.date) return a.date < b.date;
                     if (a.second != b.second) return a.second < b.second;
                     return a.line_no < b.line_no;
                   });
  return result;
}

int consolidate(std::string_view label) {
  const auto& map = consolidation_map();
  auto it = map.find(trim_lower(label));
  return it == map.end() ? -1 : it->second;
}

int SecondTimeline::label_id(const std::string& name) {
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == name) return static_cast<int>(i);
  }
  labels.push_back(name);
  return static_cast<int>(labels.size()) - 1;
}

SecondTimeline build_timeline(const std::vector<RawEvent>& events,
                              const std::string& day) {
  SecondTimeline tl;
  tl.day = day;
  tl.seconds.assign(kSecondsPerDay, -1);

  // Pair begin/end markers per label into [begin, end] second spans.
  struct Span {
    int begin, end, order;
    int label;
  };
  std::vector<Span> spans;
  std::map<std::string, std::pair<int, int>> open;  // label -> (begin, order)
  int order = 0;
  for (const RawEvent& ev : events) {
    if (ev.date != day) continue;
    auto it = open.find(ev.label);
    if (ev.is_begin) {
      if (it != open.end()) {
        // Repeated begin: close the previous span where the new one starts.
        spans.push_back({it->second.first, ev.second, it->second.second,
                         tl.label_id(ev.label)});
        open.erase(it);
      }
      open[ev.label] = {ev.second, order++};
    } else {
      if (it != open.end()) {
        spans.push_back({it->second.first, ev.second, it->second.second,
                         tl.label_id(ev.label)});
        open.erase(it);
      } else {
        // Unopened end: the activity was running since midnight.
        spans.push_back({0, ev.second, order++, tl.label_id(ev.label)});
      }
    }
  }
  for (const auto& [label, beg] : open) {
    // Unclosed begin: runs to the end of the day.
    spans.push_back({beg.first, kSecondsPerDay - 1, beg.second,
                     tl.label_id(label)});
  }
  if (spans.empty()) {
    throw EmptyDataError("no activities for day " + day);
  }

  // Paint in (begin, order) order so a later begin wins from its start
  // second while an enclosing earlier activity resumes afterwards.
  std::sort(spans.begin(), spans.end(), [](const Span& a, const Span& b) {
    if (a.begin != b.begin) return a.begin < b.begin;
    return a.order < b.order;
  });
  for (const Span& s : spans) {
    for (int t = s.begin; t <= s.end && t < kSecondsPerDay; ++t) {
      tl.seconds[t] = static_cast<int16_t>(s.label);
    }
  }
  // Boundary extension to 00:00:00 and 23:59:59.
  int first = 0;
  while (first < kSecondsPerDay && tl.seconds[first] < 0) ++first;
  int last = kSecondsPerDay - 1;
  while (last >= 0 && tl.seconds[last] < 0) --last;
  for (int t = 0; t < first; ++t) tl.seconds[t] = tl.seconds[first];
  for (int t = last + 1; t < kSecondsPerDay; ++t) tl.seconds[t] = tl.seconds[last];
  return tl;
}

void fill_other(SecondTimeline& timeline) {
  auto& sec = timeline.seconds;
  if (sec.size() != static_cast<size_t>(kSecondsPerDay)) {
    throw StructuralError("timeline must cover 86400 seconds");
  }
  bool any_labeled = false;
  for (int16_t v : sec) {
    if (v >= 0) {
      any_labeled = true;
      break;
    }
  }
  if (!any_labeled) {
    throw EmptyDataError("timeline for day " + timeline.day +
                         " is entirely Other");
  }
  if (sec.front() < 0 || sec.back() < 0) {
    throw StructuralError(
        "fill_other expects boundary-extended timelines (day " + timeline.day +
        ")");
  }
  int i = 0;
  while (i < kSecondsPerDay) {
    if (sec[i] >= 0) {
      ++i;
      continue;
    }
    int j = i;
    while (j < kSecondsPerDay && sec[j] < 0) ++j;
    int len = j - i;
    int head = (len + 1) / 2;  // ceil: predecessor takes the extra second
    int16_t before = sec[i - 1];
    int16_t after = sec[j];
    for (int t = i; t < i + head; ++t) sec[t] = before;
    for (int t = i + head; t < j; ++t) sec[t] = after;
    i = j;
  }
}

DailySequence discretize(const SecondTimeline& timeline) {
  // Consolidate each interned label once.
  std::vector<int> label_class(timeline.labels.size());
  for (size_t i = 0; i < timeline.labels.size(); ++i) {
    label_class[i] = consolidate(timeline.labels[i]);
  }
  DailySequence seq;
  seq.day_id = timeline.day;
  for (int b = 0; b < kSeqLen; ++b) {
    std::array<int, kNumClasses> count{};
    std::array<int, kNumClasses> first_second;
    first_second.fill(-1);
    int base = b * 300;
    for (int t = 0; t < 300; ++t) {
      int16_t lid = timeline.seconds[base + t];
      if (lid < 0) {
        throw StructuralError("discretize: Other second remains at " +
                              std::to_string(base + t));
      }
      int cls = label_class[lid];
      if (cls < 0) {
        throw StructuralError("discretize: label '" + timeline.labels[lid] +
                              "' has no consolidated class");
      }
      count[cls] += 1;
      if (first_second[cls] < 0) first_second[cls] = t;
    }
    int best = -1;
    for (int c = 0; c < kNumClasses; ++c) {
      if (count[c] == 0) continue;
      if (best < 0 || count[c] > count[best] ||
          (count[c] == count[best] && first_second[c] < first_second[best])) {
        best = c;
      }
    }
    seq.tokens[b] = static_cast<uint8_t>(best);
  }
  return seq;
}

FilterOutcome filter_dataset(const std::vector<DailySequence>& days,
                             const RuleSet& rules) {
  FilterOutcome out;
  for (const DailySequence& d : days) {
    PlausibilityReport report = check_plausibility(d, rules);
    if (report.passed()) {
      out.kept.push_back(d);
    } else {
      out.rejected.emplace_back(d.day_id, std::move(report));
    }
  }
  return out;
}

IngestResult ingest_logs(const std::vector<std::string>& paths) {
  IngestResult result;
  std::vector<RawEvent> all_events;
  for (const std::string& path : paths) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open raw log: " + path);
    ParseResult parsed = parse_log(f, path);
    for (auto& d : parsed.diagnostics) result.diagnostics.push_back(std::move(d));
    for (auto& e : parsed.events) all_events.push_back(std::move(e));
  }
  // Annotations outside the 12 major classes behave as unlabeled time.
  std::vector<RawEvent> usable;
  usable.reserve(all_events.size());
  for (auto& e : all_events) {
    if (consolidate(e.label) >= 0) {
      usable.push_back(std::move(e));
    }
  }
  std::stable_sort(usable.begin(), usable.end(),
                   [](const RawEvent& a, const RawEvent& b) {
                     if (a.date != b.date) return a.date < b.date;
                     if (a.second != b.second) return a.second < b.second;
                     return a.line_no < b.line_no;
                   });
  // Group by calendar day.
  size_t i = 0;
  while (i < usable.size()) {
    size_t j = i;
    while (j < usable.size() && usable[j].date == usable[i].date) ++j;
    std::vector<RawEvent> day_events(usable.begin() + i, usable.begin() + j);
    const std::string& day = usable[i].date;
    try {
      SecondTimeline tl = build_timeline(day_events, day);
      fill_other(tl);
      result.days.push_back(discretize(tl));
    } catch (const std::exception& e) {
      result.diagnostics.push_back("day " + day + " dropped: " + e.what());
    }
    i = j;
  }
  return result;
}

}  // namespace oracle
