#include "oracle/rules.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <sstream>

namespace oracle {

namespace {
const std::array<std::string, 5> kKindNames = {
    "max-total", "min-total", "max-occurrence", "min-count", "exact-count"};
}

const std::string& rule_kind_name(RuleKind k) {
  return kKindNames[static_cast<int>(k)];
}

RuleSet RuleSet::defaults() {
  RuleSet rs;
  auto& r = rs.rules_;
  r[kSleep].min_total_min = 300;
  r[kSleep].max_total_min = 720;
  r[kSleep].exact_occ = 1;
  r[kOuting].max_total_min = 720;
  r[kRest].max_total_min = 720;
  r[kWork].max_total_min = 720;
  r[kHygiene].max_occ_min = 90;
  r[kHygiene].min_occ = 1;
  r[kToilet].max_occ_min = 30;
  r[kToilet].min_occ = 1;
  r[kDress].max_occ_min = 60;
  r[kDress].min_occ = 1;
  r[kCook].max_occ_min = 120;
  r[kMeal].max_occ_min = 120;
  r[kMeal].min_occ = 1;
  r[kChore].max_occ_min = 120;
  r[kChore].min_occ = 1;
  r[kSnack].max_occ_min = 120;
  r[kMedicine].max_occ_min = 20;
  return rs;
}

RuleSet RuleSet::parse(std::istream& in) {
  RuleSet rs;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string cls_name;
    if (!(ls >> cls_name)) continue;
    int cls = class_from_name(cls_name);
    if (cls < 0 || cls >= kNumClasses) {
      throw ConfigError("rules line " + std::to_string(line_no) +
                        ": unknown class '" + cls_name + "'");
    }
    ClassRule rule;
    std::string kv;
    while (ls >> kv) {
      auto eq = kv.find('=');
      if (eq == std::string::npos) {
        throw ConfigError("rules line " + std::to_string(line_no) +
                          ": expected key=value, got '" + kv + "'");
      }
      std::string key = kv.substr(0, eq);
      int value = 0;
      try {
        value = std::stoi(kv.substr(eq + 1));
      } catch (const std::exception&) {
        throw ConfigError("rules line " + std::to_string(line_no) +
                          ": bad integer in '" + kv + "'");
      }
      if (key == "max_total_min") {
        rule.max_total_min = value;
      } else if (key == "min_total_min") {
        rule.min_total_min = value;
      } else if (key == "max_occ_min") {
        rule.max_occ_min = value;
      } else if (key == "exact_occ") {
        rule.exact_occ = value;
      } else if (key == "min_occ") {
        rule.min_occ = value;
      } else {
        throw ConfigError("rules line " + std::to_string(line_no) +
                          ": unknown key '" + key + "'");
      }
    }
    rs.rules_[cls] = rule;
  }
  return rs;
}

RuleSet RuleSet::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open rules file: " + path);
  return parse(f);
}

std::string RuleSet::to_string() const {
  std::ostringstream os;
  os << "# Plausibility rules: one line per class, minutes unless noted.\n";
  os << "# Keys: max_total_min min_total_min max_occ_min exact_occ min_occ\n";
  for (int c = 0; c < kNumClasses; ++c) {
    const ClassRule& r = rules_[c];
    os << class_name(c);
    if (r.min_total_min) os << " min_total_min=" << *r.min_total_min;
    if (r.max_total_min) os << " max_total_min=" << *r.max_total_min;
    if (r.max_occ_min) os << " max_occ_min=" << *r.max_occ_min;
    if (r.exact_occ) os << " exact_occ=" << *r.exact_occ;
    if (r.min_occ > 0) os << " min_occ=" << r.min_occ;
    os << "\n";
  }
  return os.str();
}

void RuleSet::save(const std::string& path) const {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write rules file: " + path);
  f << to_string();
}

bool RuleSet::operator==(const RuleSet& o) const {
  for (int c = 0; c < kNumClasses; ++c) {
    const ClassRule &a = rules_[c], &b = o.rules_[c];
    if (a.max_total_min != b.max_total_min ||
        a.min_total_min != b.min_total_min ||
        a.max_occ_min != b.max_occ_min || a.exact_occ != b.exact_occ ||
        a.min_occ != b.min_occ) {
      return false;
    }
  }
  return true;
}

PlausibilityReport check_plausibility(const DailySequence& seq,
                                      const RuleSet& rules) {
  seq.validate();
  std::array<int, kNumClasses> total_bins{};
  std::array<int, kNumClasses> occ_count{};
  std::array<int, kNumClasses> longest_occ_bins{};
  for (const Interval& iv : to_intervals(seq)) {
    int len = iv.end_bin - iv.start_bin;
    total_bins[iv.cls] += len;
    occ_count[iv.cls] += 1;
    longest_occ_bins[iv.cls] = std::max(longest_occ_bins[iv.cls], len);
  }

  PlausibilityReport report;
  for (int c = 0; c < kNumClasses; ++c) {
    const ClassRule& r = rules.rule(c);
    int total_min = total_bins[c] * kBinMinutes;
    int longest_min = longest_occ_bins[c] * kBinMinutes;
    if (r.max_total_min && total_min > *r.max_total_min) {
      report.violations.push_back(
          {c, RuleKind::kMaxTotal, total_min, *r.max_total_min});
    }
    if (r.min_total_min && total_min < *r.min_total_min) {
      report.violations.push_back(
          {c, RuleKind::kMinTotal, total_min, *r.min_total_min});
    }
    if (r.max_occ_min && longest_min > *r.max_occ_min) {
      report.violations.push_back(
          {c, RuleKind::kMaxOccurrence, longest_min, *r.max_occ_min});
    }
    if (r.exact_occ && occ_count[c] != *r.exact_occ) {
      report.violations.push_back(
          {c, RuleKind::kExactCount, occ_count[c], *r.exact_occ});
    } else if (r.min_occ > 0 && occ_count[c] < r.min_occ) {
      report.violations.push_back(
          {c, RuleKind::kMinCount, occ_count[c], r.min_occ});
    }
  }
  return report;
}

}  // namespace oracle
