#pragma once
// Per-class duration/frequency plausibility rules and the checker used for
// dataset filtering, REAL scoring, and contrastive sample classification.
//
// An "occurrence" is one maximal run of a class inside the 288-bin window;
// daily totals are 5 minutes times the token count of the class.

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "oracle/activity.hpp"

namespace oracle {

struct ClassRule {
  std::optional<int> max_total_min;   // cap on per-day total minutes
  std::optional<int> min_total_min;   // floor on per-day total minutes
  std::optional<int> max_occ_min;     // cap on minutes of one occurrence
  std::optional<int> exact_occ;       // exact number of occurrences per day
  int min_occ = 0;                    // 0 means no restriction
};

enum class RuleKind {
  kMaxTotal,
  kMinTotal,
  kMaxOccurrence,
  kMinCount,
  kExactCount,
};

const std::string& rule_kind_name(RuleKind k);

struct Violation {
  int cls = 0;
  RuleKind kind = RuleKind::kMaxTotal;
  int observed = 0;  // minutes or occurrence count, matching `kind`
  int bound = 0;
};

struct PlausibilityReport {
  std::vector<Violation> violations;
  bool passed() const { return violations.empty(); }
};

class RuleSet {
 public:
  // Default rules: 5-12 h sleep once a day, 12 h caps on Outing/Rest/Work
  // totals, per-occurrence caps and at-least-once floors on the short
  // activities, Medicine capped at 20 min per occurrence (0.3 h rounded up
  // to the 5-minute grid).
  static RuleSet defaults();

  static RuleSet parse(std::istream& in);
  static RuleSet load(const std::string& path);
  void save(const std::string& path) const;
  std::string to_string() const;

  const ClassRule& rule(int cls) const { return rules_[cls]; }
  ClassRule& rule(int cls) { return rules_[cls]; }

  bool operator==(const RuleSet& o) const;

 private:
  std::vector<ClassRule> rules_{kNumClasses};
};

// Checks every rule of every class; the report lists one violation per
// violated (class, rule-kind) pair with the worst observed value.
PlausibilityReport check_plausibility(const DailySequence& seq,
                                      const RuleSet& rules);

}  // namespace oracle
