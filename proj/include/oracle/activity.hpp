#pragma once
// Domain vocabulary: the 12 activity classes, 288-bin daily sequences,
// run-length interval views, condition masks, and Hamming distance.

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "oracle/common.hpp"

namespace oracle {

inline constexpr int kNumClasses = 12;   // generatable activity classes
inline constexpr int kMaskId = 12;       // condition sequences only
inline constexpr int kVocabSize = 13;    // 12 classes + MASK
inline constexpr int kSeqLen = 288;      // 24 h at 5-minute bins
inline constexpr int kBinMinutes = 5;
inline constexpr int kSecondsPerDay = 86400;

// Fixed id <-> name bijection.
enum ActivityId : int {
  kSleep = 0,
  kOuting = 1,
  kRest = 2,
  kWork = 3,
  kHygiene = 4,
  kToilet = 5,
  kDress = 6,
  kCook = 7,
  kMeal = 8,
  kChore = 9,
  kSnack = 10,
  kMedicine = 11,
};

// Name of a class id; accepts kMaskId ("MASK"). Throws on other ids.
const std::string& class_name(int id);

// Inverse lookup, case-insensitive. Returns -1 for unknown names.
int class_from_name(std::string_view name);

// Exactly 288 activity tokens covering one day; never contains MASK.
struct DailySequence {
  std::string day_id;
  std::vector<uint8_t> tokens;  // size 288, values 0..11

  DailySequence() : tokens(kSeqLen, 0) {}
  DailySequence(std::string id, std::vector<uint8_t> toks);

  // Throws StructuralError if the invariants do not hold.
  void validate() const;

  bool operator==(const DailySequence& o) const { return tokens == o.tokens; }
};

// Half-open run of one class: [start_bin, end_bin).
struct Interval {
  int start_bin = 0;
  int end_bin = 0;  // exclusive
  int cls = 0;

  bool operator==(const Interval& o) const = default;
};

// Run-length view of a sequence; intervals tile [0, 288).
std::vector<Interval> to_intervals(const DailySequence& seq);

// Inverse of to_intervals. Throws StructuralError naming the first
// offending interval on gaps, overlaps, or out-of-range bins.
DailySequence from_intervals(const std::vector<Interval>& ivals,
                             std::string day_id = "");

// Number of differing positions. Throws StructuralError on length mismatch.
int hamming(const DailySequence& a, const DailySequence& b);

// Per-bin masked/unmasked flags plus the fixed activity of unmasked bins.
// The fixed value exists exactly where the flag says unmasked.
class ConditionMask {
 public:
  ConditionMask() : unmasked_(kSeqLen, 0), fixed_(kSeqLen, 0) {}

  static ConditionMask fully_masked() { return ConditionMask(); }

  // Mask whose unmasked bins copy `seq` wherever flags[i] is true.
  static ConditionMask from_flags(const std::vector<uint8_t>& unmasked_flags,
                                  const DailySequence& seq);

  void fix(int bin, int cls);
  void clear(int bin);

  bool is_unmasked(int bin) const { return unmasked_[bin] != 0; }
  int fixed_at(int bin) const;  // throws if bin is masked

  int unmasked_count() const;
  double mask_ratio() const {
    return 1.0 - static_cast<double>(unmasked_count()) / kSeqLen;
  }
  bool is_fully_masked() const { return unmasked_count() == 0; }

  // Model-facing condition tokens: activity id at unmasked bins, MASK else.
  std::vector<int> condition_tokens() const;

 private:
  std::vector<uint8_t> unmasked_;
  std::vector<uint8_t> fixed_;
};

}  // namespace oracle
