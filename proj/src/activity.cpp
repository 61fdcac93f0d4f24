#include "oracle/activity.hpp"

#include <algorithm>
#include <array>
#include <cctype>

namespace oracle {

namespace {
const std::array<std::string, 13> kClassNames = {
    "Sleep",   "Outing", "Rest", "Work", "Hygiene",  "Toilet", "Dress",
    "Cook",    "Meal",   "Chore", "Snack", "Medicine", "MASK"};

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  return out;
}
}  // namespace

const std::string& class_name(int id) {
  if (id < 0 || id > kMaskId) {
    throw StructuralError("class id out of range: " + std::to_string(id));
  }
  return kClassNames[id];
}

int class_from_name(std::string_view name) {
  std::string n = lower(name);
  for (int i = 0; i <= kMaskId; ++i) {
    if (lower(kClassNames[i]) == n) return i;
  }
  return -1;
}

DailySequence::DailySequence(std::string id, std::vector<uint8_t> toks)
    : day_id(std::move(id)), tokens(std::move(toks)) {
  validate();
}

void DailySequence::validate() const {
  if (tokens.size() != kSeqLen) {
    throw StructuralError("daily sequence of day '" + day_id + "' has " +
                          std::to_string(tokens.size()) +
                          " tokens, expected 288");
  }
  for (int i = 0; i < kSeqLen; ++i) {
    if (tokens[i] >= kNumClasses) {
      throw StructuralError("day '" + day_id + "' bin " + std::to_string(i) +
                            " holds invalid class id " +
                            std::to_string(tokens[i]));
    }
  }
}

std::vector<Interval> to_intervals(const DailySequence& seq) {
  seq.validate();
  std::vector<Interval> out;
  int start = 0;
  for (int i = 1; i <= kSeqLen; ++i) {
    if (i == kSeqLen || seq.tokens[i] != seq.tokens[start]) {
      out.push_back({start, i, seq.tokens[start]});
      start = i;
    }
  }
  return out;
}

DailySequence from_intervals(const std::vector<Interval>& ivals,
                             std::string day_id) {
  auto describe = [](const Interval& iv) {
    return "[" + std::to_string(iv.start_bin) + "," +
           std::to_string(iv.end_bin) + ") " +
           (iv.cls >= 0 && iv.cls <= kMaskId ? class_name(iv.cls)
                                             : std::to_string(iv.cls));
  };
  DailySequence seq;
  seq.day_id = std::move(day_id);
  int cursor = 0;
  for (const Interval& iv : ivals) {
    if (iv.start_bin < 0 || iv.end_bin > kSeqLen ||
        iv.start_bin >= iv.end_bin) {
      throw StructuralError("interval out of range: " + describe(iv));
    }
    if (iv.cls < 0 || iv.cls >= kNumClasses) {
      throw StructuralError("interval has invalid class: " + describe(iv));
    }
    if (iv.start_bin < cursor) {
      throw StructuralError("interval overlaps previous one: " + describe(iv));
    }
    if (iv.start_bin > cursor) {
      throw StructuralError("gap before interval: " + describe(iv));
    }
    for (int i = iv.start_bin; i < iv.end_bin; ++i) {
      seq.tokens[i] = static_cast<uint8_t>(iv.cls);
    }
    cursor = iv.end_bin;
  }
  if (cursor != kSeqLen) {
    throw StructuralError("intervals end at bin " + std::to_string(cursor) +
                          ", expected 288");
  }
  return seq;
}

int hamming(const DailySequence& a, const DailySequence& b) {
  if (a.tokens.size() != b.tokens.size()) {
    throw StructuralError("hamming: length mismatch");
  }
  int d = 0;
  for (size_t i = 0; i < a.tokens.size(); ++i) {
    d += a.tokens[i] != b.tokens[i];
  }
  return d;
}

ConditionMask ConditionMask::from_flags(
    const std::vector<uint8_t>& unmasked_flags, const DailySequence& seq) {
  if (unmasked_flags.size() != kSeqLen) {
    throw StructuralError("condition mask flags must have length 288");
  }
  ConditionMask m;
  for (int i = 0; i < kSeqLen; ++i) {
    if (unmasked_flags[i]) m.fix(i, seq.tokens[i]);
  }
  return m;
}

void ConditionMask::fix(int bin, int cls) {
  if (bin < 0 || bin >= kSeqLen) {
    throw StructuralError("mask bin out of range: " + std::to_string(bin));
  }
  if (cls < 0 || cls >= kNumClasses) {
    throw StructuralError("mask class out of range: " + std::to_string(cls));
  }
  unmasked_[bin] = 1;
  fixed_[bin] = static_cast<uint8_t>(cls);
}

void ConditionMask::clear(int bin) {
  unmasked_[bin] = 0;
  fixed_[bin] = 0;
}

int ConditionMask::fixed_at(int bin) const {
  if (!is_unmasked(bin)) {
    throw StructuralError("bin " + std::to_string(bin) +
                          " is masked; no fixed activity");
  }
  return fixed_[bin];
}

int ConditionMask::unmasked_count() const {
  int n = 0;
  for (uint8_t f : unmasked_) n += f != 0;
  return n;
}

std::vector<int> ConditionMask::condition_tokens() const {
  std::vector<int> toks(kSeqLen, kMaskId);
  for (int i = 0; i < kSeqLen; ++i) {
    if (unmasked_[i]) toks[i] = fixed_[i];
  }
  return toks;
}

}  // namespace oracle
