#pragma once
// Procedural surrogate days for desk-scale runs. Every emitted day passes
// the default plausibility rules by construction (verified, with resampling
// as a safety net), while block boundaries and optional activities carry
// enough seeded jitter to keep the corpus diverse.

#include <cstdint>
#include <vector>

#include "oracle/activity.hpp"
#include "oracle/rules.hpp"

namespace oracle {

struct SynthProfile {
  // All times in 5-minute bins.
  int wake_earliest = 72;   // 06:00
  int wake_latest = 102;    // 08:30
  double work_day_prob = 0.55;
  double outing_prob = 0.5;
  double cook_prob = 0.7;
  double snack_prob = 0.6;
  double medicine_prob = 0.5;
};

// Deterministic for a given (n, seed, profile); day_ids are synth-%05d.
std::vector<DailySequence> synth_generate(int n, uint64_t seed,
                                          const SynthProfile& profile = {});

}  // namespace oracle
