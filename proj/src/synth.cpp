#include "oracle/synth.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>

#include "oracle/common.hpp"

namespace oracle {

namespace {

struct Block {
  int cls;
  int len;  // bins; zero-length blocks are dropped at assembly
};

// One candidate day. May rarely breach a bound after merging; the caller
// re-checks and resamples.
std::vector<Block> sample_blocks(Rng& rng, const SynthProfile& p) {
  auto u = [&rng](int lo, int hi) {  // inclusive
    return lo + rng.uniform_int(hi - lo + 1);
  };
  auto flip = [&rng](double prob) { return rng.uniform() < prob; };

  int wake = u(p.wake_earliest, p.wake_latest);
  bool work_day = flip(p.work_day_prob);
  bool outing = flip(p.outing_prob) || !work_day;

  int toilet_am = u(1, 2);
  int hygiene_am = u(2, 4);
  int dress_am = u(1, 2);
  int cook_bf = flip(p.cook_prob) ? u(2, 4) : 0;
  int meal_bf = u(3, 6);
  int cook_lu = flip(p.cook_prob) ? u(2, 3) : 0;
  int meal_lu = u(4, 7);
  int work1 = work_day ? u(30, 42) : 0;
  int work2 = work_day ? u(30, 42) : 0;
  int out1 = outing ? u(12, 36) : 0;
  int cook_di = flip(p.cook_prob) ? u(3, 6) : 0;
  int meal_di = u(4, 8);
  int chore_ev = u(2, 6);
  int snack_ev = flip(p.snack_prob) ? u(1, 3) : 0;
  int med_ev = flip(p.medicine_prob) ? 1 : 0;
  int hygiene_ev = u(2, 3);
  int toilet_ev = 1;

  int fixed = wake + toilet_am + hygiene_am + dress_am + cook_bf + meal_bf +
              cook_lu + meal_lu + work1 + work2 + out1 + cook_di + meal_di +
              chore_ev + snack_ev + med_ev + hygiene_ev + toilet_ev;
  int rest_budget = kSeqLen - fixed;
  // Keep Rest under its 12-hour daily cap; surplus becomes more outing.
  if (rest_budget > 140) {
    out1 += rest_budget - 140;
    rest_budget = 140;
  }
  // Split the rest budget over five slots spread through the day.
  int slots[5] = {0, 0, 0, 0, 0};
  double w[5], wsum = 0;
  for (double& x : w) {
    x = 0.2 + rng.uniform();
    wsum += x;
  }
  int assigned = 0;
  for (int i = 0; i < 4; ++i) {
    slots[i] = static_cast<int>(rest_budget * w[i] / wsum);
    assigned += slots[i];
  }
  slots[4] = rest_budget - assigned;

  std::vector<Block> blocks = {
      {kSleep, wake},        {kToilet, toilet_am}, {kHygiene, hygiene_am},
      {kDress, dress_am},    {kCook, cook_bf},     {kMeal, meal_bf},
      {kRest, slots[0]},     {kWork, work1},       {kOuting, out1},
      {kCook, cook_lu},      {kMeal, meal_lu},     {kRest, slots[1]},
      {kWork, work2},        {kRest, slots[2]},    {kChore, chore_ev},
      {kCook, cook_di},      {kMeal, meal_di},     {kSnack, snack_ev},
      {kRest, slots[3]},     {kMedicine, med_ev},  {kHygiene, hygiene_ev},
      {kToilet, toilet_ev},  {kRest, slots[4]},
  };
  return blocks;
}

DailySequence assemble(const std::vector<Block>& blocks, std::string day_id) {
  DailySequence seq;
  seq.day_id = std::move(day_id);
  int bin = 0;
  for (const Block& b : blocks) {
    for (int i = 0; i < b.len && bin < kSeqLen; ++i) {
      seq.tokens[bin++] = static_cast<uint8_t>(b.cls);
    }
  }
  if (bin != kSeqLen) {
    throw StructuralError("synth template covers " + std::to_string(bin) +
                          " bins");
  }
  return seq;
}

}  // namespace

std::vector<DailySequence> synth_generate(int n, uint64_t seed,
                                          const SynthProfile& profile) {
  if (n < 1) throw ConfigError("synth_generate needs n >= 1");
  RuleSet rules = RuleSet::defaults();
  Rng rng(mix_seed(seed));
  std::vector<DailySequence> days;
  days.reserve(n);
  for (int i = 0; i < n; ++i) {
    char id[32];
    std::snprintf(id, sizeof(id), "synth-%05d", i);
    DailySequence day;
    bool ok = false;
    for (int attempt = 0; attempt < 50 && !ok; ++attempt) {
      day = assemble(sample_blocks(rng, profile), id);
      ok = check_plausibility(day, rules).passed();
    }
    if (!ok) {
      throw NumericalError("synth_generate could not satisfy rules for " +
                           std::string(id));
    }
    days.push_back(std::move(day));
  }
  return days;
}

}  // namespace oracle
