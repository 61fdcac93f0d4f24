#pragma once
// The `oracle-dataset v1` file format, the seeded 8:1:1 split, and the
// rejection audit format.
//
// Dataset files are line-oriented and bit-exact reproducible:
//   oracle-dataset v1
//   day_id,<288 comma-separated class ids>

#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "oracle/activity.hpp"
#include "oracle/rules.hpp"

namespace oracle {

void write_dataset(std::ostream& out, const std::vector<DailySequence>& days);
void write_dataset_file(const std::string& path,
                        const std::vector<DailySequence>& days);

// Throws ConfigError if the header is not `oracle-dataset v1`, and
// StructuralError on malformed day lines.
std::vector<DailySequence> read_dataset(std::istream& in,
                                        const std::string& origin = "<stream>");
std::vector<DailySequence> read_dataset_file(const std::string& path);

struct DatasetSplit {
  std::vector<DailySequence> train, val, test;
  uint64_t seed = 0;
};

// Deterministic shuffle by seed, then 80/10/10 with remainders assigned to
// train. Throws EmptyDataError when fewer than 10 days are supplied.
DatasetSplit split_dataset(std::vector<DailySequence> days, uint64_t seed);

// One line per rejected day:
// day_id<TAB>class<TAB>rule-kind<TAB>observed<TAB>bound
void write_audit(std::ostream& out,
                 const std::vector<std::pair<std::string, PlausibilityReport>>&
                     rejections);
void write_audit_file(
    const std::string& path,
    const std::vector<std::pair<std::string, PlausibilityReport>>& rejections);

}  // namespace oracle
