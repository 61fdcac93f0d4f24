#include "oracle/dataset.hpp"

#include <fstream>
#include <sstream>

namespace oracle {

namespace {
constexpr const char* kHeader = "oracle-dataset v1";
}

void write_dataset(std::ostream& out, const std::vector<DailySequence>& days) {
  out << kHeader << "\n";
  for (const DailySequence& d : days) {
    out << d.day_id;
    for (int i = 0; i < kSeqLen; ++i) {
      out << ',' << static_cast<int>(d.tokens[i]);
    }
    out << "\n";
  }
}

void write_dataset_file(const std::string& path,
                        const std::vector<DailySequence>& days) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write dataset file: " + path);
  write_dataset(f, days);
}

std::vector<DailySequence> read_dataset(std::istream& in,
                                        const std::string& origin) {
  std::string header;
  if (!std::getline(in, header)) {
    throw ConfigError(origin + ": empty file, expected oracle-dataset v1");
  }
  if (!header.empty() && header.back() == '\r') header.pop_back();
  if (header != kHeader) {
    throw ConfigError(origin + ": not an oracle-dataset v1 file");
  }
  std::vector<DailySequence> days;
  std::string line;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string id;
    if (!std::getline(ls, id, ',')) {
      throw StructuralError(origin + " line " + std::to_string(line_no) +
                            ": missing day id");
    }
    std::vector<uint8_t> toks;
    toks.reserve(kSeqLen);
    std::string tok;
    while (std::getline(ls, tok, ',')) {
      int v;
      try {
        v = std::stoi(tok);
      } catch (const std::exception&) {
        throw StructuralError(origin + " line " + std::to_string(line_no) +
                              ": bad token '" + tok + "'");
      }
      if (v < 0 || v >= kNumClasses) {
        throw StructuralError(origin + " line " + std::to_string(line_no) +
                              ": class id out of range: " + tok);
      }
      toks.push_back(static_cast<uint8_t>(v));
    }
    if (toks.size() != kSeqLen) {
      throw StructuralError(origin + " line " + std::to_string(line_no) +
                            ": expected 288 tokens, got " +
                            std::to_string(toks.size()));
    }
    days.emplace_back(id, std::move(toks));
  }
  return days;
}

std::vector<DailySequence> read_dataset_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open dataset file: " + path);
  return read_dataset(f, path);
}

DatasetSplit split_dataset(std::vector<DailySequence> days, uint64_t seed) {
  if (days.size() < 10) {
    throw EmptyDataError("split needs at least 10 days, got " +
                         std::to_string(days.size()));
  }
  Rng rng(seed);
  rng.shuffle(days);
  size_t n = days.size();
  size_t n_val = n / 10;
  size_t n_test = n / 10;
  size_t n_train = n - n_val - n_test;
  DatasetSplit split;
  split.seed = seed;
  split.train.assign(days.begin(), days.begin() + n_train);
  split.val.assign(days.begin() + n_train, days.begin() + n_train + n_val);
  split.test.assign(days.begin() + n_train + n_val, days.end());
  return split;
}

void write_audit(
    std::ostream& out,
    const std::vector<std::pair<std::string, PlausibilityReport>>& rejections) {
  for (const auto& [day_id, report] : rejections) {
    for (const Violation& v : report.violations) {
      out << day_id << '\t' << class_name(v.cls) << '\t'
          << rule_kind_name(v.kind) << '\t' << v.observed << '\t' << v.bound
          << "\n";
    }
  }
}

void write_audit_file(
    const std::string& path,
    const std::vector<std::pair<std::string, PlausibilityReport>>& rejections) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write audit file: " + path);
  write_audit(f, rejections);
}

}  // namespace oracle
