#pragma once
// Shared plumbing: error types and a portable seeded RNG.
//
// All randomness in the toolkit flows through Rng instances passed
// explicitly; there is no hidden global state. Rng produces bit-exact
// streams for a given seed (mt19937_64 plus fixed uniform/normal
// transforms), so outputs are reproducible across runs and platforms.

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace oracle {

// Malformed values or containers (wrong length, bad ids, bad intervals).
struct StructuralError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite values where finite ones are required.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Unreadable/unwritable streams and files.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad user-facing configuration (CLI maps this to exit code 2).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A pipeline stage produced no data (CLI maps this to exit code 3).
struct EmptyDataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// splitmix64; used to derive independent child seeds from a parent seed.
inline uint64_t mix_seed(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t next() { return eng_(); }

  // [0, 1) with 53 random bits; avoids the unspecified behaviour of
  // std::uniform_real_distribution.
  double uniform() {
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  }

  // [0, n); n > 0.
  int uniform_int(int n) {
    return static_cast<int>(eng_() % static_cast<uint64_t>(n));
  }

  // Standard normal via Box-Muller (stateless: one value per two draws).
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  // Independent child stream derived from this stream plus a tag.
  Rng derive(uint64_t tag) { return Rng(mix_seed(eng_() ^ mix_seed(tag))); }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = eng_() % i;
      std::swap(v[i - 1], v[j]);
    }
  }

  std::string save_state() const {
    std::ostringstream os;
    os << eng_;
    return os.str();
  }
  void load_state(const std::string& s) {
    std::istringstream is(s);
    is >> eng_;
    if (!is) throw StructuralError("bad rng state string");
  }

 private:
  std::mt19937_64 eng_;
};

}  // namespace oracle
