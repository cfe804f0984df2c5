#pragma once

#include <cstdint>
#include <random>

namespace hh {

// Seeded generator with explicit bit-level mappings. std::mt19937_64 output
// is standardized, but the std distributions are not, so every draw goes
// through one of the transforms below to stay bitwise reproducible across
// compilers and standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  // Uniform on the open interval (0, 1): 53 random bits centered in the bin.
  double uniform_open() {
    return (static_cast<double>(eng_() >> 11) + 0.5) * 0x1.0p-53;
  }

  // Uniform on [0, 1).
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Modulo bias is irrelevant at these ranges.
  std::uint64_t uniform_index(std::uint64_t n) { return eng_() % n; }

 private:
  std::mt19937_64 eng_;
};

}  // namespace hh
