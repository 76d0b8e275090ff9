#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace snet {

// Deterministic random helpers. std::mt19937_64 has a fixed portable output
// sequence; the distributions below are hand-rolled because the standard
// distribution adaptors are implementation-defined.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1) with 53 bits of randomness.
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Multiply-shift; bias is O(n / 2^64).
  uint64_t bounded(uint64_t n) {
    return static_cast<uint64_t>(
        (static_cast<__uint128_t>(gen_()) * n) >> 64);
  }

  // Standard normal via Box-Muller. One value per two uniforms; the spare
  // is discarded to keep the stream position easy to reason about.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
  }

 private:
  std::mt19937_64 gen_;
};

// splitmix64; used to derive independent per-step seeds from (seed, step).
inline uint64_t mix_seed(uint64_t seed, uint64_t step) {
  uint64_t z = seed + 0x9E3779B97F4A7C15ull * (step + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

}  // namespace snet
