#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace sesom {

// Splittable deterministic generator built on splitmix64. Pure integer
// state transitions plus explicit float construction, so identical seed +
// identical call sequence reproduces bit-for-bit on any platform. Never
// share one instance across workers; split() a child stream instead.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53-bit resolution.
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Uniform integer in [0, n). Modulo bias is ~n/2^64, irrelevant at the
  // sizes used here, and keeps the draw count per call fixed.
  std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

  // Standard normal via Box-Muller. Both halves are computed and one is
  // discarded; no hidden cache state.
  double next_gaussian() {
    double u1 = next_double();
    while (u1 <= 0.0) u1 = next_double();
    const double u2 = next_double();
    const double two_pi = 6.283185307179586476925286766559;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
  }

  // Derives an independent child stream; advances this stream once.
  Rng split() { return Rng(next_u64() ^ 0xd1b54a32d192ed03ULL); }

  // Fisher-Yates.
  template <class T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(next_below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t state_;
};

}  // namespace sesom
