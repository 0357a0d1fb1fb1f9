#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace psec {

// Counter-based pseudo-random stream. Same seed gives the same sequence on
// any platform; split() derives an independent reproducible substream.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed) : key_(finalize(seed ^ kKeyTweak)) {}

  std::uint64_t next_u64() {
    std::uint64_t z = key_ + (++counter_) * 0x9e3779b97f4a7c15ULL;
    return finalize(z);
  }

  // Uniform double in [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Integer in [0, n).
  std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

  // Standard normal via Box-Muller. Uses only exp-free transcendentals
  // (log, sqrt, cos, sin); the spare value is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    // u1 in (0, 1] so log is finite.
    double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
    double u2 = uniform();
    double mag = std::sqrt(-2.0 * std::log(u1));
    double ang = 2.0 * std::numbers::pi * u2;
    spare_ = mag * std::sin(ang);
    has_spare_ = true;
    return mag * std::cos(ang);
  }

  SeededRng split() { return SeededRng(next_u64() ^ kSplitTweak); }

  std::uint64_t key() const { return key_; }

 private:
  static constexpr std::uint64_t kKeyTweak = 0x243f6a8885a308d3ULL;
  static constexpr std::uint64_t kSplitTweak = 0xda3e39cb94b95bdbULL;

  static std::uint64_t finalize(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace psec
