#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>

namespace usdc {

// Counter-based wrapper around mt19937_64. `position()` counts raw engine
// extractions, so (seed, position) fully describes the stream state and
// restore() reproduces it bit-exactly via discard().
class RngState {
 public:
  explicit RngState(uint64_t seed = 0) : seed_(seed), pos_(0), eng_(seed) {}

  uint64_t seed() const { return seed_; }
  uint64_t position() const { return pos_; }

  void restore(uint64_t seed, uint64_t pos) {
    seed_ = seed;
    pos_ = pos;
    eng_.seed(seed);
    eng_.discard(pos);
  }

  uint64_t next_u64() {
    ++pos_;
    return eng_();
  }

  // Uniform on [0,1) with 53-bit resolution. Exactly one extraction.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Standard normal via Box-Muller, cosine branch only. Exactly two
  // extractions per call, so position stays a simple function of call counts.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    u1 = std::max(u1, 1e-300);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // Uniform integer in [0, n). Rejection sampling; consumes a variable but
  // seed-deterministic number of extractions.
  int uniform_int(int n) {
    if (n <= 0) throw std::invalid_argument("uniform_int: n must be positive");
    const uint64_t un = static_cast<uint64_t>(n);
    const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return static_cast<int>(x % un);
  }

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<long>(last - first);
    for (long i = n - 1; i > 0; --i) {
      std::swap(first[i], first[uniform_int(static_cast<int>(i + 1))]);
    }
  }

 private:
  uint64_t seed_;
  uint64_t pos_;
  std::mt19937_64 eng_;
};

}  // namespace usdc
