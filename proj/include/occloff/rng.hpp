#pragma once

#include <cmath>
#include <cstdint>

namespace occloff {

/// Deterministic splitmix64 generator. Every source of randomness in the
/// project goes through this so that runs are reproducible bit-for-bit from a
/// single seed, independent of platform library implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  /// Derive an independent stream from a seed and a stream id.
  static Rng fork(uint64_t seed, uint64_t stream) {
    Rng mix(seed);
    uint64_t a = mix.next_u64();
    Rng mix2(a ^ (stream * 0x9e3779b97f4a7c15ull));
    return Rng(mix2.next_u64());
  }

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). n must be > 0.
  uint64_t uniform_index(uint64_t n) { return next_u64() % n; }

  /// Standard normal via Box-Muller (pairs cached).
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double sigma) { return mean + sigma * normal(); }

 private:
  uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace occloff
