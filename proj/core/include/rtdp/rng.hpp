#pragma once

#include <cmath>
#include <cstdint>

namespace rtdp {

// splitmix64 generator. One u64 of state, so checkpointing the stream is a
// single integer and the sequence is identical on every platform.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n). Modulo bias is immaterial at the n used here.
  uint64_t below(uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

  // Box-Muller, no spare caching so draws map 1:1 onto the u64 stream.
  double normal(double mean, double stddev) {
    const double u1 = uniform01();
    const double u2 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(1.0 - u1));
    return mean + stddev * r * std::cos(6.283185307179586 * u2);
  }

  uint64_t state() const { return state_; }

 private:
  uint64_t state_;
};

// Deterministic seed derivation for independent sub-streams (per-batch
// masking, per-step sampling). Never reuse a raw seed across purposes.
inline uint64_t mix_seed(uint64_t a, uint64_t b) {
  Rng r(a ^ (b + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2)));
  return r.next_u64();
}

inline uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c) {
  return mix_seed(mix_seed(a, b), c);
}

}  // namespace rtdp
