#pragma once

// Deterministic, serializable RNG. xoshiro256** core with splitmix64 seeding;
// all draws go through this type so every randomized operation in the library
// is reproducible from an explicit 64-bit seed. Nothing here touches global
// state: concurrent use with independent instances is safe.

#include <array>
#include <cmath>
#include <cstdint>

#include "sdflow/core.hpp"

namespace sdflow {

inline uint64_t splitmix64(uint64_t& x) {
  x += 0x9e3779b97f4a7c15ULL;
  uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

class Rng {
public:
  Rng() : Rng(0x5d0f1e2d3c4b5a69ULL) {}

  explicit Rng(uint64_t seed) {
    uint64_t sm = seed;
    for (auto& w : s_) w = splitmix64(sm);
  }

  // Independent stream keyed by (seed, stream, counter); used to re-derive
  // per-iteration randomness so training can resume mid-run bit-exactly.
  static Rng derive(uint64_t seed, uint64_t stream, uint64_t counter = 0) {
    uint64_t sm = seed ^ (0x9e3779b97f4a7c15ULL * (stream + 1));
    sm = splitmix64(sm) ^ (counter * 0xda942042e4dd58b5ULL);
    return Rng(splitmix64(sm));
  }

  uint64_t next_u64() {
    auto rotl = [](uint64_t x, int k) { return (x << k) | (x >> (64 - k)); };
    uint64_t result = rotl(s_[1] * 5, 7) * 9;
    uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // uniform in [0, 1)
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  long uniform_int(long n) {  // [0, n)
    return long(next_u64() % uint64_t(n));
  }

  // Box-Muller; one fresh pair per call, second value discarded so the state
  // sequence is a pure function of the call count.
  double normal() {
    double u1 = uniform(), u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  std::array<uint64_t, 4> state() const { return s_; }
  void set_state(const std::array<uint64_t, 4>& s) { s_ = s; }

  template <class R>
  void fill_normal(Tensor<R>& t, double mean = 0.0, double sigma = 1.0) {
    for (auto& x : t.v) x = static_cast<R>(mean + sigma * normal());
  }
  template <class R>
  void fill_uniform(Tensor<R>& t, double lo, double hi) {
    for (auto& x : t.v) x = static_cast<R>(uniform(lo, hi));
  }

private:
  std::array<uint64_t, 4> s_{};
};

}  // namespace sdflow
