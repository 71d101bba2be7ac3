#pragma once

// Seeded randomness for the whole pipeline. Every random draw anywhere in the
// library flows from a single master seed through derive_seed(), so results
// are independent of thread scheduling and identical across reruns. The
// generators are spelled out here (splitmix64 + xoshiro256++) instead of
// relying on std:: distributions, whose output is implementation-defined.

#include <array>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <string_view>

namespace zmd {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

// Child seed for a named stage plus integer indices, e.g.
// derive_seed(master, "run", {r}) or derive_seed(slide, "cnn", {obj, plane, model}).
inline uint64_t derive_seed(uint64_t seed, std::string_view tag,
                            std::initializer_list<int64_t> indices = {}) {
  uint64_t s = splitmix64(seed ^ fnv1a64(tag));
  for (int64_t i : indices) s = splitmix64(s ^ static_cast<uint64_t>(i));
  return s;
}

// xoshiro256++ seeded via splitmix64.
class Rng {
 public:
  explicit Rng(uint64_t seed) {
    uint64_t s = seed;
    for (auto& w : state_) {
      s = splitmix64(s);
      w = s;
    }
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0,1) with 53-bit resolution.
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Unbiased integer in [0, n) via rejection.
  uint64_t uniform_index(uint64_t n) {
    if (n == 0) return 0;
    const uint64_t threshold = (0ull - n) % n;
    for (;;) {
      uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  // Box-Muller; both uniforms consumed per call, no cached spare.
  double normal(double mean = 0.0, double sd = 1.0) {
    double u1 = uniform01();
    double u2 = uniform01();
    while (u1 <= 0.0) u1 = uniform01();
    double r = std::sqrt(-2.0 * std::log(u1));
    return mean + sd * r * std::cos(6.283185307179586476925286766559 * u2);
  }

  // Gamma(k,1) for small integer k as a sum of exponentials.
  double gamma_int(int k) {
    double acc = 0.0;
    for (int i = 0; i < k; ++i) {
      double u = uniform01();
      while (u <= 0.0) u = uniform01();
      acc -= std::log(u);
    }
    return acc;
  }

  double beta(int a, int b) {
    double ga = gamma_int(a);
    double gb = gamma_int(b);
    double s = ga + gb;
    return s > 0.0 ? ga / s : 0.5;
  }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  std::array<uint64_t, 4> state_{};
};

}  // namespace zmd
