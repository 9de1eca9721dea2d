#pragma once

#include <cstdint>
#include <cmath>
#include <limits>
#include <random>

namespace smil {

// All randomness in the project flows through this wrapper. std::mt19937_64
// has a fully specified output sequence, and the value mappings below avoid
// std::*_distribution (whose sequences are implementation-defined), so a
// seed reproduces the same stream on every platform and compiler.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [lo, hi], both ends inclusive. Unbiased via rejection.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const std::uint64_t span =
        static_cast<std::uint64_t>(hi) - static_cast<std::uint64_t>(lo) + 1;
    const std::uint64_t reject_below = (0 - span) % span;
    for (;;) {
      const std::uint64_t r = gen_();
      if (r >= reject_below) {
        return lo + static_cast<std::int64_t>(r % span);
      }
    }
  }

  // Standard normal via Box-Muller. Two uniforms per draw, no cached spare,
  // so the stream position after n draws is always 2n.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) {
      u1 = uniform();
    }
    const double u2 = uniform();
    constexpr double two_pi = 6.283185307179586476925286766559;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

 private:
  std::mt19937_64 gen_;
};

// Derives an independent stream seed from a master seed (splitmix64
// finalizer). Used to give each purpose (init, sampling, augmentation, ...)
// and each generated bag its own stream.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace smil
