#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace dtlab {

// splitmix64 finalizer. Derives well-separated stream seeds from a base seed
// plus a stream index, so independent consumers (env noise, expert noise,
// batch sampling, dropout) never share a generator.
inline std::uint64_t mix_seed(std::uint64_t base, std::uint64_t stream) {
  std::uint64_t z = base + 0x9e3779b97f4a7c15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Seeded generator with fixed, documented mappings on top of std::mt19937
// (whose output sequence is pinned by the standard). The std <random>
// distributions are implementation-defined, so every draw used by the
// artifact is spelled out here:
//   uniform()      top 24 bits of one draw, scaled to [0, 1)
//   uniform_d()    53-bit double in [0, 1) from two draws (27 + 26 bits)
//   normal()       Box-Muller on uniform_d(), with the second deviate cached
//   index(n)       one draw modulo n
class Rng {
 public:
  explicit Rng(std::uint64_t seed)
      : gen_(static_cast<std::uint32_t>(seed ^ (seed >> 32))) {}

  float uniform() { return static_cast<float>(gen_() >> 8) * (1.0f / 16777216.0f); }

  double uniform_d() {
    const auto a = gen_() >> 5;  // 27 bits
    const auto b = gen_() >> 6;  // 26 bits
    return (static_cast<double>(a) * 67108864.0 + static_cast<double>(b)) /
           9007199254740992.0;
  }

  float normal() {
    if (has_spare_) {
      has_spare_ = false;
      return static_cast<float>(spare_);
    }
    const double u1 = 1.0 - uniform_d();  // (0, 1], keeps log finite
    const double u2 = uniform_d();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return static_cast<float>(r * std::cos(theta));
  }

  float normal(float sigma) { return sigma * normal(); }

  // Uniform draw from [lo, hi). Modulo bias is negligible for the small n
  // used here (dataset/window indices).
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(gen_()) % n; }

  double range(double lo, double hi) { return lo + (hi - lo) * uniform_d(); }

 private:
  std::mt19937 gen_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace dtlab
