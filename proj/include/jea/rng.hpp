#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace jea {

// Seeded stream with platform-independent draws. std::*_distribution output
// is implementation-defined, so only the raw 64-bit engine is used.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // [0, 1) with 53 bits of resolution.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Integer in [0, n). Rejection sampling keeps it unbiased.
  std::uint64_t below(std::uint64_t n) {
    if (n <= 1) return 0;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * std::numbers::pi * u2);
  }

  // Normal(0, std) redrawn until within +-2 std.
  double truncated_normal(double std) {
    double z;
    do {
      z = normal();
    } while (z < -2.0 || z > 2.0);
    return z * std;
  }

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      const auto j = below(i);
      std::iter_swap(first + (i - 1), first + j);
    }
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// SplitMix64 finalizer; derives independent stream seeds from (seed, tags).
constexpr std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                                    std::uint64_t c = 0) {
  return mix_seed(mix_seed(mix_seed(mix_seed(seed) ^ a) ^ b) ^ c);
}

// Tags naming the independent random streams derived from one run seed.
namespace stream_tag {
inline constexpr std::uint64_t init = 0x494e4954;
inline constexpr std::uint64_t geometric = 0x47454f4d;
inline constexpr std::uint64_t photometric = 0x50484f54;
inline constexpr std::uint64_t mask = 0x4d41534b;
inline constexpr std::uint64_t drop_path = 0x44524f50;
inline constexpr std::uint64_t synth = 0x53594e54;
inline constexpr std::uint64_t epoch = 0x45504f43;
inline constexpr std::uint64_t subsample = 0x53554253;
inline constexpr std::uint64_t probe = 0x50524f42;
inline constexpr std::uint64_t invariance = 0x494e5641;
}  // namespace stream_tag

}  // namespace jea
