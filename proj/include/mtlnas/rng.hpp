#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>

namespace mtlnas {

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Mixes a base seed with stream tags (step index, sample index, purpose) into
/// an independent seed. All randomness in the library is derived this way, so
/// any stream can be regenerated from (seed, tags) without carried state.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) {
  std::uint64_t h = splitmix64(seed);
  for (std::uint64_t t : tags) h = splitmix64(h ^ splitmix64(t + 0x632be59bd9b4e019ULL));
  return h;
}

/// Stream tags used with derive_seed.
enum class Stream : std::uint64_t {
  kData = 1,
  kSample,
  kBatch,
  kInit,
  kConcrete,
  kDiscretize,
  kPretrainA,
  kPretrainB,
  kRandomSearch,
  kAblation,
};

constexpr std::uint64_t tag(Stream s) { return static_cast<std::uint64_t>(s); }

/// Thin wrapper over mt19937_64 with distribution code written out so that
/// draws are identical across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  /// Uniform in the open interval (0, 1).
  double uniform() { return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Unbiased integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t threshold = (0 - n) % n;
    for (;;) {
      const std::uint64_t r = engine_();
      if (r >= threshold) return r % n;
    }
  }

  double normal() {
    const double u1 = uniform(), u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  /// Logistic(0, 1) via log(U) - log(1 - U).
  double logistic() {
    const double u = uniform();
    return std::log(u) - std::log1p(-u);
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace mtlnas
