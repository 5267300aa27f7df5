#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <stdexcept>

namespace retainkv {

// Error categories. The CLI maps them to process exit codes:
// ConfigError -> 2, DataError -> 3, anything else -> 1.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// 64-bit FNV-1a. Used to check that head training never touches the backbone.
inline uint64_t fnv1a64(const void* p, size_t n,
                        uint64_t h = 1469598103934665603ull) {
  const unsigned char* b = static_cast<const unsigned char*>(p);
  for (size_t i = 0; i < n; ++i) {
    h ^= b[i];
    h *= 1099511628211ull;
  }
  return h;
}

// Stateless uniform in [0, 1) keyed on a tuple of integers. Unlike a stream
// of draws, the value for a key never depends on what else was drawn, so
// per-position scores come out identical no matter how work is chunked.
inline double hash_uniform(std::initializer_list<uint64_t> keys) {
  uint64_t h = 1469598103934665603ull;
  for (uint64_t k : keys) h = fnv1a64(&k, sizeof(k), h);
  h ^= h >> 30;
  h *= 0xbf58476d1ce4e5b9ull;
  h ^= h >> 27;
  h *= 0x94d049bb133111ebull;
  h ^= h >> 31;
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

// Seeded RNG. mt19937_64 is pinned by the standard; the distributions are
// hand-rolled because std::normal_distribution and friends are
// implementation-defined, which would tie test vectors to one libstdc++.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t raw() { return eng_(); }

  // uniform in [0, 1), 53 bits of entropy
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // integer in [0, n)
  uint64_t below(uint64_t n) {
    return static_cast<uint64_t>(
        (static_cast<unsigned __int128>(eng_()) * n) >> 64);
  }

  // standard normal, Box-Muller; one value per call so the stream position
  // stays predictable
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(6.283185307179586476925286766559 * u2);
  }

  double normal(double mean, double std) { return mean + std * normal(); }

  std::mt19937_64& engine() { return eng_; }

 private:
  std::mt19937_64 eng_;
};

}  // namespace retainkv
