#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace ufc {

// splitmix64 step. All randomness in the project flows through this so runs
// are reproducible independent of platform and standard-library version.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9E3779B97F4A7C15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() { return splitmix64(state_); }

  /// Uniform double in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n), n > 0.
  int uniform_int(int n) { return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n)); }

  /// Standard normal via Box-Muller. Two draws per call, no cached spare, so
  /// copies of an Rng replay identically.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  bool bernoulli(double p) { return uniform() < p; }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
      const int j = uniform_int(i + 1);
      std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(j)]);
    }
  }

 private:
  std::uint64_t state_;
};

// Derives the substream for (master seed, stage name, consumer id) by chaining
// splitmix64 over the xor-mixed components. Every RNG consumer in the pipeline
// gets its stream this way, so stage outputs do not depend on execution order.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view stage, std::uint64_t consumer) {
  std::uint64_t s = master ^ fnv1a64(stage);
  std::uint64_t a = splitmix64(s);
  s = a ^ consumer;
  return splitmix64(s);
}

inline Rng rng_stream(std::uint64_t master, std::string_view stage, std::uint64_t consumer = 0) {
  return Rng(derive_seed(master, stage, consumer));
}

}  // namespace ufc
