#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

// Seeded RNG with self-contained draw routines. std::mt19937_64 is portable
// bit-for-bit, but the std distributions are not, so the transforms below are
// written out by hand. Every consumer takes an explicit Rng; there is no
// global randomness anywhere in the library.

namespace dce {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(splitmix64(seed)) {}

  // Independent stream derived from (seed, stream id). Used to keep e.g.
  // batch shuffling and Gumbel sampling on separate streams.
  static Rng stream(std::uint64_t seed, std::uint64_t id) {
    return Rng(splitmix64(seed) ^ splitmix64(id * 0xd1342543de82ef95ULL + 1));
  }

  std::uint64_t next_u64() { return gen_(); }

  // Uniform on (0,1), never exactly 0 or 1.
  double uniform() {
    return (static_cast<double>(gen_() >> 11) + 0.5) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  std::uint64_t uniform_index(std::uint64_t n) {
    // multiply-shift bounded draw
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(gen_()) * n) >> 64);
  }

  bool bernoulli(double p) { return uniform() < p; }

  double normal() {
    // Box-Muller, first branch only; deterministic per call.
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  double gumbel() { return -std::log(-std::log(uniform())); }

  template <class T>
  void shuffle(std::vector<T>& v) {
    // Fisher-Yates with our own index draws, for cross-platform determinism.
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(uniform_index(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace dce
