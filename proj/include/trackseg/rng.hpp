#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace trackseg {

// Counter-based deterministic generator: splitmix64 finalizer applied to a
// derived key plus a draw counter. The same seed, fork labels, and draw order
// give the same stream on every platform. Fork before drawing to get
// independent named substreams.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : key_(mix(seed ^ 0x9e3779b97f4a7c15ull)) {}

  Rng fork(std::uint64_t label) const {
    Rng r(0);
    r.key_ = mix(key_ ^ mix(label + 0x632be59bd9b4e019ull));
    r.counter_ = 0;
    return r;
  }
  Rng fork(std::string_view name) const { return fork(fnv1a(name)); }

  std::uint64_t next_u64() { return mix(key_ + (++counter_) * 0xbf58476d1ce4e5b9ull); }

  // [0,1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // inclusive bounds; modulo bias is irrelevant at these ranges
  int uniform_int(int lo, int hi) {
    return lo + static_cast<int>(next_u64() % static_cast<std::uint64_t>(hi - lo + 1));
  }

  double gaussian() {
    double u1 = uniform();
    const double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

 private:
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;

  static std::uint64_t mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }
  static std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (char c : s) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001b3ull;
    }
    return h;
  }
};

}  // namespace trackseg
