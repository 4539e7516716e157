#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace gliocal {

// Deterministic random stream. All stochastic code in the library draws
// through this wrapper so that a (seed, stream) pair fixes every output
// bitwise, independent of platform RNG library details.
class Rng {
public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  // Independent substream: hash-mix the stream id into the seed.
  static Rng derive(std::uint64_t seed, std::uint64_t stream) {
    return Rng(splitmix64(seed ^ (0x9E3779B97F4A7C15ULL * (stream + 1))));
  }

  // Uniform on (0,1); never returns 0 so log() below is safe.
  double uniform() {
    return (static_cast<double>(gen_() >> 11) + 0.5) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller (one draw per call, no cached spare).
  double gaussian() {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  std::uint64_t raw() { return gen_(); }

  static std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
  }

private:
  std::mt19937_64 gen_;
};

}  // namespace gliocal
