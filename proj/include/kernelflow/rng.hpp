#pragma once
// Deterministic random sources. Two kinds:
//   * counter-based pure mixing for environment rows: bitwise-identical draws
//     from (seed, time, site) keys, O(1) memory no matter how large the
//     environment window gets;
//   * a small stateful xoshiro generator for path simulation, always seeded
//     explicitly. No std::random_device, no wall clock anywhere.

#include <cmath>
#include <cstdint>

namespace kflow {

// SplitMix64 finalizer (Vigna, public domain). Bijective, strong avalanche.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Key of one environment row: replica seed, time step r, lattice site x.
struct EnvKey {
  std::uint64_t seed = 0;
  std::int64_t r = 0;
  std::int64_t x = 0;
};

// Pure function of the key (plus a stream tag for multiple draws per key).
// Three chained finalizer rounds; the odd multipliers break up the lattice
// structure of nearby (r, x) pairs before each round.
constexpr std::uint64_t env_bits(const EnvKey& k, std::uint64_t stream = 0) {
  std::uint64_t h = mix64(k.seed);
  h = mix64(h ^ (static_cast<std::uint64_t>(k.r) * 0xd1342543de82ef95ULL));
  h = mix64(h ^ (static_cast<std::uint64_t>(k.x) * 0xaf251af3b0f025b5ULL));
  return mix64(h ^ stream);
}

// 53-bit mantissa uniform in [0, 1).
constexpr double to_unit(std::uint64_t bits) {
  return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

constexpr double env_uniform(const EnvKey& k, std::uint64_t stream = 0) {
  return to_unit(env_bits(k, stream));
}

// xoshiro256++ (Blackman & Vigna, public domain) for trajectory sampling.
struct Xoshiro256 {
  std::uint64_t s[4];

  explicit Xoshiro256(std::uint64_t seed = 1) {
    std::uint64_t z = seed;
    for (auto& w : s) w = mix64(z++);
  }

  static constexpr std::uint64_t rotl(std::uint64_t v, int k) {
    return (v << k) | (v >> (64 - k));
  }

  std::uint64_t next() {
    const std::uint64_t result = rotl(s[0] + s[3], 23) + s[0];
    const std::uint64_t t = s[1] << 17;
    s[2] ^= s[0];
    s[3] ^= s[1];
    s[1] ^= s[2];
    s[0] ^= s[3];
    s[2] ^= t;
    s[3] = rotl(s[3], 45);
    return result;
  }

  double uniform() { return to_unit(next()); }

  // Marsaglia polar method; spare value cached. Implementation-pinned so the
  // stream does not depend on the standard library build.
  bool has_spare = false;
  double spare = 0.0;
  double normal() {
    if (has_spare) {
      has_spare = false;
      return spare;
    }
    double u, v, q;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      q = u * u + v * v;
    } while (q >= 1.0 || q == 0.0);
    const double f = std::sqrt(-2.0 * std::log(q) / q);
    spare = v * f;
    has_spare = true;
    return u * f;
  }
};

}  // namespace kflow
