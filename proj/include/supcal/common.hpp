#pragma once

// Shared plumbing: error types, stable hashing, and deterministic random
// draws. Everything downstream assumes these are bit-stable across platforms,
// which is why bounded ints and unit doubles are derived from the raw
// mt19937_64 stream instead of std::uniform_*_distribution (those are
// implementation-defined).

#include <cstdint>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace supcal {

// Probabilities are floored at this value before any log or division.
inline constexpr double kProbFloor = 1e-12;

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Bad argument values, dimension mismatches, malformed numeric state.
class ValueError : public Error {
 public:
  using Error::Error;
};

// Dataset, config, or model file could not be parsed.
class IngestError : public Error {
 public:
  using Error::Error;
};

// Network-level failure after retries were exhausted.
class TransportError : public Error {
 public:
  using Error::Error;
};

// The remote endpoint answered, but not in the shape the protocol requires.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

// A class label never appears in a generated dataset.
class CoverageError : public Error {
 public:
  using Error::Error;
};

// Objective or gradient became non-finite for every attempted start.
class NumericError : public Error {
 public:
  using Error::Error;
};

// No context size survived the skip rules, so no model can be trained.
class UnsupportedTaskError : public Error {
 public:
  using Error::Error;
};

// FNV-1a, 64-bit. Used wherever a text or id sequence has to map to a seed.
inline std::uint64_t fnv1a64(std::string_view bytes,
                             std::uint64_t h = 1469598103934665603ULL) {
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64_u64(std::uint64_t v, std::uint64_t h) {
  for (int i = 0; i < 8; ++i) {
    h ^= static_cast<unsigned char>(v >> (8 * i));
    h *= 1099511628211ULL;
  }
  return h;
}

// splitmix64 step; decorrelates seeds derived from small integers.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  return mix64(base ^ mix64(stream));
}

// Uniform integer in [0, bound) via Lemire rejection on the raw stream.
inline std::uint64_t rng_below(std::mt19937_64& rng, std::uint64_t bound) {
  if (bound == 0) throw ValueError("rng_below: bound must be positive");
  while (true) {
    std::uint64_t x = rng();
    __uint128_t m = static_cast<__uint128_t>(x) * bound;
    std::uint64_t lo = static_cast<std::uint64_t>(m);
    if (lo >= bound || lo >= (0 - bound) % bound) {
      return static_cast<std::uint64_t>(m >> 64);
    }
  }
}

// Uniform double in [0, 1) with 53 random bits.
inline double rng_unit(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Standard normal via Box-Muller. One value per call; the paired value is
// discarded so the draw count stays predictable.
inline double rng_normal(std::mt19937_64& rng) {
  double u1 = rng_unit(rng);
  double u2 = rng_unit(rng);
  if (u1 < 1e-300) u1 = 1e-300;
  return std::sqrt(-2.0 * std::log(u1)) *
         std::cos(2.0 * 3.14159265358979323846 * u2);
}

}  // namespace supcal
