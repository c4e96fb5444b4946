#pragma once

#include <array>
#include <cstdint>

namespace stepdpo {

/// Philox4x32-10 block function (Salmon, Moraes, Dror, Shaw 2011).
///
/// Maps a 128-bit counter and a 64-bit key to 128 pseudo-random bits. The
/// multipliers and Weyl constants are the published ones, so any
/// implementation of Philox4x32-10 reproduces the same stream.
std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> counter,
                                        std::array<std::uint32_t, 2> key);

/// SplitMix64 finalizer; used to derive independent seeds.
std::uint64_t splitmix64(std::uint64_t x);

/// Combine a base seed with stream labels into a new 64-bit seed.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0);

/// Counter-based generator: key = seed, counter = (block index, stream).
///
/// The n-th 32-bit output depends only on (seed, stream, n), never on
/// platform or library state.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

  std::uint32_t next_u32();
  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  /// Uniform integer in [lo, hi] (inclusive), unbiased by rejection.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
  /// Standard normal via Box-Muller (one draw per call, no caching).
  double normal();

 private:
  void refill();

  std::array<std::uint32_t, 2> key_;
  std::uint64_t stream_;
  std::uint64_t block_ = 0;
  std::array<std::uint32_t, 4> buf_{};
  int pos_ = 4;
};

}  // namespace stepdpo
