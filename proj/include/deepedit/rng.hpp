#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace deepedit {

// 64-bit FNV-1a; stable across platforms (std::hash is not).
std::uint64_t stable_hash(std::string_view text);

// SplitMix64 finalizer, used to derive substream seeds.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

/// Deterministic random stream. The same seed and the same sequence of calls
/// always produce the same values on every platform: the engine is the
/// standardized mt19937_64 and all distributions are implemented here rather
/// than through the implementation-defined <random> distributions.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed = 0);

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t draws() const noexcept { return draws_; }

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 bits of resolution.
  double uniform();
  double uniform(double lo, double hi);
  /// Uniform integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n);
  bool bernoulli(double p);
  /// Standard normal via Box-Muller (no cached second value).
  double normal();

  /// Independent substream; does not advance this stream.
  SeededRng fork(std::uint64_t stream) const;
  SeededRng fork(std::string_view tag) const;

 private:
  std::uint64_t seed_;
  std::uint64_t draws_ = 0;
  std::mt19937_64 engine_;
};

}  // namespace deepedit
