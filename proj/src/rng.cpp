#include "deepedit/rng.hpp"

#include <cmath>
#include <numbers>

namespace deepedit {

std::uint64_t stable_hash(std::string_view text) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

SeededRng::SeededRng(std::uint64_t seed) : seed_(seed), engine_(mix_seed(seed, 0)) {}

std::uint64_t SeededRng::next_u64() {
  ++draws_;
  return engine_();
}

double SeededRng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double SeededRng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

std::uint64_t SeededRng::below(std::uint64_t n) {
  // Rejection sampling keeps the result exactly uniform.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t v;
  do {
    v = next_u64();
  } while (v >= limit);
  return v % n;
}

bool SeededRng::bernoulli(double p) { return uniform() < p; }

double SeededRng::normal() {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

SeededRng SeededRng::fork(std::uint64_t stream) const {
  return SeededRng(mix_seed(seed_ ^ 0x5851f42d4c957f2dull, stream));
}

SeededRng SeededRng::fork(std::string_view tag) const { return fork(stable_hash(tag)); }

}  // namespace deepedit
