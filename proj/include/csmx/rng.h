#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace csmx {

/// The single seeded generator a run draws all randomness from. Draws are
/// derived from raw 64-bit engine output so sequences are identical across
/// standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  /// Unbiased integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  bool bernoulli(double p) { return uniform() < p; }
  /// Standard normal via Box-Muller (no cached second variate).
  double normal();
  /// Normal(0, std) rejected outside [-2 std, 2 std].
  double truncated_normal(double std);

  std::string state() const;
  void restore(const std::string& state);

 private:
  std::mt19937_64 engine_;
};

}  // namespace csmx
