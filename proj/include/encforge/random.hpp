#pragma once

#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <utility>

namespace encforge {

/// PCG64 with the DXSM output permutation (128-bit LCG state, 64-bit output).
///
/// Output matches the reference "cheap multiplier" DXSM generator: the
/// permutation is applied to the pre-advance state. All derived
/// distributions below are implemented here rather than through <random>
/// so that streams are identical across standard libraries.
class Pcg64Dxsm {
 public:
  using result_type = std::uint64_t;
  using uint128 = unsigned __int128;

  explicit Pcg64Dxsm(std::uint64_t seed = 0, std::uint64_t stream = 0);

  static Pcg64Dxsm from_state(uint128 state, uint128 increment);

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()();

  /// Uniform integer in [0, bound), unbiased (Lemire's method).
  std::uint64_t below(std::uint64_t bound);
  /// Uniform double in [0, 1) with 53 random bits.
  double uniform();
  /// Standard normal via Box-Muller; caches the second variate.
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  bool bernoulli(double p) { return uniform() < p; }

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  uint128 state() const { return state_; }
  uint128 increment() const { return inc_; }

  /// Hex encoding of (state, increment, cached normal) for checkpoints.
  std::string serialize() const;
  static Pcg64Dxsm deserialize(const std::string& text);

 private:
  struct RawTag {};
  explicit Pcg64Dxsm(RawTag) {}
  void step() { state_ = state_ * kCheapMultiplier + inc_; }

  static constexpr std::uint64_t kCheapMultiplier = 0xda942042e4dd58b5ULL;

  uint128 state_ = 0;
  uint128 inc_ = 1;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Derives an independent generator for (seed, purpose, index) triples, so
/// per-step randomness can be recreated without replaying earlier steps.
Pcg64Dxsm derive_rng(std::uint64_t seed, std::uint64_t purpose, std::uint64_t index = 0);

}  // namespace encforge
