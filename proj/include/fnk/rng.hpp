#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <numbers>

namespace fnk {

/// Deterministic generator used for every random draw in the library.
///
/// Algorithm: xoshiro256** (Blackman & Vigna, 2018) with its 256-bit state
/// expanded from the 64-bit seed by SplitMix64. Uniform doubles take the top
/// 53 bits of a draw; normals use the Box-Muller transform, caching the second
/// variate of each pair. All arithmetic is integer or IEEE-754 basic ops plus
/// std::log/std::sqrt/std::cos/std::sin, so a given seed yields the same stream
/// on any conforming platform with a correctly rounded libm.
///
/// The algorithm is frozen: changing it invalidates every checkpoint and
/// golden value in the test suite.
class Rng {
 public:
  struct State {
    std::array<std::uint64_t, 4> s{};
    bool has_spare = false;
    double spare = 0.0;

    bool operator==(const State&) const = default;
  };

  explicit Rng(std::uint64_t seed = 0) {
    std::uint64_t z = seed;
    for (auto& word : state_.s) word = splitmix64(z);
  }

  static Rng from_state(const State& st) {
    Rng r;
    r.state_ = st;
    return r;
  }

  const State& state() const noexcept { return state_; }

  std::uint64_t next_u64() noexcept {
    auto& s = state_.s;
    const std::uint64_t result = std::rotl(s[1] * 5, 7) * 9;
    const std::uint64_t t = s[1] << 17;
    s[2] ^= s[0];
    s[3] ^= s[1];
    s[1] ^= s[2];
    s[0] ^= s[3];
    s[2] ^= t;
    s[3] = std::rotl(s[3], 45);
    return result;
  }

  /// Uniform in [0, 1).
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n), unbiased (rejection on the top of the range).
  std::uint64_t below(std::uint64_t n) noexcept {
    if (n <= 1) return 0;
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t v;
    do {
      v = next_u64();
    } while (v >= limit);
    return v % n;
  }

  double normal() noexcept {
    if (state_.has_spare) {
      state_.has_spare = false;
      return state_.spare;
    }
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    state_.spare = radius * std::sin(angle);
    state_.has_spare = true;
    return radius * std::cos(angle);
  }

  double normal(double mean, double stddev) noexcept { return mean + stddev * normal(); }

 private:
  static std::uint64_t splitmix64(std::uint64_t& x) noexcept {
    std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  State state_;
};

}  // namespace fnk
