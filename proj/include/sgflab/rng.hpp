#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>

namespace sgflab {

// Independent stream identifiers. Values are part of the reproducibility
// contract; do not renumber.
enum class Purpose : std::uint64_t {
  inputs = 1,
  teacher = 2,
  label_noise = 3,
  wishart = 4,
  minibatch = 5,
  sgf_noise = 6,
  init_w1 = 7,
  init_w2 = 8,
  test_inputs = 9,
  test_noise = 10,
  monte_carlo = 11,
  init_w = 12,
};

inline constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Counter-based generator: output k of stream (seed, purpose, index) is
// mix64(key + k * golden), so streams never share state. Normals use the
// Box-Muller transform on uniforms in (0, 1].
class Rng {
 public:
  using result_type = std::uint64_t;

  Rng(std::uint64_t seed, Purpose purpose, std::uint64_t index = 0)
      : key_(mix64(mix64(seed) ^ mix64(static_cast<std::uint64_t>(purpose) * 0xd1b54a32d192ed03ULL +
                                       index))) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() { return mix64(key_ + 0x9e3779b97f4a7c15ULL * counter_++); }

  // Uniform on (0, 1].
  double uniform() { return (static_cast<double>((*this)() >> 11) + 1.0) * 0x1.0p-53; }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double r = std::sqrt(-2.0 * std::log(uniform()));
    const double phi = 2.0 * std::numbers::pi * uniform();
    spare_ = r * std::sin(phi);
    has_spare_ = true;
    return r * std::cos(phi);
  }

  double normal(double mean, double sd) { return mean + sd * normal(); }

  // Unbiased integer in [0, n) by multiply-shift with rejection.
  std::uint64_t index(std::uint64_t n) {
    unsigned __int128 m = static_cast<unsigned __int128>((*this)()) * n;
    auto low = static_cast<std::uint64_t>(m);
    if (low < n) {
      const std::uint64_t t = (0 - n) % n;
      while (low < t) {
        m = static_cast<unsigned __int128>((*this)()) * n;
        low = static_cast<std::uint64_t>(m);
      }
    }
    return static_cast<std::uint64_t>(m >> 64);
  }

  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace sgflab
