#pragma once

#include <cmath>
#include <cstdint>

#include "coldscat/common.hpp"

namespace coldscat {

// Counter-based generator: every output is a pure function of
// (key, counter), so results never depend on which thread draws first.
// Streams are keyed by (seed, stream, substream); the harness uses
// (config seed, sweep point, ensemble member).
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0,
                      std::uint64_t substream = 0) {
    key_ = mix(seed + 0x9E3779B97F4A7C15ull);
    key_ = mix(key_ ^ mix(stream + 0xBF58476D1CE4E5B9ull));
    key_ = mix(key_ ^ mix(substream + 0x94D049BB133111EBull));
  }

  std::uint64_t next_u64() { return mix(key_ + (++counter_) * 0x9E3779B97F4A7C15ull); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; platform-stable (no libm distribution).
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * kPi * u2;
    spare_ = radius * std::sin(angle);
    have_spare_ = true;
    return radius * std::cos(angle);
  }

  Vec3 normal3() {
    // Evaluation order of braced init is unspecified across compilers for
    // some constructs; draw explicitly.
    const double x = normal();
    const double y = normal();
    const double z = normal();
    return Vec3(x, y, z);
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ull;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBull;
    z ^= z >> 31;
    return z;
  }

  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace coldscat
