#pragma once

#include <cmath>
#include <complex>
#include <cstdint>
#include <random>

#include "mbres/constants.hpp"

namespace mbres::rng {

// All randomness in the toolkit flows through this wrapper: mt19937_64 with a
// fixed uniform mapping and an explicit Box-Muller transform, so streams are
// reproducible bit-for-bit for a given seed independent of the standard
// library's distribution implementations. The identifier below is recorded in
// output headers.
inline constexpr const char* algorithm_id = "mt19937_64+boxmuller-v1";

class SeededRng {
public:
  explicit SeededRng(std::uint64_t seed) : eng_(seed) {}

  // uniform in (0, 1]
  double uniform01() {
    return (static_cast<double>(eng_() >> 11) + 1.0) * 0x1.0p-53;
  }

  double gaussian() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 = uniform01();
    const double u2 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double th = 2.0 * constants::pi * u2;
    spare_ = r * std::sin(th);
    have_spare_ = true;
    return r * std::cos(th);
  }

  std::complex<double> complex_gaussian() {
    return {gaussian(), gaussian()};
  }

private:
  std::mt19937_64 eng_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

} // namespace mbres::rng
