#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

#include "mbres/constants.hpp"

// Scaled modified Bessel functions of order zero.
//
// The Mattis-Bardeen conductivity ratios only ever need the products
// e^{-x} I0(x), e^{x} K0(x) and sinh(x) K0(x). The argument x = hbar*omega /
// (2 k_B T) grows like 1/T, so the unscaled I0/K0 overflow/underflow long
// before the products do. Everything here is evaluated in scaled form; the
// unscaled functions are never formed.
//
// Accuracy target: relative error <= 1e-10 over x in [1e-6, 1e5]; in practice
// the routines stay within a few 1e-15 of long-double quadrature references.

namespace mbres::specfun {

namespace detail {

inline void check_positive_finite(double x, const char* fn) {
  if (!(x > 0.0) || !std::isfinite(x)) {
    throw std::domain_error(std::string(fn) + ": argument must be positive and finite");
  }
}

// Power series sum for I0(x) = sum_k (x^2/4)^k / (k!)^2. All terms positive,
// so no cancellation; usable up to x ~ 30 before I0 itself nears overflow
// territory (I0(30) ~ 7.8e11).
inline double i0_series(double x) {
  const double q = 0.25 * x * x;
  double term = 1.0;
  double sum = 1.0;
  for (int k = 1; k < 400; ++k) {
    term *= q / (static_cast<double>(k) * static_cast<double>(k));
    sum += term;
    if (term < sum * 1e-17) break;
  }
  return sum;
}

// Asymptotic series for e^{-x} I0(x), x > 30: (2 pi x)^{-1/2} * sum_k a_k,
// a_k = prod_j (2j-1)^2 / (8^k k! x^k). Terms fall below 1e-16 well before
// the divergent tail sets in at this range.
inline double i0_scaled_asymptotic(double x) {
  double term = 1.0;
  double sum = 1.0;
  for (int k = 1; k < 60; ++k) {
    const double m = 2.0 * k - 1.0;
    term *= (m * m) / (8.0 * k * x);
    sum += term;
    if (term < sum * 1e-17) break;
  }
  return sum / std::sqrt(2.0 * constants::pi * x);
}

// e^{x} K0(x) for x <= 2 from the logarithmic power series
//   K0(x) = -(ln(x/2) + gamma) I0(x) + sum_{k>=1} H_k (x^2/4)^k / (k!)^2.
inline double k0_scaled_series(double x) {
  const double q = 0.25 * x * x;
  double term = 1.0;
  double hk = 0.0;
  double sum = 0.0;
  for (int k = 1; k < 80; ++k) {
    term *= q / (static_cast<double>(k) * static_cast<double>(k));
    hk += 1.0 / k;
    const double add = term * hk;
    sum += add;
    if (add < (sum + 1.0) * 1e-18) break;
  }
  const double k0 = -(std::log(0.5 * x) + constants::euler_gamma) * i0_series(x) + sum;
  return std::exp(x) * k0;
}

// e^{x} K0(x) for x > 2 via the Thompson-Barnett CF2 continued fraction
// (the order-zero specialization of the standard fractional-order I/K
// evaluation). Converges in a few dozen iterations at x = 2, faster beyond.
inline double k0_scaled_cf2(double x) {
  constexpr double eps = 1e-16;
  const double a1 = 0.25; // 1/4 - mu^2 with mu = 0
  double b = 2.0 * (1.0 + x);
  double d = 1.0 / b;
  double delh = d;
  double q1 = 0.0;
  double q2 = 1.0;
  double a = -a1;
  double c = a1;
  double q = c;
  double s = 1.0 + q * delh;
  for (int i = 2; i <= 10000; ++i) {
    a -= 2.0 * (i - 1);
    c = -a * c / i;
    const double qnew = (q1 - b * q2) / a;
    q1 = q2;
    q2 = qnew;
    q += c * qnew;
    b += 2.0;
    d = 1.0 / (b + a * d);
    delh = (b * d - 1.0) * delh;
    const double dels = q * delh;
    s += dels;
    if (std::abs(dels / s) < eps) break;
  }
  return std::sqrt(constants::pi / (2.0 * x)) / s;
}

} // namespace detail

/// e^{-x} I0(x), x > 0.
inline double bessel_i0_scaled(double x) {
  detail::check_positive_finite(x, "bessel_i0_scaled");
  if (x <= 30.0) return std::exp(-x) * detail::i0_series(x);
  return detail::i0_scaled_asymptotic(x);
}

/// e^{x} K0(x), x > 0.
inline double bessel_k0_scaled(double x) {
  detail::check_positive_finite(x, "bessel_k0_scaled");
  if (x <= 2.0) return detail::k0_scaled_series(x);
  return detail::k0_scaled_cf2(x);
}

/// sinh(x) K0(x), x > 0, overflow-safe for arbitrarily large x:
/// sinh(x) K0(x) = (1 - e^{-2x})/2 * [e^{x} K0(x)].
inline double sinh_k0(double x) {
  detail::check_positive_finite(x, "sinh_k0");
  return -0.5 * std::expm1(-2.0 * x) * bessel_k0_scaled(x);
}

} // namespace mbres::specfun
