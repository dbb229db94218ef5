#pragma once

#include <cmath>
#include <optional>
#include <stdexcept>

#include "mbres/constants.hpp"
#include "mbres/specfun.hpp"

// Complex conductivity ratios of a superconductor in the low-temperature,
// low-frequency limit (k_B T << Delta, hbar*omega << Delta) of the
// Mattis-Bardeen model, and the thermal quasiparticle density.
//
// Conventions:
//  - Strict SI throughout: kelvin, hertz, joule, second, 1/m^3.
//  - Delta is identified with the zero-temperature gap Delta0 = 1.764 k_B T_c
//    everywhere (no temperature-dependent gap). Near T_c/2 this is a <~10%
//    approximation; the ratios lose validity near T_c regardless.
//  - N0 (single-particle density of states at the Fermi level, per J*m^3) has
//    no default. Thermal-mode quantities cancel N0 algebraically and never
//    require it; generic-n_qp quantities demand it explicitly. Any consistent
//    (energy, volume) unit pair works as long as N0 and n_qp share it.

namespace mbres::mb {

struct MaterialParams {
  double Tc_K = 0.0;                    // critical temperature
  double tau0_s = 0.0;                  // electron-phonon interaction time
  std::optional<double> N0_per_J_m3 {}; // density of states at E_F

  void validate() const {
    if (!(Tc_K > 0.0) || !std::isfinite(Tc_K))
      throw std::domain_error("MaterialParams: Tc must be positive");
    if (!(tau0_s > 0.0) || !std::isfinite(tau0_s))
      throw std::domain_error("MaterialParams: tau0 must be positive");
    if (N0_per_J_m3 && !(*N0_per_J_m3 > 0.0))
      throw std::domain_error("MaterialParams: N0 must be positive when supplied");
  }
};

struct ConductivityRatio {
  double s1 = 0.0; // sigma_1 / sigma_n
  double s2 = 0.0; // sigma_2 / sigma_n
};

struct QuasiparticleDensity {
  double per_m3 = 0.0;
};

/// Zero-temperature gap Delta0 = 1.764 k_B T_c, in joules.
inline double gap0_J(const MaterialParams& m) {
  if (!(m.Tc_K > 0.0) || !std::isfinite(m.Tc_K))
    throw std::domain_error("gap0: Tc must be positive");
  return constants::bcs_gap_ratio * constants::k_B * m.Tc_K;
}

/// Reduced photon energy xi = hbar*omega / (2 k_B T), omega = 2 pi f.
inline double xi(double T_K, double f_Hz) {
  if (!(T_K > 0.0) || !std::isfinite(T_K))
    throw std::domain_error("xi: T must be positive");
  if (!(f_Hz > 0.0) || !std::isfinite(f_Hz))
    throw std::domain_error("xi: f must be positive");
  return constants::hbar * (2.0 * constants::pi * f_Hz) / (2.0 * constants::k_B * T_K);
}

/// True when (T, f) lie inside the k_B T < Delta0/2 and hbar*omega < Delta0/2
/// regime where the low-energy expansion is trustworthy.
inline bool regime_ok(double T_K, double f_Hz, const MaterialParams& m) {
  const double d0 = gap0_J(m);
  const double hw = constants::hbar * 2.0 * constants::pi * f_Hz;
  return (hw < 0.5 * d0) && (constants::k_B * T_K < 0.5 * d0);
}

/// Thermal quasiparticle density
///   n_qp(T) = 2 N0 sqrt(2 pi k_B T Delta0) exp(-Delta0 / k_B T).
/// Requires N0. The expression loses validity approaching T_c; callers may
/// pass `validity_warning` to detect T >= T_c.
inline QuasiparticleDensity nqp_thermal(double T_K, const MaterialParams& m,
                                        bool* validity_warning = nullptr) {
  if (!(T_K > 0.0) || !std::isfinite(T_K))
    throw std::domain_error("nqp_thermal: T must be positive");
  if (!m.N0_per_J_m3)
    throw std::invalid_argument("nqp_thermal: N0 required");
  const double d0 = gap0_J(m);
  const double kT = constants::k_B * T_K;
  if (validity_warning) *validity_warning = (T_K >= m.Tc_K);
  return {2.0 * (*m.N0_per_J_m3) * std::sqrt(2.0 * constants::pi * kT * d0) *
          std::exp(-d0 / kT)};
}

/// Conductivity ratios (sigma_1/sigma_n, sigma_2/sigma_n), 0 < T < T_c.
///
/// Without `nqp_override` the thermal density is substituted; every N0 factor
/// then cancels and the result depends on (T, T_c, f) only. With an override,
/// N0 is required. Evaluation uses the scaled Bessel products; no intermediate
/// exp(+Delta0/k_B T) is ever formed, so overflow is impossible by
/// construction. `regime_warning`, if given, is set when (T, f) leave the
/// low-energy regime (the values are still returned).
inline ConductivityRatio sigma_ratio(double T_K, double f_Hz, const MaterialParams& m,
                                     std::optional<QuasiparticleDensity> nqp_override = {},
                                     bool* regime_warning = nullptr) {
  if (!(T_K > 0.0) || !std::isfinite(T_K))
    throw std::domain_error("sigma_ratio: T must be positive");
  if (!(T_K < m.Tc_K))
    throw std::domain_error("sigma_ratio: T must be below Tc");
  if (!(f_Hz > 0.0) || !std::isfinite(f_Hz))
    throw std::domain_error("sigma_ratio: f must be positive");

  const double d0 = gap0_J(m);
  const double kT = constants::k_B * T_K;
  const double hw = constants::hbar * 2.0 * constants::pi * f_Hz;
  if (regime_warning) *regime_warning = !regime_ok(T_K, f_Hz, m);

  const double x = hw / (2.0 * kT);
  const double shk0 = specfun::sinh_k0(x);
  const double i0e = specfun::bessel_i0_scaled(x);

  ConductivityRatio out;
  if (!nqp_override) {
    // n_qp/(N0 sqrt(2 pi k T Delta0)) = 2 exp(-Delta0/kT); the remaining
    // Boltzmann factor underflows harmlessly to 0 at very low T.
    const double boltz = std::exp(-d0 / kT);
    out.s1 = (4.0 * d0 / hw) * boltz * shk0;
    out.s2 = (constants::pi * d0 / hw) *
             (1.0 - boltz * (std::sqrt(2.0 * constants::pi * kT / d0) + 2.0 * i0e));
  } else {
    const double n = nqp_override->per_m3;
    if (!(n >= 0.0) || !std::isfinite(n))
      throw std::domain_error("sigma_ratio: n_qp must be non-negative");
    if (!m.N0_per_J_m3)
      throw std::invalid_argument("sigma_ratio: N0 required with nqp_override");
    const double N0 = *m.N0_per_J_m3;
    out.s1 = (2.0 * d0 / hw) * (n / (N0 * std::sqrt(2.0 * constants::pi * kT * d0))) * shk0;
    out.s2 = (constants::pi * d0 / hw) *
             (1.0 - (n / (2.0 * N0 * d0)) *
                        (1.0 + std::sqrt(2.0 * d0 / (constants::pi * kT)) * i0e));
  }
  return out;
}

/// sigma_2/sigma_n at T = 0: pi Delta0 / (hbar omega).
inline double sigma2_zero_temperature(double f_Hz, const MaterialParams& m) {
  const double d0 = gap0_J(m);
  return constants::pi * d0 / (constants::hbar * 2.0 * constants::pi * f_Hz);
}

} // namespace mbres::mb
