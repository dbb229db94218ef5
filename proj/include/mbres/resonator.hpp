#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "mbres/mattis_bardeen.hpp"

// Forward model from temperature to resonator observables,
//
//   delta f_res / f_res = (alpha/2) * delta sigma_2 / sigma_2,
//   delta (1/Q_i)       =  alpha    * delta sigma_1 / sigma_2,
//
// its inversion to an effective temperature, and quasiparticle recombination
// times. All deltas are shifts from the reference temperature T_ref (the
// cryostat base temperature, 10 mK by default); denominators are evaluated at
// T_ref.

namespace mbres::resonator {

inline constexpr double default_Tref_K = 0.010;

struct ResonatorBaseline {
  double fres0_Hz = 0.0; // unperturbed resonance
  double Qi0 = 0.0;
  double Qc = 0.0;
  double alpha = 0.0;    // kinetic-inductance participation ratio

  void validate() const {
    if (!(fres0_Hz > 0.0)) throw std::domain_error("ResonatorBaseline: fres0 must be positive");
    if (!(Qi0 > 0.0)) throw std::domain_error("ResonatorBaseline: Qi0 must be positive");
    if (!(Qc > 0.0)) throw std::domain_error("ResonatorBaseline: Qc must be positive");
    if (!(alpha > 0.0 && alpha <= 1.0))
      throw std::domain_error("ResonatorBaseline: alpha must be in (0, 1]");
  }

  double QL0() const { return 1.0 / (1.0 / Qi0 + 1.0 / Qc); }
};

struct ResonatorState {
  double fres_Hz = 0.0;
  double Qi = 0.0;
  double QL = 0.0;
  std::optional<double> Teff_K {};
};

namespace detail {

inline void check_T_range(double T_K, double Tref_K, const mb::MaterialParams& m,
                          const char* fn) {
  if (!(Tref_K > 0.0) || !(T_K >= Tref_K))
    throw std::domain_error(std::string(fn) + ": need 0 < Tref <= T");
  if (!(T_K < m.Tc_K))
    throw std::domain_error(std::string(fn) + ": T must be below Tc");
}

} // namespace detail

/// (alpha/2) (sigma2(T) - sigma2(Tref)) / sigma2(Tref); <= 0 for T >= Tref.
inline double freq_shift(double T_K, double Tref_K, const ResonatorBaseline& b,
                         const mb::MaterialParams& m) {
  detail::check_T_range(T_K, Tref_K, m, "freq_shift");
  const mb::ConductivityRatio sT = mb::sigma_ratio(T_K, b.fres0_Hz, m);
  const mb::ConductivityRatio sR = mb::sigma_ratio(Tref_K, b.fres0_Hz, m);
  return 0.5 * b.alpha * (sT.s2 - sR.s2) / sR.s2;
}

/// alpha (sigma1(T) - sigma1(Tref)) / sigma2(Tref); >= 0 for T >= Tref.
inline double loss_shift(double T_K, double Tref_K, const ResonatorBaseline& b,
                         const mb::MaterialParams& m) {
  detail::check_T_range(T_K, Tref_K, m, "loss_shift");
  const mb::ConductivityRatio sT = mb::sigma_ratio(T_K, b.fres0_Hz, m);
  const mb::ConductivityRatio sR = mb::sigma_ratio(Tref_K, b.fres0_Hz, m);
  return b.alpha * (sT.s1 - sR.s1) / sR.s2;
}

/// Resonator state at temperature T implied by the baseline and the forward
/// model: f_res = f_res0 (1 + dff), 1/Q_i = 1/Q_i0 + dinvQ.
inline ResonatorState state_at(double T_K, double Tref_K, const ResonatorBaseline& b,
                               const mb::MaterialParams& m) {
  ResonatorState st;
  st.fres_Hz = b.fres0_Hz * (1.0 + freq_shift(T_K, Tref_K, b, m));
  st.Qi = 1.0 / (1.0 / b.Qi0 + loss_shift(T_K, Tref_K, b, m));
  st.QL = 1.0 / (1.0 / st.Qi + 1.0 / b.Qc);
  st.Teff_K = T_K;
  return st;
}

/// Invert loss_shift: the unique T in [Tref, 0.95 Tc] with
/// loss_shift(T) = dinvQ, found by bracketed bisection. The bracket is driven
/// to `tol_K` (well below the documented 1e-6 K so that the forward/inverse
/// roundtrip holds to ~1e-12 relative in the loss). Throws std::out_of_range
/// when dinvQ exceeds the bracket maximum.
inline double effective_temperature(double dinvQ, double Tref_K, const ResonatorBaseline& b,
                                    const mb::MaterialParams& m, double tol_K = 1e-13) {
  if (!(dinvQ >= 0.0) || !std::isfinite(dinvQ))
    throw std::domain_error("effective_temperature: dinvQ must be >= 0 and finite");
  if (dinvQ == 0.0) return Tref_K;

  const double Thi = 0.95 * m.Tc_K;
  if (!(Tref_K > 0.0) || !(Tref_K < Thi))
    throw std::domain_error("effective_temperature: need 0 < Tref < 0.95 Tc");

  const mb::ConductivityRatio sR = mb::sigma_ratio(Tref_K, b.fres0_Hz, m);
  const auto loss_at = [&](double T) {
    const mb::ConductivityRatio sT = mb::sigma_ratio(T, b.fres0_Hz, m);
    return b.alpha * (sT.s1 - sR.s1) / sR.s2;
  };

  if (dinvQ > loss_at(Thi))
    throw std::out_of_range("effective_temperature: dinvQ exceeds invertible range");

  double lo = Tref_K, hi = Thi;
  for (int i = 0; i < 200 && (hi - lo) > tol_K; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (!(mid > lo) || !(mid < hi)) break; // bracket at ulp resolution
    (loss_at(mid) < dinvQ ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

/// Map a series of loss shifts to predicted frequency shifts through the
/// fitted effective temperature (the dashed-line generator for loss-derived
/// data). Entries outside the invertible range come back empty; the batch
/// never throws for them.
inline std::vector<std::optional<double>>
predict_freq_from_loss(std::span<const double> dinvQ_series, double Tref_K,
                       const ResonatorBaseline& b, const mb::MaterialParams& m) {
  std::vector<std::optional<double>> out;
  out.reserve(dinvQ_series.size());
  for (const double q : dinvQ_series) {
    try {
      const double Teff = effective_temperature(q, Tref_K, b, m);
      out.push_back(Teff <= Tref_K ? 0.0 : freq_shift(Teff, Tref_K, b, m));
    } catch (const std::out_of_range&) {
      out.push_back(std::nullopt);
    } catch (const std::domain_error&) {
      out.push_back(std::nullopt);
    }
  }
  return out;
}

/// Thermal-equilibrium quasiparticle recombination time
///   tau_qp(T) = tau0/sqrt(pi) (k_B Tc / 2 Delta)^{5/2} sqrt(Tc/T) e^{Delta/k_B T}
/// with Delta = Delta0. Below the temperature where the exponential would
/// overflow, returns +inf and sets `overflow_warning`.
inline double qp_recombination_time_thermal(double T_K, const mb::MaterialParams& m,
                                            bool* overflow_warning = nullptr) {
  if (!(T_K > 0.0) || !std::isfinite(T_K))
    throw std::domain_error("qp_recombination_time_thermal: T must be positive");
  if (!(m.tau0_s > 0.0))
    throw std::domain_error("qp_recombination_time_thermal: tau0 must be positive");
  const double d0 = gap0_J(m);
  const double expo = d0 / (constants::k_B * T_K);
  if (overflow_warning) *overflow_warning = false;
  if (expo > 700.0) {
    if (overflow_warning) *overflow_warning = true;
    return std::numeric_limits<double>::infinity();
  }
  const double prefac = m.tau0_s / std::sqrt(constants::pi) *
                        std::pow(constants::k_B * m.Tc_K / (2.0 * d0), 2.5);
  return prefac * std::sqrt(m.Tc_K / T_K) * std::exp(expo);
}

/// Generic recombination time tau_qp = (tau0/n_qp) N0 (k_B Tc)^3 / (2 Delta0^2).
inline double qp_recombination_time_generic(const mb::QuasiparticleDensity& nqp,
                                            const mb::MaterialParams& m) {
  if (!(nqp.per_m3 > 0.0) || !std::isfinite(nqp.per_m3))
    throw std::domain_error("qp_recombination_time_generic: n_qp must be positive");
  if (!m.N0_per_J_m3)
    throw std::invalid_argument("qp_recombination_time_generic: N0 required");
  if (!(m.tau0_s > 0.0))
    throw std::domain_error("qp_recombination_time_generic: tau0 must be positive");
  const double d0 = gap0_J(m);
  const double kTc = constants::k_B * m.Tc_K;
  return m.tau0_s / nqp.per_m3 * (*m.N0_per_J_m3) * kTc * kTc * kTc / (2.0 * d0 * d0);
}

/// Field-amplitude ring-up time constant 2/kappa = Q_L/(pi f_res).
inline double ringup_time_field_s(double fres_Hz, double QL) {
  return QL / (constants::pi * fres_Hz);
}

/// The frequently quoted energy-decay convention Q_L/(2 pi f_res).
inline double ringup_time_quoted_s(double fres_Hz, double QL) {
  return QL / (2.0 * constants::pi * fres_Hz);
}

} // namespace mbres::resonator
