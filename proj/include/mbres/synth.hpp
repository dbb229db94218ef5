#pragma once

#include <cmath>
#include <complex>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "mbres/constants.hpp"
#include "mbres/rng.hpp"

// Synthetic-trace generators. These are the ground-truth factories for the
// fitter tests and for the gen command; they share nothing with the fitting
// pipeline beyond the model definition itself.

namespace mbres::synth {

struct NotchParams {
  double fres_Hz = 0.0;
  double Qi = 0.0;
  double Qc_abs = 0.0;
  double phi = 0.0;      // impedance-mismatch angle
  double a = 1.0;        // off-resonant amplitude
  double phi0 = 0.0;     // off-resonant phase
  double delay_s = 0.0;  // cable delay

  double QL() const {
    const double invQL = 1.0 / Qi + std::cos(phi) / Qc_abs;
    if (!(invQL > 0.0)) throw std::domain_error("NotchParams: non-positive 1/QL");
    return 1.0 / invQL;
  }
};

/// Ideal notch-port transmission at frequency f.
inline std::complex<double> notch_s21(const NotchParams& p, double f_Hz) {
  const double QL = p.QL();
  const std::complex<double> i(0.0, 1.0);
  const std::complex<double> resonant =
      (QL / p.Qc_abs) * std::exp(i * p.phi) /
      (1.0 + 2.0 * i * QL * (f_Hz / p.fres_Hz - 1.0));
  const std::complex<double> env =
      p.a * std::exp(i * (p.phi0 - 2.0 * constants::pi * f_Hz * p.delay_s));
  return env * (1.0 - resonant);
}

/// Complex trace over [fmin, fmax]; snr_dB empty means noiseless. Noise is
/// additive complex Gaussian with total power a^2 * 10^(-snr/10).
inline std::vector<std::complex<double>> gen_notch_trace(
    const NotchParams& p, std::span<const double> freq,
    std::optional<double> snr_dB = {}, std::uint64_t seed = 1) {
  std::vector<std::complex<double>> out(freq.size());
  for (size_t i = 0; i < freq.size(); ++i) out[i] = notch_s21(p, freq[i]);
  if (snr_dB) {
    rng::SeededRng g(seed);
    const double sigma = p.a * std::pow(10.0, -*snr_dB / 20.0) / std::sqrt(2.0);
    for (auto& s : out) s += sigma * g.complex_gaussian();
  }
  return out;
}

inline std::vector<double> linspace(double lo, double hi, size_t n) {
  if (n < 2) throw std::invalid_argument("linspace: need n >= 2");
  std::vector<double> v(n);
  for (size_t i = 0; i < n; ++i) v[i] = lo + (hi - lo) * i / (n - 1);
  return v;
}

} // namespace mbres::synth
