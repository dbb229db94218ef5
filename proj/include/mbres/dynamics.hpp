#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <complex>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <thread>
#include <vector>

#include "mbres/constants.hpp"
#include "mbres/resonator.hpp"
#include "mbres/rng.hpp"

// Time-domain simulator of the pulsed gate-readout experiment and the
// continuous sideband-modulation model.
//
// Signal chain for a pulsed run:
//   gate square pulse -> bias-tee high-pass -> DC offset -> lookup tables
//   (f_res, Q_i vs V_g) through a direction-dependent first-order lag ->
//   complex-envelope resonator response per readout frequency.
//
// The envelope s(t) of the intracavity field in the frame of the readout
// tone f_ro obeys
//   ds/dt = [ i 2 pi (f_res(t) - f_ro) - kappa(t)/2 ] s + (kappa_ext/2) d(t),
// kappa = 2 pi f_res/Q_L, kappa_ext = 2 pi f_res/Q_c, drive d in {0, 1}; the
// recorded feedline output is s_out = d - s, so a steady resonant drive
// reproduces the notch transmission 1 - Q_L/Q_c. Integration is fixed-step
// RK4 (deterministic traces for golden files); coefficients at half steps
// are quadratically interpolated and the drive is held constant per step, so
// pulse edges should sit on the grid (simulate_map snaps them).

namespace mbres::dynamics {

struct PulseSequence {
  double trigger_period_s = 0.0;
  double readout_start_s = 0.0;
  double readout_duration_s = 0.0;
  double readout_freq_Hz = 0.0;   // default f_ro; simulate_map sweeps its own list
  double gate_start_s = 0.0;
  double gate_duration_s = 0.0;   // 0 disables the gate pulse
  double gate_amplitude_V = 0.0;  // signed pulse height on top of the bias
  double gate_bias_V = 0.0;       // DC working point

  bool has_gate() const { return gate_duration_s > 0.0 && gate_amplitude_V != 0.0; }

  void validate() const {
    if (!(trigger_period_s > 0.0))
      throw std::domain_error("PulseSequence: trigger period must be positive");
    auto inside = [&](double t) { return t >= 0.0 && t <= trigger_period_s; };
    if (!inside(readout_start_s) || !inside(readout_start_s + readout_duration_s) ||
        readout_duration_s < 0.0)
      throw std::domain_error("PulseSequence: readout window outside trigger period");
    if (has_gate()) {
      if (!inside(gate_start_s) || !inside(gate_start_s + gate_duration_s))
        throw std::domain_error("PulseSequence: gate pulse outside trigger period");
      if (readout_duration_s > 0.0 &&
          (gate_start_s < readout_start_s ||
           gate_start_s + gate_duration_s > readout_start_s + readout_duration_s))
        throw std::domain_error("PulseSequence: readout window must contain the gate pulse");
    }
  }
};

// Strictly monotone piecewise-linear lookup, domain-checked.
struct LookupTable {
  std::vector<double> x;
  std::vector<double> y;

  static LookupTable linear(double x0, double x1, double y0, double y1) {
    return LookupTable{{x0, x1}, {y0, y1}};
  }

  void validate() const {
    if (x.size() < 2 || x.size() != y.size())
      throw std::domain_error("LookupTable: need >= 2 aligned samples");
    const bool inc = x[1] > x[0];
    for (size_t i = 1; i < x.size(); ++i)
      if (!(inc ? x[i] > x[i - 1] : x[i] < x[i - 1]))
        throw std::domain_error("LookupTable: x must be strictly monotone");
    const bool yinc = y[1] > y[0];
    for (size_t i = 1; i < y.size(); ++i)
      if (!(yinc ? y[i] > y[i - 1] : y[i] < y[i - 1]))
        throw std::domain_error("LookupTable: y must be strictly monotone");
  }

  double operator()(double q) const {
    const bool inc = x.back() > x.front();
    const double lo = inc ? x.front() : x.back();
    const double hi = inc ? x.back() : x.front();
    if (!(q >= lo && q <= hi))
      throw std::domain_error("LookupTable: argument outside table domain");
    size_t i = 1;
    if (inc) {
      while (i + 1 < x.size() && q > x[i]) ++i;
    } else {
      while (i + 1 < x.size() && q < x[i]) ++i;
    }
    const double t = (q - x[i - 1]) / (x[i] - x[i - 1]);
    return y[i - 1] + t * (y[i] - y[i - 1]);
  }
};

struct GateResponseModel {
  double tau_R_s = 0.0;         // lag while V_g is rising
  double tau_F_s = 0.0;         // lag while V_g is falling
  LookupTable fres_of_vg;       // volts -> hertz
  LookupTable qi_of_vg;         // volts -> dimensionless
  double biastee_fc_Hz = 40e3;  // gate-line high-pass cutoff; 0 disables

  void validate() const {
    if (!(tau_R_s > 0.0) || !(tau_F_s > 0.0))
      throw std::domain_error("GateResponseModel: tau_R and tau_F must be positive");
    fres_of_vg.validate();
    qi_of_vg.validate();
  }
};

struct TimeTrace {
  double t0_s = 0.0;
  double dt_s = 0.0;
  std::vector<std::complex<double>> s;

  double t(size_t i) const { return t0_s + dt_s * static_cast<double>(i); }
  size_t index_at(double time_s) const {
    const double k = (time_s - t0_s) / dt_s;
    const long idx = std::lround(k);
    if (idx < 0 || static_cast<size_t>(idx) >= s.size())
      throw std::out_of_range("TimeTrace: time outside trace");
    return static_cast<size_t>(idx);
  }
};

/// First-order causal high-pass (single real pole at 2 pi f_c) with exact
/// pole mapping: a step of height A decays as A e^{-2 pi f_c t}.
inline std::vector<double> biastee_highpass(std::span<const double> x, double fc_Hz,
                                            double dt_s) {
  if (!(fc_Hz > 0.0) || !(dt_s > 0.0))
    throw std::domain_error("biastee_highpass: need fc > 0 and dt > 0");
  if (!(dt_s * fc_Hz < 0.1))
    throw std::domain_error("biastee_highpass: sampling too coarse (dt*fc >= 0.1)");
  std::vector<double> y(x.size());
  if (x.empty()) return y;
  const double pole = std::exp(-2.0 * constants::pi * fc_Hz * dt_s);
  y[0] = x[0];
  for (size_t i = 1; i < x.size(); ++i) y[i] = pole * y[i - 1] + x[i] - x[i - 1];
  return y;
}

struct GateTrajectory {
  std::vector<double> vg_V;
  std::vector<double> fres_Hz;
  std::vector<double> Qi;
};

/// Relax the table targets f*_res(vg(t)), Q_i*(vg(t)) through a first-order
/// lag whose time constant is tau_R while vg is increasing and tau_F while
/// decreasing. The update integrates a piecewise-linear target exactly, so
/// trajectories are grid-refinement stable.
inline GateTrajectory gate_relaxation(std::span<const double> vg, const GateResponseModel& m,
                                      double dt_s) {
  m.validate();
  if (vg.empty() || !(dt_s > 0.0))
    throw std::domain_error("gate_relaxation: empty waveform or bad dt");

  GateTrajectory out;
  out.vg_V.assign(vg.begin(), vg.end());
  out.fres_Hz.resize(vg.size());
  out.Qi.resize(vg.size());

  double gf_prev = m.fres_of_vg(vg[0]);
  double gq_prev = m.qi_of_vg(vg[0]);
  out.fres_Hz[0] = gf_prev;
  out.Qi[0] = gq_prev;
  double tau = m.tau_R_s;

  for (size_t i = 1; i < vg.size(); ++i) {
    const double dvg = vg[i] - vg[i - 1];
    if (dvg > 0.0) tau = m.tau_R_s;
    else if (dvg < 0.0) tau = m.tau_F_s;

    const double gf = m.fres_of_vg(vg[i]);
    const double gq = m.qi_of_vg(vg[i]);
    const double a = dt_s / tau;
    const double em = -std::expm1(-a);      // 1 - e^{-a}
    const double ramp = 1.0 - em / a;       // 1 - (1 - e^{-a})/a
    out.fres_Hz[i] =
        (1.0 - em) * out.fres_Hz[i - 1] + gf_prev * em + (gf - gf_prev) * ramp;
    out.Qi[i] = (1.0 - em) * out.Qi[i - 1] + gq_prev * em + (gq - gq_prev) * ramp;
    gf_prev = gf;
    gq_prev = gq;
  }
  return out;
}

struct DriveWindow {
  double on_s = 0.0;
  double off_s = 0.0;
  bool contains(double t) const { return t >= on_s && t < off_s; }
};

/// Integrate the complex envelope for one readout frequency. fres/QL are
/// sampled on the dt grid; the returned trace is the normalized feedline
/// output s_out = d - s. `s0` sets the initial intracavity field (free-decay
/// experiments).
inline TimeTrace resonator_envelope(std::span<const double> fres_Hz,
                                    std::span<const double> QL, double Qc,
                                    double f_ro_Hz, DriveWindow drive, double dt_s,
                                    std::complex<double> s0 = {0.0, 0.0}) {
  const size_t n = fres_Hz.size();
  if (n < 3 || QL.size() != n)
    throw std::domain_error("resonator_envelope: need >= 3 aligned samples");
  if (!(Qc > 0.0) || !(f_ro_Hz > 0.0) || !(dt_s > 0.0))
    throw std::domain_error("resonator_envelope: bad parameters");

  // step-size contract: resolve both the detuning beat and the ring time
  double max_det = 0.0, min_ring = std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < n; ++i) {
    max_det = std::max(max_det, std::fabs(fres_Hz[i] - f_ro_Hz));
    min_ring = std::min(min_ring, QL[i] / (constants::pi * fres_Hz[i]));
  }
  if (max_det > 0.0 && dt_s > 1.0 / (20.0 * max_det))
    throw std::domain_error("resonator_envelope: dt too large for the detuning span");
  if (dt_s > min_ring / 20.0)
    throw std::domain_error("resonator_envelope: dt too large for the ring-up time");

  // node and midpoint coefficients: A = i*2pi*(fres - f_ro) - kappa/2,
  // B = kappa_ext/2 (drive applied per step)
  auto coef_at = [&](double fres, double ql) {
    const double kappa = 2.0 * constants::pi * fres / ql;
    return std::complex<double>(-0.5 * kappa,
                                2.0 * constants::pi * (fres - f_ro_Hz));
  };
  auto kext_half = [&](double fres) { return constants::pi * fres / Qc; };

  // quadratic through nodes k-1, k, k+1 evaluated at the k -> k+1 midpoint
  auto quad_mid = [](double fm1, double f0, double fp1) {
    return (-fm1 + 6.0 * f0 + 3.0 * fp1) / 8.0;
  };

  TimeTrace out;
  out.t0_s = 0.0;
  out.dt_s = dt_s;
  out.s.resize(n);

  std::complex<double> s = s0;
  auto d_at = [&](double t) { return drive.contains(t) ? 1.0 : 0.0; };
  out.s[0] = d_at(0.0) - s;

  for (size_t k = 0; k + 1 < n; ++k) {
    const double t = dt_s * static_cast<double>(k);
    // midpoint interpolation (one-sided stencil at the first step)
    double f_mid, q_mid;
    if (k == 0) {
      f_mid = (3.0 * fres_Hz[0] + 6.0 * fres_Hz[1] - fres_Hz[2]) / 8.0;
      q_mid = (3.0 * QL[0] + 6.0 * QL[1] - QL[2]) / 8.0;
    } else {
      f_mid = quad_mid(fres_Hz[k - 1], fres_Hz[k], fres_Hz[k + 1]);
      q_mid = quad_mid(QL[k - 1], QL[k], QL[k + 1]);
    }

    const std::complex<double> A0 = coef_at(fres_Hz[k], QL[k]);
    const std::complex<double> Am = coef_at(f_mid, q_mid);
    const std::complex<double> A1 = coef_at(fres_Hz[k + 1], QL[k + 1]);
    const double d_step = d_at(t + 0.5 * dt_s);
    const std::complex<double> B0 = kext_half(fres_Hz[k]) * d_step;
    const std::complex<double> Bm = kext_half(f_mid) * d_step;
    const std::complex<double> B1 = kext_half(fres_Hz[k + 1]) * d_step;

    const std::complex<double> k1 = A0 * s + B0;
    const std::complex<double> k2 = Am * (s + 0.5 * dt_s * k1) + Bm;
    const std::complex<double> k3 = Am * (s + 0.5 * dt_s * k2) + Bm;
    const std::complex<double> k4 = A1 * (s + dt_s * k3) + B1;
    s += dt_s / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);

    out.s[k + 1] = d_at(dt_s * static_cast<double>(k + 1)) - s;
  }
  return out;
}

struct SimulationResult {
  double dt_s = 0.0;
  std::vector<double> t_s;
  std::vector<double> vg_V;
  std::vector<double> fres_Hz;
  std::vector<double> Qi;
  std::vector<double> QL;
  std::vector<double> fro_Hz;
  std::vector<TimeTrace> traces; // s_out per readout frequency
};

struct NoiseSpec {
  double snr_dB = 0.0;
  std::uint64_t seed = 1;
};

/// Full pipeline for a 2D map: one trigger period, one trace per entry of
/// `fro_list`. Pulse edges are snapped to the dt grid. Optional additive
/// complex white noise (per-trace substream, deterministic given the seed).
/// `jobs` > 1 integrates the independent readout frequencies concurrently;
/// results are identical to the serial run.
inline SimulationResult simulate_map(const PulseSequence& seq,
                                     std::span<const double> fro_list,
                                     const GateResponseModel& model,
                                     const resonator::ResonatorBaseline& baseline,
                                     double dt_s,
                                     std::optional<NoiseSpec> noise = {},
                                     unsigned jobs = 1) {
  seq.validate();
  model.validate();
  baseline.validate();
  if (!(dt_s > 0.0)) throw std::domain_error("simulate_map: dt must be positive");
  if (fro_list.empty()) throw std::invalid_argument("simulate_map: empty f_ro list");

  const size_t n = static_cast<size_t>(std::llround(seq.trigger_period_s / dt_s));
  if (n < 16) throw std::domain_error("simulate_map: trigger period too short for dt");
  auto snap = [&](double t) { return dt_s * std::llround(t / dt_s); };

  SimulationResult out;
  out.dt_s = dt_s;
  out.t_s.resize(n);
  for (size_t i = 0; i < n; ++i) out.t_s[i] = dt_s * static_cast<double>(i);

  // gate voltage: square pulse through the bias tee, riding on the DC bias
  std::vector<double> ac(n, 0.0);
  if (seq.has_gate()) {
    const double g0 = snap(seq.gate_start_s);
    const double g1 = snap(seq.gate_start_s + seq.gate_duration_s);
    for (size_t i = 0; i < n; ++i)
      if (out.t_s[i] >= g0 && out.t_s[i] < g1) ac[i] = seq.gate_amplitude_V;
    if (model.biastee_fc_Hz > 0.0)
      ac = biastee_highpass(ac, model.biastee_fc_Hz, dt_s);
  }
  std::vector<double> vg(n);
  for (size_t i = 0; i < n; ++i) vg[i] = seq.gate_bias_V + ac[i];

  GateTrajectory traj = gate_relaxation(vg, model, dt_s);
  out.vg_V = std::move(traj.vg_V);
  out.fres_Hz = std::move(traj.fres_Hz);
  out.Qi = std::move(traj.Qi);
  out.QL.resize(n);
  for (size_t i = 0; i < n; ++i)
    out.QL[i] = 1.0 / (1.0 / out.Qi[i] + 1.0 / baseline.Qc);

  const DriveWindow win{snap(seq.readout_start_s),
                        snap(seq.readout_start_s + seq.readout_duration_s)};
  out.fro_Hz.assign(fro_list.begin(), fro_list.end());
  out.traces.resize(fro_list.size());

  auto run_one = [&](size_t j) {
    TimeTrace tr =
        resonator_envelope(out.fres_Hz, out.QL, baseline.Qc, fro_list[j], win, dt_s);
    if (noise) {
      rng::SeededRng g(noise->seed + 0x9e3779b97f4a7c15ULL * (j + 1));
      const double sigma = std::pow(10.0, -noise->snr_dB / 20.0) / std::sqrt(2.0);
      for (auto& v : tr.s) v += sigma * g.complex_gaussian();
    }
    out.traces[j] = std::move(tr);
  };

  if (jobs <= 1 || fro_list.size() < 2) {
    for (size_t j = 0; j < fro_list.size(); ++j) run_one(j);
  } else {
    const unsigned nthreads = std::min<unsigned>(jobs, fro_list.size());
    std::vector<std::thread> pool;
    std::atomic<size_t> next{0};
    std::vector<std::string> errors(nthreads);
    for (unsigned w = 0; w < nthreads; ++w)
      pool.emplace_back([&, w] {
        for (size_t j = next.fetch_add(1); j < fro_list.size(); j = next.fetch_add(1)) {
          try {
            run_one(j);
          } catch (const std::exception& e) {
            errors[w] = e.what();
            return;
          }
        }
      });
    for (auto& th : pool) th.join();
    for (const auto& msg : errors)
      if (!msg.empty()) throw std::runtime_error(msg);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sideband (parametric modulation) model
// ---------------------------------------------------------------------------

struct SidebandSpectrum {
  std::vector<double> freq_Hz;  // {f_r - f_g, f_r, f_r + f_g}
  std::vector<double> power_dB; // relative to the carrier
  size_t carrier_index = 1;
  size_t upper_index = 2;
  size_t lower_index = 0;
};

/// Small-signal sideband response to a gate tone at f_g that modulates the
/// resonance frequency with depth `mod_depth_Hz`, low-passed by the device
/// response time tau_eff; the sidebands are additionally shaped by the
/// linearized cavity transfer function at f_r +- f_g. Upper and lower
/// sidebands are equal in magnitude in this model.
inline SidebandSpectrum sideband_response(double fg_Hz, double mod_depth_Hz,
                                          double tau_eff_s,
                                          const resonator::ResonatorBaseline& baseline,
                                          bool* smallsignal_warning = nullptr) {
  baseline.validate();
  if (!(fg_Hz > 0.0) || !(mod_depth_Hz >= 0.0) || !(tau_eff_s > 0.0))
    throw std::domain_error("sideband_response: bad parameters");

  const double QL = baseline.QL0();
  const double linewidth = baseline.fres0_Hz / QL;
  if (smallsignal_warning) *smallsignal_warning = (mod_depth_Hz > 0.1 * linewidth);

  const double omega_g = 2.0 * constants::pi * fg_Hz;
  const double kappa = 2.0 * constants::pi * baseline.fres0_Hz / QL;
  const double kappa_ext = 2.0 * constants::pi * baseline.fres0_Hz / baseline.Qc;

  // gate-response single pole, then the cavity pole at the sideband offset
  const double m_eff = mod_depth_Hz / std::sqrt(1.0 + omega_g * tau_eff_s * omega_g * tau_eff_s);
  const double s_cav = kappa_ext / kappa; // resonant intracavity envelope
  const double side_amp = constants::pi * m_eff * s_cav /
                          std::sqrt(0.25 * kappa * kappa + omega_g * omega_g);
  const double carrier = std::fabs(1.0 - kappa_ext / kappa);
  if (!(carrier > 0.0))
    throw std::domain_error("sideband_response: carrier vanishes (critically coupled)");

  const double rel_dB = 20.0 * std::log10(std::max(side_amp / carrier, 1e-300));

  SidebandSpectrum sp;
  sp.freq_Hz = {baseline.fres0_Hz - fg_Hz, baseline.fres0_Hz, baseline.fres0_Hz + fg_Hz};
  sp.power_dB = {rel_dB, 0.0, rel_dB};
  return sp;
}

struct SidebandSweep {
  std::vector<double> fg_Hz;
  std::vector<double> amp_rel_dB; // sideband-to-carrier, dB
  double f3dB_Hz = 0.0;
};

/// Evaluate the sideband amplitude across an ascending f_g grid and locate
/// the -3 dB point (relative to the lowest-frequency amplitude) by
/// log-frequency interpolation.
inline SidebandSweep sideband_sweep(std::span<const double> fg_list, double mod_depth_Hz,
                                    double tau_eff_s,
                                    const resonator::ResonatorBaseline& baseline) {
  if (fg_list.size() < 2) throw std::invalid_argument("sideband_sweep: need >= 2 points");
  for (size_t i = 1; i < fg_list.size(); ++i)
    if (!(fg_list[i] > fg_list[i - 1]))
      throw std::invalid_argument("sideband_sweep: f_g grid must be ascending");

  SidebandSweep out;
  out.fg_Hz.assign(fg_list.begin(), fg_list.end());
  out.amp_rel_dB.resize(fg_list.size());
  for (size_t i = 0; i < fg_list.size(); ++i) {
    const SidebandSpectrum sp =
        sideband_response(fg_list[i], mod_depth_Hz, tau_eff_s, baseline);
    out.amp_rel_dB[i] = sp.power_dB[sp.upper_index];
  }

  const double target = out.amp_rel_dB.front() - 20.0 * std::log10(std::sqrt(2.0));
  for (size_t i = 1; i < out.fg_Hz.size(); ++i) {
    if (out.amp_rel_dB[i] <= target) {
      const double la = std::log10(out.fg_Hz[i - 1]);
      const double lb = std::log10(out.fg_Hz[i]);
      const double ya = out.amp_rel_dB[i - 1];
      const double yb = out.amp_rel_dB[i];
      const double frac = (target - ya) / (yb - ya);
      out.f3dB_Hz = std::pow(10.0, la + frac * (lb - la));
      return out;
    }
  }
  throw std::runtime_error("sideband_sweep: no -3 dB crossing within the grid");
}

} // namespace mbres::dynamics
