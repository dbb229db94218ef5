// mbres: Mattis-Bardeen resonator response toolkit, command-line surface.
//
// Data goes to --out (or stdout); diagnostics go to stderr. Exit codes:
// 0 success, 1 usage error, 2 runtime/validation error, 3 completed with
// flagged (skipped) rows.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "mbres/config.hpp"
#include "mbres/csv.hpp"
#include "mbres/dynamics.hpp"
#include "mbres/fitting.hpp"
#include "mbres/mattis_bardeen.hpp"
#include "mbres/resonator.hpp"
#include "mbres/rng.hpp"
#include "mbres/synth.hpp"

namespace {

using namespace mbres;

constexpr const char* kVersion = "mbres 0.1.0";

// --units T=mK,f=GHz,t=ns declaration for bare numeric options
struct UnitContext {
  double T = 1.0; // kelvin per unit
  double f = 1.0; // hertz per unit
  double t = 1.0; // seconds per unit

  void parse(const std::string& decl) {
    if (decl.empty()) return;
    std::stringstream ss(decl);
    std::string item;
    while (std::getline(ss, item, ',')) {
      const size_t eq = item.find('=');
      if (eq == std::string::npos)
        throw CLI::ValidationError("--units", "expected key=unit, got '" + item + "'");
      const std::string key = item.substr(0, eq);
      const std::string unit = item.substr(eq + 1);
      if (key == "T") {
        if (unit == "K") T = 1.0;
        else if (unit == "mK") T = 1e-3;
        else throw CLI::ValidationError("--units", "T unit must be K or mK");
      } else if (key == "f") {
        if (unit == "Hz") f = 1.0;
        else if (unit == "GHz") f = 1e9;
        else throw CLI::ValidationError("--units", "f unit must be Hz or GHz");
      } else if (key == "t") {
        if (unit == "s") t = 1.0;
        else if (unit == "ns") t = 1e-9;
        else throw CLI::ValidationError("--units", "t unit must be s or ns");
      } else {
        throw CLI::ValidationError("--units", "unknown quantity '" + key + "'");
      }
    }
  }
};

void emit_table(const io::Table& t, const std::string& out_path) {
  if (out_path.empty()) {
    io::write_csv(std::cout, t);
  } else {
    io::write_csv(out_path, t);
  }
}

void emit_record(const std::vector<std::pair<std::string, std::string>>& rec,
                 const std::string& out_path) {
  std::ostringstream os;
  for (const auto& [k, v] : rec) os << k << " = " << v << "\n";
  if (out_path.empty()) {
    std::cout << os.str();
  } else {
    std::ofstream f(out_path);
    if (!f) throw std::runtime_error("cannot open for writing: " + out_path);
    f << os.str();
  }
}

std::string fmt(double v) { return io::format_value(v); }

std::vector<double> make_grid(double lo, double hi, size_t n) {
  if (n < 1) throw std::runtime_error("grid: need n >= 1");
  if (n == 1) return {lo};
  if (!(hi > lo)) throw std::runtime_error("grid: need max > min");
  std::vector<double> g(n);
  for (size_t i = 0; i < n; ++i) g[i] = lo + (hi - lo) * i / (n - 1);
  return g;
}

void stamp(io::Table& t, const io::RunConfig* cfg) {
  t.metadata.emplace_back("generator", kVersion);
  if (cfg) {
    t.metadata.emplace_back("material.Tc_K", fmt(cfg->material.Tc_K));
    t.metadata.emplace_back("material.tau0_s", fmt(cfg->material.tau0_s));
    t.metadata.emplace_back("baseline.fres0_Hz", fmt(cfg->baseline.fres0_Hz));
    t.metadata.emplace_back("baseline.Qi0", fmt(cfg->baseline.Qi0));
    t.metadata.emplace_back("baseline.Qc", fmt(cfg->baseline.Qc));
    t.metadata.emplace_back("baseline.alpha", fmt(cfg->baseline.alpha));
    t.metadata.emplace_back("run.Tref_K", fmt(cfg->Tref_K));
  }
}

// ---------------------------------------------------------------------------
// commands
// ---------------------------------------------------------------------------

int cmd_conductivity(const io::RunConfig& cfg, const UnitContext& u, double tmin,
                     double tmax, size_t n, double f_opt, const std::string& out) {
  const double f = f_opt > 0.0 ? f_opt * u.f : cfg.baseline.fres0_Hz;
  io::Table t;
  t.columns = {"T_K", "s1", "s2"};
  stamp(t, &cfg);
  t.metadata.emplace_back("f_Hz", fmt(f));
  bool warned = false;
  for (const double T : make_grid(tmin * u.T, tmax * u.T, n)) {
    bool warn = false;
    const mb::ConductivityRatio s = mb::sigma_ratio(T, f, cfg.material, {}, &warn);
    if (warn && !warned) {
      std::cerr << "warning: (T, f) outside the k_B T, hbar*omega < Delta0/2 regime\n";
      warned = true;
    }
    t.add_row({T, s.s1, s.s2});
  }
  emit_table(t, out);
  return 0;
}

int cmd_response(const io::RunConfig& cfg, const UnitContext& u, double tmin,
                 double tmax, size_t n, const std::string& out) {
  io::Table t;
  t.columns = {"T_K", "dff", "dinvQ", "fres_Hz", "Qi"};
  stamp(t, &cfg);
  for (const double T : make_grid(tmin * u.T, tmax * u.T, n)) {
    const double dff = resonator::freq_shift(T, cfg.Tref_K, cfg.baseline, cfg.material);
    const double dq = resonator::loss_shift(T, cfg.Tref_K, cfg.baseline, cfg.material);
    t.add_row({T, dff, dq, cfg.baseline.fres0_Hz * (1.0 + dff),
               1.0 / (1.0 / cfg.baseline.Qi0 + dq)});
  }
  emit_table(t, out);
  return 0;
}

int cmd_teff(const io::RunConfig& cfg, const std::string& in,
             const std::string& out) {
  const io::Table src = io::read_csv_file(in);
  // accepts the response schema directly, or any table with a dinvQ column
  // (first column is carried through as x)
  const size_t xcol = 0;
  const size_t qcol = src.column("dinvQ");

  io::Table t;
  t.columns = {"x", "dinvQ", "Teff_K", "dff_pred"};
  stamp(t, &cfg);
  size_t skipped = 0;
  for (size_t i = 0; i < src.rows.size(); ++i) {
    const double x = src.rows[i][xcol];
    const double q = src.rows[i][qcol];
    try {
      const double Teff =
          resonator::effective_temperature(q, cfg.Tref_K, cfg.baseline, cfg.material);
      const double dff = q == 0.0 ? 0.0
                                  : resonator::freq_shift(Teff, cfg.Tref_K,
                                                          cfg.baseline, cfg.material);
      t.add_row({x, q, Teff, dff});
    } catch (const std::exception& e) {
      ++skipped;
      std::cerr << "row " << i << " (x = " << x << "): skipped, " << e.what() << "\n";
    }
  }
  emit_table(t, out);
  if (skipped > 0) {
    std::cerr << skipped << " row(s) outside the invertible range\n";
    return 3;
  }
  return 0;
}

int cmd_tauqp(const io::RunConfig& cfg, const UnitContext& u, double tmin, double tmax,
              size_t n, const std::string& in, const std::string& out) {
  io::Table t;
  stamp(t, &cfg);
  if (!in.empty()) {
    const io::Table src = io::read_csv_file(in);
    const size_t c = src.column("nqp_per_m3");
    t.columns = {"nqp_per_m3", "tauqp_s"};
    for (const auto& row : src.rows) {
      const double tau =
          resonator::qp_recombination_time_generic({row[c]}, cfg.material);
      t.add_row({row[c], tau});
    }
  } else {
    t.columns = {"T_K", "tauqp_s"};
    bool warned = false;
    for (const double T : make_grid(tmin * u.T, tmax * u.T, n)) {
      bool overflow = false;
      const double tau =
          resonator::qp_recombination_time_thermal(T, cfg.material, &overflow);
      if (overflow && !warned) {
        std::cerr << "warning: exponential overflow below ~" << fmt(T)
                  << " K; reporting inf\n";
        warned = true;
      }
      t.add_row({T, tau});
    }
  }
  emit_table(t, out);
  return 0;
}

dynamics::GateResponseModel gate_model_from_config(const io::RunConfig& cfg) {
  dynamics::GateResponseModel m;
  const auto& k = cfg.raw;
  const auto tr = k.with_units("gate.tauR", io::second_suffixes);
  const auto tf = k.with_units("gate.tauF", io::second_suffixes);
  if (!tr || !tf) throw std::runtime_error("config: missing gate.tauR_ns / gate.tauF_ns");
  m.tau_R_s = *tr;
  m.tau_F_s = *tf;
  if (const auto fc = k.with_units("gate.biastee_fc", io::hertz_suffixes))
    m.biastee_fc_Hz = *fc;

  if (k.has("gate.table_csv")) {
    const io::Table tab = io::read_csv_file(k.text("gate.table_csv"));
    io::expect_columns(tab, {"vg_V", "fres_Hz", "Qi"});
    m.fres_of_vg.x = tab.col("vg_V");
    m.fres_of_vg.y = tab.col("fres_Hz");
    m.qi_of_vg.x = tab.col("vg_V");
    m.qi_of_vg.y = tab.col("Qi");
  } else {
    // linear tables through the working point: value at bias equals the
    // baseline, slope from config
    const double bias = k.with_units("sequence.gate_bias", {{"_V", 1.0}}).value_or(0.0);
    const double slope_f = k.number("gate.dfres_dVg_Hz_per_V");
    const double slope_q = k.number("gate.dQi_dVg_per_V");
    const double halfspan = k.has("gate.table_halfspan_V")
                                ? k.number("gate.table_halfspan_V")
                                : 10.0;
    m.fres_of_vg = dynamics::LookupTable::linear(
        bias - halfspan, bias + halfspan,
        cfg.baseline.fres0_Hz - slope_f * halfspan,
        cfg.baseline.fres0_Hz + slope_f * halfspan);
    m.qi_of_vg = dynamics::LookupTable::linear(bias - halfspan, bias + halfspan,
                                               cfg.baseline.Qi0 - slope_q * halfspan,
                                               cfg.baseline.Qi0 + slope_q * halfspan);
  }
  return m;
}

dynamics::PulseSequence sequence_from_config(const io::RunConfig& cfg) {
  const auto& k = cfg.raw;
  dynamics::PulseSequence s;
  auto need = [&](const char* base) {
    const auto v = k.with_units(base, io::second_suffixes);
    if (!v) throw std::runtime_error(std::string("config: missing ") + base + "_us/_ns/_s");
    return *v;
  };
  s.trigger_period_s = need("sequence.trigger_period");
  s.readout_start_s = need("sequence.readout_start");
  s.readout_duration_s = need("sequence.readout_duration");
  s.gate_start_s = k.with_units("sequence.gate_start", io::second_suffixes).value_or(0.0);
  s.gate_duration_s =
      k.with_units("sequence.gate_duration", io::second_suffixes).value_or(0.0);
  if (k.has("sequence.gate_amplitude_V"))
    s.gate_amplitude_V = k.number("sequence.gate_amplitude_V");
  if (k.has("sequence.gate_bias_V")) s.gate_bias_V = k.number("sequence.gate_bias_V");
  if (const auto f = k.with_units("sequence.readout_freq", io::hertz_suffixes))
    s.readout_freq_Hz = *f;
  else
    s.readout_freq_Hz = cfg.baseline.fres0_Hz;
  return s;
}

int cmd_simulate(const io::RunConfig& cfg, const UnitContext& u,
                 double fro_center, double fro_span, size_t fro_n, double dt_opt,
                 double snr_db, std::uint64_t seed_opt, unsigned jobs,
                 const std::string& prefix) {
  const dynamics::PulseSequence seq = sequence_from_config(cfg);
  const dynamics::GateResponseModel model = gate_model_from_config(cfg);

  const double dt =
      dt_opt > 0.0 ? dt_opt * u.t
                   : cfg.raw.with_units("sequence.dt", io::second_suffixes).value_or(0.5e-9);

  std::vector<double> fro;
  if (fro_n == 1) {
    fro.push_back(fro_center > 0.0 ? fro_center * u.f : seq.readout_freq_Hz);
  } else {
    const double c = fro_center > 0.0 ? fro_center * u.f : seq.readout_freq_Hz;
    fro = make_grid(c - 0.5 * fro_span * u.f, c + 0.5 * fro_span * u.f, fro_n);
  }

  std::optional<dynamics::NoiseSpec> noise;
  if (snr_db > 0.0) noise = dynamics::NoiseSpec{snr_db, seed_opt};

  const dynamics::SimulationResult sim =
      dynamics::simulate_map(seq, fro, model, cfg.baseline, dt, noise, jobs);

  // combined map (long format) plus one trace file per readout frequency
  io::Table map;
  map.columns = {"t_s", "fro_Hz", "re", "im"};
  stamp(map, &cfg);
  map.metadata.emplace_back("rng", rng::algorithm_id);
  map.metadata.emplace_back("seed", std::to_string(noise ? noise->seed : cfg.seed));
  map.metadata.emplace_back("dt_s", fmt(dt));
  for (size_t j = 0; j < sim.traces.size(); ++j)
    for (size_t i = 0; i < sim.traces[j].s.size(); ++i)
      map.add_row({sim.t_s[i], sim.fro_Hz[j], sim.traces[j].s[i].real(),
                   sim.traces[j].s[i].imag()});

  const std::string base = prefix.empty() ? std::string("mbres_sim") : prefix;
  io::write_csv(base + "_map.csv", map);
  for (size_t j = 0; j < sim.traces.size(); ++j) {
    io::Table tr;
    tr.columns = {"t_s", "re", "im"};
    stamp(tr, &cfg);
    tr.metadata.emplace_back("fro_Hz", fmt(sim.fro_Hz[j]));
    tr.metadata.emplace_back("dt_s", fmt(dt));
    for (size_t i = 0; i < sim.traces[j].s.size(); ++i)
      tr.add_row({sim.t_s[i], sim.traces[j].s[i].real(), sim.traces[j].s[i].imag()});
    char suffix[32];
    std::snprintf(suffix, sizeof(suffix), "_trace_%03zu.csv", j);
    io::write_csv(base + suffix, tr);
  }
  std::cerr << "wrote " << base << "_map.csv and " << sim.traces.size()
            << " trace file(s)\n";
  return 0;
}

int cmd_sidebands(const io::RunConfig& cfg, const UnitContext& u, double tau_eff,
                  double mod_depth, double fg_min, double fg_max, size_t n,
                  const std::string& out) {
  std::vector<double> grid;
  const double lo = fg_min * u.f, hi = fg_max * u.f;
  if (!(hi > lo) || n < 2) throw std::runtime_error("sidebands: bad f_g grid");
  const double ratio = std::pow(hi / lo, 1.0 / static_cast<double>(n - 1));
  for (size_t i = 0; i < n; ++i) grid.push_back(lo * std::pow(ratio, i));

  const double depth = mod_depth > 0.0 ? mod_depth * u.f
                                       : 1e-3 * cfg.baseline.fres0_Hz / cfg.baseline.QL0();
  bool warn = false;
  dynamics::sideband_response(grid.front(), depth, tau_eff * u.t, cfg.baseline, &warn);
  if (warn) std::cerr << "warning: modulation depth outside the small-signal regime\n";

  const dynamics::SidebandSweep sw =
      dynamics::sideband_sweep(grid, depth, tau_eff * u.t, cfg.baseline);

  io::Table t;
  t.columns = {"fg_Hz", "amp_rel_dB"};
  stamp(t, &cfg);
  t.metadata.emplace_back("tau_eff_s", fmt(tau_eff * u.t));
  t.metadata.emplace_back("mod_depth_Hz", fmt(depth));
  t.metadata.emplace_back("f3dB_Hz", fmt(sw.f3dB_Hz));
  for (size_t i = 0; i < sw.fg_Hz.size(); ++i)
    t.add_row({sw.fg_Hz[i], sw.amp_rel_dB[i]});
  emit_table(t, out);
  std::cerr << "f3dB_Hz = " << fmt(sw.f3dB_Hz) << "\n";
  return 0;
}

// shared ingestion for fit commands: produce (x, y) from a CSV
struct XYData {
  std::vector<double> x, y;
};

XYData load_fit_input(const std::string& path, const std::string& quantity,
                      std::optional<double> at_s) {
  const io::Table t = io::read_csv_file(path);
  XYData d;
  auto transform = [&](double re, double im) {
    if (quantity == "power") return re * re + im * im;
    if (quantity == "mag") return std::hypot(re, im);
    throw std::runtime_error("unknown --quantity " + quantity);
  };
  if (t.has_column("fro_Hz") && t.has_column("t_s")) {
    // map file: vertical cut at the requested time
    if (!at_s) throw std::runtime_error("map input needs --at");
    const size_t ct = t.column("t_s"), cf = t.column("fro_Hz");
    const size_t cr = t.column("re"), ci = t.column("im");
    // nearest grid time
    double best = std::numeric_limits<double>::infinity();
    for (const auto& row : t.rows) best = std::min(best, std::fabs(row[ct] - *at_s));
    for (const auto& row : t.rows)
      if (std::fabs(row[ct] - *at_s) <= best + 1e-15) {
        d.x.push_back(row[cf]);
        d.y.push_back(transform(row[cr], row[ci]));
      }
  } else if (t.has_column("freq_Hz") && t.has_column("re")) {
    const size_t cf = t.column("freq_Hz"), cr = t.column("re"), ci = t.column("im");
    for (const auto& row : t.rows) {
      d.x.push_back(row[cf]);
      d.y.push_back(transform(row[cr], row[ci]));
    }
  } else if (t.has_column("t_s") && t.has_column("re")) {
    const size_t ct = t.column("t_s"), cr = t.column("re"), ci = t.column("im");
    for (const auto& row : t.rows) {
      d.x.push_back(row[ct]);
      d.y.push_back(transform(row[cr], row[ci]));
    }
  } else if (t.columns.size() == 2) {
    for (const auto& row : t.rows) {
      d.x.push_back(row[0]);
      d.y.push_back(row[1]);
    }
  } else {
    throw std::runtime_error("unrecognized input schema for fitting");
  }
  return d;
}

void write_residuals(const std::string& path, std::span<const double> x,
                     std::span<const double> y,
                     const std::function<double(double)>& model) {
  if (path.empty()) return;
  io::Table t;
  t.columns = {"x", "y", "model", "residual"};
  for (size_t i = 0; i < x.size(); ++i) {
    const double m = model(x[i]);
    t.add_row({x[i], y[i], m, y[i] - m});
  }
  io::write_csv(path, t);
}

int cmd_fit_circle(const std::string& in, std::optional<double> delay_s,
                   const std::string& out, const std::string& residuals) {
  const io::Table t = io::read_csv_file(in);
  io::expect_columns(t, {"freq_Hz", "re", "im"});
  std::vector<double> f = t.col("freq_Hz");
  std::vector<std::complex<double>> s(t.rows.size());
  for (size_t i = 0; i < t.rows.size(); ++i)
    s[i] = {t.rows[i][1], t.rows[i][2]};

  fitting::CircleFitOptions opts;
  opts.delay_s = delay_s;
  const fitting::CircleFitOutput r = fitting::circle_fit(f, s, opts);

  std::vector<std::pair<std::string, std::string>> rec;
  rec.emplace_back("fit.converged", r.fit.converged ? "1" : "0");
  rec.emplace_back("fit.iterations", std::to_string(r.fit.iterations));
  rec.emplace_back("fit.residual_norm", fmt(r.fit.residual_norm));
  for (size_t i = 0; i < r.fit.param_names.size(); ++i) {
    rec.emplace_back("param." + r.fit.param_names[i], fmt(r.fit.params[i]));
    rec.emplace_back("stderr." + r.fit.param_names[i], fmt(r.fit.stderrs[i]));
  }
  emit_record(rec, out);

  if (!residuals.empty()) {
    const synth::NotchParams np{r.fres_Hz, r.Qi, r.Qc_abs, r.phi, r.a, r.phi0,
                                r.delay_s};
    io::Table rt;
    rt.columns = {"freq_Hz", "re", "im", "model_re", "model_im"};
    for (size_t i = 0; i < f.size(); ++i) {
      const std::complex<double> m = synth::notch_s21(np, f[i]);
      rt.add_row({f[i], s[i].real(), s[i].imag(), m.real(), m.imag()});
    }
    io::write_csv(residuals, rt);
  }
  return 0;
}

int cmd_fit_lorentzian(const std::string& in, const std::string& quantity,
                       std::optional<double> at_s, const std::string& out,
                       const std::string& residuals) {
  const XYData d = load_fit_input(in, quantity, at_s);
  const fitting::LorentzianFit r = fitting::lorentzian_fit(d.x, d.y);
  std::vector<std::pair<std::string, std::string>> rec;
  rec.emplace_back("fit.converged", r.fit.converged ? "1" : "0");
  rec.emplace_back("fit.iterations", std::to_string(r.fit.iterations));
  rec.emplace_back("fit.residual_norm", fmt(r.fit.residual_norm));
  for (size_t i = 0; i < r.fit.param_names.size(); ++i) {
    rec.emplace_back("param." + r.fit.param_names[i], fmt(r.fit.params[i]));
    rec.emplace_back("stderr." + r.fit.param_names[i], fmt(r.fit.stderrs[i]));
  }
  rec.emplace_back("report.QL_gamma_as_hwhm", fmt(r.ql_if_gamma_is_hwhm()));
  rec.emplace_back("report.QL_gamma_as_fwhm", fmt(r.ql_if_gamma_is_fwhm()));
  emit_record(rec, out);
  const auto p = r.params;
  write_residuals(residuals, d.x, d.y,
                  [p](double f) { return fitting::lorentzian_model(p, f); });
  return 0;
}

int cmd_fit_exp(const std::string& in, const std::string& quantity, double t0_s,
                std::optional<double> A_opt, std::optional<double> tmax_s,
                const std::string& out, const std::string& residuals) {
  XYData d = load_fit_input(in, quantity, {});
  if (tmax_s) {
    XYData trimmed;
    for (size_t i = 0; i < d.x.size(); ++i)
      if (d.x[i] <= *tmax_s) {
        trimmed.x.push_back(d.x[i]);
        trimmed.y.push_back(d.y[i]);
      }
    d = std::move(trimmed);
  }
  double A;
  if (A_opt) {
    A = *A_opt;
  } else {
    // value at the first sample >= t0
    A = 0.0;
    bool found = false;
    for (size_t i = 0; i < d.x.size() && !found; ++i)
      if (d.x[i] >= t0_s) {
        A = d.y[i];
        found = true;
      }
    if (!found) throw std::runtime_error("no samples at t >= t0");
  }
  const fitting::ExpDecayFit r = fitting::exp_fit(d.x, d.y, t0_s, A);
  std::vector<std::pair<std::string, std::string>> rec;
  rec.emplace_back("fit.converged", r.fit.converged ? "1" : "0");
  rec.emplace_back("fit.iterations", std::to_string(r.fit.iterations));
  rec.emplace_back("fit.residual_norm", fmt(r.fit.residual_norm));
  rec.emplace_back("param.A", fmt(r.params.A));
  rec.emplace_back("param.t0_s", fmt(r.params.t0_s));
  rec.emplace_back("param.B", fmt(r.params.B));
  rec.emplace_back("stderr.B", fmt(r.fit.stderr_of("B")));
  rec.emplace_back("param.tau_s", fmt(r.params.tau_s));
  rec.emplace_back("stderr.tau_s", fmt(r.fit.stderr_of("tau_s")));
  emit_record(rec, out);
  const auto p = r.params;
  write_residuals(residuals, d.x, d.y, [p](double tt) {
    return tt < p.t0_s ? p.A : fitting::exp_decay_model(p, tt);
  });
  return 0;
}

int cmd_fit_mb(const io::RunConfig& cfg, const std::string& in, const std::string& mode,
               const std::string& weighting, const std::string& out) {
  const io::Table t = io::read_csv_file(in);
  const std::vector<double> T = t.col("T_K");
  const std::vector<double> dff = t.col("dff");
  const std::vector<double> dq = t.col("dinvQ");

  fitting::MbFitMode m = fitting::MbFitMode::averaged;
  if (mode == "averaged") m = fitting::MbFitMode::averaged;
  else if (mode == "joint") m = fitting::MbFitMode::joint;
  else if (mode == "dff") m = fitting::MbFitMode::dff_only;
  else if (mode == "dinvq") m = fitting::MbFitMode::dinvq_only;
  else throw std::runtime_error("unknown --mode " + mode);

  fitting::MbFitWeighting w = fitting::MbFitWeighting::uniform;
  if (weighting == "uniform") w = fitting::MbFitWeighting::uniform;
  else if (weighting == "invvar") w = fitting::MbFitWeighting::inverse_variance;
  else throw std::runtime_error("unknown --weighting " + weighting);

  const fitting::MbFitOutput r =
      fitting::mb_fit(T, dff, dq, cfg.baseline.fres0_Hz, m, w);
  if (r.range_warning)
    std::cerr << "warning: max(T) < 0.4 Tc estimate; fit poorly constrained\n";

  std::vector<std::pair<std::string, std::string>> rec;
  rec.emplace_back("param.alpha", fmt(r.alpha));
  rec.emplace_back("stderr.alpha", fmt(r.alpha_stderr));
  rec.emplace_back("param.Tc_K", fmt(r.Tc_K));
  rec.emplace_back("stderr.Tc_K", fmt(r.Tc_stderr));
  for (size_t c = 0; c < r.channel_fits.size(); ++c) {
    const auto& f = r.channel_fits[c];
    const std::string tag = "channel" + std::to_string(c);
    rec.emplace_back(tag + ".converged", f.converged ? "1" : "0");
    rec.emplace_back(tag + ".iterations", std::to_string(f.iterations));
    rec.emplace_back(tag + ".residual_norm", fmt(f.residual_norm));
    rec.emplace_back(tag + ".alpha", fmt(f.param("alpha")));
    rec.emplace_back(tag + ".Tc_K", fmt(f.param("Tc_K")));
  }
  emit_record(rec, out);
  return 0;
}

int cmd_gen(const io::RunConfig* cfg, const std::string& kind, const UnitContext& u,
            const io::KeyValues& flags, double snr_db, std::uint64_t seed,
            const std::string& out) {
  auto fnum = [&](const char* key, std::optional<double> def = {}) {
    if (flags.has(key)) return flags.number(key);
    if (def) return *def;
    throw std::runtime_error(std::string("gen: missing --") + key);
  };

  if (kind == "s21") {
    synth::NotchParams p;
    p.fres_Hz = fnum("fres") * u.f;
    p.Qi = fnum("qi");
    p.Qc_abs = fnum("qc");
    p.phi = fnum("phi", 0.0);
    p.a = fnum("a", 1.0);
    p.phi0 = fnum("phi0", 0.0);
    p.delay_s = fnum("delay", 0.0) * u.t;
    const double span = fnum("span", 6.0 * p.fres_Hz / p.QL());
    const size_t n = static_cast<size_t>(fnum("n", 801.0));
    const auto f = synth::linspace(p.fres_Hz - 0.5 * span * (flags.has("span") ? u.f : 1.0),
                                   p.fres_Hz + 0.5 * span * (flags.has("span") ? u.f : 1.0), n);
    std::optional<double> snr;
    if (snr_db > 0.0) snr = snr_db;
    const auto s = synth::gen_notch_trace(p, f, snr, seed);

    io::Table t;
    t.columns = {"freq_Hz", "re", "im"};
    t.metadata.emplace_back("generator", kVersion);
    t.metadata.emplace_back("rng", rng::algorithm_id);
    t.metadata.emplace_back("seed", std::to_string(seed));
    t.metadata.emplace_back("truth.fres_Hz", fmt(p.fres_Hz));
    t.metadata.emplace_back("truth.Qi", fmt(p.Qi));
    t.metadata.emplace_back("truth.Qc", fmt(p.Qc_abs));
    t.metadata.emplace_back("truth.QL", fmt(p.QL()));
    t.metadata.emplace_back("truth.phi", fmt(p.phi));
    t.metadata.emplace_back("truth.a", fmt(p.a));
    t.metadata.emplace_back("truth.phi0", fmt(p.phi0));
    t.metadata.emplace_back("truth.delay_s", fmt(p.delay_s));
    t.metadata.emplace_back("snr_dB", snr ? fmt(*snr) : "inf");
    for (size_t i = 0; i < f.size(); ++i)
      t.add_row({f[i], s[i].real(), s[i].imag()});
    emit_table(t, out);
    return 0;
  }

  if (kind == "timetrace") {
    const double fres = fnum("fres") * u.f;
    const double Qi = fnum("qi");
    const double Qc = fnum("qc");
    const double QL = 1.0 / (1.0 / Qi + 1.0 / Qc);
    const double fro = flags.has("fro") ? fnum("fro") * u.f : fres;
    const double dur = fnum("dur") * u.t;
    const double dt = fnum("dt", 0.0) > 0.0 ? fnum("dt") * u.t
                                            : QL / (constants::pi * fres) / 25.0;
    const size_t n = static_cast<size_t>(std::llround(dur / dt)) + 1;
    std::vector<double> fv(n, fres), qv(n, QL);
    dynamics::TimeTrace tr =
        dynamics::resonator_envelope(fv, qv, Qc, fro, {0.0, 2.0 * dur}, dt);
    if (snr_db > 0.0) {
      rng::SeededRng g(seed);
      const double sigma = std::pow(10.0, -snr_db / 20.0) / std::sqrt(2.0);
      for (auto& v : tr.s) v += sigma * g.complex_gaussian();
    }
    io::Table t;
    t.columns = {"t_s", "re", "im"};
    t.metadata.emplace_back("generator", kVersion);
    t.metadata.emplace_back("rng", rng::algorithm_id);
    t.metadata.emplace_back("seed", std::to_string(seed));
    t.metadata.emplace_back("truth.fres_Hz", fmt(fres));
    t.metadata.emplace_back("truth.QL", fmt(QL));
    t.metadata.emplace_back("truth.fro_Hz", fmt(fro));
    t.metadata.emplace_back("truth.ringup_s", fmt(QL / (constants::pi * fres)));
    t.metadata.emplace_back("snr_dB", snr_db > 0.0 ? fmt(snr_db) : "inf");
    for (size_t i = 0; i < tr.s.size(); ++i)
      t.add_row({tr.t(i), tr.s[i].real(), tr.s[i].imag()});
    emit_table(t, out);
    return 0;
  }

  if (kind == "response") {
    if (!cfg) throw std::runtime_error("gen response needs --config");
    const double tmin = fnum("tmin") * u.T;
    const double tmax = fnum("tmax") * u.T;
    const size_t n = static_cast<size_t>(fnum("n", 20.0));
    const double noise_rel = fnum("noise-rel", 0.0);
    rng::SeededRng g(seed);
    io::Table t;
    t.columns = {"T_K", "dff", "dinvQ", "fres_Hz", "Qi"};
    stamp(t, cfg);
    t.metadata.emplace_back("rng", rng::algorithm_id);
    t.metadata.emplace_back("seed", std::to_string(seed));
    t.metadata.emplace_back("truth.alpha", fmt(cfg->baseline.alpha));
    t.metadata.emplace_back("truth.Tc_K", fmt(cfg->material.Tc_K));
    t.metadata.emplace_back("noise_rel", fmt(noise_rel));
    for (const double T : make_grid(tmin, tmax, n)) {
      double dff = resonator::freq_shift(T, cfg->Tref_K, cfg->baseline, cfg->material);
      double dq = resonator::loss_shift(T, cfg->Tref_K, cfg->baseline, cfg->material);
      if (noise_rel > 0.0) {
        dff *= 1.0 + noise_rel * g.gaussian();
        dq *= 1.0 + noise_rel * g.gaussian();
      }
      t.add_row({T, dff, dq, cfg->baseline.fres0_Hz * (1.0 + dff),
                 1.0 / (1.0 / cfg->baseline.Qi0 + dq)});
    }
    emit_table(t, out);
    return 0;
  }

  throw std::runtime_error("unknown gen kind: " + kind);
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mattis-Bardeen superconducting resonator response toolkit"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  std::string config_path, out_path, units_decl;
  std::uint64_t seed = 1;

  auto add_common = [&](CLI::App* c, bool needs_config) {
    auto* opt = c->add_option("--config", config_path, "run configuration file");
    if (needs_config) opt->required();
    c->add_option("--out", out_path, "output path (default: stdout)");
    c->add_option("--seed", seed, "rng seed");
    c->add_option("--units", units_decl, "unit declaration, e.g. T=mK,f=GHz,t=ns");
  };

  // conductivity
  double tmin = 0.0, tmax = 0.0, f_opt = 0.0;
  size_t npts = 20;
  auto* c_cond = app.add_subcommand("conductivity", "thermal conductivity ratios vs T");
  add_common(c_cond, true);
  c_cond->add_option("--tmin", tmin)->required();
  c_cond->add_option("--tmax", tmax)->required();
  c_cond->add_option("--n", npts);
  c_cond->add_option("--f", f_opt, "evaluation frequency (default: baseline fres0)");

  // response
  auto* c_resp = app.add_subcommand("response", "forward model sweep (dff, dinvQ) vs T");
  add_common(c_resp, true);
  c_resp->add_option("--tmin", tmin)->required();
  c_resp->add_option("--tmax", tmax)->required();
  c_resp->add_option("--n", npts);

  // teff
  std::string in_path;
  auto* c_teff = app.add_subcommand("teff", "effective temperature from a dinvQ column");
  add_common(c_teff, true);
  c_teff->add_option("--in", in_path, "input CSV with a dinvQ column")->required();

  // tauqp
  auto* c_tau = app.add_subcommand("tauqp", "quasiparticle recombination time");
  add_common(c_tau, true);
  c_tau->add_option("--tmin", tmin);
  c_tau->add_option("--tmax", tmax);
  c_tau->add_option("--n", npts);
  c_tau->add_option("--in", in_path, "nqp_per_m3 CSV (generic mode)");

  // simulate
  double fro_center = 0.0, fro_span = 0.0, dt_opt = 0.0, snr_db = 0.0;
  size_t fro_n = 1;
  std::string prefix;
  auto* c_sim = app.add_subcommand("simulate", "pulsed gate-readout time-domain map");
  add_common(c_sim, true);
  c_sim->add_option("--fro-center", fro_center, "readout sweep center (default: sequence)");
  c_sim->add_option("--fro-span", fro_span, "readout sweep span");
  c_sim->add_option("--fro-n", fro_n, "number of readout frequencies");
  c_sim->add_option("--dt", dt_opt, "integration step (default: config or 0.5 ns)");
  c_sim->add_option("--snr-db", snr_db, "additive noise SNR (off when 0)");
  c_sim->add_option("--out-prefix", prefix, "output file prefix");
  unsigned jobs = 1;
  c_sim->add_option("--jobs", jobs, "parallel per-frequency integration");

  // sidebands
  double tau_eff = 0.0, mod_depth = 0.0, fg_min = 0.0, fg_max = 0.0;
  auto* c_side = app.add_subcommand("sidebands", "sideband roll-off vs gate frequency");
  add_common(c_side, true);
  c_side->add_option("--tau-eff", tau_eff, "device response time")->required();
  c_side->add_option("--mod-depth", mod_depth, "frequency modulation depth");
  c_side->add_option("--fg-min", fg_min)->required();
  c_side->add_option("--fg-max", fg_max)->required();
  c_side->add_option("--n", npts);

  // fit
  auto* c_fit = app.add_subcommand("fit", "model fitters");
  c_fit->require_subcommand(1);
  std::string quantity = "power", mode = "averaged", weighting = "uniform",
              residuals_path;
  double at_time = -1.0, t0 = 0.0, delay_opt = -1.0, A_opt = 0.0, tmax_opt = -1.0;
  bool have_A = false;

  auto* f_circle = c_fit->add_subcommand("circle", "notch-port circle fit");
  add_common(f_circle, false);
  f_circle->add_option("--in", in_path)->required();
  f_circle->add_option("--delay", delay_opt, "fix the cable delay instead of estimating");
  f_circle->add_option("--residuals", residuals_path, "write data-vs-model CSV");

  auto* f_lor = c_fit->add_subcommand("lorentzian", "Lorentzian dip/peak fit");
  add_common(f_lor, false);
  f_lor->add_option("--in", in_path)->required();
  f_lor->add_option("--quantity", quantity, "power | mag (complex traces)");
  f_lor->add_option("--at", at_time, "cut time for map inputs");
  f_lor->add_option("--residuals", residuals_path);

  auto* f_exp = c_fit->add_subcommand("exp", "exponential decay fit (B, tau)");
  add_common(f_exp, false);
  f_exp->add_option("--in", in_path)->required();
  f_exp->add_option("--quantity", quantity, "mag | power (complex traces)");
  f_exp->add_option("--t0", t0, "fit start time")->required();
  f_exp->add_option("--A", A_opt, "fixed initial value (default: sample at t0)")
      ->each([&](const std::string&) { have_A = true; });
  f_exp->add_option("--tmax", tmax_opt, "discard samples after this time");
  f_exp->add_option("--residuals", residuals_path);

  auto* f_mb = c_fit->add_subcommand("mb", "Mattis-Bardeen (alpha, Tc) fit");
  add_common(f_mb, true);
  f_mb->add_option("--in", in_path)->required();
  f_mb->add_option("--mode", mode, "averaged | joint | dff | dinvq");
  f_mb->add_option("--weighting", weighting, "uniform | invvar");

  // gen
  auto* c_gen = app.add_subcommand("gen", "synthetic data factory");
  c_gen->require_subcommand(1);
  std::map<std::string, double> gen_flags;
  auto add_gen_kind = [&](const char* kind, const char* desc,
                          std::vector<const char*> keys) {
    auto* g = c_gen->add_subcommand(kind, desc);
    add_common(g, std::string(kind) == "response");
    g->add_option("--snr-db", snr_db, "noise SNR (off when 0)");
    for (const char* key : keys)
      g->add_option(std::string("--") + key, gen_flags[key]);
    return g;
  };
  auto* g_s21 = add_gen_kind(
      "s21", "notch-port trace",
      {"fres", "qi", "qc", "phi", "a", "phi0", "delay", "span", "n"});
  auto* g_tt = add_gen_kind("timetrace", "constant-parameter ring-up trace",
                            {"fres", "qi", "qc", "fro", "dur", "dt"});
  auto* g_resp = add_gen_kind("response", "forward-model sweep with noise",
                              {"tmin", "tmax", "n", "noise-rel"});

  CLI11_PARSE(app, argc, argv);

  try {
    UnitContext u;
    u.parse(units_decl);

    std::optional<io::RunConfig> cfg;
    if (!config_path.empty()) cfg = io::RunConfig::from_file(config_path);

    auto gen_kv = [&](CLI::App* g, const std::vector<const char*>& keys) {
      io::KeyValues kv;
      for (const char* key : keys)
        if (g->count(std::string("--") + key) > 0)
          kv.kv[key] = io::format_value(gen_flags[key]);
      return kv;
    };

    if (*c_cond) return cmd_conductivity(*cfg, u, tmin, tmax, npts, f_opt, out_path);
    if (*c_resp) return cmd_response(*cfg, u, tmin, tmax, npts, out_path);
    if (*c_teff) return cmd_teff(*cfg, in_path, out_path);
    if (*c_tau) return cmd_tauqp(*cfg, u, tmin, tmax, npts, in_path, out_path);
    if (*c_sim)
      return cmd_simulate(*cfg, u, fro_center, fro_span, fro_n, dt_opt, snr_db,
                          c_sim->count("--seed") ? seed : cfg->seed, jobs, prefix);
    if (*c_side)
      return cmd_sidebands(*cfg, u, tau_eff, mod_depth, fg_min, fg_max, npts, out_path);
    if (*f_circle)
      return cmd_fit_circle(in_path,
                            delay_opt >= 0.0 ? std::optional<double>(delay_opt * u.t)
                                             : std::nullopt,
                            out_path, residuals_path);
    if (*f_lor)
      return cmd_fit_lorentzian(in_path, quantity,
                                at_time >= 0.0 ? std::optional<double>(at_time * u.t)
                                               : std::nullopt,
                                out_path, residuals_path);
    if (*f_exp) {
      quantity = f_exp->count("--quantity") ? quantity : "mag";
      return cmd_fit_exp(in_path, quantity, t0 * u.t,
                         have_A ? std::optional<double>(A_opt) : std::nullopt,
                         tmax_opt >= 0.0 ? std::optional<double>(tmax_opt * u.t)
                                         : std::nullopt,
                         out_path, residuals_path);
    }
    if (*f_mb) return cmd_fit_mb(*cfg, in_path, mode, weighting, out_path);
    if (*g_s21)
      return cmd_gen(cfg ? &*cfg : nullptr, "s21", u,
                     gen_kv(g_s21, {"fres", "qi", "qc", "phi", "a", "phi0", "delay",
                                    "span", "n"}),
                     snr_db, seed, out_path);
    if (*g_tt)
      return cmd_gen(cfg ? &*cfg : nullptr, "timetrace", u,
                     gen_kv(g_tt, {"fres", "qi", "qc", "fro", "dur", "dt"}), snr_db,
                     seed, out_path);
    if (*g_resp)
      return cmd_gen(cfg ? &*cfg : nullptr, "response", u,
                     gen_kv(g_resp, {"tmin", "tmax", "n", "noise-rel"}), snr_db, seed,
                     out_path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
