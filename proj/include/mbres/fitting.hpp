#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mbres/mattis_bardeen.hpp"
#include "mbres/resonator.hpp"

// Damped least-squares engine (Levenberg-Marquardt with a Gauss-Newton first
// attempt) plus the four model fitters used in the analysis pipeline:
// Lorentzian dip/peak, fixed-start exponential decay, notch-port circle fit,
// and the joint (alpha, T_c) Mattis-Bardeen fit.

namespace mbres::fitting {

struct FitResult {
  std::vector<std::string> param_names;
  std::vector<double> params;
  std::vector<double> stderrs;    // Gauss-Newton covariance estimates
  double residual_norm = 0.0;     // sqrt(sum r_i^2) at the solution
  bool converged = false;
  int iterations = 0;

  double param(const std::string& name) const {
    for (size_t i = 0; i < param_names.size(); ++i)
      if (param_names[i] == name) return params[i];
    throw std::invalid_argument("FitResult: unknown parameter " + name);
  }
  double stderr_of(const std::string& name) const {
    for (size_t i = 0; i < param_names.size(); ++i)
      if (param_names[i] == name) return stderrs[i];
    throw std::invalid_argument("FitResult: unknown parameter " + name);
  }
};

struct NllsOptions {
  int max_iterations = 200;
  double cost_rel_tol = 1e-10;          // relative cost-change termination
  std::vector<double> lower_bounds;     // empty => unbounded
  std::vector<double> upper_bounds;
  std::vector<double> typical_scale;    // finite-difference scale per param
};

// Residual interface: fill r (size fixed at call time) from parameters p.
using ResidualFn = std::function<void(std::span<const double>, std::span<double>)>;

namespace detail {

// Solve A x = b (n x n, row-major) by Gaussian elimination with partial
// pivoting; A and b are destroyed. Throws on (numerically) singular A.
inline std::vector<double> solve_dense(std::vector<double> A, std::vector<double> b,
                                       size_t n) {
  for (size_t col = 0; col < n; ++col) {
    size_t piv = col;
    for (size_t r = col + 1; r < n; ++r)
      if (std::fabs(A[r * n + col]) > std::fabs(A[piv * n + col])) piv = r;
    if (std::fabs(A[piv * n + col]) < 1e-300)
      throw std::runtime_error("nlls: singular normal-equations matrix");
    if (piv != col) {
      for (size_t c = 0; c < n; ++c) std::swap(A[col * n + c], A[piv * n + c]);
      std::swap(b[col], b[piv]);
    }
    const double inv = 1.0 / A[col * n + col];
    for (size_t r = col + 1; r < n; ++r) {
      const double f = A[r * n + col] * inv;
      if (f == 0.0) continue;
      for (size_t c = col; c < n; ++c) A[r * n + c] -= f * A[col * n + c];
      b[r] -= f * b[col];
    }
  }
  std::vector<double> x(n);
  for (size_t ri = n; ri-- > 0;) {
    double s = b[ri];
    for (size_t c = ri + 1; c < n; ++c) s -= A[ri * n + c] * x[c];
    x[ri] = s / A[ri * n + ri];
  }
  return x;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Central-difference Jacobian, J[i*np + j] = d r_i / d p_j. Evaluation points
// are clamped into the feasible box (one-sided difference at a bound) so the
// residual function is never called outside it.
inline std::vector<double> numeric_jacobian(const ResidualFn& f, std::span<const double> p,
                                            size_t m, std::span<const double> scale,
                                            std::span<const double> lb,
                                            std::span<const double> ub) {
  const size_t np = p.size();
  std::vector<double> J(m * np);
  std::vector<double> pp(p.begin(), p.end());
  std::vector<double> rp(m), rm(m);
  constexpr double rel = 6.055454452393343e-06; // cbrt(machine eps)
  for (size_t j = 0; j < np; ++j) {
    const double h = rel * std::max(std::fabs(p[j]), scale[j]);
    const double save = pp[j];
    double hi = save + h, lo = save - h;
    if (!ub.empty()) hi = std::min(hi, ub[j]);
    if (!lb.empty()) lo = std::max(lo, lb[j]);
    pp[j] = hi;
    f(pp, rp);
    pp[j] = lo;
    f(pp, rm);
    pp[j] = save;
    const double invd = 1.0 / (hi - lo);
    for (size_t i = 0; i < m; ++i) J[i * np + j] = (rp[i] - rm[i]) * invd;
  }
  return J;
}

inline void clamp_to_bounds(std::vector<double>& p, const NllsOptions& o) {
  if (!o.lower_bounds.empty())
    for (size_t j = 0; j < p.size(); ++j) p[j] = std::max(p[j], o.lower_bounds[j]);
  if (!o.upper_bounds.empty())
    for (size_t j = 0; j < p.size(); ++j) p[j] = std::min(p[j], o.upper_bounds[j]);
}

} // namespace detail

/// Damped least-squares minimisation of ||r(p)||^2 with a numerical Jacobian.
/// Starts as Gauss-Newton (lambda = 0) and escalates Marquardt damping on
/// rejected steps, so exactly-linear problems finish in <= 2 iterations.
/// Non-convergence is reported through FitResult::converged, not thrown;
/// a structurally singular Jacobian (parameter without effect) throws.
inline FitResult nlls(const ResidualFn& residuals, size_t n_residuals,
                      std::vector<double> init, NllsOptions opts = {},
                      std::vector<std::string> names = {}) {
  const size_t np = init.size();
  const size_t m = n_residuals;
  if (np == 0 || m == 0) throw std::invalid_argument("nlls: empty problem");
  if (!opts.lower_bounds.empty() && opts.lower_bounds.size() != np)
    throw std::invalid_argument("nlls: bound size mismatch");
  if (!opts.upper_bounds.empty() && opts.upper_bounds.size() != np)
    throw std::invalid_argument("nlls: bound size mismatch");
  if (opts.typical_scale.empty()) {
    opts.typical_scale.assign(np, 0.0);
    for (size_t j = 0; j < np; ++j)
      opts.typical_scale[j] = std::fabs(init[j]) > 0.0 ? std::fabs(init[j]) : 1.0;
  }

  std::vector<double> p = std::move(init);
  detail::clamp_to_bounds(p, opts);
  std::vector<double> r(m), rt(m);
  residuals(p, r);
  double cost = detail::dot(r, r);

  FitResult out;
  out.param_names = names.empty() ? std::vector<std::string>(np, "") : std::move(names);
  double lambda = 0.0;
  bool converged = false;
  int performed = 0;

  std::vector<double> J;
  for (int iter = 1; iter <= opts.max_iterations && !converged; ++iter) {
    performed = iter;
    J = detail::numeric_jacobian(residuals, p, m, opts.typical_scale,
                                 opts.lower_bounds, opts.upper_bounds);

    // normal equations
    std::vector<double> A(np * np, 0.0), g(np, 0.0);
    for (size_t i = 0; i < m; ++i)
      for (size_t j = 0; j < np; ++j) {
        g[j] += J[i * np + j] * r[i];
        for (size_t k = j; k < np; ++k) A[j * np + k] += J[i * np + j] * J[i * np + k];
      }
    for (size_t j = 0; j < np; ++j)
      for (size_t k = 0; k < j; ++k) A[j * np + k] = A[k * np + j];

    for (size_t j = 0; j < np; ++j)
      if (A[j * np + j] == 0.0)
        throw std::runtime_error("nlls: singular Jacobian (parameter " +
                                 std::to_string(j) + " has no effect)");

    bool accepted = false;
    while (!accepted) {
      std::vector<double> Ad = A;
      for (size_t j = 0; j < np; ++j) Ad[j * np + j] += lambda * A[j * np + j];
      std::vector<double> rhs(np);
      for (size_t j = 0; j < np; ++j) rhs[j] = -g[j];

      std::vector<double> step;
      bool solved = true;
      try {
        step = detail::solve_dense(std::move(Ad), std::move(rhs), np);
      } catch (const std::runtime_error&) {
        solved = false;
      }

      if (solved) {
        double step_scale = 0.0;
        for (size_t j = 0; j < np; ++j)
          step_scale = std::max(step_scale, std::fabs(step[j]) /
                                                std::max(std::fabs(p[j]),
                                                         opts.typical_scale[j]));
        std::vector<double> trial = p;
        for (size_t j = 0; j < np; ++j) trial[j] += step[j];
        detail::clamp_to_bounds(trial, opts);
        residuals(trial, rt);
        const double tc = detail::dot(rt, rt);
        // termination: negligible step (relative xtol; the floor is set by
        // the finite-difference noise in J), or cost change below the
        // relative tolerance in either direction
        if (step_scale <= 1e-10 ||
            std::fabs(cost - tc) <= opts.cost_rel_tol * std::max(cost, 1e-300)) {
          if (tc <= cost) {
            p = std::move(trial);
            std::swap(r, rt);
            cost = tc;
          }
          accepted = true;
          converged = true;
          break;
        }
        if (tc < cost) {
          p = std::move(trial);
          std::swap(r, rt);
          cost = tc;
          lambda = lambda < 1e-12 ? 0.0 : lambda / 3.0;
          accepted = true;
          break;
        }
      }
      lambda = lambda == 0.0 ? 1e-4 : lambda * 7.0;
      if (lambda > 1e14) break; // stuck; report non-convergence
    }
    if (!accepted) break;
  }

  // covariance from the (undamped) normal equations at the solution
  J = detail::numeric_jacobian(residuals, p, m, opts.typical_scale,
                               opts.lower_bounds, opts.upper_bounds);
  std::vector<double> A(np * np, 0.0);
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < np; ++j)
      for (size_t k = 0; k < np; ++k) A[j * np + k] += J[i * np + j] * J[i * np + k];
  const double s2 = cost / std::max<size_t>(1, m > np ? m - np : 1);
  out.stderrs.assign(np, std::numeric_limits<double>::quiet_NaN());
  try {
    for (size_t j = 0; j < np; ++j) {
      std::vector<double> e(np, 0.0);
      e[j] = 1.0;
      const std::vector<double> col = detail::solve_dense(A, std::move(e), np);
      out.stderrs[j] = std::sqrt(std::max(0.0, s2 * col[j]));
    }
  } catch (const std::runtime_error&) {
    // leave NaN stderrs when the information matrix is singular at the optimum
  }

  out.params = std::move(p);
  out.residual_norm = std::sqrt(cost);
  out.converged = converged;
  out.iterations = performed;
  return out;
}

/// Scalar-model convenience wrapper: residual_i = w_i (model(p, x_i) - y_i).
inline FitResult fit_curve(const std::function<double(std::span<const double>, double)>& model,
                           std::span<const double> x, std::span<const double> y,
                           std::span<const double> w, std::vector<double> init,
                           NllsOptions opts = {}, std::vector<std::string> names = {}) {
  if (x.size() != y.size() || x.empty())
    throw std::invalid_argument("fit_curve: x/y size mismatch");
  if (!w.empty() && w.size() != x.size())
    throw std::invalid_argument("fit_curve: weight size mismatch");
  for (size_t i = 0; i < x.size(); ++i)
    if (!std::isfinite(x[i]) || !std::isfinite(y[i]))
      throw std::invalid_argument("fit_curve: non-finite data");
  auto fn = [&, model](std::span<const double> p, std::span<double> r) {
    for (size_t i = 0; i < x.size(); ++i) {
      const double wi = w.empty() ? 1.0 : w[i];
      r[i] = wi * (model(p, x[i]) - y[i]);
    }
  };
  return nlls(fn, x.size(), std::move(init), std::move(opts), std::move(names));
}

// ---------------------------------------------------------------------------
// Lorentzian
// ---------------------------------------------------------------------------

struct LorentzianParams {
  double f_star_Hz = 0.0; // extremum location
  double gamma_Hz = 0.0;  // half width at half extremum of the algebraic form
  double beta = 0.0;      // signed amplitude (negative for a dip)
  double theta = 0.0;     // baseline offset
};

struct LorentzianFit {
  LorentzianParams params;
  FitResult fit;
  // The shape parameter gamma is the HWHM of the algebraic form; both loaded-Q
  // conventions are reported since 'gamma = FWHM' is also in circulation.
  double ql_if_gamma_is_hwhm() const { return params.f_star_Hz / (2.0 * params.gamma_Hz); }
  double ql_if_gamma_is_fwhm() const { return params.f_star_Hz / params.gamma_Hz; }
};

inline double lorentzian_model(const LorentzianParams& p, double f) {
  const double d = f - p.f_star_Hz;
  return p.beta * p.gamma_Hz * p.gamma_Hz / (d * d + p.gamma_Hz * p.gamma_Hz) + p.theta;
}

/// Fit y(f) = beta g^2/((f - f*)^2 + g^2) + theta to a dip or peak.
inline LorentzianFit lorentzian_fit(std::span<const double> freq,
                                    std::span<const double> y) {
  const size_t n = freq.size();
  if (n < 8 || y.size() != n)
    throw std::invalid_argument("lorentzian_fit: need >= 8 points");

  // baseline from the outer quartiles
  std::vector<double> outer;
  for (size_t i = 0; i < n; ++i)
    if (i < n / 4 || i >= n - n / 4) outer.push_back(y[i]);
  std::nth_element(outer.begin(), outer.begin() + outer.size() / 2, outer.end());
  const double theta0 = outer[outer.size() / 2];

  size_t iext = 0;
  double dev = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const double d = std::fabs(y[i] - theta0);
    if (d > dev) {
      dev = d;
      iext = i;
    }
  }
  const double span_f = freq.back() - freq.front();
  double ymin = y[0], ymax = y[0];
  for (const double v : y) {
    ymin = std::min(ymin, v);
    ymax = std::max(ymax, v);
  }
  if (!(dev > 0.0) || !(ymax - ymin > 1e-14 * std::max(std::fabs(ymax), 1.0)))
    throw std::invalid_argument("lorentzian_fit: degenerate (flat) data");

  const double beta0 = y[iext] - theta0;
  // half width at half extremum by scanning outward
  double fl = freq.front(), fr = freq.back();
  for (size_t i = iext; i-- > 0;)
    if (std::fabs(y[i] - theta0) < 0.5 * dev) {
      fl = freq[i];
      break;
    }
  for (size_t i = iext + 1; i < n; ++i)
    if (std::fabs(y[i] - theta0) < 0.5 * dev) {
      fr = freq[i];
      break;
    }
  double gamma0 = 0.5 * (fr - fl);
  if (!(gamma0 > 0.0)) gamma0 = span_f / 6.0;

  NllsOptions opts;
  opts.lower_bounds = {freq.front() - span_f, 1e-9 * span_f, -std::fabs(beta0) * 1e3,
                       theta0 - 1e3 * dev};
  opts.upper_bounds = {freq.back() + span_f, 10.0 * span_f, std::fabs(beta0) * 1e3,
                       theta0 + 1e3 * dev};
  opts.typical_scale = {std::max(std::fabs(freq[iext]), span_f), gamma0,
                        std::fabs(beta0), std::max(std::fabs(theta0), std::fabs(beta0))};

  auto model = [](std::span<const double> p, double f) {
    const double d = f - p[0];
    return p[2] * p[1] * p[1] / (d * d + p[1] * p[1]) + p[3];
  };
  FitResult res = fit_curve(model, freq, y, {}, {freq[iext], gamma0, beta0, theta0},
                            std::move(opts), {"f_star_Hz", "gamma_Hz", "beta", "theta"});

  LorentzianFit out;
  out.params = {res.params[0], res.params[1], res.params[2], res.params[3]};
  out.fit = std::move(res);
  return out;
}

// ---------------------------------------------------------------------------
// Exponential decay toward a final value
// ---------------------------------------------------------------------------

struct ExpDecayParams {
  double A = 0.0;    // initial value (fixed)
  double B = 0.0;    // final value (fitted)
  double t0_s = 0.0; // start time (fixed)
  double tau_s = 0.0;
};

struct ExpDecayFit {
  ExpDecayParams params;
  FitResult fit;
};

inline double exp_decay_model(const ExpDecayParams& p, double t) {
  return p.A + (p.B - p.A) * -std::expm1(-(t - p.t0_s) / p.tau_s);
}

/// Two-parameter fit of y(t) = A + (B - A)(1 - e^{-(t-t0)/tau}) for t >= t0,
/// i.e. a decay from the supplied initial value A toward fitted B. (The
/// equivalent form A' + (B - A') e^{-(t-t0)/tau} with A' = y(t0) is the usual
/// way this is written; a growing exponent would diverge and is not offered.)
inline ExpDecayFit exp_fit(std::span<const double> t, std::span<const double> y,
                           double t0_s, double A) {
  if (t.size() != y.size()) throw std::invalid_argument("exp_fit: size mismatch");
  std::vector<double> ts, ys;
  for (size_t i = 0; i < t.size(); ++i)
    if (t[i] >= t0_s) {
      ts.push_back(t[i]);
      ys.push_back(y[i]);
    }
  if (ts.size() < 4) throw std::invalid_argument("exp_fit: need >= 4 samples at t >= t0");

  double ymin = ys[0], ymax = ys[0];
  for (const double v : ys) {
    ymin = std::min(ymin, v);
    ymax = std::max(ymax, v);
  }
  if (!(ymax - ymin > 1e-14 * std::max(1.0, std::fabs(ymax))))
    throw std::invalid_argument("exp_fit: degenerate (constant) data");

  const size_t ntail = std::max<size_t>(3, ts.size() / 10);
  double B0 = 0.0;
  for (size_t i = ts.size() - ntail; i < ts.size(); ++i) B0 += ys[i];
  B0 /= ntail;

  const double T = ts.back() - t0_s;
  double tau0 = T / 3.0;
  for (size_t i = 0; i < ts.size(); ++i)
    if (std::fabs(ys[i] - B0) <= 0.5 * std::fabs(A - B0)) {
      const double dt = ts[i] - t0_s;
      if (dt > 0.0) tau0 = dt / 0.6931471805599453;
      break;
    }

  NllsOptions opts;
  opts.lower_bounds = {-1e12, 1e-9 * T};
  opts.upper_bounds = {1e12, 1e3 * T};
  opts.typical_scale = {std::max(std::fabs(B0), std::fabs(A - B0)), tau0};

  auto model = [t0_s, A](std::span<const double> p, double tt) {
    return A + (p[0] - A) * -std::expm1(-(tt - t0_s) / p[1]);
  };
  FitResult res = fit_curve(model, ts, ys, {}, {B0, tau0}, std::move(opts),
                            {"B", "tau_s"});
  ExpDecayFit out;
  out.params = {A, res.params[0], t0_s, res.params[1]};
  out.fit = std::move(res);
  return out;
}

// ---------------------------------------------------------------------------
// Notch-port circle fit
// ---------------------------------------------------------------------------

struct CircleFitOutput {
  double fres_Hz = 0.0;
  double QL = 0.0;
  double Qc_abs = 0.0;
  double Qi = 0.0;
  double phi = 0.0;      // impedance-mismatch angle
  double delay_s = 0.0;  // cable delay removed from the data
  double a = 0.0;        // off-resonant amplitude
  double phi0 = 0.0;     // off-resonant phase
  FitResult fit;         // assembled parameter record
};

namespace detail {

struct Circle {
  double xc = 0.0, yc = 0.0, r = 0.0;
};

// Taubin algebraic circle fit (Chernov's moment formulation).
inline Circle taubin_circle(std::span<const std::complex<double>> z) {
  const size_t n = z.size();
  double mx = 0.0, my = 0.0;
  for (const auto& p : z) {
    mx += p.real();
    my += p.imag();
  }
  mx /= n;
  my /= n;
  double Mxx = 0, Myy = 0, Mxy = 0, Mxz = 0, Myz = 0, Mzz = 0;
  for (const auto& p : z) {
    const double xi = p.real() - mx, yi = p.imag() - my;
    const double zi = xi * xi + yi * yi;
    Mxx += xi * xi;
    Myy += yi * yi;
    Mxy += xi * yi;
    Mxz += xi * zi;
    Myz += yi * zi;
    Mzz += zi * zi;
  }
  Mxx /= n;
  Myy /= n;
  Mxy /= n;
  Mxz /= n;
  Myz /= n;
  Mzz /= n;

  const double Mz = Mxx + Myy;
  const double Cov_xy = Mxx * Myy - Mxy * Mxy;
  const double Var_z = Mzz - Mz * Mz;
  const double A3 = 4.0 * Mz;
  const double A2 = -3.0 * Mz * Mz - Mzz;
  const double A1 = Var_z * Mz + 4.0 * Cov_xy * Mz - Mxz * Mxz - Myz * Myz;
  const double A0 = Mxz * (Mxz * Myy - Myz * Mxy) + Myz * (Myz * Mxx - Mxz * Mxy) -
                    Var_z * Cov_xy;
  const double A22 = A2 + A2;
  const double A33 = A3 + A3 + A3;

  double x = 0.0, yv = A0;
  for (int i = 0; i < 99; ++i) {
    const double dy = A1 + x * (A22 + x * A33);
    const double xnew = x - yv / dy;
    if (!std::isfinite(xnew) || xnew == x) break;
    const double ynew = A0 + xnew * (A1 + xnew * (A2 + xnew * A3));
    if (std::fabs(ynew) >= std::fabs(yv)) break;
    x = xnew;
    yv = ynew;
  }
  const double det = x * x - x * Mz + Cov_xy;
  if (std::fabs(det) < 1e-30)
    throw std::runtime_error("circle_fit: degenerate circle (collinear points)");
  Circle c;
  c.xc = (Mxz * (Myy - x) - Myz * Mxy) / det / 2.0 + mx;
  c.yc = (Myz * (Mxx - x) - Mxz * Mxy) / det / 2.0 + my;
  const double cx = c.xc - mx, cy = c.yc - my;
  c.r = std::sqrt(cx * cx + cy * cy + Mz);
  if (!(c.r > 0.0) || !std::isfinite(c.r))
    throw std::runtime_error("circle_fit: degenerate circle");
  return c;
}

inline double circle_radial_rms(std::span<const std::complex<double>> z) {
  const Circle c = taubin_circle(z);
  double s = 0.0;
  for (const auto& p : z) {
    const double d = std::hypot(p.real() - c.xc, p.imag() - c.yc) - c.r;
    s += d * d;
  }
  return std::sqrt(s / z.size());
}

inline std::vector<std::complex<double>> remove_delay(std::span<const double> f,
                                                      std::span<const std::complex<double>> s,
                                                      double delay_s) {
  std::vector<std::complex<double>> z(s.size());
  for (size_t i = 0; i < s.size(); ++i) {
    const double ph = 2.0 * constants::pi * f[i] * delay_s;
    z[i] = s[i] * std::complex<double>(std::cos(ph), std::sin(ph));
  }
  return z;
}

inline std::vector<double> unwrap_phase(std::span<const std::complex<double>> z) {
  std::vector<double> ph(z.size());
  double offset = 0.0;
  double prev = std::arg(z[0]);
  ph[0] = prev;
  for (size_t i = 1; i < z.size(); ++i) {
    double a = std::arg(z[i]);
    double d = a - prev;
    while (d > constants::pi) {
      offset -= 2.0 * constants::pi;
      d -= 2.0 * constants::pi;
    }
    while (d < -constants::pi) {
      offset += 2.0 * constants::pi;
      d += 2.0 * constants::pi;
    }
    ph[i] = a + offset;
    prev = a;
  }
  return ph;
}

} // namespace detail

struct CircleFitOptions {
  std::optional<double> delay_s {}; // fix the cable delay instead of estimating
};

/// Extract (f_res, Q_L, Q_c, Q_i) from a complex notch-port trace
///   S21(f) = a e^{i phi0} e^{-2 pi i f tau} [1 - (Q_L/|Q_c|) e^{i phi} /
///            (1 + 2 i Q_L (f/f_res - 1))].
/// Pipeline: cable-delay estimation from the off-resonant phase slope with a
/// radial-variance refinement, algebraic (Taubin) circle fit, phase-vs-
/// frequency fit for f_res and Q_L, Q_c from the normalized diameter with
/// mismatch angle phi, and the diameter-corrected 1/Q_i = 1/Q_L - cos(phi)/|Q_c|.
inline CircleFitOutput circle_fit(std::span<const double> freq,
                                  std::span<const std::complex<double>> s21,
                                  CircleFitOptions copts = {}) {
  const size_t n = freq.size();
  if (n < 30 || s21.size() != n)
    throw std::invalid_argument("circle_fit: need >= 30 points");
  for (size_t i = 1; i < n; ++i)
    if (!(freq[i] > freq[i - 1]))
      throw std::invalid_argument("circle_fit: frequencies must be strictly increasing");

  // (i) cable delay from the joint phase slope of the two off-resonant wings
  double delay = 0.0;
  if (copts.delay_s) {
    delay = *copts.delay_s;
  } else {
    const auto ph = detail::unwrap_phase(s21);
    const size_t wing = std::max<size_t>(5, n / 8);
    std::vector<double> fx, fy;
    for (size_t i = 0; i < wing; ++i) {
      fx.push_back(freq[i]);
      fy.push_back(ph[i]);
      fx.push_back(freq[n - 1 - i]);
      fy.push_back(ph[n - 1 - i]);
    }
    const double mxf = std::accumulate(fx.begin(), fx.end(), 0.0) / fx.size();
    const double myf = std::accumulate(fy.begin(), fy.end(), 0.0) / fy.size();
    double sxx = 0.0, sxy = 0.0;
    for (size_t i = 0; i < fx.size(); ++i) {
      sxx += (fx[i] - mxf) * (fx[i] - mxf);
      sxy += (fx[i] - mxf) * (fy[i] - myf);
    }
    const double slope = sxy / sxx;
    const double tau0 = -slope / (2.0 * constants::pi);

    // refine: the delay-corrected trace must be circular; minimise the
    // radial scatter of the algebraic fit around tau0. The scatter is not
    // unimodal in tau once the residual winding exceeds ~1 turn, so locate
    // the global minimum with a coarse scan before golden-section refining.
    const double span_f = freq.back() - freq.front();
    auto rms_at = [&](double tau) {
      try {
        return detail::circle_radial_rms(detail::remove_delay(freq, s21, tau));
      } catch (const std::runtime_error&) {
        return std::numeric_limits<double>::infinity();
      }
    };
    const double half_window = 1.5 / span_f;
    const int ncoarse = 120;
    double best_tau = tau0;
    double best_rms = std::numeric_limits<double>::infinity();
    for (int k = 0; k <= ncoarse; ++k) {
      const double tau = tau0 - half_window + 2.0 * half_window * k / ncoarse;
      const double v = rms_at(tau);
      if (v < best_rms) {
        best_rms = v;
        best_tau = tau;
      }
    }
    double lo = best_tau - 2.0 * half_window / ncoarse;
    double hi = best_tau + 2.0 * half_window / ncoarse;
    const double gr = 0.5 * (std::sqrt(5.0) - 1.0);
    double x1 = hi - gr * (hi - lo), x2 = lo + gr * (hi - lo);
    double f1 = rms_at(x1), f2 = rms_at(x2);
    for (int it = 0; it < 120 && (hi - lo) > 1e-19; ++it) {
      if (f1 < f2) {
        hi = x2;
        x2 = x1;
        f2 = f1;
        x1 = hi - gr * (hi - lo);
        f1 = rms_at(x1);
      } else {
        lo = x1;
        x1 = x2;
        f1 = f2;
        x2 = lo + gr * (hi - lo);
        f2 = rms_at(x2);
      }
    }
    delay = 0.5 * (lo + hi);
  }

  const std::vector<std::complex<double>> z = detail::remove_delay(freq, s21, delay);

  // (ii) algebraic circle fit
  const detail::Circle circ = detail::taubin_circle(z);
  {
    double xmin = z[0].real(), xmax = xmin, ymin = z[0].imag(), ymax = ymin;
    for (const auto& p : z) {
      xmin = std::min(xmin, p.real());
      xmax = std::max(xmax, p.real());
      ymin = std::min(ymin, p.imag());
      ymax = std::max(ymax, p.imag());
    }
    const double extent = std::hypot(xmax - xmin, ymax - ymin);
    if (!(extent > 0.0) || circ.r > 50.0 * extent)
      throw std::runtime_error("circle_fit: degenerate circle (collinear points)");
  }

  // (iii) phase-vs-frequency fit around the circle center
  std::vector<std::complex<double>> zc(n);
  for (size_t i = 0; i < n; ++i)
    zc[i] = z[i] - std::complex<double>(circ.xc, circ.yc);
  const std::vector<double> theta = detail::unwrap_phase(zc);

  const double th0_init = 0.5 * (theta.front() + theta.back());
  // f at the steepest crossing of th0_init
  size_t icross = 0;
  double best = std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < n; ++i) {
    const double d = std::fabs(theta[i] - th0_init);
    if (d < best) {
      best = d;
      icross = i;
    }
  }
  const double fres0 = freq[icross];
  // slope-based Q_L guess: dtheta/df at resonance = -4 Q_L / f_res
  double QL0 = 0.0;
  if (icross > 0 && icross + 1 < n) {
    const double sl =
        (theta[icross + 1] - theta[icross - 1]) / (freq[icross + 1] - freq[icross - 1]);
    QL0 = std::fabs(sl) * fres0 / 4.0;
  }
  if (!(QL0 > 0.0) || !std::isfinite(QL0)) QL0 = fres0 / (freq.back() - freq.front());

  auto phase_model = [](std::span<const double> p, double f) {
    return p[0] + 2.0 * std::atan(2.0 * p[1] * (1.0 - f / p[2]));
  };
  NllsOptions popts;
  popts.lower_bounds = {th0_init - constants::pi, 1.0, freq.front()};
  popts.upper_bounds = {th0_init + constants::pi, 1e9, freq.back()};
  popts.typical_scale = {1.0, QL0, fres0};
  FitResult pres = fit_curve(phase_model, freq, theta, {}, {th0_init, QL0, fres0},
                             std::move(popts), {"theta0", "QL", "fres_Hz"});

  const double theta0 = pres.params[0];
  const double QL = pres.params[1];
  const double fres = pres.params[2];

  // (iv)-(v) off-resonant point, normalized diameter, mismatch angle
  const std::complex<double> center(circ.xc, circ.yc);
  const std::complex<double> z_off =
      center - circ.r * std::complex<double>(std::cos(theta0), std::sin(theta0));
  const double a_amp = std::abs(z_off);
  if (!(a_amp > 0.0)) throw std::runtime_error("circle_fit: vanishing off-resonant point");
  const double phi0 = std::arg(z_off);
  const std::complex<double> cn = center / z_off;
  const double r_norm = circ.r / a_amp;
  const double phi_init = std::arg(1.0 - cn);
  const double Qc_init = QL / (2.0 * r_norm);

  // (vi) full-model complex polish: the geometric pipeline above is an
  // excellent initializer but its delay estimate is not statistically
  // efficient under noise; a joint least-squares pass over both quadratures
  // removes the residual-delay bias and yields proper covariances. The
  // envelope phase is anchored at mid-span (psi0 = phi0 - 2 pi f_mid tau) so
  // that tau carries only the differential slope and stays decorrelated from
  // the common rotation.
  const double f_mid = 0.5 * (freq.front() + freq.back());
  auto notch_model = [&](std::span<const double> p, size_t i) {
    const std::complex<double> im(0.0, 1.0);
    const std::complex<double> resonant =
        (p[1] / p[2]) * std::exp(im * p[3]) /
        (1.0 + 2.0 * im * p[1] * (freq[i] / p[0] - 1.0));
    const std::complex<double> env =
        p[4] *
        std::exp(im * (p[5] - 2.0 * constants::pi * (freq[i] - f_mid) * p[6]));
    return env * (1.0 - resonant);
  };
  auto complex_residuals = [&](std::span<const double> p, std::span<double> rr) {
    for (size_t i = 0; i < n; ++i) {
      const std::complex<double> d = notch_model(p, i) - s21[i];
      rr[2 * i] = d.real();
      rr[2 * i + 1] = d.imag();
    }
  };
  const double span_f = freq.back() - freq.front();
  const double psi0_init =
      std::remainder(phi0 - 2.0 * constants::pi * f_mid * delay, 2.0 * constants::pi);
  NllsOptions fopts;
  fopts.lower_bounds = {freq.front(), 1.0, 1.0, phi_init - constants::pi,
                        1e-12 * a_amp, psi0_init - constants::pi,
                        delay - 10.0 / span_f};
  fopts.upper_bounds = {freq.back(), 1e9, 1e9, phi_init + constants::pi,
                        1e12 * a_amp, psi0_init + constants::pi,
                        delay + 10.0 / span_f};
  fopts.typical_scale = {fres, QL, Qc_init, 1.0, a_amp, 1.0, 0.1 / span_f};
  FitResult pol = nlls(complex_residuals, 2 * n,
                       {fres, QL, Qc_init, phi_init, a_amp, psi0_init, delay},
                       std::move(fopts),
                       {"fres_Hz", "QL", "Qc_abs", "phi", "a", "psi0", "delay_s"});

  CircleFitOutput out;
  out.fres_Hz = pol.param("fres_Hz");
  out.QL = pol.param("QL");
  out.Qc_abs = pol.param("Qc_abs");
  out.phi = pol.param("phi");
  out.a = pol.param("a");
  out.delay_s = pol.param("delay_s");
  out.phi0 = std::remainder(
      pol.param("psi0") + 2.0 * constants::pi * f_mid * out.delay_s,
      2.0 * constants::pi);

  if (span_f < 3.0 * out.fres_Hz / out.QL)
    throw std::invalid_argument("circle_fit: span must cover >= 3 linewidths");

  const double invQi = 1.0 / out.QL - std::cos(out.phi) / out.Qc_abs;
  if (!(invQi > 0.0))
    throw std::runtime_error("circle_fit: non-physical Qi (check coupling/span)");
  out.Qi = 1.0 / invQi;

  // assembled record; Qi uncertainty by first-order propagation through
  // 1/Qi = 1/QL - cos(phi)/Qc (correlations neglected)
  const double sig_QL = pol.stderr_of("QL");
  const double sig_Qc = pol.stderr_of("Qc_abs");
  const double sig_phi = pol.stderr_of("phi");
  const double sig_Qi =
      out.Qi * out.Qi *
      std::sqrt(std::pow(sig_QL / (out.QL * out.QL), 2) +
                std::pow(std::cos(out.phi) * sig_Qc / (out.Qc_abs * out.Qc_abs), 2) +
                std::pow(std::sin(out.phi) * sig_phi / out.Qc_abs, 2));

  out.fit.param_names = {"fres_Hz", "QL",  "Qc_abs",  "Qi",
                         "phi",     "delay_s", "a",   "phi0"};
  out.fit.params = {out.fres_Hz, out.QL, out.Qc_abs, out.Qi,
                    out.phi,     out.delay_s, out.a, out.phi0};
  out.fit.stderrs = {pol.stderr_of("fres_Hz"), sig_QL, sig_Qc, sig_Qi,
                     sig_phi, pol.stderr_of("delay_s"), pol.stderr_of("a"),
                     pol.stderr_of("psi0")};
  out.fit.residual_norm = pol.residual_norm;
  out.fit.converged = pol.converged;
  out.fit.iterations = pres.iterations + pol.iterations;
  return out;
}

// ---------------------------------------------------------------------------
// Mattis-Bardeen (alpha, T_c) fit
// ---------------------------------------------------------------------------

enum class MbFitMode { averaged, joint, dff_only, dinvq_only };

// Residual weighting: uniform, or inverse-variance for data whose errors are
// multiplicative (weights 1/|y|, floored at 1e-3 of the channel maximum).
enum class MbFitWeighting { uniform, inverse_variance };

struct MbFitOutput {
  double alpha = 0.0;
  double Tc_K = 0.0;
  double alpha_stderr = 0.0;
  double Tc_stderr = 0.0;
  bool range_warning = false; // max(T) < 0.4 Tc estimate
  std::vector<FitResult> channel_fits;
};

namespace detail {

enum class MbChannel { dff, dinvq, joint };

// Forward-model residual builder. Data are shifts relative to the first
// (coldest) temperature; conductivity denominators are evaluated there.
inline FitResult mb_channel_fit(std::span<const double> T, std::span<const double> y_dff,
                                std::span<const double> y_dq, double fres0_Hz,
                                MbChannel ch, MbFitWeighting weighting) {
  const size_t nT = T.size();
  const double Tref = T.front();
  const double Tmax = T.back();

  auto channel_weights = [&](std::span<const double> y) {
    std::vector<double> w(y.size(), 1.0);
    if (weighting == MbFitWeighting::inverse_variance) {
      double ymax = 0.0;
      for (const double v : y) ymax = std::max(ymax, std::fabs(v));
      const double floor_v = std::max(1e-3 * ymax, 1e-300);
      for (size_t i = 0; i < y.size(); ++i) w[i] = 1.0 / std::max(std::fabs(y[i]), floor_v);
    }
    return w;
  };
  const std::vector<double> w_dff = channel_weights(y_dff);
  const std::vector<double> w_dq = channel_weights(y_dq);

  auto model_at = [&](double alpha, double Tc, size_t i, bool dff_row) {
    const mb::MaterialParams m{Tc, 1e-9, {}};
    const mb::ConductivityRatio sR = mb::sigma_ratio(Tref, fres0_Hz, m);
    const mb::ConductivityRatio sT = mb::sigma_ratio(T[i], fres0_Hz, m);
    return dff_row ? 0.5 * alpha * (sT.s2 - sR.s2) / sR.s2
                   : alpha * (sT.s1 - sR.s1) / sR.s2;
  };

  const size_t m_rows = (ch == MbChannel::joint) ? 2 * nT : nT;
  auto residuals = [&, ch](std::span<const double> p, std::span<double> r) {
    const double alpha = p[0];
    const double Tc = p[1];
    const mb::MaterialParams mp{Tc, 1e-9, {}};
    const mb::ConductivityRatio sR = mb::sigma_ratio(Tref, fres0_Hz, mp);
    size_t k = 0;
    for (size_t i = 0; i < nT; ++i) {
      const mb::ConductivityRatio sT = mb::sigma_ratio(T[i], fres0_Hz, mp);
      if (ch == MbChannel::dff || ch == MbChannel::joint)
        r[k++] = w_dff[i] * (0.5 * alpha * (sT.s2 - sR.s2) / sR.s2 - y_dff[i]);
      if (ch == MbChannel::dinvq || ch == MbChannel::joint)
        r[k++] = w_dq[i] * (alpha * (sT.s1 - sR.s1) / sR.s2 - y_dq[i]);
    }
  };

  // initialisation: scan Tc and profile out alpha (the model is linear in it)
  double best_cost = std::numeric_limits<double>::infinity();
  double Tc_init = Tmax * 1.5, alpha_init = 0.2;
  for (int g = 0; g <= 80; ++g) {
    const double Tc = Tmax * std::pow(8.0 / 1.06, g / 80.0) * 1.06;
    double num = 0.0, den = 0.0;
    for (size_t i = 0; i < nT; ++i) {
      if (ch == MbChannel::dff || ch == MbChannel::joint) {
        const double mi = w_dff[i] * model_at(1.0, Tc, i, true);
        num += mi * w_dff[i] * y_dff[i];
        den += mi * mi;
      }
      if (ch == MbChannel::dinvq || ch == MbChannel::joint) {
        const double mi = w_dq[i] * model_at(1.0, Tc, i, false);
        num += mi * w_dq[i] * y_dq[i];
        den += mi * mi;
      }
    }
    if (!(den > 0.0)) continue;
    const double alpha = std::clamp(num / den, 1e-6, 1.0);
    std::vector<double> rr(m_rows);
    residuals(std::vector<double>{alpha, Tc}, rr);
    const double cost = detail::dot(rr, rr);
    if (cost < best_cost) {
      best_cost = cost;
      Tc_init = Tc;
      alpha_init = alpha;
    }
  }

  NllsOptions opts;
  opts.lower_bounds = {1e-6, Tmax * 1.04};
  opts.upper_bounds = {1.0, Tmax * 10.0};
  opts.typical_scale = {std::max(alpha_init, 0.01), Tc_init};
  return nlls(residuals, m_rows, {alpha_init, Tc_init}, std::move(opts),
              {"alpha", "Tc_K"});
}

} // namespace detail

/// Fit the frequency-shift and loss relations to temperature-driven data.
/// `averaged` fits each channel independently and averages (alpha, T_c);
/// `joint` stacks both channels into one residual vector.
inline MbFitOutput mb_fit(std::span<const double> T, std::span<const double> dff,
                          std::span<const double> dinvQ, double fres0_Hz,
                          MbFitMode mode = MbFitMode::averaged,
                          MbFitWeighting weighting = MbFitWeighting::uniform) {
  const size_t n = T.size();
  if (n < 4 || dff.size() != n || dinvQ.size() != n)
    throw std::invalid_argument("mb_fit: need >= 4 aligned samples");
  for (size_t i = 1; i < n; ++i)
    if (!(T[i] > T[i - 1]))
      throw std::invalid_argument("mb_fit: T must be strictly increasing");

  MbFitOutput out;
  if (mode == MbFitMode::averaged) {
    FitResult a = detail::mb_channel_fit(T, dff, dinvQ, fres0_Hz, detail::MbChannel::dff,
                                         weighting);
    FitResult b = detail::mb_channel_fit(T, dff, dinvQ, fres0_Hz, detail::MbChannel::dinvq,
                                         weighting);
    out.alpha = 0.5 * (a.param("alpha") + b.param("alpha"));
    out.Tc_K = 0.5 * (a.param("Tc_K") + b.param("Tc_K"));
    out.alpha_stderr =
        0.5 * std::hypot(a.stderr_of("alpha"), b.stderr_of("alpha"));
    out.Tc_stderr = 0.5 * std::hypot(a.stderr_of("Tc_K"), b.stderr_of("Tc_K"));
    out.channel_fits = {std::move(a), std::move(b)};
  } else {
    const detail::MbChannel ch = mode == MbFitMode::joint     ? detail::MbChannel::joint
                                 : mode == MbFitMode::dff_only ? detail::MbChannel::dff
                                                               : detail::MbChannel::dinvq;
    FitResult r = detail::mb_channel_fit(T, dff, dinvQ, fres0_Hz, ch, weighting);
    out.alpha = r.param("alpha");
    out.Tc_K = r.param("Tc_K");
    out.alpha_stderr = r.stderr_of("alpha");
    out.Tc_stderr = r.stderr_of("Tc_K");
    out.channel_fits = {std::move(r)};
  }
  out.range_warning = (T.back() < 0.4 * out.Tc_K);
  return out;
}

} // namespace mbres::fitting
