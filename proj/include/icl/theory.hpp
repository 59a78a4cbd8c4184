#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "icl/common.hpp"
#include "icl/geometry.hpp"
#include "icl/model.hpp"
#include "icl/promptgen.hpp"
#include "icl/trainer.hpp"

namespace icl {

inline constexpr double kEulerGamma = 0.57721566490153286060;

struct TheoryInputs {
  GeometryConfig geometry;
  ModelConfig model;
  TrainConfig train;
  PromptConfig prompt;
  double delta = 0.05;  // failure probability
  double C1 = 1.0;      // absolute constants, user-overridable
  double C2 = 1.0;

  void validate() const {
    geometry.validate();
    model.validate();
    if (!(delta > 0.0 && delta < 1.0))
      throw ConfigError("theory: delta must lie in (0,1)");
    if (!(C1 > 0.0 && C2 > 0.0))
      throw ConfigError("theory: constants C1, C2 must be > 0");
  }

  double log5Km() const {
    return std::log(5.0 * geometry.K() * model.m / delta);
  }
};

// w* = tanh(sigma0^2 (1-kappa_x)^2 u^4 / 4), the initial attention margin.
inline double w_star(const TheoryInputs& in) {
  const auto& g = in.geometry;
  const double u2 = g.u_norm * g.u_norm;
  const double e = std::exp(-0.5 * in.model.sigma0 * in.model.sigma0 *
                            (1.0 - g.kappa_x) * (1.0 - g.kappa_x) * u2 * u2);
  return (1.0 - e) / (1.0 + e);
}

namespace detail {

// Shared attenuation exponent exp(-log(5Km/delta) * sigma1^2 u^4 *
// (1+e^{-sigma0^2 u^2})/(1-e^{-sigma0^2 u^2})).
inline double attenuation_factor(const TheoryInputs& in) {
  const auto& g = in.geometry;
  const double u2 = g.u_norm * g.u_norm;
  const double s0u2 = in.model.sigma0 * in.model.sigma0 * u2;
  const double em = std::exp(-s0u2);
  return std::exp(-in.log5Km() * in.model.sigma1 * in.model.sigma1 * u2 * u2 *
                  (1.0 + em) / (1.0 - em));
}

}  // namespace detail

// sigma_S* = 1/(1+e^{-2 beta_lower^2}) where beta_lower is the attenuated
// initial beta scale. Lower bound on the expected correct attention over the
// whole trajectory.
inline double sigma_s_star_beta_lower(const TheoryInputs& in) {
  const auto& g = in.geometry;
  const double u2 = g.u_norm * g.u_norm;
  return 0.5 * in.model.sigma0 * (1.0 - g.kappa_x) * u2 *
         detail::attenuation_factor(in);
}

inline double sigma_s_star(const TheoryInputs& in) {
  in.validate();
  const double bl = sigma_s_star_beta_lower(in);
  return 1.0 / (1.0 + std::exp(-2.0 * bl * bl));
}

// sigma_S* - 1/2 computed without catastrophic rounding; stays positive for
// every sigma0 > 0, kappa_x < 1 even when the excess underflows next to 0.5.
inline double sigma_s_star_excess(const TheoryInputs& in) {
  in.validate();
  const double bl = sigma_s_star_beta_lower(in);
  const double x = 2.0 * bl * bl;
  // (1 - e^{-x}) / (2 (1 + e^{-x}))
  return -std::expm1(-x) / (2.0 * (1.0 + std::exp(-x)));
}

struct ConvergenceThresholds {
  double nu = 0.0;
  double kappa_bound = 0.0;
  double T_hat = 0.0;
  double T_eps = 0.0;  // for the eps passed in
  double eps = 0.0;
  bool constants_are_unit = true;
};

inline ConvergenceThresholds nu_and_thresholds(const TheoryInputs& in,
                                               double eps) {
  in.validate();
  if (!(eps > 0.0)) throw ConfigError("theory: eps must be > 0");
  const auto& g = in.geometry;
  const double u2 = g.u_norm * g.u_norm;
  const double q = g.q_norm;
  const double lg = in.log5Km();
  ConvergenceThresholds out;
  out.eps = eps;
  const double nu1 = 2.0 * std::sqrt(2.0) * in.model.sigma1 / (1.0 + g.kappa_y);
  const double nu2 = in.model.sigma0 * (1.0 - g.kappa_x) *
                     detail::attenuation_factor(in);
  out.nu = std::min(nu1, nu2);
  out.kappa_bound = 8.0 * std::sqrt(2.0 * lg) * in.model.sigma1 *
                    std::sqrt((1.0 + g.kappa_y) / 2.0) * q;
  const double ws = w_star(in);
  out.T_hat = in.C1 * in.model.sigma1 * in.model.m * in.train.lambda * g.K1 *
              in.train.gamma * std::sqrt((1.0 + g.kappa_y) * lg) /
              (ws * ws * (1.0 - g.kappa_y) * q);
  out.T_eps = g.K1 * q * q * ((in.prompt.L - 1) * u2 + 1.0) /
              (in.C2 * out.nu * out.nu * in.model.m * in.train.lambda *
               in.train.lambda) *
              std::log(1.0 / eps);
  out.constants_are_unit = (in.C1 == 1.0 && in.C2 == 1.0);
  return out;
}

// ---------------------------------------------------------------------------
// Exponential integral: Ei(x) = gamma + ln|x| + e^{x/2} sum_{n>=1} t_n h_n,
// t_n = (-1)^{n-1} x^n / (n! 2^{n-1}), h_n = sum_{k=0}^{floor((n-1)/2)} 1/(2k+1).
inline double exponential_integral(double x) {
  if (x == 0.0) throw DomainError("Ei: x must be nonzero");
  if (std::abs(x) > 50.0) throw DomainError("Ei: series validated for |x| <= 50");
  double t = x;        // t_1
  double h = 1.0;      // h_1
  double sum = t * h;
  for (int n = 2; n <= 500; ++n) {
    t *= -x / (2.0 * n);
    if (n % 2 == 1) h += 1.0 / n;  // floor((n-1)/2) increments at odd n
    const double term = t * h;
    sum += term;
    if (std::abs(term) < 1e-14) break;
  }
  return kEulerGamma + std::log(std::abs(x)) + std::exp(x / 2.0) * sum;
}

namespace detail {

inline double expm1_over_t(double t) { return t == 0.0 ? 1.0 : std::expm1(t) / t; }

inline double adaptive_simpson(double lo, double hi, double flo, double fmid,
                               double fhi, double whole, double tol, int depth) {
  const double mid = 0.5 * (lo + hi);
  const double lm = 0.5 * (lo + mid), rm = 0.5 * (mid + hi);
  const double flm = expm1_over_t(lm), frm = expm1_over_t(rm);
  const double left = (mid - lo) / 6.0 * (flo + 4.0 * flm + fmid);
  const double right = (hi - mid) / 6.0 * (fmid + 4.0 * frm + fhi);
  if (depth <= 0 || std::abs(left + right - whole) < 15.0 * tol)
    return left + right + (left + right - whole) / 15.0;
  return adaptive_simpson(lo, mid, flo, flm, fmid, left, tol / 2.0, depth - 1) +
         adaptive_simpson(mid, hi, fmid, frm, fhi, right, tol / 2.0, depth - 1);
}

}  // namespace detail

// Independent oracle: Ei(x) = gamma + ln|x| + integral_0^x expm1(t)/t dt
// (smooth integrand, adaptive Simpson).
inline double exponential_integral_quadrature(double x) {
  if (x == 0.0) throw DomainError("Ei: x must be nonzero");
  const double flo = detail::expm1_over_t(0.0);
  const double fmid = detail::expm1_over_t(x / 2.0);
  const double fhi = detail::expm1_over_t(x);
  const double whole = x / 6.0 * (flo + 4.0 * fmid + fhi);
  const double integral =
      detail::adaptive_simpson(0.0, x, flo, fmid, fhi, whole, 1e-12, 40);
  return kEulerGamma + std::log(std::abs(x)) + integral;
}

// ---------------------------------------------------------------------------
// ODE sandwich machinery.

struct OdeBoundCurve {
  std::vector<double> grid;
  std::vector<double> lower, upper;        // bounds on the y (or a) variable
  std::vector<double> discrete;            // the discrete recurrence iterates
  std::vector<double> z_lower, z_upper, z_discrete;  // coupled systems only
  bool sandwich_ok = true;
  double max_violation = 0.0;   // worst excursion outside [lower, upper]
  double max_residual = 0.0;    // worst implicit-solver residual
  double t1_bound = 0.0;        // system-1 report value
};

namespace detail {

inline void check_sandwich(OdeBoundCurve& c, double tol) {
  for (std::size_t i = 0; i < c.grid.size(); ++i) {
    const double below = c.lower[i] - c.discrete[i];
    const double above = c.discrete[i] - c.upper[i];
    const double v = std::max(below, above);
    if (v > c.max_violation) c.max_violation = v;
  }
  if (c.max_violation > tol) c.sandwich_ok = false;
}

}  // namespace detail

// MLP growth recurrence a_{t+1} = a_t + c/(1 + b e^{a_t}); the continuous
// solution of x' = c/(1+b e^x) sandwiches it from below with gap at most
// c/(1 + b e^{a0}).
inline OdeBoundCurve ode_mlp_sandwich(double a0, double b, double c, long T) {
  if (!(c >= 0.0 && c <= 1.0)) throw DomainError("ode_mlp_sandwich: need 0 <= c <= 1");
  if (!(b >= 0.0)) throw DomainError("ode_mlp_sandwich: need b >= 0");
  if (T < 0) throw DomainError("ode_mlp_sandwich: need T >= 0");
  OdeBoundCurve out;
  const double margin = c / (1.0 + b * std::exp(a0));
  const double base = a0 + b * std::exp(a0);
  double a = a0, x = a0;
  for (long t = 0; t <= T; ++t) {
    // Solve x + b e^x = c t + base by Newton from the previous solution.
    const double rhs = c * t + base;
    bool ok = false;
    for (int it = 0; it < 200; ++it) {
      const double ex = std::exp(x);
      const double F = x + b * ex - rhs;
      x -= F / (1.0 + b * ex);
      if (std::abs(F) < 1e-12) { ok = true; break; }
    }
    if (!ok) throw DomainError("ode_mlp_sandwich: Newton failed to converge");
    const double res = std::abs(x + b * std::exp(x) - rhs);
    if (res > out.max_residual) out.max_residual = res;
    out.grid.push_back(static_cast<double>(t));
    out.lower.push_back(x);
    out.upper.push_back(x + margin);
    out.discrete.push_back(a);
    a += c / (1.0 + b * std::exp(a));
  }
  detail::check_sandwich(out, 1e-9);
  return out;
}

// Coupled System 1 (pre-alignment phase): y shrinks while z < 0.
//   y_{t+1} = y_t + a z_t y_t / (2 + e^{-2y^2} + e^{2y^2}),  z_{t+1} = z_t + b.
// Bounds on [0, t1], t1 = first step with z >= 0: y0 >= y_t >= y0 e^{(a/4) z0 t},
// z exactly linear. t1_bound reports the lemma's closed-form expression.
struct System1Params {
  double y0, z0, a, b;
};

inline OdeBoundCurve coupled_system1(const System1Params& p) {
  if (!(p.y0 > 0.0)) throw DomainError("system1: need y0 > 0");
  if (!(p.z0 <= 0.0)) throw DomainError("system1: need z0 <= 0");
  if (!(p.a > 0.0 && p.b > 0.0)) throw DomainError("system1: need a, b > 0");
  OdeBoundCurve out;
  const long t1 = static_cast<long>(std::ceil(-p.z0 / p.b));
  const double e0 = std::exp(-2.0 * p.y0 * p.y0);
  out.t1_bound = -p.z0 * (1.0 + e0) / (p.b * (1.0 - e0));
  double y = p.y0, z = p.z0;
  for (long t = 0; t <= t1; ++t) {
    out.grid.push_back(static_cast<double>(t));
    out.discrete.push_back(y);
    out.lower.push_back(p.y0 * std::exp(0.25 * p.a * p.z0 * t));
    out.upper.push_back(p.y0);
    out.z_discrete.push_back(z);
    out.z_lower.push_back(p.z0 + p.b * t);
    out.z_upper.push_back(p.z0 + p.b * t);
    const double w = 2.0 + std::exp(-2.0 * y * y) + std::exp(2.0 * y * y);
    y += p.a * z * y / w;
    z += p.b;
  }
  detail::check_sandwich(out, 1e-9);
  return out;
}

// Coupled System 2 (alignment phase, from t1 on): y grows, z grows, with a
// per-step loss-derivative factor lprime in [c', 1].
//   y_{t+1} = y_t + a z_t y_t lprime_t / (2 + e^{-2y^2} + e^{2y^2})
//   z_{t+1} = z_t + b lprime_t (1 - e^{-2 y_t^2}) / (1 + e^{-2 y_t^2})
// Implicit curves use the potential G(y) = (Ei(2y^2) + Ei(-2y^2))/2 + 2 ln y,
// the exact antiderivative of (2 + e^{2y^2} + e^{-2y^2})/y:
//   G(upper(s)) = G(y_t1) + a b s^2/2
//   G(lower(s)) = G(y_t1) + a b c'^2 R s^2/2,  R = (1-e^{-2y_t1^2})/(1+e^{-2y_t1^2}).
struct System2Params {
  double y_t1, z_t1, a, b, c_prime;
};

inline double system2_potential(double y) {
  return 0.5 * (exponential_integral(2.0 * y * y) +
                exponential_integral(-2.0 * y * y)) +
         2.0 * std::log(y);
}

// The lprime sequence is caller-supplied (any values in [c', 1] are
// admissible); pass an empty vector for the constant-1 sequence.
inline OdeBoundCurve coupled_system2(const System2Params& p, long T,
                                     const std::vector<double>& lprime = {}) {
  if (!(p.y_t1 > 0.0)) throw DomainError("system2: need y_t1 > 0");
  if (!(p.z_t1 >= 0.0)) throw DomainError("system2: need z_t1 >= 0");
  if (!(p.a > 0.0 && p.b > 0.0)) throw DomainError("system2: need a, b > 0");
  if (!(p.c_prime > 0.0 && p.c_prime <= 1.0))
    throw DomainError("system2: need c' in (0, 1]");
  for (double lp : lprime)
    if (lp < p.c_prime - 1e-12 || lp > 1.0 + 1e-12)
      throw DomainError("system2: lprime values must lie in [c', 1]");
  OdeBoundCurve out;
  const double R = -std::expm1(-2.0 * p.y_t1 * p.y_t1) /
                   (1.0 + std::exp(-2.0 * p.y_t1 * p.y_t1));
  const double G0 = system2_potential(p.y_t1);
  double y = p.y_t1, z = p.z_t1;
  auto solve_curve = [&](double rhs) {
    // G is strictly increasing; bisection on [1e-8, 4.9].  The upper end is
    // set by the Ei series domain (|2y^2| <= 50), where G already exceeds
    // 1e19 -- far above any curve value reachable from admissible parameters.
    double lo = 1e-8, hi = 4.9;
    if (system2_potential(hi) < rhs)
      throw DomainError("system2: curve value outside the solvable range");
    for (int it = 0; it < 200; ++it) {
      const double mid = 0.5 * (lo + hi);
      if (system2_potential(mid) < rhs) lo = mid; else hi = mid;
      if (hi - lo < 1e-13 * std::max(1.0, lo)) break;
    }
    const double sol = 0.5 * (lo + hi);
    const double res = std::abs(system2_potential(sol) - rhs);
    if (res > out.max_residual) out.max_residual = res;
    return sol;
  };
  for (long t = 0; t <= T; ++t) {
    const double s = static_cast<double>(t);
    out.grid.push_back(s);
    out.discrete.push_back(y);
    out.lower.push_back(
        solve_curve(G0 + 0.5 * p.a * p.b * p.c_prime * p.c_prime * R * s * s));
    out.upper.push_back(solve_curve(G0 + 0.5 * p.a * p.b * s * s));
    out.z_discrete.push_back(z);
    out.z_lower.push_back(p.z_t1 + p.b * p.c_prime * R * s);
    out.z_upper.push_back(p.z_t1 + p.b * s);
    const double lp = t < static_cast<long>(lprime.size()) ? lprime[t] : 1.0;
    const double e = std::exp(-2.0 * y * y);
    const double denom = 2.0 + e + std::exp(2.0 * y * y);
    const double ynew = y + p.a * z * y * lp / denom;
    z += p.b * lp * (1.0 - e) / (1.0 + e);
    y = ynew;
  }
  detail::check_sandwich(out, 1e-6);
  return out;
}

// Expected correct attention as a function of the beta product:
// e^{x}/(e^{x}+e^{-x}) with x = beta_Q beta_K / ||b||^2.
inline double expected_attention_formula(double beta_q, double beta_k,
                                         double b_norm_sq) {
  if (!(b_norm_sq > 0.0))
    throw DomainError("expected_attention_formula: need ||b||^2 > 0");
  const double x = beta_q * beta_k / b_norm_sq;
  return 1.0 / (1.0 + std::exp(-2.0 * x));
}

// Order-of-magnitude end-of-training scales (all Theta-constants set to 1).
struct FinalScaleReport {
  double beta_O = 0.0;         // log(q^2/(m lambda K1))
  double beta_Q = 0.0;         // u sqrt(log(u^2/(lambda K1) * beta_O))
  double attention_arg = 0.0;  // (lambda K1/u^2) |log(m lambda K1/q^2)|
  double attention = 0.0;      // 1/(1+attention_arg)
  bool constants_are_unit = true;
};

inline FinalScaleReport final_scale_predictions(const TheoryInputs& in) {
  in.validate();
  const auto& g = in.geometry;
  const double u2 = g.u_norm * g.u_norm;
  const double q2 = g.q_norm * g.q_norm;
  const double mlk = in.model.m * in.train.lambda * g.K1;
  FinalScaleReport out;
  if (!(q2 / mlk > 0.0))
    throw ConfigError("final_scale: requires q^2/(m*lambda*K1) > 0");
  if (q2 < mlk)
    throw ConfigError("final_scale: requires q^2 >= m*lambda*K1 (log argument >= 1)");
  out.beta_O = std::log(q2 / mlk);
  const double inner = u2 / (in.train.lambda * g.K1) * out.beta_O;
  if (out.beta_O > 0.0) {
    if (!(inner > 1.0))
      throw ConfigError(
          "final_scale: requires u^2/(lambda*K1)*log(q^2/(m*lambda*K1)) > 1");
    out.beta_Q = g.u_norm * std::sqrt(std::log(inner));
  }
  out.attention_arg =
      in.train.lambda * g.K1 / u2 * std::abs(std::log(mlk / q2));
  out.attention = 1.0 / (1.0 + out.attention_arg);
  return out;
}

// Advisory checks of the theorem's parameter condition (absolute constant
// taken as 1); returns human-readable warnings, never throws.
inline std::vector<std::string> condition_41_warnings(const TheoryInputs& in) {
  std::vector<std::string> w;
  const auto& g = in.geometry;
  const double u = g.u_norm, q = g.q_norm;
  const double K = g.K(), m = in.model.m;
  const double lam = in.train.lambda;
  auto want = [&](bool ok, const std::string& msg) {
    if (!ok) w.push_back(msg);
  };
  const double logd = std::log(K * in.prompt.L * in.train.B *
                               std::max<long>(in.train.T, 1) / in.delta);
  want(g.d_x >= std::max(logd, K), "d_x >= max{log(K L B T/delta), K}");
  want(g.d_y >= std::max(logd, K), "d_y >= max{log(K L B T/delta), K}");
  want(g.d_y >= std::log(m / in.delta), "d_y >= log(m/delta)");
  want(m >= std::log(K / in.delta), "m >= log(K/delta)");
  want(in.train.gamma >= std::max(q * q / (m * g.K1 * lam), 10.0 / lam),
       "gamma >= max{q^2/(m K1 lambda), 10/lambda}");
  want(lam <= std::min(1.0 / (std::log(K * m / in.delta) * q),
                       2.0 / (in.model.sigma0 * u * u)),
       "lambda <= min{1/(log(Km/delta) q), 2/(sigma0 u^2)}");
  want(K >= g.K1, "K >= K1");
  if (in.prompt.sigma_xi > 0.0) {
    want(K >= u / (in.prompt.sigma_xi * std::sqrt(double(g.d_x))),
         "K >= u/(sigma_xi sqrt(d_x))");
    want(in.prompt.sigma_xi <=
             std::min(lam * m / (std::sqrt(double(g.d_x)) * u * std::sqrt(q)),
                      q / std::sqrt(double(g.d_y))),
         "sigma_xi <= min{lambda m/(sqrt(d_x) u sqrt(q)), q/sqrt(d_y)}");
  }
  const double blog = std::log(u * u / (lam * g.K1) *
                               std::log(q * q / (m * lam * g.K1)));
  if (blog > 0.0)
    want(in.model.sigma0 <= std::sqrt(blog / K) / u,
         "sigma0 <= sqrt(log(u^2/(lambda K1) log(q^2/(m lambda K1)))/K)/u");
  const double ws = w_star(in);
  want(in.model.sigma1 <=
           std::min(g.K1 / (in.model.sigma0 * u * u * u * u * q *
                            std::sqrt(in.log5Km())),
                    ws * ws / (std::pow(m, 1.5) * q)),
       "sigma1 <= min{K1/(sigma0 u^4 q sqrt(log(5Km/delta))), w*^2/(m^{3/2} q)}");
  return w;
}

}  // namespace icl
