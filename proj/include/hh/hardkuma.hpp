#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "hh/rng.hpp"

namespace hh::hardkuma {

// Stretched-and-rectified Kumaraswamy gate. The shape parameters are stored
// as exponentials of unconstrained reals so gradient steps can never push
// them out of (0, inf). The stretch interval (lo, hi) with lo < 0 < 1 < hi
// is fixed per run, not learnable.
struct GateParams {
  double raw_alpha = 0.0;  // alpha = exp(raw_alpha)
  double raw_beta = 0.0;   // beta  = exp(raw_beta)
  double stretch_lo = -0.1;
  double stretch_hi = 1.1;

  static GateParams from_alpha_beta(double alpha, double beta,
                                    double lo = -0.1, double hi = 1.1) {
    if (!(alpha > 0.0) || !(beta > 0.0))
      throw std::domain_error("GateParams: alpha and beta must be positive");
    if (!(lo < 0.0) || !(hi > 1.0))
      throw std::domain_error("GateParams: stretch interval must satisfy lo < 0 < 1 < hi");
    return GateParams{std::log(alpha), std::log(beta), lo, hi};
  }

  double alpha() const { return std::exp(raw_alpha); }
  double beta() const { return std::exp(raw_beta); }
  double stretch_width() const { return stretch_hi - stretch_lo; }
};

struct GateSample {
  double u = 0.0;  // uniform driver in (0,1)
  double s = 0.0;  // Kumaraswamy sample in (0,1)
  double z = 0.0;  // rectified gate value in [0,1]
};

inline double kuma_pdf(double x, const GateParams& g) {
  if (!(x > 0.0 && x < 1.0))
    throw std::domain_error("kuma_pdf: x must lie in (0,1)");
  const double a = g.alpha(), b = g.beta();
  const double xa = std::pow(x, a);
  return a * b * std::pow(x, a - 1.0) * std::pow(1.0 - xa, b - 1.0);
}

inline double kuma_cdf(double x, const GateParams& g) {
  if (!(x >= 0.0 && x <= 1.0))
    throw std::domain_error("kuma_cdf: x must lie in [0,1]");
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;
  return 1.0 - std::pow(1.0 - std::pow(x, g.alpha()), g.beta());
}

// Inverse-CDF transform s = (1 - u^(1/beta))^(1/alpha), then stretch to
// (lo, hi) and rectify through a hard sigmoid. Deterministic given u.
inline GateSample sample(const GateParams& g, double u) {
  if (!(u > 0.0 && u < 1.0))
    throw std::domain_error("sample: uniform driver must lie strictly in (0,1)");
  const double s = std::pow(1.0 - std::pow(u, 1.0 / g.beta()), 1.0 / g.alpha());
  const double stretched = g.stretch_lo + g.stretch_width() * s;
  const double z = std::min(1.0, std::max(0.0, stretched));
  return GateSample{u, s, z};
}

inline GateSample sample(const GateParams& g, Rng& rng) {
  return sample(g, rng.uniform_open());
}

// P(Z = 0): mass of the stretched variable at or below zero.
inline double prob_zero(const GateParams& g) {
  return kuma_cdf(-g.stretch_lo / g.stretch_width(), g);
}

// P(Z = 1): mass of the stretched variable at or above one.
inline double prob_one(const GateParams& g) {
  return 1.0 - kuma_cdf((1.0 - g.stretch_lo) / g.stretch_width(), g);
}

// Expected number of nonzero gates, sum_i P(Z_i != 0). Empty input yields 0.
inline double expected_l0(std::span<const GateParams> gates) {
  double acc = 0.0;
  for (const GateParams& g : gates) acc += 1.0 - prob_zero(g);
  return acc;
}

struct PathwiseGrad {
  double dz_dalpha = 0.0;
  double dz_dbeta = 0.0;
};

// Derivative of z through sample() holding the uniform driver fixed.
// Exactly zero when the sample is clipped; at the measure-zero kink the
// interior one-sided derivative is returned.
inline PathwiseGrad pathwise_grad(const GateParams& g, double u) {
  if (!(u > 0.0 && u < 1.0))
    throw std::domain_error("pathwise_grad: uniform driver must lie strictly in (0,1)");
  const double a = g.alpha(), b = g.beta();
  const double ub = std::pow(u, 1.0 / b);  // u^(1/beta)
  const double base = 1.0 - ub;            // in (0,1)
  const double s = std::pow(base, 1.0 / a);
  const double stretched = g.stretch_lo + g.stretch_width() * s;
  if (stretched < 0.0 || stretched > 1.0) return {0.0, 0.0};

  const double ds_da = -s * std::log(base) / (a * a);
  const double dbase_db = ub * std::log(u) / (b * b);
  const double ds_db = (1.0 / a) * std::pow(base, 1.0 / a - 1.0) * dbase_db;
  const double w = g.stretch_width();
  return {w * ds_da, w * ds_db};
}

// Deterministic Monte Carlo estimate of E[z] under a fixed seed. The exact
// expectation needs incomplete-Beta moments; a seeded estimator keeps role
// export reproducible without that machinery.
inline double expected_gate(const GateParams& g, std::size_t n_samples,
                            std::uint64_t seed) {
  if (n_samples < 1)
    throw std::invalid_argument("expected_gate: need at least one sample");
  Rng rng(seed);
  double acc = 0.0;
  for (std::size_t i = 0; i < n_samples; ++i) acc += sample(g, rng).z;
  return acc / static_cast<double>(n_samples);
}

}  // namespace hh::hardkuma
