#pragma once

// Logarithm of the modified Bessel function of the first kind and the ratio
// I_{nu+1}(x) / I_nu(x), as needed by the von Mises-Fisher normalizer and
// its mean resultant length.
//
// log I_nu(x) never materializes I_nu itself, so it stays finite for the
// concentrations met in high dimension (d in the thousands, kappa in the
// hundreds) where I_nu over- or underflows a double.
//
//   x < max(2 nu + 2, 20)   power series, rescaled on the fly
//   otherwise               Hankel large-argument expansion while it converges
//                           without cancellation, else Debye uniform expansion

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "errors.hpp"

namespace s2d {

namespace detail {

inline double log_bessel_i_series(double nu, double x) {
  const double q = 0.25 * x * x;
  double term = 1.0;
  double sum = 1.0;
  double log_scale = 0.0;
  constexpr double kRescale = 1e250;
  for (int k = 1; k < 100000; ++k) {
    term *= q / (static_cast<double>(k) * (nu + k));
    sum += term;
    if (sum > kRescale) {
      sum /= kRescale;
      term /= kRescale;
      log_scale += std::log(kRescale);
    }
    // Terms rise until k(nu+k) ~ q, so only stop on the decreasing tail.
    if (static_cast<double>(k) * (nu + k) > q && term < 1e-17 * sum) break;
  }
  return nu * std::log(0.5 * x) - std::lgamma(nu + 1.0) + std::log(sum) + log_scale;
}

// Returns false when the expansion diverges or loses digits to cancellation.
inline bool log_bessel_i_hankel(double nu, double x, double& out) {
  const double mu = 4.0 * nu * nu;
  double term = 1.0;
  double sum = 1.0;
  double max_term = 1.0;
  bool converged = false;
  for (int k = 1; k < 500; ++k) {
    const double odd = 2.0 * k - 1.0;
    const double ratio = -(mu - odd * odd) / (8.0 * k * x);
    if (odd * odd > mu && std::abs(ratio) >= 1.0) break; // asymptotic tail diverges
    term *= ratio;
    sum += term;
    max_term = std::max(max_term, std::abs(term));
    if (std::abs(term) <= 1e-17 * std::abs(sum)) {
      converged = true;
      break;
    }
  }
  if (!converged || sum <= 0.0 || max_term > 1e3 * std::abs(sum)) return false;
  out = x - 0.5 * std::log(2.0 * std::numbers::pi * x) + std::log(sum);
  return true;
}

// Uniform asymptotic expansion in nu, with the first four Debye polynomials.
inline double log_bessel_i_debye(double nu, double x) {
  const double z = x / nu;
  const double root = std::sqrt(1.0 + z * z);
  const double t = 1.0 / root;
  const double eta = root + std::log(z / (1.0 + root));
  const double t2 = t * t;
  const double u1 = t * (3.0 - 5.0 * t2) / 24.0;
  const double u2 = t2 * (81.0 + t2 * (-462.0 + t2 * 385.0)) / 1152.0;
  const double u3 =
      t * t2 * (30375.0 + t2 * (-369603.0 + t2 * (765765.0 - t2 * 425425.0))) / 414720.0;
  const double u4 =
      t2 * t2 *
      (4465125.0 + t2 * (-94121676.0 + t2 * (349922430.0 + t2 * (-446185740.0 + t2 * 185910725.0)))) /
      39813120.0;
  const double inv = 1.0 / nu;
  const double corr = 1.0 + inv * (u1 + inv * (u2 + inv * (u3 + inv * u4)));
  return nu * eta - 0.5 * std::log(2.0 * std::numbers::pi * nu) - 0.25 * std::log1p(z * z) +
         std::log(corr);
}

} // namespace detail

/// log I_nu(x) for nu >= 0 and x > 0.
inline double log_bessel_i(double nu, double x) {
  if (!(nu >= 0.0) || !std::isfinite(nu)) throw DomainError("log_bessel_i: order must be finite and >= 0");
  if (!(x > 0.0) || !std::isfinite(x)) throw DomainError("log_bessel_i: argument must be finite and > 0");
  if (x < std::max(2.0 * nu + 2.0, 20.0)) return detail::log_bessel_i_series(nu, x);
  double out = 0.0;
  if (detail::log_bessel_i_hankel(nu, x, out)) return out;
  return detail::log_bessel_i_debye(nu, x);
}

/// I_{nu+1}(x) / I_nu(x) via the Gauss continued fraction (modified Lentz).
inline double bessel_i_ratio(double nu, double x) {
  if (!(nu >= 0.0) || !std::isfinite(nu)) throw DomainError("bessel_i_ratio: order must be finite and >= 0");
  if (!(x >= 0.0) || std::isnan(x)) throw DomainError("bessel_i_ratio: argument must be >= 0");
  if (x == 0.0) return 0.0;
  if (std::isinf(x)) return 1.0;
  if (x > 1e5 && (nu + 1.0) * (nu + 1.0) > 0.05 * x) return std::exp(log_bessel_i(nu + 1.0, x) - log_bessel_i(nu, x));
  if (x > 1e5) {
    // The fraction needs O(x) terms out here. Take the ratio of the large-argument series,
    // where the exponential and 1/sqrt(2 pi x) prefactors cancel exactly.
    auto series = [x](double n) {
      const double mu = 4.0 * n * n;
      double term = 1.0, sum = 1.0;
      for (int k = 1; k < 60; ++k) {
        const double next = -term * (mu - (2.0 * k - 1.0) * (2.0 * k - 1.0)) / (k * 8.0 * x);
        if (std::abs(next) >= std::abs(term) || next == 0.0) break;
        term = next;
        sum += term;
        if (std::abs(term) < 1e-17 * std::abs(sum)) break;
      }
      return sum;
    };
    return series(nu + 1.0) / series(nu);
  }
  constexpr double tiny = 1e-300;
  constexpr double eps = 1e-16;
  // I_{nu+1}/I_nu = 1 / (b1 + 1/(b2 + 1/(b3 + ...))), b_j = 2(nu + j)/x
  double f = 2.0 * (nu + 1.0) / x;
  double c = f;
  double d = 0.0;
  for (int j = 2; j < 10'000'000; ++j) {
    const double b = 2.0 * (nu + j) / x;
    d = b + d;
    if (d == 0.0) d = tiny;
    d = 1.0 / d;
    c = b + 1.0 / c;
    if (c == 0.0) c = tiny;
    const double delta = c * d;
    f *= delta;
    if (std::abs(delta - 1.0) < eps) break;
  }
  return 1.0 / f;
}

/// Mean resultant length of vMF(mu, kappa) on S^{d-1}: A_d(kappa) = I_{d/2}(kappa) / I_{d/2-1}(kappa).
inline double bessel_ratio(int d, double kappa) {
  if (d < 2) throw DomainError("bessel_ratio: dimension must be >= 2, got " + std::to_string(d));
  if (!(kappa >= 0.0)) throw DomainError("bessel_ratio: kappa must be >= 0");
  return bessel_i_ratio(0.5 * d - 1.0, kappa);
}

} // namespace s2d
