#pragma once

// Directional statistics on the unit sphere S^{d-1}: the von Mises-Fisher
// density, Wood's rejection sampler, the shared-kappa two-class posterior and
// the likelihood-ratio score built on it.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "bessel.hpp"
#include "errors.hpp"

namespace s2d {

using Vector = Eigen::VectorXd;

/// A direction in R^d, d >= 2. Construction normalizes its input.
class UnitVector {
public:
  explicit UnitVector(Vector coords) : coords_(std::move(coords)) {
    if (coords_.size() < 2)
      throw DomainError("UnitVector: dimension must be >= 2, got " + std::to_string(coords_.size()));
    if (!coords_.allFinite()) throw DomainError("UnitVector: non-finite coordinate");
    const double n = coords_.norm();
    if (!(n > std::numeric_limits<double>::min())) throw DegenerateError("UnitVector: zero vector");
    coords_ /= n;
  }

  /// Keeps `coords` bit-for-bit when it is already unit-norm within 1e-9,
  /// otherwise normalizes. Used when reloading stored directions.
  static UnitVector from_normalized(Vector coords) {
    const double n = coords.norm();
    if (coords.size() >= 2 && coords.allFinite() && std::abs(n - 1.0) <= 1e-9) {
      UnitVector u;
      u.coords_ = std::move(coords);
      return u;
    }
    return UnitVector(std::move(coords));
  }

  /// i-th standard basis vector of R^d.
  static UnitVector basis(int d, int i) {
    Vector e = Vector::Zero(d);
    e[i] = 1.0;
    return UnitVector(std::move(e));
  }

  int dim() const { return static_cast<int>(coords_.size()); }
  const Vector& coords() const { return coords_; }
  double operator[](Eigen::Index i) const { return coords_[i]; }
  double dot(const UnitVector& o) const { return coords_.dot(o.coords_); }

  friend bool operator==(const UnitVector& a, const UnitVector& b) {
    return a.coords_.size() == b.coords_.size() && a.coords_ == b.coords_;
  }

private:
  UnitVector() = default;
  Vector coords_;
};

inline void require_same_dim(Eigen::Index a, Eigen::Index b, const char* what) {
  if (a != b)
    throw DimensionError(std::string(what) + ": dimension mismatch (" + std::to_string(a) + " vs " +
                         std::to_string(b) + ")");
}

/// vMF(mu, kappa): density C_d(kappa) exp(kappa <mu, z>) on S^{d-1}.
struct VmfModel {
  UnitVector mu;
  double kappa;

  VmfModel(UnitVector mean, double concentration) : mu(std::move(mean)), kappa(concentration) {
    if (!(kappa > 0.0) || !std::isfinite(kappa)) throw DomainError("VmfModel: kappa must be finite and > 0");
  }
  int dim() const { return mu.dim(); }
};

/// Class-conditional vMF pair with shared concentration.
struct ClassPair {
  UnitVector mu0;
  UnitVector mu1;
  double kappa;

  ClassPair(UnitVector m0, UnitVector m1, double k) : mu0(std::move(m0)), mu1(std::move(m1)), kappa(k) {
    require_same_dim(mu0.dim(), mu1.dim(), "ClassPair");
    if (!(kappa > 0.0) || !std::isfinite(kappa)) throw DomainError("ClassPair: kappa must be finite and > 0");
  }
  int dim() const { return mu0.dim(); }
  /// kappa (mu1 - mu0): the score is its inner product with z.
  Vector discriminant() const { return kappa * (mu1.coords() - mu0.coords()); }
};

/// log C_d(kappa) = (d/2 - 1) log kappa - (d/2) log 2pi - log I_{d/2-1}(kappa).
inline double log_norm_const(int d, double kappa) {
  if (d < 2) throw DomainError("log_norm_const: dimension must be >= 2");
  if (!(kappa > 0.0) || !std::isfinite(kappa)) throw DomainError("log_norm_const: kappa must be finite and > 0");
  const double nu = 0.5 * d - 1.0;
  return nu * std::log(kappa) - 0.5 * d * std::log(2.0 * std::numbers::pi) - log_bessel_i(nu, kappa);
}

inline double vmf_log_density(const UnitVector& z, const VmfModel& model) {
  require_same_dim(z.dim(), model.dim(), "vmf_log_density");
  return log_norm_const(model.dim(), model.kappa) + model.kappa * model.mu.dot(z);
}

/// Numerically stable logistic function.
inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// log sigmoid(x) without overflow for large |x|.
inline double log_sigmoid(double x) {
  if (x >= 0.0) return -std::log1p(std::exp(-x));
  return x - std::log1p(std::exp(x));
}

/// Likelihood-ratio score S(z) = kappa (mu1 - mu0)^T z, in [-2 kappa, 2 kappa].
inline double score(const UnitVector& z, const ClassPair& pair) {
  require_same_dim(z.dim(), pair.dim(), "score");
  return pair.kappa * (pair.mu1.dot(z) - pair.mu0.dot(z));
}

/// p(y = 1 | z) under the uniform class prior; equals sigmoid(score(z)).
inline double posterior_prob(const UnitVector& z, const ClassPair& pair) { return sigmoid(score(z, pair)); }

/// log p(y = label | z).
inline double posterior_log_prob(const UnitVector& z, const ClassPair& pair, int label) {
  const double s = score(z, pair);
  return log_sigmoid(label == 1 ? s : -s);
}

struct KappaFit {
  double kappa = 0.0;
  double mean_resultant = 0.0;
  bool degenerate = false; ///< resultant vanished; kappa reported as 0
};

/// Banerjee et al. approximation kappa ~ r (d - r^2) / (1 - r^2) from the mean resultant length r.
inline KappaFit fit_kappa(std::span<const UnitVector> samples) {
  if (samples.size() < 2) throw DomainError("fit_kappa: need at least 2 samples");
  const int d = samples.front().dim();
  Vector sum = Vector::Zero(d);
  for (const auto& z : samples) {
    require_same_dim(z.dim(), d, "fit_kappa");
    sum += z.coords();
  }
  const double r = sum.norm() / static_cast<double>(samples.size());
  if (r >= 1.0 - 1e-12) throw DegenerateError("fit_kappa: mean resultant length is 1 (identical samples)");
  if (r < 1e-15) return {0.0, r, true};
  return {r * (d - r * r) / (1.0 - r * r), r, false};
}

/// Uniform draw on S^{d-1}.
template <class Rng>
UnitVector uniform_on_sphere(int d, Rng& rng) {
  std::normal_distribution<double> normal;
  Vector g(d);
  for (;;) {
    for (int i = 0; i < d; ++i) g[i] = normal(rng);
    if (g.norm() > 1e-12) return UnitVector(g);
  }
}

/// One vMF draw by Wood's rejection scheme: radial component by rejection,
/// tangential component uniform on S^{d-2}, then a Householder map e1 -> mu.
template <class Rng>
UnitVector sample_vmf(const VmfModel& model, Rng& rng) {
  const int d = model.dim();
  const double kappa = model.kappa;
  const double m1 = d - 1.0;
  const double b = m1 / (2.0 * kappa + std::sqrt(4.0 * kappa * kappa + m1 * m1));
  const double x0 = (1.0 - b) / (1.0 + b);
  const double c = kappa * x0 + m1 * std::log(1.0 - x0 * x0);

  std::gamma_distribution<double> gamma(0.5 * m1, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  double w = 0.0;
  for (;;) {
    const double g1 = gamma(rng);
    const double g2 = gamma(rng);
    const double beta = g1 / (g1 + g2);
    w = (1.0 - (1.0 + b) * beta) / (1.0 - (1.0 - b) * beta);
    const double u = unif(rng);
    if (kappa * w + m1 * std::log(1.0 - x0 * w) - c >= std::log(u)) break;
  }

  std::normal_distribution<double> normal;
  Vector tangent(d - 1);
  do {
    for (int i = 0; i < d - 1; ++i) tangent[i] = normal(rng);
  } while (tangent.norm() < 1e-12);
  tangent.normalize();

  Vector x(d);
  x[0] = w;
  x.tail(d - 1) = std::sqrt(std::max(0.0, 1.0 - w * w)) * tangent;

  Vector u = -model.mu.coords();
  u[0] += 1.0;
  const double uu = u.squaredNorm();
  if (uu > 1e-30) x -= (2.0 * u.dot(x) / uu) * u;
  return UnitVector(std::move(x));
}

/// n i.i.d. vMF draws from a fresh generator seeded with `seed`.
inline std::vector<UnitVector> vmf_sample(const VmfModel& model, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<UnitVector> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(sample_vmf(model, rng));
  return out;
}

} // namespace s2d
