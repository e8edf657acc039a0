#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include <s2d/bessel.hpp>
#include <s2d/sphere.hpp>

using namespace s2d;

namespace {

// C_3(kappa) = kappa / (4 pi sinh kappa)
double log_c3(double kappa) { return std::log(kappa / (4.0 * std::numbers::pi * std::sinh(kappa))); }

// A_3(kappa) = coth(kappa) - 1 / kappa
double a3(double kappa) { return 1.0 / std::tanh(kappa) - 1.0 / kappa; }

UnitVector uv(std::initializer_list<double> xs) {
  Vector v(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) v[i++] = x;
  return UnitVector(v);
}

} // namespace

TEST(UnitVector, NormalizesAndRejectsDegenerateInput) {
  const UnitVector u(Vector::Constant(5, 3.0));
  EXPECT_NEAR(u.coords().norm(), 1.0, 1e-12);
  EXPECT_THROW(UnitVector(Vector::Zero(4)), DegenerateError);
  EXPECT_THROW(UnitVector(Vector::Ones(1)), DomainError);
  Vector bad = Vector::Ones(3);
  bad[1] = std::nan("");
  EXPECT_THROW(UnitVector{bad}, DomainError);
}

TEST(UnitVector, FromNormalizedKeepsBits) {
  std::mt19937_64 rng(3);
  const UnitVector u = uniform_on_sphere(7, rng);
  const UnitVector w = UnitVector::from_normalized(u.coords());
  EXPECT_EQ(u, w);
  EXPECT_NEAR(UnitVector::from_normalized(Vector::Constant(3, 2.0)).coords().norm(), 1.0, 1e-12);
}

TEST(ClassPair, RejectsMismatchedDimensions) {
  EXPECT_THROW(ClassPair(UnitVector::basis(3, 0), UnitVector::basis(4, 0), 1.0), DimensionError);
  EXPECT_THROW(ClassPair(UnitVector::basis(3, 0), UnitVector::basis(3, 1), 0.0), DomainError);
}

TEST(LogBessel, MatchesStdCylBesselI) {
  for (double nu : {0.0, 0.5, 1.0, 3.5, 7.0, 15.5, 50.0})
    for (double x : {1e-3, 0.1, 1.0, 5.0, 19.0, 21.0, 40.0, 99.0, 150.0, 400.0}) {
      const double ref = std::log(std::cyl_bessel_i(nu, x));
      if (!std::isfinite(ref)) continue;
      EXPECT_NEAR(log_bessel_i(nu, x), ref, 1e-11 * std::max(1.0, std::abs(ref))) << "nu=" << nu << " x=" << x;
    }
}

TEST(LogBessel, HalfIntegerClosedFormsAtLargeArgument) {
  // I_{1/2}(x) = sqrt(2/(pi x)) sinh x, I_{3/2}(x) = sqrt(2/(pi x)) (cosh x - sinh x / x)
  for (double x : {800.0, 1e3, 1e4, 1e5, 1e6}) {
    const double pre = 0.5 * std::log(2.0 / (std::numbers::pi * x)) + x;
    const double half = pre + std::log(-std::expm1(-2.0 * x) / 2.0);
    const double three_half = pre + std::log(0.5 * (1.0 + std::exp(-2.0 * x)) - 0.5 * (1.0 - std::exp(-2.0 * x)) / x);
    EXPECT_NEAR(log_bessel_i(0.5, x), half, 1e-12 * x) << x;
    EXPECT_NEAR(log_bessel_i(1.5, x), three_half, 1e-12 * x) << x;
  }
}

TEST(LogBessel, RejectsInvalidArguments) {
  EXPECT_THROW(log_bessel_i(-1.0, 1.0), DomainError);
  EXPECT_THROW(log_bessel_i(1.0, 0.0), DomainError);
}

TEST(LogNormConst, ClosedFormsInThreeDimensions) {
  EXPECT_NEAR(log_norm_const(3, 1.0), log_c3(1.0), 1e-12);
  EXPECT_NEAR(log_norm_const(3, 2.0), log_c3(2.0), 1e-12);
  // frozen from a 50-digit evaluation of log(kappa / (4 pi sinh kappa))
  EXPECT_NEAR(log_norm_const(3, 1.0), -2.69246360854049, 1e-12);
  EXPECT_NEAR(log_norm_const(3, 2.0), -3.12624443902351, 1e-12);
  for (double k : {1e-4, 0.3, 7.0, 50.0, 300.0}) EXPECT_NEAR(log_norm_const(3, k), log_c3(k), 1e-10 * std::max(1.0, k));
}

TEST(LogNormConst, UniformLimitOnCircle) {
  EXPECT_NEAR(log_norm_const(2, 1e-12), -std::log(2.0 * std::numbers::pi), 1e-10);
}

TEST(LogNormConst, RejectsBadKappa) {
  EXPECT_THROW(log_norm_const(3, 0.0), DomainError);
  EXPECT_THROW(log_norm_const(3, -1.0), DomainError);
  EXPECT_THROW(log_norm_const(3, INFINITY), DomainError);
  EXPECT_THROW(log_norm_const(1, 1.0), DomainError);
}

TEST(VmfLogDensity, ClosedFormValues) {
  const VmfModel m(uv({0, 0, 1}), 1.0);
  EXPECT_NEAR(vmf_log_density(uv({0, 0, 1}), m), log_c3(1.0) + 1.0, 1e-12);
  EXPECT_NEAR(vmf_log_density(uv({0, 0, -1}), m), log_c3(1.0) - 1.0, 1e-12);
  EXPECT_EQ(vmf_log_density(uv({1, 0, 0}), m), log_norm_const(3, 1.0));
  EXPECT_THROW(vmf_log_density(UnitVector::basis(4, 0), m), DimensionError);
}

TEST(VmfLogDensity, IntegratesToOneOnTwoSphere) {
  // integral over S^2 = 2 pi int_0^pi exp(log p(cos t)) sin t dt, by composite Simpson
  for (double kappa : {0.5, 2.5, 30.0}) {
    const int n = 4000;
    const double h = std::numbers::pi / n;
    const double lc = log_norm_const(3, kappa);
    double acc = 0.0;
    for (int i = 0; i <= n; ++i) {
      const double t = i * h;
      const double f = std::exp(lc + kappa * std::cos(t)) * std::sin(t);
      acc += f * (i == 0 || i == n ? 1.0 : (i % 2 ? 4.0 : 2.0));
    }
    EXPECT_NEAR(2.0 * std::numbers::pi * acc * h / 3.0, 1.0, 1e-4) << kappa;
  }
}

TEST(BesselRatio, ClosedFormsAndLimits) {
  EXPECT_NEAR(bessel_ratio(3, 2.0), a3(2.0), 1e-12);
  EXPECT_NEAR(bessel_ratio(3, 2.0), 0.537315, 1e-6);
  EXPECT_NEAR(bessel_ratio(3, 10.0), 0.9, 1e-5);
  for (double k : {1e-3, 0.5, 5.0, 50.0, 1e3, 1e6}) EXPECT_NEAR(bessel_ratio(3, k), a3(k), 1e-12) << k;
  for (int d : {2, 3, 8, 64}) EXPECT_EQ(bessel_ratio(d, 0.0), 0.0);
  EXPECT_THROW(bessel_ratio(3, -0.1), DomainError);
  EXPECT_THROW(bessel_ratio(1, 1.0), DomainError);
}

TEST(BesselRatio, MatchesStdRatio) {
  for (int d : {2, 5, 16, 33})
    for (double k : {0.2, 3.0, 17.0, 90.0}) {
      const double ref = std::cyl_bessel_i(d / 2.0, k) / std::cyl_bessel_i(d / 2.0 - 1.0, k);
      EXPECT_NEAR(bessel_ratio(d, k), ref, 1e-12) << d << " " << k;
    }
}

TEST(BesselRatio, MonotoneAndBelowOne) {
  for (int d : {2, 3, 16, 128}) {
    double prev = 0.0;
    for (double k = 0.01; k <= 100.0; k *= 1.1) {
      const double a = bessel_ratio(d, k);
      EXPECT_GT(a, prev) << d << " " << k;
      EXPECT_LT(a, 1.0);
      prev = a;
    }
  }
}

TEST(VmfSample, DeterministicAndOnSphere) {
  const VmfModel m(uv({1, 2, 3, 4}), 7.0);
  const auto a = vmf_sample(m, 500, 11);
  const auto b = vmf_sample(m, 500, 11);
  ASSERT_EQ(a.size(), 500u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i], b[i]);
    EXPECT_NEAR(a[i].coords().norm(), 1.0, 1e-9);
  }
}

TEST(VmfSample, MeanResultantMatchesBesselRatio) {
  for (auto [d, kappa] : {std::pair{3, 2.0}, std::pair{8, 5.0}, std::pair{16, 10.0}, std::pair{3, 5.0}}) {
    std::mt19937_64 rng(static_cast<std::uint64_t>(d * 100 + kappa));
    const UnitVector mu = uniform_on_sphere(d, rng);
    const auto zs = vmf_sample(VmfModel(mu, kappa), 200000, 99);
    Vector sum = Vector::Zero(d);
    double s1 = 0.0, s2 = 0.0;
    for (const auto& z : zs) {
      sum += z.coords();
      const double c = z.dot(mu);
      s1 += c;
      s2 += c * c;
    }
    const double n = static_cast<double>(zs.size());
    const double rbar = sum.norm() / n;
    const double se = std::sqrt((s2 / n - (s1 / n) * (s1 / n)) / n);
    EXPECT_NEAR(rbar, bessel_ratio(d, kappa), 3.0 * se) << "d=" << d << " kappa=" << kappa;
  }
  EXPECT_NEAR(a3(5.0), 0.800091, 1e-6);
}

TEST(VmfSample, ConcentratedMeanDirection) {
  std::mt19937_64 rng(5);
  const UnitVector mu = uniform_on_sphere(8, rng);
  const auto zs = vmf_sample(VmfModel(mu, 50.0), 10000, 6);
  Vector sum = Vector::Zero(8);
  for (const auto& z : zs) sum += z.coords();
  EXPECT_LT(std::acos(std::min(1.0, sum.normalized().dot(mu.coords()))), 0.05);
}

TEST(Posterior, Examples) {
  const ClassPair pair(uv({-1, 0, 0}), uv({1, 0, 0}), 2.5);
  EXPECT_DOUBLE_EQ(score(uv({1, 0, 0}), pair), 5.0);
  EXPECT_NEAR(posterior_prob(uv({1, 0, 0}), pair), 0.993307, 1e-6);
  EXPECT_NEAR(posterior_log_prob(uv({1, 0, 0}), pair, 1), -0.0067153, 1e-6);
  EXPECT_EQ(posterior_prob(uv({0, 1, 0}), pair), 0.5);
  const ClassPair same(uv({1, 1, 0}), uv({1, 1, 0}), 4.0);
  EXPECT_EQ(score(uv({0.3, -2, 1}), same), 0.0);
  EXPECT_EQ(posterior_prob(uv({0.3, -2, 1}), same), 0.5);
}

TEST(Posterior, AgreesWithDensityRatio) {
  std::mt19937_64 rng(21);
  for (int i = 0; i < 200; ++i) {
    const int d = 2 + i % 20;
    const ClassPair pair(uniform_on_sphere(d, rng), uniform_on_sphere(d, rng), 0.1 + 0.2 * i);
    const UnitVector z = uniform_on_sphere(d, rng);
    const double l0 = vmf_log_density(z, VmfModel(pair.mu0, pair.kappa));
    const double l1 = vmf_log_density(z, VmfModel(pair.mu1, pair.kappa));
    const double m = std::max(l0, l1);
    const double p1 = std::exp(l1 - m) / (std::exp(l0 - m) + std::exp(l1 - m));
    EXPECT_NEAR(posterior_prob(z, pair), p1, 1e-12);
    EXPECT_LE(std::abs(score(z, pair)), 2.0 * pair.kappa + 1e-12);
  }
}

TEST(Posterior, LogisticIdentitiesOnRandomProbes) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> kd(0.1, 20.0);
  for (int i = 0; i < 10000; ++i) {
    const int d = 2 + i % 31;
    const ClassPair pair(uniform_on_sphere(d, rng), uniform_on_sphere(d, rng), kd(rng));
    const UnitVector z = uniform_on_sphere(d, rng);
    const double s = score(z, pair);
    const double p1 = posterior_prob(z, pair);
    ASSERT_NEAR(p1, 1.0 / (1.0 + std::exp(-s)), 1e-12);
    const double th = std::tanh(0.5 * s);
    ASSERT_NEAR((1.0 - p1) * p1, 0.25 * (1.0 - th * th), 1e-12);
    ASSERT_NEAR(std::exp(posterior_log_prob(z, pair, 0)) + std::exp(posterior_log_prob(z, pair, 1)), 1.0, 1e-12);
  }
}

TEST(FitKappa, RecoversConcentration) {
  std::mt19937_64 rng(4);
  const auto zs = vmf_sample(VmfModel(uniform_on_sphere(16, rng), 10.0), 100000, 12);
  const auto fit = fit_kappa(zs);
  EXPECT_FALSE(fit.degenerate);
  EXPECT_NEAR(fit.kappa, 10.0, 0.5);
}

TEST(FitKappa, DegenerateCases) {
  const std::vector<UnitVector> same(5, uv({1, 2, 3}));
  EXPECT_THROW(fit_kappa(same), DegenerateError);
  const std::vector<UnitVector> antipodal{uv({1, 0, 0}), uv({-1, 0, 0})};
  const auto fit = fit_kappa(antipodal);
  EXPECT_TRUE(fit.degenerate);
  EXPECT_EQ(fit.kappa, 0.0);
  EXPECT_THROW(fit_kappa(std::vector<UnitVector>{uv({1, 0})}), DomainError);
}
