#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include <s2d/linear_observer.hpp>
#include <s2d/toy_transformer.hpp>

using namespace s2d;

namespace {

TokenSeq random_tokens(std::mt19937_64& rng, int vocab, int len) {
  std::uniform_int_distribution<std::uint32_t> tok(0, static_cast<std::uint32_t>(vocab - 1));
  TokenSeq x;
  for (int i = 0; i < len; ++i) x.ids.push_back(tok(rng));
  return x;
}

Vector gaussian(std::mt19937_64& rng, int d, double scale = 1.0) {
  std::normal_distribution<double> n;
  Vector v(d);
  for (int i = 0; i < d; ++i) v[i] = scale * n(rng);
  return v;
}

// central difference of <u, f(v + h w)> at h
double directional_fd(const Observer& obs, const TokenSeq& x, const Vector& v, const Vector& u, const Vector& w,
                      const ExtractionConfig& cfg, double h) {
  const double up = u.dot(obs.steered_repr(x, v + h * w, cfg).coords());
  const double down = u.dot(obs.steered_repr(x, v - h * w, cfg).coords());
  return (up - down) / (2.0 * h);
}

} // namespace

TEST(PooledTokenCount, CeilingWithFloor) {
  EXPECT_EQ(pooled_token_count(0.25, 8), 2);
  EXPECT_EQ(pooled_token_count(0.25, 9), 3);
  EXPECT_EQ(pooled_token_count(0.1, 30), 3);
  EXPECT_EQ(pooled_token_count(0.01, 5), 1);
  EXPECT_EQ(pooled_token_count(1.0, 7), 7);
}

TEST(ExtractionConfig, RejectsOutOfRangeSettings) {
  EXPECT_THROW((ExtractionConfig{0.0, 2, 2}.check(6)), ConfigError);
  EXPECT_THROW((ExtractionConfig{1.5, 2, 2}.check(6)), ConfigError);
  EXPECT_THROW((ExtractionConfig{0.25, 0, 2}.check(6)), ConfigError);
  EXPECT_THROW((ExtractionConfig{0.25, 7, 2}.check(6)), ConfigError);
  EXPECT_THROW((ExtractionConfig{0.25, 2, 7}.check(6)), ConfigError);
  EXPECT_NO_THROW(ExtractionConfig::toy_profile().check(6));
  EXPECT_NO_THROW(ExtractionConfig::llm_profile().check(32));
}

TEST(ToyTransformer, SteeringOnlyAffectsLayersFromSteerLayerOn) {
  const ToyTransformer t(ToyTransformerConfig{});
  std::mt19937_64 rng(1);
  const auto x = random_tokens(rng, t.vocab(), 12);
  const auto cfg = ExtractionConfig{0.25, 2, 3};
  const auto base = t.hidden_states(x, Vector::Zero(t.dim()), cfg);
  const auto again = t.hidden_states(x, Vector::Zero(t.dim()), cfg);
  const auto steered = t.hidden_states(x, gaussian(rng, t.dim()), cfg);
  ASSERT_EQ(base.layers(), 6);
  EXPECT_EQ(checksum(base), checksum(again));
  for (int l = 1; l <= 6; ++l) {
    const bool same = base.layer(l) == steered.layer(l);
    EXPECT_EQ(same, l < 3) << "layer " << l;
  }
}

TEST(ToyTransformer, SingleLayerSingleTokenPoolsLastHiddenState) {
  const ToyTransformer t(ToyTransformerConfig{});
  std::mt19937_64 rng(2);
  const auto x = random_tokens(rng, t.vocab(), 10);
  const Vector v = gaussian(rng, t.dim(), 0.3);
  const ExtractionConfig cfg{0.1, 1, 2};
  const auto hs = t.hidden_states(x, v, cfg);
  const Vector last = hs.layer(6).row(9).transpose();
  EXPECT_LT((t.steered_repr(x, v, cfg).coords() - last.normalized()).norm(), 1e-12);
}

TEST(ToyTransformer, VjpMatchesFiniteDifferences) {
  const ToyTransformer t(ToyTransformerConfig{});
  std::mt19937_64 rng(3);
  const auto cfg = ExtractionConfig::toy_profile();
  for (int probe = 0; probe < 20; ++probe) {
    const auto x = random_tokens(rng, t.vocab(), 6 + probe % 10);
    const Vector v = gaussian(rng, t.dim(), 0.5);
    const Vector u = gaussian(rng, t.dim());
    const Vector w = gaussian(rng, t.dim()).normalized();
    const double analytic = t.vjp_v(x, v, u, cfg).dot(w);
    const double numeric = directional_fd(t, x, v, u, w, cfg, 1e-5);
    EXPECT_LE(std::abs(analytic - numeric), 1e-5 * std::max(std::abs(analytic), 1e-3)) << "probe " << probe;
  }
}

TEST(ToyTransformer, VjpIsTangentToSphere) {
  const ToyTransformer t(ToyTransformerConfig{});
  std::mt19937_64 rng(4);
  const auto cfg = ExtractionConfig::toy_profile();
  for (int probe = 0; probe < 10; ++probe) {
    const auto x = random_tokens(rng, t.vocab(), 9);
    const Vector v = gaussian(rng, t.dim(), 0.5);
    const auto lin = t.linearize(x, v, cfg);
    // the radial cotangent has no effect on a normalized output
    EXPECT_LE(lin.pullback(lin.f.coords()).norm(), 1e-8);
  }
}

TEST(ToyTransformer, LinearizeAgreesWithSeparateCalls) {
  const ToyTransformer t(ToyTransformerConfig{});
  std::mt19937_64 rng(5);
  const auto cfg = ExtractionConfig::toy_profile();
  const auto x = random_tokens(rng, t.vocab(), 11);
  const Vector v = gaussian(rng, t.dim(), 0.5);
  const Vector u = gaussian(rng, t.dim());
  const auto lin = t.linearize(x, v, cfg);
  EXPECT_EQ(lin.f, t.steered_repr(x, v, cfg));
  EXPECT_EQ(lin.pullback(u), t.vjp_v(x, v, u, cfg));
}

TEST(ToyTransformer, WeightsAreSeedDeterminedAndImmutable) {
  const ToyTransformer a(ToyTransformerConfig{});
  const ToyTransformer b(ToyTransformerConfig{});
  ToyTransformerConfig other;
  other.seed = 43;
  const ToyTransformer c(other);
  const auto before = a.weights_checksum();
  EXPECT_EQ(before, b.weights_checksum());
  EXPECT_NE(before, c.weights_checksum());
  std::mt19937_64 rng(6);
  const auto x = random_tokens(rng, a.vocab(), 8);
  (void)a.vjp_v(x, gaussian(rng, a.dim()), gaussian(rng, a.dim()), ExtractionConfig::toy_profile());
  EXPECT_EQ(before, a.weights_checksum());
}

TEST(ToyTransformer, GoldenHiddenStateChecksum) {
  // frozen from the first build (libstdc++ normal_distribution, seed 42)
  const ToyTransformer t(ToyTransformerConfig{});
  const TokenSeq x{{0, 5, 17, 63, 2, 2, 40, 9}};
  const auto hs = t.hidden_states(x, Vector::Zero(t.dim()), ExtractionConfig::toy_profile());
  EXPECT_EQ(checksum(hs), 4820088673162238846ULL);
}

TEST(ToyTransformer, RejectsBadInputs) {
  const ToyTransformer t(ToyTransformerConfig{});
  const auto cfg = ExtractionConfig::toy_profile();
  EXPECT_THROW(t.steered_repr(TokenSeq{}, Vector::Zero(32), cfg), DomainError);
  EXPECT_THROW(t.steered_repr(TokenSeq{{64}}, Vector::Zero(32), cfg), DomainError);
  EXPECT_THROW(t.steered_repr(TokenSeq{{1, 2}}, Vector::Zero(16), cfg), DimensionError);
  EXPECT_THROW(t.steered_repr(TokenSeq{{1, 2}}, Vector::Zero(32), ExtractionConfig{0.25, 7, 2}), ConfigError);
  EXPECT_THROW(ToyTransformer(ToyTransformerConfig{0, 32, 64, 4, 1}), ConfigError);
}

TEST(LinearObserver, MatchesClosedForm) {
  const LinearSphereObserver obs(8, 20, 7);
  std::mt19937_64 rng(8);
  const ExtractionConfig cfg{0.5, 1, 1};
  for (int probe = 0; probe < 20; ++probe) {
    const auto x = random_tokens(rng, 20, 4 + probe % 5);
    const Vector v = gaussian(rng, 8);
    const Vector u = gaussian(rng, 8);
    const int n = pooled_token_count(0.5, x.size());
    Vector xbar = Vector::Zero(8);
    for (std::size_t t = x.size() - static_cast<std::size_t>(n); t < x.size(); ++t)
      xbar += obs.embedding().row(x.ids[t]).transpose();
    xbar /= n;
    const Vector m = obs.weight() * (xbar + v);
    const Vector f = m / m.norm();
    const Matrix jac = (Matrix::Identity(8, 8) - f * f.transpose()) * obs.weight() / m.norm();
    EXPECT_LT((obs.steered_repr(x, v, cfg).coords() - f).norm(), 1e-12);
    EXPECT_LT((obs.vjp_v(x, v, u, cfg) - jac.transpose() * u).norm(), 1e-10);
  }
}

TEST(LinearObserver, OnlySingleLayerExtraction) {
  const LinearSphereObserver obs(4, 5, 1);
  EXPECT_EQ(obs.layers(), 1);
  EXPECT_THROW(obs.steered_repr(TokenSeq{{1}}, Vector::Zero(4), ExtractionConfig::toy_profile()), ConfigError);
}
