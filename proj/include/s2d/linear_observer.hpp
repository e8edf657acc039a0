#pragma once

#include <cstdint>
#include <random>

#include "observer.hpp"

namespace s2d {

/// One-layer observer f(x; v) = normalize(W (xbar + v)), where xbar is the
/// mean token embedding over the pooled positions. Its Jacobian is available
/// in closed form, which makes it the reference for gradient checks.
///
/// The steering vector enters before W, so the only legal extraction
/// settings are steer_layer = layer_count = 1.
class LinearSphereObserver final : public Observer {
public:
  LinearSphereObserver(int dim, int vocab, std::uint64_t seed) : dim_(dim), vocab_(vocab) {
    if (dim < 2 || vocab < 1) throw ConfigError("linear observer: dim >= 2 and vocab >= 1 required");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal;
    embedding_.resize(vocab, dim);
    for (Eigen::Index j = 0; j < embedding_.cols(); ++j)
      for (Eigen::Index i = 0; i < embedding_.rows(); ++i) embedding_(i, j) = normal(rng);
    weight_.resize(dim, dim);
    const double s = 1.0 / std::sqrt(static_cast<double>(dim));
    for (Eigen::Index j = 0; j < weight_.cols(); ++j)
      for (Eigen::Index i = 0; i < weight_.rows(); ++i) weight_(i, j) = s * normal(rng);
  }

  int dim() const override { return dim_; }
  int layers() const override { return 1; }
  int vocab() const { return vocab_; }
  const Matrix& weight() const { return weight_; }
  const Matrix& embedding() const { return embedding_; }

  HiddenStates hidden_states(const TokenSeq& x, const SteeringVector& v,
                             const ExtractionConfig& cfg) const override {
    check(x, v, cfg);
    Matrix in(static_cast<Eigen::Index>(x.size()), dim_);
    for (std::size_t t = 0; t < x.size(); ++t) in.row(static_cast<Eigen::Index>(t)) = embedding_.row(x.ids[t]);
    in.rowwise() += v.transpose();
    return {{in * weight_.transpose()}};
  }

  UnitVector steered_repr(const TokenSeq& x, const SteeringVector& v, const ExtractionConfig& cfg) const override {
    return detail::normalize_pooled(pooled(x, v, cfg));
  }

  Vector vjp_v(const TokenSeq& x, const SteeringVector& v, const Vector& u,
               const ExtractionConfig& cfg) const override {
    require_same_dim(u.size(), dim_, "vjp_v cotangent");
    const Vector m = pooled(x, v, cfg);
    const UnitVector f = detail::normalize_pooled(m);
    return weight_.transpose() * detail::normalize_pullback(m, f, u);
  }

private:
  void check(const TokenSeq& x, const SteeringVector& v, const ExtractionConfig& cfg) const {
    detail::check_tokens(x, static_cast<std::size_t>(vocab_));
    detail::check_steering(v, dim_);
    cfg.check(1);
  }

  /// W (xbar + v) computed directly rather than through hidden_states().
  Vector pooled(const TokenSeq& x, const SteeringVector& v, const ExtractionConfig& cfg) const {
    check(x, v, cfg);
    const int n_tok = pooled_token_count(cfg.token_fraction, x.size());
    Vector mean = Vector::Zero(dim_);
    for (std::size_t t = x.size() - static_cast<std::size_t>(n_tok); t < x.size(); ++t)
      mean += embedding_.row(x.ids[t]).transpose();
    mean /= static_cast<double>(n_tok);
    return weight_ * (mean + v);
  }

  int dim_;
  int vocab_;
  Matrix embedding_;
  Matrix weight_;
};

} // namespace s2d
