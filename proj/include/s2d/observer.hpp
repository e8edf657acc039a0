#pragma once

// Observer models: frozen maps from a token sequence to a steered
// representation f(x; v) on the unit sphere, plus the vector-Jacobian product
// with respect to the steering vector v. Model weights never receive gradients.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "errors.hpp"
#include "log.hpp"
#include "sphere.hpp"

namespace s2d {

using Matrix = Eigen::MatrixXd;

/// Additive steering vector injected into the residual stream; any norm.
using SteeringVector = Vector;

struct TokenSeq {
  std::vector<std::uint32_t> ids;

  std::size_t size() const { return ids.size(); }
  bool empty() const { return ids.empty(); }
  friend bool operator==(const TokenSeq&, const TokenSeq&) = default;
};

/// Which hidden states are pooled and where the steering vector enters.
struct ExtractionConfig {
  double token_fraction = 0.25; ///< K: trailing fraction of tokens pooled
  int layer_count = 2;          ///< N: trailing layers pooled
  int steer_layer = 2;          ///< l_s: v is added to the output of this block (1-based)

  /// Scaled-down defaults for the built-in toy transformer (L = 6).
  static ExtractionConfig toy_profile() { return {0.25, 2, 2}; }
  /// Defaults for a real 32-layer observer: layer 11, last 8 layers, final 25% of tokens.
  static ExtractionConfig llm_profile() { return {0.25, 8, 11}; }

  /// Hard constraints against an observer with `layers` blocks.
  void check(int layers) const {
    if (!(token_fraction > 0.0 && token_fraction <= 1.0))
      throw ConfigError("extraction: token fraction must lie in (0, 1]");
    if (layer_count < 1 || layer_count > layers)
      throw ConfigError("extraction: layer count must lie in [1, " + std::to_string(layers) + "]");
    if (steer_layer < 1 || steer_layer > layers)
      throw ConfigError("extraction: steer layer must lie in [1, " + std::to_string(layers) + "]");
  }

  /// check() plus a warning when steering lands inside the pooled layers.
  void validate(int layers) const {
    check(layers);
    if (steer_layer > layers - layer_count + 1)
      warn("steer layer " + std::to_string(steer_layer) + " lies inside the pooled layers (L - N + 1 = " +
           std::to_string(layers - layer_count + 1) + ")");
  }

  friend bool operator==(const ExtractionConfig&, const ExtractionConfig&) = default;
};

/// |I_K(x)| = max(1, ceil(K T)). The 1e-9 slack keeps products such as 0.1 * 30 from rounding up.
inline int pooled_token_count(double token_fraction, std::size_t seq_len) {
  const double raw = std::ceil(token_fraction * static_cast<double>(seq_len) - 1e-9);
  return static_cast<int>(std::clamp(raw, 1.0, static_cast<double>(seq_len)));
}

/// Per-layer hidden states; layer(l) for l = 1..L is a T x d matrix (row t = token t).
struct HiddenStates {
  std::vector<Matrix> by_layer;

  int layers() const { return static_cast<int>(by_layer.size()); }
  const Matrix& layer(int l) const { return by_layer.at(static_cast<std::size_t>(l - 1)); }
};

/// f together with u -> (df/dv)^T u evaluated at the same point.
struct Linearization {
  UnitVector f;
  std::function<Vector(const Vector&)> pullback;
};

class Observer {
public:
  virtual ~Observer() = default;

  virtual int dim() const = 0;
  virtual int layers() const = 0;

  virtual HiddenStates hidden_states(const TokenSeq& x, const SteeringVector& v,
                                     const ExtractionConfig& cfg) const = 0;
  virtual UnitVector steered_repr(const TokenSeq& x, const SteeringVector& v,
                                  const ExtractionConfig& cfg) const = 0;
  virtual Vector vjp_v(const TokenSeq& x, const SteeringVector& v, const Vector& u,
                       const ExtractionConfig& cfg) const = 0;

  /// Observers with a cheap tape override this to share one forward pass.
  virtual Linearization linearize(const TokenSeq& x, const SteeringVector& v, const ExtractionConfig& cfg) const {
    return {steered_repr(x, v, cfg), [this, x, v, cfg](const Vector& u) { return vjp_v(x, v, u, cfg); }};
  }
};

namespace detail {

/// Mean of the pooled block of hidden states: last N layers, last |I_K| tokens.
inline Vector pooled_mean(const HiddenStates& hs, const ExtractionConfig& cfg) {
  const int L = hs.layers();
  const auto T = hs.layer(L).rows();
  const int n_tok = pooled_token_count(cfg.token_fraction, static_cast<std::size_t>(T));
  Vector m = Vector::Zero(hs.layer(L).cols());
  for (int l = L - cfg.layer_count + 1; l <= L; ++l) m += hs.layer(l).bottomRows(n_tok).colwise().sum().transpose();
  return m / static_cast<double>(cfg.layer_count * n_tok);
}

inline UnitVector normalize_pooled(const Vector& m) {
  if (!m.allFinite()) throw DegenerateError("pooled representation is not finite");
  if (m.norm() < 1e-12) throw DegenerateError("pooled representation has norm < 1e-12");
  return UnitVector(m);
}

/// Cotangent of the pooled mean given cotangent u of f = m / |m|: (I - f f^T) u / |m|.
inline Vector normalize_pullback(const Vector& m, const UnitVector& f, const Vector& u) {
  return (u - f.coords() * f.coords().dot(u)) / m.norm();
}

inline void check_tokens(const TokenSeq& x, std::size_t vocab) {
  if (x.empty()) throw DomainError("token sequence is empty");
  for (auto id : x.ids)
    if (id >= vocab)
      throw DomainError("token id " + std::to_string(id) + " out of range (vocab " + std::to_string(vocab) + ")");
}

inline void check_steering(const SteeringVector& v, int d) {
  require_same_dim(v.size(), d, "steering vector");
  if (!v.allFinite()) throw DomainError("steering vector has non-finite entries");
}

/// FNV-1a over the raw bytes of a double buffer.
inline std::uint64_t fnv1a(const double* data, std::size_t n, std::uint64_t h = 1469598103934665603ULL) {
  const auto* bytes = reinterpret_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n * sizeof(double); ++i) {
    h ^= bytes[i];
    h *= 1099511628211ULL;
  }
  return h;
}

} // namespace detail

/// Checksum of all hidden states; bitwise stable across runs on one platform.
inline std::uint64_t checksum(const HiddenStates& hs) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& m : hs.by_layer) h = detail::fnv1a(m.data(), static_cast<std::size_t>(m.size()), h);
  return h;
}

} // namespace s2d
