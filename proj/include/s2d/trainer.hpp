#pragma once

// Phase I: two-timescale fitting of the steering vector and class prototypes.
//
// Each mini-batch: represent every item under the current steering vector,
// take one ascent step on the mean vMF log-posterior with respect to v
// (slow timescale, step eta), then move each class prototype toward its
// batch mean direction with an exponential moving average (fast timescale,
// coefficient rho) and project back onto the sphere.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "errors.hpp"
#include "log.hpp"
#include "observer.hpp"
#include "sphere.hpp"

namespace s2d {

enum class Optimizer { Sgd, AdamW };

inline const char* to_string(Optimizer o) { return o == Optimizer::Sgd ? "sgd" : "adamw"; }

struct TrainConfig {
  double eta = 1e-3;   ///< steering step size (slow timescale)
  double rho = 0.9;    ///< prototype EMA coefficient (fast timescale)
  double kappa = 2.5;  ///< shared vMF concentration
  int epochs = 10;
  int batch = 8;
  std::uint64_t seed = 0;
  ExtractionConfig extraction = ExtractionConfig::toy_profile();
  Optimizer optimizer = Optimizer::Sgd;
  double weight_decay = 0.01; ///< AdamW only

  void validate() const {
    if (!(eta >= 0.0) || !std::isfinite(eta)) throw ConfigError("train: eta must be finite and >= 0");
    if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("train: rho must lie in [0, 1]");
    if (!(kappa > 0.0) || !std::isfinite(kappa)) throw ConfigError("train: kappa must be finite and > 0");
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (batch < 2) throw ConfigError("train: batch must be >= 2");
    if (eta > 0.0 && eta >= rho)
      warn("eta >= rho: the steering vector is not on the slower timescale (choose 0 < eta << rho <= 1)");
  }
};

struct LabeledSeq {
  TokenSeq x;
  int label = 0;
};

using TokenDataset = std::vector<LabeledSeq>;

struct SteeringState {
  SteeringVector v;
  UnitVector mu0_hat;
  UnitVector mu1_hat;
  std::size_t step = 0;
  std::vector<double> loss_history;

  ClassPair pair(double kappa) const { return {mu0_hat, mu1_hat, kappa}; }
  double proto_gap() const { return (mu1_hat.coords() - mu0_hat.coords()).norm(); }
};

/// v = 0 and prototypes drawn uniformly on the sphere from `seed`.
inline SteeringState initial_state(int dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  UnitVector mu0 = uniform_on_sphere(dim, rng);
  UnitVector mu1 = uniform_on_sphere(dim, rng);
  return {Vector::Zero(dim), std::move(mu0), std::move(mu1), 0, {}};
}

struct BatchEvaluation {
  double loss = 0.0;                 ///< mean log p(y | f), always <= 0
  Vector grad;                       ///< gradient of `loss` w.r.t. v (empty unless requested)
  std::vector<UnitVector> reps;      ///< f(x; v) per item, batch order
};

/// d log p(y | f) / df = kappa (mu_y - p(0|f) mu0 - p(1|f) mu1) = kappa (y - p(1|f)) (mu1 - mu0).
inline Vector loglik_grad_f(const UnitVector& f, const ClassPair& pair, int label) {
  const double p1 = posterior_prob(f, pair);
  const double p0 = 1.0 - p1;
  const Vector& mu_y = label == 1 ? pair.mu1.coords() : pair.mu0.coords();
  return pair.kappa * (mu_y - p0 * pair.mu0.coords() - p1 * pair.mu1.coords());
}

inline BatchEvaluation evaluate_batch(const SteeringState& state, std::span<const LabeledSeq> batch,
                                      const Observer& obs, const TrainConfig& cfg, bool with_grad) {
  if (batch.empty()) throw ConfigError("evaluate_batch: empty batch");
  require_same_dim(state.v.size(), obs.dim(), "steering state");
  const ClassPair pair = state.pair(cfg.kappa);
  BatchEvaluation out;
  out.reps.reserve(batch.size());
  if (with_grad) out.grad = Vector::Zero(obs.dim());
  double loss = 0.0;
  for (const auto& item : batch) {
    if (with_grad) {
      Linearization lin = obs.linearize(item.x, state.v, cfg.extraction);
      loss += posterior_log_prob(lin.f, pair, item.label);
      out.grad += lin.pullback(loglik_grad_f(lin.f, pair, item.label));
      out.reps.push_back(std::move(lin.f));
    } else {
      out.reps.push_back(obs.steered_repr(item.x, state.v, cfg.extraction));
      loss += posterior_log_prob(out.reps.back(), pair, item.label);
    }
  }
  const auto n = static_cast<double>(batch.size());
  out.loss = loss / n;
  if (with_grad) out.grad /= n;
  return out;
}

/// Mean log-likelihood of the batch labels under the current state.
inline double batch_loss(const SteeringState& state, std::span<const LabeledSeq> batch, const Observer& obs,
                         const TrainConfig& cfg) {
  return evaluate_batch(state, batch, obs, cfg, false).loss;
}

/// Gradient of batch_loss with respect to the steering vector.
inline Vector grad_v(const SteeringState& state, std::span<const LabeledSeq> batch, const Observer& obs,
                     const TrainConfig& cfg) {
  return evaluate_batch(state, batch, obs, cfg, true).grad;
}

/// normalize((1 - rho) mu_hat + rho zbar). Throws DegenerateError when the blend has norm < 1e-12.
inline UnitVector ema_update(const UnitVector& mu_hat, const Vector& batch_mean, double rho) {
  require_same_dim(mu_hat.dim(), batch_mean.size(), "ema_update");
  if (rho == 0.0) return mu_hat;
  const Vector blend = (1.0 - rho) * mu_hat.coords() + rho * batch_mean;
  if (!(blend.norm() > 1e-12)) throw DegenerateError("ema_update: blended prototype has norm < 1e-12");
  return UnitVector(blend);
}

/// Shuffles each class separately and interleaves them in proportion, so
/// every batch of size B sees about B * n_c / n items of class c.
template <class Rng>
std::vector<std::vector<std::size_t>> stratified_batches(const TokenDataset& data, int batch, Rng& rng) {
  std::vector<std::size_t> idx[2];
  for (std::size_t i = 0; i < data.size(); ++i) idx[data[i].label == 1 ? 1 : 0].push_back(i);
  std::shuffle(idx[0].begin(), idx[0].end(), rng);
  std::shuffle(idx[1].begin(), idx[1].end(), rng);
  const std::size_t n = data.size();
  const std::size_t n1 = idx[1].size();
  std::vector<std::size_t> order;
  order.reserve(n);
  std::size_t next[2] = {0, 0};
  for (std::size_t k = 0; k < n; ++k) {
    const bool take1 = (k + 1) * n1 / n > k * n1 / n;
    const int c = take1 ? 1 : 0;
    order.push_back(idx[c][next[c]++]);
  }
  std::vector<std::vector<std::size_t>> batches;
  const auto b = static_cast<std::size_t>(batch);
  for (std::size_t start = 0; start < n; start += b)
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + b)));
  return batches;
}

struct StepRecord {
  std::size_t t = 0;
  double loss = 0.0;
  double proto_gap = 0.0;
  double v_norm = 0.0;
};

/// Finite-difference check of the ascent direction, taken once on the first batch.
struct GradientCheck {
  bool performed = false;
  double analytic = 0.0; ///< <grad, w> for unit w along the gradient
  double numeric = 0.0;  ///< central difference of the batch loss along w
  double rel_err = 0.0;
  bool sign_ok = true;
};

struct TrainReport {
  TrainConfig config;
  std::vector<StepRecord> per_step;
  std::size_t skipped_ema_updates = 0;
  GradientCheck grad_check;
  double wall_time_s = 0.0;
};

struct TrainResult {
  SteeringState state;
  TrainReport report;
};

namespace detail {

inline GradientCheck check_gradient(const SteeringState& state, std::span<const LabeledSeq> batch, const Observer& obs,
                                    const TrainConfig& cfg, const Vector& grad) {
  GradientCheck gc;
  const double gn = grad.norm();
  if (!(gn > 0.0)) return gc;
  const Vector w = grad / gn;
  const double h = 1e-5 * std::max(1.0, state.v.norm());
  SteeringState probe = state;
  probe.v = state.v + h * w;
  const double up = batch_loss(probe, batch, obs, cfg);
  probe.v = state.v - h * w;
  const double down = batch_loss(probe, batch, obs, cfg);
  gc.performed = true;
  gc.analytic = gn;
  gc.numeric = (up - down) / (2.0 * h);
  gc.rel_err = std::abs(gc.analytic - gc.numeric) / std::max(std::abs(gc.analytic), 1e-300);
  gc.sign_ok = gc.numeric > 0.0;
  return gc;
}

} // namespace detail

/// Runs the full two-timescale schedule. Deterministic given config.seed.
inline TrainResult train(const TokenDataset& data, const Observer& obs, const TrainConfig& cfg) {
  cfg.validate();
  cfg.extraction.validate(obs.layers());
  std::size_t counts[2] = {0, 0};
  for (const auto& item : data) {
    if (item.label != 0 && item.label != 1) throw ConfigError("train: labels must be 0 or 1");
    ++counts[item.label];
  }
  if (counts[0] == 0 || counts[1] == 0) throw ConfigError("train: dataset must contain both classes");

  const auto started = std::chrono::steady_clock::now();
  std::mt19937_64 rng(cfg.seed);
  TrainResult result{initial_state(obs.dim(), rng()), {}};
  result.report.config = cfg;
  SteeringState& st = result.state;

  Vector adam_m = Vector::Zero(obs.dim());
  Vector adam_s = Vector::Zero(obs.dim());
  constexpr double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;

  std::vector<LabeledSeq> batch;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (const auto& indices : stratified_batches(data, cfg.batch, rng)) {
      batch.clear();
      for (auto i : indices) batch.push_back(data[i]);

      // eta = 0 freezes v, so the backward pass is skipped
      const bool need_grad = cfg.eta > 0.0;
      BatchEvaluation ev = evaluate_batch(st, batch, obs, cfg, need_grad);
      if (need_grad && st.step == 0)
        result.report.grad_check = detail::check_gradient(st, batch, obs, cfg, ev.grad);

      // slow timescale: ascent on v
      if (!need_grad) {
        // v stays frozen
      } else if (cfg.optimizer == Optimizer::Sgd) {
        st.v += cfg.eta * ev.grad;
      } else {
        const double t = static_cast<double>(st.step + 1);
        adam_m = beta1 * adam_m + (1.0 - beta1) * ev.grad;
        adam_s = beta2 * adam_s + (1.0 - beta2) * ev.grad.cwiseAbs2();
        const Vector m_hat = adam_m / (1.0 - std::pow(beta1, t));
        const Vector s_hat = adam_s / (1.0 - std::pow(beta2, t));
        st.v += cfg.eta * (m_hat.array() / (s_hat.array().sqrt() + adam_eps)).matrix() -
                cfg.eta * cfg.weight_decay * st.v;
      }

      // fast timescale: prototype EMA on the representations under the pre-update v
      for (int c = 0; c < 2; ++c) {
        Vector sum = Vector::Zero(obs.dim());
        int n_c = 0;
        for (std::size_t i = 0; i < batch.size(); ++i) {
          if (batch[i].label != c) continue;
          sum += ev.reps[i].coords();
          ++n_c;
        }
        if (n_c == 0) continue;
        UnitVector& proto = c == 0 ? st.mu0_hat : st.mu1_hat;
        try {
          proto = ema_update(proto, sum / n_c, cfg.rho);
        } catch (const DegenerateError&) {
          ++result.report.skipped_ema_updates;
          warn("step " + std::to_string(st.step + 1) + ": degenerate prototype update for class " +
               std::to_string(c) + " skipped");
        }
      }

      ++st.step;
      st.loss_history.push_back(ev.loss);
      result.report.per_step.push_back({st.step, ev.loss, st.proto_gap(), st.v.norm()});
    }
  }
  result.report.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return result;
}

/// (1/8)(1 - mean tanh^2(S(f)/2)) over representations; lies in [0, 1/8].
inline double overlap_weight(const ClassPair& pair, std::span<const UnitVector> reps) {
  if (reps.empty()) throw ConfigError("overlap_weight: empty input");
  double acc = 0.0;
  for (const auto& f : reps) {
    const double th = std::tanh(0.5 * score(f, pair));
    acc += th * th;
  }
  return 0.125 * (1.0 - acc / static_cast<double>(reps.size()));
}

inline double overlap_weight(const SteeringState& state, const TokenDataset& data, const Observer& obs,
                             const TrainConfig& cfg) {
  std::vector<UnitVector> reps;
  reps.reserve(data.size());
  for (const auto& item : data) reps.push_back(obs.steered_repr(item.x, state.v, cfg.extraction));
  return overlap_weight(state.pair(cfg.kappa), reps);
}

// JSON surface

inline nlohmann::json to_json(const ExtractionConfig& e) {
  return {{"k", e.token_fraction}, {"n", e.layer_count}, {"layer", e.steer_layer}};
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"eta", c.eta},     {"rho", c.rho},   {"kappa", c.kappa},
          {"epochs", c.epochs}, {"batch", c.batch}, {"seed", c.seed},
          {"optimizer", to_string(c.optimizer)}, {"weight_decay", c.weight_decay},
          {"extraction", to_json(c.extraction)}};
}

/// Report JSON: {config, per_step: [{t, loss, proto_gap, v_norm}], ...}. Wall time is left out so that
/// reports are reproducible byte for byte.
inline nlohmann::json to_json(const TrainReport& r) {
  nlohmann::json steps = nlohmann::json::array();
  for (const auto& s : r.per_step)
    steps.push_back({{"t", s.t}, {"loss", s.loss}, {"proto_gap", s.proto_gap}, {"v_norm", s.v_norm}});
  nlohmann::json gc = {{"performed", r.grad_check.performed},
                       {"analytic", r.grad_check.analytic},
                       {"numeric", r.grad_check.numeric},
                       {"rel_err", r.grad_check.rel_err},
                       {"sign_ok", r.grad_check.sign_ok}};
  return {{"config", to_json(r.config)},
          {"per_step", std::move(steps)},
          {"skipped_ema_updates", r.skipped_ema_updates},
          {"grad_check", std::move(gc)}};
}

} // namespace s2d
