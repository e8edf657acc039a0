#pragma once

// Monte-Carlo experiments: Type-I control of the quantile threshold,
// prototype tracking under the EMA recursion, detector degradation under
// bounded representation shift, and learned-vs-frozen steering.
//
// Every experiment is a pure function of its config (which carries the seed).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <iomanip>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "../bessel.hpp"
#include "../config.hpp"
#include "../detector.hpp"
#include "../fsutil.hpp"
#include "../metrics.hpp"
#include "../sphere.hpp"
#include "../toy_transformer.hpp"
#include "../trainer.hpp"
#include "tasks.hpp"

namespace s2d::simlab {

/// SplitMix64 finalizer over (base, stream, index); gives independent,
/// reproducible seeds for repetitions that must be paired across settings.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream, std::uint64_t index) {
  std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (stream * 0x100000001B3ULL + index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline double mean_of(const std::vector<double>& xs) {
  if (xs.empty()) return 0.0;
  // sorted reduction keeps aggregates independent of evaluation order
  std::vector<double> s(xs);
  std::sort(s.begin(), s.end());
  return std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
}

inline std::string csv_num(double x) {
  std::ostringstream os;
  os << std::setprecision(17) << x;
  return os.str();
}

// ---------------------------------------------------------------------------
// Type-I control

struct TypeIConfig {
  std::size_t n2 = 1000;
  double alpha = 0.05;
  double delta = 0.05;
  int reps = 200;
  std::size_t n_holdout = 100000;
  std::string null_dist = "normal"; ///< "normal" or "uniform"
  std::uint64_t seed = 0;

  void validate() const {
    if (n2 < 1) throw ConfigError("type_i: n2 must be >= 1");
    if (!(alpha >= 0.0 && alpha < 1.0)) throw ConfigError("type_i: alpha must lie in [0, 1)");
    if (!(delta > 0.0 && delta < 1.0)) throw ConfigError("type_i: delta must lie in (0, 1)");
    if (reps < 50) throw ConfigError("type_i: reps must be >= 50");
    if (n_holdout < 100000) throw ConfigError("type_i: n_holdout must be >= 100000");
    if (null_dist != "normal" && null_dist != "uniform")
      throw ConfigError("type_i: null_dist must be 'normal' or 'uniform'");
  }
};

struct TypeIRep {
  int rep = 0;
  std::uint64_t seed = 0;
  Threshold tau;
  double fpr = 0.0;
  bool covered = false;
};

struct TypeIReport {
  TypeIConfig config;
  double band = 0.0;
  double coverage = 0.0;     ///< fraction of reps with |FPR - alpha| <= band
  double mean_abs_dev = 0.0; ///< mean over reps of |FPR - alpha|
  std::vector<TypeIRep> reps;
};

inline TypeIReport exp_type_i_control(const TypeIConfig& cfg) {
  cfg.validate();
  TypeIReport report;
  report.config = cfg;
  report.band = dkw_band(cfg.n2, cfg.delta);
  std::vector<double> cal(cfg.n2);
  std::vector<double> devs;
  std::size_t covered = 0;
  for (int r = 0; r < cfg.reps; ++r) {
    const std::uint64_t seed = derive_seed(cfg.seed, 1, static_cast<std::uint64_t>(r));
    // the held-out stream is independent of n2, so doubling n2 keeps it paired
    std::mt19937_64 rng_cal(seed);
    std::mt19937_64 rng_hold(derive_seed(seed, 2, 0));
    // one distribution object per stream: normal_distribution caches a draw
    std::normal_distribution<double> normal_cal, normal_hold;
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    const bool is_normal = cfg.null_dist == "normal";
    for (auto& s : cal) s = is_normal ? normal_cal(rng_cal) : unif(rng_cal);
    const Threshold tau = calibrate_quantile(cal, cfg.alpha);
    std::size_t fp = 0;
    for (std::size_t i = 0; i < cfg.n_holdout; ++i)
      fp += static_cast<std::size_t>(decide(tau, is_normal ? normal_hold(rng_hold) : unif(rng_hold)));
    const double fpr = static_cast<double>(fp) / static_cast<double>(cfg.n_holdout);
    const double dev = std::abs(fpr - cfg.alpha);
    const bool ok = dev <= report.band;
    covered += ok ? 1 : 0;
    devs.push_back(dev);
    report.reps.push_back({r, seed, tau, fpr, ok});
  }
  report.coverage = static_cast<double>(covered) / static_cast<double>(cfg.reps);
  report.mean_abs_dev = mean_of(devs);
  return report;
}

/// Text histogram of per-rep FPRs, for failure diagnostics.
inline std::string fpr_histogram(const TypeIReport& r, int bins = 20) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& x : r.reps) {
    lo = std::min(lo, x.fpr);
    hi = std::max(hi, x.fpr);
  }
  if (!(hi > lo)) hi = lo + 1e-12;
  std::vector<int> h(static_cast<std::size_t>(bins), 0);
  for (const auto& x : r.reps)
    ++h[static_cast<std::size_t>(std::min(bins - 1, static_cast<int>((x.fpr - lo) / (hi - lo) * bins)))];
  std::ostringstream os;
  for (int b = 0; b < bins; ++b) {
    os << std::fixed << std::setprecision(5) << lo + (hi - lo) * b / bins << " | "
       << std::string(static_cast<std::size_t>(h[static_cast<std::size_t>(b)]), '#') << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Prototype tracking

struct TrackingConfig {
  int d = 16;
  double kappa = 10.0;
  std::vector<double> rhos = {0.05, 0.2};
  int batch = 32;
  int steps = 500;
  int seeds = 20;
  std::uint64_t seed = 0;
  double drift = 0.0;      ///< per-step rotation angle of the true mean direction
  bool zero_noise = false; ///< replace the batch mean by its expectation A_d(kappa) mu
  double init_error = 0.2; ///< ||mu_hat_0 - mu_0||, at most 1/4

  void validate() const {
    if (d < 2) throw ConfigError("tracking: d must be >= 2");
    if (!(kappa > 0.0)) throw ConfigError("tracking: kappa must be > 0");
    if (rhos.empty()) throw ConfigError("tracking: rhos must be nonempty");
    for (double r : rhos)
      if (!(r > 0.0 && r <= 1.0)) throw ConfigError("tracking: every rho must lie in (0, 1]");
    if (batch < 1 || steps < 1 || seeds < 1) throw ConfigError("tracking: batch, steps and seeds must be >= 1");
    if (!(drift >= 0.0)) throw ConfigError("tracking: drift must be >= 0");
    if (!(init_error >= 0.0 && init_error <= 0.25)) throw ConfigError("tracking: init_error must lie in [0, 1/4]");
  }
};

struct TrackingRun {
  double rho = 0.0;
  int seed_index = 0;
  std::vector<double> error; ///< ||mu_hat_t - mu_t|| for t = 0..steps
  double plateau = 0.0;      ///< mean error over the final quarter of steps
  bool stayed_below = true;  ///< once below 1/4, never above it again
  bool monotone = true;      ///< error never increased
};

struct TrackingSummary {
  double rho = 0.0;
  double mean_final = 0.0;   ///< seed-mean error at t = steps
  double mean_plateau = 0.0; ///< seed-mean plateau
  bool all_stayed_below = true;
  bool all_monotone = true;
  std::vector<double> mean_trajectory;
};

struct TrackingReport {
  TrackingConfig config;
  std::vector<TrackingRun> runs; ///< rho-major, then seed
  std::vector<TrackingSummary> summary;
};

/// Unit vector at chord distance `chord` from `from`, moving along tangent `t`.
inline Vector move_along(const Vector& from, const Vector& tangent_unit, double chord) {
  const double theta = 2.0 * std::asin(std::clamp(0.5 * chord, 0.0, 1.0));
  return std::cos(theta) * from + std::sin(theta) * tangent_unit;
}

/// Unit tangent at z: the component of w orthogonal to z, normalized; zero if w is parallel to z.
inline Vector tangent_part(const Vector& z, const Vector& w) {
  Vector t = w - z.dot(w) * z;
  const double n = t.norm();
  return n > 1e-12 ? Vector(t / n) : Vector(Vector::Zero(z.size()));
}

inline Vector random_tangent(const Vector& z, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  for (;;) {
    Vector g(z.size());
    for (Eigen::Index i = 0; i < g.size(); ++i) g[i] = normal(rng);
    Vector t = tangent_part(z, g);
    if (t.norm() > 0.5) return t;
  }
}

inline TrackingReport exp_tracking(const TrackingConfig& cfg) {
  cfg.validate();
  TrackingReport report;
  report.config = cfg;
  const double a_d = bessel_ratio(cfg.d, cfg.kappa);
  for (double rho : cfg.rhos) {
    TrackingSummary sum;
    sum.rho = rho;
    sum.mean_trajectory.assign(static_cast<std::size_t>(cfg.steps) + 1, 0.0);
    std::vector<double> finals, plateaus;
    for (int s = 0; s < cfg.seeds; ++s) {
      // same stream for every rho: runs are paired across rho
      std::mt19937_64 rng(derive_seed(cfg.seed, 3, static_cast<std::uint64_t>(s)));
      Vector mu = uniform_on_sphere(cfg.d, rng).coords();
      const Vector drift_dir = random_tangent(mu, rng);
      // the drift rotates mu in the fixed plane span{mu_0, drift_dir}
      const Vector e0 = mu, e1 = drift_dir;
      UnitVector mu_hat(move_along(mu, random_tangent(mu, rng), cfg.init_error));

      TrackingRun run;
      run.rho = rho;
      run.seed_index = s;
      run.error.reserve(static_cast<std::size_t>(cfg.steps) + 1);
      run.error.push_back((mu_hat.coords() - mu).norm());
      bool below = run.error.back() <= 0.25;
      for (int t = 1; t <= cfg.steps; ++t) {
        Vector zbar;
        if (cfg.zero_noise) {
          zbar = a_d * mu;
        } else {
          const VmfModel model(UnitVector::from_normalized(mu), cfg.kappa);
          zbar = Vector::Zero(cfg.d);
          for (int b = 0; b < cfg.batch; ++b) zbar += sample_vmf(model, rng).coords();
          zbar /= cfg.batch;
        }
        mu_hat = ema_update(mu_hat, zbar, rho);
        if (cfg.drift > 0.0) {
          const double angle = cfg.drift * t;
          mu = std::cos(angle) * e0 + std::sin(angle) * e1;
        }
        const double err = (mu_hat.coords() - mu).norm();
        if (err > run.error.back() + 1e-15) run.monotone = false;
        if (below && err > 0.25) run.stayed_below = false;
        below = below || err <= 0.25;
        run.error.push_back(err);
      }
      const int start = cfg.steps - cfg.steps / 4;
      std::vector<double> tail(run.error.begin() + start + 1, run.error.end());
      if (tail.empty()) tail.push_back(run.error.back());
      run.plateau = mean_of(tail);
      finals.push_back(run.error.back());
      plateaus.push_back(run.plateau);
      sum.all_stayed_below = sum.all_stayed_below && run.stayed_below;
      sum.all_monotone = sum.all_monotone && run.monotone;
      for (std::size_t t = 0; t < run.error.size(); ++t) sum.mean_trajectory[t] += run.error[t];
      report.runs.push_back(std::move(run));
    }
    for (auto& x : sum.mean_trajectory) x /= cfg.seeds;
    sum.mean_final = mean_of(finals);
    sum.mean_plateau = mean_of(plateaus);
    report.summary.push_back(std::move(sum));
  }
  return report;
}

// ---------------------------------------------------------------------------
// Bounded representation shift

enum class ShiftMode { Rotation, Additive };
enum class ShiftDirection { Adversarial, Random };

inline const char* to_string(ShiftMode m) { return m == ShiftMode::Rotation ? "rotation" : "additive"; }
inline const char* to_string(ShiftDirection d) { return d == ShiftDirection::Adversarial ? "adversarial" : "random"; }

/// Per-sample perturbation with ||z - z'|| <= epsilon, which certifies W1 <= epsilon.
struct ShiftSpec {
  double epsilon = 0.0;
  ShiftMode mode = ShiftMode::Rotation;
  ShiftDirection direction = ShiftDirection::Adversarial;
};

/// Moves z within chord distance spec.epsilon. `push` is the adversarial
/// direction in ambient space (its tangent part is used for rotations).
inline Vector apply_shift(const Vector& z, const ShiftSpec& spec, const Vector& push, std::mt19937_64& rng) {
  if (spec.epsilon == 0.0) return z;
  Vector dir;
  if (spec.direction == ShiftDirection::Adversarial) {
    dir = push;
  } else {
    dir = spec.mode == ShiftMode::Rotation ? random_tangent(z, rng) : uniform_on_sphere(static_cast<int>(z.size()), rng).coords();
  }
  if (spec.mode == ShiftMode::Rotation) {
    const Vector t = tangent_part(z, dir);
    if (t.squaredNorm() == 0.0) return z;
    if (spec.direction == ShiftDirection::Adversarial) {
      // stop at the maximizer of <push, .> instead of rotating past it
      const double to_target = (z - push.normalized()).norm();
      return move_along(z, t, std::min(spec.epsilon, to_target));
    }
    return move_along(z, t, spec.epsilon);
  }
  const double n = dir.norm();
  if (!(n > 0.0)) return z;
  Vector y = z + spec.epsilon * (dir / n);
  const double yn = y.norm();
  if (!(yn > 1e-12)) return z;
  y /= yn;
  const double chord = (y - z).norm();
  if (chord <= spec.epsilon) return y;
  // renormalization overshot the budget: pull back along the geodesic
  return move_along(z, tangent_part(z, y), spec.epsilon);
}

struct ShiftConfig {
  int d = 16;
  double kappa_data = 10.0;    ///< concentration of the synthetic classes
  double separation = 0.6;     ///< angle between the class mean directions (radians)
  std::size_t n_train = 2000;  ///< per class, for prototype estimation
  std::size_t n2 = 1000;       ///< null calibration sample
  std::size_t n_holdout = 100000;
  double alpha = 0.05;
  double delta = 0.05;
  std::vector<double> budgets = {0.0, 0.05, 0.1};
  std::vector<ShiftMode> modes = {ShiftMode::Rotation, ShiftMode::Additive};
  std::vector<ShiftDirection> directions = {ShiftDirection::Adversarial, ShiftDirection::Random};
  int seeds = 5;
  std::uint64_t seed = 0;
  int grid = 20;

  void validate() const {
    if (d < 2) throw ConfigError("shift: d must be >= 2");
    if (!(kappa_data > 0.0)) throw ConfigError("shift: kappa_data must be > 0");
    if (!(separation > 0.0 && separation <= 3.14159)) throw ConfigError("shift: separation must lie in (0, pi)");
    if (n_train < 2 || n2 < 1 || n_holdout < 1) throw ConfigError("shift: sample sizes must be positive");
    if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("shift: alpha must lie in (0, 1)");
    if (!(delta > 0.0 && delta < 1.0)) throw ConfigError("shift: delta must lie in (0, 1)");
    if (budgets.empty() || modes.empty() || directions.empty()) throw ConfigError("shift: empty sweep");
    for (double e : budgets)
      if (!(e >= 0.0 && e <= 2.0)) throw ConfigError("shift: budgets must lie in [0, 2]");
    if (seeds < 1) throw ConfigError("shift: seeds must be >= 1");
    if (grid < 2) throw ConfigError("shift: grid must be >= 2");
  }
};

struct ShiftBound {
  double value = 0.0; ///< tightest bound, capped at 1
  double eps = 0.0;   ///< minimizing slack; 0 when the budget is 0
};

/// min over the slack grid of band + P0(tau - eps <= S < tau) + 2 kappa E / eps, capped at 1.
/// `null_sorted` holds unshifted null scores in ascending order.
inline ShiftBound type_i_shift_bound(const std::vector<double>& null_sorted, double tau, double kappa, double budget,
                                     double band, int grid) {
  if (budget == 0.0) return {std::min(1.0, band), 0.0};
  const double n = static_cast<double>(null_sorted.size());
  const double top = 2.0 * kappa;
  ShiftBound best{std::numeric_limits<double>::infinity(), 0.0};
  for (int k = 0; k < grid; ++k) {
    const double eps = budget * std::pow(top / budget, static_cast<double>(k) / (grid - 1));
    const auto lo = std::lower_bound(null_sorted.begin(), null_sorted.end(), tau - eps);
    const auto hi = std::lower_bound(null_sorted.begin(), null_sorted.end(), tau);
    const double local = static_cast<double>(hi - lo) / n;
    const double b = band + local + 2.0 * kappa * budget / eps;
    if (b < best.value) best = {b, eps};
  }
  best.value = std::min(1.0, best.value);
  return best;
}

/// min over the slack grid of P1(S < tau + eps) + 2 kappa E / eps, capped at 1.
inline ShiftBound type_ii_shift_bound(const std::vector<double>& pos_sorted, double tau, double kappa, double budget,
                                      int grid) {
  const double n = static_cast<double>(pos_sorted.size());
  auto below = [&](double x) {
    return static_cast<double>(std::lower_bound(pos_sorted.begin(), pos_sorted.end(), x) - pos_sorted.begin()) / n;
  };
  if (budget == 0.0) return {std::min(1.0, below(tau)), 0.0};
  const double top = 2.0 * kappa;
  ShiftBound best{std::numeric_limits<double>::infinity(), 0.0};
  for (int k = 0; k < grid; ++k) {
    const double eps = budget * std::pow(top / budget, static_cast<double>(k) / (grid - 1));
    const double b = below(tau + eps) + 2.0 * kappa * budget / eps;
    if (b < best.value) best = {b, eps};
  }
  best.value = std::min(1.0, best.value);
  return best;
}

struct ShiftRun {
  int seed_index = 0;
  ShiftSpec spec;
  double tau = 0.0;
  double type_i = 0.0;        ///< unshifted held-out
  double type_ii = 0.0;
  double type_i_shift = 0.0;  ///< shifted held-out
  double type_ii_shift = 0.0;
  double inflation = 0.0;     ///< type_i_shift - alpha
  ShiftBound bound_i;         ///< bound on the inflation
  ShiftBound bound_ii;        ///< bound on type_ii_shift
  double max_cost = 0.0;      ///< largest per-sample move actually applied
  bool holds_i = false;
  bool holds_ii = false;
};

struct ShiftReport {
  ShiftConfig config;
  double band = 0.0;
  std::vector<ShiftRun> runs;
  bool all_hold = true;
};

inline ShiftReport exp_shift(const ShiftConfig& cfg) {
  cfg.validate();
  ShiftReport report;
  report.config = cfg;
  report.band = dkw_band(cfg.n2, cfg.delta);
  const int d = cfg.d;
  Vector m1 = Vector::Zero(d);
  m1[0] = std::cos(cfg.separation);
  m1[1] = std::sin(cfg.separation);
  const SyntheticRepTask task(VmfModel(UnitVector::basis(d, 0), cfg.kappa_data), VmfModel(UnitVector(m1), cfg.kappa_data));

  for (int s = 0; s < cfg.seeds; ++s) {
    const std::uint64_t seed = derive_seed(cfg.seed, 4, static_cast<std::uint64_t>(s));
    // detector: prototypes are normalized class means of a training sample
    const auto train = gen_representations(task, cfg.n_train, derive_seed(seed, 0, 0));
    Vector sums[2] = {Vector::Zero(d), Vector::Zero(d)};
    for (const auto& r : train.records) sums[r.label] += r.f;
    const ClassPair pair{UnitVector{sums[0]}, UnitVector{sums[1]}, cfg.kappa_data};

    std::mt19937_64 rng_cal(derive_seed(seed, 1, 0));
    std::vector<double> cal(cfg.n2);
    for (auto& x : cal) x = score(sample_vmf(task.class0, rng_cal), pair);
    const Threshold tau = calibrate_quantile(cal, cfg.alpha);

    std::mt19937_64 rng_hold(derive_seed(seed, 2, 0));
    std::vector<Vector> null_z(cfg.n_holdout), pos_z(cfg.n_holdout);
    for (auto& z : null_z) z = sample_vmf(task.class0, rng_hold).coords();
    for (auto& z : pos_z) z = sample_vmf(task.class1, rng_hold).coords();
    const Vector w = pair.discriminant();
    auto score_of = [&](const Vector& z) { return w.dot(z); };
    std::vector<double> null_s(cfg.n_holdout), pos_s(cfg.n_holdout);
    for (std::size_t i = 0; i < cfg.n_holdout; ++i) {
      null_s[i] = score_of(null_z[i]);
      pos_s[i] = score_of(pos_z[i]);
    }
    const ErrorRates base = empirical_errors(tau, pos_s, null_s);
    std::vector<double> null_sorted(null_s), pos_sorted(pos_s);
    std::sort(null_sorted.begin(), null_sorted.end());
    std::sort(pos_sorted.begin(), pos_sorted.end());

    int combo = 0;
    for (double budget : cfg.budgets)
      for (ShiftMode mode : cfg.modes)
        for (ShiftDirection dir : cfg.directions) {
          const ShiftSpec spec{budget, mode, dir};
          std::mt19937_64 rng_shift(derive_seed(seed, 5, static_cast<std::uint64_t>(combo++)));
          ShiftRun run;
          run.seed_index = s;
          run.spec = spec;
          run.tau = tau.value;
          run.type_i = base.type_i;
          run.type_ii = base.type_ii;
          std::vector<double> null_shift(cfg.n_holdout), pos_shift(cfg.n_holdout);
          for (std::size_t i = 0; i < cfg.n_holdout; ++i) {
            // adversary raises null scores and lowers generated ones
            const Vector zn = apply_shift(null_z[i], spec, w, rng_shift);
            const Vector zp = apply_shift(pos_z[i], spec, -w, rng_shift);
            run.max_cost = std::max({run.max_cost, (zn - null_z[i]).norm(), (zp - pos_z[i]).norm()});
            null_shift[i] = budget == 0.0 ? null_s[i] : score_of(zn);
            pos_shift[i] = budget == 0.0 ? pos_s[i] : score_of(zp);
          }
          const ErrorRates shifted = empirical_errors(tau, pos_shift, null_shift);
          run.type_i_shift = shifted.type_i;
          run.type_ii_shift = shifted.type_ii;
          run.inflation = shifted.type_i - cfg.alpha;
          run.bound_i = type_i_shift_bound(null_sorted, tau.value, pair.kappa, budget, report.band, cfg.grid);
          run.bound_ii = type_ii_shift_bound(pos_sorted, tau.value, pair.kappa, budget, cfg.grid);
          run.holds_i = run.inflation <= run.bound_i.value;
          run.holds_ii = run.type_ii_shift <= run.bound_ii.value;
          report.all_hold = report.all_hold && run.holds_i && run.holds_ii;
          report.runs.push_back(run);
        }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Learned vs frozen steering

struct SeparabilityConfig {
  int seeds = 5;
  std::uint64_t seed = 0;
  std::size_t n_train = 200; ///< per class
  std::size_t n_test = 400;  ///< per class
  double mix = 0.3;          ///< weight of the class-private chain; smaller overlaps more
  int min_len = 8;
  int max_len = 16;
  TrainConfig train = [] {
    TrainConfig c;
    c.eta = 0.05;
    c.rho = 0.1;
    c.kappa = 2.5;
    c.epochs = 12;
    c.batch = 16;
    c.optimizer = Optimizer::AdamW;
    return c;
  }();
  ToyTransformerConfig observer;

  void validate() const {
    if (seeds < 1) throw ConfigError("separability: seeds must be >= 1");
    if (n_train < 2 || n_test < 1) throw ConfigError("separability: sample sizes too small");
    if (!(train.eta > 0.0)) throw ConfigError("separability: train.eta must be > 0 for the learned run");
    train.validate();
  }
};

struct SeparabilityRun {
  int seed_index = 0;
  bool learned = false;
  double auroc = 0.0;
  double overlap = 0.0;
  double proto_gap = 0.0;
  double v_norm = 0.0;
};

struct SeparabilityReport {
  SeparabilityConfig config;
  std::vector<SeparabilityRun> runs;
  double auroc_learned = 0.0, auroc_frozen = 0.0;
  double gap_learned = 0.0, gap_frozen = 0.0;
  double overlap_learned = 0.0, overlap_frozen = 0.0;
  bool vacuous = false;  ///< both runs at chance level; the comparison is skipped
  bool dominates = false;
  double wall_time_s = 0.0;
};

inline SeparabilityReport exp_separability(const SeparabilityConfig& cfg) {
  cfg.validate();
  const auto started = std::chrono::steady_clock::now();
  SeparabilityReport report;
  report.config = cfg;
  const ToyTransformer obs(cfg.observer);
  const auto task = overlapping_token_task(cfg.observer.vocab, cfg.mix, derive_seed(cfg.seed, 6, 0), cfg.min_len,
                                           cfg.max_len);
  std::vector<double> au[2], gap[2], ov[2];
  for (int s = 0; s < cfg.seeds; ++s) {
    const auto train_data = gen_token_sequences(task, cfg.n_train, derive_seed(cfg.seed, 7, static_cast<std::uint64_t>(s)));
    const auto test_data = gen_token_sequences(task, cfg.n_test, derive_seed(cfg.seed, 8, static_cast<std::uint64_t>(s)));
    for (int learned = 0; learned < 2; ++learned) {
      TrainConfig tc = cfg.train;
      tc.seed = derive_seed(cfg.seed, 9, static_cast<std::uint64_t>(s)); // shared: same init and batches
      if (!learned) tc.eta = 0.0;
      const auto result = train(train_data, obs, tc);
      const ClassPair pair = result.state.pair(tc.kappa);
      std::vector<double> pos, neg;
      for (const auto& item : test_data)
        (item.label == 1 ? pos : neg).push_back(score(obs.steered_repr(item.x, result.state.v, tc.extraction), pair));
      SeparabilityRun run{s, learned == 1, auroc(pos, neg), overlap_fraction(pos, neg), result.state.proto_gap(),
                          result.state.v.norm()};
      au[learned].push_back(run.auroc);
      gap[learned].push_back(run.proto_gap);
      ov[learned].push_back(run.overlap);
      report.runs.push_back(run);
    }
  }
  report.auroc_frozen = mean_of(au[0]);
  report.auroc_learned = mean_of(au[1]);
  report.gap_frozen = mean_of(gap[0]);
  report.gap_learned = mean_of(gap[1]);
  report.overlap_frozen = mean_of(ov[0]);
  report.overlap_learned = mean_of(ov[1]);
  // chance band: 3 standard errors of AUROC under no signal
  const double n = static_cast<double>(cfg.n_test);
  const double chance = 3.0 * std::sqrt((2.0 * n + 1.0) / (12.0 * n * n)) / std::sqrt(static_cast<double>(cfg.seeds));
  report.vacuous = std::abs(report.auroc_frozen - 0.5) <= chance && std::abs(report.auroc_learned - 0.5) <= chance;
  report.dominates = report.auroc_learned >= report.auroc_frozen && report.gap_learned > report.gap_frozen;
  report.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return report;
}

// ---------------------------------------------------------------------------
// JSON configs (strict) and reports

inline TypeIConfig type_i_config_from_json(const nlohmann::json& j) {
  ConfigReader r(j, "type_i");
  TypeIConfig c;
  c.n2 = r.get_or<std::size_t>("n2", c.n2);
  c.alpha = r.get_or("alpha", c.alpha);
  c.delta = r.get_or("delta", c.delta);
  c.reps = r.get_or("reps", c.reps);
  c.n_holdout = r.get_or<std::size_t>("n_holdout", c.n_holdout);
  c.null_dist = r.get_or("null_dist", c.null_dist);
  c.seed = r.get_or<std::uint64_t>("seed", c.seed);
  r.finish();
  c.validate();
  return c;
}

inline TrackingConfig tracking_config_from_json(const nlohmann::json& j) {
  ConfigReader r(j, "tracking");
  TrackingConfig c;
  c.d = r.get_or("d", c.d);
  c.kappa = r.get_or("kappa", c.kappa);
  c.rhos = r.get_or("rhos", c.rhos);
  c.batch = r.get_or("batch", c.batch);
  c.steps = r.get_or("steps", c.steps);
  c.seeds = r.get_or("seeds", c.seeds);
  c.seed = r.get_or<std::uint64_t>("seed", c.seed);
  c.drift = r.get_or("drift", c.drift);
  c.zero_noise = r.get_or("zero_noise", c.zero_noise);
  c.init_error = r.get_or("init_error", c.init_error);
  r.finish();
  c.validate();
  return c;
}

inline ShiftConfig shift_config_from_json(const nlohmann::json& j) {
  ConfigReader r(j, "shift");
  ShiftConfig c;
  c.d = r.get_or("d", c.d);
  c.kappa_data = r.get_or("kappa_data", c.kappa_data);
  c.separation = r.get_or("separation", c.separation);
  c.n_train = r.get_or<std::size_t>("n_train", c.n_train);
  c.n2 = r.get_or<std::size_t>("n2", c.n2);
  c.n_holdout = r.get_or<std::size_t>("n_holdout", c.n_holdout);
  c.alpha = r.get_or("alpha", c.alpha);
  c.delta = r.get_or("delta", c.delta);
  c.budgets = r.get_or("budgets", c.budgets);
  if (r.has("modes")) {
    c.modes.clear();
    for (const auto& m : r.get<std::vector<std::string>>("modes")) {
      if (m == "rotation") c.modes.push_back(ShiftMode::Rotation);
      else if (m == "additive") c.modes.push_back(ShiftMode::Additive);
      else throw ConfigError("shift.modes: unknown mode '" + m + "'");
    }
  }
  if (r.has("directions")) {
    c.directions.clear();
    for (const auto& m : r.get<std::vector<std::string>>("directions")) {
      if (m == "adversarial") c.directions.push_back(ShiftDirection::Adversarial);
      else if (m == "random") c.directions.push_back(ShiftDirection::Random);
      else throw ConfigError("shift.directions: unknown direction '" + m + "'");
    }
  }
  c.seeds = r.get_or("seeds", c.seeds);
  c.seed = r.get_or<std::uint64_t>("seed", c.seed);
  c.grid = r.get_or("grid", c.grid);
  r.finish();
  c.validate();
  return c;
}

inline Optimizer optimizer_from_string(const std::string& s) {
  if (s == "sgd") return Optimizer::Sgd;
  if (s == "adamw") return Optimizer::AdamW;
  throw ConfigError("optimizer must be 'sgd' or 'adamw', got '" + s + "'");
}

inline ExtractionConfig extraction_from_reader(ConfigReader r, ExtractionConfig base) {
  base.token_fraction = r.get_or("k", base.token_fraction);
  base.layer_count = r.get_or("n", base.layer_count);
  base.steer_layer = r.get_or("layer", base.steer_layer);
  r.finish();
  return base;
}

/// Reads the TrainConfig fields present in `r`; absent ones keep `base`.
inline TrainConfig train_config_from_reader(ConfigReader r, TrainConfig base) {
  base.eta = r.get_or("eta", base.eta);
  base.rho = r.get_or("rho", base.rho);
  base.kappa = r.get_or("kappa", base.kappa);
  base.epochs = r.get_or("epochs", base.epochs);
  base.batch = r.get_or("batch", base.batch);
  base.seed = r.get_or<std::uint64_t>("seed", base.seed);
  base.weight_decay = r.get_or("weight_decay", base.weight_decay);
  if (r.has("optimizer")) base.optimizer = optimizer_from_string(r.get<std::string>("optimizer"));
  if (r.has("extraction")) base.extraction = extraction_from_reader(r.child("extraction"), base.extraction);
  r.finish();
  return base;
}

inline ToyTransformerConfig toy_config_from_reader(ConfigReader r, ToyTransformerConfig base) {
  base.layers = r.get_or("layers", base.layers);
  base.dim = r.get_or("dim", base.dim);
  base.vocab = r.get_or("vocab", base.vocab);
  base.mlp_mult = r.get_or("mlp_mult", base.mlp_mult);
  base.seed = r.get_or<std::uint64_t>("seed", base.seed);
  r.finish();
  return base;
}

inline SeparabilityConfig separability_config_from_json(const nlohmann::json& j) {
  ConfigReader r(j, "separability");
  SeparabilityConfig c;
  c.seeds = r.get_or("seeds", c.seeds);
  c.seed = r.get_or<std::uint64_t>("seed", c.seed);
  c.n_train = r.get_or<std::size_t>("n_train", c.n_train);
  c.n_test = r.get_or<std::size_t>("n_test", c.n_test);
  c.mix = r.get_or("mix", c.mix);
  c.min_len = r.get_or("min_len", c.min_len);
  c.max_len = r.get_or("max_len", c.max_len);
  if (r.has("train")) c.train = train_config_from_reader(r.child("train"), c.train);
  if (r.has("observer")) c.observer = toy_config_from_reader(r.child("observer"), c.observer);
  r.finish();
  c.validate();
  return c;
}

inline nlohmann::json threshold_json(const Threshold& t) {
  return t.sentinel ? nlohmann::json(nullptr) : nlohmann::json(t.value);
}

inline nlohmann::json to_json(const TypeIReport& r) {
  const auto& c = r.config;
  return {{"experiment", "type_i"},
          {"config",
           {{"n2", c.n2}, {"alpha", c.alpha}, {"delta", c.delta}, {"reps", c.reps}, {"n_holdout", c.n_holdout},
            {"null_dist", c.null_dist}, {"seed", c.seed}}},
          {"band", r.band},
          {"coverage", r.coverage},
          {"mean_abs_dev", r.mean_abs_dev}};
}

inline std::string to_csv(const TypeIReport& r) {
  std::string out = "rep,seed,tau,sentinel,fpr,covered\n";
  for (const auto& x : r.reps)
    out += std::to_string(x.rep) + "," + std::to_string(x.seed) + "," + (x.tau.sentinel ? "" : csv_num(x.tau.value)) +
           "," + (x.tau.sentinel ? "1" : "0") + "," + csv_num(x.fpr) + "," + (x.covered ? "1" : "0") + "\n";
  return out;
}

inline nlohmann::json to_json(const TrackingReport& r) {
  const auto& c = r.config;
  nlohmann::json summary = nlohmann::json::array();
  for (const auto& s : r.summary)
    summary.push_back({{"rho", s.rho},
                       {"mean_final", s.mean_final},
                       {"mean_plateau", s.mean_plateau},
                       {"all_stayed_below", s.all_stayed_below},
                       {"all_monotone", s.all_monotone},
                       {"mean_trajectory", s.mean_trajectory}});
  return {{"experiment", "tracking"},
          {"config",
           {{"d", c.d}, {"kappa", c.kappa}, {"rhos", c.rhos}, {"batch", c.batch}, {"steps", c.steps},
            {"seeds", c.seeds}, {"seed", c.seed}, {"drift", c.drift}, {"zero_noise", c.zero_noise},
            {"init_error", c.init_error}}},
          {"summary", std::move(summary)}};
}

inline std::string to_csv(const TrackingReport& r) {
  std::string out = "rho,seed_index,final_error,plateau,stayed_below,monotone\n";
  for (const auto& x : r.runs)
    out += csv_num(x.rho) + "," + std::to_string(x.seed_index) + "," + csv_num(x.error.back()) + "," +
           csv_num(x.plateau) + "," + (x.stayed_below ? "1" : "0") + "," + (x.monotone ? "1" : "0") + "\n";
  return out;
}

inline nlohmann::json to_json(const ShiftReport& r) {
  const auto& c = r.config;
  std::vector<std::string> modes, dirs;
  for (auto m : c.modes) modes.emplace_back(to_string(m));
  for (auto d : c.directions) dirs.emplace_back(to_string(d));
  return {{"experiment", "shift"},
          {"config",
           {{"d", c.d}, {"kappa_data", c.kappa_data}, {"separation", c.separation}, {"n_train", c.n_train},
            {"n2", c.n2}, {"n_holdout", c.n_holdout}, {"alpha", c.alpha}, {"delta", c.delta},
            {"budgets", c.budgets}, {"modes", modes}, {"directions", dirs}, {"seeds", c.seeds}, {"seed", c.seed},
            {"grid", c.grid}}},
          {"band", r.band},
          {"runs", r.runs.size()},
          {"all_hold", r.all_hold}};
}

inline std::string to_csv(const ShiftReport& r) {
  std::string out =
      "seed_index,budget,mode,direction,tau,type_i,type_ii,type_i_shift,type_ii_shift,inflation,bound_i,eps_i,"
      "bound_ii,eps_ii,max_cost,holds_i,holds_ii\n";
  for (const auto& x : r.runs)
    out += std::to_string(x.seed_index) + "," + csv_num(x.spec.epsilon) + "," + to_string(x.spec.mode) + "," +
           to_string(x.spec.direction) + "," + csv_num(x.tau) + "," + csv_num(x.type_i) + "," + csv_num(x.type_ii) +
           "," + csv_num(x.type_i_shift) + "," + csv_num(x.type_ii_shift) + "," + csv_num(x.inflation) + "," +
           csv_num(x.bound_i.value) + "," + csv_num(x.bound_i.eps) + "," + csv_num(x.bound_ii.value) + "," +
           csv_num(x.bound_ii.eps) + "," + csv_num(x.max_cost) + "," + (x.holds_i ? "1" : "0") + "," +
           (x.holds_ii ? "1" : "0") + "\n";
  return out;
}

inline nlohmann::json to_json(const SeparabilityReport& r) {
  const auto& c = r.config;
  // wall time is reported separately so the report itself stays deterministic
  return {{"experiment", "separability"},
          {"config",
           {{"seeds", c.seeds}, {"seed", c.seed}, {"n_train", c.n_train}, {"n_test", c.n_test}, {"mix", c.mix},
            {"min_len", c.min_len}, {"max_len", c.max_len}, {"train", to_json(c.train)},
            {"observer",
             {{"layers", c.observer.layers}, {"dim", c.observer.dim}, {"vocab", c.observer.vocab},
              {"mlp_mult", c.observer.mlp_mult}, {"seed", c.observer.seed}}}}},
          {"learned", {{"auroc", r.auroc_learned}, {"proto_gap", r.gap_learned}, {"overlap", r.overlap_learned}}},
          {"frozen", {{"auroc", r.auroc_frozen}, {"proto_gap", r.gap_frozen}, {"overlap", r.overlap_frozen}}},
          {"vacuous", r.vacuous},
          {"dominates", r.dominates}};
}

inline std::string to_csv(const SeparabilityReport& r) {
  std::string out = "seed_index,steering,auroc,overlap,proto_gap,v_norm\n";
  for (const auto& x : r.runs)
    out += std::to_string(x.seed_index) + "," + (x.learned ? "learned" : "frozen") + "," + csv_num(x.auroc) + "," +
           csv_num(x.overlap) + "," + csv_num(x.proto_gap) + "," + csv_num(x.v_norm) + "\n";
  return out;
}

/// Creates <out>/<experiment>-<UTC timestamp>[-k] and writes report.json and runs.csv into it.
inline std::filesystem::path write_results(const std::filesystem::path& out, const std::string& experiment,
                                           const nlohmann::json& report, const std::string& csv) {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream stamp;
  stamp << std::put_time(&tm, "%Y%m%dT%H%M%SZ");
  std::filesystem::create_directories(out);
  auto dir = out / (experiment + "-" + stamp.str());
  for (int k = 1; std::filesystem::exists(dir); ++k) dir = out / (experiment + "-" + stamp.str() + "-" + std::to_string(k));
  std::filesystem::create_directory(dir);
  write_file_atomic(dir / "report.json", report.dump(2) + "\n");
  write_file_atomic(dir / "runs.csv", csv);
  return dir;
}

} // namespace s2d::simlab
