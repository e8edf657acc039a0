#pragma once

// Phase II: the likelihood-ratio test. Scores are kappa (mu1 - mu0)^T f(x; v);
// the detector flags x as generated when its score reaches the threshold.
// Two calibration rules are provided: a finite-sample Type-I rule on a
// human-only sample, and the Youden-index rule on a labeled sample.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "errors.hpp"
#include "fsutil.hpp"
#include "observer.hpp"
#include "sphere.hpp"

namespace s2d {

/// Decision threshold. A sentinel threshold sits above every calibration
/// score (value = +inf) and never rejects.
struct Threshold {
  double value = 0.0;
  bool sentinel = false;

  static Threshold above_max() { return {std::numeric_limits<double>::infinity(), true}; }
  friend bool operator==(const Threshold&, const Threshold&) = default;
};

/// phi(s) = 1(s >= tau); always 0 for a sentinel.
inline int decide(const Threshold& tau, double score) {
  if (tau.sentinel) return 0;
  return score >= tau.value ? 1 : 0;
}

/// Smallest calibration score s with #{scores >= s} <= floor(alpha n2). When
/// no score qualifies (including floor(alpha n2) = 0, or a tie block larger
/// than the budget at the top) the sentinel is returned. The calibration-set
/// false positive rate is therefore always <= alpha.
inline Threshold calibrate_quantile(std::span<const double> null_scores, double alpha) {
  if (null_scores.empty()) throw DomainError("calibrate_quantile: empty score set");
  if (!(alpha >= 0.0 && alpha < 1.0)) throw DomainError("calibrate_quantile: alpha must lie in [0, 1)");
  std::vector<double> s(null_scores.begin(), null_scores.end());
  for (double x : s)
    if (!std::isfinite(x)) throw DomainError("calibrate_quantile: non-finite score");
  std::sort(s.begin(), s.end(), std::greater<>());
  const auto n = s.size();
  // relative slack so that e.g. 0.29 * 100 counts as 29
  const auto budget = static_cast<std::size_t>(std::floor(alpha * static_cast<double>(n) * (1.0 + 1e-12)));
  std::optional<double> best;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && s[j] == s[i]) ++j; // [i, j) is one tie block; j scores are >= s[i]
    if (j > budget) break;
    best = s[i];
    i = j;
  }
  if (!best) return Threshold::above_max();
  return {*best, false};
}

struct YoudenResult {
  Threshold tau;
  double j = 0.0; ///< TPR + 1 - FPR at tau
  double tpr = 0.0;
  double fpr = 0.0;
};

/// argmax over observed scores of TPR(tau) + 1 - FPR(tau) with the >= rule;
/// ties go to the smallest tau.
inline YoudenResult calibrate_youden(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw DimensionError("calibrate_youden: scores and labels differ in length");
  std::vector<std::pair<double, int>> v;
  v.reserve(scores.size());
  std::int64_t n_pos = 0, n_neg = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw DomainError("calibrate_youden: labels must be 0 or 1");
    if (!std::isfinite(scores[i])) throw DomainError("calibrate_youden: non-finite score");
    v.emplace_back(scores[i], labels[i]);
    (labels[i] == 1 ? n_pos : n_neg) += 1;
  }
  if (n_pos == 0 || n_neg == 0) throw DomainError("calibrate_youden: both classes are required");
  std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  // Compare J exactly through the integer numerator tp * n_neg - fp * n_pos.
  std::int64_t tp = 0, fp = 0;
  std::int64_t best_key = std::numeric_limits<std::int64_t>::min();
  double best_tau = 0.0;
  std::int64_t best_tp = 0, best_fp = 0;
  std::size_t i = 0;
  while (i < v.size()) {
    const double tau = v[i].first;
    while (i < v.size() && v[i].first == tau) {
      (v[i].second == 1 ? tp : fp) += 1;
      ++i;
    }
    const std::int64_t key = tp * n_neg - fp * n_pos;
    if (key >= best_key) { // descending sweep: '>=' keeps the smallest tau among ties
      best_key = key;
      best_tau = tau;
      best_tp = tp;
      best_fp = fp;
    }
  }
  YoudenResult r;
  r.tau = {best_tau, false};
  r.tpr = static_cast<double>(best_tp) / static_cast<double>(n_pos);
  r.fpr = static_cast<double>(best_fp) / static_cast<double>(n_neg);
  r.j = r.tpr + 1.0 - r.fpr;
  return r;
}

/// Deviation bound sqrt(log(2/delta) / (2 n2)) + 1/n2 between the calibrated
/// and population Type-I error, holding with probability >= 1 - delta.
inline double dkw_band(std::size_t n2, double delta) {
  if (n2 < 1) throw DomainError("dkw_band: n2 must be >= 1");
  if (!(delta > 0.0 && delta < 1.0)) throw DomainError("dkw_band: delta must lie in (0, 1)");
  const auto n = static_cast<double>(n2);
  return std::sqrt(std::log(2.0 / delta) / (2.0 * n)) + 1.0 / n;
}

struct CalibrationInfo {
  std::string method = "quantile"; ///< "quantile" or "youden"
  std::size_t n2 = 0;
  std::optional<double> dkw_delta;
  friend bool operator==(const CalibrationInfo&, const CalibrationInfo&) = default;
};

/// The deployable detector: steering vector, prototypes, concentration and threshold.
struct DetectorArtifact {
  SteeringVector v;
  ClassPair pair;
  Threshold tau;
  std::optional<double> alpha; ///< absent in Youden mode
  CalibrationInfo calib;

  int dim() const { return pair.dim(); }
};

inline double score_representation(const DetectorArtifact& a, const UnitVector& f) { return score(f, a.pair); }

/// S(x) = kappa (mu1 - mu0)^T f(x; v).
inline double score_sample(const DetectorArtifact& a, const TokenSeq& x, const Observer& obs,
                           const ExtractionConfig& cfg) {
  require_same_dim(a.dim(), obs.dim(), "score_sample");
  return score(obs.steered_repr(x, a.v, cfg), a.pair);
}

inline int decide(const DetectorArtifact& a, double score) { return decide(a.tau, score); }

// Detector file: {"format":"s2d-detector","version":1,"dim":d,"kappa":..,"v":[..],"mu0":[..],"mu1":[..],
//                 "tau":..|null,"sentinel":bool,"alpha":..|null,"calib":{"method":..,"n2":..,"dkw_delta":..|null}}

inline constexpr const char* kDetectorFormat = "s2d-detector";

namespace detail {
inline nlohmann::json vec_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline Vector json_vec(const nlohmann::json& j, int dim, const char* key) {
  const auto& arr = j.at(key);
  if (!arr.is_array() || static_cast<int>(arr.size()) != dim)
    throw FormatError(std::string("detector: '") + key + "' must be an array of " + std::to_string(dim) + " numbers");
  Vector v(dim);
  for (int i = 0; i < dim; ++i) v[i] = arr[static_cast<std::size_t>(i)].get<double>();
  return v;
}

inline nlohmann::json optional_json(const std::optional<double>& x) {
  return x ? nlohmann::json(*x) : nlohmann::json(nullptr);
}
} // namespace detail

inline nlohmann::json to_json(const DetectorArtifact& a) {
  return {{"format", kDetectorFormat},
          {"version", 1},
          {"dim", a.dim()},
          {"kappa", a.pair.kappa},
          {"v", detail::vec_json(a.v)},
          {"mu0", detail::vec_json(a.pair.mu0.coords())},
          {"mu1", detail::vec_json(a.pair.mu1.coords())},
          {"tau", a.tau.sentinel ? nlohmann::json(nullptr) : nlohmann::json(a.tau.value)},
          {"sentinel", a.tau.sentinel},
          {"alpha", detail::optional_json(a.alpha)},
          {"calib",
           {{"method", a.calib.method}, {"n2", a.calib.n2}, {"dkw_delta", detail::optional_json(a.calib.dkw_delta)}}}};
}

inline DetectorArtifact detector_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != kDetectorFormat) throw FormatError("detector: wrong format tag");
    if (j.at("version").get<int>() != 1) throw FormatError("detector: unsupported version");
    const int d = j.at("dim").get<int>();
    if (d < 2) throw FormatError("detector: dim must be >= 2");
    const bool sentinel = j.at("sentinel").get<bool>();
    Threshold tau = Threshold::above_max();
    if (!sentinel) {
      if (j.at("tau").is_null()) throw FormatError("detector: tau is null but sentinel is false");
      tau = {j.at("tau").get<double>(), false};
      if (!std::isfinite(tau.value)) throw FormatError("detector: tau must be finite");
    }
    const auto& c = j.at("calib");
    CalibrationInfo calib;
    calib.method = c.at("method").get<std::string>();
    if (calib.method != "quantile" && calib.method != "youden")
      throw FormatError("detector: calib.method must be 'quantile' or 'youden'");
    calib.n2 = c.at("n2").get<std::size_t>();
    if (!c.at("dkw_delta").is_null()) calib.dkw_delta = c.at("dkw_delta").get<double>();
    std::optional<double> alpha;
    if (!j.at("alpha").is_null()) alpha = j.at("alpha").get<double>();
    return DetectorArtifact{
        detail::json_vec(j, d, "v"),
        ClassPair(UnitVector::from_normalized(detail::json_vec(j, d, "mu0")),
                  UnitVector::from_normalized(detail::json_vec(j, d, "mu1")), j.at("kappa").get<double>()),
        tau, alpha, calib};
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("detector: ") + e.what());
  }
}

inline void write_detector(const DetectorArtifact& a, const std::filesystem::path& path) {
  write_file_atomic(path, to_json(a).dump(2) + "\n");
}

inline DetectorArtifact read_detector(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return detector_from_json(j);
}

} // namespace s2d
