#pragma once

// Detection metrics over score lists: ROC, AUROC, TPR at a fixed FPR,
// empirical error rates and a histogram overlap diagnostic.

#include <algorithm>
#include <cmath>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "detector.hpp"
#include "errors.hpp"

namespace s2d {

struct RocPoint {
  double fpr;
  double tpr;
  friend bool operator==(const RocPoint&, const RocPoint&) = default;
};

/// Points from (0,0) to (1,1), fpr non-decreasing.
struct RocCurve {
  std::vector<RocPoint> points;
};

namespace detail {
inline void require_nonempty(std::span<const double> pos, std::span<const double> neg, const char* what) {
  if (pos.empty() || neg.empty()) throw DomainError(std::string(what) + ": both score lists must be nonempty");
}
} // namespace detail

/// Threshold sweep over the descending union of scores with the >= rule.
/// Tied scores are consumed together, giving one diagonal step.
inline RocCurve roc(std::span<const double> pos, std::span<const double> neg) {
  detail::require_nonempty(pos, neg, "roc");
  std::vector<std::pair<double, int>> all;
  all.reserve(pos.size() + neg.size());
  for (double s : pos) all.emplace_back(s, 1);
  for (double s : neg) all.emplace_back(s, 0);
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  const auto np = static_cast<double>(pos.size());
  const auto nn = static_cast<double>(neg.size());
  RocCurve c;
  c.points.push_back({0.0, 0.0});
  std::size_t tp = 0, fp = 0, i = 0;
  while (i < all.size()) {
    const double s = all[i].first;
    while (i < all.size() && all[i].first == s) {
      (all[i].second == 1 ? tp : fp) += 1;
      ++i;
    }
    c.points.push_back({static_cast<double>(fp) / nn, static_cast<double>(tp) / np});
  }
  return c;
}

/// Trapezoidal area under a curve.
inline double trapezoid_area(const RocCurve& c) {
  double a = 0.0;
  for (std::size_t i = 1; i < c.points.size(); ++i)
    a += (c.points[i].fpr - c.points[i - 1].fpr) * (c.points[i].tpr + c.points[i - 1].tpr) * 0.5;
  return a;
}

/// P(S_pos > S_neg) + 0.5 P(S_pos = S_neg), by midranks.
inline double auroc(std::span<const double> pos, std::span<const double> neg) {
  detail::require_nonempty(pos, neg, "auroc");
  std::vector<std::pair<double, int>> all;
  all.reserve(pos.size() + neg.size());
  for (double s : pos) all.emplace_back(s, 1);
  for (double s : neg) all.emplace_back(s, 0);
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  // Twice the rank sum keeps midranks integral.
  long double rank2_pos = 0.0L;
  std::size_t i = 0;
  while (i < all.size()) {
    std::size_t j = i;
    while (j < all.size() && all[j].first == all[i].first) ++j;
    const long double midrank2 = static_cast<long double>(i + 1 + j); // 2 * mean of ranks i+1..j
    for (std::size_t k = i; k < j; ++k)
      if (all[k].second == 1) rank2_pos += midrank2;
    i = j;
  }
  const auto np = static_cast<long double>(pos.size());
  const auto nn = static_cast<long double>(neg.size());
  const long double u = rank2_pos / 2.0L - np * (np + 1.0L) / 2.0L;
  return static_cast<double>(u / (np * nn));
}

/// TPR at `fpr_target`, interpolating linearly between bracketing points.
/// When the target is attained, the largest TPR at that FPR is returned.
inline double tpr_at_fpr(const RocCurve& c, double fpr_target) {
  if (c.points.empty()) throw DomainError("tpr_at_fpr: empty curve");
  if (!(fpr_target >= 0.0 && fpr_target <= 1.0)) throw DomainError("tpr_at_fpr: target must lie in [0, 1]");
  const auto& p = c.points;
  double best = -1.0;
  for (const auto& q : p)
    if (q.fpr == fpr_target) best = std::max(best, q.tpr);
  if (best >= 0.0) return best;
  for (std::size_t i = 1; i < p.size(); ++i) {
    if (p[i - 1].fpr < fpr_target && fpr_target < p[i].fpr) {
      const double t = (fpr_target - p[i - 1].fpr) / (p[i].fpr - p[i - 1].fpr);
      return p[i - 1].tpr + t * (p[i].tpr - p[i - 1].tpr);
    }
  }
  throw DomainError("tpr_at_fpr: curve does not bracket the target");
}

struct ErrorRates {
  double type_i = 0.0;
  double type_ii = 0.0;
};

inline ErrorRates empirical_errors(const Threshold& tau, std::span<const double> pos, std::span<const double> neg) {
  detail::require_nonempty(pos, neg, "empirical_errors");
  std::size_t fp = 0, fn = 0;
  for (double s : neg) fp += static_cast<std::size_t>(decide(tau, s));
  for (double s : pos) fn += static_cast<std::size_t>(1 - decide(tau, s));
  return {static_cast<double>(fp) / static_cast<double>(neg.size()),
          static_cast<double>(fn) / static_cast<double>(pos.size())};
}

inline ErrorRates empirical_errors(const DetectorArtifact& a, std::span<const double> pos,
                                   std::span<const double> neg) {
  return empirical_errors(a.tau, pos, neg);
}

/// Sum over bins of min(hist_pos, hist_neg), each histogram normalized to
/// sum 1, on equal-width bins spanning the pooled range.
inline double overlap_fraction(std::span<const double> pos, std::span<const double> neg, int bins = 100) {
  detail::require_nonempty(pos, neg, "overlap_fraction");
  if (bins < 2) throw DomainError("overlap_fraction: bins must be >= 2");
  double lo = pos[0], hi = pos[0];
  for (auto list : {pos, neg})
    for (double s : list) {
      lo = std::min(lo, s);
      hi = std::max(hi, s);
    }
  if (!(hi > lo)) return 1.0;
  auto hist = [&](std::span<const double> xs) {
    std::vector<double> h(static_cast<std::size_t>(bins), 0.0);
    for (double s : xs) {
      auto b = static_cast<long>((s - lo) / (hi - lo) * bins);
      b = std::clamp(b, 0L, static_cast<long>(bins) - 1);
      h[static_cast<std::size_t>(b)] += 1.0;
    }
    for (auto& x : h) x /= static_cast<double>(xs.size());
    return h;
  };
  const auto hp = hist(pos), hn = hist(neg);
  double o = 0.0;
  for (int b = 0; b < bins; ++b) o += std::min(hp[static_cast<std::size_t>(b)], hn[static_cast<std::size_t>(b)]);
  return std::min(o, 1.0);
}

struct MetricsReport {
  double auroc = 0.0;
  double tpr_at_1e2 = 0.0;
  double tpr_at_1e4 = 0.0;
  ErrorRates errors;
  double overlap = 0.0;
};

inline MetricsReport evaluate_scores(const Threshold& tau, std::span<const double> pos, std::span<const double> neg) {
  const auto curve = roc(pos, neg);
  return {auroc(pos, neg), tpr_at_fpr(curve, 0.01), tpr_at_fpr(curve, 0.0001), empirical_errors(tau, pos, neg),
          overlap_fraction(pos, neg)};
}

inline nlohmann::json to_json(const MetricsReport& m) {
  return {{"auroc", m.auroc},
          {"tpr_at", {{"0.01", m.tpr_at_1e2}, {"0.0001", m.tpr_at_1e4}}},
          {"type_i", m.errors.type_i},
          {"type_ii", m.errors.type_ii},
          {"overlap", m.overlap}};
}

inline std::string roc_csv(const RocCurve& c) {
  std::ostringstream os;
  os.precision(17);
  os << "fpr,tpr\n";
  for (const auto& p : c.points) os << p.fpr << ',' << p.tpr << '\n';
  return os.str();
}

} // namespace s2d
