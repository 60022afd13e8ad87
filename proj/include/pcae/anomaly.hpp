#pragma once

// Fracture detection as anomaly detection: per-cloud scores, F1-optimal
// thresholds, P/R/F1 and ROC AUC.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "pcae/errors.hpp"
#include "pcae/geometry.hpp"
#include "pcae/models.hpp"
#include "pcae/random.hpp"

namespace pcae::anomaly {

/// Fractured (anomalous) is the positive class.
enum class Direction { HigherIsAnomalous, LowerIsAnomalous };

struct Scores {
  double recon_error = 0.0;                    ///< per-point-mean Chamfer
  std::optional<double> log_likelihood;        ///< per-point mean, variance variants only
  std::vector<double> point_error;             ///< squared distance of each input point to its match
  std::vector<double> point_log_prob;          ///< empty for variants without a variance head
  ReconDistribution recon;
};

/// Reconstructs `x` (posterior mean for variational models) and scores it.
inline Scores score(PointCloudAutoencoder& model, const PointCloud& x) {
  if (x.size() != model.config().num_points)
    throw DimensionError("score: cloud has " + std::to_string(x.size()) + " points, model expects " +
                         std::to_string(model.config().num_points));
  Scores s;
  s.recon = model.reconstruct(x);
  s.recon_error = chamfer_distance(x, s.recon.mean, ChamferReduction::PerPointMean);
  if (has_variance_head(model.variant())) {
    auto ll = recon_log_likelihood(x, s.recon);
    s.log_likelihood = ll.per_point_mean;
    s.point_log_prob = ll.per_point;
    s.point_error = ll.sq_error;
  } else {
    const auto m = match_all(x.points(), s.recon.mean.points());
    for (const auto& nb : m) s.point_error.push_back(nb.sq_dist);
  }
  return s;
}

struct Metrics {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  double precision = 0.0, recall = 0.0, f1 = 0.0;
  bool zero_denominator = false;  ///< set when any of P, R, F1 fell back to 0
};

inline bool is_flagged(double score, double threshold, Direction dir) {
  return dir == Direction::HigherIsAnomalous ? score > threshold : score < threshold;
}

namespace detail {

inline void check_inputs(std::span<const double> scores, std::span<const int> labels, const char* what) {
  if (scores.empty()) throw UsageError(std::string(what) + ": empty input");
  if (scores.size() != labels.size()) throw DimensionError(std::string(what) + ": scores and labels differ in length");
  for (int l : labels)
    if (l != 0 && l != 1) throw DomainError(std::string(what) + ": labels must be 0 (healthy) or 1 (fractured)");
}

inline void require_both_classes(std::span<const int> labels, const char* what) {
  const auto pos = std::count(labels.begin(), labels.end(), 1);
  if (pos == 0 || pos == static_cast<std::ptrdiff_t>(labels.size()))
    throw UsageError(std::string(what) + ": both labels must be present");
}

}  // namespace detail

/// Confusion-matrix metrics of the rule "flag when score is beyond threshold".
inline Metrics metrics(std::span<const double> scores, std::span<const int> labels, double threshold,
                       Direction dir = Direction::HigherIsAnomalous) {
  detail::check_inputs(scores, labels, "metrics");
  Metrics m;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool flagged = is_flagged(scores[i], threshold, dir);
    if (labels[i] == 1)
      (flagged ? m.tp : m.fn)++;
    else
      (flagged ? m.fp : m.tn)++;
  }
  auto ratio = [&](std::size_t num, std::size_t den) {
    if (den == 0) {
      m.zero_denominator = true;
      return 0.0;
    }
    return static_cast<double>(num) / static_cast<double>(den);
  };
  m.precision = ratio(m.tp, m.tp + m.fp);
  m.recall = ratio(m.tp, m.tp + m.fn);
  // 2PR/(P+R) written in counts so identical confusion matrices give identical F1.
  m.f1 = ratio(2 * m.tp, 2 * m.tp + m.fp + m.fn);
  return m;
}

/// Area under the ROC curve with half credit for tied scores, computed
/// exactly as (#concordant pairs + #tied pairs / 2) / (#pos * #neg).
inline double roc_auc(std::span<const double> scores, std::span<const int> labels,
                      Direction dir = Direction::HigherIsAnomalous) {
  detail::check_inputs(scores, labels, "roc_auc");
  detail::require_both_classes(labels, "roc_auc");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  auto key = [&](std::size_t i) { return dir == Direction::HigherIsAnomalous ? scores[i] : -scores[i]; };
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return key(a) < key(b); });
  // Sweep ascending; each group of equal scores adds a trapezoid of its
  // positives against negatives seen below it plus half its own negatives.
  // Twice the area is kept in integers to stay exact.
  std::uint64_t twice_area = 0, neg_below = 0, pos = 0, neg = 0;
  for (std::size_t g = 0; g < idx.size();) {
    std::size_t e = g;
    std::uint64_t gp = 0, gn = 0;
    while (e < idx.size() && key(idx[e]) == key(idx[g])) {
      (labels[idx[e]] == 1 ? gp : gn)++;
      ++e;
    }
    twice_area += gp * (2 * neg_below + gn);
    neg_below += gn;
    pos += gp;
    neg += gn;
    g = e;
  }
  return static_cast<double>(twice_area) / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
}

/// Reference O(n^2) Mann-Whitney count with half credit for ties.
inline double pairwise_auc(std::span<const double> scores, std::span<const int> labels,
                           Direction dir = Direction::HigherIsAnomalous) {
  detail::check_inputs(scores, labels, "pairwise_auc");
  detail::require_both_classes(labels, "pairwise_auc");
  std::uint64_t twice = 0, pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      ++pairs;
      const double p = dir == Direction::HigherIsAnomalous ? scores[i] : -scores[i];
      const double n = dir == Direction::HigherIsAnomalous ? scores[j] : -scores[j];
      twice += p > n ? 2 : (p == n ? 1 : 0);
    }
  }
  return static_cast<double>(twice) / (2.0 * static_cast<double>(pairs));
}

struct ThresholdFit {
  double threshold = 0.0;
  Metrics metrics;
  bool degenerate = false;  ///< all scores identical; threshold is that value
};

/// Chooses the threshold that maximises F1 on labelled scores. Candidates are
/// the midpoints between consecutive distinct scores plus one value beyond the
/// least anomalous score (flag everything). Ties go to higher recall, then to
/// the candidate found first in the sweep.
inline ThresholdFit fit_threshold(std::span<const double> scores, std::span<const int> labels,
                                  Direction dir = Direction::HigherIsAnomalous) {
  detail::check_inputs(scores, labels, "fit_threshold");
  detail::require_both_classes(labels, "fit_threshold");
  std::vector<double> u(scores.begin(), scores.end());
  std::sort(u.begin(), u.end());
  u.erase(std::unique(u.begin(), u.end()), u.end());
  ThresholdFit best;
  if (u.size() == 1) {
    best.threshold = u.front();
    best.metrics = metrics(scores, labels, best.threshold, dir);
    best.degenerate = true;
    return best;
  }
  std::vector<double> candidates;
  const double span = u.back() - u.front();
  if (dir == Direction::HigherIsAnomalous)
    candidates.push_back(u.front() - std::max(1.0, std::abs(u.front())) * 1e-9 - span * 1e-9);
  for (std::size_t i = 0; i + 1 < u.size(); ++i) candidates.push_back(u[i] + (u[i + 1] - u[i]) / 2.0);
  if (dir == Direction::LowerIsAnomalous)
    candidates.push_back(u.back() + std::max(1.0, std::abs(u.back())) * 1e-9 + span * 1e-9);
  bool have = false;
  for (double t : candidates) {
    const Metrics m = metrics(scores, labels, t, dir);
    if (!have || m.f1 > best.metrics.f1 || (m.f1 == best.metrics.f1 && m.recall > best.metrics.recall)) {
      best.threshold = t;
      best.metrics = m;
      have = true;
    }
  }
  return best;
}

struct Thresholds {
  ThresholdFit rec;               ///< T_rec on reconstruction error
  std::optional<ThresholdFit> ll; ///< T_l on log-likelihood, variance variants only
};

/// Fits T_rec (flag error above) and, when log-likelihoods are given, T_l (flag likelihood below).
inline Thresholds fit_thresholds(std::span<const double> recon_error, std::span<const double> log_likelihood,
                                 std::span<const int> labels) {
  Thresholds t;
  t.rec = fit_threshold(recon_error, labels, Direction::HigherIsAnomalous);
  if (!log_likelihood.empty()) t.ll = fit_threshold(log_likelihood, labels, Direction::LowerIsAnomalous);
  return t;
}

struct ReportRow {
  std::string id;
  int label = 0;
  double recon_error = 0.0;
  std::optional<double> log_likelihood;
  std::optional<bool> verdict_rec;
  std::optional<bool> verdict_ll;
};

struct AnomalyReport {
  std::vector<ReportRow> rows;
  std::optional<double> t_rec;
  std::optional<double> t_l;

  /// Applies thresholds; verdict is true for "fractured".
  void apply(const Thresholds& t) {
    t_rec = t.rec.threshold;
    if (t.ll) t_l = t.ll->threshold;
    for (auto& r : rows) {
      r.verdict_rec = r.recon_error > *t_rec;
      if (t_l && r.log_likelihood) r.verdict_ll = *r.log_likelihood < *t_l;
    }
  }

  std::vector<double> errors() const {
    std::vector<double> v;
    for (const auto& r : rows) v.push_back(r.recon_error);
    return v;
  }
  std::vector<double> log_likelihoods() const {
    std::vector<double> v;
    for (const auto& r : rows)
      if (r.log_likelihood) v.push_back(*r.log_likelihood);
    return v.size() == rows.size() ? v : std::vector<double>{};
  }
  std::vector<int> labels() const {
    std::vector<int> v;
    for (const auto& r : rows) v.push_back(r.label);
    return v;
  }

  void write_csv(std::ostream& os) const {
    os << "id,label,recon_error,log_likelihood,verdict_rec,verdict_ll\n";
    char buf[64];
    auto num = [&](double v) {
      std::snprintf(buf, sizeof buf, "%.17g", v);
      return std::string(buf);
    };
    auto verdict = [](const std::optional<bool>& v) { return v ? (*v ? "fractured" : "healthy") : ""; };
    for (const auto& r : rows) {
      os << r.id << ',' << (r.label ? "fractured" : "healthy") << ',' << num(r.recon_error) << ','
         << (r.log_likelihood ? num(*r.log_likelihood) : "") << ',' << verdict(r.verdict_rec) << ','
         << verdict(r.verdict_ll) << '\n';
    }
  }
};

/// Seeded k-fold split of [0, n): fold f holds indices whose shuffled rank is f mod k.
inline std::vector<std::vector<std::size_t>> kfold_indices(std::size_t n, std::size_t k, std::uint64_t seed) {
  if (k < 2 || k > n) throw ConfigError("kfold: need 2 <= k <= n");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = make_rng(seed, "kfold");
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> folds(k);
  for (std::size_t r = 0; r < n; ++r) folds[r % k].push_back(order[r]);
  for (auto& f : folds) std::sort(f.begin(), f.end());
  return folds;
}

/// Spearman rank correlation with average ranks for ties.
inline double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw DimensionError("spearman: need two equal-length series");
  auto ranks = [](std::span<const double> v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(), [&](auto i, auto j) { return v[i] < v[j]; });
    std::vector<double> r(v.size());
    for (std::size_t g = 0; g < idx.size();) {
      std::size_t e = g;
      while (e < idx.size() && v[idx[e]] == v[idx[g]]) ++e;
      const double avg = (static_cast<double>(g) + static_cast<double>(e - 1)) / 2.0;
      for (std::size_t k = g; k < e; ++k) r[idx[k]] = avg;
      g = e;
    }
    return r;
  };
  const auto ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

}  // namespace pcae::anomaly
