#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "pcae/errors.hpp"
#include "pcae/random.hpp"
#include "pcae/tensor.hpp"

namespace pcae {

using Point3 = std::array<double, 3>;
using Mat3 = std::array<std::array<double, 3>, 3>;

/// Unordered set of 3-D points. Consumers must not depend on point order.
class PointCloud {
 public:
  PointCloud() = default;
  explicit PointCloud(std::vector<Point3> points) : points_(std::move(points)) {
    for (const auto& p : points_)
      for (double c : p)
        if (!std::isfinite(c)) throw DomainError("point cloud contains a non-finite coordinate");
  }

  /// Reads rows of an [N x 3] tensor.
  static PointCloud from_tensor(const Tensor& t) {
    if (t.rank() != 2 || t.dim(1) != 3) throw DimensionError("expected [N x 3] tensor, got " + shape_string(t.shape()));
    std::vector<Point3> pts(t.dim(0));
    auto v = t.values();
    for (std::size_t i = 0; i < pts.size(); ++i) pts[i] = {v[3 * i], v[3 * i + 1], v[3 * i + 2]};
    return PointCloud(std::move(pts));
  }

  Tensor to_tensor(bool requires_grad = false) const {
    if (points_.empty()) throw UsageError("cannot convert an empty point cloud to a tensor");
    std::vector<double> v(points_.size() * 3);
    for (std::size_t i = 0; i < points_.size(); ++i)
      for (std::size_t c = 0; c < 3; ++c) v[3 * i + c] = points_[i][c];
    return Tensor({points_.size(), 3}, std::move(v), requires_grad);
  }

  std::size_t size() const { return points_.size(); }
  bool empty() const { return points_.empty(); }
  const Point3& operator[](std::size_t i) const { return points_[i]; }
  Point3& operator[](std::size_t i) { return points_[i]; }
  std::span<const Point3> points() const { return points_; }
  auto begin() const { return points_.begin(); }
  auto end() const { return points_.end(); }

  friend bool operator==(const PointCloud&, const PointCloud&) = default;

 private:
  std::vector<Point3> points_;
};

/// Predicted mean cloud plus per-point, per-coordinate variance.
struct ReconDistribution {
  PointCloud mean;
  std::vector<Point3> var;

  void validate() const {
    if (var.size() != mean.size())
      throw DimensionError("recon variance has " + std::to_string(var.size()) + " rows for " +
                           std::to_string(mean.size()) + " points");
    for (const auto& v : var)
      for (double c : v)
        if (!(c > 0.0)) throw DomainError("recon variance must be strictly positive");
  }

  static ReconDistribution unit_variance(PointCloud mean) {
    std::vector<Point3> var(mean.size(), Point3{1.0, 1.0, 1.0});
    return {std::move(mean), std::move(var)};
  }
};

inline std::vector<Point3> points_from_tensor(const Tensor& t, std::size_t row_begin, std::size_t rows) {
  std::vector<Point3> pts(rows);
  auto v = t.values();
  for (std::size_t i = 0; i < rows; ++i) {
    const std::size_t r = row_begin + i;
    pts[i] = {v[3 * r], v[3 * r + 1], v[3 * r + 2]};
  }
  return pts;
}

inline double squared_distance(const Point3& a, const Point3& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

// ---------------------------------------------------------------------------
// Nearest neighbour

struct Neighbor {
  std::size_t index = 0;
  double sq_dist = 0.0;

  friend bool operator==(const Neighbor&, const Neighbor&) = default;
};

namespace detail {
inline bool closer(double d, std::size_t i, const Neighbor& best) {
  return d < best.sq_dist || (d == best.sq_dist && i < best.index);
}
}  // namespace detail

/// Exhaustive reference search; ties go to the lowest index.
inline Neighbor nearest_neighbor_brute(const Point3& query, std::span<const Point3> target) {
  if (target.empty()) throw UsageError("nearest neighbour search in an empty cloud");
  Neighbor best{0, squared_distance(query, target[0])};
  for (std::size_t i = 1; i < target.size(); ++i) {
    const double d = squared_distance(query, target[i]);
    if (detail::closer(d, i, best)) best = {i, d};
  }
  return best;
}

/// Static 3-d tree. Returns exactly the same (index, distance) as the brute-force
/// search, including its lowest-index tie rule.
class KdTree {
 public:
  explicit KdTree(std::span<const Point3> points) : points_(points.begin(), points.end()) {
    if (points_.empty()) throw UsageError("cannot build a k-d tree over an empty cloud");
    order_.resize(points_.size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    nodes_.reserve(2 * points_.size() / kLeafSize + 2);
    build(0, points_.size());
  }

  Neighbor nearest(const Point3& query) const {
    Neighbor best{order_[0], squared_distance(query, points_[order_[0]])};
    search(0, query, best);
    return best;
  }

  std::size_t size() const { return points_.size(); }

 private:
  static constexpr std::size_t kLeafSize = 8;

  struct Node {
    std::size_t begin = 0, end = 0;
    double split = 0.0;
    int axis = -1;  // -1 marks a leaf
    std::size_t left = 0, right = 0;
  };

  std::size_t build(std::size_t begin, std::size_t end) {
    const std::size_t id = nodes_.size();
    nodes_.push_back({begin, end});
    if (end - begin <= kLeafSize) return id;
    Point3 lo = points_[order_[begin]], hi = lo;
    for (std::size_t i = begin; i < end; ++i)
      for (int c = 0; c < 3; ++c) {
        lo[c] = std::min(lo[c], points_[order_[i]][c]);
        hi[c] = std::max(hi[c], points_[order_[i]][c]);
      }
    int axis = 0;
    for (int c = 1; c < 3; ++c)
      if (hi[c] - lo[c] > hi[axis] - lo[axis]) axis = c;
    const std::size_t mid = begin + (end - begin) / 2;
    auto first = order_.begin() + static_cast<std::ptrdiff_t>(begin);
    std::nth_element(first, order_.begin() + static_cast<std::ptrdiff_t>(mid),
                     order_.begin() + static_cast<std::ptrdiff_t>(end),
                     [&](std::size_t a, std::size_t b) { return points_[a][axis] < points_[b][axis]; });
    const double split = points_[order_[mid]][axis];
    const std::size_t left = build(begin, mid);
    const std::size_t right = build(mid, end);
    nodes_[id].axis = axis;
    nodes_[id].split = split;
    nodes_[id].left = left;
    nodes_[id].right = right;
    return id;
  }

  void search(std::size_t id, const Point3& q, Neighbor& best) const {
    const Node& n = nodes_[id];
    if (n.axis < 0) {
      for (std::size_t i = n.begin; i < n.end; ++i) {
        const std::size_t idx = order_[i];
        const double d = squared_distance(q, points_[idx]);
        if (detail::closer(d, idx, best)) best = {idx, d};
      }
      return;
    }
    const double diff = q[n.axis] - n.split;
    const std::size_t near = diff < 0.0 ? n.left : n.right;
    const std::size_t far = diff < 0.0 ? n.right : n.left;
    search(near, q, best);
    // Equality still descends: an equally distant point may carry a lower index.
    if (diff * diff <= best.sq_dist) search(far, q, best);
  }

  std::vector<Point3> points_;
  std::vector<std::size_t> order_;
  std::vector<Node> nodes_;
};

enum class NnBackend { Brute, KdTree };

inline Neighbor nearest_neighbor(const Point3& query, const PointCloud& target, NnBackend backend = NnBackend::KdTree) {
  if (target.empty()) throw UsageError("nearest neighbour search in an empty cloud");
  if (backend == NnBackend::Brute) return nearest_neighbor_brute(query, target.points());
  return KdTree(target.points()).nearest(query);
}

/// Nearest target point for every query point.
inline std::vector<Neighbor> match_all(std::span<const Point3> queries, std::span<const Point3> targets,
                                       NnBackend backend = NnBackend::KdTree) {
  if (targets.empty()) throw UsageError("nearest neighbour search in an empty cloud");
  std::vector<Neighbor> out(queries.size());
  if (backend == NnBackend::Brute) {
    for (std::size_t i = 0; i < queries.size(); ++i) out[i] = nearest_neighbor_brute(queries[i], targets);
  } else {
    KdTree tree(targets);
    for (std::size_t i = 0; i < queries.size(); ++i) out[i] = tree.nearest(queries[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reconstruction objectives

enum class ChamferReduction {
  Sum,           ///< sum over both directions (the training objective)
  PerPointMean,  ///< mean over X plus mean over Y (reporting, comparable across N)
};

namespace detail {

inline void require_cloud_rows(const Tensor& t, std::size_t batch, const char* what) {
  if (t.rank() != 2 || t.dim(1) != 3)
    throw DimensionError(std::string(what) + ": expected [rows x 3], got " + shape_string(t.shape()));
  if (batch == 0 || t.dim(0) % batch != 0)
    throw DimensionError(std::string(what) + ": rows not divisible by batch size");
}

}  // namespace detail

/// Differentiable Chamfer distance summed over `batch` cloud pairs stacked
/// row-wise: x[batch*N x 3], y[batch*M x 3]. Gradients flow to both inputs
/// through the matched pairs.
inline Tensor chamfer_distance(const Tensor& x, const Tensor& y, std::size_t batch = 1) {
  detail::require_cloud_rows(x, batch, "chamfer_distance");
  detail::require_cloud_rows(y, batch, "chamfer_distance");
  const std::size_t n = x.dim(0) / batch, m = y.dim(0) / batch;
  // matches_xy[i] = row of y matched to row i of x (global indices), and vice versa.
  std::vector<std::size_t> match_xy(x.dim(0)), match_yx(y.dim(0));
  double s1 = 0.0, s2 = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    auto xp = points_from_tensor(x, b * n, n);
    auto yp = points_from_tensor(y, b * m, m);
    auto xy = match_all(xp, yp);
    auto yx = match_all(yp, xp);
    for (std::size_t i = 0; i < n; ++i) {
      match_xy[b * n + i] = b * m + xy[i].index;
      s1 += xy[i].sq_dist;
    }
    for (std::size_t j = 0; j < m; ++j) {
      match_yx[b * m + j] = b * n + yx[j].index;
      s2 += yx[j].sq_dist;
    }
  }
  return make_op_result(
      "chamfer_distance", {1}, {s1 + s2}, {x, y},
      [match_xy = std::move(match_xy), match_yx = std::move(match_yx)](detail::Node& self) {
        const double g = self.grad[0];
        const auto& xv = self.inputs[0]->value;
        const auto& yv = self.inputs[1]->value;
        const bool gx = detail::wants_grad(self, 0), gy = detail::wants_grad(self, 1);
        std::vector<double>* dx = gx ? &detail::grad_of(self, 0) : nullptr;
        std::vector<double>* dy = gy ? &detail::grad_of(self, 1) : nullptr;
        auto pair = [&](std::size_t xi, std::size_t yj) {
          for (std::size_t c = 0; c < 3; ++c) {
            const double d = 2.0 * (xv[3 * xi + c] - yv[3 * yj + c]) * g;
            if (dx) (*dx)[3 * xi + c] += d;
            if (dy) (*dy)[3 * yj + c] -= d;
          }
        };
        for (std::size_t i = 0; i < match_xy.size(); ++i) pair(i, match_xy[i]);
        for (std::size_t j = 0; j < match_yx.size(); ++j) pair(match_yx[j], j);
      });
}

inline double chamfer_distance(const PointCloud& x, const PointCloud& y,
                               ChamferReduction reduction = ChamferReduction::Sum) {
  if (x.empty() || y.empty()) throw UsageError("chamfer_distance of an empty cloud");
  auto xy = match_all(x.points(), y.points());
  auto yx = match_all(y.points(), x.points());
  double s1 = 0.0, s2 = 0.0;
  for (const auto& nb : xy) s1 += nb.sq_dist;
  for (const auto& nb : yx) s2 += nb.sq_dist;
  if (reduction == ChamferReduction::PerPointMean)
    return s1 / static_cast<double>(x.size()) + s2 / static_cast<double>(y.size());
  return s1 + s2;
}

namespace detail {

inline double weighted_sq(const double* p, const double* q, const double* var) {
  double s = 0.0;
  for (std::size_t c = 0; c < 3; ++c) {
    const double d = p[c] - q[c];
    s += d * d / var[c];
  }
  return s;
}

}  // namespace detail

/// Variance-modelling Chamfer distance summed over `batch` stacked clouds.
///
/// x is the observed cloud, mean/var the predicted distribution (same row layout).
/// Term 1 visits every observed point p, picks a predicted point p^ and adds
/// sum_c (p_c - p^_c)^2 / var_c(p^). Term 2 visits every predicted point p^, pairs it
/// with its Euclidean-nearest observed point and adds the same weighted distance plus
/// sum_c log var_c(p^). With weighted_matching the term-1 pick minimises the weighted
/// distance itself; otherwise it is the Euclidean nearest neighbour.
inline Tensor sigma_chamfer(const Tensor& x, const Tensor& mean, const Tensor& var, std::size_t batch = 1,
                            bool weighted_matching = false) {
  detail::require_cloud_rows(x, batch, "sigma_chamfer");
  detail::require_cloud_rows(mean, batch, "sigma_chamfer");
  detail::require_same_shape(mean, var, "sigma_chamfer");
  for (double v : var.values())
    if (!(v > 0.0)) throw DomainError("sigma_chamfer: variance must be strictly positive");
  const std::size_t n = x.dim(0) / batch, m = mean.dim(0) / batch;
  const auto xv = x.values();
  const auto mv = mean.values();
  const auto vv = var.values();
  std::vector<std::size_t> match_xy(x.dim(0)), match_yx(mean.dim(0));
  double s1 = 0.0, s2 = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    auto xp = points_from_tensor(x, b * n, n);
    auto yp = points_from_tensor(mean, b * m, m);
    if (weighted_matching) {
      for (std::size_t i = 0; i < n; ++i) {
        const double* p = xv.data() + 3 * (b * n + i);
        std::size_t best = b * m;
        double best_d = detail::weighted_sq(p, mv.data() + 3 * best, vv.data() + 3 * best);
        for (std::size_t j = b * m + 1; j < (b + 1) * m; ++j) {
          const double d = detail::weighted_sq(p, mv.data() + 3 * j, vv.data() + 3 * j);
          if (d < best_d) {
            best_d = d;
            best = j;
          }
        }
        match_xy[b * n + i] = best;
      }
    } else {
      auto xy = match_all(xp, yp);
      for (std::size_t i = 0; i < n; ++i) match_xy[b * n + i] = b * m + xy[i].index;
    }
    auto yx = match_all(yp, xp);
    for (std::size_t j = 0; j < m; ++j) match_yx[b * m + j] = b * n + yx[j].index;
  }
  for (std::size_t i = 0; i < match_xy.size(); ++i) {
    const std::size_t j = match_xy[i];
    s1 += detail::weighted_sq(xv.data() + 3 * i, mv.data() + 3 * j, vv.data() + 3 * j);
  }
  for (std::size_t j = 0; j < match_yx.size(); ++j) {
    const std::size_t i = match_yx[j];
    const double w = detail::weighted_sq(xv.data() + 3 * i, mv.data() + 3 * j, vv.data() + 3 * j);
    const double l = std::log(vv[3 * j]) + std::log(vv[3 * j + 1]) + std::log(vv[3 * j + 2]);
    s2 += w + l;
  }
  return make_op_result(
      "sigma_chamfer", {1}, {s1 + s2}, {x, mean, var},
      [match_xy = std::move(match_xy), match_yx = std::move(match_yx)](detail::Node& self) {
        const double g = self.grad[0];
        const auto& xv = self.inputs[0]->value;
        const auto& mv = self.inputs[1]->value;
        const auto& vv = self.inputs[2]->value;
        std::vector<double>* dx = detail::wants_grad(self, 0) ? &detail::grad_of(self, 0) : nullptr;
        std::vector<double>* dm = detail::wants_grad(self, 1) ? &detail::grad_of(self, 1) : nullptr;
        std::vector<double>* dv = detail::wants_grad(self, 2) ? &detail::grad_of(self, 2) : nullptr;
        auto pair = [&](std::size_t xi, std::size_t yj) {
          for (std::size_t c = 0; c < 3; ++c) {
            const double d = xv[3 * xi + c] - mv[3 * yj + c];
            const double v = vv[3 * yj + c];
            const double dd = 2.0 * d / v * g;
            if (dx) (*dx)[3 * xi + c] += dd;
            if (dm) (*dm)[3 * yj + c] -= dd;
            if (dv) (*dv)[3 * yj + c] -= d * d / (v * v) * g;
          }
        };
        for (std::size_t i = 0; i < match_xy.size(); ++i) pair(i, match_xy[i]);
        for (std::size_t j = 0; j < match_yx.size(); ++j) {
          pair(match_yx[j], j);
          if (dv)
            for (std::size_t c = 0; c < 3; ++c) (*dv)[3 * j + c] += g / vv[3 * j + c];
        }
      });
}

inline double sigma_chamfer(const PointCloud& x, const ReconDistribution& recon, bool weighted_matching = false) {
  if (x.empty() || recon.mean.empty()) throw UsageError("sigma_chamfer of an empty cloud");
  recon.validate();
  NoGradGuard no_grad;
  std::vector<double> var(recon.var.size() * 3);
  for (std::size_t i = 0; i < recon.var.size(); ++i)
    for (std::size_t c = 0; c < 3; ++c) var[3 * i + c] = recon.var[i][c];
  Tensor vt({recon.var.size(), 3}, std::move(var));
  return sigma_chamfer(x.to_tensor(), recon.mean.to_tensor(), vt, 1, weighted_matching).item();
}

struct LogLikelihood {
  double total = 0.0;               ///< sum over observed points
  double per_point_mean = 0.0;      ///< total / N
  std::vector<double> per_point;    ///< log density of each observed point
  std::vector<double> sq_error;     ///< squared distance of each observed point to its match
};

/// Diagonal-Gaussian log density of every observed point under its Euclidean
/// nearest predicted point. Inference-only (not differentiated).
inline LogLikelihood recon_log_likelihood(const PointCloud& x, const ReconDistribution& recon) {
  if (x.empty() || recon.mean.empty()) throw UsageError("recon_log_likelihood of an empty cloud");
  recon.validate();
  constexpr double kLog2Pi = 1.8378770664093454836;  // ln(2*pi)
  auto matches = match_all(x.points(), recon.mean.points());
  LogLikelihood out;
  out.per_point.resize(x.size());
  out.sq_error.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const auto& p = x[i];
    const auto& q = recon.mean[matches[i].index];
    const auto& v = recon.var[matches[i].index];
    double acc = 0.0;
    for (std::size_t c = 0; c < 3; ++c) {
      const double d = p[c] - q[c];
      acc += d * d / v[c] + std::log(v[c]) + kLog2Pi;
    }
    out.per_point[i] = -0.5 * acc;
    out.sq_error[i] = matches[i].sq_dist;
    out.total += out.per_point[i];
  }
  out.per_point_mean = out.total / static_cast<double>(x.size());
  return out;
}

// ---------------------------------------------------------------------------
// Normalisation and augmentation

struct NormalizationRecord {
  Point3 median{};
  double scale = 1.0;  ///< RMS distance from the median before scaling
};

struct Normalized {
  PointCloud cloud;
  NormalizationRecord record;
};

inline double median_of(std::vector<double> v) {
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  const double upper = v[mid];
  if (v.size() % 2 == 1) return upper;
  const double lower = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lower + upper);
}

/// Subtracts the per-coordinate median and scales to unit RMS radius.
inline Normalized normalize(const PointCloud& x) {
  if (x.size() < 4) throw DomainError("normalize needs at least 4 points, got " + std::to_string(x.size()));
  NormalizationRecord rec;
  for (std::size_t c = 0; c < 3; ++c) {
    std::vector<double> coord(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) coord[i] = x[i][c];
    rec.median[c] = median_of(std::move(coord));
  }
  double ss = 0.0;
  for (const auto& p : x) ss += squared_distance(p, rec.median);
  rec.scale = std::sqrt(ss / static_cast<double>(x.size()));
  if (!(rec.scale > 0.0) || !std::isfinite(rec.scale)) throw DomainError("normalize: degenerate cloud with zero scale");
  std::vector<Point3> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t c = 0; c < 3; ++c) out[i][c] = (x[i][c] - rec.median[c]) / rec.scale;
  return {PointCloud(std::move(out)), rec};
}

inline PointCloud denormalize(const PointCloud& x, const NormalizationRecord& rec) {
  std::vector<Point3> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t c = 0; c < 3; ++c) out[i][c] = x[i][c] * rec.scale + rec.median[c];
  return PointCloud(std::move(out));
}

/// R = Rz(gamma) * Ry(beta) * Rx(alpha), angles in radians.
inline Mat3 rotation_matrix(double alpha, double beta, double gamma) {
  const double ca = std::cos(alpha), sa = std::sin(alpha);
  const double cb = std::cos(beta), sb = std::sin(beta);
  const double cg = std::cos(gamma), sg = std::sin(gamma);
  return {{{cg * cb, cg * sb * sa - sg * ca, cg * sb * ca + sg * sa},
           {sg * cb, sg * sb * sa + cg * ca, sg * sb * ca - cg * sa},
           {-sb, cb * sa, cb * ca}}};
}

inline Point3 apply(const Mat3& r, const Point3& p) {
  return {r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2], r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2],
          r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2]};
}

struct AugmentParams {
  double jitter_sigma = 0.005;  // normalised units
  double max_angle_deg = 15.0;
};

/// Random rotation (each Euler angle uniform in +-max_angle_deg) followed by
/// per-coordinate Gaussian jitter clipped at 3 sigma. Deterministic in `seed`.
inline PointCloud augment(const PointCloud& x, std::uint64_t seed, const AugmentParams& params = {}) {
  Rng rng(seed);
  const double max_rad = params.max_angle_deg * std::numbers::pi / 180.0;
  std::uniform_real_distribution<double> angle(-max_rad, max_rad);
  const double a = max_rad > 0.0 ? angle(rng) : 0.0;
  const double b = max_rad > 0.0 ? angle(rng) : 0.0;
  const double g = max_rad > 0.0 ? angle(rng) : 0.0;
  const Mat3 r = rotation_matrix(a, b, g);
  std::normal_distribution<double> noise(0.0, 1.0);
  const double clip = 3.0 * params.jitter_sigma;
  std::vector<Point3> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = apply(r, x[i]);
    if (params.jitter_sigma > 0.0)
      for (auto& c : out[i]) c += std::clamp(params.jitter_sigma * noise(rng), -clip, clip);
  }
  return PointCloud(std::move(out));
}

/// Stacks clouds of equal size into a [sum N x 3] tensor.
inline Tensor stack_clouds(std::span<const PointCloud> clouds, bool requires_grad = false) {
  if (clouds.empty()) throw UsageError("stack_clouds of an empty list");
  const std::size_t n = clouds.front().size();
  std::vector<double> v;
  v.reserve(clouds.size() * n * 3);
  for (const auto& c : clouds) {
    if (c.size() != n) throw DimensionError("stack_clouds: clouds differ in size");
    for (const auto& p : c) v.insert(v.end(), p.begin(), p.end());
  }
  return Tensor({clouds.size() * n, 3}, std::move(v), requires_grad);
}

}  // namespace pcae
