#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "pcae/geometry.hpp"
#include "pcae/tensor.hpp"

namespace testutil {

using pcae::Point3;
using pcae::PointCloud;
using pcae::Tensor;

inline Tensor random_tensor(pcae::Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = true) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(pcae::shape_numel(shape));
  for (auto& x : v) x = d(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

inline PointCloud random_cloud(std::size_t n, std::mt19937_64& rng, double scale = 1.0) {
  std::uniform_real_distribution<double> d(-scale, scale);
  std::vector<Point3> pts(n);
  for (auto& p : pts) p = {d(rng), d(rng), d(rng)};
  return PointCloud(std::move(pts));
}

/// Central differences of f with respect to every entry of t (values restored afterwards).
inline std::vector<double> numeric_grad(Tensor t, const std::function<double()>& f, double h = 1e-5) {
  pcae::NoGradGuard guard;
  auto v = t.mutable_values();
  std::vector<double> g(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double orig = v[i];
    v[i] = orig + h;
    const double up = f();
    v[i] = orig - h;
    const double down = f();
    v[i] = orig;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

/// max |a - n| / max(max |n|, floor)
inline double rel_error(std::span<const double> analytic, const std::vector<double>& numeric, double floor = 1e-8) {
  double diff = 0.0, scale = floor;
  for (std::size_t i = 0; i < numeric.size(); ++i) {
    const double a = i < analytic.size() ? analytic[i] : 0.0;
    diff = std::max(diff, std::abs(a - numeric[i]));
    scale = std::max(scale, std::abs(numeric[i]));
  }
  return diff / scale;
}

/// Runs backward on loss() and compares every input gradient with central
/// differences; error is max |a - n| over all entries / max |n| over all entries.
inline double max_grad_error(const std::function<Tensor()>& loss, std::vector<Tensor> inputs) {
  for (auto& t : inputs) t.zero_grad();
  pcae::backward(loss());
  std::vector<double> analytic, numeric;
  for (auto& t : inputs) {
    std::vector<double> a(t.grad().begin(), t.grad().end());
    a.resize(t.numel(), 0.0);
    auto n = numeric_grad(t, [&] { return loss().item(); });
    analytic.insert(analytic.end(), a.begin(), a.end());
    numeric.insert(numeric.end(), n.begin(), n.end());
  }
  return rel_error(analytic, numeric);
}

inline PointCloud permuted(const PointCloud& x, std::mt19937_64& rng) {
  std::vector<Point3> pts(x.begin(), x.end());
  std::shuffle(pts.begin(), pts.end(), rng);
  return PointCloud(std::move(pts));
}

}  // namespace testutil
