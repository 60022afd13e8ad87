#pragma once

// Central finite-difference checks of reverse-mode gradients.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "pcae/geometry.hpp"
#include "pcae/models.hpp"
#include "pcae/random.hpp"
#include "pcae/tensor.hpp"

namespace pcae {

struct GradCheckResult {
  std::string name;
  std::size_t entries = 0;     ///< number of scalar inputs perturbed
  double max_abs_error = 0.0;
  double max_rel_error = 0.0;  ///< max |analytic - numeric| / max |numeric| over all entries
  std::string worst_input;     ///< index of the input tensor holding the largest deviation
  bool passed = false;
};

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  double scale_floor = 1e-8;  ///< lower bound on the normaliser
};

/// Compares backward() of `loss` (a scalar-valued closure over `inputs`) with
/// central differences on every entry of every input tensor.
inline GradCheckResult check_gradients(const std::string& name, const std::function<Tensor()>& loss,
                                       std::vector<Tensor> inputs, const GradCheckOptions& opt = {}) {
  GradCheckResult r;
  r.name = name;
  for (auto& t : inputs) t.zero_grad();
  backward(loss());
  // Infinity-norm relative error: entries whose exact gradient is zero (a bias
  // feeding a train-mode batch norm) would make an elementwise ratio meaningless.
  double max_num = opt.scale_floor;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& t = inputs[k];
    std::vector<double> analytic(t.grad().begin(), t.grad().end());
    if (analytic.size() != t.numel()) analytic.assign(t.numel(), 0.0);
    NoGradGuard no_grad;
    auto v = t.mutable_values();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double orig = v[i];
      v[i] = orig + opt.step;
      const double up = loss().item();
      v[i] = orig - opt.step;
      const double down = loss().item();
      v[i] = orig;
      const double numeric = (up - down) / (2.0 * opt.step);
      max_num = std::max(max_num, std::abs(numeric));
      const double diff = std::abs(numeric - analytic[i]);
      if (diff > r.max_abs_error) {
        r.max_abs_error = diff;
        r.worst_input = std::to_string(k);
      }
    }
    r.entries += v.size();
  }
  r.max_rel_error = r.max_abs_error / max_num;
  r.passed = r.max_rel_error < opt.tolerance;
  return r;
}

namespace detail {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = d(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

/// Weighted sum so every output entry gets a distinct upstream gradient.
inline Tensor probe(const Tensor& y, const Tensor& weights) { return sum(mul(y, weights)); }

}  // namespace detail

/// Runs every differentiable operation of the library, plus the full
/// sigma-VAE objective on a 64-point model, through check_gradients.
inline std::vector<GradCheckResult> run_gradient_suite(std::uint64_t seed = 1, const GradCheckOptions& opt = {},
                                                       bool include_full_model = true) {
  std::vector<GradCheckResult> out;
  Rng rng = make_rng(seed, "gradcheck");
  using detail::probe;
  using detail::random_tensor;

  {
    Tensor a = random_tensor({4, 5}, rng), b = random_tensor({5, 3}, rng), w = random_tensor({4, 3}, rng);
    w = w.detach();
    out.push_back(check_gradients("matmul", [=] { return probe(matmul(a, b), w); }, {a, b}, opt));
  }
  {
    Tensor x = random_tensor({6, 4}, rng, -2.0, 2.0), g = random_tensor({4}, rng, 0.5, 1.5),
           bt = random_tensor({4}, rng), w = random_tensor({6, 4}, rng).detach();
    auto stats = std::make_shared<BatchNormStats>(4);
    out.push_back(check_gradients(
        "batch_norm", [=] { return probe(batch_norm(x, g, bt, *stats, Mode::Train), w); }, {x, g, bt}, opt));
    out.push_back(check_gradients(
        "batch_norm (eval)", [=] { return probe(batch_norm(x, g, bt, *stats, Mode::Eval), w); }, {x, g, bt}, opt));
  }
  {
    Tensor x = random_tensor({2, 2, 3, 4}, rng), k = random_tensor({2, 2, 4, 3}, rng), bias = random_tensor({3}, rng),
           w = random_tensor({2, 4, 6, 3}, rng).detach();
    out.push_back(check_gradients(
        "transposed_conv2d", [=] { return probe(transposed_conv2d(x, k, bias), w); }, {x, k, bias}, opt));
  }
  {
    Tensor x = random_tensor({12, 5}, rng), w = random_tensor({3, 5}, rng).detach();
    out.push_back(check_gradients("max_pool_points", [=] { return probe(max_pool_points(x, 3), w); }, {x}, opt));
  }
  {
    Tensor x = random_tensor({5, 3}, rng, -4.0, 4.0), w = random_tensor({5, 3}, rng).detach();
    out.push_back(check_gradients("softplus_eps", [=] { return probe(softplus_eps(x, 1e-6), w); }, {x}, opt));
  }
  {
    Tensor x = random_tensor({6, 3}, rng), w = random_tensor({6, 3}, rng).detach();
    out.push_back(check_gradients("leaky_relu", [=] { return probe(leaky_relu(x, 0.2), w); }, {x}, opt));
  }
  {
    Tensor x = random_tensor({2 * 9, 3}, rng), y = random_tensor({2 * 7, 3}, rng);
    out.push_back(check_gradients("chamfer_distance", [=] { return chamfer_distance(x, y, 2); }, {x, y}, opt));
    Tensor v = random_tensor({2 * 7, 3}, rng, 0.2, 2.0);
    out.push_back(check_gradients(
        "sigma_chamfer (euclidean matching)", [=] { return sigma_chamfer(x, y, v, 2, false); }, {x, y, v}, opt));
    out.push_back(check_gradients(
        "sigma_chamfer (weighted matching)", [=] { return sigma_chamfer(x, y, v, 2, true); }, {x, y, v}, opt));
  }
  {
    Tensor mu = random_tensor({3, 4}, rng), lv = random_tensor({3, 4}, rng);
    out.push_back(check_gradients("kl_divergence", [=] { return kl_divergence(mu, lv); }, {mu, lv}, opt));
    const std::uint64_t s = derive_seed(seed, "reparameterize");
    Tensor w = random_tensor({3, 4}, rng).detach();
    out.push_back(check_gradients(
        "reparameterize",
        [=] {
          Rng r(s);
          return probe(reparameterize(mu, lv, r), w);
        },
        {mu, lv}, opt));
  }
  if (include_full_model) {
    ModelConfig cfg = ModelConfig::reduced();
    auto model = std::make_shared<PointCloudAutoencoder>(Variant::SigmaVAE, cfg, derive_seed(seed, "init"));
    model->set_mode(Mode::Train);
    const std::size_t batch = 2;
    Tensor x = random_tensor({batch * cfg.num_points, 3}, rng).detach();
    const std::uint64_t s = derive_seed(seed, "sampling");
    auto loss = [=] {
      Rng r(s);
      auto f = model->forward(x, batch, &r);
      return model_loss(Variant::SigmaVAE, x, f.decoded, &f.encoded, 0.1, batch).total;
    };
    out.push_back(check_gradients("sigma-vae loss (all parameters, 64-point model)", loss, model->parameters(), opt));
  }
  return out;
}

}  // namespace pcae
