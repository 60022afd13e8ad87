#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "pcae/errors.hpp"
#include "pcae/geometry.hpp"
#include "pcae/random.hpp"
#include "pcae/tensor.hpp"

namespace pcae {

enum class Variant { AE, SigmaAE, VAE, SigmaVAE };

constexpr bool has_variance_head(Variant v) { return v == Variant::SigmaAE || v == Variant::SigmaVAE; }
constexpr bool has_latent_gaussian(Variant v) { return v == Variant::VAE || v == Variant::SigmaVAE; }

inline std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::AE: return "ae";
    case Variant::SigmaAE: return "sigma-ae";
    case Variant::VAE: return "vae";
    case Variant::SigmaVAE: return "sigma-vae";
  }
  return "?";
}

inline Variant parse_variant(std::string_view name) {
  for (auto v : {Variant::AE, Variant::SigmaAE, Variant::VAE, Variant::SigmaVAE})
    if (variant_name(v) == name) return v;
  throw UsageError("unknown model variant '" + std::string(name) + "' (expected ae, sigma-ae, vae, sigma-vae)");
}

/// Encoder/decoder layout. The convolutional decoder branch starts from z
/// viewed as a 1x1xlatent_dim map and doubles the side once per entry of
/// conv_channels plus once for the final 3-channel layer, so it yields
/// 4^(conv_channels.size() + 1) points; the dense branch supplies the rest.
struct ModelConfig {
  std::size_t num_points = 2048;
  std::vector<std::size_t> point_widths{64, 128, 1024};
  std::size_t latent_dim = 64;
  std::vector<std::size_t> conv_channels{1024, 512, 256, 128};
  std::vector<std::size_t> dense_widths{256, 512};
  double leaky_slope = 0.2;
  double variance_eps = 1e-6;

  std::size_t conv_side() const { return std::size_t{1} << (conv_channels.size() + 1); }
  std::size_t conv_points() const { return conv_side() * conv_side(); }
  std::size_t dense_points() const { return num_points - conv_points(); }

  void validate() const {
    auto positive = [](const std::vector<std::size_t>& w, const char* name) {
      for (auto x : w)
        if (x == 0) throw ConfigError(std::string(name) + " widths must be positive");
    };
    positive(point_widths, "point_widths");
    positive(conv_channels, "conv_channels");
    positive(dense_widths, "dense_widths");
    if (point_widths.empty()) throw ConfigError("point_widths must not be empty");
    if (latent_dim == 0) throw ConfigError("latent_dim must be positive");
    if (conv_channels.size() > 8) throw ConfigError("too many transposed convolutions");
    if (num_points <= conv_points())
      throw ConfigError("num_points " + std::to_string(num_points) + " leaves no points for the dense branch (conv branch has " +
                        std::to_string(conv_points()) + ")");
    if (!(leaky_slope > 0.0 && leaky_slope < 1.0)) throw ConfigError("leaky_slope must lie in (0, 1)");
    if (!(variance_eps >= 0.0)) throw ConfigError("variance_eps must be non-negative");
  }

  /// 2048 points: 32x32 convolutional grid plus 1024 dense points.
  static ModelConfig full() { return {}; }

  /// 512 points, narrower layers (16x16 grid + 256 dense points).
  static ModelConfig desk() {
    ModelConfig c;
    c.num_points = 512;
    c.point_widths = {32, 64, 256};
    c.latent_dim = 32;
    c.conv_channels = {256, 128, 64};
    c.dense_widths = {128, 256};
    return c;
  }

  /// 64 points, widths divided by 8 (4x4 grid + 48 dense points).
  static ModelConfig reduced() {
    ModelConfig c;
    c.num_points = 64;
    c.point_widths = {8, 16, 128};
    c.latent_dim = 8;
    c.conv_channels = {128};
    c.dense_widths = {32, 64};
    return c;
  }

  static ModelConfig preset(std::string_view name) {
    if (name == "full") return full();
    if (name == "desk") return desk();
    if (name == "reduced") return reduced();
    throw UsageError("unknown model preset '" + std::string(name) + "' (expected full, desk, reduced)");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline std::string join_widths(const std::vector<std::size_t>& w) {
  std::string s;
  for (std::size_t i = 0; i < w.size(); ++i) s += (i ? "," : "") + std::to_string(w[i]);
  return s;
}

inline std::vector<std::size_t> parse_widths(std::string_view s) {
  std::vector<std::size_t> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    auto end = s.find(',', start);
    if (end == std::string_view::npos) end = s.size();
    auto tok = std::string(s.substr(start, end - start));
    if (tok.empty()) throw ConfigError("empty entry in width list '" + std::string(s) + "'");
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(tok, &pos);
    } catch (const std::exception&) {
      throw ConfigError("bad width '" + tok + "'");
    }
    if (pos != tok.size()) throw ConfigError("bad width '" + tok + "'");
    out.push_back(static_cast<std::size_t>(v));
    start = end + 1;
  }
  return out;
}

/// key=value lines, one per field.
inline std::string serialize(const ModelConfig& c) {
  std::ostringstream os;
  os.precision(17);
  os << "num_points=" << c.num_points << '\n'
     << "point_widths=" << join_widths(c.point_widths) << '\n'
     << "latent_dim=" << c.latent_dim << '\n'
     << "conv_channels=" << join_widths(c.conv_channels) << '\n'
     << "dense_widths=" << join_widths(c.dense_widths) << '\n'
     << "leaky_slope=" << c.leaky_slope << '\n'
     << "variance_eps=" << c.variance_eps << '\n';
  return os.str();
}

inline ModelConfig parse_model_config(std::string_view text) {
  ModelConfig c;
  std::istringstream is{std::string(text)};
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("malformed model config line '" + line + "'");
    const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
    try {
      if (key == "num_points") c.num_points = std::stoull(val);
      else if (key == "point_widths") c.point_widths = parse_widths(val);
      else if (key == "latent_dim") c.latent_dim = std::stoull(val);
      else if (key == "conv_channels") c.conv_channels = val.empty() ? std::vector<std::size_t>{} : parse_widths(val);
      else if (key == "dense_widths") c.dense_widths = val.empty() ? std::vector<std::size_t>{} : parse_widths(val);
      else if (key == "leaky_slope") c.leaky_slope = std::stod(val);
      else if (key == "variance_eps") c.variance_eps = std::stod(val);
      else throw ConfigError("unknown model config key '" + key + "'");
    } catch (const std::invalid_argument&) {
      throw ConfigError("bad value for model config key '" + key + "': '" + val + "'");
    } catch (const std::out_of_range&) {
      throw ConfigError("out-of-range value for model config key '" + key + "'");
    }
  }
  c.validate();
  return c;
}

struct LatentCode {
  std::vector<double> z;
};

struct LatentGaussian {
  std::vector<double> mu;
  std::vector<double> log_var;

  std::vector<double> sigma() const {
    std::vector<double> s(log_var.size());
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = std::exp(0.5 * log_var[i]);
    return s;
  }
};

// ---------------------------------------------------------------------------
// Latent-space terms

/// KL(N(mu, exp(log_var)) || N(0, I)) summed over every entry; shapes must match.
inline Tensor kl_divergence(const Tensor& mu, const Tensor& log_var) {
  detail::require_same_shape(mu, log_var, "kl_divergence");
  auto inner = add_scalar(sub(add(square(mu), exp(log_var)), log_var), -1.0);
  return scale(sum(inner), 0.5);
}

inline double kl_divergence(const LatentGaussian& g) {
  if (g.mu.size() != g.log_var.size()) throw DimensionError("LatentGaussian mu/log_var length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < g.mu.size(); ++i)
    s += g.mu[i] * g.mu[i] + std::exp(g.log_var[i]) - g.log_var[i] - 1.0;
  return 0.5 * s;
}

/// z = mu + exp(log_var / 2) * eps with eps ~ N(0, I) drawn from `rng`.
/// Gradients reach mu and log_var; eps is a constant.
inline Tensor reparameterize(const Tensor& mu, const Tensor& log_var, Rng& rng) {
  detail::require_same_shape(mu, log_var, "reparameterize");
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> eps(mu.numel());
  for (auto& e : eps) e = normal(rng);
  Tensor noise(mu.shape(), std::move(eps));
  return add(mu, mul(exp(scale(log_var, 0.5)), noise));
}

inline LatentCode reparameterize(const LatentGaussian& g, std::uint64_t seed) {
  if (g.mu.size() != g.log_var.size()) throw DimensionError("LatentGaussian mu/log_var length mismatch");
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  LatentCode out{std::vector<double>(g.mu.size())};
  for (std::size_t i = 0; i < g.mu.size(); ++i) out.z[i] = g.mu[i] + std::exp(0.5 * g.log_var[i]) * normal(rng);
  return out;
}

// ---------------------------------------------------------------------------
// Layers

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct NamedBuffer {
  std::string name;
  std::vector<double>* values;
};

namespace layers {

inline double he_bound(std::size_t fan_in, double slope) {
  return std::sqrt(6.0 / ((1.0 + slope * slope) * static_cast<double>(fan_in)));
}

inline Tensor uniform_init(Shape shape, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

struct Linear {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out]

  Linear() = default;
  Linear(std::size_t in, std::size_t out, double bound, Rng& rng)
      : weight(uniform_init({in, out}, bound, rng)), bias(Tensor::zeros({out}, true)) {}

  Tensor operator()(const Tensor& x) const { return add_bias(matmul(x, weight), bias); }
};

struct BatchNorm {
  Tensor gamma;
  Tensor beta;
  BatchNormStats stats;

  BatchNorm() = default;
  explicit BatchNorm(std::size_t channels)
      : gamma(Tensor::full({channels}, 1.0, true)), beta(Tensor::zeros({channels}, true)), stats(channels) {}

  Tensor operator()(const Tensor& x, Mode mode) { return batch_norm(x, gamma, beta, stats, mode); }
};

struct UpConv {
  Tensor weight;  // [2 x 2 x in x out]
  Tensor bias;    // [out]

  UpConv() = default;
  UpConv(std::size_t in, std::size_t out, double bound, Rng& rng)
      : weight(uniform_init({2, 2, in, out}, bound, rng)), bias(Tensor::zeros({out}, true)) {}

  Tensor operator()(const Tensor& x) const { return transposed_conv2d(x, weight, bias); }
};

}  // namespace layers

// ---------------------------------------------------------------------------
// Model

/// Batched encoder output; z is set for deterministic variants, mu/log_var for
/// variational ones. All are [batch x latent_dim].
struct EncoderOutput {
  Tensor z;
  Tensor mu;
  Tensor log_var;
};

/// Batched decoder output: [batch*num_points x 3]; var is undefined for
/// variants without a variance head.
struct DecoderOutput {
  Tensor mean;
  Tensor var;
};

struct ForwardOutput {
  EncoderOutput encoded;
  Tensor z;
  DecoderOutput decoded;
};

using Encoding = std::variant<LatentCode, LatentGaussian>;

/// Point-net encoder with a two-branch (transposed-convolution + dense)
/// decoder. Variance variants add a parallel softplus head to each branch;
/// variational variants replace the latent layer with mu / log-variance heads.
class PointCloudAutoencoder {
 public:
  PointCloudAutoencoder(Variant variant, ModelConfig config, std::uint64_t init_seed)
      : variant_(variant), config_(std::move(config)) {
    config_.validate();
    Rng rng(init_seed);
    const double slope = config_.leaky_slope;
    std::size_t in = 3;
    for (auto w : config_.point_widths) {
      point_layers_.emplace_back(in, w, layers::he_bound(in, slope), rng);
      point_norms_.emplace_back(w);
      in = w;
    }
    const double head_bound = std::sqrt(3.0 / static_cast<double>(in));
    if (has_latent_gaussian(variant_)) {
      mu_head_ = layers::Linear(in, config_.latent_dim, head_bound, rng);
      log_var_head_ = layers::Linear(in, config_.latent_dim, 0.1 * head_bound, rng);
    } else {
      z_head_ = layers::Linear(in, config_.latent_dim, head_bound, rng);
    }

    std::size_t ch = config_.latent_dim;
    for (auto c : config_.conv_channels) {
      conv_layers_.emplace_back(ch, c, layers::he_bound(ch, slope), rng);
      conv_norms_.emplace_back(c);
      ch = c;
    }
    conv_out_ = layers::UpConv(ch, 3, std::sqrt(3.0 / static_cast<double>(ch)), rng);
    if (has_variance_head(variant_))
      conv_var_ = layers::UpConv(ch, 3, 0.1 * std::sqrt(3.0 / static_cast<double>(ch)), rng);

    std::size_t width = config_.latent_dim;
    for (auto w : config_.dense_widths) {
      dense_layers_.emplace_back(width, w, layers::he_bound(width, slope), rng);
      dense_norms_.emplace_back(w);
      width = w;
    }
    const std::size_t dense_out = 3 * config_.dense_points();
    dense_out_ = layers::Linear(width, dense_out, std::sqrt(3.0 / static_cast<double>(width)), rng);
    if (has_variance_head(variant_))
      dense_var_ = layers::Linear(width, dense_out, 0.1 * std::sqrt(3.0 / static_cast<double>(width)), rng);
  }

  Variant variant() const { return variant_; }
  const ModelConfig& config() const { return config_; }
  Mode mode() const { return mode_; }
  void set_mode(Mode m) { mode_ = m; }

  // -- batched, differentiable ------------------------------------------------

  /// points: [batch*num_points x 3].
  EncoderOutput encode_batch(const Tensor& points, std::size_t batch) {
    if (points.rank() != 2 || points.dim(1) != 3 || batch == 0 || points.dim(0) != batch * config_.num_points)
      throw DimensionError("encode: expected [" + std::to_string(batch) + "*" + std::to_string(config_.num_points) +
                           " x 3] points, got " + shape_string(points.shape()));
    Tensor h = points;
    for (std::size_t i = 0; i < point_layers_.size(); ++i)
      h = leaky_relu(point_norms_[i](point_layers_[i](h), mode_), config_.leaky_slope);
    Tensor pooled = max_pool_points(h, batch);
    EncoderOutput out;
    if (has_latent_gaussian(variant_)) {
      out.mu = mu_head_(pooled);
      out.log_var = log_var_head_(pooled);
    } else {
      out.z = z_head_(pooled);
    }
    return out;
  }

  /// z: [batch x latent_dim].
  DecoderOutput decode_batch(const Tensor& z) {
    if (z.rank() != 2 || z.dim(1) != config_.latent_dim)
      throw DimensionError("decode: expected [batch x " + std::to_string(config_.latent_dim) + "] latent, got " +
                           shape_string(z.shape()));
    const std::size_t batch = z.dim(0);
    const double slope = config_.leaky_slope;

    Tensor h = reshape(z, {batch, 1, 1, config_.latent_dim});
    std::size_t side = 1;
    for (std::size_t i = 0; i < conv_layers_.size(); ++i) {
      h = conv_layers_[i](h);
      side *= 2;
      const std::size_t c = config_.conv_channels[i];
      h = leaky_relu(conv_norms_[i](reshape(h, {batch * side * side, c}), mode_), slope);
      h = reshape(h, {batch, side, side, c});
    }
    const std::size_t conv_vals = 3 * config_.conv_points();
    Tensor conv_mean = reshape(conv_out_(h), {batch, conv_vals});

    Tensor d = z;
    for (std::size_t i = 0; i < dense_layers_.size(); ++i)
      d = leaky_relu(dense_norms_[i](dense_layers_[i](d), mode_), slope);
    Tensor dense_mean = dense_out_(d);

    DecoderOutput out;
    out.mean = reshape(concat({conv_mean, dense_mean}, 1), {batch * config_.num_points, 3});
    if (has_variance_head(variant_)) {
      Tensor conv_var = reshape(conv_var_(h), {batch, conv_vals});
      Tensor dense_var = dense_var_(d);
      out.var = softplus_eps(reshape(concat({conv_var, dense_var}, 1), {batch * config_.num_points, 3}),
                             config_.variance_eps);
    }
    return out;
  }

  /// Full pass. Variational variants sample z with `sampler` when given and
  /// use the posterior mean otherwise.
  ForwardOutput forward(const Tensor& points, std::size_t batch, Rng* sampler = nullptr) {
    ForwardOutput out;
    out.encoded = encode_batch(points, batch);
    if (has_latent_gaussian(variant_))
      out.z = sampler ? reparameterize(out.encoded.mu, out.encoded.log_var, *sampler) : out.encoded.mu;
    else
      out.z = out.encoded.z;
    out.decoded = decode_batch(out.z);
    return out;
  }

  // -- single cloud inference (eval mode only) -------------------------------

  Encoding encode(const PointCloud& x) {
    require_eval("encode");
    NoGradGuard no_grad;
    auto e = encode_batch(x.to_tensor(), 1);
    if (has_latent_gaussian(variant_)) {
      auto mu = e.mu.values();
      auto lv = e.log_var.values();
      return LatentGaussian{{mu.begin(), mu.end()}, {lv.begin(), lv.end()}};
    }
    auto z = e.z.values();
    return LatentCode{{z.begin(), z.end()}};
  }

  ReconDistribution decode(const LatentCode& code) {
    require_eval("decode");
    if (code.z.size() != config_.latent_dim)
      throw DimensionError("decode: latent length " + std::to_string(code.z.size()) + ", expected " +
                           std::to_string(config_.latent_dim));
    NoGradGuard no_grad;
    return to_distribution(decode_batch(Tensor({1, config_.latent_dim}, code.z)));
  }

  /// Encode then decode; variational variants decode the posterior mean.
  ReconDistribution reconstruct(const PointCloud& x) {
    require_eval("reconstruct");
    NoGradGuard no_grad;
    auto f = forward(x.to_tensor(), 1, nullptr);
    return to_distribution(f.decoded);
  }

  /// Batched reconstruct for clouds of equal size; identical to calling
  /// reconstruct() on each cloud.
  std::vector<ReconDistribution> reconstruct_batch(std::span<const PointCloud> clouds) {
    require_eval("reconstruct");
    NoGradGuard no_grad;
    auto f = forward(stack_clouds(clouds), clouds.size(), nullptr);
    std::vector<ReconDistribution> out;
    const std::size_t n = config_.num_points;
    for (std::size_t b = 0; b < clouds.size(); ++b) {
      ReconDistribution r;
      r.mean = PointCloud(points_from_tensor(f.decoded.mean, b * n, n));
      r.var = f.decoded.var.defined() ? points_from_tensor(f.decoded.var, b * n, n)
                                      : std::vector<Point3>(n, Point3{1.0, 1.0, 1.0});
      out.push_back(std::move(r));
    }
    return out;
  }

  /// Decodes z ~ N(0, I); variational variants only.
  PointCloud generate(std::uint64_t seed) {
    if (!has_latent_gaussian(variant_))
      throw UsageError("generate() requires a variational model, this one is " + std::string(variant_name(variant_)));
    Rng rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    LatentCode code{std::vector<double>(config_.latent_dim)};
    for (auto& v : code.z) v = normal(rng);
    return decode(code).mean;
  }

  // -- parameters ------------------------------------------------------------

  /// Every trainable tensor with a stable, unique name, in construction order.
  std::vector<NamedTensor> named_parameters() {
    std::vector<NamedTensor> out;
    auto lin = [&](const std::string& p, layers::Linear& l) {
      out.push_back({p + ".weight", l.weight});
      out.push_back({p + ".bias", l.bias});
    };
    auto up = [&](const std::string& p, layers::UpConv& l) {
      out.push_back({p + ".weight", l.weight});
      out.push_back({p + ".bias", l.bias});
    };
    auto bn = [&](const std::string& p, layers::BatchNorm& l) {
      out.push_back({p + ".gamma", l.gamma});
      out.push_back({p + ".beta", l.beta});
    };
    for (std::size_t i = 0; i < point_layers_.size(); ++i) {
      lin("encoder.point." + std::to_string(i), point_layers_[i]);
      bn("encoder.point." + std::to_string(i) + ".bn", point_norms_[i]);
    }
    if (has_latent_gaussian(variant_)) {
      lin("encoder.mu", mu_head_);
      lin("encoder.log_var", log_var_head_);
    } else {
      lin("encoder.z", z_head_);
    }
    for (std::size_t i = 0; i < conv_layers_.size(); ++i) {
      up("decoder.conv." + std::to_string(i), conv_layers_[i]);
      bn("decoder.conv." + std::to_string(i) + ".bn", conv_norms_[i]);
    }
    up("decoder.conv.out", conv_out_);
    if (has_variance_head(variant_)) up("decoder.conv.var", conv_var_);
    for (std::size_t i = 0; i < dense_layers_.size(); ++i) {
      lin("decoder.dense." + std::to_string(i), dense_layers_[i]);
      bn("decoder.dense." + std::to_string(i) + ".bn", dense_norms_[i]);
    }
    lin("decoder.dense.out", dense_out_);
    if (has_variance_head(variant_)) lin("decoder.dense.var", dense_var_);
    return out;
  }

  std::vector<Tensor> parameters() {
    std::vector<Tensor> out;
    for (auto& p : named_parameters()) out.push_back(p.tensor);
    return out;
  }

  /// Batch-norm running statistics.
  std::vector<NamedBuffer> named_buffers() {
    std::vector<NamedBuffer> out;
    auto add = [&](const std::string& p, layers::BatchNorm& l) {
      out.push_back({p + ".running_mean", &l.stats.running_mean});
      out.push_back({p + ".running_var", &l.stats.running_var});
    };
    for (std::size_t i = 0; i < point_norms_.size(); ++i) add("encoder.point." + std::to_string(i) + ".bn", point_norms_[i]);
    for (std::size_t i = 0; i < conv_norms_.size(); ++i) add("decoder.conv." + std::to_string(i) + ".bn", conv_norms_[i]);
    for (std::size_t i = 0; i < dense_norms_.size(); ++i) add("decoder.dense." + std::to_string(i) + ".bn", dense_norms_[i]);
    return out;
  }

  std::vector<BatchNormStats*> batch_norm_stats() {
    std::vector<BatchNormStats*> out;
    for (auto* group : {&point_norms_, &conv_norms_, &dense_norms_})
      for (auto& l : *group) out.push_back(&l.stats);
    return out;
  }

  void zero_grad() {
    for (auto& p : named_parameters()) p.tensor.zero_grad();
  }

 private:
  void require_eval(const char* what) const {
    if (mode_ != Mode::Eval)
      throw UsageError(std::string(what) + "() is an inference operation; switch the model to eval mode first");
  }

  ReconDistribution to_distribution(const DecoderOutput& d) const {
    ReconDistribution r;
    r.mean = PointCloud::from_tensor(d.mean);
    if (d.var.defined())
      r.var = points_from_tensor(d.var, 0, d.var.dim(0));
    else
      r.var.assign(r.mean.size(), Point3{1.0, 1.0, 1.0});
    return r;
  }

  Variant variant_;
  ModelConfig config_;
  Mode mode_ = Mode::Eval;

  std::vector<layers::Linear> point_layers_;
  std::vector<layers::BatchNorm> point_norms_;
  layers::Linear z_head_, mu_head_, log_var_head_;

  std::vector<layers::UpConv> conv_layers_;
  std::vector<layers::BatchNorm> conv_norms_;
  layers::UpConv conv_out_, conv_var_;

  std::vector<layers::Linear> dense_layers_;
  std::vector<layers::BatchNorm> dense_norms_;
  layers::Linear dense_out_, dense_var_;
};

// ---------------------------------------------------------------------------
// Objectives

struct LossTerms {
  Tensor total;
  double recon = 0.0;  ///< reconstruction part (Chamfer or variance-modelling Chamfer)
  double kl = 0.0;     ///< unweighted KL term, 0 for deterministic variants
};

/// AE: Chamfer. sigma-AE: variance-modelling Chamfer. VAE / sigma-VAE add beta * KL.
/// `latent` must be given exactly when the variant is variational.
inline LossTerms model_loss(Variant variant, const Tensor& x, const DecoderOutput& recon, const EncoderOutput* latent,
                            double beta, std::size_t batch = 1, bool weighted_matching = false) {
  if (!(beta >= 0.0)) throw UsageError("beta must be non-negative");
  const bool variational = has_latent_gaussian(variant);
  if (variational && (latent == nullptr || !latent->mu.defined()))
    throw UsageError(std::string(variant_name(variant)) + " loss needs the latent Gaussian");
  if (!variational && latent != nullptr && latent->mu.defined())
    throw UsageError(std::string(variant_name(variant)) + " loss takes no latent Gaussian");
  if (has_variance_head(variant) && !recon.var.defined())
    throw UsageError(std::string(variant_name(variant)) + " loss needs predicted variances");

  LossTerms out;
  Tensor rec = has_variance_head(variant) ? sigma_chamfer(x, recon.mean, recon.var, batch, weighted_matching)
                                          : chamfer_distance(x, recon.mean, batch);
  out.recon = rec.item();
  out.total = rec;
  if (variational) {
    Tensor kl = kl_divergence(latent->mu, latent->log_var);
    out.kl = kl.item();
    out.total = add(rec, scale(kl, beta));
  }
  return out;
}

/// Value-level loss for one cloud.
inline double model_loss(Variant variant, const PointCloud& x, const ReconDistribution& recon,
                         const std::optional<LatentGaussian>& latent, double beta, bool weighted_matching = false) {
  if (!(beta >= 0.0)) throw UsageError("beta must be non-negative");
  if (has_latent_gaussian(variant) != latent.has_value())
    throw UsageError(std::string(variant_name(variant)) +
                     (latent ? " loss takes no latent Gaussian" : " loss needs the latent Gaussian"));
  double rec = has_variance_head(variant) ? sigma_chamfer(x, recon, weighted_matching) : chamfer_distance(x, recon.mean);
  if (latent) rec += beta * kl_divergence(*latent);
  return rec;
}

}  // namespace pcae
