#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "pcae/models.hpp"
#include "test_util.hpp"

using namespace pcae;
using testutil::permuted;
using testutil::random_cloud;

namespace {

PointCloudAutoencoder make(Variant v, std::uint64_t seed = 1) {
  return PointCloudAutoencoder(v, ModelConfig::reduced(), seed);
}

std::vector<double> latent_of(const Encoding& e) {
  if (auto* c = std::get_if<LatentCode>(&e)) return c->z;
  return std::get<LatentGaussian>(e).mu;
}

}  // namespace

TEST(ModelConfig, PresetsSplitPointsBetweenBranches) {
  auto f = ModelConfig::full();
  EXPECT_EQ(f.conv_points(), 1024u);
  EXPECT_EQ(f.dense_points(), 1024u);
  EXPECT_EQ(f.latent_dim, 64u);
  EXPECT_EQ(ModelConfig::desk().conv_points() + ModelConfig::desk().dense_points(), 512u);
  EXPECT_EQ(ModelConfig::reduced().conv_points(), 16u);
  EXPECT_EQ(ModelConfig::reduced().dense_points(), 48u);
}

TEST(ModelConfig, SerializeRoundTrip) {
  for (auto c : {ModelConfig::full(), ModelConfig::desk(), ModelConfig::reduced()})
    EXPECT_EQ(parse_model_config(serialize(c)), c);
}

TEST(ModelConfig, InvalidConfigsThrow) {
  auto c = ModelConfig::reduced();
  c.num_points = 16;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig::reduced();
  c.point_widths = {8, 0};
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(ModelConfig::preset("huge"), UsageError);
}

TEST(Variant, NamesAndFlags) {
  for (auto v : {Variant::AE, Variant::SigmaAE, Variant::VAE, Variant::SigmaVAE})
    EXPECT_EQ(parse_variant(variant_name(v)), v);
  EXPECT_TRUE(has_variance_head(Variant::SigmaAE));
  EXPECT_TRUE(has_variance_head(Variant::SigmaVAE));
  EXPECT_FALSE(has_variance_head(Variant::VAE));
  EXPECT_TRUE(has_latent_gaussian(Variant::VAE));
  EXPECT_FALSE(has_latent_gaussian(Variant::SigmaAE));
  EXPECT_THROW(parse_variant("gan"), UsageError);
}

TEST(Encoder, FullConfigLatentLengthIs64) {
  PointCloudAutoencoder m(Variant::AE, ModelConfig::full(), 3);
  std::mt19937_64 rng(1);
  auto z = latent_of(m.encode(random_cloud(2048, rng)));
  EXPECT_EQ(z.size(), 64u);
}

TEST(Encoder, WrongPointCountThrows) {
  auto m = make(Variant::AE);
  std::mt19937_64 rng(2);
  EXPECT_THROW(m.encode(random_cloud(63, rng)), DimensionError);
}

TEST(Encoder, PermutationInvariantExactly) {
  for (auto v : {Variant::AE, Variant::SigmaVAE}) {
    auto m = make(v);
    std::mt19937_64 rng(3);
    auto x = random_cloud(64, rng);
    const auto ref = latent_of(m.encode(x));
    for (int k = 0; k < 20; ++k) EXPECT_EQ(latent_of(m.encode(permuted(x, rng))), ref);
  }
}

TEST(Encoder, ZeroWeightsGiveZeroLatent) {
  auto m = make(Variant::AE);
  for (auto& p : m.parameters())
    for (auto& w : p.mutable_values()) w = 0.0;
  std::mt19937_64 rng(4);
  for (double z : latent_of(m.encode(random_cloud(64, rng)))) EXPECT_EQ(z, 0.0);
}

TEST(Decoder, OutputShapesAndVarianceFloor) {
  auto m = make(Variant::SigmaAE);
  LatentCode code{std::vector<double>(8, 0.3)};
  auto r = m.decode(code);
  EXPECT_EQ(r.mean.size(), 64u);
  ASSERT_EQ(r.var.size(), 64u);
  for (const auto& v : r.var)
    for (double c : v) EXPECT_GT(c, 1e-6);
  // Variants without a variance head report unit variance.
  auto a = make(Variant::AE).decode(code);
  for (const auto& v : a.var) EXPECT_EQ(v, (Point3{1, 1, 1}));
}

TEST(Decoder, FullConfigShapes) {
  PointCloudAutoencoder m(Variant::SigmaAE, ModelConfig::full(), 5);
  NoGradGuard g;
  auto out = m.decode_batch(Tensor({1, 64}, std::vector<double>(64, 0.1)));
  EXPECT_EQ(out.mean.shape(), (Shape{2048, 3}));
  EXPECT_EQ(out.var.shape(), (Shape{2048, 3}));
  // First transposed convolution lifts 1x1x64 to 2x2x1024.
  auto names = m.named_parameters();
  auto it = std::find_if(names.begin(), names.end(), [](auto& p) { return p.name == "decoder.conv.0.weight"; });
  ASSERT_NE(it, names.end());
  EXPECT_EQ(it->tensor.shape(), (Shape{2, 2, 64, 1024}));
}

TEST(Decoder, LatentLengthMismatchThrows) {
  auto m = make(Variant::AE);
  EXPECT_THROW(m.decode(LatentCode{std::vector<double>(7, 0.0)}), DimensionError);
}

TEST(Model, BatchReconstructEqualsSingle) {
  auto m = make(Variant::SigmaVAE);
  std::mt19937_64 rng(6);
  std::vector<PointCloud> xs{random_cloud(64, rng), random_cloud(64, rng), random_cloud(64, rng)};
  auto batch = m.reconstruct_batch(xs);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    auto single = m.reconstruct(xs[i]);
    EXPECT_EQ(batch[i].mean, single.mean);
    EXPECT_EQ(batch[i].var, single.var);
  }
}

TEST(Model, InferenceRequiresEvalMode) {
  auto m = make(Variant::AE);
  m.set_mode(Mode::Train);
  std::mt19937_64 rng(7);
  EXPECT_THROW(m.reconstruct(random_cloud(64, rng)), UsageError);
}

TEST(Model, ParameterNamesAreUnique) {
  for (auto v : {Variant::AE, Variant::SigmaAE, Variant::VAE, Variant::SigmaVAE}) {
    auto m = make(v);
    std::set<std::string> names;
    for (auto& p : m.named_parameters()) EXPECT_TRUE(names.insert(p.name).second) << p.name;
    for (auto& b : m.named_buffers()) EXPECT_TRUE(names.insert(b.name).second) << b.name;
    EXPECT_EQ(names.count("decoder.conv.var.weight"), has_variance_head(v) ? 1u : 0u);
    EXPECT_EQ(names.count("encoder.mu.weight"), has_latent_gaussian(v) ? 1u : 0u);
    EXPECT_EQ(names.count("encoder.z.weight"), has_latent_gaussian(v) ? 0u : 1u);
  }
}

TEST(Generate, DeterministicAndVariationalOnly) {
  auto m = make(Variant::VAE);
  auto a = m.generate(5), b = m.generate(5), c = m.generate(6);
  EXPECT_EQ(a.size(), 64u);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  auto ae = make(Variant::SigmaAE);
  EXPECT_THROW(ae.generate(5), UsageError);
}

TEST(KL, ClosedFormValues) {
  EXPECT_DOUBLE_EQ(kl_divergence(LatentGaussian{{0.0}, {0.0}}), 0.0);
  EXPECT_DOUBLE_EQ(kl_divergence(LatentGaussian{{1.0}, {0.0}}), 0.5);
  EXPECT_NEAR(kl_divergence(LatentGaussian{{0.0}, {std::log(2.0)}}), 0.5 * (2 - std::log(2.0) - 1), 1e-15);
  EXPECT_NEAR(kl_divergence(LatentGaussian{{0.0}, {std::log(2.0)}}), 0.153426, 1e-6);
}

TEST(KL, NonNegativeAndZeroOnlyAtPrior) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n(0, 1);
  for (int t = 0; t < 100; ++t) {
    LatentGaussian g{{n(rng), n(rng)}, {n(rng), n(rng)}};
    EXPECT_GT(kl_divergence(g), 0.0);
  }
}

TEST(KL, TensorAndValueFormsAgree) {
  Tensor mu({1, 3}, {0.1, -0.5, 2.0}), lv({1, 3}, {0.3, -1.0, 0.0});
  EXPECT_NEAR(kl_divergence(mu, lv).item(), kl_divergence(LatentGaussian{{0.1, -0.5, 2.0}, {0.3, -1.0, 0.0}}), 1e-15);
}

TEST(Reparameterize, DegenerateSigmaReturnsMean) {
  LatentGaussian g{{0.5, -1.0}, {-800.0, -800.0}};
  EXPECT_EQ(reparameterize(g, 3).z, g.mu);
}

TEST(Reparameterize, DeterministicAndUnbiased) {
  LatentGaussian g{{0.5, -1.0}, {std::log(0.25), 0.0}};
  EXPECT_EQ(reparameterize(g, 3).z, reparameterize(g, 3).z);
  const int n = 100000;
  double s0 = 0, s1 = 0;
  for (int i = 0; i < n; ++i) {
    auto z = reparameterize(g, 1000 + i).z;
    s0 += z[0];
    s1 += z[1];
  }
  EXPECT_NEAR(s0 / n, 0.5, 3 * 0.5 / std::sqrt(n));
  EXPECT_NEAR(s1 / n, -1.0, 3 * 1.0 / std::sqrt(n));
}

TEST(Reparameterize, GradientFlowsToMuAndLogVarOnly) {
  Tensor mu({1, 2}, {0.5, -1.0}, true), lv({1, 2}, {0.2, -0.3}, true);
  Rng rng(4);
  Tensor z = reparameterize(mu, lv, rng);
  backward(sum(z));
  EXPECT_EQ(mu.grad()[0], 1.0);
  // dz/dlv = 0.5 * sigma * eps = 0.5 * (z - mu)
  EXPECT_NEAR(lv.grad()[0], 0.5 * (z[0] - 0.5), 1e-15);
}

TEST(Loss, VaeAtBetaZeroEqualsAe) {
  std::mt19937_64 rng(9);
  auto x = random_cloud(20, rng);
  auto r = ReconDistribution::unit_variance(random_cloud(20, rng));
  LatentGaussian g{{0.3, 1.0}, {0.2, -0.4}};
  EXPECT_EQ(model_loss(Variant::VAE, x, r, g, 0.0), model_loss(Variant::AE, x, r, std::nullopt, 0.0));
  EXPECT_NEAR(model_loss(Variant::SigmaVAE, x, r, g, 0.0), chamfer_distance(x, r.mean), 1e-12);
  EXPECT_NEAR(model_loss(Variant::SigmaVAE, x, r, g, 0.1), sigma_chamfer(x, r) + 0.1 * kl_divergence(g), 1e-12);
}

TEST(Loss, ArgumentMismatchThrows) {
  PointCloud x({{0, 0, 0}});
  auto r = ReconDistribution::unit_variance(x);
  EXPECT_THROW(model_loss(Variant::VAE, x, r, std::nullopt, 0.1), UsageError);
  EXPECT_THROW(model_loss(Variant::AE, x, r, LatentGaussian{{0.0}, {0.0}}, 0.1), UsageError);
  EXPECT_THROW(model_loss(Variant::AE, x, r, std::nullopt, -1.0), UsageError);
}

TEST(Loss, FullModelGradientOnToyCloud) {
  // 16-point toy model: 4x4 conv grid would leave nothing for the dense branch,
  // so use a 2x2 grid (no hidden transposed convolution) plus 12 dense points.
  ModelConfig c;
  c.num_points = 16;
  c.point_widths = {4, 8};
  c.latent_dim = 4;
  c.conv_channels = {};
  c.dense_widths = {8};
  PointCloudAutoencoder m(Variant::SigmaVAE, c, 11);
  m.set_mode(Mode::Train);
  std::mt19937_64 rng(10);
  Tensor x = stack_clouds(std::vector<PointCloud>{random_cloud(16, rng), random_cloud(16, rng)});
  auto loss = [&] {
    Rng r(5);
    auto f = m.forward(x, 2, &r);
    return model_loss(Variant::SigmaVAE, x, f.decoded, &f.encoded, 0.1, 2).total;
  };
  EXPECT_LT(testutil::max_grad_error(loss, m.parameters()), 1e-4);
}
