#include <gtest/gtest.h>

#include "flexctl/control.hpp"
#include "flexctl/router.hpp"
#include "test_util.hpp"

using namespace flexctl;
using testutil::randn;

namespace {

double silu_d(double v) { return v / (1.0 + std::exp(-v)); }

// k for one sample computed with plain loops.
double unet_router_oracle(const RouterUNet<double>& r, const Tensor<double>& h, std::size_t b) {
  const std::size_t c = h.dim(1), hw = h.dim(2) * h.dim(3);
  std::vector<double> gap(c, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < hw; ++i) gap[ch] += h[(b * c + ch) * hw + i];
    gap[ch] /= static_cast<double>(hw);
  }
  const std::size_t hid = r.fc1.out_features();
  double k = r.fc2.bias[0];
  for (std::size_t j = 0; j < hid; ++j) {
    double a = r.fc1.bias[j];
    for (std::size_t ch = 0; ch < c; ++ch) a += r.fc1.weight[j * c + ch] * gap[ch];
    k += r.fc2.weight[j] * silu_d(a);
  }
  return k;
}

double dit_router_oracle(const RouterDiT<double>& r, const Tensor<double>& h, std::size_t b) {
  const std::size_t n = h.dim(1), c = h.dim(2), o = r.head.in_features();
  std::vector<double> tok_mean(c, 0.0), ch_mean(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      const double v = h[(b * n + i) * c + j];
      tok_mean[j] += v / static_cast<double>(n);
      ch_mean[i] += v / static_cast<double>(c);
    }
  }
  double k = r.head.bias[0];
  for (std::size_t q = 0; q < o; ++q) {
    double g = r.global.bias[q], l = r.local.bias[q];
    for (std::size_t j = 0; j < c; ++j) g += r.global.weight[q * c + j] * tok_mean[j];
    for (std::size_t i = 0; i < n; ++i) l += r.local.weight[q * n + i] * ch_mean[i];
    k += r.head.weight[q] * (r.alpha1 * g + r.alpha2 * l);
  }
  return k;
}

}  // namespace

TEST(Threshold, BoundaryMapsToZero) {
  EXPECT_EQ(threshold_mask(0.7, 0.5), 1);
  EXPECT_EQ(threshold_mask(0.5, 0.5), 0);
  EXPECT_EQ(threshold_mask(0.49999, 0.5), 0);
  EXPECT_EQ(threshold_mask(std::nextafter(0.5, 1.0), 0.5), 1);
}

TEST(GumbelParams, Defaults) {
  GumbelParams g;
  EXPECT_EQ(g.temperature, 5.0);
  EXPECT_EQ(g.threshold, 0.5);
  EXPECT_EQ(g.train_threshold, 0.5);
  g.temperature = 0;
  EXPECT_THROW(g.validate(), ConfigError);
  g = {};
  g.threshold = 1.0;
  EXPECT_THROW(g.validate(), ConfigError);
}

TEST(GumbelSigmoid, EqualNoiseAtZeroLogitIsHalf) {
  for (double tp : {0.1, 1.0, 5.0, 50.0}) {
    EXPECT_DOUBLE_EQ(gumbel_sigmoid(0.0, tp, 0.3, 0.3), 0.5);
  }
  EXPECT_THROW(gumbel_sigmoid(0.0, 0.0, 0.3, 0.3), ConfigError);
}

TEST(GumbelSigmoid, ClampsUniformEndpoints) {
  EXPECT_TRUE(std::isfinite(gumbel_sigmoid(0.2, 5.0, 0.0, 1.0)));
  EXPECT_TRUE(std::isfinite(gumbel_sigmoid(0.2, 5.0, 1.0, 0.0)));
  EXPECT_DOUBLE_EQ(gumbel_from_uniform(0.0), gumbel_from_uniform(kGumbelClamp));
}

TEST(GumbelSigmoid, DerivativeMatchesFiniteDifference) {
  const double k = 0.3, tp = 5.0, u1 = 0.41, u2 = 0.77, h = 1e-6;
  const double m = gumbel_sigmoid(k, tp, u1, u2);
  const double fd = (gumbel_sigmoid(k + h, tp, u1, u2) - gumbel_sigmoid(k - h, tp, u1, u2)) / (2 * h);
  EXPECT_LE(testutil::rel_err(m * (1 - m) / tp, fd), 1e-6);

  // Same derivative through the tensor path and the tape.
  GradTape<double> tape;
  auto kt = Tensor<double>::parameter({1}, {k});
  const double noise = gumbel_from_uniform(u1) - gumbel_from_uniform(u2);
  auto y = gumbel_sigmoid(kt, tp, {noise});
  EXPECT_NEAR(y[0], m, 1e-15);
  auto g = tape.gradient(sum(y), {kt});
  EXPECT_LE(testutil::rel_err(g[0][0], fd), 1e-6);
}

TEST(GumbelSigmoid, MonotoneInLogit) {
  double prev = -1;
  for (double k = -6; k <= 6; k += 0.25) {
    const double m = gumbel_sigmoid(k, 5.0, 0.2, 0.6);
    EXPECT_GT(m, prev);
    EXPECT_GT(m, 0.0);
    EXPECT_LT(m, 1.0);
    prev = m;
  }
}

TEST(GumbelSigmoid, HigherTemperatureFlattens) {
  for (double k : {-2.0, 0.7, 3.0}) {
    double prev = 1.0;
    for (double tp : {0.5, 1.0, 2.0, 5.0, 10.0}) {
      const double d = std::abs(gumbel_sigmoid(k, tp, 0.5, 0.5) - 0.5);
      EXPECT_LT(d, prev);
      prev = d;
    }
  }
}

TEST(InferDecisions, SaturationAndDeterminism) {
  GumbelParams g;
  const double k[] = {10.0, -10.0, 0.0};
  auto a = infer_decisions(k, g);
  auto b = infer_decisions(k, g);
  EXPECT_EQ(a[0].hard, 1);
  EXPECT_EQ(a[1].hard, 0);
  EXPECT_EQ(a[2].hard, 0);  // sigmoid(0) = T
  EXPECT_FALSE(a[0].has_soft);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(a[i].k_prime, b[i].k_prime);
}

TEST(InferDecisions, HardIsStepInLogit) {
  GumbelParams g;
  int prev = 0;
  for (double k = -3; k <= 3; k += 0.01) {
    const double kk[] = {k};
    const int h = infer_decisions(kk, g)[0].hard;
    EXPECT_GE(h, prev);
    prev = h;
  }
}

TEST(RouterUNet, MatchesLoopOracle) {
  Rng rng(21);
  auto r = RouterUNet<double>::init(16, rng);
  auto h = randn<double>({3, 16, 4, 4}, rng);
  auto k = r(h);
  ASSERT_EQ(k.shape(), (Shape{3}));
  for (std::size_t b = 0; b < 3; ++b) EXPECT_NEAR(k[b], unet_router_oracle(r, h, b), 1e-6);
}

TEST(RouterUNet, ConstantInputAndBiasHead) {
  Rng rng(22);
  auto r = RouterUNet<double>::init(8, rng);
  EXPECT_EQ(r.fc2.bias[0], kRouterBiasInit);
  for (auto& w : r.fc2.weight.mutable_data()) w = 0;
  auto h = randn<double>({2, 8, 4, 4}, rng);
  auto k = r(h);
  EXPECT_EQ(k[0], kRouterBiasInit);
  EXPECT_EQ(k[1], kRouterBiasInit);
  EXPECT_GT(sigmoid_scalar(kRouterBiasInit), 0.5);
}

TEST(RouterUNet, ShapeMismatchRejected) {
  Rng rng(23);
  auto r = RouterUNet<double>::init(8, rng);
  EXPECT_THROW(r(randn<double>({1, 4, 4, 4}, rng)), DimensionError);
  EXPECT_THROW(r(randn<double>({1, 8, 4}, rng)), DimensionError);
}

TEST(RouterDiT, MatchesLoopOracle) {
  Rng rng(24);
  auto r = RouterDiT<double>::init(16, 64, rng);
  EXPECT_EQ(r.alpha1, 0.5);
  EXPECT_EQ(r.alpha2, 0.5);
  EXPECT_EQ(r.head.in_features(), 1u);  // O = C / 64
  auto h = randn<double>({2, 16, 64}, rng);
  auto k = r(h);
  for (std::size_t b = 0; b < 2; ++b) EXPECT_NEAR(k[b], dit_router_oracle(r, h, b), 1e-6);
  EXPECT_THROW(r(randn<double>({1, 15, 64}, rng)), DimensionError);
  EXPECT_THROW(r(randn<double>({1, 16, 32}, rng)), DimensionError);
}

// With alpha2 = 0, moving values between two channels of one token keeps the
// token mean of every other channel but changes the channel means; the score
// only sees the token-mean path.
TEST(RouterDiT, GlobalOnlyMixingIgnoresChannelMeans) {
  Rng rng(25);
  auto r = RouterDiT<double>::init(4, 128, rng, 1.0, 0.0);
  auto h = randn<double>({1, 4, 128}, rng);
  auto h2 = h.clone();
  auto d = h2.mutable_data();
  // add +1 to channel 0 of token 0 and -1 to channel 0 of token 1:
  // token means per channel unchanged, channel means of tokens 0 and 1 change
  d[0 * 128 + 0] += 1.0;
  d[1 * 128 + 0] -= 1.0;
  EXPECT_NEAR(r(h)[0], r(h2)[0], 1e-12);
  auto mixed = RouterDiT<double>::init(4, 128, rng);
  EXPECT_GT(std::abs(mixed(h)[0] - mixed(h2)[0]), 1e-9);
}

TEST(RouterDiT, HiddenWidthFromChannels) {
  EXPECT_EQ(RouterDiT<double>::hidden_for(64), 1u);
  EXPECT_EQ(RouterDiT<double>::hidden_for(256), 4u);
}

// A router with positive weights separates inputs with positive and negative
// channel means.
TEST(Router, CraftedInputsGiveDifferentMasks) {
  Rng rng(26);
  auto r = RouterUNet<double>::init(8, rng);
  for (auto& w : r.fc1.weight.mutable_data()) w = 0.5;
  for (auto& w : r.fc1.bias.mutable_data()) w = 0.0;
  for (auto& w : r.fc2.weight.mutable_data()) w = 1.0;
  r.fc2.bias.mutable_data()[0] = 0.0;
  auto ha = Tensor<double>::from_data({1, 8, 2, 2}, std::vector<double>(32, 2.0));
  auto hb = scale(ha, -1.0);
  GumbelParams g;
  const double ka[] = {r(ha)[0]}, kb[] = {r(hb)[0]};
  EXPECT_EQ(infer_decisions(ka, g)[0].hard, 1);
  EXPECT_EQ(infer_decisions(kb, g)[0].hard, 0);
}

TEST(Router, ParameterBudgetBelowOnePercent) {
  Rng rng(27);
  TinyUNet<float> unet(TinyUNetConfig{}, rng);
  ControlBranch<TinyUNet<float>> ub(unet, ControlMode::Flex, rng);
  ParamList<float> router, branch;
  ub.for_each_router_param("", [&](const std::string& n, Tensor<float>& t) { router.push_back({n, t}); });
  ub.for_each_branch_param("", [&](const std::string& n, Tensor<float>& t) { branch.push_back({n, t}); });
  EXPECT_LT(static_cast<double>(count_params(router)), 0.01 * static_cast<double>(count_params(branch)));

  TinyDiT<float> dit(TinyDiTConfig{}, rng);
  ControlBranch<TinyDiT<float>> db(dit, ControlMode::Flex, rng);
  router.clear();
  branch.clear();
  db.for_each_router_param("", [&](const std::string& n, Tensor<float>& t) { router.push_back({n, t}); });
  db.for_each_branch_param("", [&](const std::string& n, Tensor<float>& t) { branch.push_back({n, t}); });
  EXPECT_LT(static_cast<double>(count_params(router)), 0.01 * static_cast<double>(count_params(branch)));
}

TEST(Router, NoiseFreeTrainDecisionAtZeroLogit) {
  Rng rng(28);
  TinyUNetConfig c;
  c.stage_channels = {8};
  c.resblocks_per_stage = 1;
  c.time_embed_dim = 16;
  TinyUNet<double> bb(c, rng);
  ControlBranch<TinyUNet<double>> br(bb, ControlMode::Flex, rng);
  for (auto& r : br.routers()) {
    for (auto& w : r.fc2.weight.mutable_data()) w = 0;
    r.fc2.bias.mutable_data()[0] = 0;
  }
  ControlOptions opt;
  opt.phase = Phase::Train;
  opt.noise_free = true;
  auto x = randn<double>({1, 3, 16, 16}, rng);
  Conditioning<double> cond{{0}, {10.0}, Tensor<double>::from_data({1, 1, 16, 16}, std::vector<double>(256, 0.0))};
  auto out = br.forward(x, cond, opt);
  for (const auto& per_block : out.decisions) {
    EXPECT_DOUBLE_EQ(per_block[0].soft, 0.5);
    EXPECT_EQ(per_block[0].hard, 0);
  }
}
