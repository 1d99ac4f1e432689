#include <gtest/gtest.h>

#include "flexctl/backbone.hpp"
#include "flexctl/budget.hpp"
#include "flexctl/control.hpp"
#include "test_util.hpp"

using namespace flexctl;
using testutil::randn;

TEST(CountFlops, FormulaInstances) {
  EXPECT_EQ(flops::conv(16, 16, 1, 16, 16), 131072u);
  EXPECT_EQ(flops::linear(1, 64, 64), 8192u);
  BlockSpec s;
  s.kind = BlockKind::Upsample;
  s.in_shape = {16, 16, 16};
  s.out_shape = {16, 16, 16};
  s.kernel = 1;
  EXPECT_EQ(count_block_flops(s), 131072u);
}

TEST(CountFlops, UnshapedSpecRejected) {
  BlockSpec s;
  s.kind = BlockKind::TransformerBlock;
  s.in_shape = {16, 64};
  EXPECT_THROW(count_block_flops(s), ConfigError);
}

namespace {

// Counts every primitive executed by one block on a batch of one.
template <class B>
void expect_specs_match_instrumented(const B& bb, double tol) {
  using T = typename B::scalar_type;
  Rng rng(31);
  const auto img = bb.image_shape();
  Conditioning<T> cond{{2}, {B::kind == BackboneKind::UNet ? 500.0 : 0.5}, Tensor<T>()};
  auto emb = bb.embed_condition(cond);
  for (const auto& s : bb.specs()) {
    if (s.kind == BlockKind::Embed) continue;
    auto h = randn<T>(detail::batched(1, s.in_shape), rng);
    FlopCounter c;
    bb.run_block(s.index, h, emb);
    const double measured = static_cast<double>(c.count());
    EXPECT_EQ(s.flops, count_block_flops(s));
    EXPECT_NEAR(static_cast<double>(s.flops) / measured, 1.0, tol)
        << "block " << s.index << " " << to_string(s.kind) << " analytic " << s.flops << " measured " << measured;
  }
  (void)img;
}

}  // namespace

TEST(CountFlops, UNetBlocksMatchInstrumentedExecution) {
  Rng rng(1);
  TinyUNet<float> bb(TinyUNetConfig{}, rng);
  expect_specs_match_instrumented(bb, 0.01);
}

TEST(CountFlops, DiTBlocksMatchInstrumentedExecution) {
  Rng rng(2);
  TinyDiTConfig c;
  c.depth = 2;
  TinyDiT<float> bb(c, rng);
  expect_specs_match_instrumented(bb, 0.01);
}

TEST(FlopsTable, ConsistencyIdentity) {
  auto t = FlopsTable::make({10, 20, 30}, 5, 7);
  EXPECT_EQ(t.large_total, 72u);
  EXPECT_TRUE(t.consistent());
  EXPECT_EQ(t.used({1, 0, 1}), 52u);
  EXPECT_THROW(t.used({1, 0}), UsageError);
}

TEST(FlopsRatio, Examples) {
  auto t = FlopsTable::make({10, 20, 30}, 5, 7);
  EXPECT_DOUBLE_EQ(flops_ratio({1, 1, 1}, t), 1.0);
  EXPECT_DOUBLE_EQ(flops_ratio({0, 0, 0}, t), 12.0 / 72.0);
  auto eq = FlopsTable::make({8, 8, 8, 8}, 0, 0);
  EXPECT_DOUBLE_EQ(flops_ratio({1, 0, 1, 0}, eq), 0.5);
  EXPECT_THROW(flops_ratio({1, 1}, t), UsageError);
  EXPECT_THROW(flops_ratio({1, 1, 1.5}, t), UsageError);
}

TEST(FlopsRatio, AffineAndMonotone) {
  auto t = FlopsTable::make({3, 11, 5, 2}, 4, 1);
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> m(4);
    for (auto& v : m) v = rng.uniform();
    const double base = flops_ratio(m, t);
    for (std::size_t l = 0; l < 4; ++l) {
      auto up = m;
      up[l] = std::min(1.0, m[l] + 0.1);
      EXPECT_GE(flops_ratio(up, t), base);
      EXPECT_NEAR(flops_ratio(up, t) - base, (up[l] - m[l]) * t.per_block[l] / 26.0, 1e-12);
    }
  }
}

TEST(FlopsRatio, TensorPathMatchesScalarPath) {
  auto t = FlopsTable::make({3, 11, 5, 2}, 4, 1);
  auto masks = Tensor<double>::from_data({2, 4}, {1, 0, 0.5, 1, 0.2, 0.3, 0.9, 0});
  auto r = flops_ratio(masks, t);
  EXPECT_NEAR(r[0], flops_ratio({1, 0, 0.5, 1}, t), 1e-15);
  EXPECT_NEAR(r[1], flops_ratio({0.2, 0.3, 0.9, 0}, t), 1e-15);
}

TEST(CostLoss, Examples) {
  EXPECT_DOUBLE_EQ(cost_loss({0.5, 0.5}, 0.5), 0.0);
  EXPECT_NEAR(cost_loss({0.6, 0.4}, 0.5), 0.01, 1e-15);
  EXPECT_DOUBLE_EQ(cost_loss({1.0}, 0.5), 0.25);
  EXPECT_THROW(cost_loss({}, 0.5), UsageError);
  auto r = Tensor<double>::from_data({2}, {0.6, 0.4});
  EXPECT_NEAR(cost_loss(r, 0.5).item(), 0.01, 1e-15);
}

TEST(CostLoss, GradientSignFollowsDeviation) {
  auto t = FlopsTable::make({3, 11, 5, 2}, 4, 1);
  for (double gamma : {0.2, 0.9}) {
    GradTape<double> tape;
    auto m = Tensor<double>::parameter({1, 4}, {0.7, 0.6, 0.5, 0.8});
    auto ratio = flops_ratio(m, t);
    auto l = cost_loss(ratio, gamma);
    auto g = tape.gradient(l, {m})[0];
    const double dev = ratio[0] - gamma;
    for (std::size_t i = 0; i < 4; ++i) {
      EXPECT_EQ(std::signbit(g[i]), std::signbit(dev));
      EXPECT_NEAR(g[i], 2 * dev * t.per_block[i] / 26.0, 1e-12);
    }
  }
  // all blocks on with gamma = 1: the cost gradient vanishes
  GradTape<double> tape;
  auto m = Tensor<double>::parameter({1, 4}, {1, 1, 1, 1});
  auto g = tape.gradient(cost_loss(flops_ratio(m, t), 1.0), {m})[0];
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(g[i], 0.0);
}

TEST(CostLoss, GradientMatchesFiniteDifferenceThroughStraightThrough) {
  auto t = FlopsTable::make({3, 11, 5, 2}, 4, 1);
  const double e = testutil::grad_check(
      [&](const std::vector<Tensor<double>>& in) {
        auto soft = sigmoid(in[0]);
        auto hard = Tensor<double>::from_data({1, 4}, {1, 0, 1, 1});
        // offset form of the straight-through mask: smooth and equal in value
        auto offset = sub(hard, sigmoid(Tensor<double>::from_data({1, 4}, {0.3, -0.2, 0.9, 0.1})));
        auto m = add(soft, offset);
        return cost_loss(flops_ratio(m, t), 0.4);
      },
      {Tensor<double>::parameter({1, 4}, {0.3, -0.2, 0.9, 0.1})});
  EXPECT_LE(e, 1e-6);
}

TEST(DiffusionLoss, ExamplesAndOracle) {
  Rng rng(9);
  auto a = randn<double>({2, 3, 4, 4}, rng);
  EXPECT_EQ(diffusion_loss(a, a).item(), 0.0);
  EXPECT_NEAR(diffusion_loss(add_scalar(a, 2.0), a).item(), 4.0, 1e-12);
  auto b = randn<double>({2, 3, 4, 4}, rng);
  double s = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  EXPECT_NEAR(diffusion_loss(a, b).item(), s / a.numel(), 1e-6);
  EXPECT_THROW(diffusion_loss(a, randn<double>({2, 3, 4, 2}, rng)), DimensionError);
}

TEST(TotalLoss, Combination) {
  EXPECT_DOUBLE_EQ(total_loss(0.2, 0.04, 0.0), 0.2);
  EXPECT_NEAR(total_loss(0.2, 0.04, 0.5), 0.22, 1e-15);
  CostConfig c;
  EXPECT_EQ(c.lambda_c, 0.5);
  c.gamma = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(BranchTable, ModesAndIdentity) {
  Rng rng(3);
  TinyUNet<float> bb(TinyUNetConfig{}, rng);
  ControlBranch<TinyUNet<float>> flex(bb, ControlMode::Flex, rng);
  ControlBranch<TinyUNet<float>> large(bb, ControlMode::Large, rng);
  ControlBranch<TinyUNet<float>> van(bb, ControlMode::Vanilla, rng);
  EXPECT_TRUE(flex.table().consistent());
  EXPECT_GT(flex.table().router, 0u);
  EXPECT_EQ(large.table().router, 0u);
  EXPECT_EQ(flex.table().large_total, large.table().large_total + flex.table().router);
  EXPECT_LT(van.table().large_total, large.table().large_total);
}
