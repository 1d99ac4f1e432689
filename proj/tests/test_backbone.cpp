#include <gtest/gtest.h>

#include "flexctl/backbone.hpp"
#include "test_util.hpp"

using namespace flexctl;
using testutil::randn;

namespace {

TinyUNetConfig small_unet() {
  TinyUNetConfig c;
  c.stage_channels = {8, 16};
  c.resblocks_per_stage = 1;
  c.time_embed_dim = 16;
  return c;
}

template <class T>
Conditioning<T> cond_for(std::size_t b, double t) {
  std::vector<int> ids(b);
  for (std::size_t i = 0; i < b; ++i) ids[i] = static_cast<int>(i % 8);
  return {ids, std::vector<double>(b, t), Tensor<T>()};
}

std::size_t count_kind(const std::vector<BlockSpec>& specs, BlockKind k, bool gateable) {
  std::size_t n = 0;
  for (const auto& s : specs) n += (s.kind == k && s.gateable == gateable) ? 1 : 0;
  return n;
}

}  // namespace

TEST(UNetLayout, DefaultHasEightGateableResblocks) {
  Rng rng(1);
  TinyUNet<float> bb(TinyUNetConfig{}, rng);
  EXPECT_EQ(bb.gateable().size(), 8u);
  EXPECT_EQ(count_kind(bb.specs(), BlockKind::ConvResblock, true), 8u);
  std::size_t enc = 0, dec = 0;
  for (auto g : bb.gateable()) (bb.specs()[g].decoder ? dec : enc) += 1;
  EXPECT_EQ(enc, 4u);
  EXPECT_EQ(dec, 4u);
  EXPECT_GE(count_kind(bb.specs(), BlockKind::Downsample, false), 1u);
  EXPECT_GE(count_kind(bb.specs(), BlockKind::Upsample, false), 1u);
  EXPECT_EQ(bb.specs().front().kind, BlockKind::Embed);
  EXPECT_EQ(bb.specs().back().kind, BlockKind::Head);
}

TEST(DiTLayout, DepthEightHasEightGateableBlocks) {
  Rng rng(2);
  TinyDiT<float> bb(TinyDiTConfig{}, rng);
  EXPECT_EQ(bb.gateable().size(), 8u);
  EXPECT_EQ(count_kind(bb.specs(), BlockKind::TransformerBlock, true), 8u);
  EXPECT_EQ(count_kind(bb.specs(), BlockKind::Embed, false), 1u);
  EXPECT_EQ(count_kind(bb.specs(), BlockKind::Head, false), 1u);
}

TEST(Layout, GateableIffShapePreserving) {
  Rng rng(3);
  TinyUNet<float> u(TinyUNetConfig{}, rng);
  TinyDiT<float> d(TinyDiTConfig{}, rng);
  for (const auto* specs : {&u.specs(), &d.specs()}) {
    for (const auto& s : *specs) {
      if (s.gateable) {
        EXPECT_EQ(s.in_shape, s.out_shape) << s.index;
      }
      EXPECT_EQ(s.flops, count_block_flops(s));
    }
  }
}

TEST(Config, InvalidRejected) {
  Rng rng(4);
  TinyUNetConfig u;
  u.stage_channels = {};
  EXPECT_THROW(TinyUNet<float>(u, rng), ConfigError);
  u = TinyUNetConfig{};
  u.stage_channels = {16, 0};
  EXPECT_THROW(TinyUNet<float>(u, rng), ConfigError);
  TinyDiTConfig d;
  d.heads = 3;
  EXPECT_THROW(TinyDiT<float>(d, rng), ConfigError);
  d = TinyDiTConfig{};
  d.width = 32;
  d.heads = 4;
  EXPECT_THROW(TinyDiT<float>(d, rng), ConfigError);
}

template <class B>
void check_forward_basics(const B& bb, double t) {
  using T = typename B::scalar_type;
  Rng rng(5);
  auto x = randn<T>(detail::batched(2, bb.image_shape()), rng);
  auto c = cond_for<T>(2, t);
  auto y = bb.forward(x, c);
  EXPECT_EQ(y.shape(), x.shape());
  EXPECT_TRUE(testutil::bit_equal(y, bb.forward(x, c)));

  Injections<T> zeros;
  for (auto g : bb.gateable()) zeros.emplace(g, Tensor<T>::zeros(detail::batched(2, bb.specs()[g].out_shape)));
  EXPECT_TRUE(testutil::bit_equal(y, bb.forward(x, c, zeros)));

  for (auto g : bb.gateable()) {
    Injections<T> one;
    one.emplace(g, randn<T>(detail::batched(2, bb.specs()[g].out_shape), rng));
    EXPECT_GT(testutil::max_abs_diff(y, bb.forward(x, c, one)), 0.0) << "block " << g;
  }

  Injections<T> bad;
  bad.emplace(bb.specs().size(), Tensor<T>::zeros({2, 1}));
  EXPECT_THROW(bb.forward(x, c, bad), DimensionError);
  Injections<T> wrong;
  wrong.emplace(bb.gateable()[0], Tensor<T>::zeros({2, 1}));
  EXPECT_THROW(bb.forward(x, c, wrong), DimensionError);
}

TEST(Forward, UNetShapesInjectionAndDeterminism) {
  Rng rng(6);
  TinyUNet<float> bb(small_unet(), rng);
  check_forward_basics(bb, 321.0);
}

TEST(Forward, DiTShapesInjectionAndDeterminism) {
  Rng rng(7);
  TinyDiTConfig c;
  c.depth = 2;
  TinyDiT<float> bb(c, rng);
  check_forward_basics(bb, 0.4);
}

TEST(Forward, ConditioningValidated) {
  Rng rng(8);
  TinyUNet<float> bb(small_unet(), rng);
  auto x = randn<float>({1, 3, 16, 16}, rng);
  Conditioning<float> bad{{8}, {10.0}, Tensor<float>()};
  EXPECT_THROW(bb.forward(x, bad), UsageError);
  Conditioning<float> mismatch{{1, 2}, {10.0}, Tensor<float>()};
  EXPECT_THROW(bb.forward(randn<float>({2, 3, 16, 16}, rng), mismatch), UsageError);
  Conditioning<float> batch{{1, 2}, {10.0, 20.0}, Tensor<float>()};
  EXPECT_THROW(bb.forward(x, batch), DimensionError);
}

TEST(Freeze, FrozenParamsDoNotRequireGrad) {
  Rng rng(9);
  TinyUNet<float> bb(small_unet(), rng);
  freeze(bb);
  bool any = false;
  bb.for_each_param("", [&](const std::string&, Tensor<float>& t) { any = any || t.requires_grad(); });
  EXPECT_FALSE(any);
}

TEST(Freeze, AssertFrozenDetectsPerturbation) {
  Rng rng(10);
  TinyUNet<float> bb(small_unet(), rng);
  auto before = backbone_snapshot(bb);
  EXPECT_TRUE(assert_frozen(before, backbone_snapshot(bb)));
  auto params = named_params(bb);
  params[3].tensor.mutable_data()[0] += 1e-3f;
  EXPECT_FALSE(assert_frozen(before, backbone_snapshot(bb)));
}

TEST(Clone, DeepCopyIsIndependent) {
  Rng rng(11);
  TinyUNet<float> bb(small_unet(), rng);
  auto c = bb.clone();
  named_params(c)[0].tensor.mutable_data()[0] += 1.0f;
  EXPECT_NE(named_params(c)[0].tensor[0], named_params(bb)[0].tensor[0]);
}

TEST(Embedding, TimestepChangesOutput) {
  Rng rng(12);
  TinyUNet<float> bb(small_unet(), rng);
  auto x = randn<float>({1, 3, 16, 16}, rng);
  auto a = bb.forward(x, cond_for<float>(1, 10.0));
  auto b = bb.forward(x, cond_for<float>(1, 900.0));
  EXPECT_GT(testutil::max_abs_diff(a, b), 0.0);
}
