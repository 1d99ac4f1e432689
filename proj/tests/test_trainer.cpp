#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "flexctl/checkpoint.hpp"
#include "flexctl/config.hpp"
#include "flexctl/data.hpp"
#include "flexctl/optim.hpp"
#include "flexctl/selftest.hpp"
#include "flexctl/trainer.hpp"
#include "test_util.hpp"

using namespace flexctl;

namespace {

TrainConfig tiny_config(std::uint64_t seed = 3) {
  auto c = detail::tiny_train_config(seed);
  c.max_steps = 8;
  c.warmup_steps = 3;
  c.batch = 2;
  return c;
}

}  // namespace

TEST(Data, DeterministicAndBounded) {
  auto a = generate_synthetic(42, 64);
  auto b = generate_synthetic(42, 64);
  ASSERT_EQ(a.size(), 64u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].image, b[i].image);
    EXPECT_EQ(a[i].condition, b[i].condition);
    EXPECT_EQ(a[i].class_id, b[i].class_id);
    ASSERT_EQ(a[i].image.size(), 3u * 16 * 16);
    for (float v : a[i].image) ASSERT_TRUE(v >= -1.0f && v <= 1.0f);
    for (float v : a[i].condition) ASSERT_TRUE(v == 0.0f || v == 1.0f);
    EXPECT_GE(a[i].class_id, 0);
    EXPECT_LT(a[i].class_id, 8);
  }
  EXPECT_NE(generate_synthetic(43, 1)[0].image, a[0].image);
  EXPECT_THROW(generate_synthetic(1, 0), UsageError);
}

TEST(Data, ConditionIsEdgeMapOfImage) {
  for (const auto& s : generate_synthetic(5, 32)) {
    EXPECT_EQ(s.condition, edge_map(s.image, 3, 16, 16));
  }
}

TEST(Data, BlankImageHasNoEdges) {
  std::vector<float> flat(3 * 16 * 16, 0.3f);
  for (float v : edge_map(flat, 3, 16, 16)) EXPECT_EQ(v, 0.0f);
}

TEST(Data, EdgeFractionInRange) {
  auto d = generate_synthetic(7, 1000);
  double frac = 0;
  for (const auto& s : d) {
    for (float v : s.condition) frac += v;
  }
  frac /= 1000.0 * 256.0;
  EXPECT_GE(frac, 0.02);
  EXPECT_LE(frac, 0.25);
}

TEST(Data, EveryClassAppears) {
  std::vector<int> seen(8, 0);
  for (const auto& s : generate_synthetic(8, 400)) seen[static_cast<std::size_t>(s.class_id)]++;
  for (int n : seen) EXPECT_GT(n, 0);
}

TEST(AdamW, ZeroGradientZeroDecayLeavesParams) {
  auto p = Tensor<float>::parameter({3}, {0.5f, -1.0f, 2.0f});
  ParamList<float> ps{{"p", p}};
  AdamW opt({1e-2, 0.9, 0.999, 1e-8, 0.0});
  opt.step(ps, {Tensor<float>::zeros({3})});
  EXPECT_EQ(p[0], 0.5f);
  EXPECT_EQ(p[1], -1.0f);
  EXPECT_EQ(p[2], 2.0f);
}

// Hand simulation of two steps from the reference update.
TEST(AdamW, MatchesReferenceUpdate) {
  auto p = Tensor<double>::parameter({1}, {1.0});
  ParamList<double> ps{{"p", p}};
  const double lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8, wd = 0.01;
  AdamW opt({lr, b1, b2, eps, wd});
  double ref = 1.0, m = 0, v = 0;
  for (int t = 1; t <= 2; ++t) {
    const double g = t == 1 ? 0.3 : -0.2;
    opt.step(ps, {Tensor<double>::from_data({1}, {g})});
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, t)), vh = v / (1 - std::pow(b2, t));
    ref = ref - lr * wd * ref - lr * mh / (std::sqrt(vh) + eps);
    EXPECT_NEAR(p[0], ref, 1e-7) << "step " << t;
  }
  // first step moves by about lr against the gradient sign
  auto q = Tensor<double>::parameter({1}, {0.0});
  ParamList<double> qs{{"q", q}};
  AdamW o2({lr, b1, b2, eps, 0.0});
  o2.step(qs, {Tensor<double>::from_data({1}, {5.0})});
  EXPECT_NEAR(q[0], -lr, 1e-8);
}

TEST(AdamW, DecayAloneShrinks) {
  auto p = Tensor<double>::parameter({2}, {2.0, -3.0});
  ParamList<double> ps{{"p", p}};
  AdamW opt({0.1, 0.9, 0.999, 1e-8, 0.5});
  double prev0 = 2.0, prev1 = 3.0;
  for (int i = 0; i < 5; ++i) {
    opt.step(ps, {Tensor<double>::zeros({2})});
    EXPECT_LT(std::abs(p[0]), prev0);
    EXPECT_LT(std::abs(p[1]), prev1);
    prev0 = std::abs(p[0]);
    prev1 = std::abs(p[1]);
  }
}

TEST(Checkpoint, RoundTripIsByteIdentical) {
  Checkpoint ck;
  ck.metadata = {{"format", "test"}, {"n", 3}};
  ck.add("a.weight", Shape{2, 3}, {1, 2, 3, 4, 5, 6});
  ck.add("b", Shape{1}, {-0.25f});
  const auto bytes = serialize_checkpoint(ck);
  EXPECT_EQ(bytes.substr(0, 8), "FLEXCKPT");
  auto back = parse_checkpoint(bytes);
  EXPECT_EQ(serialize_checkpoint(back), bytes);
  ASSERT_NE(back.find("a.weight"), nullptr);
  EXPECT_EQ(back.find("a.weight")->shape, (Shape{2, 3}));
  EXPECT_EQ(back.find("b")->data[0], -0.25f);
  EXPECT_EQ(back.metadata.at("n"), 3);
}

TEST(Checkpoint, TruncationAndCorruptionRejected) {
  Checkpoint ck;
  ck.add("w", Shape{4}, {1, 2, 3, 4});
  const auto bytes = serialize_checkpoint(ck);
  for (std::size_t cut : {std::size_t{3}, std::size_t{10}, bytes.size() - 1}) {
    EXPECT_THROW(parse_checkpoint(bytes.substr(0, cut)), ParseError) << cut;
  }
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(parse_checkpoint(bad), ParseError);
  EXPECT_THROW(parse_checkpoint(bytes + "z"), ParseError);
  auto ver = bytes;
  ver[8] = 2;
  EXPECT_THROW(parse_checkpoint(ver), VersionError);
}

TEST(Checkpoint, ParseErrorReportsOffset) {
  Checkpoint ck;
  ck.add("w", Shape{4}, {1, 2, 3, 4});
  const auto bytes = serialize_checkpoint(ck);
  try {
    parse_checkpoint(bytes.substr(0, bytes.size() - 2));
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_GT(e.offset(), 0u);
  }
}

TEST(Checkpoint, BackboneSaveLoadBitExact) {
  auto cfg = tiny_config();
  auto bb = make_backbone<UNetF>(cfg);
  auto dir = testutil::temp_dir("bbck");
  save_backbone(bb, cfg, dir / "bb.ckpt");
  auto loaded = load_backbone<UNetF>(load_checkpoint_file(dir / "bb.ckpt"), cfg);
  EXPECT_TRUE(snapshots_equal(backbone_snapshot(bb), backbone_snapshot(loaded)));
  save_backbone(loaded, cfg, dir / "bb2.ckpt");
  EXPECT_EQ(read_file_bytes(dir / "bb.ckpt"), read_file_bytes(dir / "bb2.ckpt"));
}

TEST(Config, JsonRoundTripAndUnknownKeys) {
  TrainConfig c;
  c.gamma = 0.3;
  c.unet.stage_channels = {8, 16};
  c.gumbel.temperature = 3.0;
  auto back = train_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  auto j = to_json(c);
  j["gama"] = 0.4;
  EXPECT_THROW(train_config_from_json(j), ConfigError);
  auto k = to_json(c);
  k["unet"]["width"] = 3;
  EXPECT_THROW(train_config_from_json(k), ConfigError);
  auto w = to_json(c);
  w["gamma"] = "half";
  EXPECT_THROW(train_config_from_json(w), ConfigError);
}

TEST(Config, Validation) {
  TrainConfig c;
  EXPECT_EQ(c.effective_warmup(), 400);
  EXPECT_EQ(c.lambda_c, 0.5);
  EXPECT_EQ(c.lr, 1e-3);
  c.warmup_steps = 3000;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.batch = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.mode = "huge";
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, LoadFromFile) {
  auto dir = testutil::temp_dir("cfg");
  {
    std::ofstream f(dir / "ok.json");
    f << R"({"gamma": 0.7, "max_steps": 10})";
  }
  auto c = load_train_config(dir / "ok.json");
  EXPECT_EQ(c.gamma, 0.7);
  EXPECT_EQ(c.max_steps, 10);
  {
    std::ofstream f(dir / "bad.json");
    f << "{ not json";
  }
  EXPECT_THROW(load_train_config(dir / "bad.json"), ParseError);
}

TEST(Pretrain, LossDecreases) {
  auto cfg = tiny_config();
  cfg.pretrain_steps = 60;
  cfg.batch = 8;
  cfg.num_samples = 64;
  auto data = generate_synthetic(derive_seed(cfg.seed, kStreamData), 64);
  auto bb = make_backbone<UNetF>(cfg);
  auto losses = pretrain_backbone(bb, data, cfg);
  ASSERT_EQ(losses.size(), 60u);
  double first = 0, last = 0;
  for (int i = 0; i < 10; ++i) first += losses[i];
  for (int i = 50; i < 60; ++i) last += losses[i];
  EXPECT_LT(last, first);
  bool any = false;
  bb.for_each_param("", [&](const std::string&, Tensor<float>& t) { any = any || t.requires_grad(); });
  EXPECT_FALSE(any);
}

TEST(Trainer, WarmupForcesAllMasksOn) {
  auto cfg = tiny_config();
  Trainer<UNetF> tr(cfg, make_backbone<UNetF>(cfg));
  auto router_before = snapshot(tr.router_params());
  for (int s = 0; s < cfg.warmup_steps; ++s) {
    auto r = tr.train_step();
    EXPECT_TRUE(r.warmup);
    EXPECT_EQ(r.sparsity, 1.0);
    for (const auto& g : r.hard) {
      for (int h : g) EXPECT_EQ(h, 1);
    }
  }
  EXPECT_TRUE(snapshots_equal(router_before, snapshot(tr.router_params())));
  auto r = tr.train_step();
  EXPECT_FALSE(r.warmup);
  EXPECT_FALSE(snapshots_equal(router_before, snapshot(tr.router_params())));
}

TEST(Trainer, BackboneFrozenOverHundredSteps) {
  auto cfg = tiny_config();
  cfg.max_steps = 100;
  cfg.warmup_steps = 10;
  cfg.batch = 1;
  auto bb = make_backbone<UNetF>(cfg);
  auto before = backbone_snapshot(bb);
  Trainer<UNetF> tr(cfg, std::move(bb));
  auto branch_before = snapshot(tr.branch_params());
  tr.run();
  EXPECT_TRUE(assert_frozen(before, backbone_snapshot(tr.backbone())));
  EXPECT_FALSE(snapshots_equal(branch_before, snapshot(tr.branch_params())));
}

TEST(Trainer, ProgressLogFormat) {
  auto cfg = tiny_config();
  cfg.max_steps = 3;
  cfg.warmup_steps = 1;
  Trainer<UNetF> tr(cfg, make_backbone<UNetF>(cfg));
  std::ostringstream os;
  Trainer<UNetF>::write_progress_header(os);
  tr.run(&os);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "step,l_sd,l_c,l_total,sparsity,seconds");
  int rows = 0;
  while (std::getline(is, line)) {
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 5);
    EXPECT_EQ(line.substr(0, line.find(',')), std::to_string(rows));
    ++rows;
  }
  EXPECT_EQ(rows, 3);
}

TEST(Trainer, ResumeMatchesUninterruptedRun) {
  auto cfg = tiny_config();
  Trainer<UNetF> full(cfg, make_backbone<UNetF>(cfg));
  full.run();

  auto half_cfg = cfg;
  half_cfg.max_steps = 5;
  half_cfg.warmup_steps = cfg.warmup_steps;
  Trainer<UNetF> first(half_cfg, make_backbone<UNetF>(cfg));
  first.run();
  const auto bytes = serialize_checkpoint(first.to_checkpoint());

  Trainer<UNetF> second(cfg, make_backbone<UNetF>(cfg));
  second.restore(parse_checkpoint(bytes));
  EXPECT_EQ(second.step(), 5);
  second.run();
  auto a = full.to_checkpoint(), b = second.to_checkpoint();
  // only the recorded config may differ (max_steps)
  a.metadata.erase("config");
  b.metadata.erase("config");
  EXPECT_EQ(serialize_checkpoint(a), serialize_checkpoint(b));
}

TEST(Trainer, SeededRunsAreByteIdentical) {
  EXPECT_EQ(detail::tiny_run_bytes(9), detail::tiny_run_bytes(9));
  EXPECT_NE(detail::tiny_run_bytes(9), detail::tiny_run_bytes(10));
}

TEST(Trainer, GradAccumulationAveragesMicroBatches) {
  auto cfg = tiny_config();
  cfg.grad_accum = 2;
  cfg.max_steps = 2;
  cfg.warmup_steps = 0;
  Trainer<UNetF> tr(cfg, make_backbone<UNetF>(cfg));
  auto r = tr.train_step();
  EXPECT_TRUE(std::isfinite(r.l_total));
  EXPECT_NEAR(r.l_total, r.l_sd + cfg.lambda_c * r.l_c, 1e-6);
}

TEST(Trainer, RestoreRejectsOtherMode) {
  auto cfg = tiny_config();
  Trainer<UNetF> tr(cfg, make_backbone<UNetF>(cfg));
  auto ck = tr.to_checkpoint();
  auto other = cfg;
  other.mode = "large";
  Trainer<UNetF> tl(other, make_backbone<UNetF>(other));
  EXPECT_THROW(tl.restore(ck), ConfigError);
}

TEST(Trainer, DiTFlexSteps) {
  auto cfg = tiny_config();
  cfg.backbone_kind = "dit";
  cfg.dit.depth = 2;
  cfg.max_steps = 3;
  cfg.warmup_steps = 1;
  Trainer<DiTF> tr(cfg, make_backbone<DiTF>(cfg));
  for (const auto& r : tr.run()) EXPECT_TRUE(std::isfinite(r.l_total));
}
