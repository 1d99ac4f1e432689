#include <gtest/gtest.h>
#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "flexctl/analyzer.hpp"
#include "flexctl/checkpoint.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;  // stdout and stderr interleaved
};

Run run(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " " + std::string(FLEXCTL_CLI_PATH) + " " + args + " 2>&1";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  std::array<char, 4096> buf{};
  std::size_t n = 0;
  while ((n = fread(buf.data(), 1, buf.size(), p)) > 0) r.out.append(buf.data(), n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

fs::path write_config(const fs::path& dir, const std::string& extra = "") {
  const auto path = dir / "cfg.json";
  std::ofstream f(path);
  f << R"({"backbone_kind": "unet", "mode": "flex", "gamma": 0.5, "max_steps": 4, "warmup_steps": 1, "batch": 2,
  "num_samples": 16, "pretrain_steps": 2, "seed": 3,
  "unet": {"stage_channels": [8, 16], "resblocks_per_stage": 1, "time_embed_dim": 16},
  "output_checkpoint": ")"
    << (dir / "run.ckpt").string() << R"(", "log_path": ")" << (dir / "train.csv").string() << "\"" << extra << "}";
  return path;
}

}  // namespace

TEST(Cli, FlopsPrintsCsv) {
  const auto dir = testutil::temp_dir("cli_flops");
  const auto r = run("flops --config " + write_config(dir).string());
  ASSERT_EQ(r.code, 0) << r.out;
  std::istringstream is(r.out);
  const auto t = flexctl::parse_flops_csv(is);
  EXPECT_EQ(t.blocks(), 4u);
  EXPECT_TRUE(t.consistent());
}

TEST(Cli, UnknownSubcommandIsUsageError) {
  const auto r = run("bogus");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("bogus"), std::string::npos) << r.out;
}

TEST(Cli, MissingSubcommandAndBadFlags) {
  EXPECT_EQ(run("").code, 1);
  const auto r = run("flops --no-such-flag");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("--no-such-flag"), std::string::npos) << r.out;
  EXPECT_EQ(run("flops").code, 1);
}

TEST(Cli, HelpDocumentsFlags) {
  const auto top = run("--help");
  EXPECT_EQ(top.code, 0);
  for (const char* word : {"train", "sample", "analyze", "flops", "selftest", "--seed", "--config"}) {
    EXPECT_NE(top.out.find(word), std::string::npos) << word;
  }
  const auto s = run("sample --help");
  EXPECT_EQ(s.code, 0);
  for (const char* word : {"--ckpt", "--cond", "--class", "--steps", "--sampler", "--out", "--force-mask"}) {
    EXPECT_NE(s.out.find(word), std::string::npos) << word;
  }
}

TEST(Cli, SelftestPasses) {
  const auto r = run("selftest");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos) << r.out;
}

TEST(Cli, ConfigErrorsExitOne) {
  const auto dir = testutil::temp_dir("cli_cfg");
  EXPECT_EQ(run("flops --config " + write_config(dir, R"(, "bogus_key": 1)").string()).code, 1);
  EXPECT_EQ(run("flops --config " + write_config(dir, R"(, "gamma": 0)").string()).code, 1);
  EXPECT_EQ(run("selftest", "FLEXCTL_SEED=abc").code, 1);
}

TEST(Cli, TrainSampleAnalyzePipeline) {
  const auto dir = testutil::temp_dir("cli_pipe");
  const auto cfg = write_config(dir);
  auto tr = run("train --config " + cfg.string());
  ASSERT_EQ(tr.code, 0) << tr.out;
  ASSERT_TRUE(fs::exists(dir / "run.ckpt"));
  std::ifstream log(dir / "train.csv");
  std::string header;
  std::getline(log, header);
  EXPECT_EQ(header, "step,l_sd,l_c,l_total,sparsity,seconds");

  auto fl = run("flops --ckpt " + (dir / "run.ckpt").string());
  ASSERT_EQ(fl.code, 0) << fl.out;
  std::ofstream(dir / "flops.csv") << fl.out;

  // condition: edge map of a synthetic sample
  const auto s = flexctl::generate_synthetic(1, 1)[0];
  flexctl::write_netpbm(flexctl::map_to_image(s.condition, 16, 16), dir / "cond.pgm");

  const std::string sample_args = "sample --ckpt " + (dir / "run.ckpt").string() + " --cond " + (dir / "cond.pgm").string() +
                                  " --class 3 --steps 5 --num-samples 2 --out ";
  auto sa = run(sample_args + (dir / "s1").string(), "FLEXCTL_SEED=7");
  ASSERT_EQ(sa.code, 0) << sa.out;
  auto sb = run(sample_args + (dir / "s2").string() + " --seed 99", "FLEXCTL_SEED=7");
  ASSERT_EQ(sb.code, 0) << sb.out;
  // the environment seed wins over --seed
  EXPECT_EQ(flexctl::read_file_bytes(dir / "s1" / "sample_000.ppm"), flexctl::read_file_bytes(dir / "s2" / "sample_000.ppm"));
  EXPECT_EQ(flexctl::read_file_bytes(dir / "s1" / "activations.csv"), flexctl::read_file_bytes(dir / "s2" / "activations.csv"));
  auto sc = run(sample_args + (dir / "s3").string() + " --seed 99");
  ASSERT_EQ(sc.code, 0) << sc.out;
  EXPECT_NE(flexctl::read_file_bytes(dir / "s1" / "sample_000.ppm"), flexctl::read_file_bytes(dir / "s3" / "sample_000.ppm"));

  auto an = run("analyze --log " + (dir / "s1" / "activations.csv").string() + " --flops " + (dir / "flops.csv").string() +
                " --out " + (dir / "an").string());
  ASSERT_EQ(an.code, 0) << an.out;
  for (const char* f : {"matrix.csv", "heatmap.pgm", "curve.csv"}) EXPECT_TRUE(fs::exists(dir / "an" / f)) << f;
  const auto heat = flexctl::read_netpbm(dir / "an" / "heatmap.pgm");
  EXPECT_EQ(heat.width, 4u);
  EXPECT_EQ(heat.height, 5u);

  // a budget below the always-on share is infeasible
  auto bad = run("analyze --log " + (dir / "s1" / "activations.csv").string() + " --flops " + (dir / "flops.csv").string() +
                 " --out " + (dir / "an2").string() + " --extract-budget 0.01");
  EXPECT_EQ(bad.code, 1) << bad.out;

  // a forced all-on schedule replays through --force-mask
  std::ofstream sched(dir / "on.csv");
  sched << "step_index,block_index,mask\n";
  for (int st = 0; st < 5; ++st) {
    for (int b = 0; b < 4; ++b) sched << st << ',' << b << ",1\n";
  }
  sched.close();
  auto fm = run(sample_args + (dir / "s4").string() + " --force-mask " + (dir / "on.csv").string());
  ASSERT_EQ(fm.code, 0) << fm.out;
  const auto rows = flexctl::read_activation_log(dir / "s4" / "activations.csv");
  for (const auto& row : rows) EXPECT_EQ(row.hard, 1);
}
