#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "flexctl/analyzer.hpp"
#include "flexctl/checkpoint.hpp"
#include "flexctl/config.hpp"
#include "flexctl/errors.hpp"
#include "flexctl/image_io.hpp"
#include "flexctl/sampler.hpp"
#include "flexctl/selftest.hpp"
#include "flexctl/trainer.hpp"

namespace fs = std::filesystem;
using namespace flexctl;

namespace {

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string config;
  bool verbose = false;
};

// FLEXCTL_SEED, then --seed, then the fallback.
std::uint64_t resolve_seed(const Globals& g, std::uint64_t fallback) {
  if (const char* env = std::getenv("FLEXCTL_SEED"); env && *env) {
    try {
      std::size_t used = 0;
      const auto v = std::stoull(env, &used);
      if (used != std::string(env).size()) throw std::invalid_argument("trailing characters");
      return v;
    } catch (const std::exception&) {
      throw UsageError(std::string("FLEXCTL_SEED must be an unsigned integer, got '") + env + "'");
    }
  }
  return g.seed.value_or(fallback);
}

TrainConfig config_with_seed(const Globals& g) {
  if (g.config.empty()) throw UsageError("--config is required");
  auto cfg = load_train_config(g.config);
  cfg.seed = resolve_seed(g, cfg.seed);
  return cfg;
}

// ---- train ----

template <class B>
int run_train(TrainConfig cfg, const std::string& resume, bool verbose) {
  if (cfg.output_checkpoint.empty()) throw ConfigError("config key 'output_checkpoint' must be set");
  B backbone = [&] {
    if (!cfg.backbone_checkpoint.empty() && fs::exists(cfg.backbone_checkpoint)) {
      if (verbose) std::cerr << "loading backbone from " << cfg.backbone_checkpoint << '\n';
      return load_backbone<B>(load_checkpoint_file(cfg.backbone_checkpoint), cfg);
    }
    auto bb = make_backbone<B>(cfg);
    const auto data = generate_synthetic(derive_seed(cfg.seed, kStreamData), static_cast<std::size_t>(cfg.num_samples));
    pretrain_backbone(bb, data, cfg, [&](long long step, double loss) {
      if (verbose && step % 100 == 0) std::cerr << "pretrain step " << step << " loss " << loss << '\n';
    });
    if (!cfg.backbone_checkpoint.empty()) save_backbone(bb, cfg, cfg.backbone_checkpoint);
    return bb;
  }();
  Trainer<B> trainer(cfg, std::move(backbone));
  if (!resume.empty()) trainer.restore(load_checkpoint_file(resume));
  std::ofstream log;
  if (!cfg.log_path.empty()) {
    if (fs::path(cfg.log_path).has_parent_path()) fs::create_directories(fs::path(cfg.log_path).parent_path());
    const bool append = !resume.empty() && fs::exists(cfg.log_path);
    log.open(cfg.log_path, append ? std::ios::app : std::ios::trunc);
    if (!log) throw IoError("cannot open log '" + cfg.log_path + "'");
    if (!append) Trainer<B>::write_progress_header(log);
  }
  trainer.run(log.is_open() ? &log : nullptr, [&](const StepResult& r) {
    if (verbose && r.step % 50 == 0) {
      std::cerr << "step " << r.step << " l_sd " << r.l_sd << " l_c " << r.l_c << " sparsity " << r.sparsity << " ema "
                << trainer.ema() << '\n';
    }
  });
  trainer.save(cfg.output_checkpoint);
  std::cout << "trained " << trainer.step() << " steps, flops-ratio ema " << trainer.ema() << ", checkpoint "
            << cfg.output_checkpoint << '\n';
  return 0;
}

// ---- sample ----

struct SampleArgs {
  std::string ckpt;
  std::string cond;
  int class_id = 0;
  std::size_t steps = 20;
  std::string sampler;
  std::string out;
  std::string force_mask;
  std::size_t num_samples = 1;
};

template <class B>
int run_sample(const Checkpoint& ck, const SampleArgs& a, std::uint64_t seed) {
  using T = typename B::scalar_type;
  auto model = load_model<B>(ck);
  const auto img = model.backbone.image_shape();
  Tensor<T> cond;
  if (!a.cond.empty()) {
    cond = Tensor<T>::from_data({1, 1, img[1], img[2]}, read_condition(a.cond, img[1], img[2]));
  } else if (model.branch) {
    throw UsageError("--cond is required for a control checkpoint");
  }
  SampleOptions o;
  o.steps = a.steps;
  if (!a.sampler.empty()) o.sampler = sampler_from_string(a.sampler);
  o.seed = seed;
  o.class_id = a.class_id;
  o.gumbel = model.config.gumbel;
  if (!a.force_mask.empty()) {
    if (!model.branch) throw UsageError("--force-mask needs a control checkpoint");
    std::ifstream f(a.force_mask);
    if (!f) throw IoError("cannot open '" + a.force_mask + "'");
    o.force = parse_force_schedule(f, a.steps, model.branch->gate_count());
  }
  ActivationLog log;
  double ratio = 0;
  for (std::size_t i = 0; i < a.num_samples; ++i) {
    o.sample_id = i;
    auto r = sample(model.backbone, model.branch.get(), cond, o);
    std::ostringstream name;
    name << "sample_" << std::setw(3) << std::setfill('0') << i << ".ppm";
    write_image(r.image, fs::path(a.out) / name.str());
    log.insert(log.end(), r.log.begin(), r.log.end());
    if (model.branch) {
      for (auto f : r.step_flops) ratio += static_cast<double>(f) / static_cast<double>(model.branch->table().large_total);
    }
  }
  if (model.branch) {
    write_activation_log(log, fs::path(a.out) / "activations.csv");
    std::cout << "mean flops ratio " << ratio / static_cast<double>(a.num_samples * a.steps) << '\n';
  }
  std::cout << "wrote " << a.num_samples << " sample(s) to " << a.out << '\n';
  return 0;
}

// ---- flops ----

template <class B>
void write_flops_for(const B& backbone, const TrainConfig& cfg, std::ostream& os) {
  auto branch = make_branch(backbone, cfg);
  std::vector<BlockKind> kinds;
  for (auto idx : branch.control_blocks()) kinds.push_back(backbone.specs()[idx].kind);
  write_flops_csv(branch.table(), kinds, os);
}

// ---- analyze ----

int run_analyze(const std::string& log_path, const std::string& flops_path, const std::string& out,
                std::optional<double> budget) {
  const auto log = read_activation_log(log_path);
  const auto table = read_flops_csv(flops_path);
  const auto m = aggregate(log);
  const auto curve = sparsity_curve(m, table);
  const fs::path dir(out);
  fs::create_directories(dir);
  {
    std::ofstream f(dir / "matrix.csv", std::ios::trunc);
    write_matrix_csv(m, f);
    if (!f) throw IoError("failed writing matrix.csv");
  }
  write_netpbm(matrix_heatmap(m), dir / "heatmap.pgm");
  {
    std::ofstream f(dir / "curve.csv", std::ios::trunc);
    write_curve_csv(m, curve, f);
    if (!f) throw IoError("failed writing curve.csv");
  }
  const auto pd = phase_density(m);
  std::cout << std::fixed << std::setprecision(6) << "samples " << m.samples << ", steps " << m.steps << ", blocks " << m.blocks
            << "\nmean flops ratio " << curve.mean_flops_ratio << "\nmean count ratio " << curve.mean_count_ratio
            << "\nactivation early third " << pd.early << ", late third " << pd.late << '\n';
  if (budget) {
    const auto s = extract_static_schedule(m, table, *budget);
    std::ofstream f(dir / "schedule.csv", std::ios::trunc);
    write_force_schedule(s.masks, f);
    if (!f) throw IoError("failed writing schedule.csv");
    std::cout << "static schedule ratio " << s.realized_ratio << " (budget " << *budget << ")\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"flexctl: routed control branches for small diffusion models"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "Run seed (FLEXCTL_SEED overrides it)");
  app.add_option("--config", g.config, "Training config JSON");
  app.add_flag("--verbose,-v", g.verbose, "Progress on stderr");

  auto* train = app.add_subcommand("train", "Pretrain or load the backbone, then train the control branch");
  std::string resume;
  train->add_option("--resume", resume, "Training checkpoint to continue from")->check(CLI::ExistingFile);

  auto* samp = app.add_subcommand("sample", "Routed sampling from a checkpoint");
  SampleArgs sa;
  samp->add_option("--ckpt", sa.ckpt, "Training or backbone checkpoint")->required()->check(CLI::ExistingFile);
  samp->add_option("--cond", sa.cond, "Condition image (PGM or PPM, 0-255)");
  samp->add_option("--class", sa.class_id, "Class id")->check(CLI::NonNegativeNumber);
  samp->add_option("--steps", sa.steps, "Denoising steps")->check(CLI::PositiveNumber);
  samp->add_option("--sampler", sa.sampler, "ddim (unet) or rflow (dit); default follows the backbone");
  samp->add_option("--out", sa.out, "Output directory")->required();
  samp->add_option("--force-mask", sa.force_mask, "CSV step_index,block_index,mask overriding the routers")->check(CLI::ExistingFile);
  samp->add_option("--num-samples", sa.num_samples, "Number of samples (ids 0..n-1)")->check(CLI::PositiveNumber);

  auto* an = app.add_subcommand("analyze", "Activation statistics from a sampling log");
  std::string log_path, flops_path, an_out;
  std::optional<double> budget;
  an->add_option("--log", log_path, "Activation log CSV")->required()->check(CLI::ExistingFile);
  an->add_option("--flops", flops_path, "FLOPs table CSV from 'flexctl flops'")->required()->check(CLI::ExistingFile);
  an->add_option("--out", an_out, "Output directory")->required();
  an->add_option("--extract-budget", budget, "Also extract a static schedule for this FLOPs ratio");

  auto* fl = app.add_subcommand("flops", "Print the control branch FLOPs table as CSV");
  std::string fl_ckpt;
  fl->add_option("--ckpt", fl_ckpt, "Take the configuration from a checkpoint instead of --config")->check(CLI::ExistingFile);

  auto* st = app.add_subcommand("selftest", "Run the quick invariant suite");

  // CLI11 reports a stray word as an extra argument; name it as a subcommand instead
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--seed" || a == "--config") {
      ++i;
      continue;
    }
    if (a.empty() || a[0] == '-') continue;
    if (app.get_subcommand_no_throw(a) == nullptr) {
      std::cerr << "usage error: unknown subcommand '" << a << "'\n" << app.help();
      return 1;
    }
    break;
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*train) {
      const auto cfg = config_with_seed(g);
      return cfg.kind() == BackboneKind::UNet ? run_train<UNetF>(cfg, resume, g.verbose) : run_train<DiTF>(cfg, resume, g.verbose);
    }
    if (*samp) {
      const auto ck = load_checkpoint_file(sa.ckpt);
      const auto seed = resolve_seed(g, 0);
      return backbone_kind_from_string(checkpoint_backbone_kind(ck)) == BackboneKind::UNet ? run_sample<UNetF>(ck, sa, seed)
                                                                                           : run_sample<DiTF>(ck, sa, seed);
    }
    if (*an) return run_analyze(log_path, flops_path, an_out, budget);
    if (*fl) {
      TrainConfig cfg;
      if (!fl_ckpt.empty()) {
        const auto ck = load_checkpoint_file(fl_ckpt);
        if (!ck.metadata.contains("config")) throw UsageError("--ckpt must be a training checkpoint");
        cfg = train_config_from_json(ck.metadata.at("config"));
      } else {
        cfg = config_with_seed(g);
      }
      if (cfg.kind() == BackboneKind::UNet) {
        write_flops_for(make_backbone<UNetF>(cfg), cfg, std::cout);
      } else {
        write_flops_for(make_backbone<DiTF>(cfg), cfg, std::cout);
      }
      return 0;
    }
    if (*st) {
      bool all = true;
      for (const auto& r : run_selftest(resolve_seed(g, 0))) {
        std::cout << (r.pass ? "PASS " : "FAIL ") << r.name << ": " << r.detail << '\n';
        all = all && r.pass;
      }
      return all ? 0 : 2;
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const InfeasibleBudget& e) {
    std::cerr << "infeasible budget: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
