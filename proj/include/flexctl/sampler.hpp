#pragma once

// Routed inference. Each sample runs alone so masked-off control blocks can be
// removed from the computation.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "flexctl/backbone.hpp"
#include "flexctl/checkpoint.hpp"
#include "flexctl/config.hpp"
#include "flexctl/control.hpp"
#include "flexctl/diffusion.hpp"
#include "flexctl/errors.hpp"
#include "flexctl/image_io.hpp"
#include "flexctl/trainer.hpp"

namespace flexctl {

enum class SamplerKind { DDIM, RFlow };

inline SamplerKind sampler_from_string(const std::string& s) {
  if (s == "ddim") return SamplerKind::DDIM;
  if (s == "rflow") return SamplerKind::RFlow;
  throw ConfigError("unknown sampler '" + s + "' (expected ddim or rflow)");
}

inline std::string to_string(SamplerKind s) { return s == SamplerKind::DDIM ? "ddim" : "rflow"; }

inline SamplerKind default_sampler(BackboneKind k) { return k == BackboneKind::UNet ? SamplerKind::DDIM : SamplerKind::RFlow; }

inline void check_sampler(BackboneKind k, SamplerKind s) {
  if (s != default_sampler(k)) {
    throw ConfigError("sampler " + to_string(s) + " does not match backbone " + to_string(k) + " (use " +
                      to_string(default_sampler(k)) + ")");
  }
}

struct ActivationRow {
  std::size_t sample_id = 0;
  std::size_t step_index = 0;
  double timestep = 0;
  std::size_t block_index = 0;
  int hard = 0;
  double k_prime = 0;
  std::uint64_t flops_used = 0;
};

using ActivationLog = std::vector<ActivationRow>;

// Hard masks per step, [step][block].
using ForceSchedule = std::vector<std::vector<int>>;

struct SampleOptions {
  std::size_t steps = 20;
  std::optional<SamplerKind> sampler;
  std::uint64_t seed = 0;
  std::size_t sample_id = 0;
  int class_id = 0;
  std::optional<ForceSchedule> force;
  GumbelParams gumbel{};
};

template <class T>
struct SampleResult {
  Tensor<T> image;  // [1, C, H, W], clamped to [-1, 1]
  ActivationLog log;
  std::vector<std::uint64_t> step_flops;
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

template <class T>
Tensor<T> clamp_unit(const Tensor<T>& x) {
  std::vector<T> v(x.data().begin(), x.data().end());
  for (auto& e : v) {
    if (!std::isfinite(static_cast<double>(e))) throw NumericError("sampler produced a non-finite value");
    e = std::clamp(e, T(-1), T(1));
  }
  return Tensor<T>::from_data(x.shape(), std::move(v));
}

template <class T>
Tensor<T> initial_noise(const Shape& image, std::uint64_t seed, std::size_t sample_id) {
  Rng rng(derive_seed(seed, kStreamSample, sample_id));
  std::vector<T> v(shape_numel(image));
  for (auto& e : v) e = static_cast<T>(rng.normal());
  Shape s{1};
  s.insert(s.end(), image.begin(), image.end());
  return Tensor<T>::from_data(std::move(s), std::move(v));
}

// Denoising time grid: step i evaluates at times[i] and moves to next[i].
struct TimeGrid {
  std::vector<double> times;
  std::vector<double> next;
};

inline TimeGrid time_grid(SamplerKind kind, std::size_t steps, const NoiseSchedule& sched) {
  if (steps < 1) throw UsageError("steps must be >= 1");
  TimeGrid g;
  if (kind == SamplerKind::DDIM) {
    const auto ts = ddim_timesteps(sched.steps, steps);
    for (std::size_t i = 0; i < steps; ++i) {
      g.times.push_back(static_cast<double>(ts[i]));
      g.next.push_back(i + 1 < steps ? static_cast<double>(ts[i + 1]) : 0.0);
    }
  } else {
    for (std::size_t i = 0; i < steps; ++i) {
      g.times.push_back(1.0 - static_cast<double>(i) / static_cast<double>(steps));
      g.next.push_back(1.0 - static_cast<double>(i + 1) / static_cast<double>(steps));
    }
  }
  return g;
}

template <class T>
Tensor<T> solver_step(SamplerKind kind, const Tensor<T>& x, const Tensor<T>& pred, double t, double t_next,
                      const NoiseSchedule& sched) {
  if (kind == SamplerKind::DDIM) {
    return ddim_step(x, pred, static_cast<std::size_t>(t), static_cast<std::size_t>(t_next), sched, true);
  }
  return rflow_step(x, pred, t_next - t);
}

}  // namespace detail

// Control outputs of one denoising step for a single sample.
template <class B>
ControlOutput<typename B::scalar_type> route_step(const ControlBranch<B>& branch, const Tensor<typename B::scalar_type>& x,
                                                  const Conditioning<typename B::scalar_type>& cond,
                                                  const std::vector<int>* force, const GumbelParams& gumbel,
                                                  bool multiply = false) {
  ControlOptions opt;
  opt.phase = Phase::Infer;
  opt.gumbel = gumbel;
  opt.multiply_masks = multiply;
  if (force) {
    opt.force_mask = *force;
    opt.evaluate_routers = true;
  }
  return branch.forward(x, cond, opt);
}

// One routed sampling trajectory. With branch == nullptr the frozen backbone
// samples alone and the log stays empty.
template <class B>
SampleResult<typename B::scalar_type> sample(const B& backbone, const ControlBranch<B>* branch,
                                             const Tensor<typename B::scalar_type>& condition, const SampleOptions& o) {
  using T = typename B::scalar_type;
  const auto kind = o.sampler.value_or(default_sampler(B::kind));
  check_sampler(B::kind, kind);
  if (o.force) {
    if (!branch || branch->mode() != ControlMode::Flex) throw UsageError("force_mask applies to flex checkpoints only");
    if (o.force->size() != o.steps) throw UsageError("force_mask schedule covers " + std::to_string(o.force->size()) + " steps, sampling uses " + std::to_string(o.steps));
  }
  const auto sched = default_schedule();
  const auto grid = detail::time_grid(kind, o.steps, sched);
  const auto& img = backbone.image_shape();
  if (branch && condition.shape() != Shape{1, 1, img[1], img[2]}) {
    throw DimensionError("condition must be [1, 1, " + std::to_string(img[1]) + ", " + std::to_string(img[2]) + "], got " +
                         shape_str(condition.shape()));
  }
  SampleResult<T> res;
  Tensor<T> x = detail::initial_noise<T>(img, o.seed, o.sample_id);
  for (std::size_t i = 0; i < o.steps; ++i) {
    Conditioning<T> cond{{o.class_id}, {grid.times[i]}, condition};
    Injections<T> inj;
    if (branch) {
      const std::vector<int>* force = o.force ? &(*o.force)[i] : nullptr;
      auto co = route_step(*branch, x, cond, force, o.gumbel);
      std::vector<int> hard(branch->gate_count());
      for (std::size_t g = 0; g < hard.size(); ++g) hard[g] = co.hard[g][0];
      // Modes without routers are reported against the full table.
      const std::uint64_t used = branch->mode() == ControlMode::Flex ? co.flops_used : branch->table().used(hard);
      if (branch->mode() == ControlMode::Flex && used != branch->table().used(hard)) {
        throw NumericError("executed FLOPs disagree with the FLOPs table at step " + std::to_string(i));
      }
      res.step_flops.push_back(used);
      for (std::size_t g = 0; g < hard.size(); ++g) {
        const double kp = co.decisions.empty() ? 1.0 : co.decisions[g][0].k_prime;
        res.log.push_back({o.sample_id, i, grid.times[i], g, hard[g], kp, used});
      }
      inj = std::move(co.injections);
    }
    auto pred = backbone.forward(x, cond, inj);
    x = detail::solver_step(kind, x, pred, grid.times[i], grid.next[i], sched);
  }
  res.image = detail::clamp_unit(x);
  return res;
}

enum class SkipCheck { Equivalent, Different, Inapplicable };

// At (step_index, block_index) of a trajectory: if the block is masked off,
// compare the step's update computed with the block removed against the update
// computed with every block executed and masks applied multiplicatively.
template <class B>
SkipCheck skip_equivalence_check(const B& backbone, const ControlBranch<B>& branch, const Tensor<typename B::scalar_type>& condition,
                                 const SampleOptions& o, std::size_t block_index, std::size_t step_index, double tol = 1e-6) {
  using T = typename B::scalar_type;
  if (step_index >= o.steps || block_index >= branch.gate_count()) throw UsageError("skip_equivalence_check: index out of range");
  if (branch.mode() != ControlMode::Flex) return SkipCheck::Inapplicable;
  const auto kind = o.sampler.value_or(default_sampler(B::kind));
  check_sampler(B::kind, kind);
  const auto sched = default_schedule();
  const auto grid = detail::time_grid(kind, o.steps, sched);
  Tensor<T> x = detail::initial_noise<T>(backbone.image_shape(), o.seed, o.sample_id);
  for (std::size_t i = 0; i <= step_index; ++i) {
    Conditioning<T> cond{{o.class_id}, {grid.times[i]}, condition};
    const std::vector<int>* force = o.force ? &(*o.force)[i] : nullptr;
    auto co = route_step(branch, x, cond, force, o.gumbel);
    if (i < step_index) {
      x = detail::solver_step(kind, x, backbone.forward(x, cond, co.injections), grid.times[i], grid.next[i], sched);
      continue;
    }
    if (co.hard[block_index][0] == 1) return SkipCheck::Inapplicable;
    std::vector<int> hard(branch.gate_count());
    for (std::size_t g = 0; g < hard.size(); ++g) hard[g] = co.hard[g][0];
    auto dense = route_step(branch, x, cond, &hard, o.gumbel, true);
    const auto a = detail::solver_step(kind, x, backbone.forward(x, cond, co.injections), grid.times[i], grid.next[i], sched);
    const auto b = detail::solver_step(kind, x, backbone.forward(x, cond, dense.injections), grid.times[i], grid.next[i], sched);
    double worst = 0;
    for (std::size_t k = 0; k < a.numel(); ++k) {
      worst = std::max(worst, std::abs(static_cast<double>(a[k]) - static_cast<double>(b[k])));
    }
    return worst <= tol ? SkipCheck::Equivalent : SkipCheck::Different;
  }
  return SkipCheck::Inapplicable;
}

// ---- model loading ----

template <class B>
struct LoadedModel {
  TrainConfig config;
  B backbone;
  std::unique_ptr<ControlBranch<B>> branch;  // null for backbone-only checkpoints
};

template <class B>
LoadedModel<B> load_model(const Checkpoint& ck) {
  const auto& m = ck.metadata;
  const std::string format = m.value("format", "");
  TrainConfig cfg;
  if (format == "flexctl-train") {
    cfg = train_config_from_json(m.at("config"));
  } else if (format == "flexctl-backbone") {
    cfg.backbone_kind = m.at("backbone_kind").get<std::string>();
  } else {
    throw ParseError("checkpoint metadata has unknown format '" + format + "'", 0);
  }
  if (cfg.kind() != B::kind) throw ConfigError("checkpoint holds a " + cfg.backbone_kind + " backbone");
  LoadedModel<B> out{cfg, load_backbone<B>(ck, cfg), nullptr};
  if (format == "flexctl-train") {
    out.branch = std::make_unique<ControlBranch<B>>(make_branch(out.backbone, cfg));
    out.branch->for_each_param("branch.", [&](const std::string& name, Tensor<typename B::scalar_type>& t) {
      const Record* r = ck.find(name);
      if (!r) throw ParseError("checkpoint has no record '" + name + "'", 0);
      if (r->shape != t.shape()) throw ParseError("record '" + name + "' has the wrong shape", 0);
      auto d = t.mutable_data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<typename B::scalar_type>(r->data[i]);
    });
  }
  return out;
}

inline std::string checkpoint_backbone_kind(const Checkpoint& ck) {
  const auto& m = ck.metadata;
  if (m.contains("config")) return m.at("config").value("backbone_kind", "unet");
  return m.value("backbone_kind", "unet");
}

// ---- artifacts ----

inline constexpr const char* kActivationHeader = "sample_id,step_index,timestep,block_index,hard,k_prime,flops_used";

inline void write_activation_log(const ActivationLog& log, std::ostream& os) {
  os << kActivationHeader << '\n';
  for (const auto& r : log) {
    os << r.sample_id << ',' << r.step_index << ',' << detail::fmt_double(r.timestep) << ',' << r.block_index << ',' << r.hard
       << ',' << detail::fmt_double(r.k_prime) << ',' << r.flops_used << '\n';
  }
}

inline void write_activation_log(const ActivationLog& log, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  write_activation_log(log, f);
  if (!f) throw IoError("failed writing '" + path.string() + "'");
}

namespace detail {

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream ss(line);
  while (std::getline(ss, cur, ',')) out.push_back(cur);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

template <class V>
V parse_field(const std::string& s, std::size_t offset, const char* what) {
  V v{};
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw ParseError(std::string("bad ") + what + " '" + s + "'", offset);
  return v;
}

inline std::string strip_cr(std::string s) {
  if (!s.empty() && s.back() == '\r') s.pop_back();
  return s;
}

}  // namespace detail

inline ActivationLog parse_activation_log(std::istream& is) {
  std::string line;
  std::size_t offset = 0;
  if (!std::getline(is, line) || detail::strip_cr(line) != kActivationHeader) {
    throw ParseError("activation log must start with header '" + std::string(kActivationHeader) + "'", 0);
  }
  offset += line.size() + 1;
  ActivationLog log;
  while (std::getline(is, line)) {
    line = detail::strip_cr(line);
    if (line.empty()) {
      offset += 1;
      continue;
    }
    const auto f = detail::split_csv(line);
    if (f.size() != 7) throw ParseError("activation log row needs 7 fields", offset);
    ActivationRow r;
    r.sample_id = detail::parse_field<std::size_t>(f[0], offset, "sample_id");
    r.step_index = detail::parse_field<std::size_t>(f[1], offset, "step_index");
    r.timestep = detail::parse_field<double>(f[2], offset, "timestep");
    r.block_index = detail::parse_field<std::size_t>(f[3], offset, "block_index");
    r.hard = detail::parse_field<int>(f[4], offset, "hard");
    if (r.hard != 0 && r.hard != 1) throw ParseError("hard must be 0 or 1", offset);
    r.k_prime = detail::parse_field<double>(f[5], offset, "k_prime");
    r.flops_used = detail::parse_field<std::uint64_t>(f[6], offset, "flops_used");
    log.push_back(r);
    offset += line.size() + 1;
  }
  return log;
}

inline ActivationLog read_activation_log(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open '" + path.string() + "'");
  return parse_activation_log(f);
}

// force-mask CSV: step_index,block_index,mask. Every (step, block) pair must appear once.
inline ForceSchedule parse_force_schedule(std::istream& is, std::size_t steps, std::size_t blocks) {
  std::string line;
  if (!std::getline(is, line) || detail::strip_cr(line) != "step_index,block_index,mask") {
    throw ParseError("force-mask file must start with header 'step_index,block_index,mask'", 0);
  }
  std::size_t offset = line.size() + 1;
  ForceSchedule s(steps, std::vector<int>(blocks, -1));
  while (std::getline(is, line)) {
    line = detail::strip_cr(line);
    if (line.empty()) {
      offset += 1;
      continue;
    }
    const auto f = detail::split_csv(line);
    if (f.size() != 3) throw ParseError("force-mask row needs 3 fields", offset);
    const auto st = detail::parse_field<std::size_t>(f[0], offset, "step_index");
    const auto bl = detail::parse_field<std::size_t>(f[1], offset, "block_index");
    const auto m = detail::parse_field<int>(f[2], offset, "mask");
    if (st >= steps || bl >= blocks) throw ParseError("force-mask index out of range", offset);
    if (m != 0 && m != 1) throw ParseError("mask must be 0 or 1", offset);
    if (s[st][bl] != -1) throw ParseError("duplicate force-mask entry", offset);
    s[st][bl] = m;
    offset += line.size() + 1;
  }
  for (std::size_t st = 0; st < steps; ++st) {
    for (std::size_t bl = 0; bl < blocks; ++bl) {
      if (s[st][bl] == -1) {
        throw ParseError("force-mask file lacks step " + std::to_string(st) + " block " + std::to_string(bl), offset);
      }
    }
  }
  return s;
}

inline void write_force_schedule(const ForceSchedule& s, std::ostream& os) {
  os << "step_index,block_index,mask\n";
  for (std::size_t st = 0; st < s.size(); ++st) {
    for (std::size_t bl = 0; bl < s[st].size(); ++bl) os << st << ',' << bl << ',' << s[st][bl] << '\n';
  }
}

template <class T>
void write_image(const Tensor<T>& image, const std::filesystem::path& path) {
  if (image.rank() != 4 || image.dim(0) != 1) throw DimensionError("write_image expects [1, C, H, W]");
  std::vector<float> v(image.data().begin(), image.data().end());
  write_netpbm(image_from_planar(v, image.dim(1), image.dim(2), image.dim(3)), path);
}

}  // namespace flexctl
