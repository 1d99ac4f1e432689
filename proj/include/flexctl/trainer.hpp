#pragma once

// Backbone pretraining and control-branch training.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "flexctl/backbone.hpp"
#include "flexctl/budget.hpp"
#include "flexctl/checkpoint.hpp"
#include "flexctl/config.hpp"
#include "flexctl/control.hpp"
#include "flexctl/data.hpp"
#include "flexctl/diffusion.hpp"
#include "flexctl/errors.hpp"
#include "flexctl/nn.hpp"
#include "flexctl/optim.hpp"
#include "flexctl/rng.hpp"

namespace flexctl {

// Independent random streams derived from the run seed.
enum Stream : std::uint64_t {
  kStreamData = 1,
  kStreamBackboneInit = 2,
  kStreamBranchInit = 3,
  kStreamPretrain = 4,
  kStreamTrain = 5,
  kStreamSample = 6,
};

using UNetF = TinyUNet<float>;
using DiTF = TinyDiT<float>;

template <class B>
struct BackboneTraits;

template <class T>
struct BackboneTraits<TinyUNet<T>> {
  static TinyUNetConfig config(const TrainConfig& c) { return c.unet; }
};

template <class T>
struct BackboneTraits<TinyDiT<T>> {
  static TinyDiTConfig config(const TrainConfig& c) { return c.dit; }
};

template <class B>
B make_backbone(const TrainConfig& cfg) {
  Rng rng(derive_seed(cfg.seed, kStreamBackboneInit));
  return B(BackboneTraits<B>::config(cfg), rng);
}

template <class B>
ControlBranch<B> make_branch(const B& backbone, const TrainConfig& cfg) {
  Rng rng(derive_seed(cfg.seed, kStreamBranchInit));
  return ControlBranch<B>(backbone, cfg.control_mode(), rng);
}

// Noised inputs and regression targets for one batch.
template <class T>
struct NoisedBatch {
  Tensor<T> x_t;
  Tensor<T> target;
  std::vector<double> timesteps;
};

// UNet: discrete t in [1, T] and noise target. DiT: continuous t in (0, 1)
// on the straight path with velocity target.
template <class B>
NoisedBatch<typename B::scalar_type> corrupt(const Tensor<typename B::scalar_type>& x0, Rng& rng, const NoiseSchedule& sched) {
  using T = typename B::scalar_type;
  const std::size_t nb = x0.dim(0), per = x0.numel() / nb;
  std::vector<T> xt(x0.numel()), tgt(x0.numel());
  NoisedBatch<T> out;
  const auto src = x0.data();
  for (std::size_t b = 0; b < nb; ++b) {
    double ca = 0, cb = 0;
    if constexpr (B::kind == BackboneKind::UNet) {
      const auto t = static_cast<std::size_t>(rng.uniform_int(1, static_cast<std::int64_t>(sched.steps)));
      const double ab = sched.alpha_bar_at(t);
      ca = std::sqrt(ab);
      cb = std::sqrt(1.0 - ab);
      out.timesteps.push_back(static_cast<double>(t));
    } else {
      const double t = rng.uniform_open();
      ca = 1.0 - t;
      cb = t;
      out.timesteps.push_back(t);
    }
    for (std::size_t i = 0; i < per; ++i) {
      const double e = rng.normal();
      const double x = src[b * per + i];
      xt[b * per + i] = static_cast<T>(ca * x + cb * e);
      if constexpr (B::kind == BackboneKind::UNet) {
        tgt[b * per + i] = static_cast<T>(e);
      } else {
        tgt[b * per + i] = static_cast<T>(e - x);
      }
    }
  }
  out.x_t = Tensor<T>::from_data(x0.shape(), std::move(xt));
  out.target = Tensor<T>::from_data(x0.shape(), std::move(tgt));
  return out;
}

inline std::vector<std::size_t> draw_indices(Rng& rng, std::size_t n, std::size_t count) {
  std::vector<std::size_t> idx(count);
  for (auto& i : idx) i = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n) - 1));
  return idx;
}

inline void check_finite(double v, const std::string& what, long long step) {
  if (!std::isfinite(v)) {
    throw NumericError(what + " is not finite at step " + std::to_string(step) + " (value " + std::to_string(v) + ")");
  }
}

// Train the backbone on class-conditioned denoising without spatial control.
// Returns the per-step losses; the backbone is frozen afterwards.
template <class B>
std::vector<double> pretrain_backbone(B& backbone, const std::vector<SyntheticSample>& data, const TrainConfig& cfg,
                                      const std::function<void(long long, double)>& on_step = {}) {
  using T = typename B::scalar_type;
  const auto sched = default_schedule();
  auto params = named_params(backbone);
  for (auto& p : params) p.tensor.set_requires_grad(true);
  auto tensors = tensors_of(params);
  AdamW opt({cfg.pretrain_lr, 0.9, 0.999, 1e-8, 0.0});
  std::vector<double> losses;
  const double n = static_cast<double>(std::max<long long>(1, cfg.pretrain_steps));
  for (long long step = 0; step < cfg.pretrain_steps; ++step) {
    // cosine decay to a tenth of the base rate
    const double c = 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / n));
    opt.set_lr(cfg.pretrain_lr * (0.1 + 0.9 * c));
    Rng rng(derive_seed(cfg.seed, kStreamPretrain, static_cast<std::uint64_t>(step)));
    auto batch = make_batch<T>(data, draw_indices(rng, data.size(), static_cast<std::size_t>(cfg.batch)));
    auto nz = corrupt<B>(batch.images, rng, sched);
    Conditioning<T> cond{batch.class_ids, nz.timesteps, batch.conditions};
    std::vector<Tensor<T>> grads;
    double lv = 0;
    {
      GradTape<T> tape;
      auto loss = diffusion_loss(backbone.forward(nz.x_t, cond), nz.target);
      lv = static_cast<double>(loss.item());
      check_finite(lv, "pretraining loss", step);
      grads = tape.gradient(loss, tensors);
    }
    opt.step(params, grads);
    losses.push_back(lv);
    if (on_step) on_step(step, lv);
  }
  freeze(backbone);
  return losses;
}

inline nlohmann::json backbone_metadata(const TrainConfig& cfg) {
  return {{"format", "flexctl-backbone"}, {"backbone_kind", cfg.backbone_kind}, {"unet", to_json(cfg.unet)}, {"dit", to_json(cfg.dit)}};
}

template <class B>
void save_backbone(B& backbone, const TrainConfig& cfg, const std::filesystem::path& path) {
  Checkpoint ck;
  ck.metadata = backbone_metadata(cfg);
  add_params(ck, backbone, "backbone.");
  save_checkpoint_file(ck, path);
}

// Any checkpoint holding "backbone." records (backbone-only or training).
template <class B>
B load_backbone(const Checkpoint& ck, TrainConfig cfg) {
  const auto& m = ck.metadata;
  if (m.contains("unet")) cfg.unet = unet_config_from_json(m.at("unet"));
  if (m.contains("dit")) cfg.dit = dit_config_from_json(m.at("dit"));
  if (m.contains("config")) {
    const auto& c = m.at("config");
    if (c.contains("unet")) cfg.unet = unet_config_from_json(c.at("unet"));
    if (c.contains("dit")) cfg.dit = dit_config_from_json(c.at("dit"));
  }
  B bb = make_backbone<B>(cfg);
  assign_params(bb, ck, "backbone.");
  freeze(bb);
  return bb;
}

struct StepResult {
  long long step = 0;
  double l_sd = 0;
  double l_c = 0;
  double l_total = 0;
  double sparsity = 0;  // batch mean FLOPs ratio
  bool warmup = false;
  std::vector<std::vector<int>> hard;  // last micro-batch, [g][b]
};

template <class B>
class Trainer {
 public:
  using T = typename B::scalar_type;

  Trainer(TrainConfig cfg, B backbone)
      : cfg_(std::move(cfg)),
        data_(generate_synthetic(derive_seed(cfg_.seed, kStreamData), static_cast<std::size_t>(cfg_.num_samples))),
        backbone_(std::move(backbone)),
        branch_(make_branch(backbone_, cfg_)),
        opt_branch_({cfg_.lr, 0.9, 0.999, 1e-8, cfg_.weight_decay}),
        opt_router_({cfg_.lr, 0.9, 0.999, 1e-8, cfg_.weight_decay}) {
    cfg_.validate();
    freeze(backbone_);
    branch_.for_each_branch_param("branch.", [&](const std::string& n, Tensor<T>& t) { branch_params_.push_back({n, t}); });
    branch_.for_each_router_param("branch.", [&](const std::string& n, Tensor<T>& t) { router_params_.push_back({n, t}); });
    for (auto& p : branch_params_) p.tensor.set_requires_grad(true);
    for (auto& p : router_params_) p.tensor.set_requires_grad(true);
    frozen_ = backbone_snapshot(backbone_);
  }

  const TrainConfig& config() const { return cfg_; }
  const B& backbone() const { return backbone_; }
  B& backbone() { return backbone_; }
  const ControlBranch<B>& branch() const { return branch_; }
  ControlBranch<B>& branch() { return branch_; }
  long long step() const { return step_; }
  double ema() const { return ema_; }
  const std::vector<SyntheticSample>& data() const { return data_; }
  const ParamList<T>& branch_params() const { return branch_params_; }
  const ParamList<T>& router_params() const { return router_params_; }

  bool in_warmup() const { return step_ < cfg_.effective_warmup(); }

  StepResult train_step() {
    const auto sched = default_schedule();
    Rng rng(derive_seed(cfg_.seed, kStreamTrain, static_cast<std::uint64_t>(step_)));
    const bool warm = in_warmup();
    const bool train_routers = !warm && !router_params_.empty();
    auto tensors = tensors_of(branch_params_);
    if (train_routers) {
      for (const auto& p : router_params_) tensors.push_back(p.tensor);
    }
    std::vector<Tensor<T>> acc;
    StepResult r;
    r.step = step_;
    r.warmup = warm;
    const auto accum = static_cast<std::size_t>(cfg_.grad_accum);
    const T inv = static_cast<T>(1.0 / static_cast<double>(accum));
    for (std::size_t micro = 0; micro < accum; ++micro) {
      auto batch = make_batch<T>(data_, draw_indices(rng, data_.size(), static_cast<std::size_t>(cfg_.batch)));
      auto nz = corrupt<B>(batch.images, rng, sched);
      Conditioning<T> cond{batch.class_ids, nz.timesteps, batch.conditions};
      ControlOptions opt;
      opt.phase = Phase::Train;
      opt.warmup = warm;
      opt.gumbel = cfg_.gumbel;
      opt.rng = &rng;
      std::vector<Tensor<T>> grads;
      {
        GradTape<T> tape;
        ControlOutput<T> co;
        auto pred = controlled_forward(backbone_, branch_, nz.x_t, cond, opt, &co);
        auto l_sd = diffusion_loss(pred, nz.target);
        auto ratios = flops_ratio(co.st_masks, branch_.table());
        auto l_c = cost_loss(ratios, cfg_.gamma);
        auto total = total_loss(l_sd, l_c, cfg_.lambda_c);
        const double vs = l_sd.item(), vc = l_c.item(), vt = total.item();
        check_finite(vs, "diffusion loss", step_);
        check_finite(vc, "cost loss", step_);
        check_finite(vt, "total loss", step_);
        r.l_sd += vs / static_cast<double>(accum);
        r.l_c += vc / static_cast<double>(accum);
        r.l_total += vt / static_cast<double>(accum);
        r.sparsity += mean_of(ratios) / static_cast<double>(accum);
        r.hard = co.hard;
        grads = tape.gradient(accum > 1 ? scale(total, inv) : total, tensors);
      }
      if (acc.empty()) {
        acc = std::move(grads);
      } else {
        for (std::size_t k = 0; k < acc.size(); ++k) acc[k] = add(acc[k], grads[k]);
      }
    }
    std::vector<Tensor<T>> g_branch(acc.begin(), acc.begin() + static_cast<std::ptrdiff_t>(branch_params_.size()));
    opt_branch_.step(branch_params_, g_branch);
    if (train_routers) {
      std::vector<Tensor<T>> g_router(acc.begin() + static_cast<std::ptrdiff_t>(branch_params_.size()), acc.end());
      opt_router_.step(router_params_, g_router);
    }
    if (!assert_frozen(frozen_, backbone_snapshot(backbone_))) {
      throw NumericError("backbone parameters changed during step " + std::to_string(step_));
    }
    ema_ = step_ == 0 ? r.sparsity : kEmaDecay * ema_ + (1.0 - kEmaDecay) * r.sparsity;
    ++step_;
    return r;
  }

  // Train until max_steps. Progress rows go to `log` when given.
  std::vector<StepResult> run(std::ostream* log = nullptr, const std::function<void(const StepResult&)>& on_step = {}) {
    std::vector<StepResult> out;
    const auto start = std::chrono::steady_clock::now();
    while (step_ < cfg_.max_steps) {
      auto r = train_step();
      if (log) {
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        write_progress_row(*log, r, secs);
      }
      if (on_step) on_step(r);
      out.push_back(std::move(r));
    }
    return out;
  }

  static void write_progress_header(std::ostream& os) { os << "step,l_sd,l_c,l_total,sparsity,seconds\n"; }

  static void write_progress_row(std::ostream& os, const StepResult& r, double seconds) {
    os << r.step << ',' << std::setprecision(9) << r.l_sd << ',' << r.l_c << ',' << r.l_total << ',' << r.sparsity << ','
       << std::fixed << std::setprecision(3) << seconds << std::defaultfloat << '\n';
  }

  Checkpoint to_checkpoint() {
    Checkpoint ck;
    ck.metadata = {{"format", "flexctl-train"},
                   {"config", to_json(cfg_)},
                   {"step", step_},
                   {"ema", ema_},
                   {"adam_branch_t", opt_branch_.step_count()},
                   {"adam_router_t", opt_router_.step_count()}};
    add_params(ck, backbone_, "backbone.");
    for (const auto& p : branch_params_) ck.add(p.name, p.tensor);
    for (const auto& p : router_params_) ck.add(p.name, p.tensor);
    add_moments(ck, "adam.branch.", branch_params_, opt_branch_);
    add_moments(ck, "adam.router.", router_params_, opt_router_);
    return ck;
  }

  void save(const std::filesystem::path& path) { save_checkpoint_file(to_checkpoint(), path); }

  // Restore parameters, optimizer state and step counter from a training checkpoint.
  void restore(const Checkpoint& ck) {
    const auto& m = ck.metadata;
    if (!m.contains("format") || m.at("format") != "flexctl-train") throw ParseError("not a training checkpoint", 0);
    const auto saved = train_config_from_json(m.at("config"));
    if (saved.backbone_kind != cfg_.backbone_kind || saved.mode != cfg_.mode) {
      throw ConfigError("checkpoint was trained as " + saved.backbone_kind + "/" + saved.mode + ", config asks for " +
                        cfg_.backbone_kind + "/" + cfg_.mode);
    }
    assign_params(backbone_, ck, "backbone.");
    freeze(backbone_);
    frozen_ = backbone_snapshot(backbone_);
    assign_list(branch_params_, ck);
    assign_list(router_params_, ck);
    restore_moments(ck, "adam.branch.", branch_params_, opt_branch_, m.at("adam_branch_t").get<long long>());
    restore_moments(ck, "adam.router.", router_params_, opt_router_, m.at("adam_router_t").get<long long>());
    step_ = m.at("step").get<long long>();
    ema_ = m.at("ema").get<double>();
  }

 private:
  static constexpr double kEmaDecay = 0.95;

  static double mean_of(const Tensor<T>& v) {
    double s = 0;
    for (std::size_t i = 0; i < v.numel(); ++i) s += static_cast<double>(v[i]);
    return s / static_cast<double>(v.numel());
  }

  static void assign_list(ParamList<T>& params, const Checkpoint& ck) {
    for (auto& p : params) {
      const Record* r = ck.find(p.name);
      if (!r) throw ParseError("checkpoint has no record '" + p.name + "'", 0);
      if (r->shape != p.tensor.shape()) throw ParseError("record '" + p.name + "' has the wrong shape", 0);
      auto dst = p.tensor.mutable_data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(r->data[i]);
    }
  }

  static void add_moments(Checkpoint& ck, const std::string& prefix, const ParamList<T>& params, const AdamW& opt) {
    if (opt.first_moments().empty()) return;
    for (std::size_t k = 0; k < params.size(); ++k) {
      ck.add(prefix + "m." + params[k].name, params[k].tensor.shape(), opt.first_moments()[k]);
      ck.add(prefix + "v." + params[k].name, params[k].tensor.shape(), opt.second_moments()[k]);
    }
  }

  static void restore_moments(const Checkpoint& ck, const std::string& prefix, const ParamList<T>& params, AdamW& opt,
                              long long t) {
    if (t == 0) {
      opt.restore({}, {}, 0);
      return;
    }
    std::vector<std::vector<float>> m, v;
    for (const auto& p : params) {
      const Record* rm = ck.find(prefix + "m." + p.name);
      const Record* rv = ck.find(prefix + "v." + p.name);
      if (!rm || !rv) throw ParseError("checkpoint lacks optimizer state for '" + p.name + "'", 0);
      m.push_back(rm->data);
      v.push_back(rv->data);
    }
    opt.restore(std::move(m), std::move(v), t);
  }

  TrainConfig cfg_;
  std::vector<SyntheticSample> data_;
  B backbone_;
  ControlBranch<B> branch_;
  ParamList<T> branch_params_;
  ParamList<T> router_params_;
  AdamW opt_branch_;
  AdamW opt_router_;
  std::vector<std::vector<T>> frozen_;
  long long step_ = 0;
  double ema_ = 0.0;
};

}  // namespace flexctl
