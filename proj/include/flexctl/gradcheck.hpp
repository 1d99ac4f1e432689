#pragma once

// Finite-difference check of the training gradients of a Flex control branch
// with respect to its router and zero-module parameters, in 64-bit.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "flexctl/backbone.hpp"
#include "flexctl/budget.hpp"
#include "flexctl/control.hpp"
#include "flexctl/data.hpp"
#include "flexctl/diffusion.hpp"
#include "flexctl/nn.hpp"
#include "flexctl/trainer.hpp"

namespace flexctl {

struct GradCheckReport {
  std::size_t total_params = 0;   // backbone + branch
  std::size_t checked = 0;        // scalars compared
  double max_rel_router = 0;
  double max_rel_zero = 0;
  double max_abs_router_grad = 0;
  double surrogate_gap = 0;       // |surrogate loss - training loss| at the base point
  std::size_t active_masks = 0;   // hard masks equal to 1 at the base point
  std::size_t mask_count = 0;
  std::string worst_name;         // element with the largest relative error
  double worst_analytic = 0;
  double worst_numeric = 0;
};

// |a - n| / max(|a|, |n|, floor)
inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Central-difference round-off in 64-bit is about 1e-11 for these losses, so
// relative errors are measured against at least this magnitude.
inline constexpr double kGradFloor = 1e-6;

struct GradCheckSetup {
  TinyUNetConfig unet;
  std::uint64_t seed = 0;
  std::size_t batch = 2;
  double eps = 1e-4;
  double lambda_c = 0.5;
  double gamma = 0.5;
  double zero_init_scale = 0.2;  // zero modules are moved off zero so they carry signal
  std::size_t stride = 1;        // compare every stride-th scalar
};

inline GradCheckSetup small_gradcheck_setup() {
  GradCheckSetup s;
  s.unet.stage_channels = {8, 16};
  s.unet.resblocks_per_stage = 1;
  s.unet.time_embed_dim = 16;
  return s;
}

inline GradCheckReport check_flex_gradients(const GradCheckSetup& s) {
  using T = double;
  using B = TinyUNet<T>;
  Rng init(derive_seed(s.seed, kStreamBackboneInit));
  B backbone(s.unet, init);
  freeze(backbone);
  Rng binit(derive_seed(s.seed, kStreamBranchInit));
  ControlBranch<B> branch(backbone, ControlMode::Flex, binit);

  ParamList<T> router, zero;
  branch.for_each_router_param("", [&](const std::string& n, Tensor<T>& t) { router.push_back({n, t}); });
  branch.for_each_branch_param("", [&](const std::string& n, Tensor<T>& t) {
    if (n.rfind("zero.", 0) == 0 || n.rfind("cond.zero.", 0) == 0) zero.push_back({n, t});
  });
  Rng perturb(derive_seed(s.seed, 100));
  for (auto& p : zero) {
    for (auto& v : p.tensor.mutable_data()) v = perturb.uniform(-s.zero_init_scale, s.zero_init_scale);
  }

  const auto data = generate_synthetic(derive_seed(s.seed, kStreamData), s.batch);
  std::vector<std::size_t> idx(s.batch);
  for (std::size_t i = 0; i < s.batch; ++i) idx[i] = i;
  auto batch = make_batch<T>(data, idx);
  Rng nrng(derive_seed(s.seed, 101));
  const auto nz = corrupt<B>(batch.images, nrng, default_schedule());
  const Conditioning<T> cond{batch.class_ids, nz.timesteps, batch.conditions};
  const std::uint64_t noise_seed = derive_seed(s.seed, 102);

  auto loss_fn = [&](const std::vector<std::vector<double>>* offset, ControlOutput<T>* out) {
    Rng g(noise_seed);
    ControlOptions opt;
    opt.phase = Phase::Train;
    opt.rng = &g;
    opt.st_offset = offset;
    ControlOutput<T> co;
    auto pred = controlled_forward(backbone, branch, nz.x_t, cond, opt, &co);
    auto ratios = flops_ratio(co.st_masks, branch.table());
    auto l = total_loss(diffusion_loss(pred, nz.target), cost_loss(ratios, s.gamma), s.lambda_c);
    if (out) *out = std::move(co);
    return l;
  };

  GradCheckReport rep;
  rep.total_params = count_params(named_params(backbone)) + count_params(named_params(branch));
  std::vector<Tensor<T>> inputs = tensors_of(router);
  for (const auto& p : zero) inputs.push_back(p.tensor);
  std::vector<Tensor<T>> analytic;
  ControlOutput<T> base;
  double base_loss = 0;
  {
    GradTape<T> tape;
    auto l = loss_fn(nullptr, &base);
    base_loss = l.item();
    analytic = tape.gradient(l, inputs);
  }
  std::vector<std::vector<double>> offset(base.decisions.size());
  for (std::size_t g = 0; g < base.decisions.size(); ++g) {
    for (const auto& d : base.decisions[g]) {
      offset[g].push_back(static_cast<double>(d.hard) - d.soft);
      rep.active_masks += static_cast<std::size_t>(d.hard);
      ++rep.mask_count;
    }
  }
  rep.surrogate_gap = std::abs(loss_fn(&offset, nullptr).item() - base_loss);

  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const bool is_router = k < router.size();
    auto data_k = inputs[k].mutable_data();
    for (std::size_t i = 0; i < data_k.size(); i += std::max<std::size_t>(1, s.stride)) {
      const double orig = data_k[i];
      data_k[i] = orig + s.eps;
      const double up = loss_fn(&offset, nullptr).item();
      data_k[i] = orig - s.eps;
      const double down = loss_fn(&offset, nullptr).item();
      data_k[i] = orig;
      const double num = (up - down) / (2 * s.eps);
      const double a = analytic[k][i];
      const double e = relative_error(a, num, kGradFloor);
      if (e > std::max(rep.max_rel_router, rep.max_rel_zero)) {
        rep.worst_name = (is_router ? router[k].name : zero[k - router.size()].name) + "[" + std::to_string(i) + "]";
        rep.worst_analytic = a;
        rep.worst_numeric = num;
      }
      if (is_router) {
        rep.max_rel_router = std::max(rep.max_rel_router, e);
        rep.max_abs_router_grad = std::max(rep.max_abs_router_grad, std::abs(a));
      } else {
        rep.max_rel_zero = std::max(rep.max_rel_zero, e);
      }
      ++rep.checked;
    }
  }
  return rep;
}

}  // namespace flexctl
