#pragma once

// Trainable control branch: copies of backbone blocks, one zero module per
// copied gateable block, a condition encoder ending in a zero module, and
// (in Flex mode) one router per copied gateable block.
//
// Layouts
//   Large/Flex  every block but the head is copied; control output of
//               gateable block i is injected into backbone block i.
//   Vanilla     UNet: encoder half copied, gateable g feeds decoder block
//               G-1-g. DiT: first depth/2 blocks copied, block k feeds 2k and
//               2k+1.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include "flexctl/backbone.hpp"
#include "flexctl/budget.hpp"
#include "flexctl/errors.hpp"
#include "flexctl/nn.hpp"
#include "flexctl/rng.hpp"
#include "flexctl/router.hpp"
#include "flexctl/tensor.hpp"

namespace flexctl {

enum class ControlMode { Vanilla, Large, Flex };
enum class Phase { Train, Infer };

inline std::string to_string(ControlMode m) {
  switch (m) {
    case ControlMode::Vanilla: return "vanilla";
    case ControlMode::Large: return "large";
    case ControlMode::Flex: return "flex";
  }
  return "?";
}

inline ControlMode control_mode_from_string(const std::string& s) {
  if (s == "vanilla") return ControlMode::Vanilla;
  if (s == "large") return ControlMode::Large;
  if (s == "flex") return ControlMode::Flex;
  throw ConfigError("unknown mode '" + s + "'");
}

struct ControlOptions {
  Phase phase = Phase::Infer;
  // Hard mask per control block, applied to every sample. Flex only.
  std::optional<std::vector<int>> force_mask;
  // Run routers even when masks are forced (for logging k').
  bool evaluate_routers = false;
  // Infer phase: execute every block and apply masks multiplicatively
  // instead of removing masked-off blocks from the computation.
  bool multiply_masks = false;
  // Train phase: masks fixed to 1 and routers not evaluated.
  bool warmup = false;
  GumbelParams gumbel{};
  bool noise_free = false;
  Rng* rng = nullptr;
  // Train phase: use m = soft + offset[g][b] with a constant offset instead of
  // the straight-through mask. With offset = hard - soft at a base point this
  // is a smooth function whose derivative equals the straight-through
  // gradient, so it can be checked by finite differences.
  const std::vector<std::vector<double>>* st_offset = nullptr;
};

template <class T>
struct ControlOutput {
  Injections<T> injections;
  // decisions[g][b]; empty when routers were not evaluated.
  std::vector<std::vector<RouterDecision>> decisions;
  // Mask values entering the FLOPs ratio, [B, G]. Straight-through in Flex training.
  Tensor<T> st_masks;
  // Hard masks actually applied, [g][b].
  std::vector<std::vector<int>> hard;
  // FLOPs executed per sample (infer phase with structural skipping).
  std::uint64_t flops_used = 0;
};

template <class B>
class ControlBranch {
 public:
  using T = typename B::scalar_type;
  using scalar_type = T;
  static constexpr bool kUNet = B::kind == BackboneKind::UNet;
  using Router = std::conditional_t<kUNet, RouterUNet<T>, RouterDiT<T>>;
  using Zero = std::conditional_t<kUNet, Conv2d<T>, Linear<T>>;

  ControlBranch(const B& backbone, ControlMode mode, Rng& rng) : mode_(mode), copy_(backbone.clone()) {
    build_layout(backbone);
    build_condition_encoder(rng);
    for (std::size_t g = 0; g < gate_.size(); ++g) {
      const auto& s = spec(gate_[g]);
      if constexpr (kUNet) {
        zeros_.push_back(Conv2d<T>::zeros(s.out_shape[0], s.out_shape[0], 1));
      } else {
        zeros_.push_back(Linear<T>::zeros(s.out_shape[1], s.out_shape[1]));
      }
    }
    if (mode_ == ControlMode::Flex) {
      for (std::size_t g = 0; g < gate_.size(); ++g) {
        const auto& in = spec(gate_[g]).in_shape;
        if constexpr (kUNet) {
          routers_.push_back(RouterUNet<T>::init(in[0], rng));
        } else {
          routers_.push_back(RouterDiT<T>::init(in[0], in[1], rng));
        }
      }
    }
    for (auto idx : used_) {
      copy_.for_each_block_param(idx, "", [](const std::string&, Tensor<T>& t) { t.set_requires_grad(true); });
    }
    build_table();
  }

  ControlMode mode() const { return mode_; }
  const B& copy() const { return copy_; }
  std::size_t gate_count() const { return gate_.size(); }
  // Backbone layout indices executed by the branch, in order.
  const std::vector<std::size_t>& used_blocks() const { return used_; }
  // Layout index of each control block.
  const std::vector<std::size_t>& control_blocks() const { return gate_; }
  // Backbone layout indices fed by each control block.
  const std::vector<std::vector<std::size_t>>& targets() const { return targets_; }
  const FlopsTable& table() const { return table_; }
  const std::vector<Router>& routers() const { return routers_; }
  std::vector<Router>& routers() { return routers_; }
  const std::vector<Zero>& zero_modules() const { return zeros_; }
  std::vector<Zero>& zero_modules() { return zeros_; }

  // FLOPs of a mode's full execution (every block on).
  std::uint64_t full_execution_flops() const {
    std::uint64_t s = table_.base;
    for (auto f : table_.per_block) s += f;
    return s;
  }

  // c_s [B, 1, H, W] -> feature with the first control block's input shape.
  Tensor<T> encode_condition(const Tensor<T>& cs) const {
    const auto& img = copy_.image_shape();
    if (cs.rank() != 4 || cs.dim(1) != 1 || cs.dim(2) != img[1] || cs.dim(3) != img[2]) {
      throw DimensionError("condition must be [B, 1, " + std::to_string(img[1]) + ", " + std::to_string(img[2]) +
                           "], got " + shape_str(cs.shape()));
    }
    if constexpr (kUNet) {
      return cond_zero_conv_(silu(cond_conv2_(silu(cond_conv1_(cs)))));
    } else {
      auto a = silu(cond_conv1_(cs));
      for (std::size_t i = 0; i < pool_steps_; ++i) a = avg_pool2x(a);
      a = silu(cond_conv2_(a));
      const std::size_t b = a.dim(0), c = a.dim(1), n = a.dim(2) * a.dim(3);
      return cond_zero_lin_(permute(reshape(a, {b, c, n}), {0, 2, 1}));
    }
  }

  ControlOutput<T> forward(const Tensor<T>& x, const Conditioning<T>& cond, const ControlOptions& opt) const {
    if (opt.force_mask && mode_ != ControlMode::Flex) {
      throw UsageError("masks cannot be supplied in " + to_string(mode_) + " mode");
    }
    if (opt.force_mask && opt.force_mask->size() != gate_.size()) {
      throw UsageError("force_mask has " + std::to_string(opt.force_mask->size()) + " entries for " +
                       std::to_string(gate_.size()) + " control blocks");
    }
    const std::size_t nb = cond.batch();
    if (x.shape() != detail::batched(nb, copy_.image_shape())) throw DimensionError("control: input shape");
    if (!cond.spatial.defined()) throw UsageError("control: conditioning has no spatial input");
    if (cond.spatial.dim(0) != nb) throw DimensionError("control: condition batch mismatch");
    const bool compose = opt.phase == Phase::Train || opt.multiply_masks;
    return compose ? forward_composed(x, cond, opt) : forward_structural(x, cond, opt);
  }

  // Parameter groups. Routers are listed separately so warm-up can exclude them.
  template <class F>
  void for_each_branch_param(const std::string& prefix, F&& f) {
    for (auto idx : used_) copy_.for_each_block_param(idx, prefix + "blocks." + std::to_string(idx) + ".", f);
    for (std::size_t g = 0; g < zeros_.size(); ++g) zeros_[g].for_each_param(prefix + "zero." + std::to_string(g) + ".", f);
    cond_conv1_.for_each_param(prefix + "cond.conv1.", f);
    cond_conv2_.for_each_param(prefix + "cond.conv2.", f);
    if constexpr (kUNet) {
      cond_zero_conv_.for_each_param(prefix + "cond.zero.", f);
    } else {
      cond_zero_lin_.for_each_param(prefix + "cond.zero.", f);
    }
  }

  template <class F>
  void for_each_router_param(const std::string& prefix, F&& f) {
    for (std::size_t g = 0; g < routers_.size(); ++g) routers_[g].for_each_param(prefix + "router." + std::to_string(g) + ".", f);
  }

  template <class F>
  void for_each_param(const std::string& prefix, F&& f) {
    for_each_branch_param(prefix, f);
    for_each_router_param(prefix, f);
  }

 private:
  const BlockSpec& spec(std::size_t idx) const { return copy_.specs()[idx]; }

  void build_layout(const B& bb) {
    const auto& gates = bb.gateable();
    const std::size_t ng = gates.size();
    const std::size_t head = bb.specs().size() - 1;
    if (mode_ != ControlMode::Vanilla) {
      for (std::size_t i = 0; i < head; ++i) used_.push_back(i);
      for (auto g : gates) {
        gate_.push_back(g);
        targets_.push_back({g});
      }
      return;
    }
    if constexpr (kUNet) {
      const std::size_t half = ng / 2;
      for (std::size_t i = 0; i <= gates[half - 1]; ++i) used_.push_back(i);
      for (std::size_t g = 0; g < half; ++g) {
        gate_.push_back(gates[g]);
        targets_.push_back({gates[ng - 1 - g]});
      }
    } else {
      if (ng % 2 != 0) throw ConfigError("vanilla DiT layout needs an even depth");
      used_.push_back(0);
      for (std::size_t k = 0; k < ng / 2; ++k) {
        used_.push_back(gates[k]);
        gate_.push_back(gates[k]);
        targets_.push_back({gates[2 * k], gates[2 * k + 1]});
      }
    }
  }

  void build_condition_encoder(Rng& rng) {
    const auto& first = spec(gate_.at(0)).in_shape;
    if constexpr (kUNet) {
      const std::size_t c0 = first[0], c1 = std::max<std::size_t>(1, c0 / 2);
      cond_conv1_ = Conv2d<T>::init(1, c1, 3, rng);
      cond_conv2_ = Conv2d<T>::init(c1, c0, 3, rng);
      cond_zero_conv_ = Conv2d<T>::zeros(c0, c0, 1);
    } else {
      const std::size_t p = copy_.config().patch;
      if ((p & (p - 1)) != 0) throw ConfigError("dit condition encoder needs a power-of-two patch");
      pool_steps_ = 0;
      for (std::size_t q = p; q > 1; q /= 2) ++pool_steps_;
      cond_conv1_ = Conv2d<T>::init(1, kDitCondHidden1, 3, rng);
      cond_conv2_ = Conv2d<T>::init(kDitCondHidden1, kDitCondHidden2, 3, rng);
      cond_zero_lin_ = Linear<T>::zeros(kDitCondHidden2, first[1]);
    }
  }

  std::uint64_t condition_flops() const {
    const auto& img = copy_.image_shape();
    const std::uint64_t h = img[1], w = img[2];
    const auto& first = spec(gate_[0]).in_shape;
    if constexpr (kUNet) {
      const std::uint64_t c0 = first[0], c1 = cond_conv1_.out_channels();
      return flops::conv(1, c1, 3, h, w) + c1 * h * w + flops::conv(c1, c0, 3, h, w) + c0 * h * w +
             flops::conv(c0, c0, 1, h, w) + c0 * h * w;  // last term: addition into the block input
    } else {
      const std::uint64_t c1 = kDitCondHidden1, c2 = kDitCondHidden2, n = first[0], c = first[1];
      std::uint64_t f = flops::conv(1, c1, 3, h, w) + c1 * h * w;
      std::uint64_t hh = h, ww = w;
      for (std::size_t i = 0; i < pool_steps_; ++i) {
        f += c1 * hh * ww;
        hh /= 2;
        ww /= 2;
      }
      return f + flops::conv(c1, c2, 3, hh, ww) + c2 * hh * ww + flops::linear(n, c2, c) + n * c;
    }
  }

  void build_table() {
    std::uint64_t base = condition_flops();
    std::vector<std::uint64_t> per;
    std::size_t g = 0;
    for (auto idx : used_) {
      const auto& s = spec(idx);
      if (g < gate_.size() && gate_[g] == idx) {
        std::uint64_t z = 0;
        if constexpr (kUNet) {
          z = flops::zero_conv1x1(s.out_shape[0], s.out_shape[1], s.out_shape[2]);
        } else {
          z = flops::zero_linear(s.out_shape[0], s.out_shape[1]);
        }
        per.push_back(s.flops + z);
        ++g;
      } else {
        base += s.flops;
      }
    }
    std::uint64_t router = 0;
    if (mode_ == ControlMode::Flex) {
      for (auto idx : gate_) router += Router::flops(spec(idx).in_shape);
    }
    table_ = FlopsTable::make(std::move(per), base, router);
  }

  Tensor<T> mask_shape(const Tensor<T>& m, std::size_t nb) const {
    if constexpr (kUNet) {
      return reshape(m, {nb, 1, 1, 1});
    } else {
      return reshape(m, {nb, 1, 1});
    }
  }

  static void accumulate(Injections<T>& inj, std::size_t idx, const Tensor<T>& y) {
    auto it = inj.find(idx);
    if (it == inj.end()) {
      inj.emplace(idx, y);
    } else {
      it->second = add(it->second, y);
    }
  }

  std::vector<double> router_scores(std::size_t g, const Tensor<T>& h) const {
    auto k = routers_[g](h);
    return std::vector<double>(k.data().begin(), k.data().end());
  }

  bool routers_active(const ControlOptions& opt) const {
    return mode_ == ControlMode::Flex && (!opt.force_mask || opt.evaluate_routers);
  }

  // Masked-off blocks are skipped: no block, no zero module, no injection.
  ControlOutput<T> forward_structural(const Tensor<T>& x, const Conditioning<T>& cond, const ControlOptions& opt) const {
    const std::size_t nb = cond.batch();
    ControlOutput<T> out;
    out.decisions.resize(routers_active(opt) ? gate_.size() : 0);
    out.hard.assign(gate_.size(), std::vector<int>(nb, 1));
    const auto emb = copy_.embed_condition(cond);
    const auto cfeat = encode_condition(cond.spatial);
    std::uint64_t used = table_.base;
    Tensor<T> h = x;
    std::size_t g = 0;
    for (auto idx : used_) {
      if (g >= gate_.size() || gate_[g] != idx) {
        h = copy_.run_block(idx, h, emb);
        continue;
      }
      const Tensor<T> h_prev = h;
      if (g == 0) h = add(h, cfeat);
      int m = 1;
      if (mode_ == ControlMode::Flex) {
        if (routers_active(opt)) {
          out.decisions[g] = infer_decisions(router_scores(g, h_prev), opt.gumbel);
          used += Router::flops(spec(idx).in_shape);
        }
        if (opt.force_mask) {
          m = (*opt.force_mask)[g] ? 1 : 0;
        } else {
          m = out.decisions[g][0].hard;
          for (const auto& d : out.decisions[g]) {
            if (d.hard != m) throw UsageError("structural skipping routes one sample at a time; use batch size 1");
          }
        }
      }
      out.hard[g].assign(nb, m);
      if (m) {
        h = copy_.run_block(idx, h, emb);
        const auto y = zeros_[g](h);
        for (auto t : targets_[g]) accumulate(out.injections, t, y);
        used += table_.per_block[g];
      }
      ++g;
    }
    out.flops_used = used;
    std::vector<T> st;
    st.reserve(nb * gate_.size());
    for (std::size_t b = 0; b < nb; ++b) {
      for (std::size_t k = 0; k < gate_.size(); ++k) st.push_back(static_cast<T>(out.hard[k][b]));
    }
    out.st_masks = Tensor<T>::from_data({nb, gate_.size()}, std::move(st));
    return out;
  }

  // Every block executes; h = F(h) M + h (1 - M), y = Z(h) M.
  ControlOutput<T> forward_composed(const Tensor<T>& x, const Conditioning<T>& cond, const ControlOptions& opt) const {
    const std::size_t nb = cond.batch();
    const bool train = opt.phase == Phase::Train;
    const bool routed = mode_ == ControlMode::Flex && !(train && opt.warmup);
    const bool evaluate = routed && (!opt.force_mask || opt.evaluate_routers);
    if (train && routed && !opt.force_mask && !opt.noise_free && opt.rng == nullptr) {
      throw UsageError("training-phase routing needs a noise source");
    }
    ControlOutput<T> out;
    out.decisions.resize(evaluate ? gate_.size() : 0);
    out.hard.assign(gate_.size(), std::vector<int>(nb, 1));
    const auto emb = copy_.embed_condition(cond);
    const auto cfeat = encode_condition(cond.spatial);
    std::uint64_t used = table_.base;
    std::vector<Tensor<T>> masks;
    Tensor<T> h = x;
    std::size_t g = 0;
    for (auto idx : used_) {
      if (g >= gate_.size() || gate_[g] != idx) {
        h = copy_.run_block(idx, h, emb);
        continue;
      }
      const Tensor<T> h_prev = h;
      if (g == 0) h = add(h, cfeat);
      Tensor<T> m;  // [B]
      if (routed) {
        Tensor<T> k;
        if (evaluate) {
          k = routers_[g](h_prev);
          used += Router::flops(spec(idx).in_shape);
        }
        std::vector<T> hard(nb);
        if (train) {
          std::vector<double> noise(nb, 0.0);
          if (!opt.noise_free && opt.rng) {
            for (auto& v : noise) v = draw_gumbel_difference(*opt.rng);
          }
          Tensor<T> soft;
          if (evaluate) soft = gumbel_sigmoid(k, opt.gumbel.temperature, noise);
          for (std::size_t b = 0; b < nb; ++b) {
            int hv = opt.force_mask ? ((*opt.force_mask)[g] ? 1 : 0)
                                    : (soft[b] > static_cast<T>(opt.gumbel.train_threshold) ? 1 : 0);
            hard[b] = static_cast<T>(hv);
            out.hard[g][b] = hv;
          }
          if (evaluate) {
            out.decisions[g].resize(nb);
            for (std::size_t b = 0; b < nb; ++b) {
              auto& d = out.decisions[g][b];
              d.k = static_cast<double>(k[b]);
              d.k_prime = sigmoid_scalar(d.k);
              d.soft = static_cast<double>(soft[b]);
              d.has_soft = true;
              d.hard = out.hard[g][b];
            }
            if (opt.st_offset) {
              const auto& off = opt.st_offset->at(g);
              if (off.size() != nb) throw DimensionError("st_offset: one value per sample required");
              m = add(soft, Tensor<T>::from_data({nb}, std::vector<T>(off.begin(), off.end())));
            } else {
              m = straight_through(soft, Tensor<T>::from_data({nb}, std::move(hard)));
            }
          } else {
            m = Tensor<T>::from_data({nb}, std::move(hard));
          }
        } else {
          if (evaluate) out.decisions[g] = infer_decisions(std::vector<double>(k.data().begin(), k.data().end()), opt.gumbel);
          for (std::size_t b = 0; b < nb; ++b) {
            const int hv = opt.force_mask ? ((*opt.force_mask)[g] ? 1 : 0) : out.decisions[g][b].hard;
            hard[b] = static_cast<T>(hv);
            out.hard[g][b] = hv;
          }
          m = Tensor<T>::from_data({nb}, std::move(hard));
        }
      }
      auto f = copy_.run_block(idx, h, emb);
      if (m.defined()) {
        const auto mb = mask_shape(m, nb);
        const auto keep = add_scalar(scale(mb, T(-1)), T(1));
        h = add(mul(f, mb), mul(h, keep));
        const auto y = mul(zeros_[g](h), mb);
        for (auto t : targets_[g]) accumulate(out.injections, t, y);
        masks.push_back(reshape(m, {1, nb}));
      } else {
        h = f;
        const auto y = zeros_[g](h);
        for (auto t : targets_[g]) accumulate(out.injections, t, y);
        masks.push_back(Tensor<T>::ones({1, nb}));
      }
      used += table_.per_block[g];
      ++g;
    }
    out.flops_used = used;
    out.st_masks = permute(concat0(masks), {1, 0});
    return out;
  }

  static constexpr std::size_t kDitCondHidden1 = 16;
  static constexpr std::size_t kDitCondHidden2 = 32;

  ControlMode mode_;
  B copy_;
  std::vector<std::size_t> used_;
  std::vector<std::size_t> gate_;
  std::vector<std::vector<std::size_t>> targets_;
  std::vector<Zero> zeros_;
  std::vector<Router> routers_;
  Conv2d<T> cond_conv1_;
  Conv2d<T> cond_conv2_;
  Conv2d<T> cond_zero_conv_;
  Linear<T> cond_zero_lin_;
  std::size_t pool_steps_ = 0;
  FlopsTable table_;
};

// Backbone output with the branch's injections (the composed model).
template <class B>
Tensor<typename B::scalar_type> controlled_forward(const B& backbone, const ControlBranch<B>& branch,
                                                   const Tensor<typename B::scalar_type>& x,
                                                   const Conditioning<typename B::scalar_type>& cond,
                                                   const ControlOptions& opt,
                                                   ControlOutput<typename B::scalar_type>* out = nullptr) {
  auto co = branch.forward(x, cond, opt);
  auto y = backbone.forward(x, cond, co.injections);
  if (out) *out = std::move(co);
  return y;
}

}  // namespace flexctl
