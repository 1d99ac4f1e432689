#pragma once

// FLOP accounting for backbone and control-branch blocks, and the losses that
// steer the executed fraction of the control branch toward a target.
//
// All counts are per sample and follow the same rules as FlopCounter:
// multiply-accumulate = 2, pointwise/normalization = 1 per output element,
// reductions and pooling = 1 per input element, data movement = 0, biases free.

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "flexctl/blocks.hpp"
#include "flexctl/errors.hpp"
#include "flexctl/tensor.hpp"

namespace flexctl {

namespace flops {

using u64 = std::uint64_t;

inline u64 conv(u64 cin, u64 cout, u64 k, u64 h_out, u64 w_out) { return 2 * cout * cin * k * k * h_out * w_out; }
inline u64 linear(u64 rows, u64 in, u64 out) { return 2 * rows * in * out; }

// sinusoid -> fc -> silu -> fc, plus the class-embedding add.
inline u64 time_mlp(u64 e) { return linear(1, e, e) + e + linear(1, e, e) + e; }

inline u64 zero_conv1x1(u64 c, u64 h, u64 w) { return conv(c, c, 1, h, w); }
inline u64 zero_linear(u64 n, u64 c) { return linear(n, c, c); }

inline u64 transformer_block(u64 n, u64 c, u64 heads, u64 hidden) {
  const u64 nc = n * c;
  return 3 * c + linear(1, c, 6 * c) + 10 * nc + linear(n, c, 3 * c) + 4 * n * n * c + 2 * heads * n * n +
         linear(n, c, c) + linear(n, c, hidden) + n * hidden + linear(n, hidden, c);
}

}  // namespace flops

inline std::uint64_t count_block_flops(const BlockSpec& s) {
  using flops::u64;
  auto need = [&](bool ok) {
    if (!ok) throw ConfigError("block spec " + std::to_string(s.index) + " (" + to_string(s.kind) + ") is not fully shaped");
  };
  switch (s.kind) {
    case BlockKind::Embed:
      if (s.patch == 0) {
        need(s.in_shape.size() == 3 && s.out_shape.size() == 3 && s.kernel > 0);
        return flops::conv(s.in_shape[0], s.out_shape[0], s.kernel, s.out_shape[1], s.out_shape[2]) +
               flops::time_mlp(s.embed_dim);
      } else {
        need(s.in_shape.size() == 3 && s.out_shape.size() == 2);
        const u64 n = s.out_shape[0], c = s.out_shape[1], pin = s.in_shape[0] * s.patch * s.patch;
        return flops::linear(n, pin, c) + n * c + flops::time_mlp(s.embed_dim);
      }
    case BlockKind::ConvResblock: {
      need(s.in_shape.size() == 3 && s.kernel > 0);
      const u64 c = s.in_shape[0], h = s.in_shape[1], w = s.in_shape[2], e = s.embed_dim;
      return 2 * flops::conv(c, c, s.kernel, h, w) + e + flops::linear(1, e, c) + 6 * c * h * w;
    }
    case BlockKind::Downsample:
      need(s.in_shape.size() == 3 && s.out_shape.size() == 3 && s.kernel > 0);
      return shape_numel(s.in_shape) +
             flops::conv(s.in_shape[0], s.out_shape[0], s.kernel, s.out_shape[1], s.out_shape[2]);
    case BlockKind::Upsample:
      need(s.in_shape.size() == 3 && s.out_shape.size() == 3 && s.kernel > 0);
      return flops::conv(s.in_shape[0], s.out_shape[0], s.kernel, s.out_shape[1], s.out_shape[2]);
    case BlockKind::TransformerBlock:
      need(s.in_shape.size() == 2 && s.heads > 0 && s.mlp_hidden > 0);
      return flops::transformer_block(s.in_shape[0], s.in_shape[1], s.heads, s.mlp_hidden);
    case BlockKind::Attention: {
      need(s.in_shape.size() == 2 && s.heads > 0);
      const u64 n = s.in_shape[0], c = s.in_shape[1];
      return flops::linear(n, c, 3 * c) + 4 * n * n * c + 2 * s.heads * n * n + flops::linear(n, c, c) + n * c;
    }
    case BlockKind::Head:
      if (s.patch == 0) {
        need(s.in_shape.size() == 3 && s.out_shape.size() == 3 && s.kernel > 0);
        const u64 c = s.in_shape[0], h = s.in_shape[1], w = s.in_shape[2];
        return 2 * c * h * w + flops::conv(c, s.out_shape[0], s.kernel, h, w);
      } else {
        need(s.in_shape.size() == 2 && s.out_shape.size() == 3);
        const u64 n = s.in_shape[0], c = s.in_shape[1], pout = s.out_shape[0] * s.patch * s.patch;
        return 2 * c + flops::linear(1, c, 2 * c) + 3 * n * c + flops::linear(n, c, pout);
      }
  }
  throw ConfigError("unknown block kind");
}

struct FlopsTable {
  std::vector<std::uint64_t> per_block;  // f_l per gateable block, zero module included
  std::uint64_t base = 0;                // always-executed branch parts
  std::uint64_t router = 0;              // all routers together
  std::uint64_t large_total = 0;

  static FlopsTable make(std::vector<std::uint64_t> per_block, std::uint64_t base, std::uint64_t router) {
    FlopsTable t{std::move(per_block), base, router, 0};
    t.large_total = base + router + std::accumulate(t.per_block.begin(), t.per_block.end(), std::uint64_t{0});
    return t;
  }

  std::size_t blocks() const { return per_block.size(); }

  bool consistent() const {
    return large_total == base + router + std::accumulate(per_block.begin(), per_block.end(), std::uint64_t{0});
  }

  // FLOPs executed for a hard pattern.
  std::uint64_t used(const std::vector<int>& hard) const {
    if (hard.size() != per_block.size()) throw UsageError("mask count does not match block count");
    std::uint64_t u = base + router;
    for (std::size_t l = 0; l < hard.size(); ++l) {
      if (hard[l]) u += per_block[l];
    }
    return u;
  }
};

struct CostConfig {
  double gamma = 0.5;
  double lambda_c = 0.5;

  void validate() const {
    if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in (0, 1]");
    if (!(lambda_c >= 0.0)) throw ConfigError("lambda_c must be >= 0");
  }
};

inline double flops_ratio(const std::vector<double>& masks, const FlopsTable& table) {
  if (masks.size() != table.per_block.size()) {
    throw UsageError("flops_ratio: " + std::to_string(masks.size()) + " masks for " +
                     std::to_string(table.per_block.size()) + " blocks");
  }
  if (table.large_total == 0) throw UsageError("flops_ratio: empty FLOPs table");
  double num = static_cast<double>(table.base + table.router);
  for (std::size_t l = 0; l < masks.size(); ++l) {
    if (!(masks[l] >= 0.0 && masks[l] <= 1.0)) throw UsageError("flops_ratio: mask outside [0, 1]");
    num += masks[l] * static_cast<double>(table.per_block[l]);
  }
  return num / static_cast<double>(table.large_total);
}

// Differentiable per-sample ratio: masks [B, L] -> [B].
template <class T>
Tensor<T> flops_ratio(const Tensor<T>& masks, const FlopsTable& table) {
  const std::size_t nb = table.per_block.size();
  if (masks.rank() != 2 || masks.dim(1) != nb) {
    throw UsageError("flops_ratio: masks " + shape_str(masks.shape()) + " for " + std::to_string(nb) + " blocks");
  }
  if (table.large_total == 0) throw UsageError("flops_ratio: empty FLOPs table");
  const double total = static_cast<double>(table.large_total);
  std::vector<T> w(nb);
  for (std::size_t l = 0; l < nb; ++l) w[l] = static_cast<T>(static_cast<double>(table.per_block[l]) / total);
  auto weights = Tensor<T>::from_data({1, nb}, std::move(w));
  auto r = linear(masks, weights, Tensor<T>());  // [B, 1]
  r = reshape(r, {masks.dim(0)});
  return add_scalar(r, static_cast<T>(static_cast<double>(table.base + table.router) / total));
}

inline double cost_loss(const std::vector<double>& ratios, double gamma) {
  if (ratios.empty()) throw UsageError("cost_loss: empty batch");
  double s = 0.0;
  for (double r : ratios) s += (r - gamma) * (r - gamma);
  return s / static_cast<double>(ratios.size());
}

template <class T>
Tensor<T> cost_loss(const Tensor<T>& ratios, double gamma) {
  if (ratios.rank() != 1) throw UsageError("cost_loss: ratios must be a vector");
  return mse(ratios, Tensor<T>::full(ratios.shape(), static_cast<T>(gamma)));
}

template <class T>
Tensor<T> diffusion_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape()) {
    throw DimensionError("diffusion_loss: " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  }
  return mse(pred, target);
}

inline double total_loss(double l_sd, double l_c, double lambda_c) { return l_sd + lambda_c * l_c; }

template <class T>
Tensor<T> total_loss(const Tensor<T>& l_sd, const Tensor<T>& l_c, double lambda_c) {
  if (lambda_c == 0.0) return l_sd;
  return add(l_sd, scale(l_c, static_cast<T>(lambda_c)));
}

}  // namespace flexctl
