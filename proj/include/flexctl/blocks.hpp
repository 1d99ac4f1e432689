#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>

#include "flexctl/errors.hpp"
#include "flexctl/tensor.hpp"

namespace flexctl {

enum class BlockKind { ConvResblock, Attention, TransformerBlock, Downsample, Upsample, Embed, Head };

enum class BackboneKind { UNet, DiT };

inline std::string to_string(BlockKind k) {
  switch (k) {
    case BlockKind::ConvResblock: return "conv-resblock";
    case BlockKind::Attention: return "attention";
    case BlockKind::TransformerBlock: return "transformer-block";
    case BlockKind::Downsample: return "downsample";
    case BlockKind::Upsample: return "upsample";
    case BlockKind::Embed: return "embed";
    case BlockKind::Head: return "head";
  }
  throw ConfigError("unknown block kind");
}

inline BlockKind block_kind_from_string(std::string_view s) {
  for (auto k : {BlockKind::ConvResblock, BlockKind::Attention, BlockKind::TransformerBlock, BlockKind::Downsample,
                 BlockKind::Upsample, BlockKind::Embed, BlockKind::Head}) {
    if (to_string(k) == s) return k;
  }
  throw ConfigError("unknown block kind '" + std::string(s) + "'");
}

inline std::string to_string(BackboneKind k) { return k == BackboneKind::UNet ? "unet" : "dit"; }

inline BackboneKind backbone_kind_from_string(std::string_view s) {
  if (s == "unet") return BackboneKind::UNet;
  if (s == "dit") return BackboneKind::DiT;
  throw ConfigError("unknown backbone kind '" + std::string(s) + "'");
}

// One backbone block. Shapes are per sample (no batch axis): [C, H, W] for
// convolutional blocks and [N, C] for token blocks.
struct BlockSpec {
  std::size_t index = 0;
  BlockKind kind = BlockKind::ConvResblock;
  Shape in_shape;
  Shape out_shape;
  bool gateable = false;  // in_shape == out_shape, so skipping is the identity
  std::uint64_t flops = 0;

  // Descriptors consumed by FLOP counting.
  std::size_t embed_dim = 0;   // width of the timestep/class conditioning vector
  std::size_t kernel = 0;      // convolution kernel size
  std::size_t patch = 0;       // > 0 for patch embeddings / token heads
  std::size_t heads = 0;       // attention heads
  std::size_t mlp_hidden = 0;  // transformer MLP width
  bool decoder = false;        // UNet decoder-side block
};

}  // namespace flexctl
