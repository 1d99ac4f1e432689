#pragma once

// Two small denoisers with a common per-block interface:
//   specs()                  ordered BlockSpec layout
//   embed_condition(cond)    timestep + class vector [B, E]
//   run_block(i, h, emb)     one block, no skips, no injections
//   forward(x, cond, inj)    full network; inj[i] is added to block i's output
//   for_each_block_param(i)  parameters owned by block i
//
// The embedding block (index 0) also owns the timestep MLP and class table.

#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "flexctl/blocks.hpp"
#include "flexctl/budget.hpp"
#include "flexctl/errors.hpp"
#include "flexctl/nn.hpp"
#include "flexctl/rng.hpp"
#include "flexctl/tensor.hpp"

namespace flexctl {

template <class T>
using Injections = std::map<std::size_t, Tensor<T>>;

template <class T>
struct Conditioning {
  std::vector<int> class_ids;
  std::vector<double> timesteps;  // discrete t for the UNet, continuous t in [0,1] for the DiT
  Tensor<T> spatial;              // [B, 1, H, W] edge map; unused by the backbone itself

  std::size_t batch() const { return class_ids.size(); }
};

struct TinyUNetConfig {
  std::size_t image_size = 16;
  std::size_t image_channels = 3;
  std::vector<std::size_t> stage_channels{16, 32};
  std::size_t resblocks_per_stage = 2;
  std::size_t time_embed_dim = 64;
  std::size_t num_classes = 8;

  void validate() const {
    if (stage_channels.empty()) throw ConfigError("unet: at least one stage required");
    for (auto c : stage_channels) {
      if (c == 0) throw ConfigError("unet: channels must be positive");
    }
    if (resblocks_per_stage == 0) throw ConfigError("unet: resblocks_per_stage must be >= 1");
    if (time_embed_dim < 2 || time_embed_dim % 2 != 0) throw ConfigError("unet: time_embed_dim must be even and >= 2");
    if (num_classes == 0) throw ConfigError("unet: num_classes must be >= 1");
    if (image_channels == 0) throw ConfigError("unet: image_channels must be >= 1");
    const std::size_t div = std::size_t{1} << (stage_channels.size() - 1);
    if (image_size == 0 || image_size % div != 0) {
      throw ConfigError("unet: image_size must be divisible by 2^(stages-1)");
    }
  }
};

struct TinyDiTConfig {
  std::size_t image_size = 16;
  std::size_t image_channels = 3;
  std::size_t patch = 2;
  std::size_t width = 64;
  std::size_t depth = 8;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t num_classes = 8;

  std::size_t tokens() const { return (image_size / patch) * (image_size / patch); }

  void validate() const {
    if (patch == 0 || image_size == 0 || image_size % patch != 0) throw ConfigError("dit: image_size must be divisible by patch");
    if (heads == 0 || width % heads != 0) throw ConfigError("dit: width must be divisible by heads");
    if (width < 64) throw ConfigError("dit: width must be >= 64");
    if (width % 2 != 0) throw ConfigError("dit: width must be even");
    if (depth == 0) throw ConfigError("dit: depth must be >= 1");
    if (mlp_ratio == 0) throw ConfigError("dit: mlp_ratio must be >= 1");
    if (num_classes == 0) throw ConfigError("dit: num_classes must be >= 1");
    if (image_channels == 0) throw ConfigError("dit: image_channels must be >= 1");
  }
};

namespace detail {

inline Shape batched(std::size_t b, const Shape& s) {
  Shape out{b};
  out.insert(out.end(), s.begin(), s.end());
  return out;
}

template <class T>
void check_conditioning(const Conditioning<T>& c, std::size_t num_classes) {
  if (c.class_ids.empty()) throw UsageError("conditioning: empty batch");
  if (c.timesteps.size() != c.class_ids.size()) throw UsageError("conditioning: class/timestep count mismatch");
  for (int id : c.class_ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= num_classes) {
      throw UsageError("conditioning: class id " + std::to_string(id) + " out of range");
    }
  }
}

template <class T>
void check_injection(const Injections<T>& inj, const std::vector<BlockSpec>& specs, std::size_t batch) {
  for (const auto& [idx, t] : inj) {
    if (idx >= specs.size()) {
      throw DimensionError("injection at block " + std::to_string(idx) + " but the network has " +
                           std::to_string(specs.size()) + " blocks");
    }
    if (t.shape() != batched(batch, specs[idx].out_shape)) {
      throw DimensionError("injection at block " + std::to_string(idx) + " has shape " + shape_str(t.shape()) +
                           ", expected " + shape_str(batched(batch, specs[idx].out_shape)));
    }
  }
}

template <class M>
M deep_clone(const M& m) {
  M c = m;
  c.for_each_param("", [](const std::string&, auto& t) { t = t.clone(); });
  return c;
}

}  // namespace detail

template <class T>
struct TimeEmbedding {
  using scalar_type = T;

  Linear<T> fc1;
  Linear<T> fc2;
  Tensor<T> class_table;  // [classes, E]
  double position_scale = 1.0;

  static TimeEmbedding init(std::size_t e, std::size_t classes, double position_scale, Rng& rng) {
    return {Linear<T>::init(e, e, rng), Linear<T>::init(e, e, rng), uniform_param<T>({classes, e}, 1.0, rng),
            position_scale};
  }

  std::size_t dim() const { return fc1.in_features(); }

  Tensor<T> operator()(const std::vector<double>& timesteps, const std::vector<int>& class_ids) const {
    std::vector<double> pos(timesteps);
    for (auto& p : pos) p *= position_scale;
    auto s = sinusoidal_embedding<T>(pos, dim());
    return add(fc2(silu(fc1(s))), embedding(class_table, class_ids));
  }

  template <class F>
  void for_each_param(const std::string& prefix, F&& f) {
    fc1.for_each_param(prefix + "fc1.", f);
    fc2.for_each_param(prefix + "fc2.", f);
    f(prefix + "class_table", class_table);
  }
};

template <class T>
struct ResBlock {
  using scalar_type = T;

  GroupNorm<T> norm1;
  Conv2d<T> conv1;
  Linear<T> emb_proj;
  GroupNorm<T> norm2;
  Conv2d<T> conv2;

  static ResBlock init(std::size_t c, std::size_t e, Rng& rng) {
    return {GroupNorm<T>::init(c), Conv2d<T>::init(c, c, 3, rng), Linear<T>::init(e, c, rng), GroupNorm<T>::init(c),
            Conv2d<T>::init(c, c, 3, rng)};
  }

  Tensor<T> operator()(const Tensor<T>& h, const Tensor<T>& emb) const {
    const std::size_t b = h.dim(0), c = h.dim(1);
    auto a = conv1(silu(norm1(h)));
    a = add(a, reshape(emb_proj(silu(emb)), {b, c, 1, 1}));
    return add(h, conv2(silu(norm2(a))));
  }

  template <class F>
  void for_each_param(const std::string& prefix, F&& f) {
    norm1.for_each_param(prefix + "norm1.", f);
    conv1.for_each_param(prefix + "conv1.", f);
    emb_proj.for_each_param(prefix + "emb_proj.", f);
    norm2.for_each_param(prefix + "norm2.", f);
    conv2.for_each_param(prefix + "conv2.", f);
  }
};

template <class T>
class TinyUNet {
 public:
  using scalar_type = T;
  using Config = TinyUNetConfig;
  static constexpr BackboneKind kind = BackboneKind::UNet;

  TinyUNet(const Config& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    build(rng);
  }

  const Config& config() const { return cfg_; }
  const std::vector<BlockSpec>& specs() const { return specs_; }
  std::size_t size() const { return specs_.size(); }
  std::size_t embed_dim() const { return cfg_.time_embed_dim; }
  Shape image_shape() const { return {cfg_.image_channels, cfg_.image_size, cfg_.image_size}; }

  // Layout indices of gateable blocks, in order.
  const std::vector<std::size_t>& gateable() const { return gateable_; }
  // For each layout index: gateable ordinal of the encoder block whose output
  // is added to this block's input, or npos.
  std::size_t skip_source(std::size_t idx) const { return slots_.at(idx).skip_from; }

  Tensor<T> embed_condition(const Conditioning<T>& cond) const {
    detail::check_conditioning(cond, cfg_.num_classes);
    return time_(cond.timesteps, cond.class_ids);
  }

  Tensor<T> run_block(std::size_t idx, const Tensor<T>& h, const Tensor<T>& emb) const {
    const Slot& s = slots_.at(idx);
    switch (specs_[idx].kind) {
      case BlockKind::Embed: return conv_in_(h);
      case BlockKind::ConvResblock: return res_[s.sub](h, emb);
      case BlockKind::Downsample: return down_[s.sub](avg_pool2x(h));
      case BlockKind::Upsample: return up_[s.sub](upsample2x(h));
      case BlockKind::Head: return head_conv_(silu(head_norm_(h)));
      default: break;
    }
    throw ConfigError("unet: unexpected block kind");
  }

  Tensor<T> forward(const Tensor<T>& x, const Conditioning<T>& cond, const Injections<T>& inj = {}) const {
    if (x.shape() != detail::batched(cond.batch(), image_shape())) {
      throw DimensionError("unet: input " + shape_str(x.shape()) + " for batch " + std::to_string(cond.batch()));
    }
    detail::check_injection(inj, specs_, cond.batch());
    const auto emb = embed_condition(cond);
    std::vector<Tensor<T>> gate_out;
    Tensor<T> h = x;
    for (std::size_t i = 0; i < specs_.size(); ++i) {
      if (slots_[i].skip_from != npos) h = add(h, gate_out[slots_[i].skip_from]);
      h = run_block(i, h, emb);
      if (auto it = inj.find(i); it != inj.end()) h = add(h, it->second);
      if (specs_[i].gateable) gate_out.push_back(h);
    }
    return h;
  }

  template <class F>
  void for_each_block_param(std::size_t idx, const std::string& prefix, F&& f) {
    const Slot& s = slots_.at(idx);
    switch (specs_[idx].kind) {
      case BlockKind::Embed:
        time_.for_each_param(prefix + "time.", f);
        conv_in_.for_each_param(prefix + "conv_in.", f);
        break;
      case BlockKind::ConvResblock: res_[s.sub].for_each_param(prefix, f); break;
      case BlockKind::Downsample: down_[s.sub].for_each_param(prefix + "conv.", f); break;
      case BlockKind::Upsample: up_[s.sub].for_each_param(prefix + "conv.", f); break;
      case BlockKind::Head:
        head_norm_.for_each_param(prefix + "norm.", f);
        head_conv_.for_each_param(prefix + "conv.", f);
        break;
      default: break;
    }
  }

  template <class F>
  void for_each_param(const std::string& prefix, F&& f) {
    for (std::size_t i = 0; i < specs_.size(); ++i) for_each_block_param(i, prefix + "blocks." + std::to_string(i) + ".", f);
  }

  TinyUNet clone() const { return detail::deep_clone(*this); }

 private:
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();

  struct Slot {
    std::size_t sub = 0;
    std::size_t skip_from = npos;
  };

  void push(BlockSpec s, std::size_t sub, std::size_t skip_from = npos) {
    s.index = specs_.size();
    s.gateable = s.in_shape == s.out_shape;
    s.embed_dim = cfg_.time_embed_dim;
    s.flops = count_block_flops(s);
    if (s.gateable) gateable_.push_back(s.index);
    specs_.push_back(std::move(s));
    slots_.push_back({sub, skip_from});
  }

  void build(Rng& rng) {
    const auto& ch = cfg_.stage_channels;
    const std::size_t e = cfg_.time_embed_dim, stages = ch.size(), r = cfg_.resblocks_per_stage;
    time_ = TimeEmbedding<T>::init(e, cfg_.num_classes, 1.0, rng);
    conv_in_ = Conv2d<T>::init(cfg_.image_channels, ch[0], 3, rng);

    std::size_t hw = cfg_.image_size;
    BlockSpec embed;
    embed.kind = BlockKind::Embed;
    embed.in_shape = image_shape();
    embed.out_shape = {ch[0], hw, hw};
    embed.kernel = 3;
    push(embed, 0);

    auto resblock = [&](std::size_t c, bool decoder, std::size_t skip) {
      BlockSpec s;
      s.kind = BlockKind::ConvResblock;
      s.in_shape = s.out_shape = {c, hw, hw};
      s.kernel = 3;
      s.decoder = decoder;
      res_.push_back(ResBlock<T>::init(c, e, rng));
      push(s, res_.size() - 1, skip);
    };

    for (std::size_t st = 0; st < stages; ++st) {
      for (std::size_t k = 0; k < r; ++k) resblock(ch[st], false, npos);
      if (st + 1 < stages) {
        BlockSpec s;
        s.kind = BlockKind::Downsample;
        s.in_shape = {ch[st], hw, hw};
        hw /= 2;
        s.out_shape = {ch[st + 1], hw, hw};
        s.kernel = 3;
        down_.push_back(Conv2d<T>::init(ch[st], ch[st + 1], 3, rng));
        push(s, down_.size() - 1);
      }
    }
    const std::size_t half = stages * r;
    std::size_t j = 0;
    for (std::size_t st = stages; st-- > 0;) {
      for (std::size_t k = 0; k < r; ++k, ++j) resblock(ch[st], true, j == 0 ? npos : half - 1 - j);
      if (st > 0) {
        BlockSpec s;
        s.kind = BlockKind::Upsample;
        s.in_shape = {ch[st], hw, hw};
        hw *= 2;
        s.out_shape = {ch[st - 1], hw, hw};
        s.kernel = 3;
        s.decoder = true;
        up_.push_back(Conv2d<T>::init(ch[st], ch[st - 1], 3, rng));
        push(s, up_.size() - 1);
      }
    }
    head_norm_ = GroupNorm<T>::init(ch[0]);
    head_conv_ = Conv2d<T>::init(ch[0], cfg_.image_channels, 3, rng);
    BlockSpec head;
    head.kind = BlockKind::Head;
    head.in_shape = {ch[0], hw, hw};
    head.out_shape = image_shape();
    head.kernel = 3;
    head.decoder = true;
    push(head, 0);
  }

  Config cfg_;
  std::vector<BlockSpec> specs_;
  std::vector<Slot> slots_;
  std::vector<std::size_t> gateable_;

  TimeEmbedding<T> time_;
  Conv2d<T> conv_in_;
  std::vector<ResBlock<T>> res_;
  std::vector<Conv2d<T>> down_;
  std::vector<Conv2d<T>> up_;
  GroupNorm<T> head_norm_;
  Conv2d<T> head_conv_;
};

namespace detail {

// [B, k*C] -> k-th chunk as [B, 1, C], for broadcasting over tokens.
template <class T>
Tensor<T> chunk_row(const Tensor<T>& m, std::size_t k, std::size_t c) {
  return reshape(narrow(m, 1, k * c, c), {m.dim(0), 1, c});
}

// x * (1 + scale) + shift with [B, 1, C] modulation.
template <class T>
Tensor<T> modulate(const Tensor<T>& x, const Tensor<T>& shift, const Tensor<T>& scale_) {
  return add(mul(x, add_scalar(scale_, T(1))), shift);
}

}  // namespace detail

template <class T>
struct DiTBlock {
  using scalar_type = T;

  Linear<T> ada;  // C -> 6C
  Linear<T> qkv;
  Linear<T> proj;
  Linear<T> fc1;
  Linear<T> fc2;
  std::size_t heads = 1;

  static DiTBlock init(std::size_t c, std::size_t heads, std::size_t hidden, Rng& rng) {
    return {Linear<T>::init(c, 6 * c, rng),      Linear<T>::init(c, 3 * c, rng),      Linear<T>::init(c, c, rng),
            Linear<T>::init(c, hidden, rng), Linear<T>::init(hidden, c, rng), heads};
  }

  Tensor<T> operator()(const Tensor<T>& h, const Tensor<T>& cvec) const {
    using detail::chunk_row;
    const std::size_t b = h.dim(0), n = h.dim(1), c = h.dim(2), d = c / heads;
    auto m = ada(silu(cvec));
    auto x = detail::modulate(layer_norm(h), chunk_row(m, 0, c), chunk_row(m, 1, c));

    auto q = reshape(qkv(x), {b, n, 3, heads, d});
    q = reshape(permute(q, {2, 0, 3, 1, 4}), {3, b * heads, n, d});
    auto qh = reshape(narrow(q, 0, 0, 1), {b * heads, n, d});
    auto kh = reshape(narrow(q, 0, 1, 1), {b * heads, n, d});
    auto vh = reshape(narrow(q, 0, 2, 1), {b * heads, n, d});
    auto att = softmax(scale(bmm(qh, kh, false, true), static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)))));
    auto o = reshape(bmm(att, vh), {b, heads, n, d});
    o = reshape(permute(o, {0, 2, 1, 3}), {b, n, c});
    auto y = add(h, mul(chunk_row(m, 2, c), proj(o)));

    auto x2 = detail::modulate(layer_norm(y), chunk_row(m, 3, c), chunk_row(m, 4, c));
    return add(y, mul(chunk_row(m, 5, c), fc2(silu(fc1(x2)))));
  }

  template <class F>
  void for_each_param(const std::string& prefix, F&& f) {
    ada.for_each_param(prefix + "ada.", f);
    qkv.for_each_param(prefix + "qkv.", f);
    proj.for_each_param(prefix + "proj.", f);
    fc1.for_each_param(prefix + "fc1.", f);
    fc2.for_each_param(prefix + "fc2.", f);
  }
};

template <class T>
class TinyDiT {
 public:
  using scalar_type = T;
  using Config = TinyDiTConfig;
  static constexpr BackboneKind kind = BackboneKind::DiT;

  TinyDiT(const Config& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    build(rng);
  }

  const Config& config() const { return cfg_; }
  const std::vector<BlockSpec>& specs() const { return specs_; }
  std::size_t size() const { return specs_.size(); }
  std::size_t embed_dim() const { return cfg_.width; }
  Shape image_shape() const { return {cfg_.image_channels, cfg_.image_size, cfg_.image_size}; }
  const std::vector<std::size_t>& gateable() const { return gateable_; }
  std::size_t skip_source(std::size_t) const { return std::numeric_limits<std::size_t>::max(); }

  Tensor<T> embed_condition(const Conditioning<T>& cond) const {
    detail::check_conditioning(cond, cfg_.num_classes);
    for (double t : cond.timesteps) {
      if (!(t >= 0.0 && t <= 1.0)) throw UsageError("dit: timestep must lie in [0, 1]");
    }
    return time_(cond.timesteps, cond.class_ids);
  }

  Tensor<T> run_block(std::size_t idx, const Tensor<T>& h, const Tensor<T>& emb) const {
    const std::size_t last = specs_.size() - 1;
    if (idx == 0) return embed_tokens(h);
    if (idx == last) return head(h, emb);
    if (idx > last) throw UsageError("dit: block index out of range");
    return blocks_[idx - 1](h, emb);
  }

  Tensor<T> forward(const Tensor<T>& x, const Conditioning<T>& cond, const Injections<T>& inj = {}) const {
    if (x.shape() != detail::batched(cond.batch(), image_shape())) {
      throw DimensionError("dit: input " + shape_str(x.shape()) + " for batch " + std::to_string(cond.batch()));
    }
    detail::check_injection(inj, specs_, cond.batch());
    const auto emb = embed_condition(cond);
    Tensor<T> h = x;
    for (std::size_t i = 0; i < specs_.size(); ++i) {
      h = run_block(i, h, emb);
      if (auto it = inj.find(i); it != inj.end()) h = add(h, it->second);
    }
    return h;
  }

  template <class F>
  void for_each_block_param(std::size_t idx, const std::string& prefix, F&& f) {
    const std::size_t last = specs_.size() - 1;
    if (idx == 0) {
      time_.for_each_param(prefix + "time.", f);
      patch_embed_.for_each_param(prefix + "patch.", f);
      f(prefix + "pos", pos_);
    } else if (idx == last) {
      head_ada_.for_each_param(prefix + "ada.", f);
      head_out_.for_each_param(prefix + "out.", f);
    } else {
      blocks_.at(idx - 1).for_each_param(prefix, f);
    }
  }

  template <class F>
  void for_each_param(const std::string& prefix, F&& f) {
    for (std::size_t i = 0; i < specs_.size(); ++i) for_each_block_param(i, prefix + "blocks." + std::to_string(i) + ".", f);
  }

  TinyDiT clone() const { return detail::deep_clone(*this); }

 private:
  Tensor<T> embed_tokens(const Tensor<T>& x) const {
    const std::size_t b = x.dim(0), c = x.dim(1), p = cfg_.patch, g = cfg_.image_size / p;
    auto t = reshape(x, {b, c, g, p, g, p});
    t = reshape(permute(t, {0, 2, 4, 1, 3, 5}), {b, g * g, c * p * p});
    return add(patch_embed_(t), pos_);
  }

  Tensor<T> head(const Tensor<T>& h, const Tensor<T>& emb) const {
    const std::size_t b = h.dim(0), c = cfg_.width, p = cfg_.patch, g = cfg_.image_size / p, co = cfg_.image_channels;
    auto m = head_ada_(silu(emb));
    auto x = detail::modulate(layer_norm(h), detail::chunk_row(m, 0, c), detail::chunk_row(m, 1, c));
    auto y = reshape(head_out_(x), {b, g, g, co, p, p});
    return reshape(permute(y, {0, 3, 1, 4, 2, 5}), {b, co, cfg_.image_size, cfg_.image_size});
  }

  void push(BlockSpec s) {
    s.index = specs_.size();
    s.gateable = s.in_shape == s.out_shape;
    s.embed_dim = cfg_.width;
    s.flops = count_block_flops(s);
    if (s.gateable) gateable_.push_back(s.index);
    specs_.push_back(std::move(s));
  }

  void build(Rng& rng) {
    const std::size_t c = cfg_.width, n = cfg_.tokens(), p = cfg_.patch, hidden = c * cfg_.mlp_ratio;
    time_ = TimeEmbedding<T>::init(c, cfg_.num_classes, 1000.0, rng);
    patch_embed_ = Linear<T>::init(cfg_.image_channels * p * p, c, rng);
    pos_ = uniform_param<T>({n, c}, 0.02, rng);
    BlockSpec embed;
    embed.kind = BlockKind::Embed;
    embed.in_shape = image_shape();
    embed.out_shape = {n, c};
    embed.patch = p;
    push(embed);
    for (std::size_t i = 0; i < cfg_.depth; ++i) {
      blocks_.push_back(DiTBlock<T>::init(c, cfg_.heads, hidden, rng));
      BlockSpec s;
      s.kind = BlockKind::TransformerBlock;
      s.in_shape = s.out_shape = {n, c};
      s.heads = cfg_.heads;
      s.mlp_hidden = hidden;
      push(s);
    }
    head_ada_ = Linear<T>::init(c, 2 * c, rng);
    head_out_ = Linear<T>::init(c, cfg_.image_channels * p * p, rng);
    BlockSpec hs;
    hs.kind = BlockKind::Head;
    hs.in_shape = {n, c};
    hs.out_shape = image_shape();
    hs.patch = p;
    push(hs);
  }

  Config cfg_;
  std::vector<BlockSpec> specs_;
  std::vector<std::size_t> gateable_;

  TimeEmbedding<T> time_;
  Linear<T> patch_embed_;
  Tensor<T> pos_;
  std::vector<DiTBlock<T>> blocks_;
  Linear<T> head_ada_;
  Linear<T> head_out_;
};

// Backbone parameters stop requiring gradients; the optimizer never sees them.
template <class B>
void freeze(B& backbone) {
  backbone.for_each_param("", [](const std::string&, auto& t) { t.set_requires_grad(false); });
}

template <class T>
bool assert_frozen(const std::vector<std::vector<T>>& before, const std::vector<std::vector<T>>& after) {
  return snapshots_equal(before, after);
}

template <class B>
auto backbone_snapshot(B& backbone) {
  return snapshot(named_params(backbone));
}

}  // namespace flexctl
