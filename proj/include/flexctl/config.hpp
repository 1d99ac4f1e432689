#pragma once

// JSON configuration for training. Keys match the field names; unknown keys
// are rejected so typos do not silently fall back to defaults.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include <json.hpp>

#include "flexctl/backbone.hpp"
#include "flexctl/blocks.hpp"
#include "flexctl/control.hpp"
#include "flexctl/errors.hpp"
#include "flexctl/router.hpp"

namespace flexctl {

struct TrainConfig {
  std::string backbone_kind = "unet";
  std::string mode = "flex";
  double gamma = 0.5;
  double lambda_c = 0.5;
  double lr = 1e-3;
  double weight_decay = 0.0;
  long long warmup_steps = -1;  // negative: max_steps / 5
  long long max_steps = 2000;
  long long batch = 16;
  long long grad_accum = 1;
  std::uint64_t seed = 0;
  long long num_samples = 4000;
  long long pretrain_steps = 6000;
  double pretrain_lr = 2e-3;
  std::string backbone_checkpoint;
  std::string output_checkpoint;
  std::string log_path;
  TinyUNetConfig unet;
  TinyDiTConfig dit;
  GumbelParams gumbel;

  long long effective_warmup() const { return warmup_steps < 0 ? max_steps / 5 : warmup_steps; }
  BackboneKind kind() const { return backbone_kind_from_string(backbone_kind); }
  ControlMode control_mode() const { return control_mode_from_string(mode); }

  void validate() const {
    (void)kind();
    (void)control_mode();
    if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in (0, 1]");
    if (!(lambda_c >= 0.0)) throw ConfigError("lambda_c must be >= 0");
    if (!(lr > 0.0) || !(pretrain_lr > 0.0)) throw ConfigError("learning rates must be positive");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
    if (max_steps < 0) throw ConfigError("max_steps must be >= 0");
    if (effective_warmup() > max_steps) throw ConfigError("warmup_steps must not exceed max_steps");
    if (batch < 1) throw ConfigError("batch must be >= 1");
    if (grad_accum < 1) throw ConfigError("grad_accum must be >= 1");
    if (num_samples < 1) throw ConfigError("num_samples must be >= 1");
    if (pretrain_steps < 0) throw ConfigError("pretrain_steps must be >= 0");
    unet.validate();
    dit.validate();
    gumbel.validate();
  }
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.count(it.key())) throw ConfigError("unknown key '" + it.key() + "' in " + where);
  }
}

template <class V>
void read_key(const nlohmann::json& j, const char* key, V& dst) {
  if (!j.contains(key)) return;
  try {
    dst = j.at(key).get<V>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
  }
}

}  // namespace detail

inline TinyUNetConfig unet_config_from_json(const nlohmann::json& j) {
  detail::reject_unknown(j, {"image_size", "image_channels", "stage_channels", "resblocks_per_stage", "time_embed_dim", "num_classes"},
                         "unet");
  TinyUNetConfig c;
  detail::read_key(j, "image_size", c.image_size);
  detail::read_key(j, "image_channels", c.image_channels);
  detail::read_key(j, "stage_channels", c.stage_channels);
  detail::read_key(j, "resblocks_per_stage", c.resblocks_per_stage);
  detail::read_key(j, "time_embed_dim", c.time_embed_dim);
  detail::read_key(j, "num_classes", c.num_classes);
  return c;
}

inline nlohmann::json to_json(const TinyUNetConfig& c) {
  return {{"image_size", c.image_size},         {"image_channels", c.image_channels}, {"stage_channels", c.stage_channels},
          {"resblocks_per_stage", c.resblocks_per_stage}, {"time_embed_dim", c.time_embed_dim}, {"num_classes", c.num_classes}};
}

inline TinyDiTConfig dit_config_from_json(const nlohmann::json& j) {
  detail::reject_unknown(j, {"image_size", "image_channels", "patch", "width", "depth", "heads", "mlp_ratio", "num_classes"}, "dit");
  TinyDiTConfig c;
  detail::read_key(j, "image_size", c.image_size);
  detail::read_key(j, "image_channels", c.image_channels);
  detail::read_key(j, "patch", c.patch);
  detail::read_key(j, "width", c.width);
  detail::read_key(j, "depth", c.depth);
  detail::read_key(j, "heads", c.heads);
  detail::read_key(j, "mlp_ratio", c.mlp_ratio);
  detail::read_key(j, "num_classes", c.num_classes);
  return c;
}

inline nlohmann::json to_json(const TinyDiTConfig& c) {
  return {{"image_size", c.image_size}, {"image_channels", c.image_channels}, {"patch", c.patch},
          {"width", c.width},           {"depth", c.depth},                   {"heads", c.heads},
          {"mlp_ratio", c.mlp_ratio},   {"num_classes", c.num_classes}};
}

inline GumbelParams gumbel_from_json(const nlohmann::json& j) {
  detail::reject_unknown(j, {"temperature", "threshold", "train_threshold"}, "gumbel");
  GumbelParams g;
  detail::read_key(j, "temperature", g.temperature);
  detail::read_key(j, "threshold", g.threshold);
  detail::read_key(j, "train_threshold", g.train_threshold);
  return g;
}

inline nlohmann::json to_json(const GumbelParams& g) {
  return {{"temperature", g.temperature}, {"threshold", g.threshold}, {"train_threshold", g.train_threshold}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  detail::reject_unknown(j,
                         {"backbone_kind", "mode", "gamma", "lambda_c", "lr", "weight_decay", "warmup_steps", "max_steps", "batch",
                          "grad_accum", "seed", "num_samples", "pretrain_steps", "pretrain_lr", "backbone_checkpoint",
                          "output_checkpoint", "log_path", "unet", "dit", "gumbel"},
                         "config");
  TrainConfig c;
  detail::read_key(j, "backbone_kind", c.backbone_kind);
  detail::read_key(j, "mode", c.mode);
  detail::read_key(j, "gamma", c.gamma);
  detail::read_key(j, "lambda_c", c.lambda_c);
  detail::read_key(j, "lr", c.lr);
  detail::read_key(j, "weight_decay", c.weight_decay);
  detail::read_key(j, "warmup_steps", c.warmup_steps);
  detail::read_key(j, "max_steps", c.max_steps);
  detail::read_key(j, "batch", c.batch);
  detail::read_key(j, "grad_accum", c.grad_accum);
  detail::read_key(j, "seed", c.seed);
  detail::read_key(j, "num_samples", c.num_samples);
  detail::read_key(j, "pretrain_steps", c.pretrain_steps);
  detail::read_key(j, "pretrain_lr", c.pretrain_lr);
  detail::read_key(j, "backbone_checkpoint", c.backbone_checkpoint);
  detail::read_key(j, "output_checkpoint", c.output_checkpoint);
  detail::read_key(j, "log_path", c.log_path);
  if (j.contains("unet")) c.unet = unet_config_from_json(j.at("unet"));
  if (j.contains("dit")) c.dit = dit_config_from_json(j.at("dit"));
  if (j.contains("gumbel")) c.gumbel = gumbel_from_json(j.at("gumbel"));
  c.validate();
  return c;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"backbone_kind", c.backbone_kind},
          {"mode", c.mode},
          {"gamma", c.gamma},
          {"lambda_c", c.lambda_c},
          {"lr", c.lr},
          {"weight_decay", c.weight_decay},
          {"warmup_steps", c.warmup_steps},
          {"max_steps", c.max_steps},
          {"batch", c.batch},
          {"grad_accum", c.grad_accum},
          {"seed", c.seed},
          {"num_samples", c.num_samples},
          {"pretrain_steps", c.pretrain_steps},
          {"pretrain_lr", c.pretrain_lr},
          {"backbone_checkpoint", c.backbone_checkpoint},
          {"output_checkpoint", c.output_checkpoint},
          {"log_path", c.log_path},
          {"unet", to_json(c.unet)},
          {"dit", to_json(c.dit)},
          {"gumbel", to_json(c.gumbel)}};
}

inline TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("config '" + path.string() + "': " + e.what(), e.byte);
  }
  return train_config_from_json(j);
}

}  // namespace flexctl
