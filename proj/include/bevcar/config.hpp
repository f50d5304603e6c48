/* Copyright 2026 The bevcar Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#ifndef BEVCAR_CONFIG_HPP_
#define BEVCAR_CONFIG_HPP_

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "bevcar/geometry.hpp"
#include "bevcar/segmentation.hpp"
#include "json.hpp"

namespace bevcar::config {

// Everything that determines the network's structure and weight shapes.
struct ModelConfig {
  geometry::BevGrid grid;
  int64_t image_height = 448;
  int64_t image_width = 896;
  std::string backbone = "resnet_small";
  int64_t channels = 64;
  int64_t heads = 4;
  int64_t points = 4;
  double ffn_expansion = 2.0;
  int64_t lift_blocks = 6;
  int64_t fusion_blocks = 6;
  int64_t head_hidden = 64;
  bool use_radar = true;
  int64_t max_points = 10;
  int64_t sweeps = 5;
  int64_t splat_stride = 8;

  void validate() const;
};

struct OptimizerConfig {
  double lr = 1e-3;
  double weight_decay = 1e-2;
  int64_t steps = 2000;
  int64_t warmup_steps = 20;
  double grad_clip = 5.0;  // 0 disables clipping

  void validate() const;
};

struct RunConfig {
  ModelConfig model;
  segmentation::LossConfig loss;
  OptimizerConfig optimizer;
  int64_t batch_size = 1;
  uint64_t seed = 0;
  std::string dataset;
  std::string eval_dataset;  // optional holdout, evaluated every eval_every
  std::string split;
  std::string checkpoint_dir = "checkpoints";
  int64_t eval_every = 0;
  int64_t checkpoint_every = 0;

  void validate() const;
};

// Nested JSON with sections grid, image, backbone, attention, model, loss,
// optimizer and the top-level run keys.
nlohmann::json to_json(const RunConfig& config);
// Strict: unknown keys or wrongly typed values raise ConfigError.
RunConfig from_json(const nlohmann::json& j);

nlohmann::json model_json(const ModelConfig& model);
ModelConfig model_from_json(const nlohmann::json& j);

// Hex FNV-1a over the canonical model JSON.
std::string config_hash(const ModelConfig& model);

// "a.b.c=value" assignments; the value is parsed as JSON when possible and
// taken as a string otherwise.
struct Override {
  std::string path;
  std::string value;
};
Override parse_override(const std::string& assignment);

// Resolves a run configuration. Precedence, highest first: `overrides`,
// values in `file` (when non-empty), the BEVCAR_SEED environment variable
// (seed only), built-in defaults.
RunConfig resolve(const std::string& file, const std::vector<Override>& overrides);

// Desk-scale defaults: 100 x 100 cells over 50 m, small images and widths.
RunConfig desk_config();

}  // namespace bevcar::config

#endif  // BEVCAR_CONFIG_HPP_
