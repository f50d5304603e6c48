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
#include "bevcar/config.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>

#include "bevcar/errors.hpp"

namespace bevcar::config {

using nlohmann::json;

void ModelConfig::validate() const {
  grid.validate();
  if (channels <= 0 || heads <= 0 || points <= 0 || head_hidden <= 0) {
    throw ConfigError("model: channels, heads, points and head_hidden must be positive");
  }
  if (channels % heads != 0) {
    throw ConfigError("model: channels (" + std::to_string(channels) +
                      ") must be divisible by heads (" + std::to_string(heads) + ")");
  }
  if (lift_blocks < 1 || fusion_blocks < 0) {
    throw ConfigError("model: need at least one lifting block");
  }
  if (image_height % 32 != 0 || image_width % 32 != 0 || image_height <= 0 ||
      image_width <= 0) {
    throw ConfigError("model: image size must be a positive multiple of 32");
  }
  if (grid.x_cells % 4 != 0 || grid.y_cells % 4 != 0) {
    throw ConfigError("model: BEV grid cells must be divisible by 4");
  }
  if (max_points < 1) throw ConfigError("model: max_points must be >= 1");
  if (sweeps < 1) throw ConfigError("model: sweeps must be >= 1");
  if (splat_stride != 8) throw ConfigError("model: splat stride is fixed at 8");
  if (!(ffn_expansion > 0.0)) throw ConfigError("model: ffn_expansion must be > 0");
}

void OptimizerConfig::validate() const {
  if (!(lr >= 0.0)) throw ConfigError("optimizer: lr must be >= 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("optimizer: weight_decay must be >= 0");
  if (steps < 0 || warmup_steps < 0) {
    throw ConfigError("optimizer: steps must be >= 0");
  }
  if (!(grad_clip >= 0.0)) throw ConfigError("optimizer: grad_clip must be >= 0");
}

void RunConfig::validate() const {
  model.validate();
  loss.validate();
  optimizer.validate();
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (eval_every < 0 || checkpoint_every < 0) {
    throw ConfigError("eval_every and checkpoint_every must be >= 0");
  }
}

json model_json(const ModelConfig& m) {
  return {{"grid",
           {{"x_cells", m.grid.x_cells},
            {"y_cells", m.grid.y_cells},
            {"z_cells", m.grid.z_cells},
            {"x_extent", m.grid.x_extent},
            {"y_extent", m.grid.y_extent},
            {"z_min", m.grid.z_min},
            {"z_max", m.grid.z_max}}},
          {"image", {{"height", m.image_height}, {"width", m.image_width}}},
          {"backbone", {{"name", m.backbone}, {"channels", m.channels}}},
          {"attention",
           {{"heads", m.heads},
            {"points", m.points},
            {"ffn_expansion", m.ffn_expansion}}},
          {"model",
           {{"lift_blocks", m.lift_blocks},
            {"fusion_blocks", m.fusion_blocks},
            {"head_hidden", m.head_hidden},
            {"use_radar", m.use_radar},
            {"max_points", m.max_points},
            {"sweeps", m.sweeps},
            {"splat_stride", m.splat_stride}}}};
}

json to_json(const RunConfig& c) {
  json j = model_json(c.model);
  j["loss"] = {{"alpha", c.loss.alpha},
               {"gamma", c.loss.gamma},
               {"w_bce", c.loss.w_bce},
               {"w_focal", c.loss.w_focal}};
  j["optimizer"] = {{"lr", c.optimizer.lr},
                    {"weight_decay", c.optimizer.weight_decay},
                    {"steps", c.optimizer.steps},
                    {"warmup_steps", c.optimizer.warmup_steps},
                    {"grad_clip", c.optimizer.grad_clip}};
  j["batch_size"] = c.batch_size;
  j["seed"] = c.seed;
  j["dataset"] = c.dataset;
  j["eval_dataset"] = c.eval_dataset;
  j["split"] = c.split;
  j["checkpoint_dir"] = c.checkpoint_dir;
  j["eval_every"] = c.eval_every;
  j["checkpoint_every"] = c.checkpoint_every;
  return j;
}

namespace {

// Rejects keys of `given` that do not exist in `schema`, recursively.
void check_keys(const json& given, const json& schema, const std::string& prefix) {
  if (!given.is_object()) {
    throw ConfigError("config: '" + (prefix.empty() ? "<root>" : prefix) +
                      "' must be an object");
  }
  for (const auto& [key, value] : given.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!schema.contains(key)) throw ConfigError("config: unknown key '" + path + "'");
    if (schema[key].is_object()) check_keys(value, schema[key], path);
  }
}

template <typename T>
void read(const json& j, const char* section, const char* key, T& out) {
  const json* node = &j;
  std::string path = key;
  if (section != nullptr) {
    if (!j.contains(section)) return;
    node = &j.at(section);
    path = std::string(section) + "." + key;
  }
  if (!node->contains(key)) return;
  const json& v = node->at(key);
  bool ok = true;
  if constexpr (std::is_same_v<T, bool>) {
    ok = v.is_boolean();
  } else if constexpr (std::is_integral_v<T>) {
    ok = v.is_number_integer() && (!std::is_unsigned_v<T> || v.is_number_unsigned() ||
                                   v.get<int64_t>() >= 0);
  } else if constexpr (std::is_floating_point_v<T>) {
    ok = v.is_number();
  } else {
    ok = v.is_string();
  }
  if (!ok) throw ConfigError("config: '" + path + "' has the wrong type");
  out = v.get<T>();
}

void read_model(const json& j, ModelConfig& m) {
  read(j, "grid", "x_cells", m.grid.x_cells);
  read(j, "grid", "y_cells", m.grid.y_cells);
  read(j, "grid", "z_cells", m.grid.z_cells);
  read(j, "grid", "x_extent", m.grid.x_extent);
  read(j, "grid", "y_extent", m.grid.y_extent);
  read(j, "grid", "z_min", m.grid.z_min);
  read(j, "grid", "z_max", m.grid.z_max);
  read(j, "image", "height", m.image_height);
  read(j, "image", "width", m.image_width);
  read(j, "backbone", "name", m.backbone);
  read(j, "backbone", "channels", m.channels);
  read(j, "attention", "heads", m.heads);
  read(j, "attention", "points", m.points);
  read(j, "attention", "ffn_expansion", m.ffn_expansion);
  read(j, "model", "lift_blocks", m.lift_blocks);
  read(j, "model", "fusion_blocks", m.fusion_blocks);
  read(j, "model", "head_hidden", m.head_hidden);
  read(j, "model", "use_radar", m.use_radar);
  read(j, "model", "max_points", m.max_points);
  read(j, "model", "sweeps", m.sweeps);
  read(j, "model", "splat_stride", m.splat_stride);
}

}  // namespace

ModelConfig model_from_json(const json& j) {
  check_keys(j, model_json(ModelConfig{}), "");
  ModelConfig m;
  read_model(j, m);
  return m;
}

RunConfig from_json(const json& j) {
  check_keys(j, to_json(RunConfig{}), "");
  RunConfig c;
  read_model(j, c.model);
  read(j, "loss", "alpha", c.loss.alpha);
  read(j, "loss", "gamma", c.loss.gamma);
  read(j, "loss", "w_bce", c.loss.w_bce);
  read(j, "loss", "w_focal", c.loss.w_focal);
  read(j, "optimizer", "lr", c.optimizer.lr);
  read(j, "optimizer", "weight_decay", c.optimizer.weight_decay);
  read(j, "optimizer", "steps", c.optimizer.steps);
  read(j, "optimizer", "warmup_steps", c.optimizer.warmup_steps);
  read(j, "optimizer", "grad_clip", c.optimizer.grad_clip);
  read(j, nullptr, "batch_size", c.batch_size);
  read(j, nullptr, "seed", c.seed);
  read(j, nullptr, "dataset", c.dataset);
  read(j, nullptr, "eval_dataset", c.eval_dataset);
  read(j, nullptr, "split", c.split);
  read(j, nullptr, "checkpoint_dir", c.checkpoint_dir);
  read(j, nullptr, "eval_every", c.eval_every);
  read(j, nullptr, "checkpoint_every", c.checkpoint_every);
  return c;
}

std::string config_hash(const ModelConfig& model) {
  const std::string text = model_json(model).dump();
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

Override parse_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' must look like key.path=value");
  }
  return {assignment.substr(0, eq), assignment.substr(eq + 1)};
}

namespace {

void apply_override(json& j, const Override& o) {
  json* node = &j;
  size_t start = 0;
  while (true) {
    const auto dot = o.path.find('.', start);
    const std::string key = o.path.substr(start, dot - start);
    if (key.empty()) throw ConfigError("override '" + o.path + "': empty key");
    if (dot == std::string::npos) {
      json value;
      try {
        value = json::parse(o.value);
      } catch (const json::exception&) {
        value = o.value;
      }
      (*node)[key] = value;
      return;
    }
    if (!node->contains(key) || !(*node)[key].is_object()) (*node)[key] = json::object();
    node = &(*node)[key];
    start = dot + 1;
  }
}

}  // namespace

RunConfig resolve(const std::string& file, const std::vector<Override>& overrides) {
  json j = json::object();
  if (!file.empty()) {
    std::ifstream in(file);
    if (!in) throw ConfigError("cannot open config file '" + file + "'");
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw ConfigError("config file '" + file + "': " + e.what());
    }
    if (!j.is_object()) throw ConfigError("config file '" + file + "' must hold an object");
  }
  if (!j.contains("seed")) {
    if (const char* env = std::getenv("BEVCAR_SEED"); env != nullptr && *env != '\0') {
      char* end = nullptr;
      const unsigned long long seed = std::strtoull(env, &end, 10);
      if (*end != '\0') throw ConfigError("BEVCAR_SEED must be an unsigned integer");
      j["seed"] = static_cast<uint64_t>(seed);
    }
  }
  for (const auto& o : overrides) apply_override(j, o);
  RunConfig c = from_json(j);
  c.validate();
  return c;
}

RunConfig desk_config() {
  RunConfig c;
  c.model.grid.x_cells = 100;
  c.model.grid.y_cells = 100;
  c.model.grid.z_cells = 4;
  c.model.grid.x_extent = 50.0;
  c.model.grid.y_extent = 50.0;
  c.model.grid.z_min = 0.0;
  c.model.grid.z_max = 5.0;
  c.model.image_height = 64;
  c.model.image_width = 128;
  c.model.channels = 32;
  c.model.heads = 2;
  c.model.points = 2;
  c.model.lift_blocks = 2;
  c.model.fusion_blocks = 2;
  c.model.head_hidden = 32;
  return c;
}

}  // namespace bevcar::config
