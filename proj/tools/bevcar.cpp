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
// bevcar command-line front end.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "bevcar/config.hpp"
#include "bevcar/data.hpp"
#include "bevcar/errors.hpp"
#include "bevcar/metrics.hpp"
#include "bevcar/png_io.hpp"
#include "bevcar/segmentation.hpp"
#include "bevcar/trainer.hpp"

namespace {

using namespace bevcar;
namespace fs = std::filesystem;

config::RunConfig preset(const std::string& name) {
  if (name == "desk") return config::desk_config();
  if (name == "full") return config::RunConfig{};
  throw ConfigError("unknown preset '" + name + "' (expected desk or full)");
}

std::vector<metrics::Condition> parse_conditions(const std::string& list) {
  std::vector<metrics::Condition> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(metrics::parse_condition(item));
  }
  if (out.empty()) throw ConfigError("--conditions needs at least one entry");
  return out;
}

struct GenArgs {
  std::string out;
  int num = 10;
  uint64_t seed = 0;
  std::string conditions = "day";
  std::string preset = "desk";
  std::string config;
  int threads = 0;
};

int run_gen(const GenArgs& a) {
  const auto run = a.config.empty() ? preset(a.preset) : config::resolve(a.config, {});
  data::DatasetOptions opts;
  opts.num_samples = a.num;
  opts.seed = a.seed;
  opts.threads = a.threads;
  opts.scene.grid = run.model.grid;
  opts.scene.rig.height = run.model.image_height;
  opts.scene.rig.width = run.model.image_width;
  opts.scene.conditions = parse_conditions(a.conditions);
  const auto tokens = data::generate_dataset(a.out, opts);
  std::cout << "wrote " << tokens.size() << " samples to " << a.out << "\n";
  return 0;
}

struct TrainArgs {
  std::string config;
  bool deterministic = false;
  std::vector<std::string> sets;
  std::string dataset;
  std::string checkpoint_dir;
  std::string log;
  long long steps = -1;
  long long seed = -1;
  double lr = -1.0;
  bool quiet = false;
};

int run_train(const TrainArgs& a) {
  std::vector<config::Override> overrides;
  for (const auto& s : a.sets) overrides.push_back(config::parse_override(s));
  if (!a.dataset.empty()) overrides.push_back({"dataset", nlohmann::json(a.dataset).dump()});
  if (!a.checkpoint_dir.empty()) {
    overrides.push_back({"checkpoint_dir", nlohmann::json(a.checkpoint_dir).dump()});
  }
  if (a.steps >= 0) overrides.push_back({"optimizer.steps", std::to_string(a.steps)});
  if (a.seed >= 0) overrides.push_back({"seed", std::to_string(a.seed)});
  if (a.lr >= 0.0) overrides.push_back({"optimizer.lr", nlohmann::json(a.lr).dump()});
  const auto cfg = config::resolve(a.config, overrides);

  trainer::TrainOptions opts;
  opts.deterministic = a.deterministic;
  opts.log_path = a.log;
  if (!a.quiet) {
    const int64_t every = std::max<int64_t>(1, cfg.optimizer.steps / 20);
    opts.on_step = [every, total = cfg.optimizer.steps](int64_t step, double loss) {
      if (step % every == 0 || step == total) {
        std::printf("step %6lld  loss %.6f\n", static_cast<long long>(step), loss);
        std::fflush(stdout);
      }
    };
  }
  const auto result = trainer::train(cfg, opts);
  std::cout << "checkpoint: " << result.checkpoint << "\n";
  if (result.final_eval) std::cout << result.final_eval->dump(2) << "\n";
  return 0;
}

struct EvalArgs {
  std::string ckpt;
  std::string data;
  std::string split;
  bool ranges = false;
  bool conditions = false;
  bool json = false;
};

int run_eval(const EvalArgs& a) {
  auto loaded = trainer::load_model(a.ckpt);
  const auto samples = trainer::load_all(a.data);
  trainer::EvalOptions opts;
  opts.ranges = a.ranges;
  opts.conditions = a.conditions;
  if (!a.split.empty()) opts.split = data::load_split(a.split);
  const auto report = trainer::evaluate(*loaded.model, samples, opts);
  std::cout << (a.json ? report.to_json().dump(2) + "\n" : report.to_text());
  return 0;
}

struct PredictArgs {
  std::string ckpt;
  std::string token;
  std::string data = ".";
  std::string out;
  std::string render;
  bool error_map = false;
};

int run_predict(const PredictArgs& a) {
  auto loaded = trainer::load_model(a.ckpt);
  const auto sample = data::load_sample(a.data, a.token);
  const auto logits = trainer::predict(*loaded.model, sample);
  const auto out = a.out.empty() ? a.token + "_logits.npy" : a.out;
  trainer::write_npy(out, logits);
  std::cout << "logits: " << out << "\n";
  if (!a.render.empty()) {
    const auto masks = segmentation::predict_masks(logits);
    const auto image = a.error_map
                           ? trainer::render_error_map(masks, sample.gt.stacked(), sample.gt.valid)
                           : trainer::render_masks(masks);
    png::write(a.render, image);
    std::cout << (a.error_map ? "error map: " : "render: ") << a.render << "\n";
  }
  return 0;
}

struct BenchArgs {
  std::string ckpt;
  std::string data;
  std::string token;
  int reps = 10;
};

int run_bench(const BenchArgs& a) {
  auto loaded = trainer::load_model(a.ckpt);
  const auto& m = loaded.config.model;
  data::Sample sample;
  if (!a.data.empty()) {
    const auto token = a.token.empty() ? data::list_tokens(a.data).at(0) : a.token;
    sample = data::load_sample(a.data, token);
  } else {
    data::SceneOptions so;
    so.grid = m.grid;
    so.rig.height = m.image_height;
    so.rig.width = m.image_width;
    sample = data::render_sample(data::generate_scene(0, so), "bench");
  }
  const auto stats = trainer::benchmark(*loaded.model, sample, a.reps);
  std::printf("median %.2f ms  (%.2f FPS, %d reps)\n", stats.median_ms, stats.fps, a.reps);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bevcar: camera-radar bird's-eye-view segmentation"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--num", gen.num, "Number of samples")->check(CLI::PositiveNumber);
  g->add_option("--seed", gen.seed, "Dataset seed");
  g->add_option("--conditions", gen.conditions, "Comma-separated conditions (day,rain,night)");
  g->add_option("--preset", gen.preset, "Grid and image size preset: desk or full");
  g->add_option("--config", gen.config, "Take grid and image size from a run config");
  g->add_option("--threads", gen.threads, "Worker threads (0: all cores)");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a model");
  t->add_option("--config", tr.config, "Run config JSON")->required();
  t->add_flag("--deterministic", tr.deterministic, "Deterministic kernels, one thread");
  t->add_option("--set", tr.sets, "Override a config key, e.g. optimizer.lr=5e-4");
  t->add_option("--dataset", tr.dataset, "Training dataset directory");
  t->add_option("--checkpoint-dir", tr.checkpoint_dir, "Checkpoint directory");
  t->add_option("--log", tr.log, "Metrics log path (JSON lines)");
  t->add_option("--steps", tr.steps, "Optimizer steps");
  t->add_option("--seed", tr.seed, "Seed");
  t->add_option("--lr", tr.lr, "Peak learning rate");
  t->add_flag("--quiet", tr.quiet, "No progress output");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint");
  e->add_option("--ckpt", ev.ckpt, "Checkpoint file")->required();
  e->add_option("--data", ev.data, "Dataset directory")->required();
  e->add_option("--split", ev.split, "Condition split JSON");
  e->add_flag("--ranges", ev.ranges, "Per distance interval tables");
  e->add_flag("--conditions", ev.conditions, "Per condition tables");
  e->add_flag("--json", ev.json, "Print JSON instead of tables");

  PredictArgs pr;
  auto* p = app.add_subcommand("predict", "Predict one sample");
  p->add_option("--ckpt", pr.ckpt, "Checkpoint file")->required();
  p->add_option("--token", pr.token, "Sample token")->required();
  p->add_option("--data", pr.data, "Dataset directory");
  p->add_option("--out", pr.out, "Logits output (.npy)");
  p->add_option("--render", pr.render, "Write a colour BEV raster (PNG)");
  p->add_flag("--error-map", pr.error_map, "Render an error map against ground truth");

  BenchArgs be;
  auto* b = app.add_subcommand("bench", "Measure forward runtime");
  b->add_option("--ckpt", be.ckpt, "Checkpoint file")->required();
  b->add_option("--reps", be.reps, "Timed repetitions")->check(CLI::PositiveNumber);
  b->add_option("--data", be.data, "Dataset directory (default: a generated scene)");
  b->add_option("--token", be.token, "Sample token");

  std::string preset_name = "desk";
  auto* pc = app.add_subcommand("print-config", "Print a preset run config");
  pc->add_option("--preset", preset_name, "desk or full");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*g) return run_gen(gen);
    if (*t) return run_train(tr);
    if (*e) return run_eval(ev);
    if (*p) {
      if (pr.error_map && pr.render.empty()) {
        throw ConfigError("--error-map needs --render PATH");
      }
      return run_predict(pr);
    }
    if (*b) return run_bench(be);
    if (*pc) {
      std::cout << config::to_json(preset(preset_name)).dump(2) << "\n";
      return 0;
    }
  } catch (const std::exception& ex) {
    std::cerr << "bevcar: " << ex.what() << "\n";
    return 1;
  }
  return 0;
}
