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
#ifndef BEVCAR_TRAINER_HPP_
#define BEVCAR_TRAINER_HPP_

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "bevcar/config.hpp"
#include "bevcar/data.hpp"
#include "bevcar/metrics.hpp"
#include "bevcar/model.hpp"
#include "bevcar/png_io.hpp"
#include "json.hpp"

namespace bevcar::trainer {

// Single-threaded intra-op execution and deterministic kernels.
void enable_determinism();

// Learning rate at 0-based `step`: linear warm-up, then cosine decay to 0.
double learning_rate(const config::OptimizerConfig& opt, int64_t step);

struct TrainOptions {
  bool deterministic = false;
  // Defaults to <checkpoint_dir>/train_log.jsonl.
  std::string log_path;
  // Called after every step with (1-based step, total loss).
  std::function<void(int64_t, double)> on_step;
  // Evaluate the training set after the last step and log it.
  bool final_eval = true;
};

struct TrainResult {
  std::vector<double> losses;
  int64_t steps = 0;
  std::string checkpoint;  // final checkpoint path
  std::optional<nlohmann::json> final_eval;
};

// Loads `config.dataset` (and `config.eval_dataset` if set) and trains.
TrainResult train(const config::RunConfig& config, const TrainOptions& options);

// Trains on in-memory samples.
TrainResult train_on(const config::RunConfig& config,
                     const std::vector<data::Sample>& samples,
                     const TrainOptions& options,
                     const std::vector<data::Sample>* holdout = nullptr);

struct EvalOptions {
  bool ranges = false;
  bool conditions = false;
  // Required for conditions unless every sample carries its own label.
  std::optional<metrics::ConditionSplit> split;
  metrics::RangeIntervals intervals;
};

struct EvalReport {
  metrics::IoUAccumulator overall;
  std::vector<std::pair<std::string, metrics::IoUAccumulator>> ranges;
  std::vector<std::pair<metrics::Condition, metrics::IoUAccumulator>> conditions;
  size_t samples = 0;

  nlohmann::json to_json() const;
  std::string to_text() const;
};

// Per-sample accumulators merged by addition. Throws ConfigError listing
// tokens absent from the split when conditions are requested with a split.
EvalReport evaluate(model::BevCarModelImpl& model,
                    const std::vector<data::Sample>& samples,
                    const EvalOptions& options = {});

// Per-sample IoU contribution (used by evaluate).
metrics::IoUAccumulator accumulate(const torch::Tensor& logits,
                                   const segmentation::BevGroundTruth& gt,
                                   const torch::Tensor& region);

struct LoadedModel {
  config::RunConfig config;
  model::BevCarModel model{nullptr};
  int64_t step = 0;
};
LoadedModel load_model(const std::string& checkpoint_path);

// (M+1) x X x Y float32 logits for one sample, eval mode, no grad.
torch::Tensor predict(model::BevCarModelImpl& model, const data::Sample& sample);

std::vector<data::Sample> load_all(const std::string& root,
                                   const std::vector<std::string>& tokens = {});

// NumPy .npy v1.0, little-endian float32, C order.
void write_npy(const std::string& path, const torch::Tensor& tensor);
torch::Tensor read_npy(const std::string& path);

// Colour palette (RGB) used by render_masks:
//   background     ( 30,  30,  30)
//   drivable_area  (120, 120, 120)   carpark_area (70, 90, 150)
//   ped_crossing   (230, 230, 230)   walkway     (190, 160, 120)
//   stop_line      (220,  60,  60)   road_divider (240, 200, 40)
//   lane_divider   ( 80, 200, 220)   vehicle     (255, 140,   0)
// Map channels are painted in channel order, vehicles on top.
inline constexpr std::array<std::array<uint8_t, 3>, 9> kPalette = {{
    {255, 140, 0},
    {120, 120, 120},
    {70, 90, 150},
    {230, 230, 230},
    {190, 160, 120},
    {220, 60, 60},
    {240, 200, 40},
    {80, 200, 220},
    {30, 30, 30},
}};
// Error map: correct cells neutral grey, any false positive red, any false
// negative blue, both magenta, invalid cells black.
inline constexpr std::array<uint8_t, 3> kNeutral = {128, 128, 128};
inline constexpr std::array<uint8_t, 3> kFalsePositive = {220, 40, 40};
inline constexpr std::array<uint8_t, 3> kFalseNegative = {40, 90, 220};
inline constexpr std::array<uint8_t, 3> kBothErrors = {200, 40, 200};
inline constexpr std::array<uint8_t, 3> kInvalid = {0, 0, 0};

// masks: (M+1) x X x Y bool. Image is X rows by Y columns, forward up.
png::Image render_masks(const torch::Tensor& masks);
png::Image render_error_map(const torch::Tensor& pred, const torch::Tensor& gt,
                            const torch::Tensor& valid);

// Median forward time of `model` on `sample` (no data loading or loss).
metrics::RuntimeStats benchmark(model::BevCarModelImpl& model,
                                const data::Sample& sample, int repetitions);

}  // namespace bevcar::trainer

#endif  // BEVCAR_TRAINER_HPP_
