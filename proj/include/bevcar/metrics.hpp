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
#ifndef BEVCAR_METRICS_HPP_
#define BEVCAR_METRICS_HPP_

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "bevcar/geometry.hpp"
#include "bevcar/segmentation.hpp"
#include "json.hpp"

namespace bevcar::metrics {

// Per-class intersection and union cell counts. Accumulators over disjoint
// sample sets merge by addition.
class IoUAccumulator {
 public:
  explicit IoUAccumulator(int64_t classes = segmentation::kOutputChannels);

  // Counts cells of class `cls` inside `region` (all masks X x Y bool).
  void update(int64_t cls, const torch::Tensor& pred, const torch::Tensor& gt,
              const torch::Tensor& region);
  // pred/gt C x X x Y, region X x Y.
  void update_all(const torch::Tensor& pred, const torch::Tensor& gt,
                  const torch::Tensor& region);

  IoUAccumulator& merge(const IoUAccumulator& other);

  int64_t classes() const { return static_cast<int64_t>(intersection_.size()); }
  int64_t intersection(int64_t cls) const { return intersection_[cls]; }
  int64_t union_count(int64_t cls) const { return union_[cls]; }
  // I/U, or NaN when U == 0.
  double iou(int64_t cls) const;

  bool operator==(const IoUAccumulator&) const = default;

 private:
  std::vector<int64_t> intersection_;
  std::vector<int64_t> union_;
};

IoUAccumulator operator+(IoUAccumulator a, const IoUAccumulator& b);

// Rounds half away from zero to one decimal after snapping binary
// representation error at 1e-6.
double round_one_decimal(double value);

struct MetricsReport {
  std::vector<double> class_iou;  // NaN where undefined
  double map_mean = 0.0;          // mean over defined map classes
  double miou = 0.0;              // mean of vehicle and drivable area
  std::vector<std::string> notices;

  nlohmann::json to_json() const;
  // Aligned text, values scaled by `scale` (100 for percent) at one decimal.
  std::string to_table(double scale = 100.0) const;
};

// `class_iou` is in output channel order; any unit works as long as it is
// consistent.
MetricsReport summarize(std::span<const double> class_iou);
MetricsReport summarize(const IoUAccumulator& acc);

// Half-open distance intervals [b_i, b_{i+1}) in metres from the origin.
struct RangeIntervals {
  std::vector<double> bounds = {0.0, 20.0, 35.0, 50.0};

  size_t size() const { return bounds.size() - 1; }
  std::string label(size_t i) const;
};

// One X x Y bool mask per interval, by cell-centre distance.
std::vector<torch::Tensor> range_masks(const geometry::BevGrid& grid,
                                       const RangeIntervals& intervals = {});

enum class Condition { kDay, kRain, kNight };
std::string to_string(Condition c);
Condition parse_condition(const std::string& s);

struct ConditionSplit {
  std::map<std::string, Condition> condition_of;

  std::vector<std::string> tokens(Condition c) const;
  std::map<Condition, size_t> counts() const;
  nlohmann::json to_json() const;
};

struct RuntimeStats {
  double median_ms = 0.0;
  double fps = 0.0;
  std::vector<double> samples_ms;
};

// Median wall time of `forward` over `repetitions` timed calls after
// `warmup` untimed calls.
RuntimeStats measure_runtime(const std::function<void()>& forward,
                             int repetitions, int warmup = 1);

}  // namespace bevcar::metrics

#endif  // BEVCAR_METRICS_HPP_
