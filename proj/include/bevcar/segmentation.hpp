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
#ifndef BEVCAR_SEGMENTATION_HPP_
#define BEVCAR_SEGMENTATION_HPP_

#include <array>
#include <cstdint>
#include <string>
#include <string_view>

#include <torch/torch.h>

#include "json.hpp"

namespace bevcar::segmentation {

inline constexpr int64_t kMapClasses = 7;
inline constexpr int64_t kOutputChannels = kMapClasses + 1;

// Output channel order. Channel 0 is the union of all vehicle subclasses.
inline constexpr std::array<std::string_view, kOutputChannels> kClassNames = {
    "vehicle",      "drivable_area", "carpark_area", "ped_crossing",
    "walkway",      "stop_line",     "road_divider", "lane_divider"};

inline constexpr int64_t kVehicle = 0;
inline constexpr int64_t kDrivableArea = 1;

// {"vehicle": 0, "drivable_area": 1, ...}
nlohmann::json class_order_json();

// Boolean masks over an X x Y grid (optionally with a leading batch dim).
struct BevGroundTruth {
  torch::Tensor vehicle;  // [B x] X x Y
  torch::Tensor map;      // [B x] M x X x Y
  torch::Tensor valid;    // [B x] X x Y

  // All-false masks with all cells valid.
  static BevGroundTruth empty(int64_t x_cells, int64_t y_cells);
  void validate() const;
  // (M+1) x X x Y stack in output channel order.
  torch::Tensor stacked() const;
};

struct LossConfig {
  double alpha = 0.25;
  double gamma = 3.0;
  double w_bce = 1.0;
  double w_focal = 1.0;

  void validate() const;
};

struct LossValue {
  torch::Tensor value;
  // Set when the valid mask selects no cell; value is then zero.
  bool no_valid_cells = false;
};

// Binary cross-entropy on the vehicle channel, averaged over valid cells.
LossValue bce_loss(const torch::Tensor& vehicle_logits, const torch::Tensor& gt,
                   const torch::Tensor& valid);

// Alpha-balanced focal loss summed over map classes, each class averaged
// over valid cells. map_logits/gt are [B x] M x X x Y, valid [B x] X x Y.
LossValue focal_loss(const torch::Tensor& map_logits, const torch::Tensor& gt,
                     const torch::Tensor& valid, const LossConfig& config);

torch::Tensor total_loss(const torch::Tensor& bce, const torch::Tensor& focal,
                         const LossConfig& config);

// sigmoid(logit) >= 0.5.
torch::Tensor predict_masks(const torch::Tensor& logits);

// Two 3x3 convolutions with ReLU and a final 1x1 convolution producing
// M+1 multi-label logits.
class SegmentationHeadImpl : public torch::nn::Module {
 public:
  SegmentationHeadImpl(int64_t in_channels, int64_t hidden_channels,
                       int64_t out_channels = kOutputChannels);
  torch::Tensor forward(const torch::Tensor& encoded);

  torch::nn::Conv2d conv1{nullptr};
  torch::nn::Conv2d conv2{nullptr};
  torch::nn::Conv2d classifier{nullptr};
};
TORCH_MODULE(SegmentationHead);

}  // namespace bevcar::segmentation

#endif  // BEVCAR_SEGMENTATION_HPP_
