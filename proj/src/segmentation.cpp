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
#include "bevcar/segmentation.hpp"

#include "bevcar/errors.hpp"

namespace bevcar::segmentation {

namespace F = torch::nn::functional;

nlohmann::json class_order_json() {
  nlohmann::json j = nlohmann::json::object();
  for (size_t c = 0; c < kClassNames.size(); ++c) {
    j[std::string(kClassNames[c])] = c;
  }
  return j;
}

BevGroundTruth BevGroundTruth::empty(int64_t x_cells, int64_t y_cells) {
  return {torch::zeros({x_cells, y_cells}, torch::kBool),
          torch::zeros({kMapClasses, x_cells, y_cells}, torch::kBool),
          torch::ones({x_cells, y_cells}, torch::kBool)};
}

void BevGroundTruth::validate() const {
  if (vehicle.sizes() != valid.sizes()) {
    throw ConfigError("ground truth: vehicle and valid masks differ in shape");
  }
  const int64_t d = vehicle.dim();
  if (map.dim() != d + 1 || map.size(d - 2) != kMapClasses ||
      map.size(-1) != vehicle.size(-1) || map.size(-2) != vehicle.size(-2)) {
    throw ConfigError("ground truth: map masks must be [B x] 7 x X x Y");
  }
}

torch::Tensor BevGroundTruth::stacked() const {
  return torch::cat({vehicle.unsqueeze(-3), map}, -3);
}

void LossConfig::validate() const {
  if (!(alpha > 0.0 && alpha < 1.0)) {
    throw ConfigError("loss: alpha must lie in (0, 1)");
  }
  if (!(gamma >= 0.0)) throw ConfigError("loss: gamma must be >= 0");
  if (!(w_bce >= 0.0) || !(w_focal >= 0.0)) {
    throw ConfigError("loss: weights must be non-negative");
  }
}

namespace {

// -log p_t with s = logit if y else -logit, i.e. softplus(-s).
torch::Tensor signed_logits(const torch::Tensor& logits, const torch::Tensor& gt) {
  return torch::where(gt, logits, -logits);
}

}  // namespace

LossValue bce_loss(const torch::Tensor& vehicle_logits, const torch::Tensor& gt,
                   const torch::Tensor& valid) {
  if (vehicle_logits.sizes() != gt.sizes() || gt.sizes() != valid.sizes()) {
    throw ConfigError("bce_loss: logits, labels and valid mask differ in shape");
  }
  const auto v = valid.to(vehicle_logits.scalar_type());
  const auto count = v.sum();
  if (count.item<double>() == 0.0) {
    return {(vehicle_logits * 0).sum(), true};
  }
  auto s = signed_logits(vehicle_logits, gt.to(torch::kBool));
  auto nll = F::softplus(-s);
  return {(nll * v).sum() / count, false};
}

LossValue focal_loss(const torch::Tensor& map_logits, const torch::Tensor& gt,
                     const torch::Tensor& valid, const LossConfig& config) {
  config.validate();
  if (map_logits.sizes() != gt.sizes() || map_logits.dim() != valid.dim() + 1) {
    throw ConfigError("focal_loss: logits and labels differ in shape");
  }
  const int64_t class_dim = map_logits.dim() - 3;
  const auto v = valid.unsqueeze(class_dim).to(map_logits.scalar_type());
  const auto count = v.sum();
  if (count.item<double>() == 0.0) return {(map_logits * 0).sum(), true};

  const auto labels = gt.to(torch::kBool);
  auto s = signed_logits(map_logits, labels);
  auto nll = F::softplus(-s);                                  // -log p_t
  auto modulation = torch::exp(config.gamma * F::logsigmoid(-s));  // (1 - p_t)^gamma
  auto alpha_t = torch::where(labels, torch::full_like(s, config.alpha),
                              torch::full_like(s, 1.0 - config.alpha));
  auto per_cell = alpha_t * modulation * nll * v;
  // Reduce every dim except the class dim, then sum classes.
  std::vector<int64_t> dims;
  for (int64_t d = 0; d < per_cell.dim(); ++d) {
    if (d != class_dim) dims.push_back(d);
  }
  auto per_class = per_cell.sum(dims) / count;
  return {per_class.sum(), false};
}

torch::Tensor total_loss(const torch::Tensor& bce, const torch::Tensor& focal,
                         const LossConfig& config) {
  return config.w_bce * bce + config.w_focal * focal;
}

torch::Tensor predict_masks(const torch::Tensor& logits) { return logits >= 0; }

SegmentationHeadImpl::SegmentationHeadImpl(int64_t in_channels,
                                           int64_t hidden_channels,
                                           int64_t out_channels) {
  conv1 = register_module(
      "conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_channels,
                                                          hidden_channels, 3)
                                     .padding(1)));
  conv2 = register_module(
      "conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(hidden_channels,
                                                          hidden_channels, 3)
                                     .padding(1)));
  classifier = register_module(
      "classifier", torch::nn::Conv2d(hidden_channels, out_channels, 1));
}

torch::Tensor SegmentationHeadImpl::forward(const torch::Tensor& encoded) {
  auto x = torch::relu(conv1->forward(encoded));
  x = torch::relu(conv2->forward(x));
  return classifier->forward(x);
}

}  // namespace bevcar::segmentation
