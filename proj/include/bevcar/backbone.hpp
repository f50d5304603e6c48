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
#ifndef BEVCAR_BACKBONE_HPP_
#define BEVCAR_BACKBONE_HPP_

#include <array>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace bevcar::backbone {

inline constexpr std::array<int64_t, 4> kPyramidStrides = {4, 8, 16, 32};

// Four maps N x F x (H/s) x (W/s) for s in kPyramidStrides; camera n of
// every map belongs to input image n.
using FeaturePyramid = std::array<torch::Tensor, 4>;

// Contract for image encoders. Inputs are N x 3 x H x W RGB in [0, 1] with
// H and W divisible by 32.
class ImageBackbone : public torch::nn::Module {
 public:
  ~ImageBackbone() override = default;

  virtual FeaturePyramid encode(const torch::Tensor& images) = 0;
  virtual int64_t channels() const = 0;

  // Frozen backbones stop gradient flow into their own weights.
  void set_frozen(bool frozen);
  bool frozen() const { return frozen_; }

 private:
  bool frozen_ = false;
};

// Throws ConfigError unless `images` is N x 3 x H x W with H, W % 32 == 0.
void check_image_batch(const torch::Tensor& images);

using BackboneFactory =
    std::function<std::shared_ptr<ImageBackbone>(int64_t channels)>;

// Name-keyed registry; "resnet_small" is always present.
void register_backbone(const std::string& name, BackboneFactory factory);
std::shared_ptr<ImageBackbone> make_backbone(const std::string& name,
                                             int64_t channels);
std::vector<std::string> registered_backbones();

// Residual convolutional pyramid: a two-convolution stride-4 stem followed
// by three stride-2 residual stages, each level projected to F channels.
class ResNetSmall : public ImageBackbone {
 public:
  explicit ResNetSmall(int64_t channels);

  FeaturePyramid encode(const torch::Tensor& images) override;
  int64_t channels() const override { return channels_; }

 private:
  int64_t channels_;
  torch::nn::Sequential stem_{nullptr};
  std::vector<torch::nn::Sequential> stages_;
  std::vector<torch::nn::Conv2d> shortcuts_;
  std::vector<torch::nn::Conv2d> laterals_;
};

}  // namespace bevcar::backbone

#endif  // BEVCAR_BACKBONE_HPP_
