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
#include "bevcar/backbone.hpp"

#include <map>
#include <mutex>
#include <numeric>

#include "bevcar/errors.hpp"

namespace bevcar::backbone {
namespace {

int64_t group_count(int64_t channels) {
  for (int64_t g = 8; g > 1; --g) {
    if (channels % g == 0) return g;
  }
  return 1;
}

void append_conv_norm_relu(torch::nn::Sequential& seq, int64_t in, int64_t out,
                           int64_t stride) {
  seq->push_back(torch::nn::Conv2d(
      torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1).bias(false)));
  seq->push_back(torch::nn::GroupNorm(group_count(out), out));
  seq->push_back(torch::nn::ReLU());
}

struct Registry {
  std::mutex mutex;
  std::map<std::string, BackboneFactory> factories;

  Registry() {
    factories["resnet_small"] = [](int64_t channels) {
      return std::make_shared<ResNetSmall>(channels);
    };
  }
};

Registry& registry() {
  static Registry r;
  return r;
}

}  // namespace

void ImageBackbone::set_frozen(bool frozen) {
  frozen_ = frozen;
  for (auto& p : parameters()) p.set_requires_grad(!frozen);
}

void check_image_batch(const torch::Tensor& images) {
  if (images.dim() != 4 || images.size(1) != 3) {
    throw ConfigError("backbone: expected N x 3 x H x W images");
  }
  if (images.size(2) % 32 != 0 || images.size(3) % 32 != 0) {
    throw ConfigError("backbone: image size " + std::to_string(images.size(2)) +
                      "x" + std::to_string(images.size(3)) +
                      " is not divisible by 32");
  }
}

void register_backbone(const std::string& name, BackboneFactory factory) {
  auto& r = registry();
  std::lock_guard<std::mutex> lock(r.mutex);
  r.factories[name] = std::move(factory);
}

std::shared_ptr<ImageBackbone> make_backbone(const std::string& name,
                                             int64_t channels) {
  auto& r = registry();
  BackboneFactory factory;
  {
    std::lock_guard<std::mutex> lock(r.mutex);
    auto it = r.factories.find(name);
    if (it == r.factories.end()) {
      throw ConfigError("unknown backbone '" + name + "'");
    }
    factory = it->second;
  }
  auto backbone = factory(channels);
  if (backbone->channels() != channels) {
    throw ConfigError("backbone '" + name + "' produced " +
                      std::to_string(backbone->channels()) +
                      " channels, expected " + std::to_string(channels));
  }
  return backbone;
}

std::vector<std::string> registered_backbones() {
  auto& r = registry();
  std::lock_guard<std::mutex> lock(r.mutex);
  std::vector<std::string> names;
  for (const auto& [name, _] : r.factories) names.push_back(name);
  return names;
}

ResNetSmall::ResNetSmall(int64_t channels) : channels_(channels) {
  if (channels <= 0) throw ConfigError("backbone: channels must be positive");
  const int64_t base = std::max<int64_t>(16, channels / 2);
  const std::array<int64_t, 4> widths = {base, std::max<int64_t>(base, channels),
                                         std::max<int64_t>(base, channels),
                                         std::max<int64_t>(base, channels)};
  torch::nn::Sequential stem;
  append_conv_norm_relu(stem, 3, widths[0], 2);
  append_conv_norm_relu(stem, widths[0], widths[0], 2);
  stem_ = register_module("stem", stem);
  for (size_t s = 1; s < widths.size(); ++s) {
    auto body = torch::nn::Sequential(
        torch::nn::Conv2d(torch::nn::Conv2dOptions(widths[s - 1], widths[s], 3)
                              .stride(2)
                              .padding(1)
                              .bias(false)),
        torch::nn::GroupNorm(group_count(widths[s]), widths[s]),
        torch::nn::ReLU(),
        torch::nn::Conv2d(torch::nn::Conv2dOptions(widths[s], widths[s], 3)
                              .padding(1)
                              .bias(false)),
        torch::nn::GroupNorm(group_count(widths[s]), widths[s]));
    stages_.push_back(register_module("stage" + std::to_string(s), body));
    shortcuts_.push_back(register_module(
        "shortcut" + std::to_string(s),
        torch::nn::Conv2d(torch::nn::Conv2dOptions(widths[s - 1], widths[s], 1)
                              .stride(2)
                              .bias(false))));
  }
  for (size_t s = 0; s < widths.size(); ++s) {
    laterals_.push_back(register_module(
        "lateral" + std::to_string(s),
        torch::nn::Conv2d(torch::nn::Conv2dOptions(widths[s], channels, 1))));
  }
}

FeaturePyramid ResNetSmall::encode(const torch::Tensor& images) {
  check_image_batch(images);
  auto x = stem_->forward((images - 0.5) / 0.25);
  FeaturePyramid out;
  out[0] = laterals_[0]->forward(x);
  for (size_t s = 0; s < stages_.size(); ++s) {
    x = torch::relu(stages_[s]->forward(x) + shortcuts_[s]->forward(x));
    out[s + 1] = laterals_[s + 1]->forward(x);
  }
  return out;
}

}  // namespace bevcar::backbone
