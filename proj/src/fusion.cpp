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
#include "bevcar/fusion.hpp"

#include "bevcar/errors.hpp"
#include "bevcar/lifting.hpp"

namespace bevcar::fusion {

namespace F = torch::nn::functional;

BevFusionImpl::BevFusionImpl(const FusionOptions& options) : options_(options) {
  q_pos = register_parameter(
      "q_pos", torch::randn({options.channels, options.x_cells, options.y_cells}) *
                   0.02);
  q_bev = register_parameter(
      "q_bev", torch::randn({options.channels, options.x_cells, options.y_cells}) *
                   0.02);
  attention::DeformableAttentionOptions ao;
  ao.channels = options.channels;
  ao.heads = options.heads;
  ao.points = options.points;
  blocks = register_module("blocks", torch::nn::ModuleList());
  for (int64_t i = 0; i < options.blocks; ++i) {
    blocks->push_back(attention::DeformableBlock(ao, options.ffn_expansion));
  }
}

torch::Tensor BevFusionImpl::compose(const torch::Tensor& f_rad) {
  return lifting::compose_queries(f_rad, q_pos.unsqueeze(0).expand_as(f_rad),
                                  q_bev.unsqueeze(0).expand_as(f_rad));
}

torch::Tensor BevFusionImpl::forward(const torch::Tensor& queries,
                                     const torch::Tensor& f_img_bev) {
  if (queries.sizes() != f_img_bev.sizes()) {
    throw ConfigError("fusion: queries and lifted features differ in shape");
  }
  const auto b = queries.size(0);
  const auto x = queries.size(2);
  const auto y = queries.size(3);
  auto refs = attention::ReferencePoints::bev_plane(b, x, y);
  auto values = attention::ValueMaps::from_batch(f_img_bev);
  auto q = lifting::to_queries(queries);
  for (size_t i = 0; i < blocks->size(); ++i) {
    q = block(i).forward(q, refs, values);
  }
  return lifting::from_queries(q, b, x, y);
}

ChannelNormImpl::ChannelNormImpl(int64_t channels) {
  norm = register_module(
      "norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({channels})));
}

torch::Tensor ChannelNormImpl::forward(const torch::Tensor& x) {
  return norm->forward(x.permute({0, 2, 3, 1})).permute({0, 3, 1, 2});
}

BevEncoderImpl::Residual BevEncoderImpl::make_residual(const std::string& name,
                                                       int64_t in, int64_t out) {
  Residual r;
  r.conv1 = register_module(
      name + "_conv1",
      torch::nn::Conv2d(
          torch::nn::Conv2dOptions(in, out, 3).stride(2).padding(1).bias(false)));
  r.norm1 = register_module(name + "_norm1", ChannelNorm(out));
  r.conv2 = register_module(
      name + "_conv2",
      torch::nn::Conv2d(torch::nn::Conv2dOptions(out, out, 3).padding(1).bias(false)));
  r.norm2 = register_module(name + "_norm2", ChannelNorm(out));
  r.shortcut = register_module(
      name + "_shortcut",
      torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 1).stride(2).bias(false)));
  return r;
}

torch::Tensor BevEncoderImpl::run(Residual& r, const torch::Tensor& x) {
  auto y = torch::relu(r.norm1->forward(r.conv1->forward(x)));
  y = r.norm2->forward(r.conv2->forward(y));
  return torch::relu(y + r.shortcut->forward(x));
}

BevEncoderImpl::BevEncoderImpl(int64_t in_channels, int64_t out_channels) {
  const int64_t c = in_channels;
  stem_ = register_module(
      "stem",
      torch::nn::Conv2d(torch::nn::Conv2dOptions(c, c, 3).padding(1).bias(false)));
  stem_norm_ = register_module("stem_norm", ChannelNorm(c));
  down1_ = make_residual("down1", c, 2 * c);
  down2_ = make_residual("down2", 2 * c, 2 * c);
  up1_ = register_module(
      "up1", torch::nn::Conv2d(
                 torch::nn::Conv2dOptions(4 * c, 2 * c, 3).padding(1).bias(false)));
  up1_norm_ = register_module("up1_norm", ChannelNorm(2 * c));
  up2_ = register_module(
      "up2", torch::nn::Conv2d(
                 torch::nn::Conv2dOptions(3 * c, c, 3).padding(1).bias(false)));
  up2_norm_ = register_module("up2_norm", ChannelNorm(c));
  out_ = register_module("out", torch::nn::Conv2d(c, out_channels, 1));
}

torch::Tensor BevEncoderImpl::forward(const torch::Tensor& fused) {
  if (fused.dim() != 4 || fused.size(2) % 4 != 0 || fused.size(3) % 4 != 0) {
    throw ConfigError("BEV encoder: spatial size must be divisible by 4, got " +
                      std::to_string(fused.size(2)) + "x" +
                      std::to_string(fused.size(3)));
  }
  auto up = [](const torch::Tensor& x) {
    return F::interpolate(x, F::InterpolateFuncOptions()
                                 .scale_factor(std::vector<double>{2.0, 2.0})
                                 .mode(torch::kBilinear)
                                 .align_corners(false));
  };
  auto s0 = torch::relu(stem_norm_->forward(stem_->forward(fused)));
  auto s1 = run(down1_, s0);
  auto s2 = run(down2_, s1);
  auto u1 = torch::relu(
      up1_norm_->forward(up1_->forward(torch::cat({up(s2), s1}, 1))));
  auto u2 = torch::relu(
      up2_norm_->forward(up2_->forward(torch::cat({up(u1), s0}, 1))));
  return out_->forward(u2);
}

}  // namespace bevcar::fusion
