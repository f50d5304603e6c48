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
#ifndef BEVCAR_FUSION_HPP_
#define BEVCAR_FUSION_HPP_

#include <cstdint>

#include <torch/torch.h>

#include "bevcar/attention.hpp"

namespace bevcar::fusion {

struct FusionOptions {
  int64_t channels = 64;
  int64_t heads = 4;
  int64_t points = 4;
  int64_t blocks = 6;
  double ffn_expansion = 2.0;
  int64_t x_cells = 200;
  int64_t y_cells = 200;
};

// Radar-query cross-attention over the lifted image plane. The image
// features are only read (keys/values); queries start from f_rad plus two
// learned embeddings.
class BevFusionImpl : public torch::nn::Module {
 public:
  explicit BevFusionImpl(const FusionOptions& options);

  // Q^F = f_rad + Q_pos^F + Q_bev^F, broadcast over the batch.
  torch::Tensor compose(const torch::Tensor& f_rad);
  // queries and f_img_bev B x F x X x Y -> fused B x F x X x Y
  torch::Tensor forward(const torch::Tensor& queries,
                        const torch::Tensor& f_img_bev);

  torch::Tensor q_pos;
  torch::Tensor q_bev;
  torch::nn::ModuleList blocks{nullptr};

  attention::DeformableBlockImpl& block(size_t i) {
    return *blocks[i]->as<attention::DeformableBlockImpl>();
  }

 private:
  FusionOptions options_;
};
TORCH_MODULE(BevFusion);

// Layer normalisation over channels at every spatial position.
class ChannelNormImpl : public torch::nn::Module {
 public:
  explicit ChannelNormImpl(int64_t channels);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::LayerNorm norm{nullptr};
};
TORCH_MODULE(ChannelNorm);

// Residual encoder: stem, two stride-2 residual stages, and two upsampling
// stages with lateral skips back to the input resolution. X and Y must be
// divisible by 4.
class BevEncoderImpl : public torch::nn::Module {
 public:
  BevEncoderImpl(int64_t in_channels, int64_t out_channels);
  torch::Tensor forward(const torch::Tensor& fused);

 private:
  struct Residual {
    torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, shortcut{nullptr};
    ChannelNorm norm1{nullptr}, norm2{nullptr};
  };
  Residual make_residual(const std::string& name, int64_t in, int64_t out);
  static torch::Tensor run(Residual& r, const torch::Tensor& x);

  torch::nn::Conv2d stem_{nullptr};
  ChannelNorm stem_norm_{nullptr};
  Residual down1_, down2_;
  torch::nn::Conv2d up1_{nullptr}, up2_{nullptr}, out_{nullptr};
  ChannelNorm up1_norm_{nullptr}, up2_norm_{nullptr};
};
TORCH_MODULE(BevEncoder);

}  // namespace bevcar::fusion

#endif  // BEVCAR_FUSION_HPP_
