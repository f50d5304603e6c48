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
#ifndef BEVCAR_LIFTING_HPP_
#define BEVCAR_LIFTING_HPP_

// Image-to-BEV lifting: radar-guided query initialisation from the splatted
// 1/8-scale features, composition with learned embeddings, and a cascade of
// deformable cross-attention blocks that sample the camera pyramids.

#include <cstdint>
#include <vector>

#include <torch/torch.h>

#include "bevcar/attention.hpp"
#include "bevcar/backbone.hpp"
#include "bevcar/geometry.hpp"

namespace bevcar::lifting {

// Element-wise sum of three equally shaped tensors.
torch::Tensor compose_queries(const torch::Tensor& a, const torch::Tensor& b,
                              const torch::Tensor& c);

// B x F x X x Y -> (B*X*Y) x F, query b*X*Y + i*Y + j.
torch::Tensor to_queries(const torch::Tensor& bev);
// Inverse of to_queries.
torch::Tensor from_queries(const torch::Tensor& queries, int64_t batch,
                           int64_t x_cells, int64_t y_cells);

struct QueryInitOptions {
  int64_t channels = 64;
  int64_t z_cells = 8;
  int64_t heads = 4;
  int64_t points = 4;
};

// Collapses the splatted voxel stack with a 1x1 convolution, then runs one
// BEV-plane deformable attention whose queries carry a radar-occupancy
// embedding and whose values are the collapsed map.
class QueryInitializerImpl : public torch::nn::Module {
 public:
  explicit QueryInitializerImpl(const QueryInitOptions& options);

  // B x F x X x Y x Z -> B x F x X x Y
  torch::Tensor collapse(const torch::Tensor& splat);
  // splat B x F x X x Y x Z, occupancy B x X x Y (bool) -> Q_img B x F x X x Y
  torch::Tensor forward(const torch::Tensor& splat,
                        const torch::Tensor& occupancy);

  torch::nn::Conv2d height_conv{nullptr};
  torch::nn::Embedding occupancy_embedding{nullptr};
  attention::DeformableAttention attention{nullptr};

 private:
  QueryInitOptions options_;
};
TORCH_MODULE(QueryInitializer);

// Reference points of every BEV query for image attention: the Z voxel
// centres of the cell, projected into each of the (at most two) assigned
// cameras. Reference r = slot * Z + z uses anchor z; map indices address a
// value-map list ordered (sample, camera, level).
attention::ReferencePoints lifting_references(
    const std::vector<const geometry::VoxelCameraAssignment*>& per_sample,
    const geometry::CameraRig& rig, int64_t levels);

// Pyramid levels (each (B*N) x F x h x w) -> value maps ordered
// (sample, camera, level).
attention::ValueMaps pyramid_values(const backbone::FeaturePyramid& pyramid,
                                    int64_t batch);

struct LiftingOptions {
  int64_t channels = 64;
  int64_t heads = 4;
  int64_t points = 4;
  int64_t blocks = 6;
  int64_t levels = 4;
  double ffn_expansion = 2.0;
  geometry::BevGrid grid;
};

class ViewLifterImpl : public torch::nn::Module {
 public:
  explicit ViewLifterImpl(const LiftingOptions& options);

  // Q^L = Q_img + Q_pos + Q_bev, broadcast over the batch.
  torch::Tensor compose(const torch::Tensor& q_img);
  // Runs the block cascade. queries B x F x X x Y -> f_img,bev B x F x X x Y.
  torch::Tensor forward(const torch::Tensor& queries,
                        const attention::ReferencePoints& refs,
                        const attention::ValueMaps& values);

  torch::Tensor q_pos;  // F x X x Y
  torch::Tensor q_bev;  // F x X x Y
  torch::nn::ModuleList blocks{nullptr};

  attention::DeformableBlockImpl& block(size_t i) {
    return *blocks[i]->as<attention::DeformableBlockImpl>();
  }

 private:
  LiftingOptions options_;
};
TORCH_MODULE(ViewLifter);

}  // namespace bevcar::lifting

#endif  // BEVCAR_LIFTING_HPP_
