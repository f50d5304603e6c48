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
#ifndef BEVCAR_MODEL_HPP_
#define BEVCAR_MODEL_HPP_

#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "bevcar/backbone.hpp"
#include "bevcar/config.hpp"
#include "bevcar/data.hpp"
#include "bevcar/fusion.hpp"
#include "bevcar/geometry.hpp"
#include "bevcar/lifting.hpp"
#include "bevcar/radar.hpp"
#include "bevcar/segmentation.hpp"

namespace bevcar::model {

// A collated mini-batch. All samples share one camera layout and image size.
struct Batch {
  std::vector<std::string> tokens;
  torch::Tensor images;  // B x N x 3 x H x W float in [0, 1]
  std::vector<geometry::CameraRig> rigs;
  std::vector<radar::VoxelizedRadar> radar;
  segmentation::BevGroundTruth gt;  // B x ... masks
  int64_t size() const { return static_cast<int64_t>(tokens.size()); }
};

// Voxelises radar with a per-sample seed and stacks images and ground
// truth. Throws ConfigError when samples disagree with `model` or with
// each other.
Batch collate(const std::vector<const data::Sample*>& samples,
              const config::ModelConfig& model);

// Intermediate maps of one forward pass.
struct ForwardTrace {
  torch::Tensor splat;       // B x F x X x Y x Z
  torch::Tensor q_img;       // B x F x X x Y
  torch::Tensor f_img_bev;   // B x F x X x Y
  torch::Tensor f_rad;       // B x F x X x Y
  torch::Tensor fused;       // B x F x X x Y
  torch::Tensor logits;      // B x (M+1) x X x Y
};

// Camera backbone, splat, radar-guided query initialisation, image lifting,
// radar-query fusion, BEV encoder and segmentation head. With use_radar
// off, f_rad is zero and every cell is treated as radar-free.
class BevCarModelImpl : public torch::nn::Module {
 public:
  explicit BevCarModelImpl(const config::ModelConfig& config);

  torch::Tensor forward(const Batch& batch);
  ForwardTrace trace(const Batch& batch);

  const config::ModelConfig& config() const { return config_; }

  std::shared_ptr<backbone::ImageBackbone> image_backbone;
  radar::RadarEncoder radar_encoder{nullptr};
  lifting::QueryInitializer query_init{nullptr};
  lifting::ViewLifter lifter{nullptr};
  fusion::BevFusion fusion{nullptr};
  fusion::BevEncoder bev_encoder{nullptr};
  segmentation::SegmentationHead head{nullptr};

 private:
  std::shared_ptr<const geometry::VoxelCameraAssignment> assignment(
      const geometry::CameraRig& rig);
  torch::Tensor splat_matrix(const geometry::CameraRig& rig, int64_t h,
                             int64_t w, torch::Dtype dtype);

  config::ModelConfig config_;
  geometry::AssignmentCache assignments_;
  std::mutex splat_mutex_;
  std::map<std::string, torch::Tensor> splat_cache_;
};
TORCH_MODULE(BevCarModel);

// Named parameters followed by named buffers, in registration order.
std::vector<std::pair<std::string, torch::Tensor>> state_tensors(
    const torch::nn::Module& module);

}  // namespace bevcar::model

#endif  // BEVCAR_MODEL_HPP_
