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
#include "bevcar/model.hpp"

#include "bevcar/errors.hpp"

namespace bevcar::model {

Batch collate(const std::vector<const data::Sample*>& samples,
              const config::ModelConfig& model) {
  if (samples.empty()) throw ConfigError("collate: empty batch");
  Batch batch;
  std::vector<torch::Tensor> images, vehicle, map, valid;
  const auto n = samples.front()->rig.size();
  for (const auto* s : samples) {
    if (!(s->grid == model.grid)) {
      throw ConfigError("sample '" + s->token +
                        "' was generated for a different BEV grid");
    }
    if (s->rig.size() != n || s->images.size(0) != static_cast<int64_t>(n)) {
      throw ConfigError("sample '" + s->token + "' has a different camera count");
    }
    if (s->images.size(2) != model.image_height || s->images.size(3) != model.image_width) {
      throw ConfigError("sample '" + s->token + "' has images of " +
                        std::to_string(s->images.size(2)) + "x" +
                        std::to_string(s->images.size(3)) + ", model expects " +
                        std::to_string(model.image_height) + "x" +
                        std::to_string(model.image_width));
    }
    batch.tokens.push_back(s->token);
    batch.rigs.push_back(s->rig);
    images.push_back(s->images.to(torch::kFloat32).div(255.0));
    batch.radar.push_back(radar::voxelize_radar(
        s->radar, model.grid, model.max_points, data::derive_seed(s->seed, 7)));
    vehicle.push_back(s->gt.vehicle);
    map.push_back(s->gt.map);
    valid.push_back(s->gt.valid);
  }
  batch.images = torch::stack(images);
  batch.gt = {torch::stack(vehicle), torch::stack(map), torch::stack(valid)};
  return batch;
}

BevCarModelImpl::BevCarModelImpl(const config::ModelConfig& config)
    : config_(config) {
  config_.validate();
  const auto& c = config_;
  image_backbone = backbone::make_backbone(c.backbone, c.channels);
  register_module("backbone", image_backbone);

  radar::RadarEncoderOptions ro;
  ro.channels = c.channels;
  ro.grid = c.grid;
  radar_encoder = register_module("radar_encoder", radar::RadarEncoder(ro));

  lifting::QueryInitOptions qo;
  qo.channels = c.channels;
  qo.z_cells = c.grid.z_cells;
  qo.heads = c.heads;
  qo.points = c.points;
  query_init = register_module("query_init", lifting::QueryInitializer(qo));

  lifting::LiftingOptions lo;
  lo.channels = c.channels;
  lo.heads = c.heads;
  lo.points = c.points;
  lo.blocks = c.lift_blocks;
  lo.levels = static_cast<int64_t>(backbone::kPyramidStrides.size());
  lo.ffn_expansion = c.ffn_expansion;
  lo.grid = c.grid;
  lifter = register_module("lifter", lifting::ViewLifter(lo));

  fusion::FusionOptions fo;
  fo.channels = c.channels;
  fo.heads = c.heads;
  fo.points = c.points;
  fo.blocks = c.fusion_blocks;
  fo.ffn_expansion = c.ffn_expansion;
  fo.x_cells = c.grid.x_cells;
  fo.y_cells = c.grid.y_cells;
  fusion = register_module("fusion", fusion::BevFusion(fo));

  bev_encoder = register_module("bev_encoder", fusion::BevEncoder(c.channels, c.channels));
  head = register_module("head", segmentation::SegmentationHead(c.channels, c.head_hidden));
}

std::shared_ptr<const geometry::VoxelCameraAssignment> BevCarModelImpl::assignment(
    const geometry::CameraRig& rig) {
  return assignments_.get(config_.grid, rig);
}

torch::Tensor BevCarModelImpl::splat_matrix(const geometry::CameraRig& rig,
                                            int64_t h, int64_t w,
                                            torch::Dtype dtype) {
  const std::string key = rig.fingerprint() + "|" + std::to_string(h) + "x" +
                          std::to_string(w) + "|" +
                          std::string(c10::toString(dtype));
  {
    std::lock_guard<std::mutex> lock(splat_mutex_);
    auto it = splat_cache_.find(key);
    if (it != splat_cache_.end()) return it->second;
  }
  auto m = geometry::build_splat_matrix(*assignment(rig), h, w,
                                        config_.splat_stride, dtype);
  std::lock_guard<std::mutex> lock(splat_mutex_);
  splat_cache_.emplace(key, m);
  return m;
}

ForwardTrace BevCarModelImpl::trace(const Batch& batch) {
  const auto& c = config_;
  const int64_t b = batch.size();
  if (batch.images.dim() != 5 || batch.images.size(0) != b) {
    throw ConfigError("model: images must be B x N x 3 x H x W");
  }
  const int64_t n = batch.images.size(1);
  const auto& rig0 = batch.rigs.front();
  for (const auto& rig : batch.rigs) {
    if (static_cast<int64_t>(rig.size()) != n) {
      throw ConfigError("model: rig and image camera counts differ");
    }
    for (const auto& cam : rig.cameras) {
      if (cam.height != batch.images.size(3) || cam.width != batch.images.size(4)) {
        throw ConfigError("model: calibration image size does not match images");
      }
    }
  }
  ForwardTrace t;

  // Camera pyramid over all B*N images.
  auto flat = batch.images.reshape({b * n, 3, batch.images.size(3), batch.images.size(4)});
  auto pyramid = image_backbone->encode(flat);
  const auto& eighth = pyramid[1];
  const int64_t fh = eighth.size(2);
  const int64_t fw = eighth.size(3);
  const auto dtype = eighth.scalar_type();

  // Splat the 1/8 features along camera rays.
  auto per_cam = eighth.reshape({b, n, c.channels, fh, fw});
  std::vector<torch::Tensor> splats;
  std::vector<std::shared_ptr<const geometry::VoxelCameraAssignment>> held;
  std::vector<const geometry::VoxelCameraAssignment*> asg;
  for (int64_t s = 0; s < b; ++s) {
    const auto& rig = batch.rigs[static_cast<size_t>(s)];
    held.push_back(assignment(rig));
    asg.push_back(held.back().get());
    splats.push_back(geometry::apply_splat(splat_matrix(rig, fh, fw, dtype),
                                           per_cam[s], c.grid));
  }
  t.splat = torch::stack(splats);

  // Radar branch.
  torch::Tensor occupancy;
  if (c.use_radar) {
    std::vector<const radar::VoxelizedRadar*> vox;
    std::vector<torch::Tensor> occ;
    for (const auto& v : batch.radar) {
      vox.push_back(&v);
      occ.push_back(v.bev_occupancy());
    }
    t.f_rad = radar_encoder->forward(vox).to(dtype);
    occupancy = torch::stack(occ);
  } else {
    t.f_rad = torch::zeros({b, c.channels, c.grid.x_cells, c.grid.y_cells},
                           eighth.options());
    occupancy = torch::zeros({b, c.grid.x_cells, c.grid.y_cells}, torch::kBool);
  }

  // Lifting.
  t.q_img = query_init->forward(t.splat, occupancy);
  auto refs = lifting::lifting_references(
      asg, rig0, static_cast<int64_t>(backbone::kPyramidStrides.size()));
  auto values = lifting::pyramid_values(pyramid, b);
  t.f_img_bev = lifter->forward(lifter->compose(t.q_img), refs, values);

  // Fusion, BEV encoder, head.
  t.fused = fusion->forward(fusion->compose(t.f_rad), t.f_img_bev);
  t.logits = head->forward(bev_encoder->forward(t.fused));
  return t;
}

torch::Tensor BevCarModelImpl::forward(const Batch& batch) {
  return trace(batch).logits;
}

std::vector<std::pair<std::string, torch::Tensor>> state_tensors(
    const torch::nn::Module& module) {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  for (const auto& p : module.named_parameters(true)) out.emplace_back(p.key(), p.value());
  for (const auto& b : module.named_buffers(true)) out.emplace_back(b.key(), b.value());
  return out;
}

}  // namespace bevcar::model
