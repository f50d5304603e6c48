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
#include "bevcar/lifting.hpp"

#include "bevcar/errors.hpp"

namespace bevcar::lifting {

torch::Tensor compose_queries(const torch::Tensor& a, const torch::Tensor& b,
                              const torch::Tensor& c) {
  if (a.sizes() != b.sizes() || a.sizes() != c.sizes()) {
    throw ConfigError("compose_queries: summands differ in shape");
  }
  return a + b + c;
}

torch::Tensor to_queries(const torch::Tensor& bev) {
  return bev.permute({0, 2, 3, 1}).reshape({-1, bev.size(1)});
}

torch::Tensor from_queries(const torch::Tensor& queries, int64_t batch,
                           int64_t x_cells, int64_t y_cells) {
  return queries.view({batch, x_cells, y_cells, queries.size(1)})
      .permute({0, 3, 1, 2})
      .contiguous();
}

QueryInitializerImpl::QueryInitializerImpl(const QueryInitOptions& options)
    : options_(options) {
  height_conv = register_module(
      "height_conv",
      torch::nn::Conv2d(options.channels * options.z_cells, options.channels, 1));
  occupancy_embedding = register_module(
      "occupancy_embedding", torch::nn::Embedding(2, options.channels));
  attention::DeformableAttentionOptions ao;
  ao.channels = options.channels;
  ao.heads = options.heads;
  ao.points = options.points;
  attention = register_module("attention", attention::DeformableAttention(ao));
}

torch::Tensor QueryInitializerImpl::collapse(const torch::Tensor& splat) {
  if (splat.dim() != 5 || splat.size(1) != options_.channels ||
      splat.size(4) != options_.z_cells) {
    throw ConfigError("query init: splat must be B x " +
                      std::to_string(options_.channels) + " x X x Y x " +
                      std::to_string(options_.z_cells));
  }
  const auto b = splat.size(0);
  auto folded = splat.permute({0, 1, 4, 2, 3})
                    .reshape({b, options_.channels * options_.z_cells,
                              splat.size(2), splat.size(3)});
  return height_conv->forward(folded);
}

torch::Tensor QueryInitializerImpl::forward(const torch::Tensor& splat,
                                            const torch::Tensor& occupancy) {
  auto collapsed = collapse(splat);
  const auto b = collapsed.size(0);
  const auto x = collapsed.size(2);
  const auto y = collapsed.size(3);
  if (occupancy.dim() != 3 || occupancy.size(0) != b || occupancy.size(1) != x ||
      occupancy.size(2) != y) {
    throw ConfigError("query init: occupancy must be B x X x Y");
  }
  auto queries = to_queries(collapsed) +
                 occupancy_embedding->forward(occupancy.reshape({-1}).to(torch::kInt64));
  auto refs = attention::ReferencePoints::bev_plane(b, x, y);
  auto values = attention::ValueMaps::from_batch(collapsed);
  return from_queries(attention->forward(queries, refs, values), b, x, y);
}

attention::ReferencePoints lifting_references(
    const std::vector<const geometry::VoxelCameraAssignment*>& per_sample,
    const geometry::CameraRig& rig, int64_t levels) {
  if (per_sample.empty()) throw ConfigError("lifting: empty batch");
  const auto& grid = per_sample.front()->grid();
  const int64_t b = static_cast<int64_t>(per_sample.size());
  const int64_t cells = grid.cell_count();
  const int64_t z = grid.z_cells;
  constexpr int64_t kSlots = geometry::VoxelCameraAssignment::kMaxCameras;
  const int64_t r = kSlots * z;
  const auto n = static_cast<int64_t>(rig.size());

  auto loc = torch::zeros({b * cells, r, 2}, torch::kFloat32);
  auto maps = torch::full({b * cells, r}, -1, torch::kInt64);
  auto la = loc.accessor<float, 3>();
  auto ma = maps.accessor<int64_t, 2>();
  for (int64_t s = 0; s < b; ++s) {
    const auto& asg = *per_sample[static_cast<size_t>(s)];
    if (!(asg.grid() == grid) || asg.num_cameras() != n) {
      throw ConfigError("lifting: inconsistent assignments within a batch");
    }
    for (int64_t c = 0; c < cells; ++c) {
      const int64_t q = s * cells + c;
      for (int64_t k = 0; k < z; ++k) {
        const auto& e = asg.at(c * z + k);
        for (int64_t slot = 0; slot < e.count; ++slot) {
          const auto& sl = e.slots[static_cast<size_t>(slot)];
          const auto& cam = rig[static_cast<size_t>(sl.camera)];
          const int64_t ref = slot * z + k;
          la[q][ref][0] = static_cast<float>(sl.u / static_cast<double>(cam.width));
          la[q][ref][1] = static_cast<float>(sl.v / static_cast<double>(cam.height));
          ma[q][ref] = (s * n + sl.camera) * levels;
        }
      }
    }
  }
  auto anchors = torch::arange(z, torch::kInt64).repeat({kSlots});
  return attention::ReferencePoints{loc, maps, anchors};
}

attention::ValueMaps pyramid_values(const backbone::FeaturePyramid& pyramid,
                                    int64_t batch) {
  const int64_t bn = pyramid[0].size(0);
  const int64_t c = pyramid[0].size(1);
  if (bn % batch != 0) throw ConfigError("pyramid_values: batch mismatch");
  const auto levels = static_cast<int64_t>(pyramid.size());
  std::vector<torch::Tensor> flat;
  std::vector<int64_t> level_offset;
  int64_t per_image = 0;
  auto shapes = torch::empty({bn * levels, 2}, torch::kInt64);
  auto starts = torch::empty({bn * levels}, torch::kInt64);
  for (int64_t l = 0; l < levels; ++l) {
    const auto& t = pyramid[static_cast<size_t>(l)];
    if (t.size(0) != bn || t.size(1) != c) {
      throw ConfigError("pyramid_values: inconsistent pyramid levels");
    }
    level_offset.push_back(per_image);
    per_image += t.size(2) * t.size(3);
    flat.push_back(t.flatten(2).transpose(1, 2));  // BN x hw x C
  }
  auto sa = shapes.accessor<int64_t, 2>();
  auto st = starts.accessor<int64_t, 1>();
  for (int64_t img = 0; img < bn; ++img) {
    for (int64_t l = 0; l < levels; ++l) {
      const auto& t = pyramid[static_cast<size_t>(l)];
      sa[img * levels + l][0] = t.size(2);
      sa[img * levels + l][1] = t.size(3);
      st[img * levels + l] = img * per_image + level_offset[static_cast<size_t>(l)];
    }
  }
  return attention::ValueMaps{torch::cat(flat, 1).reshape({bn * per_image, c}),
                              shapes, starts};
}

ViewLifterImpl::ViewLifterImpl(const LiftingOptions& options)
    : options_(options) {
  options_.grid.validate();
  const auto& g = options_.grid;
  q_pos = register_parameter(
      "q_pos", torch::randn({options.channels, g.x_cells, g.y_cells}) * 0.02);
  q_bev = register_parameter(
      "q_bev", torch::randn({options.channels, g.x_cells, g.y_cells}) * 0.02);
  attention::DeformableAttentionOptions ao;
  ao.channels = options.channels;
  ao.heads = options.heads;
  ao.points = options.points;
  ao.levels = options.levels;
  ao.anchors = g.z_cells;
  blocks = register_module("blocks", torch::nn::ModuleList());
  for (int64_t i = 0; i < options.blocks; ++i) {
    blocks->push_back(attention::DeformableBlock(ao, options.ffn_expansion));
  }
}

torch::Tensor ViewLifterImpl::compose(const torch::Tensor& q_img) {
  return compose_queries(q_img, q_pos.unsqueeze(0).expand_as(q_img),
                         q_bev.unsqueeze(0).expand_as(q_img));
}

torch::Tensor ViewLifterImpl::forward(const torch::Tensor& queries,
                                      const attention::ReferencePoints& refs,
                                      const attention::ValueMaps& values) {
  const auto b = queries.size(0);
  const auto x = queries.size(2);
  const auto y = queries.size(3);
  auto q = to_queries(queries);
  for (size_t i = 0; i < blocks->size(); ++i) {
    q = block(i).forward(q, refs, values);
  }
  return from_queries(q, b, x, y);
}

}  // namespace bevcar::lifting
