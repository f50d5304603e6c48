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
#include "bevcar/radar.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include "bevcar/errors.hpp"

namespace bevcar::radar {

void RadarPointCloud::validate() const {
  for (size_t i = 0; i < points.size(); ++i) {
    for (double a : points[i].as_array()) {
      if (!std::isfinite(a)) {
        throw ConfigError("radar point " + std::to_string(i) +
                          " has a non-finite attribute");
      }
    }
  }
}

torch::Tensor VoxelizedRadar::bev_occupancy() const {
  auto occ = torch::zeros({grid.x_cells, grid.y_cells}, torch::kBool);
  auto acc = occ.accessor<bool, 2>();
  for (int64_t id : voxel_ids) {
    const int64_t cell = id / grid.z_cells;
    acc[cell / grid.y_cells][cell % grid.y_cells] = true;
  }
  return occ;
}

VoxelizedRadar voxelize_radar(const RadarPointCloud& cloud,
                              const geometry::BevGrid& grid, int64_t max_points,
                              uint64_t seed) {
  if (max_points < 1) throw ConfigError("voxelize_radar: P must be >= 1");
  grid.validate();
  cloud.validate();

  VoxelizedRadar out;
  out.grid = grid;
  out.max_points = max_points;
  out.occupancy.assign(static_cast<size_t>(grid.voxel_count()), 0);

  std::map<int64_t, std::vector<size_t>> members;
  for (size_t i = 0; i < cloud.points.size(); ++i) {
    const auto& p = cloud.points[i];
    const auto cell = grid.locate({p.x, p.y, p.z});
    if (!cell) {
      ++out.dropped_out_of_bounds;
      continue;
    }
    members[grid.voxel_index(cell->x, cell->y, cell->z)].push_back(i);
  }

  std::mt19937_64 rng(seed);
  const auto cap = static_cast<size_t>(max_points);
  out.buffer.resize(members.size() * cap);
  size_t slot = 0;
  for (auto& [voxel, idx] : members) {
    if (idx.size() > cap) {
      // Partial Fisher-Yates over input indices.
      for (size_t k = 0; k < cap; ++k) {
        std::uniform_int_distribution<size_t> pick(k, idx.size() - 1);
        std::swap(idx[k], idx[pick(rng)]);
      }
      out.dropped_by_sampling += static_cast<int64_t>(idx.size() - cap);
      idx.resize(cap);
      std::sort(idx.begin(), idx.end());
    }
    out.occupancy[static_cast<size_t>(voxel)] = 1;
    out.voxel_ids.push_back(voxel);
    out.counts.push_back(static_cast<int64_t>(idx.size()));
    auto* dst = out.buffer.data() + slot * cap;
    for (size_t k = 0; k < idx.size(); ++k) dst[k] = cloud.points[idx[k]];
    std::sort(dst, dst + idx.size(), [](const RadarPoint& a, const RadarPoint& b) {
      return a.as_array() < b.as_array();
    });
    ++slot;
  }
  return out;
}

torch::Tensor point_tensor(const VoxelizedRadar& voxels, torch::Dtype dtype) {
  const auto n = static_cast<int64_t>(voxels.buffer.size());
  auto t = torch::empty({n, kAttributes}, torch::kFloat64);
  auto acc = t.accessor<double, 2>();
  for (int64_t i = 0; i < n; ++i) {
    const auto a = voxels.buffer[static_cast<size_t>(i)].as_array();
    for (int64_t d = 0; d < kAttributes; ++d) acc[i][d] = a[d];
  }
  return t.to(dtype);
}

PointEncoderImpl::PointEncoderImpl(const PointEncoderOptions& options)
    : options_(options) {
  if (options_.widths.empty()) {
    throw ConfigError("point encoder: at least one layer is required");
  }
  layers = register_module("layers", torch::nn::ModuleList());
  norms = register_module("norms", torch::nn::ModuleList());
  int64_t in = kAttributes;
  for (int64_t width : options_.widths) {
    layers->push_back(torch::nn::Linear(in, width));
    if (options_.normalize) {
      norms->push_back(
          torch::nn::LayerNorm(torch::nn::LayerNormOptions({width})));
    }
    in = width;
  }
  input_scale_ = register_buffer(
      "input_scale",
      torch::tensor(std::vector<double>(options_.input_scale.begin(),
                                        options_.input_scale.end()))
          .to(torch::kFloat32));
}

torch::Tensor PointEncoderImpl::forward(const torch::Tensor& points) {
  auto x = points * input_scale_.to(points.scalar_type());
  for (size_t i = 0; i < layers->size(); ++i) {
    x = layers[i]->as<torch::nn::Linear>()->forward(x);
    if (options_.normalize) x = norms[i]->as<torch::nn::LayerNorm>()->forward(x);
    x = torch::gelu(x);
  }
  return x;
}

torch::Tensor pool_voxels(const torch::Tensor& point_features,
                          const torch::Tensor& counts) {
  const int64_t v = point_features.size(0);
  const int64_t p = point_features.size(1);
  if (v == 0) {
    return torch::zeros({0, point_features.size(2)}, point_features.options());
  }
  auto slot = torch::arange(p, counts.options()).unsqueeze(0);
  auto keep = (slot < counts.unsqueeze(1)).unsqueeze(2);  // V x P x 1
  auto masked = point_features.masked_fill(
      ~keep, -std::numeric_limits<double>::infinity());
  auto pooled = std::get<0>(masked.max(1));
  auto occupied = (counts > 0).unsqueeze(1);
  return torch::where(occupied, pooled, torch::zeros_like(pooled));
}

HeightCompressorImpl::HeightCompressorImpl(int64_t channels, int64_t z_cells)
    : channels_(channels), z_cells_(z_cells) {
  reduce = register_module(
      "reduce", torch::nn::Conv2d(
                    torch::nn::Conv2dOptions(channels * z_cells, channels, 3)
                        .padding(1)));
  mix = register_module("mix", torch::nn::Conv2d(channels, channels, 1));
}

torch::Tensor HeightCompressorImpl::forward(
    const torch::Tensor& voxel_features) {
  if (voxel_features.dim() != 5 || voxel_features.size(1) != channels_ ||
      voxel_features.size(4) != z_cells_) {
    throw ConfigError("height compressor: expected B x " +
                      std::to_string(channels_) + " x X x Y x " +
                      std::to_string(z_cells_));
  }
  const auto b = voxel_features.size(0);
  const auto x = voxel_features.size(2);
  const auto y = voxel_features.size(3);
  // Channel index f * Z + z.
  auto folded = voxel_features.permute({0, 1, 4, 2, 3})
                    .reshape({b, channels_ * z_cells_, x, y});
  return mix->forward(torch::relu(reduce->forward(folded)));
}

RadarEncoderImpl::RadarEncoderImpl(const RadarEncoderOptions& options)
    : options_(options) {
  options_.grid.validate();
  const auto& g = options_.grid;
  PointEncoderOptions pe;
  pe.widths = {std::max<int64_t>(1, options_.channels / 2), options_.channels};
  pe.input_scale = {2.0 / g.x_extent,        2.0 / g.y_extent,
                    1.0 / (g.z_max - g.z_min), 0.1,
                    0.1,                       0.05};
  point_encoder = register_module("point_encoder", PointEncoder(pe));
  compressor = register_module("compressor",
                               HeightCompressor(options_.channels, g.z_cells));
}

torch::Tensor RadarEncoderImpl::voxel_features(
    const std::vector<const VoxelizedRadar*>& batch) {
  const auto& g = options_.grid;
  const int64_t f = options_.channels;
  const auto b = static_cast<int64_t>(batch.size());
  const auto opts = point_encoder->layers[0]
                        ->as<torch::nn::Linear>()
                        ->weight.options();
  std::vector<torch::Tensor> points;
  std::vector<torch::Tensor> counts;
  std::vector<int64_t> targets;
  int64_t p = -1;
  for (int64_t s = 0; s < b; ++s) {
    const auto& vox = *batch[static_cast<size_t>(s)];
    if (!(vox.grid == g)) throw ConfigError("radar encoder: grid mismatch");
    if (p >= 0 && vox.max_points != p) {
      throw ConfigError("radar encoder: inconsistent per-voxel capacity");
    }
    p = vox.max_points;
    points.push_back(point_tensor(vox, opts.dtype().toScalarType()));
    counts.push_back(torch::tensor(vox.counts, torch::kInt64));
    for (int64_t id : vox.voxel_ids) targets.push_back(s * g.voxel_count() + id);
  }
  auto dense = torch::zeros({b * g.voxel_count(), f}, opts);
  if (!targets.empty()) {
    auto all_points = torch::cat(points, 0);
    auto all_counts = torch::cat(counts, 0);
    const int64_t v = all_counts.size(0);
    auto encoded = point_encoder->forward(all_points).view({v, p, f});
    auto pooled = pool_voxels(encoded, all_counts);
    dense = dense.index_copy(0, torch::tensor(targets, torch::kInt64), pooled);
  }
  return dense.view({b, g.x_cells, g.y_cells, g.z_cells, f})
      .permute({0, 4, 1, 2, 3})
      .contiguous();
}

torch::Tensor RadarEncoderImpl::forward(
    const std::vector<const VoxelizedRadar*>& batch) {
  return compressor->forward(voxel_features(batch));
}

}  // namespace bevcar::radar
