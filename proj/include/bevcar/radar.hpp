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
#ifndef BEVCAR_RADAR_HPP_
#define BEVCAR_RADAR_HPP_

#include <array>
#include <cstdint>
#include <vector>

#include <torch/torch.h>

#include "bevcar/geometry.hpp"

namespace bevcar::radar {

// x, y, z, vx, vy, rcs.
inline constexpr int64_t kAttributes = 6;

struct RadarPoint {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
  double vx = 0.0;  // uncompensated, m/s
  double vy = 0.0;
  double rcs = 0.0;  // dBsm

  std::array<double, kAttributes> as_array() const {
    return {x, y, z, vx, vy, rcs};
  }
  bool operator==(const RadarPoint&) const = default;
};

struct RadarPointCloud {
  std::vector<RadarPoint> points;
  int64_t sweep_count = 5;

  // Throws ConfigError on non-finite attributes.
  void validate() const;
  bool operator==(const RadarPointCloud&) const = default;
};

// Points grouped per voxel, at most `max_points` per voxel.
struct VoxelizedRadar {
  geometry::BevGrid grid;
  int64_t max_points = 10;
  std::vector<uint8_t> occupancy;       // X*Y*Z, row-major (x, y, z)
  std::vector<int64_t> voxel_ids;       // occupied voxels, ascending
  std::vector<int64_t> counts;          // kept points per occupied voxel
  std::vector<RadarPoint> buffer;       // voxel_ids.size() * max_points
  int64_t dropped_out_of_bounds = 0;
  int64_t dropped_by_sampling = 0;

  size_t occupied() const { return voxel_ids.size(); }
  std::span<const RadarPoint> points_of(size_t slot) const {
    return {buffer.data() + slot * static_cast<size_t>(max_points),
            static_cast<size_t>(counts[slot])};
  }
  // X x Y bool tensor: true where any height bin holds a point.
  torch::Tensor bev_occupancy() const;
  bool operator==(const VoxelizedRadar&) const = default;
};

// Groups points into half-open voxels. Voxels with more than `max_points`
// points keep a uniform random subset (without replacement) drawn from
// `seed`. Kept points are stored in lexicographic attribute order.
VoxelizedRadar voxelize_radar(const RadarPointCloud& cloud,
                              const geometry::BevGrid& grid, int64_t max_points,
                              uint64_t seed);

struct PointEncoderOptions {
  // Output width of each fully connected layer; the last one is F.
  std::vector<int64_t> widths = {32, 64};
  bool normalize = true;
  // Per-attribute multiplier applied before the first layer.
  std::array<double, kAttributes> input_scale = {1, 1, 1, 1, 1, 1};
};

// Shared point-wise MLP: Linear -> LayerNorm -> GELU per layer.
class PointEncoderImpl : public torch::nn::Module {
 public:
  explicit PointEncoderImpl(const PointEncoderOptions& options);
  // n x 6 -> n x F
  torch::Tensor forward(const torch::Tensor& points);
  int64_t out_channels() const { return options_.widths.back(); }

  torch::nn::ModuleList layers{nullptr};
  torch::nn::ModuleList norms{nullptr};

 private:
  PointEncoderOptions options_;
  torch::Tensor input_scale_;
};
TORCH_MODULE(PointEncoder);

// Element-wise max over the first counts[v] rows of each V x P x F voxel
// buffer. Voxels with count zero produce the zero vector.
torch::Tensor pool_voxels(const torch::Tensor& point_features,
                          const torch::Tensor& counts);

// Folds height into channels (F*Z) and compresses with a 3x3 convolution,
// ReLU and a 1x1 convolution back to F channels.
class HeightCompressorImpl : public torch::nn::Module {
 public:
  HeightCompressorImpl(int64_t channels, int64_t z_cells);
  // B x F x X x Y x Z -> B x F x X x Y
  torch::Tensor forward(const torch::Tensor& voxel_features);

  torch::nn::Conv2d reduce{nullptr};
  torch::nn::Conv2d mix{nullptr};

 private:
  int64_t channels_;
  int64_t z_cells_;
};
TORCH_MODULE(HeightCompressor);

struct RadarEncoderOptions {
  int64_t channels = 64;
  geometry::BevGrid grid;
};

class RadarEncoderImpl : public torch::nn::Module {
 public:
  explicit RadarEncoderImpl(const RadarEncoderOptions& options);

  // Dense pooled voxel features B x F x X x Y x Z (zeros at empty voxels).
  torch::Tensor voxel_features(const std::vector<const VoxelizedRadar*>& batch);
  // f_rad: B x F x X x Y.
  torch::Tensor forward(const std::vector<const VoxelizedRadar*>& batch);

  PointEncoder point_encoder{nullptr};
  HeightCompressor compressor{nullptr};

 private:
  RadarEncoderOptions options_;
};
TORCH_MODULE(RadarEncoder);

// Flattens the kept points of `voxels` into an (occupied * P) x 6 tensor.
torch::Tensor point_tensor(const VoxelizedRadar& voxels,
                           torch::Dtype dtype = torch::kFloat32);

}  // namespace bevcar::radar

#endif  // BEVCAR_RADAR_HPP_
