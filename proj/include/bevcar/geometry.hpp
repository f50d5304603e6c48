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
#ifndef BEVCAR_GEOMETRY_HPP_
#define BEVCAR_GEOMETRY_HPP_

// BEV lattice, pinhole cameras and the image-to-voxel splat.
//
// Reference frame: origin on the ground below the forward-facing camera,
// x forward, y left, z up (meters). Camera frames follow the optical
// convention: x right, y down, z along the viewing direction.

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <torch/torch.h>

namespace bevcar::geometry {

struct CellIndex {
  int64_t x = 0;
  int64_t y = 0;
  int64_t z = 0;
  bool operator==(const CellIndex&) const = default;
};

// Metric X x Y x Z voxel lattice centred on the reference origin in the
// ground plane and spanning [z_min, z_max) in height. Cells are half-open
// [lo, hi) along every axis.
struct BevGrid {
  int64_t x_cells = 200;
  int64_t y_cells = 200;
  int64_t z_cells = 8;
  double x_extent = 100.0;
  double y_extent = 100.0;
  double z_min = 0.0;
  double z_max = 10.0;

  // Throws ConfigError unless all counts and cell sizes are positive.
  void validate() const;

  double cell_x() const { return x_extent / static_cast<double>(x_cells); }
  double cell_y() const { return y_extent / static_cast<double>(y_cells); }
  double cell_z() const {
    return (z_max - z_min) / static_cast<double>(z_cells);
  }
  int64_t cell_count() const { return x_cells * y_cells; }
  int64_t voxel_count() const { return x_cells * y_cells * z_cells; }

  // Row-major in (x, y, z).
  int64_t voxel_index(int64_t i, int64_t j, int64_t k) const {
    return (i * y_cells + j) * z_cells + k;
  }
  int64_t cell_index(int64_t i, int64_t j) const { return i * y_cells + j; }

  Eigen::Vector3d voxel_center(int64_t i, int64_t j, int64_t k) const;
  Eigen::Vector2d cell_center(int64_t i, int64_t j) const;

  // Cell containing `p`, or nullopt outside the lattice.
  std::optional<CellIndex> locate(const Eigen::Vector3d& p) const;

  bool operator==(const BevGrid&) const = default;
};

// Centres of all voxels, ordered row-major in (x, y, z).
std::vector<Eigen::Vector3d> voxel_centers(const BevGrid& grid);

struct CameraModel {
  std::string name;
  Eigen::Matrix3d intrinsics = Eigen::Matrix3d::Identity();
  // Rigid transform reference -> camera: p_cam = rotation * p_ref + translation.
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
  int64_t height = 0;
  int64_t width = 0;

  // Throws ConfigError on a non-orthonormal rotation, non-positive focal
  // lengths or a principal point outside the image.
  void validate() const;

  double fx() const { return intrinsics(0, 0); }
  double fy() const { return intrinsics(1, 1); }
  double cx() const { return intrinsics(0, 2); }
  double cy() const { return intrinsics(1, 2); }

  Eigen::Vector3d to_camera(const Eigen::Vector3d& p_ref) const {
    return rotation * p_ref + translation;
  }
  // Camera centre expressed in the reference frame.
  Eigen::Vector3d center() const {
    return -rotation.transpose() * translation;
  }
};

inline constexpr double kMinDepth = 1e-3;

struct Projection {
  double u = 0.0;
  double v = 0.0;
  double depth = 0.0;
  bool valid = false;
};

Projection project_point(const Eigen::Vector3d& p_ref,
                         const CameraModel& camera);
std::vector<Projection> project_points(std::span<const Eigen::Vector3d> points,
                                       const CameraModel& camera);
// Inverse pinhole: pixel (u, v) at camera depth -> reference-frame point.
Eigen::Vector3d unproject(const CameraModel& camera, double u, double v,
                          double depth);

struct CameraRig {
  // Index 0 is the forward-facing camera.
  std::vector<CameraModel> cameras;

  void validate() const;
  size_t size() const { return cameras.size(); }
  const CameraModel& operator[](size_t i) const { return cameras[i]; }
  // Exact textual identity of all calibration values; used as a cache key.
  std::string fingerprint() const;
};

// Rotation taking reference-frame vectors into the optical frame of a
// camera whose viewing direction has the given yaw (radians, CCW from +x)
// and pitch (radians, positive looks down).
Eigen::Matrix3d optical_rotation(double yaw, double pitch = 0.0);

struct SurroundRigOptions {
  int64_t height = 448;
  int64_t width = 896;
  double horizontal_fov_deg = 70.0;
  double mount_height = 1.5;
  // Forward, front-left, back-left, back, back-right, front-right.
  std::vector<double> yaws_deg = {0.0, 55.0, 110.0, 180.0, -110.0, -55.0};
  std::vector<std::string> names = {"front",     "front_left", "back_left",
                                    "back",      "back_right", "front_right"};
};

// A six-camera ring of identical pinhole cameras mounted at the reference
// origin. The front camera defines the reference frame.
CameraRig make_surround_rig(const SurroundRigOptions& options = {});

// Per-voxel list of one or two cameras whose image contains the projected
// voxel centre, together with the projected pixel location.
class VoxelCameraAssignment {
 public:
  static constexpr int kMaxCameras = 2;

  struct Slot {
    int32_t camera = -1;
    double u = 0.0;
    double v = 0.0;
  };
  struct Entry {
    std::array<Slot, kMaxCameras> slots{};
    uint8_t count = 0;
  };

  VoxelCameraAssignment() = default;
  VoxelCameraAssignment(BevGrid grid, int64_t num_cameras,
                        std::vector<Entry> entries);

  const BevGrid& grid() const { return grid_; }
  int64_t num_cameras() const { return num_cameras_; }
  const Entry& at(int64_t voxel) const { return entries_[voxel]; }
  const Entry& at(int64_t i, int64_t j, int64_t k) const {
    return entries_[grid_.voxel_index(i, j, k)];
  }
  std::span<const Entry> entries() const { return entries_; }

  // Camera indices of voxel `voxel` in slot order.
  std::vector<int32_t> cameras_of(int64_t voxel) const;
  // True if any voxel of BEV cell (i, j) is seen by `camera`.
  bool cell_sees(int64_t i, int64_t j, int32_t camera) const;
  // True if no voxel of BEV cell (i, j) is seen by any camera.
  bool cell_unassigned(int64_t i, int64_t j) const;

  bool operator==(const VoxelCameraAssignment& other) const;

 private:
  BevGrid grid_;
  int64_t num_cameras_ = 0;
  std::vector<Entry> entries_;
};

VoxelCameraAssignment assign_cameras(const BevGrid& grid,
                                     const CameraRig& rig);

// Memoises assign_cameras per (grid, rig calibration). Thread-safe.
class AssignmentCache {
 public:
  std::shared_ptr<const VoxelCameraAssignment> get(const BevGrid& grid,
                                                   const CameraRig& rig);
  size_t size() const;

 private:
  mutable std::mutex mutex_;
  std::map<std::string, std::shared_ptr<const VoxelCameraAssignment>> cache_;
};

// Sparse (X*Y*Z) x (N*h*w) matrix that bilinearly samples every camera's
// feature map at each voxel's projected centre and averages over the
// voxel's assigned cameras. Pixel centres sit at half-integer coordinates;
// samples near the border replicate the edge pixel. Sub-pixel positions are
// quantised to 1/256 of a feature cell.
torch::Tensor build_splat_matrix(const VoxelCameraAssignment& assignment,
                                 int64_t feature_height, int64_t feature_width,
                                 int64_t stride,
                                 torch::Dtype dtype = torch::kFloat32);

// Pushes per-camera features (N x F x H/stride x W/stride, or batched
// B x N x F x h x w) into the voxel lattice, giving F x X x Y x Z (or
// B x F x X x Y x Z). Unassigned voxels are zero.
torch::Tensor splat_image_features(const torch::Tensor& features,
                                   const CameraRig& rig, const BevGrid& grid,
                                   const VoxelCameraAssignment& assignment,
                                   int64_t stride = 8);

// Applies a prebuilt splat matrix; see build_splat_matrix.
torch::Tensor apply_splat(const torch::Tensor& splat_matrix,
                          const torch::Tensor& features, const BevGrid& grid);

}  // namespace bevcar::geometry

#endif  // BEVCAR_GEOMETRY_HPP_
