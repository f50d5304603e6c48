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
#include "bevcar/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <set>

#include <Eigen/Dense>

#include "bevcar/errors.hpp"

namespace bevcar::geometry {

void BevGrid::validate() const {
  if (x_cells <= 0 || y_cells <= 0 || z_cells <= 0) {
    throw ConfigError("BevGrid: cell counts must be positive");
  }
  if (!(x_extent > 0.0) || !(y_extent > 0.0) || !(z_max > z_min)) {
    throw ConfigError("BevGrid: extents must be positive and z_max > z_min");
  }
}

Eigen::Vector3d BevGrid::voxel_center(int64_t i, int64_t j, int64_t k) const {
  const Eigen::Vector2d c = cell_center(i, j);
  return {c.x(), c.y(), z_min + (static_cast<double>(k) + 0.5) * cell_z()};
}

Eigen::Vector2d BevGrid::cell_center(int64_t i, int64_t j) const {
  return {-0.5 * x_extent + (static_cast<double>(i) + 0.5) * cell_x(),
          -0.5 * y_extent + (static_cast<double>(j) + 0.5) * cell_y()};
}

std::optional<CellIndex> BevGrid::locate(const Eigen::Vector3d& p) const {
  if (!p.allFinite()) return std::nullopt;
  const double fx = (p.x() + 0.5 * x_extent) / cell_x();
  const double fy = (p.y() + 0.5 * y_extent) / cell_y();
  const double fz = (p.z() - z_min) / cell_z();
  if (fx < 0.0 || fy < 0.0 || fz < 0.0) return std::nullopt;
  const auto i = static_cast<int64_t>(std::floor(fx));
  const auto j = static_cast<int64_t>(std::floor(fy));
  const auto k = static_cast<int64_t>(std::floor(fz));
  if (i >= x_cells || j >= y_cells || k >= z_cells) return std::nullopt;
  return CellIndex{i, j, k};
}

std::vector<Eigen::Vector3d> voxel_centers(const BevGrid& grid) {
  grid.validate();
  std::vector<Eigen::Vector3d> centers;
  centers.reserve(static_cast<size_t>(grid.voxel_count()));
  for (int64_t i = 0; i < grid.x_cells; ++i) {
    for (int64_t j = 0; j < grid.y_cells; ++j) {
      for (int64_t k = 0; k < grid.z_cells; ++k) {
        centers.push_back(grid.voxel_center(i, j, k));
      }
    }
  }
  return centers;
}

void CameraModel::validate() const {
  constexpr double kTol = 1e-6;
  const Eigen::Matrix3d should_be_identity = rotation * rotation.transpose();
  if (!should_be_identity.isApprox(Eigen::Matrix3d::Identity(), kTol) ||
      std::abs(rotation.determinant() - 1.0) > kTol) {
    throw ConfigError("camera '" + name + "': rotation is not a proper rotation");
  }
  if (!(fx() > 0.0) || !(fy() > 0.0)) {
    throw ConfigError("camera '" + name + "': focal lengths must be positive");
  }
  if (height <= 0 || width <= 0) {
    throw ConfigError("camera '" + name + "': image size must be positive");
  }
  if (cx() < 0.0 || cx() >= static_cast<double>(width) || cy() < 0.0 ||
      cy() >= static_cast<double>(height)) {
    throw ConfigError("camera '" + name +
                      "': principal point lies outside the image");
  }
}

Projection project_point(const Eigen::Vector3d& p_ref,
                         const CameraModel& camera) {
  const Eigen::Vector3d pc = camera.to_camera(p_ref);
  Projection out;
  out.depth = pc.z();
  if (!(pc.z() > kMinDepth)) return out;
  out.u = camera.fx() * (pc.x() / pc.z()) + camera.cx();
  out.v = camera.fy() * (pc.y() / pc.z()) + camera.cy();
  out.valid = out.u >= 0.0 && out.u < static_cast<double>(camera.width) &&
              out.v >= 0.0 && out.v < static_cast<double>(camera.height);
  return out;
}

std::vector<Projection> project_points(std::span<const Eigen::Vector3d> points,
                                       const CameraModel& camera) {
  std::vector<Projection> out;
  out.reserve(points.size());
  for (const auto& p : points) out.push_back(project_point(p, camera));
  return out;
}

Eigen::Vector3d unproject(const CameraModel& camera, double u, double v,
                          double depth) {
  const Eigen::Vector3d pc{(u - camera.cx()) / camera.fx() * depth,
                           (v - camera.cy()) / camera.fy() * depth, depth};
  return camera.rotation.transpose() * (pc - camera.translation);
}

void CameraRig::validate() const {
  if (cameras.empty()) throw ConfigError("camera rig is empty");
  std::set<std::string> names;
  for (const auto& cam : cameras) {
    cam.validate();
    if (!names.insert(cam.name).second) {
      throw ConfigError("camera rig: duplicate camera name '" + cam.name + "'");
    }
  }
}

std::string CameraRig::fingerprint() const {
  std::string key;
  char buf[32];
  auto put = [&](double x) {
    std::snprintf(buf, sizeof(buf), "%.17g,", x);
    key += buf;
  };
  for (const auto& cam : cameras) {
    key += cam.name;
    key += ':';
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) put(cam.intrinsics(r, c));
    }
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) put(cam.rotation(r, c));
    }
    for (int r = 0; r < 3; ++r) put(cam.translation(r));
    put(static_cast<double>(cam.height));
    put(static_cast<double>(cam.width));
    key += ';';
  }
  return key;
}

Eigen::Matrix3d optical_rotation(double yaw, double pitch) {
  const Eigen::Vector3d forward{std::cos(pitch) * std::cos(yaw),
                                std::cos(pitch) * std::sin(yaw),
                                -std::sin(pitch)};
  const Eigen::Vector3d right{std::sin(yaw), -std::cos(yaw), 0.0};
  const Eigen::Vector3d down = forward.cross(right);
  Eigen::Matrix3d r;
  r.row(0) = right.transpose();
  r.row(1) = down.transpose();
  r.row(2) = forward.transpose();
  return r;
}

CameraRig make_surround_rig(const SurroundRigOptions& options) {
  if (options.yaws_deg.size() != options.names.size()) {
    throw ConfigError("surround rig: yaw and name lists differ in length");
  }
  const double w = static_cast<double>(options.width);
  const double h = static_cast<double>(options.height);
  const double focal =
      0.5 * w /
      std::tan(0.5 * options.horizontal_fov_deg * std::numbers::pi / 180.0);
  CameraRig rig;
  for (size_t i = 0; i < options.yaws_deg.size(); ++i) {
    CameraModel cam;
    cam.name = options.names[i];
    cam.intrinsics << focal, 0.0, 0.5 * w, 0.0, focal, 0.5 * h, 0.0, 0.0, 1.0;
    cam.rotation =
        optical_rotation(options.yaws_deg[i] * std::numbers::pi / 180.0);
    const Eigen::Vector3d center{0.0, 0.0, options.mount_height};
    cam.translation = -cam.rotation * center;
    cam.height = options.height;
    cam.width = options.width;
    rig.cameras.push_back(std::move(cam));
  }
  rig.validate();
  return rig;
}

VoxelCameraAssignment::VoxelCameraAssignment(BevGrid grid, int64_t num_cameras,
                                             std::vector<Entry> entries)
    : grid_(grid), num_cameras_(num_cameras), entries_(std::move(entries)) {}

std::vector<int32_t> VoxelCameraAssignment::cameras_of(int64_t voxel) const {
  const Entry& e = entries_[voxel];
  std::vector<int32_t> out;
  for (int s = 0; s < e.count; ++s) out.push_back(e.slots[s].camera);
  return out;
}

bool VoxelCameraAssignment::cell_sees(int64_t i, int64_t j,
                                      int32_t camera) const {
  for (int64_t k = 0; k < grid_.z_cells; ++k) {
    const Entry& e = at(i, j, k);
    for (int s = 0; s < e.count; ++s) {
      if (e.slots[s].camera == camera) return true;
    }
  }
  return false;
}

bool VoxelCameraAssignment::cell_unassigned(int64_t i, int64_t j) const {
  for (int64_t k = 0; k < grid_.z_cells; ++k) {
    if (at(i, j, k).count > 0) return false;
  }
  return true;
}

bool VoxelCameraAssignment::operator==(
    const VoxelCameraAssignment& other) const {
  if (!(grid_ == other.grid_) || num_cameras_ != other.num_cameras_ ||
      entries_.size() != other.entries_.size()) {
    return false;
  }
  for (size_t v = 0; v < entries_.size(); ++v) {
    const Entry& a = entries_[v];
    const Entry& b = other.entries_[v];
    if (a.count != b.count) return false;
    for (int s = 0; s < a.count; ++s) {
      if (a.slots[s].camera != b.slots[s].camera || a.slots[s].u != b.slots[s].u ||
          a.slots[s].v != b.slots[s].v) {
        return false;
      }
    }
  }
  return true;
}

VoxelCameraAssignment assign_cameras(const BevGrid& grid,
                                     const CameraRig& rig) {
  grid.validate();
  rig.validate();
  const auto centers = voxel_centers(grid);
  std::vector<VoxelCameraAssignment::Entry> entries(centers.size());

  struct Hit {
    int32_t camera;
    double u, v, dist2;
  };
  std::vector<Hit> hits;
  for (size_t vox = 0; vox < centers.size(); ++vox) {
    hits.clear();
    for (size_t c = 0; c < rig.size(); ++c) {
      const CameraModel& cam = rig[c];
      const Projection p = project_point(centers[vox], cam);
      if (!p.valid) continue;
      const double du = p.u - 0.5 * static_cast<double>(cam.width);
      const double dv = p.v - 0.5 * static_cast<double>(cam.height);
      hits.push_back({static_cast<int32_t>(c), p.u, p.v, du * du + dv * dv});
    }
    if (hits.size() > VoxelCameraAssignment::kMaxCameras) {
      std::stable_sort(hits.begin(), hits.end(), [](const Hit& a, const Hit& b) {
        return a.dist2 < b.dist2;
      });
      hits.resize(VoxelCameraAssignment::kMaxCameras);
      std::sort(hits.begin(), hits.end(), [](const Hit& a, const Hit& b) {
        return a.camera < b.camera;
      });
    }
    auto& e = entries[vox];
    e.count = static_cast<uint8_t>(hits.size());
    for (size_t s = 0; s < hits.size(); ++s) {
      e.slots[s] = {hits[s].camera, hits[s].u, hits[s].v};
    }
  }
  return VoxelCameraAssignment(grid, static_cast<int64_t>(rig.size()),
                               std::move(entries));
}

std::shared_ptr<const VoxelCameraAssignment> AssignmentCache::get(
    const BevGrid& grid, const CameraRig& rig) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%lld,%lld,%lld,%.17g,%.17g,%.17g,%.17g|",
                static_cast<long long>(grid.x_cells),
                static_cast<long long>(grid.y_cells),
                static_cast<long long>(grid.z_cells), grid.x_extent,
                grid.y_extent, grid.z_min, grid.z_max);
  const std::string key = buf + rig.fingerprint();
  std::lock_guard<std::mutex> lock(mutex_);
  auto it = cache_.find(key);
  if (it != cache_.end()) return it->second;
  auto value = std::make_shared<const VoxelCameraAssignment>(
      assign_cameras(grid, rig));
  cache_.emplace(key, value);
  return value;
}

size_t AssignmentCache::size() const {
  std::lock_guard<std::mutex> lock(mutex_);
  return cache_.size();
}

namespace {

// Dyadic bilinear weights: the four corner weights of every sample sum to
// exactly one in any floating-point width of 17 bits or more.
constexpr double kSubpixelSteps = 256.0;

}  // namespace

torch::Tensor build_splat_matrix(const VoxelCameraAssignment& assignment,
                                 int64_t feature_height, int64_t feature_width,
                                 int64_t stride, torch::Dtype dtype) {
  if (feature_height <= 0 || feature_width <= 0 || stride <= 0) {
    throw ConfigError("splat: feature map size and stride must be positive");
  }
  const int64_t per_camera = feature_height * feature_width;
  const auto entries = assignment.entries();

  std::vector<int64_t> rows;
  std::vector<int64_t> cols;
  std::vector<double> vals;
  rows.reserve(entries.size() * 4);
  cols.reserve(entries.size() * 4);
  vals.reserve(entries.size() * 4);

  auto clamp = [](int64_t a, int64_t hi) {
    return std::clamp<int64_t>(a, 0, hi - 1);
  };
  for (size_t vox = 0; vox < entries.size(); ++vox) {
    const auto& e = entries[vox];
    if (e.count == 0) continue;
    const double share = 1.0 / static_cast<double>(e.count);
    for (int s = 0; s < e.count; ++s) {
      const auto& slot = e.slots[s];
      const double fx = slot.u / static_cast<double>(stride) - 0.5;
      const double fy = slot.v / static_cast<double>(stride) - 0.5;
      const double x0f = std::floor(fx);
      const double y0f = std::floor(fy);
      const double ax = std::round((fx - x0f) * kSubpixelSteps) / kSubpixelSteps;
      const double ay = std::round((fy - y0f) * kSubpixelSteps) / kSubpixelSteps;
      const auto x0 = static_cast<int64_t>(x0f);
      const auto y0 = static_cast<int64_t>(y0f);
      const int64_t base = static_cast<int64_t>(slot.camera) * per_camera;
      const std::array<std::pair<int64_t, int64_t>, 4> corners = {
          std::pair{x0, y0}, {x0 + 1, y0}, {x0, y0 + 1}, {x0 + 1, y0 + 1}};
      const std::array<double, 4> weights = {(1 - ax) * (1 - ay), ax * (1 - ay),
                                             (1 - ax) * ay, ax * ay};
      for (int c = 0; c < 4; ++c) {
        if (weights[c] == 0.0) continue;
        const int64_t cx = clamp(corners[c].first, feature_width);
        const int64_t cy = clamp(corners[c].second, feature_height);
        rows.push_back(static_cast<int64_t>(vox));
        cols.push_back(base + cy * feature_width + cx);
        vals.push_back(weights[c] * share);
      }
    }
  }
  const auto nnz = static_cast<int64_t>(rows.size());
  auto index = torch::empty({2, nnz}, torch::kInt64);
  auto idx = index.accessor<int64_t, 2>();
  for (int64_t n = 0; n < nnz; ++n) {
    idx[0][n] = rows[n];
    idx[1][n] = cols[n];
  }
  auto values = torch::from_blob(vals.data(), {nnz}, torch::kFloat64)
                    .to(dtype)
                    .clone();
  return torch::sparse_coo_tensor(
             index, values,
             {assignment.grid().voxel_count(),
              assignment.num_cameras() * per_camera},
             torch::TensorOptions().dtype(dtype))
      .coalesce();
}

torch::Tensor apply_splat(const torch::Tensor& splat_matrix,
                          const torch::Tensor& features, const BevGrid& grid) {
  const bool batched = features.dim() == 5;
  if (!batched && features.dim() != 4) {
    throw ConfigError("splat: expected N x F x h x w or B x N x F x h x w");
  }
  const torch::Tensor f = batched ? features : features.unsqueeze(0);
  const int64_t b = f.size(0);
  const int64_t n = f.size(1);
  const int64_t ch = f.size(2);
  const int64_t hw = f.size(3) * f.size(4);
  if (splat_matrix.size(1) != n * hw) {
    throw ConfigError("splat: feature maps do not match the splat matrix");
  }
  // (N*h*w) x (B*F)
  const torch::Tensor cols = f.permute({1, 3, 4, 0, 2}).reshape({n * hw, b * ch});
  const torch::Tensor out = torch::mm(splat_matrix, cols);  // V x (B*F)
  torch::Tensor grid_out =
      out.reshape({grid.x_cells, grid.y_cells, grid.z_cells, b, ch})
          .permute({3, 4, 0, 1, 2})
          .contiguous();
  return batched ? grid_out : grid_out.squeeze(0);
}

torch::Tensor splat_image_features(const torch::Tensor& features,
                                   const CameraRig& rig, const BevGrid& grid,
                                   const VoxelCameraAssignment& assignment,
                                   int64_t stride) {
  const int64_t cam_dim = features.dim() == 5 ? 1 : 0;
  if (features.dim() != 4 && features.dim() != 5) {
    throw ConfigError("splat: expected N x F x h x w or B x N x F x h x w");
  }
  if (features.size(cam_dim) != static_cast<int64_t>(rig.size()) ||
      assignment.num_cameras() != static_cast<int64_t>(rig.size())) {
    throw ConfigError("splat: camera count mismatch between features and rig");
  }
  const int64_t h = features.size(-2);
  const int64_t w = features.size(-1);
  for (const auto& cam : rig.cameras) {
    if (cam.height != h * stride || cam.width != w * stride) {
      throw ConfigError("splat: feature map " + std::to_string(h) + "x" +
                        std::to_string(w) + " does not match camera '" +
                        cam.name + "' at stride " + std::to_string(stride));
    }
  }
  const torch::Tensor matrix = build_splat_matrix(
      assignment, h, w, stride, features.scalar_type());
  return apply_splat(matrix, features, grid);
}

}  // namespace bevcar::geometry
