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
#ifndef BEVCAR_DATA_HPP_
#define BEVCAR_DATA_HPP_

// Synthetic driving scenes, their rendering into camera/radar/ground-truth
// samples, and the on-disk dataset layout:
//
//   <root>/<token>/cam_<name>.png      8-bit RGB, one per camera
//   <root>/<token>/radar.csv           header x,y,z,vx,vy,rcs
//   <root>/<token>/calib.json          [{name, K, R, t, H, W}, ...]
//   <root>/<token>/gt_vehicle.png      1-bit, X rows by Y columns
//   <root>/<token>/gt_map_<class>.png  1-bit, one per map class
//   <root>/<token>/gt_valid.png        1-bit, optional (all valid if absent)
//   <root>/<token>/meta.json           token, condition, seed, grid, sweeps
//
// BEV masks are stored with row X-1-i and column Y-1-j for cell (i, j), so
// that forward points up and left points left when viewed as an image.

#include <array>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Core>
#include <torch/torch.h>

#include "bevcar/geometry.hpp"
#include "bevcar/metrics.hpp"
#include "bevcar/radar.hpp"
#include "bevcar/segmentation.hpp"

namespace bevcar::data {

using Polygon = std::vector<Eigen::Vector2d>;

struct VehicleBox {
  Eigen::Vector2d center = Eigen::Vector2d::Zero();
  double length = 4.5;
  double width = 1.9;
  double height = 1.6;
  double yaw = 0.0;  // radians, CCW from +x
  Eigen::Vector2d velocity = Eigen::Vector2d::Zero();
  double rcs = 10.0;  // dBsm
  std::array<uint8_t, 3> color = {200, 30, 30};

  // Footprint corners in CCW order.
  std::array<Eigen::Vector2d, 4> corners() const;
  bool contains(double x, double y) const;
};

// Separating-axis overlap test on the footprints, each inflated by `margin`.
bool boxes_overlap(const VehicleBox& a, const VehicleBox& b, double margin = 0.0);

bool point_in_polygon(const Polygon& polygon, double x, double y);

struct SyntheticScene {
  uint64_t seed = 0;
  geometry::BevGrid grid;
  geometry::CameraRig rig;
  std::vector<VehicleBox> vehicles;
  std::array<std::vector<Polygon>, segmentation::kMapClasses> map;
  metrics::Condition condition = metrics::Condition::kDay;
};

struct SceneOptions {
  geometry::BevGrid grid;
  geometry::SurroundRigOptions rig;
  // Exact vehicle count; negative draws uniformly from [min, max].
  int num_vehicles = -1;
  int min_vehicles = 2;
  int max_vehicles = 8;
  // Vehicles keep their centre at least this far from the origin.
  double ego_clearance = 5.0;
  int max_retries = 200;
  // Forced condition; otherwise drawn from `conditions`.
  std::optional<metrics::Condition> condition;
  std::vector<metrics::Condition> conditions = {metrics::Condition::kDay};
};

// Deterministic in `seed`. Throws GenerationError when vehicles cannot be
// placed without overlap within `max_retries` attempts each.
SyntheticScene generate_scene(uint64_t seed, const SceneOptions& options = {});

struct Sample {
  std::string token;
  torch::Tensor images;  // N x 3 x H x W uint8
  radar::RadarPointCloud radar;
  geometry::CameraRig rig;
  segmentation::BevGroundTruth gt;  // X x Y masks
  geometry::BevGrid grid;
  metrics::Condition condition = metrics::Condition::kDay;
  uint64_t seed = 0;
  // Index of the vehicle each radar point was drawn from. Filled by
  // render_sample only; not serialised.
  std::vector<int32_t> radar_source;
};

inline constexpr double kRadarNoiseSigma = 0.3;
inline constexpr double kRadarVelocityNoise = 0.1;
inline constexpr int kMinRadarPerVehicle = 5;
inline constexpr int kMaxRadarPerVehicle = 30;
inline constexpr double kRadarMountHeight = 0.5;

// Cell-centre rasterisation onto an X x Y bool mask.
torch::Tensor rasterize_box(const VehicleBox& box, const geometry::BevGrid& grid);
torch::Tensor rasterize_polygons(const std::vector<Polygon>& polygons,
                                 const geometry::BevGrid& grid);

// Renders camera images, radar returns and ground truth.
Sample render_sample(const SyntheticScene& scene, const std::string& token);

// Writes <root>/<token>/...; creates directories as needed.
void save_sample(const std::string& root, const Sample& sample);
// Throws DataError naming the offending file.
Sample load_sample(const std::string& root, const std::string& token);

// Tokens (sub-directories holding meta.json) in lexicographic order.
std::vector<std::string> list_tokens(const std::string& root);

// Parses {"day": [...], "rain": [...], "night": [...]}; a token listed
// under more than one condition is rejected.
metrics::ConditionSplit load_split(const std::string& path);
void save_split(const std::string& path, const metrics::ConditionSplit& split);

struct DatasetOptions {
  int num_samples = 10;
  uint64_t seed = 0;
  SceneOptions scene;
  int threads = 0;  // 0: hardware concurrency
};

// Generates `num_samples` scenes with tokens s000000.., writes them and a
// split.json under `root`, and returns the tokens. Sample i uses a seed
// derived from (seed, i) and condition conditions[i % size].
std::vector<std::string> generate_dataset(const std::string& root,
                                          const DatasetOptions& options);

uint64_t derive_seed(uint64_t seed, uint64_t index);

// Loads samples on background threads and hands them out through a
// bounded queue of `prefetch` entries. With deterministic order, samples
// come out in token order; otherwise in completion order.
class SampleLoader {
 public:
  SampleLoader(std::string root, std::vector<std::string> tokens,
               int prefetch = 2, bool deterministic_order = true,
               int threads = 1);
  ~SampleLoader();
  SampleLoader(const SampleLoader&) = delete;
  SampleLoader& operator=(const SampleLoader&) = delete;

  // Next sample, or nullopt once all tokens were delivered. Rethrows load
  // errors.
  std::optional<Sample> next();

 private:
  void worker();

  std::string root_;
  std::vector<std::string> tokens_;
  size_t prefetch_;
  bool deterministic_;
  std::mutex mutex_;
  std::condition_variable cv_;
  size_t next_to_load_ = 0;
  size_t delivered_ = 0;
  std::map<size_t, Sample> ready_;
  std::exception_ptr error_;
  bool stop_ = false;
  std::vector<std::thread> threads_;
};

}  // namespace bevcar::data

#endif  // BEVCAR_DATA_HPP_
