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
#include "bevcar/data.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include <Eigen/Dense>

#include "bevcar/errors.hpp"
#include "bevcar/png_io.hpp"
#include "json.hpp"

namespace bevcar::data {

namespace fs = std::filesystem;
using Eigen::Vector2d;
using Eigen::Vector3d;
using metrics::Condition;

namespace {

constexpr double kPi = std::numbers::pi;

// Map class channels within BevGroundTruth::map (output channel - 1).
constexpr int kDrivable = 0;
constexpr int kCarpark = 1;
constexpr int kPedCrossing = 2;
constexpr int kWalkway = 3;
constexpr int kStopLine = 4;
constexpr int kRoadDivider = 5;
constexpr int kLaneDivider = 6;

uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}
  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  int uniform_int(int lo, int hi) {
    return std::uniform_int_distribution<int>(lo, hi)(engine_);
  }
  bool chance(double p) { return uniform(0.0, 1.0) < p; }
  double normal(double sigma) {
    return std::normal_distribution<double>(0.0, sigma)(engine_);
  }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

Vector2d rotate(const Vector2d& v, double angle) {
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  return {c * v.x() - s * v.y(), s * v.x() + c * v.y()};
}

// A straight road: points are origin + s * dir + o * normal.
struct RoadAxis {
  Vector2d origin;
  double angle = 0.0;
  Vector2d dir() const { return {std::cos(angle), std::sin(angle)}; }
  Vector2d normal() const { return {-std::sin(angle), std::cos(angle)}; }
  Vector2d at(double s, double o) const {
    return origin + s * dir() + o * normal();
  }
  Polygon strip(double s0, double s1, double o0, double o1) const {
    return {at(s0, o0), at(s1, o0), at(s1, o1), at(s0, o1)};
  }
};

// [lo, hi] minus the gaps, as a list of intervals.
std::vector<std::pair<double, double>> subtract(
    double lo, double hi, std::vector<std::pair<double, double>> gaps) {
  std::sort(gaps.begin(), gaps.end());
  std::vector<std::pair<double, double>> out;
  double cursor = lo;
  for (const auto& [g0, g1] : gaps) {
    if (g1 <= cursor || g0 >= hi) continue;
    if (g0 > cursor) out.emplace_back(cursor, g0);
    cursor = std::max(cursor, g1);
  }
  if (cursor < hi) out.emplace_back(cursor, hi);
  return out;
}

void add_dashes(std::vector<Polygon>& out, const RoadAxis& road, double s0,
                double s1, double offset, double width, double dash,
                double gap) {
  for (double s = s0; s + dash <= s1; s += dash + gap) {
    out.push_back(road.strip(s, s + dash, offset - width / 2, offset + width / 2));
  }
}

std::array<uint8_t, 3> hsv_color(double h, double s, double v) {
  const double c = v * s;
  const double hp = std::fmod(h / 60.0, 6.0);
  const double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) {
    r = c, g = x;
  } else if (hp < 2) {
    r = x, g = c;
  } else if (hp < 3) {
    g = c, b = x;
  } else if (hp < 4) {
    g = x, b = c;
  } else if (hp < 5) {
    r = x, b = c;
  } else {
    r = c, b = x;
  }
  const double m = v - c;
  auto q = [&](double t) {
    return static_cast<uint8_t>(std::lround(std::clamp(t + m, 0.0, 1.0) * 255.0));
  };
  return {q(r), q(g), q(b)};
}

bool inside_grid(const VehicleBox& box, const geometry::BevGrid& grid,
                 double margin) {
  const double hx = grid.x_extent / 2 - margin;
  const double hy = grid.y_extent / 2 - margin;
  for (const auto& c : box.corners()) {
    if (c.x() < -hx || c.x() > hx || c.y() < -hy || c.y() > hy) return false;
  }
  return true;
}

VehicleBox ego_box() {
  VehicleBox ego;
  ego.center = {0.5, 0.0};
  ego.length = 4.8;
  ego.width = 2.0;
  return ego;
}

}  // namespace

uint64_t derive_seed(uint64_t seed, uint64_t index) {
  return splitmix64(splitmix64(seed) ^ (index * 0xD1B54A32D192ED03ull + 1));
}

std::array<Vector2d, 4> VehicleBox::corners() const {
  const double hl = length / 2;
  const double hw = width / 2;
  return {center + rotate({hl, -hw}, yaw), center + rotate({hl, hw}, yaw),
          center + rotate({-hl, hw}, yaw), center + rotate({-hl, -hw}, yaw)};
}

bool VehicleBox::contains(double x, double y) const {
  const Vector2d local = rotate(Vector2d(x, y) - center, -yaw);
  return local.x() >= -length / 2 && local.x() < length / 2 &&
         local.y() >= -width / 2 && local.y() < width / 2;
}

bool boxes_overlap(const VehicleBox& a, const VehicleBox& b, double margin) {
  VehicleBox ia = a;
  VehicleBox ib = b;
  ia.length += 2 * margin;
  ia.width += 2 * margin;
  ib.length += 2 * margin;
  ib.width += 2 * margin;
  const auto ca = ia.corners();
  const auto cb = ib.corners();
  for (double yaw : {ia.yaw, ia.yaw + kPi / 2, ib.yaw, ib.yaw + kPi / 2}) {
    const Vector2d axis(std::cos(yaw), std::sin(yaw));
    double a0 = std::numeric_limits<double>::infinity(), a1 = -a0;
    double b0 = a0, b1 = -a0;
    for (const auto& p : ca) {
      a0 = std::min(a0, p.dot(axis));
      a1 = std::max(a1, p.dot(axis));
    }
    for (const auto& p : cb) {
      b0 = std::min(b0, p.dot(axis));
      b1 = std::max(b1, p.dot(axis));
    }
    if (a1 < b0 || b1 < a0) return false;
  }
  return true;
}

bool point_in_polygon(const Polygon& polygon, double x, double y) {
  bool inside = false;
  const size_t n = polygon.size();
  for (size_t i = 0, j = n - 1; i < n; j = i++) {
    const Vector2d& a = polygon[i];
    const Vector2d& b = polygon[j];
    if ((a.y() > y) != (b.y() > y)) {
      const double xc = (b.x() - a.x()) * (y - a.y()) / (b.y() - a.y()) + a.x();
      if (x < xc) inside = !inside;
    }
  }
  return inside;
}

SyntheticScene generate_scene(uint64_t seed, const SceneOptions& options) {
  options.grid.validate();
  if (options.max_retries < 1) throw ConfigError("scene: max_retries must be >= 1");
  if (options.num_vehicles < 0 &&
      (options.min_vehicles < 0 || options.max_vehicles < options.min_vehicles)) {
    throw ConfigError("scene: invalid vehicle count range");
  }
  Rng rng(derive_seed(seed, 1));
  Rng condition_rng(derive_seed(seed, 2));

  SyntheticScene scene;
  scene.seed = seed;
  scene.grid = options.grid;
  scene.rig = geometry::make_surround_rig(options.rig);
  if (options.condition) {
    scene.condition = *options.condition;
  } else {
    if (options.conditions.empty()) throw ConfigError("scene: no conditions to draw from");
    scene.condition = options.conditions[condition_rng.uniform_int(
        0, static_cast<int>(options.conditions.size()) - 1)];
  }

  const double hx = options.grid.x_extent / 2;
  const double hy = options.grid.y_extent / 2;
  const double reach = std::hypot(hx, hy) + 10.0;
  const double span = std::min(hx, hy);
  auto& map = scene.map;

  // Main road through the origin.
  RoadAxis main{{0.0, rng.uniform(-1.5, 1.5)}, rng.uniform(-0.15, 0.15)};
  const double w1 = rng.uniform(7.0, 12.0);
  const double ww = rng.uniform(2.0, 3.0);
  map[kDrivable].push_back(main.strip(-reach, reach, -w1 / 2, w1 / 2));

  const bool has_cross = rng.chance(0.75);
  double i_lo = 0.0, i_hi = 0.0;
  RoadAxis cross;
  double w2 = 0.0;
  if (has_cross) {
    const double xc = rng.uniform(-0.6, 0.6) * span;
    const double dtheta = kPi / 2 + rng.uniform(-0.2, 0.2);
    w2 = rng.uniform(6.0, 10.0);
    cross = {main.at(xc, 0.0), main.angle + dtheta};
    const int sides = rng.uniform_int(0, 3);  // 0: left only, 1: right only
    const double c_lo = sides == 0 ? 0.0 : -reach;
    const double c_hi = sides == 1 ? 0.0 : reach;
    map[kDrivable].push_back(cross.strip(c_lo, c_hi, -w2 / 2, w2 / 2));
    const double sn = std::fabs(std::sin(dtheta));
    const double tn = std::fabs(std::tan(dtheta));
    const double half_main = (w2 / 2) / sn + (w1 / 2) / tn;
    i_lo = xc - half_main;
    i_hi = xc + half_main;
    const double half_cross = (w1 / 2) / sn + (w2 / 2) / tn;
    for (const auto& [s0, s1] :
         subtract(c_lo, c_hi, {{-half_cross - ww, half_cross + ww}})) {
      map[kWalkway].push_back(cross.strip(s0, s1, w2 / 2, w2 / 2 + ww));
      map[kWalkway].push_back(cross.strip(s0, s1, -w2 / 2 - ww, -w2 / 2));
      add_dashes(map[kLaneDivider], cross, s0 + ww, s1, 0.0, 0.8, 3.0, 3.0);
    }
  }

  // Pedestrian crossing, stop line and dividers on the main road.
  const double pc = 3.0;
  const double ped_lo =
      has_cross ? i_lo - 1.0 - pc : rng.uniform(-0.5, 0.5) * span;
  map[kPedCrossing].push_back(main.strip(ped_lo, ped_lo + pc, -w1 / 2, w1 / 2));
  map[kStopLine].push_back(main.strip(ped_lo - 1.5, ped_lo - 0.5, -w1 / 2, 0.0));
  std::vector<std::pair<double, double>> gaps = {{ped_lo - 1.5, ped_lo + pc}};
  if (has_cross) {
    gaps.emplace_back(i_lo - ww, i_hi + ww);
    if (rng.chance(0.5)) {
      map[kPedCrossing].push_back(
          main.strip(i_hi + 1.0, i_hi + 1.0 + pc, -w1 / 2, w1 / 2));
      gaps.emplace_back(i_hi, i_hi + 1.0 + pc);
    }
  }
  for (const auto& [s0, s1] : subtract(-reach, reach, gaps)) {
    map[kRoadDivider].push_back(main.strip(s0, s1, -0.5, 0.5));
    if (w1 >= 10.0) {
      add_dashes(map[kLaneDivider], main, s0, s1, w1 / 4, 0.8, 3.0, 3.0);
      add_dashes(map[kLaneDivider], main, s0, s1, -w1 / 4, 0.8, 3.0, 3.0);
    }
  }
  std::vector<std::pair<double, double>> walk_gaps;
  if (has_cross) walk_gaps.emplace_back(i_lo - ww, i_hi + ww);
  for (const auto& [s0, s1] : subtract(-reach, reach, walk_gaps)) {
    map[kWalkway].push_back(main.strip(s0, s1, w1 / 2, w1 / 2 + ww));
    map[kWalkway].push_back(main.strip(s0, s1, -w1 / 2 - ww, -w1 / 2));
  }

  // Optional car park beside the main road.
  std::optional<std::pair<RoadAxis, std::array<double, 4>>> carpark;
  if (rng.chance(0.5)) {
    const double side = rng.chance(0.5) ? 1.0 : -1.0;
    const double depth = rng.uniform(10.0, 16.0);
    const double length = rng.uniform(14.0, 22.0);
    double sc = rng.uniform(-0.5, 0.5) * span;
    if (has_cross && std::fabs(sc - 0.5 * (i_lo + i_hi)) <
                         0.5 * (i_hi - i_lo) + length / 2 + 3.0) {
      sc = (sc < 0.5 * (i_lo + i_hi) ? i_lo - length / 2 - 3.0
                                     : i_hi + length / 2 + 3.0);
    }
    const double o_near = w1 / 2 + ww + 0.5;
    const double o0 = side > 0 ? o_near : -o_near - depth;
    const double o1 = side > 0 ? o_near + depth : -o_near;
    const std::array<double, 4> rect = {sc - length / 2, sc + length / 2, o0, o1};
    map[kCarpark].push_back(main.strip(rect[0], rect[1], rect[2], rect[3]));
    carpark = std::make_pair(main, rect);
  }

  // Vehicles.
  const int n = options.num_vehicles >= 0
                    ? options.num_vehicles
                    : rng.uniform_int(options.min_vehicles, options.max_vehicles);
  const VehicleBox ego = ego_box();
  for (int k = 0; k < n; ++k) {
    bool placed = false;
    for (int attempt = 0; attempt < options.max_retries && !placed; ++attempt) {
      VehicleBox box;
      const bool truck = rng.chance(0.12);
      if (truck) {
        box.length = rng.uniform(6.5, 9.0);
        box.width = rng.uniform(2.3, 2.6);
        box.height = rng.uniform(2.8, 3.4);
        box.rcs = rng.uniform(15.0, 25.0);
      } else {
        box.length = rng.uniform(3.9, 5.0);
        box.width = rng.uniform(1.7, 2.0);
        box.height = rng.uniform(1.4, 1.9);
        box.rcs = rng.uniform(5.0, 20.0);
      }
      box.color = hsv_color(rng.uniform(0.0, 360.0), rng.uniform(0.6, 1.0),
                            rng.uniform(0.55, 1.0));
      if (carpark && rng.chance(0.25)) {
        const auto& [axis, rect] = *carpark;
        box.center = axis.at(rng.uniform(rect[0], rect[1]),
                             rng.uniform(rect[2], rect[3]));
        box.yaw = axis.angle + kPi / 2 + (rng.chance(0.5) ? kPi : 0.0) +
                  rng.uniform(-0.05, 0.05);
      } else {
        const bool on_cross = has_cross && rng.chance(0.35);
        const RoadAxis& road = on_cross ? cross : main;
        const double width = on_cross ? w2 : w1;
        const double lane = rng.chance(0.5) ? 1.0 : -1.0;
        box.center = road.at(rng.uniform(-reach, reach),
                             lane * width / 4 + rng.uniform(-0.3, 0.3));
        box.yaw = road.angle + (lane > 0 ? kPi : 0.0) + rng.uniform(-0.05, 0.05);
        if (rng.chance(0.65)) {
          box.velocity = rng.uniform(2.0, 12.0) *
                         Vector2d(std::cos(box.yaw), std::sin(box.yaw));
        }
      }
      if (!inside_grid(box, options.grid, 0.5)) continue;
      if (box.center.norm() < options.ego_clearance) continue;
      if (boxes_overlap(box, ego, 0.5)) continue;
      bool clash = false;
      for (const auto& other : scene.vehicles) {
        if (boxes_overlap(box, other, 0.5)) {
          clash = true;
          break;
        }
      }
      if (clash) continue;
      scene.vehicles.push_back(box);
      placed = true;
    }
    if (!placed) {
      throw GenerationError("could not place vehicle " + std::to_string(k + 1) +
                            " of " + std::to_string(n) + " after " +
                            std::to_string(options.max_retries) + " attempts");
    }
  }
  return scene;
}

torch::Tensor rasterize_box(const VehicleBox& box, const geometry::BevGrid& grid) {
  auto mask = torch::zeros({grid.x_cells, grid.y_cells}, torch::kBool);
  auto acc = mask.accessor<bool, 2>();
  const double x0 = -grid.x_extent / 2;
  const double y0 = -grid.y_extent / 2;
  double lo_x = std::numeric_limits<double>::infinity(), hi_x = -lo_x;
  double lo_y = lo_x, hi_y = -lo_x;
  for (const auto& c : box.corners()) {
    lo_x = std::min(lo_x, c.x());
    hi_x = std::max(hi_x, c.x());
    lo_y = std::min(lo_y, c.y());
    hi_y = std::max(hi_y, c.y());
  }
  const auto i0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor((lo_x - x0) / grid.cell_x())) - 1);
  const auto i1 = std::min<int64_t>(grid.x_cells - 1, static_cast<int64_t>(std::floor((hi_x - x0) / grid.cell_x())) + 1);
  const auto j0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor((lo_y - y0) / grid.cell_y())) - 1);
  const auto j1 = std::min<int64_t>(grid.y_cells - 1, static_cast<int64_t>(std::floor((hi_y - y0) / grid.cell_y())) + 1);
  for (int64_t i = i0; i <= i1; ++i) {
    for (int64_t j = j0; j <= j1; ++j) {
      const auto c = grid.cell_center(i, j);
      if (box.contains(c.x(), c.y())) acc[i][j] = true;
    }
  }
  return mask;
}

torch::Tensor rasterize_polygons(const std::vector<Polygon>& polygons,
                                 const geometry::BevGrid& grid) {
  auto mask = torch::zeros({grid.x_cells, grid.y_cells}, torch::kBool);
  auto acc = mask.accessor<bool, 2>();
  const double x0 = -grid.x_extent / 2;
  const double y0 = -grid.y_extent / 2;
  for (const auto& poly : polygons) {
    if (poly.size() < 3) continue;
    double lo_x = std::numeric_limits<double>::infinity(), hi_x = -lo_x;
    double lo_y = lo_x, hi_y = -lo_x;
    for (const auto& p : poly) {
      lo_x = std::min(lo_x, p.x());
      hi_x = std::max(hi_x, p.x());
      lo_y = std::min(lo_y, p.y());
      hi_y = std::max(hi_y, p.y());
    }
    const auto i0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor((lo_x - x0) / grid.cell_x())) - 1);
    const auto i1 = std::min<int64_t>(grid.x_cells - 1, static_cast<int64_t>(std::floor((hi_x - x0) / grid.cell_x())) + 1);
    const auto j0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor((lo_y - y0) / grid.cell_y())) - 1);
    const auto j1 = std::min<int64_t>(grid.y_cells - 1, static_cast<int64_t>(std::floor((hi_y - y0) / grid.cell_y())) + 1);
    for (int64_t i = i0; i <= i1; ++i) {
      for (int64_t j = j0; j <= j1; ++j) {
        if (acc[i][j]) continue;
        const auto c = grid.cell_center(i, j);
        if (point_in_polygon(poly, c.x(), c.y())) acc[i][j] = true;
      }
    }
  }
  return mask;
}

namespace {

struct Rgb {
  double r = 0, g = 0, b = 0;
};

constexpr Rgb kGrass{0.30, 0.45, 0.25};
constexpr Rgb kClassColor[segmentation::kMapClasses] = {
    {0.36, 0.36, 0.38},  // drivable area
    {0.30, 0.33, 0.45},  // car park
    {0.88, 0.88, 0.84},  // pedestrian crossing
    {0.68, 0.62, 0.52},  // walkway
    {0.97, 0.97, 0.97},  // stop line
    {0.90, 0.78, 0.16},  // road divider
    {0.93, 0.93, 0.93},  // lane divider
};
// Later entries paint over earlier ones.
constexpr int kPaintOrder[segmentation::kMapClasses] = {
    kWalkway, kCarpark, kDrivable, kPedCrossing, kStopLine, kRoadDivider,
    kLaneDivider};

// Ground classes rasterised at fine resolution for per-pixel lookup.
class GroundRaster {
 public:
  GroundRaster(const SyntheticScene& scene, double resolution)
      : scene_(scene), res_(resolution) {
    half_x_ = scene.grid.x_extent / 2 + 10.0;
    half_y_ = scene.grid.y_extent / 2 + 10.0;
    nx_ = static_cast<int64_t>(std::ceil(2 * half_x_ / res_));
    ny_ = static_cast<int64_t>(std::ceil(2 * half_y_ / res_));
    labels_.assign(static_cast<size_t>(nx_ * ny_), -1);
    for (int cls : kPaintOrder) {
      for (const auto& poly : scene.map[cls]) paint(poly, cls);
    }
  }

  int label(double x, double y) const {
    const auto i = static_cast<int64_t>(std::floor((x + half_x_) / res_));
    const auto j = static_cast<int64_t>(std::floor((y + half_y_) / res_));
    if (i >= 0 && i < nx_ && j >= 0 && j < ny_) return labels_[i * ny_ + j];
    int out = -1;
    for (int cls : kPaintOrder) {
      for (const auto& poly : scene_.map[cls]) {
        if (point_in_polygon(poly, x, y)) out = cls;
      }
    }
    return out;
  }

 private:
  void paint(const Polygon& poly, int cls) {
    double lo_x = std::numeric_limits<double>::infinity(), hi_x = -lo_x;
    double lo_y = lo_x, hi_y = -lo_x;
    for (const auto& p : poly) {
      lo_x = std::min(lo_x, p.x());
      hi_x = std::max(hi_x, p.x());
      lo_y = std::min(lo_y, p.y());
      hi_y = std::max(hi_y, p.y());
    }
    const auto i0 = std::max<int64_t>(0, static_cast<int64_t>((lo_x + half_x_) / res_) - 1);
    const auto i1 = std::min<int64_t>(nx_ - 1, static_cast<int64_t>((hi_x + half_x_) / res_) + 1);
    const auto j0 = std::max<int64_t>(0, static_cast<int64_t>((lo_y + half_y_) / res_) - 1);
    const auto j1 = std::min<int64_t>(ny_ - 1, static_cast<int64_t>((hi_y + half_y_) / res_) + 1);
    for (int64_t i = i0; i <= i1; ++i) {
      const double x = -half_x_ + (i + 0.5) * res_;
      for (int64_t j = j0; j <= j1; ++j) {
        const double y = -half_y_ + (j + 0.5) * res_;
        if (point_in_polygon(poly, x, y)) labels_[i * ny_ + j] = static_cast<int8_t>(cls);
      }
    }
  }

  const SyntheticScene& scene_;
  double res_;
  double half_x_ = 0, half_y_ = 0;
  int64_t nx_ = 0, ny_ = 0;
  std::vector<int8_t> labels_;
};

// Ray / oriented box intersection. Returns entry distance and world normal.
bool intersect_box(const VehicleBox& box, const Vector3d& origin,
                   const Vector3d& dir, double& t_hit, Vector3d& normal) {
  const Vector2d o2 = rotate(origin.head<2>() - box.center, -box.yaw);
  const Vector2d d2 = rotate(dir.head<2>(), -box.yaw);
  const double o[3] = {o2.x(), o2.y(), origin.z()};
  const double d[3] = {d2.x(), d2.y(), dir.z()};
  const double lo[3] = {-box.length / 2, -box.width / 2, 0.0};
  const double hi[3] = {box.length / 2, box.width / 2, box.height};
  double t0 = -std::numeric_limits<double>::infinity();
  double t1 = std::numeric_limits<double>::infinity();
  int axis = -1;
  double sign = 0.0;
  for (int a = 0; a < 3; ++a) {
    if (std::fabs(d[a]) < 1e-12) {
      if (o[a] < lo[a] || o[a] > hi[a]) return false;
      continue;
    }
    double ta = (lo[a] - o[a]) / d[a];
    double tb = (hi[a] - o[a]) / d[a];
    double s = -1.0;
    if (ta > tb) {
      std::swap(ta, tb);
      s = 1.0;
    }
    if (ta > t0) {
      t0 = ta;
      axis = a;
      sign = s;
    }
    t1 = std::min(t1, tb);
    if (t0 > t1) return false;
  }
  if (axis < 0 || t0 <= 1e-6) return false;
  Vector3d local = Vector3d::Zero();
  local[axis] = sign;
  const Vector2d n2 = rotate(local.head<2>(), box.yaw);
  normal = {n2.x(), n2.y(), local.z()};
  t_hit = t0;
  return true;
}

struct ConditionLook {
  double gain;
  double haze;
  double noise;
};

ConditionLook look_of(Condition c) {
  switch (c) {
    case Condition::kDay:
      return {1.0, 0.0, 0.015};
    case Condition::kRain:
      return {0.75, 0.2, 0.05};
    case Condition::kNight:
      return {0.05, 0.0, 0.02};
  }
  return {1.0, 0.0, 0.015};
}

void render_camera(const SyntheticScene& scene, const GroundRaster& ground,
                   size_t cam, torch::TensorAccessor<uint8_t, 3> out) {
  const auto& camera = scene.rig[cam];
  const Eigen::Matrix3d k_inv = camera.intrinsics.inverse();
  const Eigen::Matrix3d r_t = camera.rotation.transpose();
  const Vector3d origin = camera.center();
  const Vector3d light = Vector3d(0.4, 0.3, 0.85).normalized();
  const ConditionLook look = look_of(scene.condition);
  Rng noise(derive_seed(scene.seed, 1000 + cam));

  for (int64_t r = 0; r < camera.height; ++r) {
    for (int64_t c = 0; c < camera.width; ++c) {
      const Vector3d dir =
          (r_t * (k_inv * Vector3d(c + 0.5, r + 0.5, 1.0))).normalized();
      double best = std::numeric_limits<double>::infinity();
      // Sky gradient by elevation.
      const double elev = std::clamp(dir.z(), 0.0, 1.0);
      Rgb color{0.60 + 0.1 * elev, 0.72 + 0.1 * elev, 0.90};
      if (dir.z() < -1e-9) {
        const double t = -origin.z() / dir.z();
        if (t < 400.0) {
          best = t;
          const Vector3d p = origin + t * dir;
          const int cls = ground.label(p.x(), p.y());
          color = cls < 0 ? kGrass : kClassColor[cls];
        }
      }
      for (const auto& box : scene.vehicles) {
        double t = 0.0;
        Vector3d n;
        if (intersect_box(box, origin, dir, t, n) && t < best) {
          best = t;
          const double shade = 0.45 + 0.55 * std::max(0.0, n.dot(light));
          color = {box.color[0] / 255.0 * shade, box.color[1] / 255.0 * shade,
                   box.color[2] / 255.0 * shade};
        }
      }
      const double rgb[3] = {color.r, color.g, color.b};
      for (int ch = 0; ch < 3; ++ch) {
        double v = look.gain * ((1.0 - look.haze) * rgb[ch] + look.haze * 0.6);
        v += noise.normal(look.noise);
        out[ch][r][c] = static_cast<uint8_t>(
            std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
      }
    }
  }
}

void sample_radar(const SyntheticScene& scene, Sample& sample) {
  Rng rng(derive_seed(scene.seed, 3));
  const Vector2d radar_xy(0.0, 0.0);
  sample.radar.points.clear();
  sample.radar.sweep_count = 5;
  sample.radar_source.clear();
  for (size_t k = 0; k < scene.vehicles.size(); ++k) {
    const auto& box = scene.vehicles[k];
    const int count = rng.uniform_int(kMinRadarPerVehicle, kMaxRadarPerVehicle);
    // Side faces: local outward normal, centre and half length along face.
    struct Face {
      Vector2d normal, center, along;
      double half;
    };
    std::vector<Face> faces;
    std::vector<double> weights;
    const double hl = box.length / 2;
    const double hw = box.width / 2;
    const std::array<std::tuple<Vector2d, Vector2d, Vector2d, double>, 4> locals = {{
        {{1, 0}, {hl, 0}, {0, 1}, hw},
        {{-1, 0}, {-hl, 0}, {0, 1}, hw},
        {{0, 1}, {0, hw}, {1, 0}, hl},
        {{0, -1}, {0, -hw}, {1, 0}, hl},
    }};
    for (const auto& [n, c, a, h] : locals) {
      Face f{rotate(n, box.yaw), box.center + rotate(c, box.yaw),
             rotate(a, box.yaw), h};
      const double facing = f.normal.dot((radar_xy - f.center).normalized());
      if (facing > 0.0) {
        faces.push_back(f);
        weights.push_back(2 * h * facing);
      }
    }
    std::discrete_distribution<int> pick(weights.begin(), weights.end());
    const double z_top = std::min(box.height, 2.0);
    for (int i = 0; i < count; ++i) {
      const Face& f = faces[pick(rng.engine())];
      const Vector2d on_face = f.center + rng.uniform(-f.half, f.half) * f.along;
      const double z = rng.uniform(0.2, z_top);
      Vector3d noise;
      do {
        noise = {rng.normal(kRadarNoiseSigma), rng.normal(kRadarNoiseSigma),
                 rng.normal(kRadarNoiseSigma)};
      } while (noise.norm() > 3 * kRadarNoiseSigma);
      radar::RadarPoint p;
      p.x = on_face.x() + noise.x();
      p.y = on_face.y() + noise.y();
      p.z = z + noise.z();
      p.vx = box.velocity.x() + rng.normal(kRadarVelocityNoise);
      p.vy = box.velocity.y() + rng.normal(kRadarVelocityNoise);
      p.rcs = box.rcs;
      sample.radar.points.push_back(p);
      sample.radar_source.push_back(static_cast<int32_t>(k));
    }
  }
}

}  // namespace

Sample render_sample(const SyntheticScene& scene, const std::string& token) {
  scene.grid.validate();
  scene.rig.validate();
  if (scene.rig.size() == 0) throw ConfigError("render: rig has no cameras");
  const int64_t h = scene.rig[0].height;
  const int64_t w = scene.rig[0].width;
  for (const auto& cam : scene.rig.cameras) {
    if (cam.height != h || cam.width != w) {
      throw ConfigError("render: all cameras must share one image size");
    }
  }
  Sample sample;
  sample.token = token;
  sample.rig = scene.rig;
  sample.grid = scene.grid;
  sample.condition = scene.condition;
  sample.seed = scene.seed;

  const int64_t n = static_cast<int64_t>(scene.rig.size());
  sample.images = torch::empty({n, 3, h, w}, torch::kUInt8);
  const GroundRaster ground(scene, 0.1);
  auto images = sample.images.accessor<uint8_t, 4>();
  for (int64_t cam = 0; cam < n; ++cam) {
    render_camera(scene, ground, static_cast<size_t>(cam), images[cam]);
  }

  sample_radar(scene, sample);

  auto gt = segmentation::BevGroundTruth::empty(scene.grid.x_cells,
                                                scene.grid.y_cells);
  for (const auto& box : scene.vehicles) {
    gt.vehicle |= rasterize_box(box, scene.grid);
  }
  for (int c = 0; c < segmentation::kMapClasses; ++c) {
    gt.map[c].copy_(rasterize_polygons(scene.map[c], scene.grid));
  }
  sample.gt = gt;
  return sample;
}

namespace {

void check_token(const std::string& token) {
  if (token.empty() || token.find('/') != std::string::npos ||
      token.find('\\') != std::string::npos || token == "." || token == "..") {
    throw DataError("invalid sample token '" + token + "'");
  }
}

std::string camera_file(const std::string& name) {
  return "cam_" + name + ".png";
}

std::string map_file(int64_t cls) {
  return "gt_map_" + std::string(segmentation::kClassNames[cls + 1]) + ".png";
}

// X x Y bool mask <-> image with forward up and left on the left.
void write_bev_mask(const fs::path& path, const torch::Tensor& mask) {
  const auto m = mask.to(torch::kBool).contiguous();
  const int64_t x = m.size(0);
  const int64_t y = m.size(1);
  auto acc = m.accessor<bool, 2>();
  std::vector<uint8_t> pixels(static_cast<size_t>(x * y));
  for (int64_t i = 0; i < x; ++i) {
    for (int64_t j = 0; j < y; ++j) {
      pixels[(x - 1 - i) * y + (y - 1 - j)] = acc[i][j] ? 1 : 0;
    }
  }
  png::write_mask(path.string(), x, y, pixels);
}

torch::Tensor read_bev_mask(const fs::path& path, const geometry::BevGrid& grid) {
  if (!fs::exists(path)) {
    throw DataError("missing file '" + path.filename().string() + "' (" +
                    path.string() + ")");
  }
  const auto image = png::read(path.string());
  if (image.channels != 1 || image.height != grid.x_cells ||
      image.width != grid.y_cells) {
    throw DataError("'" + path.filename().string() + "': expected a " +
                    std::to_string(grid.x_cells) + "x" +
                    std::to_string(grid.y_cells) + " grayscale mask (" +
                    path.string() + ")");
  }
  const int64_t x = grid.x_cells;
  const int64_t y = grid.y_cells;
  auto mask = torch::zeros({x, y}, torch::kBool);
  auto acc = mask.accessor<bool, 2>();
  for (int64_t i = 0; i < x; ++i) {
    for (int64_t j = 0; j < y; ++j) {
      acc[i][j] = image.pixels[(x - 1 - i) * y + (y - 1 - j)] >= 128;
    }
  }
  return mask;
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw DataError("missing file '" + path.filename().string() + "' (" +
                    path.string() + ")");
  }
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("'" + path.filename().string() + "': malformed JSON: " +
                    e.what());
  }
}

template <typename T>
T json_field(const nlohmann::json& j, const char* key, const std::string& file) {
  if (!j.is_object() || !j.contains(key)) {
    throw DataError("'" + file + "': missing field '" + key + "'");
  }
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw DataError("'" + file + "': field '" + key + "' has the wrong type");
  }
}

nlohmann::json grid_json(const geometry::BevGrid& g) {
  return {{"x_cells", g.x_cells}, {"y_cells", g.y_cells},
          {"z_cells", g.z_cells}, {"x_extent", g.x_extent},
          {"y_extent", g.y_extent}, {"z_min", g.z_min},
          {"z_max", g.z_max}};
}

geometry::BevGrid grid_from_json(const nlohmann::json& j, const std::string& file) {
  geometry::BevGrid g;
  g.x_cells = json_field<int64_t>(j, "x_cells", file);
  g.y_cells = json_field<int64_t>(j, "y_cells", file);
  g.z_cells = json_field<int64_t>(j, "z_cells", file);
  g.x_extent = json_field<double>(j, "x_extent", file);
  g.y_extent = json_field<double>(j, "y_extent", file);
  g.z_min = json_field<double>(j, "z_min", file);
  g.z_max = json_field<double>(j, "z_max", file);
  try {
    g.validate();
  } catch (const ConfigError& e) {
    throw DataError("'" + file + "': " + e.what());
  }
  return g;
}

nlohmann::json calib_json(const geometry::CameraRig& rig) {
  nlohmann::json cams = nlohmann::json::array();
  for (const auto& cam : rig.cameras) {
    std::vector<double> k, r;
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) {
        k.push_back(cam.intrinsics(i, j));
        r.push_back(cam.rotation(i, j));
      }
    }
    cams.push_back({{"name", cam.name},
                    {"K", k},
                    {"R", r},
                    {"t", {cam.translation.x(), cam.translation.y(),
                           cam.translation.z()}},
                    {"H", cam.height},
                    {"W", cam.width}});
  }
  return cams;
}

geometry::CameraRig rig_from_json(const nlohmann::json& j) {
  const std::string file = "calib.json";
  if (!j.is_array() || j.empty()) {
    throw DataError("'" + file + "': expected a non-empty list of cameras");
  }
  geometry::CameraRig rig;
  for (const auto& c : j) {
    geometry::CameraModel cam;
    cam.name = json_field<std::string>(c, "name", file);
    const auto k = json_field<std::vector<double>>(c, "K", file);
    const auto r = json_field<std::vector<double>>(c, "R", file);
    const auto t = json_field<std::vector<double>>(c, "t", file);
    if (k.size() != 9 || r.size() != 9 || t.size() != 3) {
      throw DataError("'" + file + "': camera '" + cam.name +
                      "' needs 9 K, 9 R and 3 t values");
    }
    for (int i = 0; i < 3; ++i) {
      for (int jj = 0; jj < 3; ++jj) {
        cam.intrinsics(i, jj) = k[i * 3 + jj];
        cam.rotation(i, jj) = r[i * 3 + jj];
      }
    }
    cam.translation = {t[0], t[1], t[2]};
    cam.height = json_field<int64_t>(c, "H", file);
    cam.width = json_field<int64_t>(c, "W", file);
    rig.cameras.push_back(cam);
  }
  try {
    rig.validate();
  } catch (const ConfigError& e) {
    throw DataError("'" + file + "': " + e.what());
  }
  return rig;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw DataError("failed writing '" + path.string() + "'");
}

constexpr const char* kRadarHeader = "x,y,z,vx,vy,rcs";

std::string radar_csv(const radar::RadarPointCloud& cloud) {
  std::string out = std::string(kRadarHeader) + "\n";
  char line[256];
  for (const auto& p : cloud.points) {
    std::snprintf(line, sizeof(line), "%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                  p.x, p.y, p.z, p.vx, p.vy, p.rcs);
    out += line;
  }
  return out;
}

radar::RadarPointCloud parse_radar_csv(const fs::path& path, int64_t sweeps) {
  std::ifstream in(path);
  if (!in) {
    throw DataError("missing file 'radar.csv' (" + path.string() + ")");
  }
  std::string line;
  if (!std::getline(in, line)) {
    throw DataError("'radar.csv': empty file, expected header x,y,z,vx,vy,rcs");
  }
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kRadarHeader) {
    throw DataError("'radar.csv': schema error, header '" + line +
                    "' does not match 'x,y,z,vx,vy,rcs'");
  }
  radar::RadarPointCloud cloud;
  cloud.sweep_count = sweeps;
  size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    double v[radar::kAttributes];
    const char* cursor = line.c_str();
    for (int a = 0; a < radar::kAttributes; ++a) {
      char* end = nullptr;
      v[a] = std::strtod(cursor, &end);
      const char expected = a + 1 < radar::kAttributes ? ',' : '\0';
      if (end == cursor || *end != expected) {
        throw DataError("'radar.csv': malformed row at line " +
                        std::to_string(line_no));
      }
      cursor = end + (expected == ',' ? 1 : 0);
    }
    cloud.points.push_back({v[0], v[1], v[2], v[3], v[4], v[5]});
  }
  try {
    cloud.validate();
  } catch (const ConfigError& e) {
    throw DataError(std::string("'radar.csv': ") + e.what());
  }
  return cloud;
}

}  // namespace

void save_sample(const std::string& root, const Sample& sample) {
  check_token(sample.token);
  const fs::path dir = fs::path(root) / sample.token;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create '" + dir.string() + "': " + ec.message());

  const auto images = sample.images.to(torch::kUInt8).contiguous();
  if (images.dim() != 4 || images.size(0) != static_cast<int64_t>(sample.rig.size()) ||
      images.size(1) != 3) {
    throw ConfigError("save_sample: images must be N x 3 x H x W uint8");
  }
  auto acc = images.accessor<uint8_t, 4>();
  for (size_t cam = 0; cam < sample.rig.size(); ++cam) {
    png::Image img;
    img.height = images.size(2);
    img.width = images.size(3);
    img.channels = 3;
    img.pixels.resize(static_cast<size_t>(img.height * img.width * 3));
    for (int64_t r = 0; r < img.height; ++r) {
      for (int64_t c = 0; c < img.width; ++c) {
        for (int ch = 0; ch < 3; ++ch) {
          img.pixels[(r * img.width + c) * 3 + ch] = acc[cam][ch][r][c];
        }
      }
    }
    png::write((dir / camera_file(sample.rig[cam].name)).string(), img);
  }
  write_text(dir / "radar.csv", radar_csv(sample.radar));
  write_text(dir / "calib.json", calib_json(sample.rig).dump(2) + "\n");
  sample.gt.validate();
  write_bev_mask(dir / "gt_vehicle.png", sample.gt.vehicle);
  for (int64_t c = 0; c < segmentation::kMapClasses; ++c) {
    write_bev_mask(dir / map_file(c), sample.gt.map[c]);
  }
  if (!sample.gt.valid.all().item<bool>()) {
    write_bev_mask(dir / "gt_valid.png", sample.gt.valid);
  } else {
    fs::remove(dir / "gt_valid.png", ec);
  }
  nlohmann::json meta = {{"token", sample.token},
                         {"condition", metrics::to_string(sample.condition)},
                         {"seed", sample.seed},
                         {"sweep_count", sample.radar.sweep_count},
                         {"grid", grid_json(sample.grid)}};
  write_text(dir / "meta.json", meta.dump(2) + "\n");
}

Sample load_sample(const std::string& root, const std::string& token) {
  check_token(token);
  const fs::path dir = fs::path(root) / token;
  if (!fs::is_directory(dir)) {
    throw DataError("sample directory '" + dir.string() + "' does not exist");
  }
  Sample sample;
  sample.token = token;

  const auto meta = read_json(dir / "meta.json");
  const std::string mf = "meta.json";
  if (json_field<std::string>(meta, "token", mf) != token) {
    throw DataError("'meta.json': token does not match directory '" + token + "'");
  }
  try {
    sample.condition =
        metrics::parse_condition(json_field<std::string>(meta, "condition", mf));
  } catch (const ConfigError& e) {
    throw DataError(std::string("'meta.json': ") + e.what());
  }
  sample.seed = json_field<uint64_t>(meta, "seed", mf);
  const auto sweeps = json_field<int64_t>(meta, "sweep_count", mf);
  if (!meta.contains("grid")) throw DataError("'meta.json': missing field 'grid'");
  sample.grid = grid_from_json(meta["grid"], mf);

  sample.rig = rig_from_json(read_json(dir / "calib.json"));
  const int64_t n = static_cast<int64_t>(sample.rig.size());
  const int64_t h = sample.rig[0].height;
  const int64_t w = sample.rig[0].width;
  sample.images = torch::empty({n, 3, h, w}, torch::kUInt8);
  auto acc = sample.images.accessor<uint8_t, 4>();
  for (int64_t cam = 0; cam < n; ++cam) {
    const std::string name = camera_file(sample.rig[cam].name);
    const fs::path path = dir / name;
    if (!fs::exists(path)) {
      throw DataError("missing file '" + name + "' (" + path.string() + ")");
    }
    const auto img = png::read(path.string());
    if (img.channels != 3 || img.height != sample.rig[cam].height ||
        img.width != sample.rig[cam].width || img.height != h || img.width != w) {
      throw DataError("'" + name + "': expected a " + std::to_string(h) + "x" +
                      std::to_string(w) + " RGB image");
    }
    for (int64_t r = 0; r < h; ++r) {
      for (int64_t c = 0; c < w; ++c) {
        for (int ch = 0; ch < 3; ++ch) {
          acc[cam][ch][r][c] = img.pixels[(r * w + c) * 3 + ch];
        }
      }
    }
  }

  sample.radar = parse_radar_csv(dir / "radar.csv", sweeps);

  auto gt = segmentation::BevGroundTruth::empty(sample.grid.x_cells,
                                                sample.grid.y_cells);
  gt.vehicle = read_bev_mask(dir / "gt_vehicle.png", sample.grid);
  for (int64_t c = 0; c < segmentation::kMapClasses; ++c) {
    gt.map[c].copy_(read_bev_mask(dir / map_file(c), sample.grid));
  }
  if (fs::exists(dir / "gt_valid.png")) {
    gt.valid = read_bev_mask(dir / "gt_valid.png", sample.grid);
  }
  sample.gt = gt;
  return sample;
}

std::vector<std::string> list_tokens(const std::string& root) {
  if (!fs::is_directory(root)) {
    throw DataError("dataset directory '" + root + "' does not exist");
  }
  std::vector<std::string> tokens;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory() && fs::exists(entry.path() / "meta.json")) {
      tokens.push_back(entry.path().filename().string());
    }
  }
  std::sort(tokens.begin(), tokens.end());
  return tokens;
}

metrics::ConditionSplit load_split(const std::string& path) {
  const fs::path p(path);
  const auto j = read_json(p);
  const std::string file = p.filename().string();
  if (!j.is_object()) {
    throw DataError("'" + file + "': expected an object with day/rain/night lists");
  }
  metrics::ConditionSplit split;
  for (const auto& [key, value] : j.items()) {
    metrics::Condition cond;
    try {
      cond = metrics::parse_condition(key);
    } catch (const ConfigError&) {
      throw DataError("'" + file + "': unknown condition '" + key + "'");
    }
    if (!value.is_array()) {
      throw DataError("'" + file + "': '" + key + "' must be a list of tokens");
    }
    for (const auto& t : value) {
      if (!t.is_string()) {
        throw DataError("'" + file + "': tokens must be strings");
      }
      const auto token = t.get<std::string>();
      auto [it, inserted] = split.condition_of.emplace(token, cond);
      if (!inserted) {
        throw DataError("'" + file + "': token '" + token +
                        "' is listed under both '" +
                        metrics::to_string(it->second) + "' and '" + key + "'");
      }
    }
  }
  return split;
}

void save_split(const std::string& path, const metrics::ConditionSplit& split) {
  write_text(path, split.to_json().dump(2) + "\n");
}

std::vector<std::string> generate_dataset(const std::string& root,
                                          const DatasetOptions& options) {
  if (options.num_samples < 0) throw ConfigError("gen-data: negative sample count");
  if (options.scene.conditions.empty()) {
    throw ConfigError("gen-data: at least one condition is required");
  }
  std::vector<std::string> tokens(static_cast<size_t>(options.num_samples));
  std::vector<Condition> conditions(tokens.size());
  for (size_t i = 0; i < tokens.size(); ++i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "s%06zu", i);
    tokens[i] = buf;
    conditions[i] = options.scene.conditions[i % options.scene.conditions.size()];
  }
  std::atomic<size_t> next{0};
  std::mutex error_mutex;
  std::exception_ptr error;
  auto work = [&] {
    for (size_t i = next++; i < tokens.size(); i = next++) {
      try {
        SceneOptions so = options.scene;
        so.condition = conditions[i];
        const auto scene = generate_scene(derive_seed(options.seed, i), so);
        save_sample(root, render_sample(scene, tokens[i]));
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
        next = tokens.size();
      }
    }
  };
  const int threads =
      options.threads > 0
          ? options.threads
          : std::max(1, static_cast<int>(std::thread::hardware_concurrency()));
  std::vector<std::thread> pool;
  for (int t = 1; t < threads; ++t) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);

  metrics::ConditionSplit split;
  for (size_t i = 0; i < tokens.size(); ++i) {
    split.condition_of[tokens[i]] = conditions[i];
  }
  save_split((fs::path(root) / "split.json").string(), split);
  return tokens;
}

SampleLoader::SampleLoader(std::string root, std::vector<std::string> tokens,
                           int prefetch, bool deterministic_order, int threads)
    : root_(std::move(root)),
      tokens_(std::move(tokens)),
      prefetch_(static_cast<size_t>(std::max(1, prefetch))),
      deterministic_(deterministic_order) {
  for (int t = 0; t < std::max(1, threads); ++t) {
    threads_.emplace_back([this] { worker(); });
  }
}

SampleLoader::~SampleLoader() {
  {
    std::lock_guard<std::mutex> lock(mutex_);
    stop_ = true;
  }
  cv_.notify_all();
  for (auto& t : threads_) t.join();
}

void SampleLoader::worker() {
  while (true) {
    size_t index = 0;
    {
      std::unique_lock<std::mutex> lock(mutex_);
      cv_.wait(lock, [&] {
        return stop_ || error_ || next_to_load_ >= tokens_.size() ||
               next_to_load_ < delivered_ + prefetch_;
      });
      if (stop_ || error_ || next_to_load_ >= tokens_.size()) return;
      index = next_to_load_++;
    }
    try {
      Sample s = load_sample(root_, tokens_[index]);
      std::lock_guard<std::mutex> lock(mutex_);
      ready_.emplace(index, std::move(s));
    } catch (...) {
      std::lock_guard<std::mutex> lock(mutex_);
      if (!error_) error_ = std::current_exception();
    }
    cv_.notify_all();
  }
}

std::optional<Sample> SampleLoader::next() {
  std::unique_lock<std::mutex> lock(mutex_);
  if (delivered_ >= tokens_.size()) return std::nullopt;
  cv_.wait(lock, [&] {
    return error_ || (deterministic_ ? ready_.count(delivered_) > 0 : !ready_.empty());
  });
  if (error_) std::rethrow_exception(error_);
  auto it = deterministic_ ? ready_.find(delivered_) : ready_.begin();
  Sample s = std::move(it->second);
  ready_.erase(it);
  ++delivered_;
  lock.unlock();
  cv_.notify_all();
  return s;
}

}  // namespace bevcar::data
