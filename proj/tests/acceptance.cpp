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
// Acceptance suite. Prints one PASS/FAIL line per criterion and exits
// nonzero if any criterion fails. `--only N` runs a single criterion.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <torch/torch.h>

#include "CLI11.hpp"
#include "bevcar/attention.hpp"
#include "bevcar/config.hpp"
#include "bevcar/data.hpp"
#include "bevcar/fusion.hpp"
#include "bevcar/geometry.hpp"
#include "bevcar/lifting.hpp"
#include "bevcar/metrics.hpp"
#include "bevcar/model.hpp"
#include "bevcar/radar.hpp"
#include "bevcar/segmentation.hpp"
#include "bevcar/trainer.hpp"
#include "test_util.hpp"

namespace bevcar::acceptance {
namespace {

namespace fs = std::filesystem;

// Tolerances and budgets.
constexpr double kLossTolerance = 1e-6;
constexpr double kGradientTolerance = 1e-4;
constexpr int kGradientDraws = 10;
constexpr double kRoundTripTolerance = 1e-6;
constexpr double kOverfitVehicle = 0.9;
constexpr double kOverfitDrivable = 0.8;
constexpr int64_t kOverfitSteps = 500;
constexpr double kRadarMargin = 0.10;
constexpr int64_t kNightSteps = 500;
constexpr int kNightTrain = 30;
constexpr int kNightTest = 10;
// Chebyshev distance in cells beyond which a cell outside every camera
// frustum lies outside the receptive field of all camera-fed cells.
constexpr int64_t kMaskingMargin = 32;

struct Outcome {
  bool pass = true;
  std::string detail;
  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + what;
    }
  }
  void note(const std::string& what) {
    detail += (detail.empty() ? "" : "; ") + what;
  }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

geometry::BevGrid toy_grid(int64_t cells, double extent, int64_t z, double z_max) {
  geometry::BevGrid g;
  g.x_cells = cells;
  g.y_cells = cells;
  g.z_cells = z;
  g.x_extent = extent;
  g.y_extent = extent;
  g.z_min = 0.0;
  g.z_max = z_max;
  return g;
}

radar::RadarPointCloud random_cloud(std::mt19937_64& rng, int n, double extent,
                                    double z_max) {
  std::uniform_real_distribution<double> xy(-0.5 * extent, 0.5 * extent);
  std::uniform_real_distribution<double> z(0.0, z_max);
  std::normal_distribution<double> vel(0.0, 3.0);
  std::uniform_real_distribution<double> rcs(-10.0, 20.0);
  radar::RadarPointCloud c;
  for (int i = 0; i < n; ++i) {
    c.points.push_back({xy(rng), xy(rng), z(rng), vel(rng), vel(rng), rcs(rng)});
  }
  return c;
}

backbone::FeaturePyramid random_pyramid(int64_t images, int64_t channels, int64_t h,
                                        int64_t w) {
  backbone::FeaturePyramid p;
  for (size_t l = 0; l < p.size(); ++l) {
    const auto s = backbone::kPyramidStrides[l];
    p[l] = torch::randn({images, channels, h / s, w / s}, torch::kFloat64);
  }
  return p;
}

data::SceneOptions scene_options(const config::ModelConfig& m) {
  data::SceneOptions so;
  so.grid = m.grid;
  so.rig.height = m.image_height;
  so.rig.width = m.image_width;
  return so;
}

std::vector<data::Sample> render_set(const data::SceneOptions& so, uint64_t seed, int count,
                                     const std::string& prefix) {
  std::vector<data::Sample> out;
  for (int i = 0; i < count; ++i) {
    out.push_back(data::render_sample(data::generate_scene(data::derive_seed(seed, i), so),
                                      prefix + std::to_string(i)));
  }
  return out;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// 1. Loss formula oracles.
Outcome loss_oracles() {
  Outcome o;
  segmentation::LossConfig cfg;
  cfg.gamma = 0.0;
  cfg.alpha = 0.5;
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    torch::manual_seed(trial);
    auto logits = torch::randn({7, 6, 5}, torch::kFloat64) * 4;
    auto gt = torch::rand({7, 6, 5}) > 0.5;
    auto valid = torch::ones({6, 5}, torch::kBool);
    double bce_sum = 0.0;
    for (int64_t c = 0; c < 7; ++c) {
      bce_sum += segmentation::bce_loss(logits[c], gt[c], valid).value.item<double>();
    }
    const double focal = segmentation::focal_loss(logits, gt, valid, cfg).value.item<double>();
    worst = std::max(worst, std::abs(focal - 0.5 * bce_sum));
  }
  o.require(worst <= kLossTolerance, "focal vs half summed BCE off by " + fmt("%.3g", worst));
  o.note("100 grids, max gap " + fmt("%.2g", worst));

  const auto one = torch::ones({1, 1}, torch::kBool);
  const double focal_px = segmentation::focal_loss(torch::zeros({1, 1, 1}, torch::kFloat64),
                                                   torch::ones({1, 1, 1}, torch::kBool), one,
                                                   segmentation::LossConfig{})
                              .value.item<double>();
  o.require(std::abs(focal_px - 0.021661) <= kLossTolerance,
            "focal single pixel " + fmt("%.7f", focal_px));
  const double bce_px = segmentation::bce_loss(torch::zeros({1, 1}, torch::kFloat64),
                                               torch::zeros({1, 1}, torch::kBool), one)
                            .value.item<double>();
  o.require(std::abs(bce_px - 0.693147) <= kLossTolerance, "uniform BCE " + fmt("%.7f", bce_px));
  o.note("focal " + fmt("%.6f", focal_px) + ", BCE " + fmt("%.6f", bce_px));
  return o;
}

// 2. Gradient suite.
Outcome gradient_suite() {
  Outcome o;
  std::map<std::string, double> worst;
  auto record = [&](const std::string& name, double rel) {
    worst[name] = std::max(worst[name], rel);
  };

  for (int draw = 0; draw < kGradientDraws; ++draw) {
    torch::manual_seed(1000 + draw);
    // Deformable attention on a 4 x 4 plane, two heads, two points.
    attention::DeformableAttention attn(attention::DeformableAttentionOptions{
        .channels = 4, .heads = 2, .points = 2, .levels = 1, .anchors = 1});
    attn->to(torch::kFloat64);
    testing::randomize(*attn, 0.6);
    auto queries = torch::randn({16, 4}, torch::kFloat64).requires_grad_();
    auto values = attention::ValueMaps::from_batch(torch::randn({1, 4, 4, 4}, torch::kFloat64));
    auto flat = values.flat.contiguous().clone().requires_grad_();
    const auto refs = attention::ReferencePoints::bev_plane(1, 4, 4);
    const auto w = torch::randn({16, 4}, torch::kFloat64);
    auto attn_loss = [&] {
      attention::ValueMaps v{flat, values.shapes, values.starts};
      return (attn->forward(queries, refs, v) * w).sum();
    };
    auto wrt = testing::params_of(*attn);
    wrt.push_back(queries);
    wrt.push_back(flat);
    record("attention", testing::check_gradients(attn_loss, wrt, draw, 16).relative_error);

    // Radar point encoder through pooling and height compression.
    const auto g = toy_grid(4, 4.0, 2, 2.0);
    radar::RadarEncoder enc(radar::RadarEncoderOptions{.channels = 4, .grid = g});
    enc->to(torch::kFloat64);
    testing::randomize(*enc->point_encoder, 0.8);
    std::mt19937_64 rng(static_cast<uint64_t>(draw));
    const auto vox = radar::voxelize_radar(random_cloud(rng, 6, 4.0, 2.0), g, 10, 0);
    const auto rw = torch::randn({1, 4, 4, 4}, torch::kFloat64);
    auto radar_loss = [&] { return (enc->forward({&vox}) * rw).sum(); };
    record("point encoder",
           testing::check_gradients(radar_loss, testing::params_of(*enc->point_encoder), draw)
               .relative_error);

    // One lifting block on a 4 x 4 x 2 grid seen by one camera.
    const auto lg = toy_grid(4, 20.0, 2, 2.0);
    geometry::CameraRig rig;
    rig.cameras.push_back(testing::make_camera("front", 0.0, 90.0, 32, 64));
    const auto asg = geometry::assign_cameras(lg, rig);
    const auto lrefs = lifting::lifting_references({&asg}, rig, 4);
    lifting::LiftingOptions lo;
    lo.channels = 4;
    lo.heads = 2;
    lo.points = 2;
    lo.blocks = 1;
    lo.grid = lg;
    lifting::ViewLifter lifter(lo);
    lifter->to(torch::kFloat64);
    testing::randomize(lifter->block(0), 0.3);
    auto pyramid = random_pyramid(1, 4, 32, 64);
    for (auto& t : pyramid) t.requires_grad_(true);
    auto lq = torch::randn({1, 4, 4, 4}, torch::kFloat64).requires_grad_(true);
    const auto lw = torch::randn({1, 4, 4, 4}, torch::kFloat64);
    auto lift_loss = [&] {
      return (lifter->forward(lq, lrefs, lifting::pyramid_values(pyramid, 1)) * lw).sum();
    };
    auto lwrt = testing::params_of(*lifter);
    lwrt.push_back(lq);
    for (auto& t : pyramid) lwrt.push_back(t);
    record("lifting", testing::check_gradients(lift_loss, lwrt, draw, 12).relative_error);

    // One fusion block on a 4 x 4 plane.
    fusion::FusionOptions fo;
    fo.channels = 4;
    fo.heads = 2;
    fo.points = 2;
    fo.blocks = 1;
    fo.x_cells = 4;
    fo.y_cells = 4;
    fusion::BevFusion fus(fo);
    fus->to(torch::kFloat64);
    testing::randomize(fus->block(0), 0.3);
    auto f_rad = torch::randn({1, 4, 4, 4}, torch::kFloat64).requires_grad_(true);
    auto f_img = torch::randn({1, 4, 4, 4}, torch::kFloat64).requires_grad_(true);
    const auto fw = torch::randn({1, 4, 4, 4}, torch::kFloat64);
    auto fusion_loss = [&] { return (fus->forward(fus->compose(f_rad), f_img) * fw).sum(); };
    auto fwrt = testing::params_of(*fus);
    fwrt.push_back(f_rad);
    fwrt.push_back(f_img);
    record("fusion", testing::check_gradients(fusion_loss, fwrt, draw, 12).relative_error);

    // Both losses on 4 x 4 grids.
    auto logits = (torch::randn({8, 4, 4}, torch::kFloat64) * 3).requires_grad_(true);
    auto gt = torch::rand({8, 4, 4}) > 0.5;
    auto valid = torch::rand({4, 4}) > 0.2;
    valid[0][0] = true;
    auto bce = [&] { return segmentation::bce_loss(logits[0], gt[0], valid).value; };
    auto focal = [&] {
      return segmentation::focal_loss(logits.slice(0, 1), gt.slice(0, 1), valid,
                                      segmentation::LossConfig{})
          .value;
    };
    record("bce", testing::check_gradients(bce, {logits}, draw, 128).relative_error);
    record("focal", testing::check_gradients(focal, {logits}, draw, 128).relative_error);
  }
  for (const auto& [name, rel] : worst) {
    o.require(rel <= kGradientTolerance, name + " relative error " + fmt("%.3g", rel));
    o.note(name + " " + fmt("%.1e", rel));
  }
  o.note(std::to_string(kGradientDraws) + " draws each");
  return o;
}

// 3. Geometry suite.
Outcome geometry_suite() {
  Outcome o;
  {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> coord(-30.0, 30.0);
    const auto rig = geometry::make_surround_rig({});
    double worst = 0.0;
    int checked = 0;
    for (int n = 0; n < 2000; ++n) {
      const Eigen::Vector3d p(coord(rng), coord(rng), coord(rng) / 6.0);
      for (const auto& cam : rig.cameras) {
        const auto q = geometry::project_point(p, cam);
        if (!(q.depth > geometry::kMinDepth)) continue;
        worst = std::max(worst, (geometry::unproject(cam, q.u, q.v, q.depth) - p).norm());
        ++checked;
      }
    }
    o.require(worst <= kRoundTripTolerance, "round trip error " + fmt("%.3g", worst));
    o.require(checked > 1000, "too few projections");
    o.note("round trip " + fmt("%.1e", worst) + " m over " + std::to_string(checked));
  }
  {
    // Voxels whose centres share every (camera, pixel) slot share features.
    const auto grid = toy_grid(40, 40.0, 4, 5.0);
    const auto rig =
        geometry::make_surround_rig({.height = 64, .width = 128, .mount_height = 1.875});
    const auto a = geometry::assign_cameras(grid, rig);
    torch::manual_seed(1);
    const auto out = geometry::splat_image_features(torch::randn({6, 4, 8, 16}), rig, grid, a, 8);
    const auto flat = out.reshape({4, -1});
    std::map<std::vector<std::tuple<int32_t, double, double>>, int64_t> seen;
    int pairs = 0;
    bool exact = true;
    for (int64_t v = 0; v < grid.voxel_count(); ++v) {
      const auto& e = a.at(v);
      if (e.count == 0) continue;
      std::vector<std::tuple<int32_t, double, double>> key;
      for (int s = 0; s < e.count; ++s) key.emplace_back(e.slots[s].camera, e.slots[s].u, e.slots[s].v);
      auto [it, fresh] = seen.emplace(key, v);
      if (fresh) continue;
      ++pairs;
      exact = exact && torch::equal(flat.select(1, v), flat.select(1, it->second));
    }
    o.require(exact && pairs > 0, "ray invariance");
    o.note(std::to_string(pairs) + " ray-sharing voxel pairs identical");
  }
  {
    const auto grid = toy_grid(40, 40.0, 2, 2.0);
    geometry::CameraRig rig;
    rig.cameras = {testing::make_camera("left", 15, 60, 32, 64),
                   testing::make_camera("right", -15, 60, 32, 64)};
    const auto a = geometry::assign_cameras(grid, rig);
    const double va = 1.5;
    const double vb = 6.25;
    auto feats = torch::stack({torch::full({2, 4, 8}, va, torch::kFloat64),
                               torch::full({2, 4, 8}, vb, torch::kFloat64)});
    const auto out = geometry::splat_image_features(feats, rig, grid, a, 8).reshape({2, -1});
    int overlap = 0;
    bool exact = true;
    for (int64_t v = 0; v < grid.voxel_count(); ++v) {
      const auto cams = a.cameras_of(v);
      double expect = 0.0;
      if (cams.size() == 2) {
        expect = (va + vb) / 2.0;
        ++overlap;
      } else if (cams.size() == 1) {
        expect = cams[0] == 0 ? va : vb;
      }
      exact = exact && out[0][v].item<double>() == expect && out[1][v].item<double>() == expect;
    }
    o.require(exact && overlap > 0, "overlap averaging");
    o.note(std::to_string(overlap) + " overlap voxels averaged exactly");
  }
  {
    const geometry::BevGrid g;
    const auto c = geometry::voxel_centers(g).front();
    o.require(c == Eigen::Vector3d(-49.75, -49.75, 0.625), "first voxel centre");
    o.note("first centre (" + fmt("%.2f", c.x()) + ", " + fmt("%.2f", c.y()) + ", " +
           fmt("%.3f", c.z()) + ")");
  }
  return o;
}

// 4. Radar encoder suite.
Outcome radar_suite() {
  Outcome o;
  const auto g = toy_grid(8, 8.0, 2, 2.0);
  torch::manual_seed(0);
  radar::RadarEncoder enc(radar::RadarEncoderOptions{.channels = 6, .grid = g});
  torch::NoGradGuard no_grad;
  {
    std::mt19937_64 rng(2);
    auto c = random_cloud(rng, 60, 8, 2);
    const auto a = radar::voxelize_radar(c, g, 10, 0);
    const bool sub_cap = std::all_of(a.counts.begin(), a.counts.end(), [](int64_t n) { return n <= 10; });
    const auto ref = enc->forward({&a});
    bool same = true;
    for (int trial = 0; trial < 20; ++trial) {
      std::shuffle(c.points.begin(), c.points.end(), rng);
      const auto b = radar::voxelize_radar(c, g, 10, 0);
      same = same && torch::equal(ref, enc->forward({&b}));
    }
    o.require(sub_cap && same, "permutation invariance");
    o.note("20 permutations bit-exact");
  }
  {
    std::mt19937_64 rng(3);
    auto c = random_cloud(rng, 40, 8, 2);
    const auto before = radar::voxelize_radar(c, g, 10, 0);
    const auto cell = g.locate({c.points[0].x, c.points[0].y, c.points[0].z});
    c.points[0].vx += 7.0;
    c.points[0].rcs -= 4.0;
    const auto after = radar::voxelize_radar(c, g, 10, 0);
    const auto diff = (enc->voxel_features({&before}) != enc->voxel_features({&after})).any(1)[0];
    const auto nz = diff.nonzero();
    const bool local = cell.has_value() && nz.size(0) == 1 && nz[0][0].item<int64_t>() == cell->x &&
                       nz[0][1].item<int64_t>() == cell->y && nz[0][2].item<int64_t>() == cell->z;
    o.require(local, "locality");
    o.note("one-point edit changes one voxel");
  }
  {
    radar::RadarPointCloud c;
    for (int i = 0; i < 13; ++i) c.points.push_back({0.3, 0.3, 0.3, static_cast<double>(i), 0, 0});
    bool exact = true;
    for (uint64_t seed = 0; seed < 20; ++seed) {
      const auto v = radar::voxelize_radar(c, g, 10, seed);
      std::vector<double> ids;
      for (const auto& p : v.points_of(0)) ids.push_back(p.vx);
      std::sort(ids.begin(), ids.end());
      exact = exact && v.occupied() == 1 && v.counts[0] == 10 && v.dropped_by_sampling == 3 &&
              std::unique(ids.begin(), ids.end()) == ids.end();
    }
    o.require(exact, "sampling cap");
    o.note("13 points keep 10 distinct, drop 3");
  }
  {
    std::mt19937_64 rng(7);
    const auto c = random_cloud(rng, 300, 12.0, 3.0);
    const auto v = radar::voxelize_radar(c, g, 3, 11);
    int64_t outside = 0;
    std::map<int64_t, int64_t> per_voxel;
    for (const auto& p : c.points) {
      const auto cell = g.locate({p.x, p.y, p.z});
      if (!cell) {
        ++outside;
        continue;
      }
      ++per_voxel[g.voxel_index(cell->x, cell->y, cell->z)];
    }
    int64_t sampled = 0;
    for (const auto& [id, n] : per_voxel) sampled += std::max<int64_t>(0, n - 3);
    o.require(v.dropped_out_of_bounds == outside && v.dropped_by_sampling == sampled,
              "drop counts");
    o.note("dropped " + std::to_string(outside) + " out of bounds, " + std::to_string(sampled) +
           " by sampling");
  }
  return o;
}

// 5. Shape contract at full scale.
Outcome shape_contract() {
  Outcome o;
  const config::RunConfig run;
  const auto& m = run.model;
  const auto sample =
      data::render_sample(data::generate_scene(data::derive_seed(5, 0), scene_options(m)), "full");
  torch::manual_seed(0);
  model::BevCarModel net(m);
  net->eval();
  torch::NoGradGuard no_grad;
  const auto batch = model::collate({&sample}, m);
  o.require(batch.images.sizes() == std::vector<int64_t>({1, 6, 3, 448, 896}), "image batch shape");
  o.require(m.grid.x_cells == 200 && m.grid.y_cells == 200 && m.grid.z_cells == 8, "grid");
  const auto start = std::chrono::steady_clock::now();
  const auto logits = net->forward(batch);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  o.require(logits.sizes() == std::vector<int64_t>({1, 8, 200, 200}), "logit shape");
  o.require(torch::isfinite(logits).all().item<bool>(), "non-finite logits");
  o.note("logits 8x200x200 from 6x448x896, forward " + fmt("%.1f", secs) + " s");
  return o;
}

// 6. Masking soundness.
Outcome masking() {
  Outcome o;
  const auto run = config::desk_config();
  const auto& m = run.model;
  torch::NoGradGuard no_grad;

  // (a) Zeroing one camera's image on the surround rig.
  {
    torch::manual_seed(0);
    model::BevCarModel net(m);
    net->eval();
    const auto sample =
        data::render_sample(data::generate_scene(data::derive_seed(6, 0), scene_options(m)), "m");
    const auto batch = model::collate({&sample}, m);
    const auto& rig = batch.rigs[0];
    const auto asg = geometry::assign_cameras(m.grid, rig);
    const int64_t n = static_cast<int64_t>(rig.size());
    const auto images = batch.images[0];
    const auto pyr = net->image_backbone->encode(images);
    const auto splat_m = geometry::build_splat_matrix(asg, pyr[1].size(2), pyr[1].size(3),
                                                      m.splat_stride, pyr[1].scalar_type());
    const auto splat = geometry::apply_splat(splat_m, pyr[1], m.grid);
    const auto refs = lifting::lifting_references({&asg}, rig, 4);
    const auto queries =
        net->lifter->compose(torch::randn({1, m.channels, m.grid.x_cells, m.grid.y_cells}));
    const auto lifted = net->lifter->forward(queries, refs, lifting::pyramid_values(pyr, 1));

    int64_t leaked = 0;
    int64_t reached = 0;
    for (int64_t k = 0; k < n; ++k) {
      auto zeroed = images.clone();
      zeroed[k].zero_();
      const auto pyr_k = net->image_backbone->encode(zeroed);
      const auto splat_k = geometry::apply_splat(splat_m, pyr_k[1], m.grid);
      const auto voxel_diff = (splat != splat_k).any(0).reshape({-1});
      auto owned = torch::zeros({m.grid.voxel_count()}, torch::kBool);
      auto own = owned.accessor<bool, 1>();
      for (int64_t v = 0; v < m.grid.voxel_count(); ++v) {
        const auto cams = asg.cameras_of(v);
        own[v] = std::find(cams.begin(), cams.end(), k) != cams.end();
      }
      leaked += (voxel_diff & ~owned).sum().item<int64_t>();
      reached += (voxel_diff & owned).sum().item<int64_t>();

      const auto lifted_k =
          net->lifter->forward(queries, refs, lifting::pyramid_values(pyr_k, 1));
      const auto cell_diff = (lifted != lifted_k).any(1)[0];
      auto acc = cell_diff.accessor<bool, 2>();
      for (int64_t i = 0; i < m.grid.x_cells; ++i) {
        for (int64_t j = 0; j < m.grid.y_cells; ++j) {
          if (!acc[i][j]) continue;
          if (asg.cell_sees(i, j, static_cast<int32_t>(k))) {
            ++reached;
          } else {
            ++leaked;
          }
        }
      }
    }
    o.require(leaked == 0, std::to_string(leaked) + " voxels/cells changed outside the camera");
    o.require(reached > 0, "zeroing never changed anything");
    o.note("per-camera zeroing: " + std::to_string(reached) + " owned voxels/cells changed, 0 others");
  }

  // (b) Cells outside every frustum with radar held fixed.
  {
    torch::manual_seed(1);
    model::BevCarModel net(m);
    net->eval();
    auto so = scene_options(m);
    so.rig.yaws_deg = {0.0};
    so.rig.names = {"front"};
    const auto sample =
        data::render_sample(data::generate_scene(data::derive_seed(6, 1), so), "f");
    auto batch = model::collate({&sample}, m);
    const auto asg = geometry::assign_cameras(m.grid, batch.rigs[0]);
    auto seen = torch::zeros({m.grid.x_cells, m.grid.y_cells});
    auto seen_acc = seen.accessor<float, 2>();
    for (int64_t i = 0; i < m.grid.x_cells; ++i) {
      for (int64_t j = 0; j < m.grid.y_cells; ++j) seen_acc[i][j] = asg.cell_unassigned(i, j) ? 0.0f : 1.0f;
    }
    const auto near = torch::max_pool2d(seen.unsqueeze(0).unsqueeze(0), {2 * kMaskingMargin + 1},
                                        {1}, {kMaskingMargin})[0][0] > 0;
    const auto far = ~near;
    const int64_t far_cells = far.sum().item<int64_t>();

    const auto reference = net->forward(batch)[0];
    std::vector<torch::Tensor> variants = {torch::zeros_like(batch.images),
                                           torch::ones_like(batch.images),
                                           torch::rand(batch.images.sizes())};
    bool invariant = true;
    int64_t inside_changed = 0;
    for (const auto& imgs : variants) {
      batch.images = imgs;
      const auto logits = net->forward(batch)[0];
      const auto diff = (logits != reference).any(0);
      invariant = invariant && !(diff & far).any().item<bool>();
      inside_changed += (diff & (seen > 0)).sum().item<int64_t>();
    }
    o.require(far_cells > 0, "no cells outside the frustum margin");
    o.require(invariant, "logits outside every frustum depend on images");
    o.require(inside_changed > 0, "images never affected logits");
    o.note(std::to_string(far_cells) + " out-of-view cells bit-identical over 3 image contents");
  }
  return o;
}

// 7. Overfit oracle.
Outcome overfit() {
  Outcome o;
  auto run = config::desk_config();
  run.optimizer.steps = kOverfitSteps;
  testing::TempDir dir("overfit");
  run.checkpoint_dir = dir.str();
  const auto samples = render_set(scene_options(run.model), 5, 10, "s");
  trainer::TrainOptions opts;
  opts.deterministic = true;
  const auto result = trainer::train_on(run, samples, opts);
  const auto& iou = (*result.final_eval)["overall"]["iou"];
  const double vehicle = iou["vehicle"].get<double>();
  const double drivable = iou["drivable_area"].get<double>();
  o.require(vehicle > kOverfitVehicle, "vehicle IoU " + fmt("%.4f", vehicle));
  o.require(drivable > kOverfitDrivable, "drivable IoU " + fmt("%.4f", drivable));
  o.note(std::to_string(kOverfitSteps) + " steps on 10 samples at " +
         std::to_string(run.model.grid.x_cells) + "x" + std::to_string(run.model.grid.y_cells) +
         ": vehicle " + fmt("%.4f", vehicle) + ", drivable " + fmt("%.4f", drivable));
  return o;
}

// 8. Radar benefit at night.
Outcome radar_benefit() {
  Outcome o;
  auto run = config::desk_config();
  run.optimizer.steps = kNightSteps;
  auto so = scene_options(run.model);
  so.condition = metrics::Condition::kNight;
  const auto train = render_set(so, 5, kNightTrain, "s");
  const auto test = render_set(so, 99, kNightTest, "t");
  testing::TempDir dir("night");

  auto score = [&](bool use_radar) {
    auto cfg = run;
    cfg.model.use_radar = use_radar;
    cfg.checkpoint_dir = (dir.path() / (use_radar ? "radar" : "camera")).string();
    trainer::TrainOptions opts;
    opts.deterministic = true;
    opts.final_eval = false;
    const auto result = trainer::train_on(cfg, train, opts);
    auto loaded = trainer::load_model(result.checkpoint);
    return trainer::evaluate(*loaded.model, test).overall.iou(segmentation::kVehicle);
  };
  const double with_radar = score(true);
  const double camera_only = score(false);
  o.require(with_radar - camera_only >= kRadarMargin,
            "margin " + fmt("%.4f", with_radar - camera_only));
  o.note("night vehicle IoU camera+radar " + fmt("%.4f", with_radar) + " vs camera-only " +
         fmt("%.4f", camera_only));
  return o;
}

// 9. Metrics arithmetic.
Outcome metrics_arithmetic() {
  Outcome o;
  const std::vector<double> a = {58.4, 83.3, 0, 0, 0, 0, 0, 0};
  const std::vector<double> b = {48.8, 81.1, 0, 0, 0, 0, 0, 0};
  const double ma = metrics::round_one_decimal(metrics::summarize(a).miou);
  const double mb = metrics::round_one_decimal(metrics::summarize(b).miou);
  o.require(ma == 70.9, "camera+radar mIoU " + fmt("%.10g", ma));
  o.require(mb == 65.0, "camera-only mIoU " + fmt("%.10g", mb));
  o.note("(58.4, 83.3) -> " + fmt("%.1f", ma) + ", (48.8, 81.1) -> " + fmt("%.1f", mb));
  return o;
}

// 10. Range mask partition.
Outcome range_partition() {
  Outcome o;
  const geometry::BevGrid grid;
  const auto masks = metrics::range_masks(grid);
  o.require(masks.size() == 3, "interval count");
  auto count = torch::zeros({grid.x_cells, grid.y_cells}, torch::kInt64);
  for (const auto& mk : masks) count += mk.to(torch::kInt64);
  auto acc = count.accessor<int64_t, 2>();
  int64_t bad = 0;
  int64_t disk = 0;
  for (int64_t i = 0; i < grid.x_cells; ++i) {
    for (int64_t j = 0; j < grid.y_cells; ++j) {
      const bool inside = grid.cell_center(i, j).norm() <= 50.0;
      disk += inside;
      bad += acc[i][j] != (inside ? 1 : 0);
    }
  }
  o.require(bad == 0, std::to_string(bad) + " cells misassigned");
  o.note(std::to_string(disk) + " disk cells covered once, others none");
  return o;
}

// 11. Determinism of the command line trainer.
Outcome determinism() {
  Outcome o;
  testing::TempDir dir("determinism");
  const auto root = dir.path();
  const std::string cli = BEVCAR_CLI_PATH;
  auto sh = [&](const std::string& cmd, const fs::path& out) {
    return std::system((cmd + " > " + out.string() + " 2>> " + (root / "err.txt").string()).c_str());
  };
  const auto log = root / "out.txt";
  o.require(sh(cli + " gen-data --out " + (root / "data").string() +
               " --num 3 --seed 4 --preset desk --threads 1", log) == 0,
            "gen-data failed");
  o.require(sh(cli + " print-config --preset desk", root / "run.json") == 0,
            "print-config failed");
  if (!o.pass) return o;
  const auto ckpt = root / "ckpt";
  const std::string train = cli + " train --config " + (root / "run.json").string() +
                            " --dataset " + (root / "data").string() + " --checkpoint-dir " +
                            ckpt.string() + " --steps 6 --seed 3 --deterministic --quiet";
  o.require(sh(train, log) == 0, "first run failed");
  if (!o.pass) return o;
  fs::rename(ckpt, root / "first");
  o.require(sh(train, log) == 0, "second run failed");
  if (!o.pass) return o;
  for (const auto* name : {"final.ckpt", "train_log.jsonl"}) {
    const auto a = read_file(root / "first" / name);
    const auto b = read_file(ckpt / name);
    o.require(!a.empty() && a == b, std::string(name) + " differs");
    o.note(std::string(name) + " " + std::to_string(a.size()) + " bytes identical");
  }
  return o;
}

struct Criterion {
  int id;
  std::string title;
  double budget_s;
  std::function<Outcome()> run;
};

}  // namespace
}  // namespace bevcar::acceptance

int main(int argc, char** argv) {
  using namespace bevcar::acceptance;
  CLI::App app{"bevcar acceptance suite"};
  int only = 0;
  app.add_option("--only", only, "Run a single criterion (1-11)");
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> criteria = {
      {1, "loss formula oracles", 5.0, loss_oracles},
      {2, "gradient suite", 120.0, gradient_suite},
      {3, "geometry suite", 10.0, geometry_suite},
      {4, "radar encoder suite", 10.0, radar_suite},
      {5, "shape contract", 120.0, shape_contract},
      {6, "masking soundness", 600.0, masking},
      {7, "overfit oracle", 1800.0, overfit},
      {8, "radar benefit at night", 3600.0, radar_benefit},
      {9, "metrics arithmetic", 5.0, metrics_arithmetic},
      {10, "range mask partition", 10.0, range_partition},
      {11, "determinism", 600.0, determinism},
  };
  bool all = true;
  bool ran = false;
  for (const auto& c : criteria) {
    if (only != 0 && c.id != only) continue;
    ran = true;
    const auto start = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = c.run();
    } catch (const std::exception& e) {
      out.pass = false;
      const std::string what = e.what();
      out.detail = "exception: " + what.substr(0, what.find('\n'));
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (secs > c.budget_s) {
      out.pass = false;
      out.detail += "; exceeded " + fmt("%.0f", c.budget_s) + " s budget";
    }
    std::printf("%s criterion %d: %s (%s; %.1f s)\n", out.pass ? "PASS" : "FAIL", c.id,
                c.title.c_str(), out.detail.c_str(), secs);
    std::fflush(stdout);
    all = all && out.pass;
  }
  if (!ran) {
    std::fprintf(stderr, "no criterion %d\n", only);
    return 2;
  }
  return all ? 0 : 1;
}
