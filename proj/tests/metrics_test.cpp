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
#include <chrono>
#include <cmath>
#include <thread>

#include <gtest/gtest.h>

#include "bevcar/errors.hpp"
#include "bevcar/metrics.hpp"

namespace bevcar::metrics {
namespace {

torch::Tensor mask_from(std::initializer_list<std::pair<int, int>> cells, int64_t x = 4,
                        int64_t y = 4) {
  auto m = torch::zeros({x, y}, torch::kBool);
  for (auto [i, j] : cells) m[i][j] = true;
  return m;
}

torch::Tensor everywhere(int64_t x = 4, int64_t y = 4) {
  return torch::ones({x, y}, torch::kBool);
}

TEST(IoUTest, IdenticalMasksScoreOne) {
  IoUAccumulator acc(1);
  const auto m = mask_from({{0, 0}, {1, 2}, {3, 3}});
  acc.update(0, m, m, everywhere());
  EXPECT_EQ(acc.iou(0), 1.0);
}

TEST(IoUTest, DisjointMasksScoreZero) {
  IoUAccumulator acc(1);
  acc.update(0, mask_from({{0, 0}, {0, 1}}), mask_from({{2, 2}}), everywhere());
  EXPECT_EQ(acc.iou(0), 0.0);
}

TEST(IoUTest, PartialOverlapCounts) {
  IoUAccumulator acc(1);
  acc.update(0, mask_from({{0, 0}, {0, 1}, {1, 0}, {1, 1}}),
             mask_from({{0, 0}, {0, 1}, {2, 0}, {2, 1}}), everywhere());
  EXPECT_EQ(acc.intersection(0), 2);
  EXPECT_EQ(acc.union_count(0), 6);
  EXPECT_DOUBLE_EQ(acc.iou(0), 2.0 / 6.0);
}

TEST(IoUTest, RegionRestrictsCounting) {
  IoUAccumulator acc(1);
  acc.update(0, mask_from({{0, 0}, {3, 3}}), mask_from({{0, 0}}), mask_from({{0, 0}, {0, 1}}));
  EXPECT_EQ(acc.intersection(0), 1);
  EXPECT_EQ(acc.union_count(0), 1);
}

TEST(IoUTest, EmptyUnionIsNaN) {
  IoUAccumulator acc(2);
  EXPECT_TRUE(std::isnan(acc.iou(1)));
}

TEST(IoUTest, SymmetricAndBounded) {
  for (int trial = 0; trial < 50; ++trial) {
    torch::manual_seed(trial);
    auto a = torch::rand({8, 8}) > 0.5;
    auto b = torch::rand({8, 8}) > 0.5;
    IoUAccumulator ab(1), ba(1);
    ab.update(0, a, b, everywhere(8, 8));
    ba.update(0, b, a, everywhere(8, 8));
    EXPECT_EQ(ab, ba);
    EXPECT_GE(ab.iou(0), 0.0);
    EXPECT_LE(ab.iou(0), 1.0);
  }
}

TEST(IoUTest, MergeIsAssociativeAndCommutative) {
  std::vector<IoUAccumulator> per_sample;
  IoUAccumulator sequential;
  for (int s = 0; s < 6; ++s) {
    torch::manual_seed(100 + s);
    auto pred = torch::rand({8, 5, 5}) > 0.5;
    auto gt = torch::rand({8, 5, 5}) > 0.5;
    IoUAccumulator one;
    one.update_all(pred, gt, everywhere(5, 5));
    sequential.update_all(pred, gt, everywhere(5, 5));
    per_sample.push_back(one);
  }
  const auto left = ((per_sample[0] + per_sample[1]) + per_sample[2]) +
                    ((per_sample[3] + per_sample[4]) + per_sample[5]);
  const auto right = per_sample[5] + (per_sample[4] + (per_sample[3] + (per_sample[2] +
                                                                       (per_sample[1] + per_sample[0]))));
  EXPECT_EQ(left, sequential);
  EXPECT_EQ(right, sequential);
  EXPECT_THROW(IoUAccumulator(3).merge(IoUAccumulator(4)), ConfigError);
}

TEST(SummarizeTest, PublishedAggregates) {
  std::vector<double> cam_radar = {58.4, 83.3, 40, 40, 40, 40, 40, 40};
  std::vector<double> cam_only = {48.8, 81.1, 40, 40, 40, 40, 40, 40};
  const auto a = summarize(cam_radar);
  const auto b = summarize(cam_only);
  EXPECT_NEAR(a.miou, 70.85, 1e-9);
  EXPECT_EQ(round_one_decimal(a.miou), 70.9);
  EXPECT_NEAR(b.miou, 64.95, 1e-9);
  EXPECT_EQ(round_one_decimal(b.miou), 65.0);
}

TEST(SummarizeTest, MapMeanOfEqualClasses) {
  std::vector<double> ious(8, 0.37);
  ious[0] = 0.9;
  EXPECT_DOUBLE_EQ(summarize(ious).map_mean, 0.37);
}

TEST(SummarizeTest, UndefinedClassesExcludedWithNotice) {
  std::vector<double> ious = {0.5, 0.6, NAN, 0.2, 0.4, NAN, 0.1, 0.3};
  const auto r = summarize(ious);
  EXPECT_NEAR(r.map_mean, (0.6 + 0.2 + 0.4 + 0.1 + 0.3) / 5.0, 1e-15);
  EXPECT_EQ(r.notices.size(), 2u);
  EXPECT_TRUE(r.to_json()["iou"]["carpark_area"].is_null());
  EXPECT_NE(r.to_table().find("n/a"), std::string::npos);
}

TEST(SummarizeTest, RoundHalfAwayFromZero) {
  EXPECT_EQ(round_one_decimal(0.05), 0.1);
  EXPECT_EQ(round_one_decimal(-0.05), -0.1);
  EXPECT_EQ(round_one_decimal(2.25), 2.3);
  EXPECT_EQ(round_one_decimal(2.24999), 2.2);
}

TEST(RangeMasksTest, TenMetresIsFirstInterval) {
  const geometry::BevGrid grid;
  const auto masks = range_masks(grid);
  ASSERT_EQ(masks.size(), 3u);
  // Cell (120, 100) has centre (10.25, 0.25).
  EXPECT_TRUE(masks[0][120][100].item<bool>());
  EXPECT_FALSE(masks[1][120][100].item<bool>());
  EXPECT_FALSE(masks[2][120][100].item<bool>());
}

TEST(RangeMasksTest, ExactlyTwentyMetresIsSecondInterval) {
  geometry::BevGrid grid;
  grid.x_cells = 81;
  grid.y_cells = 81;
  grid.x_extent = 81.0;
  grid.y_extent = 81.0;
  ASSERT_EQ(grid.cell_center(60, 40), Eigen::Vector2d(20.0, 0.0));
  const auto masks = range_masks(grid);
  EXPECT_FALSE(masks[0][60][40].item<bool>());
  EXPECT_TRUE(masks[1][60][40].item<bool>());
}

TEST(RangeMasksTest, CornerIsBeyondEveryInterval) {
  const geometry::BevGrid grid;
  EXPECT_NEAR(grid.cell_center(199, 199).norm(), 70.4, 0.05);
  for (const auto& m : range_masks(grid)) EXPECT_FALSE(m[199][199].item<bool>());
}

TEST(RangeMasksTest, PartitionOfTheFiftyMetreDisk) {
  const geometry::BevGrid grid;
  const auto masks = range_masks(grid);
  auto count = torch::zeros({200, 200}, torch::kInt64);
  for (const auto& m : masks) count += m.to(torch::kInt64);
  EXPECT_LE(count.max().item<int64_t>(), 1);
  for (int64_t i = 0; i < 200; ++i) {
    for (int64_t j = 0; j < 200; ++j) {
      const bool inside = grid.cell_center(i, j).norm() < 50.0;
      ASSERT_EQ(count[i][j].item<int64_t>() == 1, inside) << i << "," << j;
    }
  }
  RangeIntervals r;
  EXPECT_EQ(r.label(0), "0-20m");
  EXPECT_EQ(r.label(2), "35-50m");
}

TEST(ConditionTest, ParseAndSplit) {
  EXPECT_EQ(parse_condition("night"), Condition::kNight);
  EXPECT_EQ(to_string(Condition::kRain), "rain");
  EXPECT_THROW(parse_condition("fog"), ConfigError);
  ConditionSplit split;
  split.condition_of = {{"a", Condition::kDay}, {"b", Condition::kNight}, {"c", Condition::kDay}};
  EXPECT_EQ(split.tokens(Condition::kDay), (std::vector<std::string>{"a", "c"}));
  EXPECT_EQ(split.counts()[Condition::kDay], 2u);
  EXPECT_EQ(split.counts()[Condition::kRain], 0u);
  EXPECT_EQ(split.to_json()["night"], nlohmann::json::array({"b"}));
}

TEST(RuntimeTest, SingleRepetitionIsThatMeasurement) {
  const auto s = measure_runtime([] {}, 1, 0);
  ASSERT_EQ(s.samples_ms.size(), 1u);
  EXPECT_EQ(s.median_ms, s.samples_ms[0]);
}

TEST(RuntimeTest, FiveMillisecondStub) {
  int calls = 0;
  const auto s = measure_runtime(
      [&] {
        ++calls;
        std::this_thread::sleep_for(std::chrono::milliseconds(5));
      },
      5, 2);
  EXPECT_EQ(calls, 7);
  EXPECT_GE(s.median_ms, 5.0);
  EXPECT_LT(s.median_ms, 7.0);
  EXPECT_NEAR(s.fps, 1000.0 / s.median_ms, 1e-9);
  EXPECT_THROW(measure_runtime([] {}, 0), ConfigError);
}

}  // namespace
}  // namespace bevcar::metrics
