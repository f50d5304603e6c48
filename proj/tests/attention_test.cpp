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
#include <cmath>

#include <gtest/gtest.h>

#include "bevcar/attention.hpp"
#include "bevcar/errors.hpp"
#include "test_util.hpp"

namespace bevcar::attention {
namespace {

// Naive bilinear read with zero padding; pixel centres at half integers.
double read_bilinear(const torch::Tensor& map, int64_t c, double px, double py) {
  const int64_t h = map.size(1);
  const int64_t w = map.size(2);
  const double x0 = std::floor(px);
  const double y0 = std::floor(py);
  double acc = 0.0;
  for (int dy = 0; dy <= 1; ++dy) {
    for (int dx = 0; dx <= 1; ++dx) {
      const auto xi = static_cast<int64_t>(x0) + dx;
      const auto yi = static_cast<int64_t>(y0) + dy;
      if (xi < 0 || yi < 0 || xi >= w || yi >= h) continue;
      const double wx = dx ? px - x0 : 1.0 - (px - x0);
      const double wy = dy ? py - y0 : 1.0 - (py - y0);
      acc += wx * wy * map[c][yi][xi].item<double>();
    }
  }
  return acc;
}

// Brute-force evaluation of sample_and_aggregate over per-map tensors
// (each C x h x w, channels split into heads).
torch::Tensor oracle(const std::vector<torch::Tensor>& maps, int64_t heads,
                     const ReferencePoints& refs, const torch::Tensor& offsets,
                     const torch::Tensor& weights) {
  const int64_t q = refs.queries();
  const int64_t c = maps[0].size(0);
  const int64_t hd = c / heads;
  const int64_t levels = offsets.size(3);
  const int64_t points = offsets.size(4);
  auto out = torch::zeros({q, heads, hd}, torch::kFloat64);
  for (int64_t qi = 0; qi < q; ++qi) {
    for (int64_t h = 0; h < heads; ++h) {
      for (int64_t r = 0; r < refs.refs(); ++r) {
        const int64_t m0 = refs.map_index[qi][r].item<int64_t>();
        if (m0 < 0) continue;
        const int64_t a = refs.anchor_of_ref[r].item<int64_t>();
        for (int64_t l = 0; l < levels; ++l) {
          const auto& map = maps[static_cast<size_t>(m0 + l)];
          for (int64_t p = 0; p < points; ++p) {
            const double px = refs.locations[qi][r][0].item<double>() * map.size(2) +
                              offsets[qi][h][a][l][p][0].item<double>() - 0.5;
            const double py = refs.locations[qi][r][1].item<double>() * map.size(1) +
                              offsets[qi][h][a][l][p][1].item<double>() - 0.5;
            const double wgt = weights[qi][h][r][l][p].item<double>();
            for (int64_t e = 0; e < hd; ++e) {
              out[qi][h][e] += wgt * read_bilinear(map, h * hd + e, px, py);
            }
          }
        }
      }
    }
  }
  return out;
}

ValueMaps head_split(const ValueMaps& v, int64_t heads) {
  return {v.flat.view({v.flat.size(0), heads, v.channels() / heads}), v.shapes, v.starts};
}

struct ToyProblem {
  std::vector<torch::Tensor> maps;
  ReferencePoints refs;
  torch::Tensor offsets;
  torch::Tensor weights;
};

// Two samples, two levels, three references in two anchor groups; some
// references invalid, some samples off the map.
ToyProblem toy(int64_t heads, int64_t channels, int64_t points, uint64_t seed) {
  torch::manual_seed(seed);
  ToyProblem t;
  for (auto [h, w] : {std::pair{5, 7}, {3, 4}, {6, 5}, {2, 3}}) {
    t.maps.push_back(torch::randn({channels, h, w}, torch::kFloat64));
  }
  const int64_t q = 4;
  t.refs.locations = torch::rand({q, 3, 2}, torch::kFloat64) * 1.2 - 0.1;
  t.refs.map_index = torch::tensor({0, 2, -1, 2, 0, 0, -1, -1, -1, 0, 2, 2}, torch::kInt64).view({q, 3});
  t.refs.anchor_of_ref = torch::tensor({0, 1, 1}, torch::kInt64);
  t.offsets = torch::randn({q, heads, 2, 2, points, 2}, torch::kFloat64) * 1.5;
  t.weights = torch::rand({q, heads, 3, 2, points}, torch::kFloat64);
  return t;
}

TEST(SamplerTest, MatchesBruteForceOracle) {
  for (uint64_t seed = 0; seed < 5; ++seed) {
    auto t = toy(2, 4, 3, seed);
    const auto v = head_split(ValueMaps::from_maps(t.maps), 2);
    const auto got = sample_and_aggregate(v.flat, v.shapes, v.starts, t.refs, t.offsets, t.weights);
    const auto want = oracle(t.maps, 2, t.refs, t.offsets, t.weights);
    EXPECT_TRUE(torch::allclose(got, want, 1e-12, 1e-12)) << "seed " << seed;
  }
}

TEST(SamplerTest, LowerLeftCellGradientAtIntegerCoordinate) {
  // One row of values 0, 1, 4, 9; the sample lands exactly on pixel 1.
  auto map = torch::tensor({0.0, 1.0, 4.0, 9.0}, torch::kFloat64).view({1, 1, 4});
  const auto v = ValueMaps::from_maps({map});
  ReferencePoints refs;
  refs.locations = torch::tensor({1.5 / 4.0, 0.5}, torch::kFloat64).view({1, 1, 2});
  refs.map_index = torch::zeros({1, 1}, torch::kInt64);
  refs.anchor_of_ref = torch::zeros({1}, torch::kInt64);
  auto offsets = torch::zeros({1, 1, 1, 1, 1, 2}, torch::kFloat64).requires_grad_();
  auto weights = torch::ones({1, 1, 1, 1, 1}, torch::kFloat64);
  auto out = sample_and_aggregate(v.flat.view({4, 1, 1}), v.shapes, v.starts, refs, offsets, weights);
  EXPECT_DOUBLE_EQ(out.item<double>(), 1.0);
  out.sum().backward();
  EXPECT_DOUBLE_EQ(offsets.grad()[0][0][0][0][0][0].item<double>(), 3.0);
}

TEST(SamplerTest, GradientsMatchFiniteDifferences) {
  for (uint64_t draw = 0; draw < 10; ++draw) {
    auto t = toy(2, 4, 2, 50 + draw);
    auto v = ValueMaps::from_maps(t.maps);
    auto value = v.flat.view({v.flat.size(0), 2, 2}).clone().requires_grad_();
    auto offsets = t.offsets.clone().requires_grad_();
    auto weights = t.weights.clone().requires_grad_();
    const auto proj = torch::randn({4, 2, 2}, torch::kFloat64);
    auto loss = [&] {
      return (sample_and_aggregate(value, v.shapes, v.starts, t.refs, offsets, weights) * proj).sum();
    };
    const auto check = testing::check_gradients(loss, {value, offsets, weights}, draw, 64);
    EXPECT_LE(check.relative_error, 1e-4) << "draw " << draw;
  }
}

class AttentionTest : public ::testing::Test {
 protected:
  static ReferencePoints single_ref(double x, double y) {
    ReferencePoints r;
    r.locations = torch::tensor({x, y}, torch::kFloat64).view({1, 1, 2});
    r.map_index = torch::zeros({1, 1}, torch::kInt64);
    r.anchor_of_ref = torch::zeros({1}, torch::kInt64);
    return r;
  }
};

TEST_F(AttentionTest, IdentityReadsExactPixel) {
  DeformableAttention attn(DeformableAttentionOptions{.channels = 4, .heads = 1, .points = 1});
  attn->to(torch::kFloat64);
  attn->force_zero_offsets();
  attn->set_identity_projections();
  const auto map = torch::randn({4, 4, 4}, torch::kFloat64);
  // Pixel (row 2, column 1).
  const auto out = attn->forward(torch::randn({1, 4}, torch::kFloat64),
                                 single_ref(1.5 / 4.0, 2.5 / 4.0), ValueMaps::from_maps({map}));
  EXPECT_TRUE(torch::allclose(out[0], map.select(1, 2).select(1, 1), 0.0, 1e-15));
}

TEST_F(AttentionTest, MidpointOfFourPixels) {
  DeformableAttention attn(DeformableAttentionOptions{.channels = 1, .heads = 1, .points = 1});
  attn->to(torch::kFloat64);
  attn->force_zero_offsets();
  attn->set_identity_projections();
  const auto map = torch::tensor({0.0, 1.0, 2.0, 3.0}, torch::kFloat64).view({1, 2, 2});
  const auto out = attn->forward(torch::zeros({1, 1}, torch::kFloat64), single_ref(0.5, 0.5),
                                 ValueMaps::from_maps({map}));
  EXPECT_NEAR(out.item<double>(), 1.5, 1e-15);
}

TEST_F(AttentionTest, ZeroValuesGiveZeroOutput) {
  auto t = toy(2, 8, 3, 1);
  for (auto& m : t.maps) m.zero_();
  DeformableAttention a2(DeformableAttentionOptions{.channels = 8, .heads = 2, .points = 3, .levels = 2, .anchors = 2});
  a2->to(torch::kFloat64);
  testing::randomize(*a2->offset_proj);
  testing::randomize(*a2->attention_proj);
  const auto out = a2->forward(torch::randn({4, 8}, torch::kFloat64), t.refs, ValueMaps::from_maps(t.maps));
  EXPECT_EQ(out.abs().max().item<double>(), 0.0);
}

TEST_F(AttentionTest, WeightsNormaliseOverValidSamples) {
  DeformableAttention attn(
      DeformableAttentionOptions{.channels = 8, .heads = 2, .points = 3, .levels = 2, .anchors = 2});
  attn->to(torch::kFloat64);
  testing::randomize(*attn->attention_proj, 2.0);
  auto t = toy(2, 8, 3, 2);
  const auto w = attn->attention_weights(torch::randn({4, 8}, torch::kFloat64), t.refs);
  const auto sums = w.sum({2, 3, 4});
  const auto valid = (t.refs.map_index >= 0).any(1);
  for (int64_t q = 0; q < 4; ++q) {
    for (int64_t h = 0; h < 2; ++h) {
      EXPECT_NEAR(sums[q][h].item<double>(), valid[q].item<bool>() ? 1.0 : 0.0, 1e-12);
    }
    for (int64_t r = 0; r < 3; ++r) {
      if (t.refs.map_index[q][r].item<int64_t>() < 0) {
        EXPECT_EQ(w.select(0, q).select(1, r).abs().max().item<double>(), 0.0);
      }
    }
  }
}

TEST_F(AttentionTest, QueriesWithoutValidReferencesOutputZero) {
  DeformableAttention attn(
      DeformableAttentionOptions{.channels = 4, .heads = 2, .points = 2, .levels = 2, .anchors = 2});
  attn->to(torch::kFloat64);
  {
    torch::NoGradGuard g;
    attn->output_proj->bias.fill_(0.3);
  }
  auto t = toy(2, 4, 2, 3);
  const auto out = attn->forward(torch::randn({4, 4}, torch::kFloat64), t.refs, ValueMaps::from_maps(t.maps));
  EXPECT_EQ(out[2].abs().max().item<double>(), 0.0);  // query 2 has no valid reference
  EXPECT_GT(out[0].abs().max().item<double>(), 0.0);
}

TEST_F(AttentionTest, LinearInValueMaps) {
  DeformableAttention attn(
      DeformableAttentionOptions{.channels = 4, .heads = 2, .points = 2, .levels = 2, .anchors = 2});
  attn->to(torch::kFloat64);
  testing::randomize(*attn->offset_proj);
  testing::randomize(*attn->attention_proj);
  auto a = toy(2, 4, 2, 4);
  auto b = toy(2, 4, 2, 5);
  std::vector<torch::Tensor> sum;
  for (size_t i = 0; i < a.maps.size(); ++i) sum.push_back(a.maps[i] + b.maps[i]);
  const auto q = torch::randn({4, 4}, torch::kFloat64);
  const auto fa = attn->forward(q, a.refs, ValueMaps::from_maps(a.maps));
  const auto fb = attn->forward(q, a.refs, ValueMaps::from_maps(b.maps));
  const auto fs = attn->forward(q, a.refs, ValueMaps::from_maps(sum));
  EXPECT_TRUE(torch::allclose(fs, fa + fb, 1e-12, 1e-12));
}

TEST_F(AttentionTest, TranslationConsistency) {
  DeformableAttention attn(DeformableAttentionOptions{.channels = 4, .heads = 2, .points = 4});
  attn->to(torch::kFloat64);
  testing::randomize(*attn->attention_proj);
  const auto map = torch::randn({4, 12, 12}, torch::kFloat64);
  // Shift content by (+2 columns, +1 row).
  auto shifted = torch::zeros_like(map);
  shifted.slice(1, 1).slice(2, 2).copy_(map.slice(1, 0, 11).slice(2, 0, 10));
  const auto q = torch::randn({3, 4}, torch::kFloat64);
  ReferencePoints r;
  r.locations = torch::tensor({4.5, 5.0, 6.25, 4.75, 5.5, 6.5}, torch::kFloat64).view({3, 1, 2}) / 12.0;
  r.map_index = torch::zeros({3, 1}, torch::kInt64);
  r.anchor_of_ref = torch::zeros({1}, torch::kInt64);
  ReferencePoints rs = r;
  rs.locations = r.locations.clone();
  rs.locations.select(2, 0).add_(2.0 / 12.0);
  rs.locations.select(2, 1).add_(1.0 / 12.0);
  const auto a = attn->forward(q, r, ValueMaps::from_maps({map}));
  const auto b = attn->forward(q, rs, ValueMaps::from_maps({shifted}));
  EXPECT_TRUE(torch::allclose(a, b, 1e-10, 1e-10));
}

TEST_F(AttentionTest, InitialOffsetsFormRing) {
  DeformableAttentionOptions o{.channels = 8, .heads = 2, .points = 4, .init_radius = 1.0};
  DeformableAttention attn(o);
  const auto off = attn->sampling_offsets(torch::randn({5, 8}));
  const auto radius = off.pow(2).sum(-1).sqrt();
  EXPECT_TRUE(torch::allclose(radius, torch::ones_like(radius), 1e-5, 1e-5));
  EXPECT_TRUE(torch::equal(off[0], off[4]));  // query independent
  // Uniform attention at initialisation.
  auto t = toy(2, 8, 4, 6);
  DeformableAttention a2(DeformableAttentionOptions{.channels = 8, .heads = 2, .points = 4, .levels = 2, .anchors = 2});
  const auto w = a2->attention_weights(torch::randn({4, 8}), t.refs);
  EXPECT_NEAR(w[0][0][0][0][0].item<float>(), 1.0f / 16.0f, 1e-6);
}

TEST_F(AttentionTest, ModuleGradientsMatchFiniteDifferences) {
  for (uint64_t draw = 0; draw < 10; ++draw) {
    torch::manual_seed(200 + draw);
    DeformableAttention attn(
        DeformableAttentionOptions{.channels = 4, .heads = 2, .points = 2, .levels = 2, .anchors = 2});
    attn->to(torch::kFloat64);
    testing::randomize(*attn, 0.6);
    auto t = toy(2, 4, 2, 300 + draw);
    t.refs.locations = t.refs.locations.narrow(0, 0, 3);
    t.refs.map_index = t.refs.map_index.narrow(0, 0, 3);
    auto queries = torch::randn({3, 4}, torch::kFloat64).requires_grad_();
    auto values = ValueMaps::from_maps(t.maps);
    auto flat = values.flat.clone().requires_grad_();
    const auto proj = torch::randn({3, 4}, torch::kFloat64);
    auto loss = [&] {
      ValueMaps v{flat, values.shapes, values.starts};
      return (attn->forward(queries, t.refs, v) * proj).sum();
    };
    std::vector<torch::Tensor> wrt = {queries, flat, attn->offset_proj->weight,
                                      attn->offset_proj->bias, attn->attention_proj->weight};
    const auto check = testing::check_gradients(loss, wrt, draw);
    EXPECT_LE(check.relative_error, 1e-4) << "draw " << draw;
  }
}

TEST_F(AttentionTest, RejectsIndivisibleHeads) {
  EXPECT_THROW(DeformableAttention(DeformableAttentionOptions{.channels = 6, .heads = 4}), ConfigError);
}

TEST(DeformableBlockTest, PreNormResidualLayout) {
  DeformableBlock block(DeformableAttentionOptions{.channels = 4, .heads = 2, .points = 2});
  block->to(torch::kFloat64);
  const auto map = torch::randn({4, 5, 5}, torch::kFloat64);
  const auto refs = ReferencePoints::bev_plane(1, 5, 5);
  const auto q = torch::randn({25, 4}, torch::kFloat64);
  const auto values = ValueMaps::from_maps({map});
  const auto [out, attended] = block->forward_with_attention(q, refs, values);
  const auto expect_attended = block->attention->forward(block->attn_norm->forward(q), refs, values);
  EXPECT_TRUE(torch::allclose(attended, expect_attended, 1e-14, 1e-14));
  const auto mid = q + attended;
  EXPECT_TRUE(torch::allclose(out, mid + block->ffn->forward(block->ffn_norm->forward(mid)), 1e-14, 1e-14));
}

}  // namespace
}  // namespace bevcar::attention
