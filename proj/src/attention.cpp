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
#include "bevcar/attention.hpp"

#include <ATen/Parallel.h>

#include <cmath>
#include <numbers>

#include "bevcar/errors.hpp"

namespace bevcar::attention {
namespace {

// Sizes shared by the forward and backward kernels.
struct Dims {
  int64_t queries, heads, head_dim, refs, anchors, levels, points;
};

// Bilinear corner set of one sample. Corners outside the map have weight
// zero and row -1.
template <typename scalar_t>
struct Corners {
  int64_t row[4];
  scalar_t w[4];
  scalar_t dwdx[4];
  scalar_t dwdy[4];
};

template <typename scalar_t>
inline Corners<scalar_t> corners_at(scalar_t px, scalar_t py, int64_t h,
                                    int64_t w, int64_t start) {
  Corners<scalar_t> c;
  const scalar_t x0f = std::floor(px);
  const scalar_t y0f = std::floor(py);
  const scalar_t ax = px - x0f;
  const scalar_t ay = py - y0f;
  const auto x0 = static_cast<int64_t>(x0f);
  const auto y0 = static_cast<int64_t>(y0f);
  const int64_t xs[4] = {x0, x0 + 1, x0, x0 + 1};
  const int64_t ys[4] = {y0, y0, y0 + 1, y0 + 1};
  const scalar_t one = 1;
  const scalar_t ws[4] = {(one - ax) * (one - ay), ax * (one - ay),
                          (one - ax) * ay, ax * ay};
  const scalar_t dx[4] = {-(one - ay), one - ay, -ay, ay};
  const scalar_t dy[4] = {-(one - ax), -ax, one - ax, ax};
  for (int k = 0; k < 4; ++k) {
    const bool inside = xs[k] >= 0 && xs[k] < w && ys[k] >= 0 && ys[k] < h;
    c.row[k] = inside ? start + ys[k] * w + xs[k] : -1;
    c.w[k] = ws[k];
    c.dwdx[k] = dx[k];
    c.dwdy[k] = dy[k];
  }
  return c;
}

template <typename scalar_t>
void sample_forward_kernel(const Dims& d, const scalar_t* value,
                           const int64_t* shapes, const int64_t* starts,
                           const scalar_t* ref_loc, const int64_t* ref_map,
                           const int64_t* anchor_of_ref,
                           const scalar_t* offsets, const scalar_t* weights,
                           scalar_t* out) {
  const int64_t ch = d.head_dim;
  at::parallel_for(0, d.queries, 16, [&](int64_t begin, int64_t end) {
    for (int64_t q = begin; q < end; ++q) {
      for (int64_t h = 0; h < d.heads; ++h) {
        scalar_t* o = out + (q * d.heads + h) * ch;
        for (int64_t r = 0; r < d.refs; ++r) {
          const int64_t m0 = ref_map[q * d.refs + r];
          if (m0 < 0) continue;
          const int64_t a = anchor_of_ref[r];
          const scalar_t rx = ref_loc[(q * d.refs + r) * 2];
          const scalar_t ry = ref_loc[(q * d.refs + r) * 2 + 1];
          for (int64_t l = 0; l < d.levels; ++l) {
            const int64_t m = m0 + l;
            const int64_t mh = shapes[2 * m];
            const int64_t mw = shapes[2 * m + 1];
            for (int64_t p = 0; p < d.points; ++p) {
              const int64_t oi =
                  ((((q * d.heads + h) * d.anchors + a) * d.levels + l) *
                       d.points + p) * 2;
              const scalar_t wgt =
                  weights[(((q * d.heads + h) * d.refs + r) * d.levels + l) *
                              d.points + p];
              if (wgt == scalar_t(0)) continue;
              const scalar_t px = rx * static_cast<scalar_t>(mw) + offsets[oi] -
                                  scalar_t(0.5);
              const scalar_t py = ry * static_cast<scalar_t>(mh) +
                                  offsets[oi + 1] - scalar_t(0.5);
              const auto c = corners_at<scalar_t>(px, py, mh, mw, starts[m]);
              for (int k = 0; k < 4; ++k) {
                if (c.row[k] < 0) continue;
                const scalar_t cw = wgt * c.w[k];
                const scalar_t* v = value + (c.row[k] * d.heads + h) * ch;
                for (int64_t e = 0; e < ch; ++e) o[e] += cw * v[e];
              }
            }
          }
        }
      }
    }
  });
}

template <typename scalar_t>
void sample_backward_kernel(const Dims& d, const scalar_t* value,
                            const int64_t* shapes, const int64_t* starts,
                            const scalar_t* ref_loc, const int64_t* ref_map,
                            const int64_t* anchor_of_ref,
                            const scalar_t* offsets, const scalar_t* weights,
                            const scalar_t* grad_out, scalar_t* grad_value,
                            scalar_t* grad_offsets, scalar_t* grad_weights) {
  const int64_t ch = d.head_dim;
  // Heads write disjoint slices of every gradient buffer.
  at::parallel_for(0, d.heads, 1, [&](int64_t hbegin, int64_t hend) {
    for (int64_t h = hbegin; h < hend; ++h) {
      for (int64_t q = 0; q < d.queries; ++q) {
        const scalar_t* go = grad_out + (q * d.heads + h) * ch;
        for (int64_t r = 0; r < d.refs; ++r) {
          const int64_t m0 = ref_map[q * d.refs + r];
          if (m0 < 0) continue;
          const int64_t a = anchor_of_ref[r];
          const scalar_t rx = ref_loc[(q * d.refs + r) * 2];
          const scalar_t ry = ref_loc[(q * d.refs + r) * 2 + 1];
          for (int64_t l = 0; l < d.levels; ++l) {
            const int64_t m = m0 + l;
            const int64_t mh = shapes[2 * m];
            const int64_t mw = shapes[2 * m + 1];
            for (int64_t p = 0; p < d.points; ++p) {
              const int64_t oi =
                  ((((q * d.heads + h) * d.anchors + a) * d.levels + l) *
                       d.points + p) * 2;
              const int64_t wi =
                  (((q * d.heads + h) * d.refs + r) * d.levels + l) * d.points +
                  p;
              const scalar_t wgt = weights[wi];
              const scalar_t px = rx * static_cast<scalar_t>(mw) + offsets[oi] -
                                  scalar_t(0.5);
              const scalar_t py = ry * static_cast<scalar_t>(mh) +
                                  offsets[oi + 1] - scalar_t(0.5);
              const auto c = corners_at<scalar_t>(px, py, mh, mw, starts[m]);
              scalar_t gw = 0;
              scalar_t gx = 0;
              scalar_t gy = 0;
              for (int k = 0; k < 4; ++k) {
                if (c.row[k] < 0) continue;
                const scalar_t* v = value + (c.row[k] * d.heads + h) * ch;
                scalar_t* gv = grad_value + (c.row[k] * d.heads + h) * ch;
                scalar_t dot = 0;
                const scalar_t cw = wgt * c.w[k];
                for (int64_t e = 0; e < ch; ++e) {
                  dot += v[e] * go[e];
                  gv[e] += cw * go[e];
                }
                gw += c.w[k] * dot;
                gx += c.dwdx[k] * dot;
                gy += c.dwdy[k] * dot;
              }
              grad_weights[wi] += gw;
              grad_offsets[oi] += wgt * gx;
              grad_offsets[oi + 1] += wgt * gy;
            }
          }
        }
      }
    }
  });
}

Dims dims_of(const torch::Tensor& value, const ReferencePoints& refs,
             const torch::Tensor& offsets) {
  return Dims{refs.queries(), value.size(1), value.size(2), refs.refs(),
              offsets.size(2), offsets.size(3), offsets.size(4)};
}

class SampleFunction : public torch::autograd::Function<SampleFunction> {
 public:
  static torch::Tensor forward(torch::autograd::AutogradContext* ctx,
                               torch::Tensor value, torch::Tensor offsets,
                               torch::Tensor weights, torch::Tensor shapes,
                               torch::Tensor starts, torch::Tensor ref_loc,
                               torch::Tensor ref_map, torch::Tensor anchors) {
    value = value.contiguous();
    offsets = offsets.contiguous();
    weights = weights.contiguous();
    ref_loc = ref_loc.to(value.scalar_type()).contiguous();
    ReferencePoints refs{ref_loc, ref_map.contiguous(), anchors.contiguous()};
    const Dims d = dims_of(value, refs, offsets);
    auto out = torch::zeros({d.queries, d.heads, d.head_dim}, value.options());
    AT_DISPATCH_FLOATING_TYPES(value.scalar_type(), "deform_sample_forward", [&] {
      sample_forward_kernel<scalar_t>(
          d, value.data_ptr<scalar_t>(), shapes.data_ptr<int64_t>(),
          starts.data_ptr<int64_t>(), ref_loc.data_ptr<scalar_t>(),
          refs.map_index.data_ptr<int64_t>(),
          refs.anchor_of_ref.data_ptr<int64_t>(), offsets.data_ptr<scalar_t>(),
          weights.data_ptr<scalar_t>(), out.data_ptr<scalar_t>());
    });
    ctx->save_for_backward({value, offsets, weights, shapes, starts, ref_loc,
                            refs.map_index, refs.anchor_of_ref});
    return out;
  }

  static torch::autograd::variable_list backward(
      torch::autograd::AutogradContext* ctx,
      torch::autograd::variable_list grad_outputs) {
    auto saved = ctx->get_saved_variables();
    const auto& value = saved[0];
    const auto& offsets = saved[1];
    const auto& weights = saved[2];
    const auto& shapes = saved[3];
    const auto& starts = saved[4];
    const auto& ref_loc = saved[5];
    ReferencePoints refs{ref_loc, saved[6], saved[7]};
    const Dims d = dims_of(value, refs, offsets);
    const auto grad_out = grad_outputs[0].contiguous();
    auto grad_value = torch::zeros_like(value);
    auto grad_offsets = torch::zeros_like(offsets);
    auto grad_weights = torch::zeros_like(weights);
    AT_DISPATCH_FLOATING_TYPES(value.scalar_type(), "deform_sample_backward", [&] {
      sample_backward_kernel<scalar_t>(
          d, value.data_ptr<scalar_t>(), shapes.data_ptr<int64_t>(),
          starts.data_ptr<int64_t>(), ref_loc.data_ptr<scalar_t>(),
          refs.map_index.data_ptr<int64_t>(),
          refs.anchor_of_ref.data_ptr<int64_t>(), offsets.data_ptr<scalar_t>(),
          weights.data_ptr<scalar_t>(), grad_out.data_ptr<scalar_t>(),
          grad_value.data_ptr<scalar_t>(), grad_offsets.data_ptr<scalar_t>(),
          grad_weights.data_ptr<scalar_t>());
    });
    return {grad_value,      grad_offsets,    grad_weights,    torch::Tensor(),
            torch::Tensor(), torch::Tensor(), torch::Tensor(), torch::Tensor()};
  }
};

}  // namespace

ValueMaps ValueMaps::from_maps(const std::vector<torch::Tensor>& maps) {
  if (maps.empty()) throw ConfigError("ValueMaps: no maps given");
  const int64_t ch = maps.front().size(0);
  std::vector<torch::Tensor> rows;
  auto shapes = torch::empty({static_cast<int64_t>(maps.size()), 2}, torch::kInt64);
  auto starts = torch::empty({static_cast<int64_t>(maps.size())}, torch::kInt64);
  int64_t offset = 0;
  for (size_t m = 0; m < maps.size(); ++m) {
    const auto& map = maps[m];
    if (map.dim() != 3 || map.size(0) != ch) {
      throw ConfigError("ValueMaps: every map must be C x h x w with equal C");
    }
    shapes[m][0] = map.size(1);
    shapes[m][1] = map.size(2);
    starts[m] = offset;
    offset += map.size(1) * map.size(2);
    rows.push_back(map.flatten(1).t());
  }
  return ValueMaps{torch::cat(rows, 0), shapes, starts};
}

ValueMaps ValueMaps::from_batch(const torch::Tensor& batch) {
  if (batch.dim() != 4) throw ConfigError("ValueMaps: expected B x C x h x w");
  const int64_t b = batch.size(0);
  const int64_t h = batch.size(2);
  const int64_t w = batch.size(3);
  auto shapes = torch::empty({b, 2}, torch::kInt64);
  shapes.select(1, 0).fill_(h);
  shapes.select(1, 1).fill_(w);
  auto starts = torch::arange(b, torch::kInt64) * (h * w);
  auto flat = batch.flatten(2).transpose(1, 2).reshape({b * h * w, batch.size(1)});
  return ValueMaps{flat, shapes, starts};
}

ReferencePoints ReferencePoints::bev_plane(int64_t batch, int64_t x_cells,
                                           int64_t y_cells) {
  // Map rows run along x (height axis), columns along y (width axis).
  auto xs = (torch::arange(y_cells, torch::kFloat64) + 0.5) / static_cast<double>(y_cells);
  auto ys = (torch::arange(x_cells, torch::kFloat64) + 0.5) / static_cast<double>(x_cells);
  auto grid = torch::stack({xs.unsqueeze(0).expand({x_cells, y_cells}),
                            ys.unsqueeze(1).expand({x_cells, y_cells})},
                           -1)
                  .reshape({1, x_cells * y_cells, 1, 2})
                  .expand({batch, x_cells * y_cells, 1, 2})
                  .reshape({batch * x_cells * y_cells, 1, 2})
                  .to(torch::kFloat32)
                  .contiguous();
  auto maps = torch::arange(batch, torch::kInt64)
                  .repeat_interleave(x_cells * y_cells)
                  .unsqueeze(1)
                  .contiguous();
  return ReferencePoints{grid, maps, torch::zeros({1}, torch::kInt64)};
}

torch::Tensor sample_and_aggregate(const torch::Tensor& value,
                                   const torch::Tensor& shapes,
                                   const torch::Tensor& starts,
                                   const ReferencePoints& refs,
                                   const torch::Tensor& offsets,
                                   const torch::Tensor& weights) {
  if (value.dim() != 3 || offsets.dim() != 6 || weights.dim() != 5) {
    throw ConfigError("deformable sampling: unexpected tensor ranks");
  }
  const int64_t q = refs.queries();
  const int64_t h = value.size(1);
  if (offsets.size(0) != q || weights.size(0) != q || offsets.size(1) != h ||
      weights.size(1) != h || weights.size(2) != refs.refs() ||
      weights.size(3) != offsets.size(3) || weights.size(4) != offsets.size(4) ||
      refs.anchor_of_ref.size(0) != refs.refs()) {
    throw ConfigError("deformable sampling: inconsistent shapes");
  }
  if (refs.refs() > 0) {
    const int64_t max_anchor = refs.anchor_of_ref.max().item<int64_t>();
    if (max_anchor >= offsets.size(2)) {
      throw ConfigError("deformable sampling: anchor index out of range");
    }
    const int64_t max_map = refs.map_index.numel() > 0
                                ? refs.map_index.max().item<int64_t>()
                                : -1;
    if (max_map + offsets.size(3) > shapes.size(0)) {
      throw ConfigError("deformable sampling: map index out of range");
    }
  }
  return SampleFunction::apply(value, offsets, weights, shapes.contiguous(),
                               starts.contiguous(), refs.locations,
                               refs.map_index, refs.anchor_of_ref);
}

void DeformableAttentionOptions::validate() const {
  if (channels <= 0 || heads <= 0 || points <= 0 || levels <= 0 ||
      anchors <= 0) {
    throw ConfigError("deformable attention: sizes must be positive");
  }
  if (channels % heads != 0) {
    throw ConfigError("deformable attention: channels (" +
                      std::to_string(channels) + ") not divisible by heads (" +
                      std::to_string(heads) + ")");
  }
}

DeformableAttentionImpl::DeformableAttentionImpl(
    const DeformableAttentionOptions& options)
    : options_(options) {
  options_.validate();
  const auto& o = options_;
  const int64_t samples = o.heads * o.anchors * o.levels * o.points;
  offset_proj = register_module("offset_proj",
                                torch::nn::Linear(o.channels, samples * 2));
  attention_proj =
      register_module("attention_proj", torch::nn::Linear(o.channels, samples));
  value_proj =
      register_module("value_proj", torch::nn::Linear(o.channels, o.channels));
  output_proj =
      register_module("output_proj", torch::nn::Linear(o.channels, o.channels));
  reset_parameters();
}

void DeformableAttentionImpl::reset_parameters() {
  torch::NoGradGuard no_grad;
  const auto& o = options_;
  offset_proj->weight.zero_();
  auto bias = torch::empty({o.heads, o.anchors, o.levels, o.points, 2},
                           torch::kFloat64);
  const double total = static_cast<double>(o.heads * o.points);
  for (int64_t h = 0; h < o.heads; ++h) {
    for (int64_t p = 0; p < o.points; ++p) {
      const double theta =
          2.0 * std::numbers::pi * static_cast<double>(h * o.points + p) / total;
      bias.select(0, h).select(2, p).select(2, 0).fill_(o.init_radius *
                                                        std::cos(theta));
      bias.select(0, h).select(2, p).select(2, 1).fill_(o.init_radius *
                                                        std::sin(theta));
    }
  }
  offset_proj->bias.copy_(bias.flatten());
  attention_proj->weight.zero_();
  attention_proj->bias.zero_();
  torch::nn::init::xavier_uniform_(value_proj->weight);
  value_proj->bias.zero_();
  torch::nn::init::xavier_uniform_(output_proj->weight);
  output_proj->bias.zero_();
}

void DeformableAttentionImpl::force_zero_offsets() {
  torch::NoGradGuard no_grad;
  offset_proj->weight.zero_();
  offset_proj->bias.zero_();
}

void DeformableAttentionImpl::set_identity_projections() {
  torch::NoGradGuard no_grad;
  value_proj->weight.copy_(torch::eye(options_.channels));
  value_proj->bias.zero_();
  output_proj->weight.copy_(torch::eye(options_.channels));
  output_proj->bias.zero_();
}

void DeformableAttentionImpl::check_inputs(const torch::Tensor& queries,
                                           const ReferencePoints& refs,
                                           const ValueMaps* values) const {
  const auto& o = options_;
  if (queries.dim() != 2 || queries.size(1) != o.channels) {
    throw ConfigError("deformable attention: queries must be Q x " +
                      std::to_string(o.channels));
  }
  if (refs.locations.dim() != 3 || refs.locations.size(0) != queries.size(0) ||
      refs.locations.size(2) != 2 || refs.map_index.sizes() !=
      refs.locations.sizes().slice(0, 2)) {
    throw ConfigError("deformable attention: reference points do not match queries");
  }
  if (values != nullptr && values->channels() != o.channels) {
    throw ConfigError("deformable attention: value maps have " +
                      std::to_string(values->channels()) + " channels, expected " +
                      std::to_string(o.channels));
  }
}

torch::Tensor DeformableAttentionImpl::sampling_offsets(
    const torch::Tensor& queries) {
  const auto& o = options_;
  return offset_proj->forward(queries).view(
      {queries.size(0), o.heads, o.anchors, o.levels, o.points, 2});
}

torch::Tensor DeformableAttentionImpl::attention_weights(
    const torch::Tensor& queries, const ReferencePoints& refs) {
  check_inputs(queries, refs, nullptr);
  const auto& o = options_;
  const int64_t q = queries.size(0);
  const int64_t r = refs.refs();
  auto logits = attention_proj->forward(queries)
                    .view({q, o.heads, o.anchors, o.levels * o.points})
                    .index_select(2, refs.anchor_of_ref)  // Q x H x R x LP
                    .reshape({q, o.heads, r * o.levels * o.points});
  auto valid = (refs.map_index >= 0)
                   .view({q, 1, r, 1})
                   .expand({q, o.heads, r, o.levels * o.points})
                   .reshape({q, o.heads, r * o.levels * o.points});
  auto safe = torch::where(valid, logits, torch::zeros_like(logits));
  auto shift = std::get<0>(
      torch::where(valid, safe, torch::full_like(safe, -1e30)).max(-1, true));
  shift = torch::where(shift > -1e29, shift, torch::zeros_like(shift)).detach();
  auto e = torch::exp(safe - shift) * valid.to(safe.scalar_type());
  auto denom = e.sum(-1, true);
  denom = denom + (denom == 0).to(denom.scalar_type());
  return (e / denom).view({q, o.heads, r, o.levels, o.points});
}

torch::Tensor DeformableAttentionImpl::forward(const torch::Tensor& queries,
                                               const ReferencePoints& refs,
                                               const ValueMaps& values) {
  check_inputs(queries, refs, &values);
  const auto& o = options_;
  const int64_t head_dim = o.channels / o.heads;
  auto value = value_proj->forward(values.flat)
                   .view({values.flat.size(0), o.heads, head_dim});
  auto weights = attention_weights(queries, refs);
  auto offsets = sampling_offsets(queries);
  auto sampled = sample_and_aggregate(value, values.shapes, values.starts, refs,
                                      offsets, weights);
  auto out = output_proj->forward(sampled.reshape({queries.size(0), o.channels}));
  auto has_valid = (refs.map_index >= 0).any(1, true).to(out.scalar_type());
  return out * has_valid;
}

DeformableBlockImpl::DeformableBlockImpl(
    const DeformableAttentionOptions& options, double ffn_expansion) {
  const int64_t c = options.channels;
  const auto hidden = static_cast<int64_t>(ffn_expansion * static_cast<double>(c));
  attn_norm = register_module(
      "attn_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({c})));
  ffn_norm = register_module(
      "ffn_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({c})));
  attention = register_module("attention", DeformableAttention(options));
  ffn = register_module(
      "ffn", torch::nn::Sequential(torch::nn::Linear(c, hidden), torch::nn::GELU(),
                                   torch::nn::Linear(hidden, c)));
}

std::pair<torch::Tensor, torch::Tensor>
DeformableBlockImpl::forward_with_attention(const torch::Tensor& queries,
                                            const ReferencePoints& refs,
                                            const ValueMaps& values) {
  auto attended = attention->forward(attn_norm->forward(queries), refs, values);
  auto q = queries + attended;
  q = q + ffn->forward(ffn_norm->forward(q));
  return {q, attended};
}

torch::Tensor DeformableBlockImpl::forward(const torch::Tensor& queries,
                                           const ReferencePoints& refs,
                                           const ValueMaps& values) {
  return forward_with_attention(queries, refs, values).first;
}

}  // namespace bevcar::attention
