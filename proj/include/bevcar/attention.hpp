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
#ifndef BEVCAR_ATTENTION_HPP_
#define BEVCAR_ATTENTION_HPP_

// Multi-head deformable attention.
//
// Every query owns R reference points. Reference r lives on a stack of L
// consecutive value maps starting at map_index(q, r) and belongs to anchor
// group anchor_of_ref[r]; the query predicts, per head, P sampling offsets
// for each (anchor, level) pair and one attention logit per sample. Offsets
// are expressed in pixels of the map being sampled. Softmax runs over all
// valid (reference, level, point) samples of a head.
//
// Sampling uses pixel centres at half-integer coordinates (a normalised
// location x in [0, 1] maps to pixel coordinate x * w - 0.5) and reads zero
// outside the map. At an exact integer coordinate the gradient is taken from
// the cell whose lower corner is that coordinate.

#include <cstdint>
#include <vector>

#include <torch/torch.h>

namespace bevcar::attention {

// Value maps concatenated channel-last into one T x C tensor.
struct ValueMaps {
  torch::Tensor flat;    // T x C
  torch::Tensor shapes;  // M x 2 int64, (height, width)
  torch::Tensor starts;  // M int64, row offset of each map in `flat`

  int64_t count() const { return shapes.size(0); }
  int64_t channels() const { return flat.size(1); }

  // Each map is C x h x w; map m of the result is maps[m].
  static ValueMaps from_maps(const std::vector<torch::Tensor>& maps);
  // B x C x h x w -> B maps.
  static ValueMaps from_batch(const torch::Tensor& batch);
};

struct ReferencePoints {
  torch::Tensor locations;  // Q x R x 2, normalised (x along width, y along height)
  torch::Tensor map_index;  // Q x R int64, first map of the level stack; -1 = invalid
  torch::Tensor anchor_of_ref;  // R int64, anchor group of each reference

  int64_t queries() const { return locations.size(0); }
  int64_t refs() const { return locations.size(1); }

  // One reference per query at the centre of its own cell of an X x Y
  // plane, repeated for `batch` samples (query b*X*Y + i*Y + j uses map b).
  static ReferencePoints bev_plane(int64_t batch, int64_t x_cells,
                                   int64_t y_cells);
};

// Raw sampler: value T x H x Ch, offsets Q x H x A x L x P x 2,
// weights Q x H x R x L x P. Returns Q x H x Ch. Differentiable with respect
// to value, offsets and weights.
torch::Tensor sample_and_aggregate(const torch::Tensor& value,
                                   const torch::Tensor& shapes,
                                   const torch::Tensor& starts,
                                   const ReferencePoints& refs,
                                   const torch::Tensor& offsets,
                                   const torch::Tensor& weights);

struct DeformableAttentionOptions {
  int64_t channels = 64;
  int64_t heads = 4;
  int64_t points = 4;
  int64_t levels = 1;
  int64_t anchors = 1;
  // Radius of the initial sampling ring, in pixels of the sampled map.
  double init_radius = 1.0;

  void validate() const;
};

class DeformableAttentionImpl : public torch::nn::Module {
 public:
  explicit DeformableAttentionImpl(const DeformableAttentionOptions& options);

  // queries Q x C -> Q x C. Queries without a valid reference output zero.
  torch::Tensor forward(const torch::Tensor& queries,
                        const ReferencePoints& refs, const ValueMaps& values);

  // Normalised attention weights Q x H x R x L x P (zero on invalid samples).
  torch::Tensor attention_weights(const torch::Tensor& queries,
                                  const ReferencePoints& refs);
  // Sampling offsets Q x H x A x L x P x 2 in pixels.
  torch::Tensor sampling_offsets(const torch::Tensor& queries);

  void reset_parameters();
  // Test hooks that pin parts of the mechanism.
  void force_zero_offsets();
  void set_identity_projections();

  const DeformableAttentionOptions& options() const { return options_; }

  torch::nn::Linear offset_proj{nullptr};
  torch::nn::Linear attention_proj{nullptr};
  torch::nn::Linear value_proj{nullptr};
  torch::nn::Linear output_proj{nullptr};

 private:
  void check_inputs(const torch::Tensor& queries, const ReferencePoints& refs,
                    const ValueMaps* values) const;

  DeformableAttentionOptions options_;
};
TORCH_MODULE(DeformableAttention);

// Pre-normalised transformer block around a deformable cross-attention:
//   q <- q + attn(LN(q)),  q <- q + FFN(LN(q)).
class DeformableBlockImpl : public torch::nn::Module {
 public:
  DeformableBlockImpl(const DeformableAttentionOptions& options,
                      double ffn_expansion = 2.0);

  torch::Tensor forward(const torch::Tensor& queries,
                        const ReferencePoints& refs, const ValueMaps& values);
  // Same as forward, also returning the attention output before the
  // residual add.
  std::pair<torch::Tensor, torch::Tensor> forward_with_attention(
      const torch::Tensor& queries, const ReferencePoints& refs,
      const ValueMaps& values);

  torch::nn::LayerNorm attn_norm{nullptr};
  torch::nn::LayerNorm ffn_norm{nullptr};
  DeformableAttention attention{nullptr};
  torch::nn::Sequential ffn{nullptr};
};
TORCH_MODULE(DeformableBlock);

}  // namespace bevcar::attention

#endif  // BEVCAR_ATTENTION_HPP_
