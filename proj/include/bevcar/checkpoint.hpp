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
#ifndef BEVCAR_CHECKPOINT_HPP_
#define BEVCAR_CHECKPOINT_HPP_

// Single-file checkpoint container:
//
//   offset 0   8 bytes   magic "BEVCARCK"
//   offset 8   4 bytes   format version, uint32 little-endian
//   offset 12  8 bytes   manifest length L, uint64 little-endian
//   offset 20  L bytes   UTF-8 JSON manifest
//   then       blobs     raw little-endian float32 tensors, back to back
//
// The manifest holds "config" (full run configuration), "config_hash"
// (hash of the model section), "step", "class_order" and "tensors", a list
// of {name, shape, offset, numel} with offsets relative to the first blob.

#include <cstdint>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "bevcar/config.hpp"
#include "json.hpp"

namespace bevcar::checkpoint {

inline constexpr char kMagic[8] = {'B', 'E', 'V', 'C', 'A', 'R', 'C', 'K'};
inline constexpr uint32_t kFormatVersion = 1;

struct Checkpoint {
  config::RunConfig config;
  std::string config_hash;
  int64_t step = 0;
  std::vector<std::pair<std::string, torch::Tensor>> tensors;  // float32
};

void save(const std::string& path, const config::RunConfig& config, int64_t step,
          const torch::nn::Module& module);

// Verifies magic, format version and that the stored hash matches the
// stored configuration. Throws CheckpointError.
Checkpoint read(const std::string& path);

// Copies tensors into `module`. Fails when the checkpoint's configuration
// hash differs from `expected_hash` or any tensor is missing or misshaped.
void load_into(const Checkpoint& ckpt, torch::nn::Module& module,
               const std::string& expected_hash);

}  // namespace bevcar::checkpoint

#endif  // BEVCAR_CHECKPOINT_HPP_
