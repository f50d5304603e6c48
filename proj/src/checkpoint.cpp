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
#include "bevcar/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>

#include "bevcar/errors.hpp"
#include "bevcar/model.hpp"
#include "bevcar/segmentation.hpp"

namespace bevcar::checkpoint {

namespace fs = std::filesystem;
static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are written in native byte order");

namespace {

template <typename T>
void put_le(std::string& out, T v) {
  for (size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<char>((static_cast<uint64_t>(v) >> (8 * i)) & 0xFF));
  }
}

template <typename T>
T get_le(const unsigned char* p) {
  uint64_t v = 0;
  for (size_t i = 0; i < sizeof(T); ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
  return static_cast<T>(v);
}

}  // namespace

void save(const std::string& path, const config::RunConfig& config, int64_t step,
          const torch::nn::Module& module) {
  nlohmann::json tensors = nlohmann::json::array();
  std::string blobs;
  for (const auto& [name, t] : model::state_tensors(module)) {
    const auto f = t.detach().to(torch::kFloat32).contiguous();
    const auto bytes = static_cast<size_t>(f.numel()) * sizeof(float);
    tensors.push_back({{"name", name},
                       {"shape", f.sizes().vec()},
                       {"offset", blobs.size()},
                       {"numel", f.numel()}});
    blobs.append(reinterpret_cast<const char*>(f.data_ptr<float>()), bytes);
  }
  nlohmann::json manifest = {{"config", config::to_json(config)},
                             {"config_hash", config::config_hash(config.model)},
                             {"step", step},
                             {"class_order", segmentation::class_order_json()},
                             {"tensors", tensors}};
  const std::string text = manifest.dump();
  std::string header(kMagic, sizeof(kMagic));
  put_le<uint32_t>(header, kFormatVersion);
  put_le<uint64_t>(header, text.size());

  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint '" + path + "'");
    out << header << text << blobs;
    if (!out) throw CheckpointError("failed writing checkpoint '" + path + "'");
  }
  fs::rename(tmp, target);
}

Checkpoint read(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 20 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError("'" + path + "' is not a bevcar checkpoint");
  }
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const auto version = get_le<uint32_t>(p + 8);
  if (version != kFormatVersion) {
    throw CheckpointError("'" + path + "': format version " + std::to_string(version) +
                          " is not supported (expected " +
                          std::to_string(kFormatVersion) + ")");
  }
  const auto len = get_le<uint64_t>(p + 12);
  if (20 + len > bytes.size()) throw CheckpointError("'" + path + "': truncated manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(20, len));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("'" + path + "': malformed manifest: " + e.what());
  }
  Checkpoint ck;
  try {
    ck.config = config::from_json(manifest.at("config"));
    ck.config_hash = manifest.at("config_hash").get<std::string>();
    ck.step = manifest.at("step").get<int64_t>();
    if (manifest.at("class_order") != segmentation::class_order_json()) {
      throw CheckpointError("'" + path + "': class order differs from this build");
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("'" + path + "': incomplete manifest: " + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError("'" + path + "': invalid configuration: " + e.what());
  }
  if (ck.config_hash != config::config_hash(ck.config.model)) {
    throw CheckpointError("'" + path + "': config hash " + ck.config_hash +
                          " does not match the stored configuration");
  }
  const size_t base = 20 + len;
  for (const auto& t : manifest.at("tensors")) {
    const auto name = t.at("name").get<std::string>();
    const auto shape = t.at("shape").get<std::vector<int64_t>>();
    const auto offset = t.at("offset").get<size_t>();
    const auto numel = t.at("numel").get<int64_t>();
    const size_t nbytes = static_cast<size_t>(numel) * sizeof(float);
    if (base + offset + nbytes > bytes.size()) {
      throw CheckpointError("'" + path + "': tensor '" + name + "' is truncated");
    }
    auto tensor = torch::empty(shape, torch::kFloat32);
    if (tensor.numel() != numel) {
      throw CheckpointError("'" + path + "': tensor '" + name + "' shape/numel mismatch");
    }
    std::memcpy(tensor.data_ptr<float>(), bytes.data() + base + offset, nbytes);
    ck.tensors.emplace_back(name, tensor);
  }
  return ck;
}

void load_into(const Checkpoint& ckpt, torch::nn::Module& module,
               const std::string& expected_hash) {
  if (ckpt.config_hash != expected_hash) {
    throw CheckpointError("checkpoint config hash " + ckpt.config_hash +
                          " does not match model config hash " + expected_hash);
  }
  std::map<std::string, torch::Tensor> stored(ckpt.tensors.begin(), ckpt.tensors.end());
  torch::NoGradGuard no_grad;
  for (auto& [name, t] : model::state_tensors(module)) {
    auto it = stored.find(name);
    if (it == stored.end()) throw CheckpointError("checkpoint lacks tensor '" + name + "'");
    if (it->second.sizes() != t.sizes()) {
      throw CheckpointError("checkpoint tensor '" + name + "' has the wrong shape");
    }
    t.copy_(it->second.to(t.scalar_type()));
    stored.erase(it);
  }
  if (!stored.empty()) {
    throw CheckpointError("checkpoint holds unknown tensor '" + stored.begin()->first + "'");
  }
}

}  // namespace bevcar::checkpoint
