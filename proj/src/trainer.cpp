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
#include "bevcar/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "bevcar/checkpoint.hpp"
#include "bevcar/errors.hpp"

namespace bevcar::trainer {

namespace fs = std::filesystem;
using nlohmann::json;

void enable_determinism() {
  torch::set_num_threads(1);
  at::globalContext().setDeterministicAlgorithms(true, false);
}

double learning_rate(const config::OptimizerConfig& opt, int64_t step) {
  if (opt.steps <= 0) return opt.lr;
  if (step < opt.warmup_steps) {
    return opt.lr * static_cast<double>(step + 1) /
           static_cast<double>(opt.warmup_steps);
  }
  const int64_t decay = std::max<int64_t>(1, opt.steps - opt.warmup_steps);
  const double t = std::min(1.0, static_cast<double>(step - opt.warmup_steps) /
                                     static_cast<double>(decay));
  return opt.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

std::vector<data::Sample> load_all(const std::string& root,
                                   const std::vector<std::string>& tokens) {
  auto list = tokens.empty() ? data::list_tokens(root) : tokens;
  data::SampleLoader loader(root, list, 4, true, 1);
  std::vector<data::Sample> out;
  while (auto s = loader.next()) out.push_back(std::move(*s));
  return out;
}

namespace {

struct LossParts {
  torch::Tensor total;
  double bce = 0.0;
  double focal = 0.0;
};

LossParts compute_loss(const torch::Tensor& logits, const model::Batch& batch,
                       const segmentation::LossConfig& loss) {
  auto bce = segmentation::bce_loss(logits.select(1, segmentation::kVehicle),
                                    batch.gt.vehicle, batch.gt.valid);
  auto focal = segmentation::focal_loss(logits.slice(1, 1), batch.gt.map,
                                        batch.gt.valid, loss);
  LossParts p;
  p.total = segmentation::total_loss(bce.value, focal.value, loss);
  p.bce = bce.value.item<double>();
  p.focal = focal.value.item<double>();
  return p;
}

class JsonLog {
 public:
  explicit JsonLog(const std::string& path) {
    const fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    out_.open(path, std::ios::app);
    if (!out_) throw ConfigError("cannot open log file '" + path + "'");
  }
  void write(const json& j) {
    out_ << j.dump() << "\n";
    out_.flush();
  }

 private:
  std::ofstream out_;
};

std::string checkpoint_path(const std::string& dir, const std::string& name) {
  return (fs::path(dir) / name).string();
}

}  // namespace

TrainResult train(const config::RunConfig& config, const TrainOptions& options) {
  if (config.dataset.empty()) throw ConfigError("train: no dataset configured");
  const auto samples = load_all(config.dataset);
  if (samples.empty()) throw DataError("dataset '" + config.dataset + "' holds no samples");
  std::vector<data::Sample> holdout;
  if (!config.eval_dataset.empty()) holdout = load_all(config.eval_dataset);
  return train_on(config, samples, options, holdout.empty() ? nullptr : &holdout);
}

TrainResult train_on(const config::RunConfig& config,
                     const std::vector<data::Sample>& samples,
                     const TrainOptions& options,
                     const std::vector<data::Sample>* holdout) {
  config.validate();
  if (samples.empty()) throw ConfigError("train: no samples");
  if (options.deterministic) enable_determinism();

  torch::manual_seed(config.seed);
  model::BevCarModel net(config.model);
  net->train();
  torch::optim::AdamW optimizer(
      net->parameters(), torch::optim::AdamWOptions(config.optimizer.lr)
                             .weight_decay(config.optimizer.weight_decay));

  const std::string log_path = options.log_path.empty()
                                   ? checkpoint_path(config.checkpoint_dir, "train_log.jsonl")
                                   : options.log_path;
  fs::create_directories(config.checkpoint_dir);
  std::error_code ec;
  fs::remove(log_path, ec);
  JsonLog log(log_path);
  log.write({{"event", "start"},
             {"config", config::to_json(config)},
             {"config_hash", config::config_hash(config.model)},
             {"samples", samples.size()}});

  std::mt19937_64 order_rng(data::derive_seed(config.seed, 11));
  std::vector<size_t> order;
  size_t cursor = 0;
  auto next_indices = [&] {
    std::vector<size_t> idx;
    for (int64_t b = 0; b < config.batch_size; ++b) {
      if (cursor == order.size()) {
        order.resize(samples.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::shuffle(order.begin(), order.end(), order_rng);
        cursor = 0;
      }
      idx.push_back(order[cursor++]);
    }
    return idx;
  };

  TrainResult result;
  for (int64_t step = 0; step < config.optimizer.steps; ++step) {
    const double lr = learning_rate(config.optimizer, step);
    for (auto& group : optimizer.param_groups()) {
      static_cast<torch::optim::AdamWOptions&>(group.options()).lr(lr);
    }
    std::vector<const data::Sample*> picked;
    for (size_t i : next_indices()) picked.push_back(&samples[i]);
    const auto batch = model::collate(picked, config.model);

    optimizer.zero_grad();
    const auto logits = net->forward(batch);
    auto loss = compute_loss(logits, batch, config.loss);
    const double value = loss.total.item<double>();
    if (!std::isfinite(value)) {
      const std::string dump = checkpoint_path(config.checkpoint_dir, "nan_dump.json");
      json d = {{"step", step + 1}, {"tokens", batch.tokens}, {"lr", lr},
                {"bce", std::isfinite(loss.bce) ? json(loss.bce) : json("non-finite")},
                {"focal", std::isfinite(loss.focal) ? json(loss.focal) : json("non-finite")}};
      std::ofstream(dump) << d.dump(2) << "\n";
      log.write({{"event", "abort"}, {"step", step + 1}, {"tokens", batch.tokens}});
      std::string tokens;
      for (const auto& t : batch.tokens) tokens += (tokens.empty() ? "" : ", ") + t;
      throw TrainingError("non-finite loss at step " + std::to_string(step + 1) +
                          " on batch [" + tokens + "]; diagnostics written to " + dump);
    }
    loss.total.backward();
    if (config.optimizer.grad_clip > 0.0) {
      torch::nn::utils::clip_grad_norm_(net->parameters(), config.optimizer.grad_clip);
    }
    optimizer.step();

    result.losses.push_back(value);
    result.steps = step + 1;
    log.write({{"event", "step"},
               {"step", step + 1},
               {"loss", value},
               {"bce", loss.bce},
               {"focal", loss.focal},
               {"lr", lr},
               {"tokens", batch.tokens}});
    if (options.on_step) options.on_step(step + 1, value);

    if (config.eval_every > 0 && (step + 1) % config.eval_every == 0 && holdout != nullptr) {
      const auto report = evaluate(*net, *holdout);
      log.write({{"event", "eval"}, {"step", step + 1}, {"report", report.to_json()}});
      net->train();
    }
    if (config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0) {
      char name[32];
      std::snprintf(name, sizeof(name), "step_%06lld.ckpt", static_cast<long long>(step + 1));
      checkpoint::save(checkpoint_path(config.checkpoint_dir, name), config, step + 1, *net);
    }
  }

  result.checkpoint = checkpoint_path(config.checkpoint_dir, "final.ckpt");
  checkpoint::save(result.checkpoint, config, result.steps, *net);
  if (options.final_eval) {
    const auto report = evaluate(*net, samples);
    result.final_eval = report.to_json();
    log.write({{"event", "final_eval"}, {"step", result.steps}, {"report", *result.final_eval}});
  }
  return result;
}

metrics::IoUAccumulator accumulate(const torch::Tensor& logits,
                                   const segmentation::BevGroundTruth& gt,
                                   const torch::Tensor& region) {
  metrics::IoUAccumulator acc;
  acc.update_all(segmentation::predict_masks(logits), gt.stacked(), region);
  return acc;
}

namespace {

// Mirrors BevGroundTruth::stacked for single samples.
torch::Tensor region_of(const data::Sample& s, const torch::Tensor& extra) {
  auto r = s.gt.valid.to(torch::kBool);
  return extra.defined() ? r & extra : r;
}

json acc_json(const metrics::IoUAccumulator& acc) {
  return metrics::summarize(acc).to_json();
}

}  // namespace

EvalReport evaluate(model::BevCarModelImpl& model,
                    const std::vector<data::Sample>& samples,
                    const EvalOptions& options) {
  EvalReport report;
  std::vector<torch::Tensor> range_masks;
  if (options.ranges) {
    range_masks = metrics::range_masks(model.config().grid, options.intervals);
    for (size_t i = 0; i < options.intervals.size(); ++i) {
      report.ranges.emplace_back(options.intervals.label(i), metrics::IoUAccumulator());
    }
  }
  if (options.conditions) {
    if (options.split) {
      std::vector<std::string> missing;
      for (const auto& s : samples) {
        if (!options.split->condition_of.count(s.token)) missing.push_back(s.token);
      }
      if (!missing.empty()) {
        std::string list;
        for (const auto& t : missing) list += (list.empty() ? "" : ", ") + t;
        throw ConfigError("tokens missing from the condition split: " + list);
      }
    }
    for (auto c : {metrics::Condition::kDay, metrics::Condition::kRain,
                   metrics::Condition::kNight}) {
      report.conditions.emplace_back(c, metrics::IoUAccumulator());
    }
  }
  for (const auto& s : samples) {
    const auto logits = predict(model, s);
    const auto per_sample = accumulate(logits, s.gt, region_of(s, {}));
    report.overall.merge(per_sample);
    for (size_t i = 0; i < range_masks.size(); ++i) {
      report.ranges[i].second.merge(accumulate(logits, s.gt, region_of(s, range_masks[i])));
    }
    if (options.conditions) {
      const auto cond = options.split ? options.split->condition_of.at(s.token) : s.condition;
      for (auto& [c, acc] : report.conditions) {
        if (c == cond) acc.merge(per_sample);
      }
    }
    ++report.samples;
  }
  return report;
}

json EvalReport::to_json() const {
  json j = {{"samples", samples}, {"overall", acc_json(overall)}};
  if (!ranges.empty()) {
    json r = json::object();
    for (const auto& [label, acc] : ranges) r[label] = acc_json(acc);
    j["ranges"] = r;
  }
  if (!conditions.empty()) {
    json c = json::object();
    for (const auto& [cond, acc] : conditions) c[metrics::to_string(cond)] = acc_json(acc);
    j["conditions"] = c;
  }
  return j;
}

std::string EvalReport::to_text() const {
  std::ostringstream os;
  os << "samples: " << samples << "\n\n" << metrics::summarize(overall).to_table();
  auto cell = [](double v) {
    char buf[16];
    if (std::isnan(v)) {
      std::snprintf(buf, sizeof(buf), "%10s", "n/a");
    } else {
      std::snprintf(buf, sizeof(buf), "%10.1f", metrics::round_one_decimal(100.0 * v));
    }
    return std::string(buf);
  };
  if (!ranges.empty()) {
    std::vector<metrics::MetricsReport> reps;
    os << "\nrange" << std::string(11, ' ');
    for (const auto& [label, acc] : ranges) {
      char buf[16];
      std::snprintf(buf, sizeof(buf), "%10s", label.c_str());
      os << buf;
      reps.push_back(metrics::summarize(acc));
    }
    os << "\n";
    for (size_t c = 0; c < segmentation::kClassNames.size(); ++c) {
      char name[20];
      std::snprintf(name, sizeof(name), "%-16s", std::string(segmentation::kClassNames[c]).c_str());
      os << name;
      for (const auto& r : reps) os << cell(r.class_iou[c]);
      os << "\n";
    }
    os << "map             ";
    for (const auto& r : reps) os << cell(r.map_mean);
    os << "\nmIoU            ";
    for (const auto& r : reps) os << cell(r.miou);
    os << "\n";
  }
  for (const auto& [cond, acc] : conditions) {
    os << "\n[" << metrics::to_string(cond) << "]\n" << metrics::summarize(acc).to_table();
  }
  return os.str();
}

LoadedModel load_model(const std::string& checkpoint_path) {
  const auto ck = checkpoint::read(checkpoint_path);
  LoadedModel out;
  out.config = ck.config;
  out.step = ck.step;
  out.model = model::BevCarModel(ck.config.model);
  checkpoint::load_into(ck, *out.model, config::config_hash(ck.config.model));
  out.model->eval();
  return out;
}

torch::Tensor predict(model::BevCarModelImpl& model, const data::Sample& sample) {
  torch::NoGradGuard no_grad;
  const bool was_training = model.is_training();
  model.eval();
  const auto batch = model::collate({&sample}, model.config());
  auto logits = model.forward(batch)[0].to(torch::kFloat32).contiguous();
  if (was_training) model.train();
  return logits;
}

void write_npy(const std::string& path, const torch::Tensor& tensor) {
  const auto t = tensor.detach().to(torch::kFloat32).contiguous();
  std::string shape = "(";
  for (int64_t d = 0; d < t.dim(); ++d) {
    shape += std::to_string(t.size(d)) + (t.dim() == 1 ? ",)" : (d + 1 < t.dim() ? ", " : ")"));
  }
  if (t.dim() == 0) shape = "()";
  std::string header =
      "{'descr': '<f4', 'fortran_order': False, 'shape': " + shape + ", }";
  const size_t preamble = 10;
  const size_t total = ((preamble + header.size() + 1 + 63) / 64) * 64;
  header.append(total - preamble - header.size() - 1, ' ');
  header.push_back('\n');
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  const char magic[8] = {'\x93', 'N', 'U', 'M', 'P', 'Y', 1, 0};
  out.write(magic, 8);
  const uint16_t len = static_cast<uint16_t>(header.size());
  const char len_bytes[2] = {static_cast<char>(len & 0xFF), static_cast<char>(len >> 8)};
  out.write(len_bytes, 2);
  out << header;
  out.write(reinterpret_cast<const char*>(t.data_ptr<float>()),
            static_cast<std::streamsize>(t.numel() * sizeof(float)));
  if (!out) throw DataError("failed writing '" + path + "'");
}

torch::Tensor read_npy(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  char magic[10];
  in.read(magic, 10);
  if (!in || std::memcmp(magic, "\x93NUMPY", 6) != 0 || magic[6] != 1) {
    throw DataError("'" + path + "' is not a version 1 .npy file");
  }
  const auto len = static_cast<size_t>(static_cast<uint8_t>(magic[8]) |
                                       (static_cast<uint8_t>(magic[9]) << 8));
  std::string header(len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(len));
  if (header.find("'<f4'") == std::string::npos ||
      header.find("'fortran_order': False") == std::string::npos) {
    throw DataError("'" + path + "': only C-order float32 arrays are supported");
  }
  const auto open = header.find('(', header.find("'shape'"));
  const auto close = header.find(')', open);
  std::vector<int64_t> shape;
  std::stringstream ss(header.substr(open + 1, close - open - 1));
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.find_first_not_of(' ') != std::string::npos) shape.push_back(std::stoll(item));
  }
  auto t = torch::empty(shape, torch::kFloat32);
  in.read(reinterpret_cast<char*>(t.data_ptr<float>()),
          static_cast<std::streamsize>(t.numel() * sizeof(float)));
  if (!in) throw DataError("'" + path + "': truncated data");
  return t;
}

namespace {

png::Image blank(int64_t x, int64_t y) {
  png::Image img;
  img.height = x;
  img.width = y;
  img.channels = 3;
  img.pixels.assign(static_cast<size_t>(x * y * 3), 0);
  return img;
}

void paint(png::Image& img, int64_t i, int64_t j, const std::array<uint8_t, 3>& c) {
  const int64_t row = img.height - 1 - i;
  const int64_t col = img.width - 1 - j;
  auto* p = img.pixels.data() + (row * img.width + col) * 3;
  p[0] = c[0];
  p[1] = c[1];
  p[2] = c[2];
}

}  // namespace

png::Image render_masks(const torch::Tensor& masks) {
  if (masks.dim() != 3 || masks.size(0) != segmentation::kOutputChannels) {
    throw ConfigError("render: expected (M+1) x X x Y masks");
  }
  const auto m = masks.to(torch::kBool).contiguous();
  auto acc = m.accessor<bool, 3>();
  const int64_t x = m.size(1);
  const int64_t y = m.size(2);
  auto img = blank(x, y);
  for (int64_t i = 0; i < x; ++i) {
    for (int64_t j = 0; j < y; ++j) {
      std::array<uint8_t, 3> color = kPalette[8];
      for (int64_t c = 1; c < segmentation::kOutputChannels; ++c) {
        if (acc[c][i][j]) color = kPalette[static_cast<size_t>(c)];
      }
      if (acc[0][i][j]) color = kPalette[0];
      paint(img, i, j, color);
    }
  }
  return img;
}

png::Image render_error_map(const torch::Tensor& pred, const torch::Tensor& gt,
                            const torch::Tensor& valid) {
  if (pred.sizes() != gt.sizes() || pred.dim() != 3 ||
      valid.sizes() != pred.sizes().slice(1)) {
    throw ConfigError("error map: prediction, ground truth and valid mask differ in shape");
  }
  const auto p = pred.to(torch::kBool);
  const auto g = gt.to(torch::kBool);
  const auto fp = (p & ~g).any(0);
  const auto fn = (~p & g).any(0);
  const auto v = valid.to(torch::kBool);
  auto fpa = fp.accessor<bool, 2>();
  auto fna = fn.accessor<bool, 2>();
  auto va = v.accessor<bool, 2>();
  const int64_t x = p.size(1);
  const int64_t y = p.size(2);
  auto img = blank(x, y);
  for (int64_t i = 0; i < x; ++i) {
    for (int64_t j = 0; j < y; ++j) {
      std::array<uint8_t, 3> color = kNeutral;
      if (!va[i][j]) {
        color = kInvalid;
      } else if (fpa[i][j] && fna[i][j]) {
        color = kBothErrors;
      } else if (fpa[i][j]) {
        color = kFalsePositive;
      } else if (fna[i][j]) {
        color = kFalseNegative;
      }
      paint(img, i, j, color);
    }
  }
  return img;
}

metrics::RuntimeStats benchmark(model::BevCarModelImpl& model,
                                const data::Sample& sample, int repetitions) {
  torch::NoGradGuard no_grad;
  model.eval();
  const auto batch = model::collate({&sample}, model.config());
  return metrics::measure_runtime([&] { model.forward(batch); }, repetitions, 1);
}

}  // namespace bevcar::trainer
