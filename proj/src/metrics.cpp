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
#include "bevcar/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "bevcar/errors.hpp"

namespace bevcar::metrics {

IoUAccumulator::IoUAccumulator(int64_t classes)
    : intersection_(static_cast<size_t>(classes), 0),
      union_(static_cast<size_t>(classes), 0) {}

void IoUAccumulator::update(int64_t cls, const torch::Tensor& pred,
                            const torch::Tensor& gt,
                            const torch::Tensor& region) {
  if (cls < 0 || cls >= classes()) throw ConfigError("IoU: class out of range");
  if (pred.sizes() != gt.sizes() || pred.sizes() != region.sizes()) {
    throw ConfigError("IoU: masks differ in shape");
  }
  const auto p = pred.to(torch::kBool) & region.to(torch::kBool);
  const auto g = gt.to(torch::kBool) & region.to(torch::kBool);
  intersection_[cls] += (p & g).sum().item<int64_t>();
  union_[cls] += (p | g).sum().item<int64_t>();
}

void IoUAccumulator::update_all(const torch::Tensor& pred,
                                const torch::Tensor& gt,
                                const torch::Tensor& region) {
  if (pred.dim() != 3 || pred.size(0) != classes()) {
    throw ConfigError("IoU: expected C x X x Y predictions");
  }
  for (int64_t c = 0; c < classes(); ++c) update(c, pred[c], gt[c], region);
}

IoUAccumulator& IoUAccumulator::merge(const IoUAccumulator& other) {
  if (other.classes() != classes()) {
    throw ConfigError("IoU: cannot merge accumulators with different classes");
  }
  for (size_t c = 0; c < intersection_.size(); ++c) {
    intersection_[c] += other.intersection_[c];
    union_[c] += other.union_[c];
  }
  return *this;
}

double IoUAccumulator::iou(int64_t cls) const {
  if (union_[cls] == 0) return std::numeric_limits<double>::quiet_NaN();
  return static_cast<double>(intersection_[cls]) /
         static_cast<double>(union_[cls]);
}

IoUAccumulator operator+(IoUAccumulator a, const IoUAccumulator& b) {
  a.merge(b);
  return a;
}

double round_one_decimal(double value) {
  if (!std::isfinite(value)) return value;
  const long long micro = std::llround(value * 1e6);
  const long long half = micro >= 0 ? 50000 : -50000;
  const long long tenths = (micro + half) / 100000;
  return static_cast<double>(tenths) / 10.0;
}

MetricsReport summarize(std::span<const double> class_iou) {
  MetricsReport r;
  r.class_iou.assign(class_iou.begin(), class_iou.end());
  double sum = 0.0;
  int n = 0;
  for (size_t c = 1; c < r.class_iou.size(); ++c) {
    if (std::isnan(r.class_iou[c])) {
      r.notices.push_back("class '" +
                          std::string(c < segmentation::kClassNames.size()
                                          ? segmentation::kClassNames[c]
                                          : "?") +
                          "' has no ground truth or prediction; excluded");
      continue;
    }
    sum += r.class_iou[c];
    ++n;
  }
  r.map_mean = n > 0 ? sum / n : std::numeric_limits<double>::quiet_NaN();
  const double veh = r.class_iou.size() > 0 ? r.class_iou[0] : NAN;
  const double drv = r.class_iou.size() > 1 ? r.class_iou[1] : NAN;
  if (std::isnan(veh) && std::isnan(drv)) {
    r.miou = std::numeric_limits<double>::quiet_NaN();
  } else if (std::isnan(veh)) {
    r.miou = drv;
  } else if (std::isnan(drv)) {
    r.miou = veh;
  } else {
    r.miou = 0.5 * (veh + drv);
  }
  if (std::isnan(veh)) r.notices.push_back("class 'vehicle' undefined; excluded");
  return r;
}

MetricsReport summarize(const IoUAccumulator& acc) {
  std::vector<double> ious;
  for (int64_t c = 0; c < acc.classes(); ++c) ious.push_back(acc.iou(c));
  return summarize(ious);
}

nlohmann::json MetricsReport::to_json() const {
  auto num = [](double v) -> nlohmann::json {
    return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v);
  };
  nlohmann::json j;
  nlohmann::json per_class = nlohmann::json::object();
  for (size_t c = 0; c < class_iou.size(); ++c) {
    const std::string name = c < segmentation::kClassNames.size()
                                 ? std::string(segmentation::kClassNames[c])
                                 : "class_" + std::to_string(c);
    per_class[name] = num(class_iou[c]);
  }
  j["iou"] = per_class;
  j["map"] = num(map_mean);
  j["miou"] = num(miou);
  j["notices"] = notices;
  return j;
}

std::string MetricsReport::to_table(double scale) const {
  std::ostringstream os;
  char line[96];
  auto fmt = [&](const std::string& name, double v) {
    if (std::isnan(v)) {
      std::snprintf(line, sizeof(line), "%-16s %8s\n", name.c_str(), "n/a");
    } else {
      std::snprintf(line, sizeof(line), "%-16s %8.1f\n", name.c_str(),
                    round_one_decimal(v * scale));
    }
    os << line;
  };
  for (size_t c = 0; c < class_iou.size(); ++c) {
    fmt(c < segmentation::kClassNames.size()
            ? std::string(segmentation::kClassNames[c])
            : "class_" + std::to_string(c),
        class_iou[c]);
  }
  fmt("map", map_mean);
  fmt("mIoU", miou);
  return os.str();
}

std::string RangeIntervals::label(size_t i) const {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%g-%gm", bounds[i], bounds[i + 1]);
  return buf;
}

std::vector<torch::Tensor> range_masks(const geometry::BevGrid& grid,
                                       const RangeIntervals& intervals) {
  grid.validate();
  if (intervals.bounds.size() < 2 ||
      !std::is_sorted(intervals.bounds.begin(), intervals.bounds.end())) {
    throw ConfigError("range intervals must be at least two ascending bounds");
  }
  std::vector<torch::Tensor> masks;
  std::vector<torch::TensorAccessor<bool, 2>> acc;
  for (size_t i = 0; i < intervals.size(); ++i) {
    masks.push_back(torch::zeros({grid.x_cells, grid.y_cells}, torch::kBool));
  }
  for (auto& m : masks) acc.push_back(m.accessor<bool, 2>());
  for (int64_t i = 0; i < grid.x_cells; ++i) {
    for (int64_t j = 0; j < grid.y_cells; ++j) {
      const auto c = grid.cell_center(i, j);
      const double d = std::hypot(c.x(), c.y());
      for (size_t k = 0; k < intervals.size(); ++k) {
        if (d >= intervals.bounds[k] && d < intervals.bounds[k + 1]) {
          acc[k][i][j] = true;
          break;
        }
      }
    }
  }
  return masks;
}

std::string to_string(Condition c) {
  switch (c) {
    case Condition::kDay:
      return "day";
    case Condition::kRain:
      return "rain";
    case Condition::kNight:
      return "night";
  }
  return "day";
}

Condition parse_condition(const std::string& s) {
  if (s == "day") return Condition::kDay;
  if (s == "rain") return Condition::kRain;
  if (s == "night") return Condition::kNight;
  throw ConfigError("unknown condition '" + s + "' (expected day, rain or night)");
}

std::vector<std::string> ConditionSplit::tokens(Condition c) const {
  std::vector<std::string> out;
  for (const auto& [token, cond] : condition_of) {
    if (cond == c) out.push_back(token);
  }
  return out;
}

std::map<Condition, size_t> ConditionSplit::counts() const {
  std::map<Condition, size_t> out = {
      {Condition::kDay, 0}, {Condition::kRain, 0}, {Condition::kNight, 0}};
  for (const auto& [_, cond] : condition_of) ++out[cond];
  return out;
}

nlohmann::json ConditionSplit::to_json() const {
  nlohmann::json j;
  for (Condition c : {Condition::kDay, Condition::kRain, Condition::kNight}) {
    j[to_string(c)] = tokens(c);
  }
  return j;
}

RuntimeStats measure_runtime(const std::function<void()>& forward,
                             int repetitions, int warmup) {
  if (repetitions < 1) throw ConfigError("runtime: repetitions must be >= 1");
  for (int i = 0; i < warmup; ++i) forward();
  RuntimeStats s;
  for (int i = 0; i < repetitions; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    forward();
    const auto t1 = std::chrono::steady_clock::now();
    s.samples_ms.push_back(
        std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  std::vector<double> sorted = s.samples_ms;
  std::sort(sorted.begin(), sorted.end());
  const size_t n = sorted.size();
  s.median_ms = n % 2 == 1 ? sorted[n / 2]
                           : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  s.fps = s.median_ms > 0.0 ? 1000.0 / s.median_ms
                            : std::numeric_limits<double>::infinity();
  return s;
}

}  // namespace bevcar::metrics
