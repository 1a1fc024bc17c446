/*
 * Copyright 2026 The ptaudit Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "ptaudit/trigger.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace ptaudit {
namespace {

void CheckWidth(const Mat& m, Eigen::Index cols, const char* what) {
  if (m.rows() != 1 || m.cols() != cols) {
    throw ConfigError(std::string("trigger ") + what + " has wrong dimensions");
  }
}

}  // namespace

const char* TriggerKindName(TriggerKind kind) {
  switch (kind) {
    case TriggerKind::kAdditive:
      return "additive";
    case TriggerKind::kWarp:
      return "warp";
    case TriggerKind::kBlend:
      return "blend";
    case TriggerKind::kSparseAdditive:
      return "sparse_additive";
  }
  return "unknown";
}

TriggerKind ParseTriggerKind(const std::string& name) {
  if (name == "additive") return TriggerKind::kAdditive;
  if (name == "warp") return TriggerKind::kWarp;
  if (name == "blend") return TriggerKind::kBlend;
  if (name == "sparse_additive") return TriggerKind::kSparseAdditive;
  throw ConfigError("unknown trigger kind '" + name + "'");
}

void TriggerPattern::validate() const {
  const double tol = 1e-12;
  switch (kind) {
    case TriggerKind::kAdditive:
      CheckWidth(field, shape.pixels(), "field");
      if (field.cwiseAbs().maxCoeff() > linf_budget + tol) {
        throw ConfigError("additive trigger exceeds its l-inf budget");
      }
      break;
    case TriggerKind::kSparseAdditive: {
      CheckWidth(field, shape.pixels(), "field");
      CheckWidth(mask, shape.area(), "mask");
      if (field.cwiseAbs().maxCoeff() > linf_budget + tol) {
        throw ConfigError("sparse trigger exceeds its l-inf budget");
      }
      const int active = static_cast<int>((mask.array() != 0.0).count());
      if (l0_budget && active > *l0_budget) throw ConfigError("sparse trigger exceeds its l0 budget");
      break;
    }
    case TriggerKind::kBlend:
      CheckWidth(field, shape.pixels(), "pattern");
      if (opacity < 0.0 || opacity > 1.0) throw ConfigError("blend opacity must be in [0, 1]");
      break;
    case TriggerKind::kWarp:
      CheckWidth(flow, static_cast<Eigen::Index>(shape.area()) * 2, "flow");
      break;
  }
}

TriggerPattern MakeAdditive(const ImageShape& shape, const Mat& field, double epsilon, int target) {
  TriggerPattern t;
  t.kind = TriggerKind::kAdditive;
  t.shape = shape;
  t.field = field;
  t.linf_budget = epsilon;
  t.target_class = target;
  t.validate();
  return t;
}

Mat ApplyTrigger(const Mat& images, const TriggerPattern& trigger) {
  if (images.cols() != trigger.shape.pixels()) {
    throw ConfigError("trigger dims (" + std::to_string(trigger.shape.pixels()) +
                      ") do not match image dims (" + std::to_string(images.cols()) + ")");
  }
  Mat out;
  switch (trigger.kind) {
    case TriggerKind::kAdditive:
      out = images.rowwise() + trigger.field.row(0);
      break;
    case TriggerKind::kSparseAdditive: {
      Mat effective = trigger.field;
      const int channels = trigger.shape.channels;
      for (Eigen::Index i = 0; i < effective.cols(); ++i) effective(0, i) *= trigger.mask(0, i / channels);
      out = images.rowwise() + effective.row(0);
      break;
    }
    case TriggerKind::kBlend:
      out = (1.0 - trigger.opacity) * images;
      out.rowwise() += trigger.opacity * trigger.field.row(0);
      break;
    case TriggerKind::kWarp:
      out = WarpImages(images, trigger.shape, trigger.flow);
      break;
  }
  return out.cwiseMax(0.0).cwiseMin(1.0);
}

Mat WarpImages(const Mat& images, const ImageShape& shape, const Mat& flow) {
  if (images.cols() != shape.pixels()) throw ConfigError("warp: image dims mismatch");
  if (flow.cols() != static_cast<Eigen::Index>(shape.area()) * 2) {
    throw ConfigError("warp: flow dims mismatch");
  }
  const int h = shape.height, w = shape.width, ch = shape.channels;
  Mat out(images.rows(), images.cols());
  for (Eigen::Index b = 0; b < images.rows(); ++b) {
    const double* src = images.row(b).data();
    double* dst = out.row(b).data();
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const int pos = y * w + x;
        const double sx = std::clamp(x + flow(0, 2 * pos), 0.0, w - 1.0);
        const double sy = std::clamp(y + flow(0, 2 * pos + 1), 0.0, h - 1.0);
        const int x0 = static_cast<int>(std::floor(sx)), y0 = static_cast<int>(std::floor(sy));
        const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
        const double fx = sx - x0, fy = sy - y0;
        for (int c = 0; c < ch; ++c) {
          const double v00 = src[(y0 * w + x0) * ch + c], v01 = src[(y0 * w + x1) * ch + c];
          const double v10 = src[(y1 * w + x0) * ch + c], v11 = src[(y1 * w + x1) * ch + c];
          dst[pos * ch + c] = (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11);
        }
      }
    }
  }
  return out;
}

Mat MakeWarpFlow(const ImageShape& shape, int grid_k, double strength, double pixel_scale,
                 std::mt19937_64& rng) {
  if (grid_k < 2) throw ConfigError("warp control grid needs k >= 2");
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  Mat grid(2, grid_k * grid_k);
  for (Eigen::Index i = 0; i < grid.size(); ++i) grid.data()[i] = unit(rng);
  grid /= grid.cwiseAbs().mean();
  const int h = shape.height, w = shape.width;
  Mat flow(1, static_cast<Eigen::Index>(h) * w * 2);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double gx = static_cast<double>(x) * (grid_k - 1) / std::max(1, w - 1);
      const double gy = static_cast<double>(y) * (grid_k - 1) / std::max(1, h - 1);
      const int x0 = std::min(static_cast<int>(gx), grid_k - 2);
      const int y0 = std::min(static_cast<int>(gy), grid_k - 2);
      const double fx = gx - x0, fy = gy - y0;
      for (int comp = 0; comp < 2; ++comp) {
        auto at = [&](int yy, int xx) { return grid(comp, yy * grid_k + xx); };
        const double v = (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) +
                         fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
        flow(0, 2 * (y * w + x) + comp) = strength * pixel_scale * v;
      }
    }
  }
  return flow;
}

Mat AdditiveFieldGradient(const Mat& clean, const Mat& field, const Mat& d_pixels) {
  Mat g = Mat::Zero(1, field.cols());
  for (Eigen::Index b = 0; b < clean.rows(); ++b) {
    for (Eigen::Index j = 0; j < field.cols(); ++j) {
      const double v = clean(b, j) + field(0, j);
      if (v > 0.0 && v < 1.0) g(0, j) += d_pixels(b, j);
    }
  }
  return g;
}

void ProjectLinf(Mat& field, double epsilon) {
  field = field.cwiseMax(-epsilon).cwiseMin(epsilon);
}

Mat TopKMask(const Mat& field, const ImageShape& shape, int l0) {
  const int area = shape.area(), ch = shape.channels;
  std::vector<double> magnitude(static_cast<std::size_t>(area), 0.0);
  for (int p = 0; p < area; ++p) {
    for (int c = 0; c < ch; ++c) magnitude[static_cast<std::size_t>(p)] += std::abs(field(0, p * ch + c));
  }
  std::vector<int> order(static_cast<std::size_t>(area));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return magnitude[static_cast<std::size_t>(a)] > magnitude[static_cast<std::size_t>(b)]; });
  Mat mask = Mat::Zero(1, area);
  for (int i = 0; i < std::min(l0, area); ++i) mask(0, order[static_cast<std::size_t>(i)]) = 1.0;
  return mask;
}

ArrayFile TriggerToArrays(const TriggerPattern& trigger) {
  ArrayFile file;
  file.metadata = {{"format", "ptaudit-trigger"},
                   {"kind", TriggerKindName(trigger.kind)},
                   {"height", trigger.shape.height},
                   {"width", trigger.shape.width},
                   {"channels", trigger.shape.channels},
                   {"opacity", trigger.opacity},
                   {"linf_budget", trigger.linf_budget},
                   {"warp_strength", trigger.warp_strength},
                   {"target_class", trigger.target_class},
                   {"seed", trigger.seed}};
  if (trigger.l0_budget) file.metadata["l0_budget"] = *trigger.l0_budget;
  if (trigger.field.size() > 0) file.put("field", trigger.field);
  if (trigger.mask.size() > 0) file.put("mask", trigger.mask);
  if (trigger.flow.size() > 0) file.put("flow", trigger.flow);
  return file;
}

TriggerPattern TriggerFromArrays(const ArrayFile& file) {
  const auto& m = file.metadata;
  if (m.value("format", "") != "ptaudit-trigger") throw DataError("container is not a trigger file");
  TriggerPattern t;
  t.kind = ParseTriggerKind(m.at("kind").get<std::string>());
  t.shape = {m.at("height").get<int>(), m.at("width").get<int>(), m.at("channels").get<int>()};
  t.opacity = m.at("opacity");
  t.linf_budget = m.at("linf_budget");
  t.warp_strength = m.at("warp_strength");
  t.target_class = m.at("target_class");
  t.seed = m.at("seed");
  if (m.contains("l0_budget")) t.l0_budget = m.at("l0_budget").get<int>();
  if (file.has("field")) t.field = file.get("field");
  if (file.has("mask")) t.mask = file.get("mask");
  if (file.has("flow")) t.flow = file.get("flow");
  t.validate();
  return t;
}

}  // namespace ptaudit
