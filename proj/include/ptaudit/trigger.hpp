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

#ifndef PTAUDIT_TRIGGER_HPP_
#define PTAUDIT_TRIGGER_HPP_

#include <cstdint>
#include <optional>
#include <random>
#include <string>

#include "ptaudit/common.hpp"
#include "ptaudit/container.hpp"

namespace ptaudit {

enum class TriggerKind { kAdditive, kWarp, kBlend, kSparseAdditive };

const char* TriggerKindName(TriggerKind kind);
TriggerKind ParseTriggerKind(const std::string& name);

// Pixel-space perturbation specification.
//
//   additive:         x' = clip(x + field)
//   sparse_additive:  x' = clip(x + mask * field), mask per spatial position
//   blend:            x' = (1 - opacity) x + opacity * field
//   warp:             x'(p) = bilinear(x, p + flow(p)); flow in pixels
struct TriggerPattern {
  TriggerKind kind = TriggerKind::kAdditive;
  ImageShape shape;
  Mat field;  // 1 x (H*W*C): additive field or blend pattern
  Mat mask;   // 1 x (H*W), entries in {0, 1}
  Mat flow;   // 1 x (H*W*2), (dx, dy) per position
  double opacity = 0.0;
  double linf_budget = 0.0;
  std::optional<int> l0_budget;
  double warp_strength = 0.0;
  int target_class = 0;
  std::uint64_t seed = 0;

  // Throws ConfigError if the payload breaks its budget.
  void validate() const;
};

TriggerPattern MakeAdditive(const ImageShape& shape, const Mat& field, double epsilon, int target);

// Output pixels are clipped to [0, 1]. Throws ConfigError on shape mismatch.
Mat ApplyTrigger(const Mat& images, const TriggerPattern& trigger);

// Bilinear resample with edge clamping; zero flow is an exact identity.
Mat WarpImages(const Mat& images, const ImageShape& shape, const Mat& flow);

// Smooth random flow from a k x k control grid of U[-1, 1] values,
// normalized to unit mean magnitude, bilinearly upsampled, and scaled by
// strength * pixel_scale.
Mat MakeWarpFlow(const ImageShape& shape, int grid_k, double strength, double pixel_scale,
                 std::mt19937_64& rng);

// d(loss)/d(field) for x' = clip(x + field): sums `d_pixels` over the rows
// where the unclipped value lies strictly inside (0, 1).
Mat AdditiveFieldGradient(const Mat& clean, const Mat& field, const Mat& d_pixels);

// Projections used by every trigger optimizer.
void ProjectLinf(Mat& field, double epsilon);
// Keeps the `l0` spatial positions with largest summed |field| (ties toward
// lower index).
Mat TopKMask(const Mat& field, const ImageShape& shape, int l0);

ArrayFile TriggerToArrays(const TriggerPattern& trigger);
TriggerPattern TriggerFromArrays(const ArrayFile& file);

}  // namespace ptaudit

#endif  // PTAUDIT_TRIGGER_HPP_
