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

// Trigger-inversion baselines run on the same unlabeled pool as the
// inspector: a Neural-Cleanse style mask/pattern search with an l1 mask
// penalty and a Pixel-Backdoor style signed per-pixel search with a smoothed
// l0 penalty. Both adapt their penalty weight once per epoch and score
// classes with a median-absolute-deviation outlier test.

#ifndef PTAUDIT_BASELINES_HPP_
#define PTAUDIT_BASELINES_HPP_

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ptaudit/inspector.hpp"
#include "ptaudit/model.hpp"

namespace ptaudit {

struct BaselineConfig {
  int epochs = 5;
  int batch_size = 32;
  double step_size = 0.1;  // Adam learning rate on the unconstrained parameters
  double lambda_init = 1e-3;
  double lambda_factor = 1.5;
  double asr_target = 0.99;
  // PixB: surrogate tanh(v / l0_beta) per entry, and the count floor.
  double l0_beta = 0.05;
  double l0_floor = 1e-3;
  double mad_cutoff = 2.0;
  std::vector<int> candidate_classes;  // empty: every model class
  double holdout_fraction = 0.2;
  std::uint64_t seed = 0;
  int workers = 1;

  void validate() const;
};

// Penalty weight after one epoch: times factor when asr >= target, divided
// by it otherwise.
double NextLambda(double lambda, double asr, const BaselineConfig& cfg);

struct NcResult {
  int class_id = 0;
  Mat mask;     // 1 x (H*W), entries in [0, 1]
  Mat pattern;  // 1 x (H*W*C), entries in [0, 1]
  double mask_l1 = 0.0;
  double asr = 0.0;
  std::vector<double> lambdas;  // weight used in each epoch
  std::vector<double> epoch_asr;
};

struct PixbResult {
  int class_id = 0;
  Mat delta_pos;  // 1 x (H*W*C), non-negative
  Mat delta_neg;
  int l0_count = 0;
  double asr = 0.0;
  std::vector<double> lambdas;
  std::vector<double> epoch_asr;
};

// x' = (1 - m) x + m p, with the spatial mask shared across channels.
Mat NcApply(const Mat& images, const ImageShape& shape, const Mat& mask, const Mat& pattern);
// x' = clip(x + d_pos - d_neg).
Mat PixbApply(const Mat& images, const Mat& delta_pos, const Mat& delta_neg);
// Spatial positions where any channel of either field exceeds `floor`.
int PixbL0Count(const Mat& delta_pos, const Mat& delta_neg, const ImageShape& shape, double floor);

// Fraction of `images` whose argmax over all classes is c.
double TargetRate(const PromptTunedModel& model, const Mat& images, int c);

NcResult NcInvert(const PromptTunedModel& model, int c, const PoolSplit& pool, const BaselineConfig& cfg);
PixbResult PixbInvert(const PromptTunedModel& model, int c, const PoolSplit& pool, const BaselineConfig& cfg);

enum class AnomalyDirection { kLow, kHigh };

struct MadFlags {
  std::vector<double> index;  // signed deviation in the anomalous direction / (1.4826 MAD)
  std::vector<bool> flagged;
  double median = 0.0;
  double mad = 0.0;
  // MAD was zero and the scale is 1.2533 * mean absolute deviation instead.
  bool mean_ad_fallback = false;
  bool degenerate = false;  // every value equals the median; nothing flagged
};
MadFlags BaselineAnomaly(const std::vector<double>& values, AnomalyDirection direction, double cutoff = 2.0);

struct BaselineReport {
  std::string method;  // "nc" or "pixb"
  std::vector<int> classes;
  std::vector<double> values;  // mask l1 or l0 count per class
  std::vector<double> asr;
  MadFlags anomaly;
  double s_max = 0.0;  // largest anomaly index
  bool backdoored = false;
  int flagged_class = -1;
  std::string model_checksum;
  BaselineConfig config;
  std::vector<NcResult> nc;
  std::vector<PixbResult> pixb;

  std::vector<int> flagged_classes() const;
};

BaselineReport RunNc(const PromptTunedModel& model, const ImageSet& pool, const BaselineConfig& cfg);
BaselineReport RunPixb(const PromptTunedModel& model, const ImageSet& pool, const BaselineConfig& cfg);
// Dispatch on "nc" or "pixb".
BaselineReport RunBaseline(const std::string& method, const PromptTunedModel& model, const ImageSet& pool,
                           const BaselineConfig& cfg);

nlohmann::json BaselineConfigJson(const BaselineConfig& cfg);
nlohmann::json BaselineReportJson(const BaselineReport& report);

}  // namespace ptaudit

#endif  // PTAUDIT_BASELINES_HPP_
