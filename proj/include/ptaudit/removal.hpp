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

// Post-hoc repair of a flagged model: a short round of prompt tuning on the
// defender's labeled clean subset, half of it stamped with a perturbation
// and kept at its true label. The perturbation is the inspector's
// reconstruction for the flagged class, or one of three controls.

#ifndef PTAUDIT_REMOVAL_HPP_
#define PTAUDIT_REMOVAL_HPP_

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ptaudit/inspector.hpp"
#include "ptaudit/model.hpp"
#include "ptaudit/trigger.hpp"

namespace ptaudit {

enum class RepairMode { kCiTrigger, kCleanOnly, kRandomDelta, kWrongClassDelta };

const char* RepairModeName(RepairMode mode);
RepairMode ParseRepairMode(const std::string& name);

struct RepairConfig {
  RepairMode mode = RepairMode::kCiTrigger;
  int epochs = 3;
  int batch_size = 8;
  double learning_rate = 0.03;
  double momentum = 0.9;
  double stamp_fraction = 0.5;  // share of the repair set carrying the delta
  double epsilon = 4.0 / 255.0;
  std::uint64_t seed = 0;

  void validate() const;
};

// Copy of `clean` with floor(stamp_fraction * n) randomly chosen rows
// replaced by clip(x + delta); labels and order are kept. An empty delta
// (clean_only) leaves every row untouched.
ImageSet MakeRepairBatch(const ImageSet& clean, const Mat& delta, double stamp_fraction, std::uint64_t seed);
// Indices stamped by MakeRepairBatch for the same arguments.
std::vector<int> RepairStampRows(int n, double stamp_fraction, std::uint64_t seed);

// The perturbation a mode stamps: the flagged class's reconstruction
// (ci_trigger), the highest-scoring other class's (wrong_class_delta), a
// uniform field in [-eps, eps] (random_delta) or nothing (clean_only).
Mat RepairDelta(const AnomalyReport& report, const RepairConfig& cfg, const ImageShape& shape);

struct RepairMetrics {
  double acc = 0.0;
  double asr_true = 0.0;   // against the attack's own trigger
  double asr_delta = 0.0;  // against the stamped delta (0 when none)
  double asr_transfer = 0.0;  // attack trigger on the transfer split
};

// What repair is scored against.
struct RepairEval {
  const ImageSet* acc_split = nullptr;  // labeled clean test data
  std::vector<int> classes;             // label set for accuracy
  const ImageSet* asr_split = nullptr;  // labeled classes the defender serves
  const ImageSet* transfer_split = nullptr;  // optional, e.g. unseen classes and OOD images
  const TriggerPattern* true_trigger = nullptr;
  int target = 0;
};

struct RepairResult {
  PromptTunedModel model;
  RepairMetrics before;
  RepairMetrics after;
  std::vector<std::string> warnings;
  TrainLog log;
  Mat delta;
};

RepairMetrics MeasureRepair(const PromptTunedModel& model, const RepairEval& eval, const Mat& delta, double epsilon);

// `labeled` is the defender's clean labeled subset, `classes` its label set.
RepairResult Repair(const PromptTunedModel& model, const ImageSet& labeled, const std::vector<int>& classes,
                    const Mat& delta, const RepairConfig& cfg, const RepairEval& eval);

nlohmann::json RepairConfigJson(const RepairConfig& cfg);
nlohmann::json RepairResultJson(const RepairResult& result, const RepairConfig& cfg);

}  // namespace ptaudit

#endif  // PTAUDIT_REMOVAL_HPP_
