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

// Per-class trigger inversion on an unlabeled OOD pool, class-wise anomaly
// scores, and the model-level verdict.
//
// For each candidate class c an additive trigger is optimized with Adam and
// clipped back into the l-inf ball after every step. A class whose trigger
// is both unusually effective (held-out ASR) and unusually easy to find
// (low mean loss) stands out; the verdict standardizes those scores within
// the model and flags it when the top score clears a fixed threshold.

#ifndef PTAUDIT_INSPECTOR_HPP_
#define PTAUDIT_INSPECTOR_HPP_

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ptaudit/container.hpp"
#include "ptaudit/model.hpp"

namespace ptaudit {

enum class LossKind { kMargin, kCe, kLogit };

const char* LossKindName(LossKind kind);
LossKind ParseLossKind(const std::string& name);

// Negative mean margin between l_c and the best competing logit.
double MarginLoss(const Mat& logits, int c, Mat* d_logits = nullptr);
// Mean cross-entropy of softmax(logits / temperature) against label c.
double CeLoss(const Mat& logits, int c, double temperature, Mat* d_logits = nullptr);
// Negative mean raw logit of class c.
double LogitLoss(const Mat& logits, int c, Mat* d_logits = nullptr);
double InversionLoss(LossKind kind, const Mat& logits, int c, double temperature, Mat* d_logits);

struct InversionConfig {
  double epsilon = 4.0 / 255.0;
  double step_size = 0.1;  // Adam learning rate
  int batch_size = 32;
  int epochs = 1;
  LossKind loss_kind = LossKind::kMargin;
  std::vector<int> candidate_classes;  // empty: every model class
  double holdout_fraction = 0.2;
  std::uint64_t seed = 0;
  int workers = 1;

  void validate() const;
};

struct ClassInversionResult {
  int class_id = 0;
  Mat delta;  // 1 x pixels
  double loss_avg = 0.0;
  double asr = 0.0;
  std::vector<double> step_losses;
  // max(|delta|) - epsilon after each step; never positive.
  double max_budget_violation = 0.0;
};

// Deterministic split of a pool into optimization and held-out parts.
struct PoolSplit {
  ImageSet optimize;
  ImageSet holdout;
};
PoolSplit SplitPool(const ImageSet& pool, double holdout_fraction, std::uint64_t seed);

ClassInversionResult InvertTrigger(const PromptTunedModel& model, int c, const PoolSplit& pool,
                                   const InversionConfig& cfg);
ClassInversionResult InvertTrigger(const PromptTunedModel& model, int c, const ImageSet& pool,
                                   const InversionConfig& cfg);

// Population mean / std of one metric and its standardized values. A zero
// spread yields all-zero z values and `degenerate` set.
struct Standardized {
  std::vector<double> z;
  double mean = 0.0;
  double std = 0.0;
  bool degenerate = false;
};
Standardized Standardize(const std::vector<double>& values);

struct AnomalyScores {
  std::vector<double> scores;  // S(c) = z_asr(c) - z_loss(c)
  Standardized asr;
  Standardized loss;
};
AnomalyScores ComputeAnomalyScores(const std::vector<double>& asr, const std::vector<double>& loss);
AnomalyScores ComputeAnomalyScores(const std::vector<ClassInversionResult>& results);

struct Verdict {
  bool backdoored = false;
  double s_max = 0.0;   // largest standardized score
  int flagged_index = -1;  // position in the score list
  Standardized z;
  bool degenerate = false;
};
Verdict ModelVerdict(const std::vector<double>& scores, double k = 2.0);

struct Calibration {
  double threshold = std::numeric_limits<double>::infinity();
  double youden_j = 0.0;
};
// Cut maximizing TPR - FPR for the rule "s >= threshold"; ties go to the
// higher threshold. Throws CalibrationError unless both labels occur.
Calibration CalibrateThreshold(const std::vector<double>& s_max, const std::vector<bool>& labels);

struct AnomalyReport {
  std::vector<ClassInversionResult> results;
  AnomalyScores anomaly;
  Verdict verdict;
  int flagged_class = -1;
  double threshold = 2.0;
  std::string model_checksum;
  InversionConfig config;

  // Classes whose standardized score reaches the threshold.
  std::vector<int> flagged_classes() const;
};

// Runs every candidate class (in parallel with cfg.workers threads; output
// does not depend on the worker count) and assembles the report.
AnomalyReport InspectModel(const PromptTunedModel& model, const ImageSet& pool,
                           const InversionConfig& cfg, double k = 2.0);

nlohmann::json InversionConfigJson(const InversionConfig& cfg);
nlohmann::json AnomalyReportJson(const AnomalyReport& report);
// Reconstructed triggers, one array per class ("delta.<class>").
ArrayFile AnomalyReportDeltas(const AnomalyReport& report);
// Rebuilds a report from its JSON and delta file. Step losses are not
// stored and come back empty.
AnomalyReport AnomalyReportFromJson(const nlohmann::json& j, const ArrayFile& deltas);

}  // namespace ptaudit

#endif  // PTAUDIT_INSPECTOR_HPP_
