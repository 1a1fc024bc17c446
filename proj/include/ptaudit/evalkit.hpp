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

// Detection metrics, image similarity and result tables.

#ifndef PTAUDIT_EVALKIT_HPP_
#define PTAUDIT_EVALKIT_HPP_

#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ptaudit/common.hpp"

namespace ptaudit {

// Mann-Whitney AUROC: P(score of a positive > score of a negative), ties
// counted as one half. Throws DataError unless both labels occur.
double Auroc(const std::vector<double>& scores, const std::vector<bool>& labels);

struct RocPoint {
  double threshold = 0.0;
  double fpr = 0.0;
  double tpr = 0.0;
};
// Points for "score >= threshold", from (0, 0) to (1, 1).
std::vector<RocPoint> RocCurve(const std::vector<double>& scores, const std::vector<bool>& labels);

struct F1Counts {
  int tp = 0;
  int fp = 0;
  int fn = 0;
  // 2TP / (2TP + FP + FN); 1 when all three counts are zero.
  double f1() const;
  F1Counts& operator+=(const F1Counts& o);
};
// `true_target` < 0 marks a clean model, which can only produce FPs.
F1Counts ClassF1(const std::vector<int>& flagged, int true_target);

// Mean windowed SSIM over valid 11x11 Gaussian windows (sigma 1.5) and
// channels, with L = 1. `a` and `b` are single images, 1 x (H*W*C).
double Ssim(const Mat& a, const Mat& b, const ImageShape& shape);
// Mean of per-row SSIM between two batches.
double MeanSsim(const Mat& a, const Mat& b, const ImageShape& shape);

// One (model, detector) outcome.
struct ExperimentRecord {
  std::string dataset = "synthetic";
  std::string model_id;
  std::string attack;  // "clean" for clean twins
  std::string method;  // "ci", "nc", "pixb"
  int seed = 0;
  bool true_backdoored = false;
  int true_target = -1;
  double acc = 0.0;
  double asr = 0.0;
  double s_max = 0.0;
  bool verdict = false;
  double threshold = 2.0;
  int flagged_class = -1;
  std::vector<int> flagged_classes;
  std::vector<int> classes;
  std::vector<double> class_scores;  // per-class standardized score or anomaly index
};

nlohmann::json RecordJson(const ExperimentRecord& r);
ExperimentRecord RecordFromJson(const nlohmann::json& j);

struct MethodSummary {
  std::string dataset;
  std::string method;
  int models = 0;
  int correct_verdicts = 0;
  double auroc = 0.0;  // NaN when only one label occurs
  F1Counts f1;
};

struct AttackSummary {
  std::string dataset;
  std::string attack;
  std::string method;
  int models = 0;
  double mean_acc = 0.0;
  double mean_asr = 0.0;
  double mean_s_max = 0.0;
  double detection_rate = 0.0;
};

struct Summary {
  std::vector<MethodSummary> methods;
  std::vector<AttackSummary> attacks;
  std::vector<std::string> files;  // paths written, relative to the output directory
};

// Aggregates records per (dataset, method) and (dataset, attack, method),
// writes CSV tables, ROC curves (SVG + CSV sidecar carrying the AUROC) and
// one anomaly-score bar chart per record into `out_dir`. Throws DataError
// for an empty record set.
Summary Summarize(const std::vector<ExperimentRecord>& records, const std::string& out_dir);

std::string RocSvg(const std::vector<RocPoint>& roc, double auroc, const std::string& title);
std::string BarSvg(const std::vector<int>& classes, const std::vector<double>& values, double threshold,
                   const std::string& title);

}  // namespace ptaudit

#endif  // PTAUDIT_EVALKIT_HPP_
