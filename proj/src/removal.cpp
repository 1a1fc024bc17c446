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

#include "ptaudit/removal.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "ptaudit/attacks.hpp"

namespace ptaudit {

const char* RepairModeName(RepairMode mode) {
  switch (mode) {
    case RepairMode::kCiTrigger:
      return "ci_trigger";
    case RepairMode::kCleanOnly:
      return "clean_only";
    case RepairMode::kRandomDelta:
      return "random_delta";
    case RepairMode::kWrongClassDelta:
      return "wrong_class_delta";
  }
  return "unknown";
}

RepairMode ParseRepairMode(const std::string& name) {
  if (name == "ci_trigger") return RepairMode::kCiTrigger;
  if (name == "clean_only") return RepairMode::kCleanOnly;
  if (name == "random_delta") return RepairMode::kRandomDelta;
  if (name == "wrong_class_delta") return RepairMode::kWrongClassDelta;
  throw ConfigError("unknown repair mode '" + name + "'");
}

void RepairConfig::validate() const {
  if (epochs < 0 || batch_size <= 0) throw ConfigError("repair epochs must be >= 0 and batch size positive");
  if (!(learning_rate > 0.0)) throw ConfigError("repair learning rate must be positive");
  if (!(stamp_fraction >= 0.0 && stamp_fraction <= 1.0)) throw ConfigError("stamp fraction must be in [0, 1]");
  if (!(epsilon >= 0.0)) throw ConfigError("repair epsilon must be non-negative");
}

std::vector<int> RepairStampRows(int n, double stamp_fraction, std::uint64_t seed) {
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed ^ 0x7e9a1bd3ULL);
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(static_cast<std::size_t>(std::floor(stamp_fraction * n)));
  std::sort(order.begin(), order.end());
  return order;
}

ImageSet MakeRepairBatch(const ImageSet& clean, const Mat& delta, double stamp_fraction, std::uint64_t seed) {
  ImageSet out = clean;
  if (delta.size() == 0) return out;
  if (delta.rows() != 1 || delta.cols() != clean.shape.pixels()) {
    throw ConfigError("repair delta has " + std::to_string(delta.cols()) + " entries, images have " +
                      std::to_string(clean.shape.pixels()));
  }
  for (int i : RepairStampRows(clean.size(), stamp_fraction, seed)) {
    out.pixels.row(i) = (clean.pixels.row(i) + delta.row(0)).cwiseMax(0.0).cwiseMin(1.0);
  }
  return out;
}

Mat RepairDelta(const AnomalyReport& report, const RepairConfig& cfg, const ImageShape& shape) {
  switch (cfg.mode) {
    case RepairMode::kCleanOnly:
      return Mat();
    case RepairMode::kRandomDelta: {
      std::mt19937_64 rng(cfg.seed ^ 0x2545f4914f6cdd1dULL);
      std::uniform_real_distribution<double> u(-cfg.epsilon, cfg.epsilon);
      Mat d(1, shape.pixels());
      for (Eigen::Index j = 0; j < d.cols(); ++j) d(0, j) = u(rng);
      return d;
    }
    case RepairMode::kCiTrigger:
    case RepairMode::kWrongClassDelta:
      break;
  }
  if (report.results.empty()) throw DataError("repair needs an inspection report with reconstructed triggers");
  const std::size_t n = report.results.size();
  std::size_t flagged = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (report.results[i].class_id == report.flagged_class) flagged = i;
  }
  if (cfg.mode == RepairMode::kCiTrigger) {
    if (report.flagged_class < 0) throw DataError("inspection report has no flagged class");
    return report.results[flagged].delta;
  }
  std::size_t other = flagged == 0 ? 1 : 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (i != flagged && report.anomaly.scores[i] > report.anomaly.scores[other]) other = i;
  }
  return report.results[other].delta;
}

RepairMetrics MeasureRepair(const PromptTunedModel& model, const RepairEval& eval, const Mat& delta, double epsilon) {
  RepairMetrics m;
  if (eval.acc_split != nullptr) m.acc = Accuracy(model, *eval.acc_split, eval.classes);
  if (eval.asr_split != nullptr && eval.true_trigger != nullptr) {
    m.asr_true = MeasureAsr(model, *eval.asr_split, *eval.true_trigger, eval.target);
    if (delta.size() != 0) {
      const TriggerPattern stamped = MakeAdditive(eval.asr_split->shape, delta, epsilon, eval.target);
      m.asr_delta = MeasureAsr(model, *eval.asr_split, stamped, eval.target);
    }
    if (eval.transfer_split != nullptr) m.asr_transfer = MeasureAsr(model, *eval.transfer_split, *eval.true_trigger, eval.target);
  }
  return m;
}

RepairResult Repair(const PromptTunedModel& model, const ImageSet& labeled, const std::vector<int>& classes,
                    const Mat& delta, const RepairConfig& cfg, const RepairEval& eval) {
  cfg.validate();
  if (labeled.empty()) throw DataError("repair needs a non-empty labeled clean set");
  if (cfg.mode != RepairMode::kCleanOnly) {
    if (delta.size() == 0) throw ConfigError(std::string("repair mode ") + RepairModeName(cfg.mode) + " needs a delta");
    if (delta.cwiseAbs().maxCoeff() > cfg.epsilon + 1e-12) {
      throw ConfigError("repair delta exceeds the l-inf budget");
    }
  }
  const Mat used = cfg.mode == RepairMode::kCleanOnly ? Mat() : delta;
  const std::string encoders = model.checksum(ParamGroup::kEncoder);
  RepairResult r;
  r.delta = used;
  r.before = MeasureRepair(model, eval, used, cfg.epsilon);
  const ImageSet batch = MakeRepairBatch(labeled, used, cfg.stamp_fraction, cfg.seed);
  TrainConfig tc;
  tc.epochs = cfg.epochs;
  tc.batch_size = cfg.batch_size;
  tc.learning_rate = cfg.learning_rate;
  tc.momentum = cfg.momentum;
  tc.shots_per_class = 1;
  tc.seed = cfg.seed;
  r.model = PromptTune(model, batch, classes, tc, &r.log);
  if (r.model.checksum(ParamGroup::kEncoder) != encoders) throw Error("repair changed encoder parameters");
  r.after = MeasureRepair(r.model, eval, used, cfg.epsilon);
  if (eval.acc_split != nullptr && r.before.acc - r.after.acc > 0.10) {
    r.warnings.push_back("repair degradation: clean accuracy fell from " + std::to_string(r.before.acc) + " to " +
                         std::to_string(r.after.acc));
  }
  return r;
}

nlohmann::json RepairConfigJson(const RepairConfig& cfg) {
  return {{"mode", RepairModeName(cfg.mode)},
          {"epochs", cfg.epochs},
          {"batch_size", cfg.batch_size},
          {"learning_rate", cfg.learning_rate},
          {"momentum", cfg.momentum},
          {"stamp_fraction", cfg.stamp_fraction},
          {"epsilon", cfg.epsilon},
          {"seed", cfg.seed}};
}

nlohmann::json RepairResultJson(const RepairResult& result, const RepairConfig& cfg) {
  const auto metrics = [](const RepairMetrics& m) {
    return nlohmann::json{{"acc", m.acc}, {"asr_true_trigger", m.asr_true}, {"asr_delta", m.asr_delta},
                          {"asr_true_trigger_transfer", m.asr_transfer}};
  };
  return {{"mode", RepairModeName(cfg.mode)},
          {"epochs", cfg.epochs},
          {"config", RepairConfigJson(cfg)},
          {"before", metrics(result.before)},
          {"after", metrics(result.after)},
          {"epoch_loss", result.log.epoch_loss},
          {"warnings", result.warnings},
          {"encoder_checksum", result.model.checksum(ParamGroup::kEncoder)},
          {"model_checksum", result.model.checksum()}};
}

}  // namespace ptaudit
