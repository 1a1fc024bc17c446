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

#include "ptaudit/inspector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "ptaudit/attacks.hpp"
#include "ptaudit/optim.hpp"
#include "ptaudit/trigger.hpp"

namespace ptaudit {
namespace {

void CheckClass(const Mat& logits, int c) {
  if (logits.cols() < 2) throw ConfigError("losses need at least two classes");
  if (c < 0 || c >= logits.cols()) {
    throw IndexError("class " + std::to_string(c) + " outside [0, " + std::to_string(logits.cols()) + ")");
  }
}

std::uint64_t ClassSeed(std::uint64_t seed, int c) {
  return seed ^ (0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(c + 1));
}

std::vector<int> Candidates(const PromptTunedModel& model, const InversionConfig& cfg) {
  std::vector<int> out = cfg.candidate_classes;
  if (out.empty()) {
    out.resize(static_cast<std::size_t>(model.dims.num_classes));
    std::iota(out.begin(), out.end(), 0);
  }
  if (out.size() < 3) throw ConfigError("candidate set needs at least 3 classes");
  for (int c : out) {
    if (c < 0 || c >= model.dims.num_classes) {
      throw ConfigError("candidate class " + std::to_string(c) + " is not a model class");
    }
  }
  return out;
}

nlohmann::json StandardizedJson(const Standardized& s) {
  return {{"mean", s.mean}, {"std", s.std}, {"degenerate", s.degenerate}};
}

}  // namespace

const char* LossKindName(LossKind kind) {
  switch (kind) {
    case LossKind::kMargin:
      return "margin";
    case LossKind::kCe:
      return "ce";
    case LossKind::kLogit:
      return "logit";
  }
  return "unknown";
}

LossKind ParseLossKind(const std::string& name) {
  if (name == "margin") return LossKind::kMargin;
  if (name == "ce") return LossKind::kCe;
  if (name == "logit") return LossKind::kLogit;
  throw ConfigError("unknown loss kind '" + name + "'");
}

double MarginLoss(const Mat& logits, int c, Mat* d_logits) {
  CheckClass(logits, c);
  const Eigen::Index b = logits.rows();
  if (d_logits != nullptr) *d_logits = Mat::Zero(b, logits.cols());
  double total = 0.0;
  for (Eigen::Index i = 0; i < b; ++i) {
    int best = -1;
    for (Eigen::Index k = 0; k < logits.cols(); ++k) {
      if (k == c) continue;
      if (best < 0 || logits(i, k) > logits(i, best)) best = static_cast<int>(k);
    }
    total += logits(i, c) - logits(i, best);
    if (d_logits != nullptr) {
      (*d_logits)(i, c) -= 1.0 / static_cast<double>(b);
      (*d_logits)(i, best) += 1.0 / static_cast<double>(b);
    }
  }
  return -total / static_cast<double>(b);
}

double CeLoss(const Mat& logits, int c, double temperature, Mat* d_logits) {
  CheckClass(logits, c);
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  const Eigen::Index b = logits.rows();
  const Mat p = Softmax(logits, temperature);
  double total = 0.0;
  for (Eigen::Index i = 0; i < b; ++i) total -= std::log(std::max(p(i, c), 1e-300));
  if (d_logits != nullptr) {
    *d_logits = p;
    d_logits->col(c).array() -= 1.0;
    *d_logits /= temperature * static_cast<double>(b);
  }
  return total / static_cast<double>(b);
}

double LogitLoss(const Mat& logits, int c, Mat* d_logits) {
  CheckClass(logits, c);
  const Eigen::Index b = logits.rows();
  if (d_logits != nullptr) {
    *d_logits = Mat::Zero(b, logits.cols());
    d_logits->col(c).setConstant(-1.0 / static_cast<double>(b));
  }
  return -logits.col(c).mean();
}

double InversionLoss(LossKind kind, const Mat& logits, int c, double temperature, Mat* d_logits) {
  switch (kind) {
    case LossKind::kMargin:
      return MarginLoss(logits, c, d_logits);
    case LossKind::kCe:
      return CeLoss(logits, c, temperature, d_logits);
    case LossKind::kLogit:
      return LogitLoss(logits, c, d_logits);
  }
  throw ConfigError("unknown loss kind");
}

void InversionConfig::validate() const {
  if (!(epsilon >= 0.0)) throw ConfigError("epsilon must be non-negative");
  if (!(step_size > 0.0)) throw ConfigError("step size must be positive");
  if (batch_size <= 0 || epochs <= 0) throw ConfigError("batch size and epochs must be positive");
  if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) {
    throw ConfigError("holdout fraction must be in (0, 1)");
  }
  if (workers <= 0) throw ConfigError("worker count must be positive");
}

PoolSplit SplitPool(const ImageSet& pool, double holdout_fraction, std::uint64_t seed) {
  std::vector<int> order(static_cast<std::size_t>(pool.size()));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed ^ 0x4f0d5eedULL);
  std::shuffle(order.begin(), order.end(), rng);
  const auto held = static_cast<std::size_t>(std::lround(holdout_fraction * pool.size()));
  std::vector<int> hold(order.begin(), order.begin() + static_cast<long>(held));
  std::vector<int> opt(order.begin() + static_cast<long>(held), order.end());
  std::sort(hold.begin(), hold.end());
  std::sort(opt.begin(), opt.end());
  return {pool.subset(opt), pool.subset(hold)};
}

ClassInversionResult InvertTrigger(const PromptTunedModel& model, int c, const PoolSplit& pool,
                                   const InversionConfig& cfg) {
  cfg.validate();
  if (c < 0 || c >= model.dims.num_classes) throw IndexError("class " + std::to_string(c) + " out of range");
  if (pool.optimize.size() < cfg.batch_size) {
    throw ConfigError("inversion pool (" + std::to_string(pool.optimize.size()) +
                      " images) is smaller than one batch (" + std::to_string(cfg.batch_size) + ")");
  }
  if (pool.holdout.empty()) throw ConfigError("inversion holdout is empty");
  const ImageShape shape = pool.optimize.shape;
  std::mt19937_64 rng(ClassSeed(cfg.seed, c));
  ClassInversionResult r;
  r.class_id = c;
  r.delta = Mat::Zero(1, shape.pixels());
  if (cfg.epsilon > 0.0) {
    std::uniform_real_distribution<double> init(-cfg.epsilon, cfg.epsilon);
    for (Eigen::Index j = 0; j < r.delta.cols(); ++j) r.delta(0, j) = init(rng);
  }
  Adam opt(cfg.step_size);
  const int n = pool.optimize.size();
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  const LogitLossFn loss_fn = [&](const Mat& logits, Mat& d) {
    return InversionLoss(cfg.loss_kind, logits, c, model.temperature, &d);
  };
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (int s = 0; s < n; s += cfg.batch_size) {
      const int m = std::min(cfg.batch_size, n - s);
      Mat clean(m, shape.pixels());
      for (int i = 0; i < m; ++i) clean.row(i) = pool.optimize.pixels.row(order[static_cast<std::size_t>(s + i)]);
      const Mat stamped = (clean.rowwise() + r.delta.row(0)).cwiseMax(0.0).cwiseMin(1.0);
      const PixelGradient pg = LogitPixelGradient(model, stamped, loss_fn);
      const Mat g = AdditiveFieldGradient(clean, r.delta, pg.d_pixels);
      if (!std::isfinite(pg.loss) || !g.allFinite()) {
        throw DivergenceError("inversion for class " + std::to_string(c) + " produced a non-finite gradient at step " +
                              std::to_string(r.step_losses.size()));
      }
      r.step_losses.push_back(pg.loss);
      opt.step({&r.delta}, {&g});
      ProjectLinf(r.delta, cfg.epsilon);
      const double violation = r.delta.cwiseAbs().maxCoeff() - cfg.epsilon;
      if (violation > 0.0) throw Error("l-inf projection left a positive violation");
      r.max_budget_violation = std::max(r.max_budget_violation, std::max(violation, 0.0));
    }
  }
  r.loss_avg = std::accumulate(r.step_losses.begin(), r.step_losses.end(), 0.0) /
               static_cast<double>(r.step_losses.size());
  TriggerPattern trig = MakeAdditive(shape, r.delta, cfg.epsilon, c);
  r.asr = MeasureAsr(model, pool.holdout, trig, c);
  return r;
}

ClassInversionResult InvertTrigger(const PromptTunedModel& model, int c, const ImageSet& pool,
                                   const InversionConfig& cfg) {
  cfg.validate();
  return InvertTrigger(model, c, SplitPool(pool, cfg.holdout_fraction, cfg.seed), cfg);
}

Standardized Standardize(const std::vector<double>& values) {
  Standardized s;
  const double n = static_cast<double>(values.size());
  if (values.empty()) return s;
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double var = 0.0;
  for (double v : values) var += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(var / n);
  s.z.assign(values.size(), 0.0);
  if (!(s.std > 0.0)) {
    s.std = 0.0;
    s.degenerate = true;
    return s;
  }
  for (std::size_t i = 0; i < values.size(); ++i) s.z[i] = (values[i] - s.mean) / s.std;
  return s;
}

AnomalyScores ComputeAnomalyScores(const std::vector<double>& asr, const std::vector<double>& loss) {
  if (asr.size() != loss.size()) throw ConfigError("ASR and loss lists differ in length");
  if (asr.size() < 3) throw ConfigError("anomaly scoring needs at least 3 classes");
  for (std::size_t i = 0; i < asr.size(); ++i) {
    if (!std::isfinite(asr[i]) || !std::isfinite(loss[i])) throw DataError("anomaly metrics must be finite");
  }
  AnomalyScores out;
  out.asr = Standardize(asr);
  out.loss = Standardize(loss);
  out.scores.resize(asr.size());
  for (std::size_t i = 0; i < asr.size(); ++i) out.scores[i] = out.asr.z[i] - out.loss.z[i];
  return out;
}

AnomalyScores ComputeAnomalyScores(const std::vector<ClassInversionResult>& results) {
  std::vector<double> asr, loss;
  for (const auto& r : results) {
    asr.push_back(r.asr);
    loss.push_back(r.loss_avg);
  }
  return ComputeAnomalyScores(asr, loss);
}

Verdict ModelVerdict(const std::vector<double>& scores, double k) {
  if (scores.size() < 3) throw ConfigError("verdict needs at least 3 scores");
  Verdict v;
  v.z = Standardize(scores);
  v.degenerate = v.z.degenerate;
  if (v.degenerate) return v;
  v.flagged_index = 0;
  for (std::size_t i = 1; i < v.z.z.size(); ++i) {
    if (v.z.z[i] > v.z.z[static_cast<std::size_t>(v.flagged_index)]) v.flagged_index = static_cast<int>(i);
  }
  v.s_max = v.z.z[static_cast<std::size_t>(v.flagged_index)];
  v.backdoored = v.s_max >= k;
  return v;
}

Calibration CalibrateThreshold(const std::vector<double>& s_max, const std::vector<bool>& labels) {
  if (s_max.size() != labels.size()) throw CalibrationError("score and label lists differ in length");
  const auto pos = std::count(labels.begin(), labels.end(), true);
  const auto neg = static_cast<long>(labels.size()) - pos;
  if (pos == 0 || neg == 0) throw CalibrationError("calibration needs both positive and negative labels");
  std::vector<double> cuts = s_max;
  cuts.push_back(std::numeric_limits<double>::infinity());
  std::sort(cuts.begin(), cuts.end(), std::greater<>());
  cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());
  Calibration best;
  best.youden_j = -std::numeric_limits<double>::infinity();
  for (double cut : cuts) {  // descending, so strict '>' keeps the higher cut on ties
    long tp = 0, fp = 0;
    for (std::size_t i = 0; i < s_max.size(); ++i) {
      if (s_max[i] >= cut) (labels[i] ? tp : fp) += 1;
    }
    const double j = static_cast<double>(tp) / static_cast<double>(pos) - static_cast<double>(fp) / static_cast<double>(neg);
    if (j > best.youden_j) best = {cut, j};
  }
  return best;
}

std::vector<int> AnomalyReport::flagged_classes() const {
  std::vector<int> out;
  if (verdict.degenerate) return out;
  for (std::size_t i = 0; i < results.size(); ++i) {
    if (verdict.z.z[i] >= threshold) out.push_back(results[i].class_id);
  }
  return out;
}

AnomalyReport InspectModel(const PromptTunedModel& model, const ImageSet& pool,
                           const InversionConfig& cfg, double k) {
  cfg.validate();
  model.validate();
  const std::vector<int> classes = Candidates(model, cfg);
  const std::string before = model.checksum();
  const PoolSplit split = SplitPool(pool, cfg.holdout_fraction, cfg.seed);
  AnomalyReport report;
  report.config = cfg;
  report.threshold = k;
  report.results.resize(classes.size());
  ParallelFor(static_cast<int>(classes.size()), cfg.workers, [&](int i) {
    report.results[static_cast<std::size_t>(i)] = InvertTrigger(model, classes[static_cast<std::size_t>(i)], split, cfg);
  });
  report.anomaly = ComputeAnomalyScores(report.results);
  report.verdict = ModelVerdict(report.anomaly.scores, k);
  if (report.verdict.flagged_index >= 0) {
    report.flagged_class = classes[static_cast<std::size_t>(report.verdict.flagged_index)];
  }
  report.model_checksum = model.checksum();
  if (report.model_checksum != before) throw Error("model parameters changed during inspection");
  return report;
}

nlohmann::json InversionConfigJson(const InversionConfig& cfg) {
  return {{"epsilon", cfg.epsilon},
          {"step_size", cfg.step_size},
          {"batch_size", cfg.batch_size},
          {"epochs", cfg.epochs},
          {"loss_kind", LossKindName(cfg.loss_kind)},
          {"candidate_classes", cfg.candidate_classes},
          {"holdout_fraction", cfg.holdout_fraction},
          {"seed", cfg.seed},
          {"workers", cfg.workers}};
}

nlohmann::json AnomalyReportJson(const AnomalyReport& report) {
  nlohmann::json classes = nlohmann::json::array();
  for (std::size_t i = 0; i < report.results.size(); ++i) {
    const auto& r = report.results[i];
    classes.push_back({{"class_id", r.class_id},
                       {"asr", r.asr},
                       {"loss_avg", r.loss_avg},
                       {"z_asr", report.anomaly.asr.z[i]},
                       {"z_loss", report.anomaly.loss.z[i]},
                       {"S", report.anomaly.scores[i]},
                       {"z", report.verdict.degenerate ? 0.0 : report.verdict.z.z[i]},
                       {"steps", r.step_losses.size()}});
  }
  return {{"method", "ci"},
          {"classes", classes},
          {"metrics", {{"asr", StandardizedJson(report.anomaly.asr)}, {"loss", StandardizedJson(report.anomaly.loss)}}},
          {"verdict",
           {{"backdoored", report.verdict.backdoored},
            {"s_max", report.verdict.s_max},
            {"threshold", report.threshold},
            {"flagged_class", report.flagged_class},
            {"flagged_classes", report.flagged_classes()},
            {"degenerate", report.verdict.degenerate}}},
          {"config", InversionConfigJson(report.config)},
          {"model_checksum", report.model_checksum}};
}

ArrayFile AnomalyReportDeltas(const AnomalyReport& report) {
  ArrayFile file;
  file.metadata = {{"format", "ptaudit-deltas"}, {"epsilon", report.config.epsilon},
                   {"model_checksum", report.model_checksum}};
  for (const auto& r : report.results) file.put("delta." + std::to_string(r.class_id), r.delta);
  return file;
}

AnomalyReport AnomalyReportFromJson(const nlohmann::json& j, const ArrayFile& deltas) {
  AnomalyReport r;
  try {
    const auto& cfg = j.at("config");
    r.config.epsilon = cfg.at("epsilon").get<double>();
    r.config.step_size = cfg.at("step_size").get<double>();
    r.config.batch_size = cfg.at("batch_size").get<int>();
    r.config.epochs = cfg.at("epochs").get<int>();
    r.config.loss_kind = ParseLossKind(cfg.at("loss_kind").get<std::string>());
    r.config.candidate_classes = cfg.at("candidate_classes").get<std::vector<int>>();
    r.config.holdout_fraction = cfg.at("holdout_fraction").get<double>();
    r.config.seed = cfg.at("seed").get<std::uint64_t>();
    r.config.workers = cfg.at("workers").get<int>();
    for (const auto& row : j.at("classes")) {
      ClassInversionResult c;
      c.class_id = row.at("class_id").get<int>();
      c.asr = row.at("asr").get<double>();
      c.loss_avg = row.at("loss_avg").get<double>();
      c.delta = deltas.get("delta." + std::to_string(c.class_id));
      r.results.push_back(std::move(c));
    }
    r.anomaly = ComputeAnomalyScores(r.results);
    const auto& v = j.at("verdict");
    r.threshold = v.at("threshold").get<double>();
    r.verdict = ModelVerdict(r.anomaly.scores, r.threshold);
    r.flagged_class = v.at("flagged_class").get<int>();
    r.model_checksum = j.at("model_checksum").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed anomaly report: ") + e.what());
  }
  return r;
}

}  // namespace ptaudit
