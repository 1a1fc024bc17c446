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

#include "ptaudit/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "ptaudit/optim.hpp"
#include "ptaudit/trigger.hpp"

namespace ptaudit {
namespace {

constexpr double kMadConsistency = 1.4826;
constexpr double kMeanAdConsistency = 1.2533;

std::uint64_t ClassSeed(std::uint64_t seed, int c) {
  return (seed + 0xb5ad4eceda1ce2a9ULL) ^ (0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(c + 1));
}

double Sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

std::vector<int> Candidates(const PromptTunedModel& model, const BaselineConfig& cfg) {
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

void CheckInputs(const PromptTunedModel& model, int c, const PoolSplit& pool, const BaselineConfig& cfg) {
  cfg.validate();
  if (c < 0 || c >= model.dims.num_classes) throw IndexError("class " + std::to_string(c) + " out of range");
  if (pool.optimize.size() < cfg.batch_size) {
    throw ConfigError("inversion pool (" + std::to_string(pool.optimize.size()) +
                      " images) is smaller than one batch (" + std::to_string(cfg.batch_size) + ")");
  }
  if (pool.holdout.empty()) throw ConfigError("inversion holdout is empty");
}

Mat GatherRows(const Mat& src, const std::vector<int>& order, int start, int count) {
  Mat out(count, src.cols());
  for (int i = 0; i < count; ++i) out.row(i) = src.row(order[static_cast<std::size_t>(start + i)]);
  return out;
}

double Median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

BaselineReport Assemble(std::string method, const std::vector<int>& classes, std::vector<double> values,
                        std::vector<double> asr, const BaselineConfig& cfg) {
  BaselineReport r;
  r.method = std::move(method);
  r.classes = classes;
  r.values = std::move(values);
  r.asr = std::move(asr);
  r.config = cfg;
  r.anomaly = BaselineAnomaly(r.values, AnomalyDirection::kLow, cfg.mad_cutoff);
  if (!r.anomaly.degenerate) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < r.anomaly.index.size(); ++i) {
      if (r.anomaly.index[i] > r.anomaly.index[best]) best = i;
    }
    r.s_max = r.anomaly.index[best];
    r.flagged_class = classes[best];
    r.backdoored = r.anomaly.flagged[best];
  }
  return r;
}

}  // namespace

void BaselineConfig::validate() const {
  if (epochs <= 0 || batch_size <= 0) throw ConfigError("baseline epochs and batch size must be positive");
  if (!(step_size > 0.0) || !(lambda_init > 0.0)) throw ConfigError("step size and initial weight must be positive");
  if (!(lambda_factor > 1.0)) throw ConfigError("weight factor must exceed 1");
  if (!(l0_beta > 0.0) || !(l0_floor >= 0.0)) throw ConfigError("l0 surrogate parameters out of range");
  if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) throw ConfigError("holdout fraction must be in (0, 1)");
  if (workers <= 0) throw ConfigError("worker count must be positive");
}

double NextLambda(double lambda, double asr, const BaselineConfig& cfg) {
  return asr >= cfg.asr_target ? lambda * cfg.lambda_factor : lambda / cfg.lambda_factor;
}

Mat NcApply(const Mat& images, const ImageShape& shape, const Mat& mask, const Mat& pattern) {
  if (images.cols() != shape.pixels() || mask.cols() != shape.area() || pattern.cols() != shape.pixels()) {
    throw ConfigError("mask/pattern dimensions do not match the images");
  }
  Mat full(1, shape.pixels());
  for (int p = 0; p < shape.area(); ++p) {
    for (int ch = 0; ch < shape.channels; ++ch) full(0, p * shape.channels + ch) = mask(0, p);
  }
  Mat out = images;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    out.row(i) = (1.0 - full.array()).matrix().cwiseProduct(images.row(i)) + full.cwiseProduct(pattern);
  }
  return out;
}

Mat PixbApply(const Mat& images, const Mat& delta_pos, const Mat& delta_neg) {
  if (images.cols() != delta_pos.cols() || images.cols() != delta_neg.cols()) {
    throw ConfigError("pixel field dimensions do not match the images");
  }
  const Mat field = delta_pos - delta_neg;
  return (images.rowwise() + field.row(0)).cwiseMax(0.0).cwiseMin(1.0);
}

int PixbL0Count(const Mat& delta_pos, const Mat& delta_neg, const ImageShape& shape, double floor) {
  int count = 0;
  for (int p = 0; p < shape.area(); ++p) {
    bool on = false;
    for (int ch = 0; ch < shape.channels; ++ch) {
      const Eigen::Index j = p * shape.channels + ch;
      on = on || delta_pos(0, j) > floor || delta_neg(0, j) > floor;
    }
    count += on ? 1 : 0;
  }
  return count;
}

double TargetRate(const PromptTunedModel& model, const Mat& images, int c) {
  if (images.rows() == 0) throw DataError("target rate over an empty batch");
  const std::vector<int> pred = ArgMaxRows(ComputeLogits(model, images));
  return static_cast<double>(std::count(pred.begin(), pred.end(), c)) / static_cast<double>(pred.size());
}

NcResult NcInvert(const PromptTunedModel& model, int c, const PoolSplit& pool, const BaselineConfig& cfg) {
  CheckInputs(model, c, pool, cfg);
  const ImageShape shape = pool.optimize.shape;
  const int channels = shape.channels;
  std::mt19937_64 rng(ClassSeed(cfg.seed, c));
  std::uniform_real_distribution<double> mask_init(-3.0, -1.0), pattern_init(-1.0, 1.0);
  Mat mask_raw(1, shape.area()), pattern_raw(1, shape.pixels());
  for (Eigen::Index j = 0; j < mask_raw.cols(); ++j) mask_raw(0, j) = mask_init(rng);
  for (Eigen::Index j = 0; j < pattern_raw.cols(); ++j) pattern_raw(0, j) = pattern_init(rng);
  const auto squash = [](const Mat& raw) { return raw.unaryExpr([](double v) { return Sigmoid(v); }).eval(); };

  NcResult r;
  r.class_id = c;
  Adam opt(cfg.step_size);
  double lambda = cfg.lambda_init;
  const int n = pool.optimize.size();
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  const LogitLossFn ce = [&](const Mat& logits, Mat& d) { return CeLoss(logits, c, model.temperature, &d); };
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    r.lambdas.push_back(lambda);
    std::shuffle(order.begin(), order.end(), rng);
    for (int s = 0; s < n; s += cfg.batch_size) {
      const int m = std::min(cfg.batch_size, n - s);
      const Mat clean = GatherRows(pool.optimize.pixels, order, s, m);
      const Mat mask = squash(mask_raw), pattern = squash(pattern_raw);
      const PixelGradient pg = LogitPixelGradient(model, NcApply(clean, shape, mask, pattern), ce);
      Mat g_mask = Mat::Zero(1, shape.area()), g_pattern = Mat::Zero(1, shape.pixels());
      for (int i = 0; i < m; ++i) {
        for (int p = 0; p < shape.area(); ++p) {
          for (int ch = 0; ch < channels; ++ch) {
            const Eigen::Index j = p * channels + ch;
            const double d = pg.d_pixels(i, j);
            g_mask(0, p) += d * (pattern(0, j) - clean(i, j));
            g_pattern(0, j) += d * mask(0, p);
          }
        }
      }
      g_mask.array() += lambda;  // d(lambda * sum m)/dm
      g_mask = g_mask.cwiseProduct(mask.cwiseProduct((1.0 - mask.array()).matrix()));
      g_pattern = g_pattern.cwiseProduct(pattern.cwiseProduct((1.0 - pattern.array()).matrix()));
      if (!std::isfinite(pg.loss) || !g_mask.allFinite() || !g_pattern.allFinite()) {
        throw DivergenceError("NC inversion for class " + std::to_string(c) + " produced a non-finite gradient");
      }
      opt.step({&mask_raw, &pattern_raw}, {&g_mask, &g_pattern});
    }
    const double asr = TargetRate(model, NcApply(pool.holdout.pixels, shape, squash(mask_raw), squash(pattern_raw)), c);
    r.epoch_asr.push_back(asr);
    lambda = NextLambda(lambda, asr, cfg);
  }
  r.mask = squash(mask_raw);
  r.pattern = squash(pattern_raw);
  r.mask_l1 = r.mask.cwiseAbs().sum();
  r.asr = r.epoch_asr.back();
  return r;
}

PixbResult PixbInvert(const PromptTunedModel& model, int c, const PoolSplit& pool, const BaselineConfig& cfg) {
  CheckInputs(model, c, pool, cfg);
  const ImageShape shape = pool.optimize.shape;
  std::mt19937_64 rng(ClassSeed(cfg.seed, c) ^ 0x5bd1e995ULL);
  std::uniform_real_distribution<double> init(0.0, 1e-2);
  PixbResult r;
  r.class_id = c;
  r.delta_pos = Mat(1, shape.pixels());
  r.delta_neg = Mat(1, shape.pixels());
  for (Eigen::Index j = 0; j < r.delta_pos.cols(); ++j) {
    r.delta_pos(0, j) = init(rng);
    r.delta_neg(0, j) = init(rng);
  }
  const auto penalty_grad = [&](const Mat& v) {
    return v.unaryExpr([&](double x) {
      const double t = std::tanh(x / cfg.l0_beta);
      return (1.0 - t * t) / cfg.l0_beta;
    }).eval();
  };
  Adam opt(cfg.step_size);
  double lambda = cfg.lambda_init;
  const int n = pool.optimize.size();
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  const LogitLossFn ce = [&](const Mat& logits, Mat& d) { return CeLoss(logits, c, model.temperature, &d); };
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    r.lambdas.push_back(lambda);
    std::shuffle(order.begin(), order.end(), rng);
    for (int s = 0; s < n; s += cfg.batch_size) {
      const int m = std::min(cfg.batch_size, n - s);
      const Mat clean = GatherRows(pool.optimize.pixels, order, s, m);
      const PixelGradient pg = LogitPixelGradient(model, PixbApply(clean, r.delta_pos, r.delta_neg), ce);
      const Mat g_field = AdditiveFieldGradient(clean, r.delta_pos - r.delta_neg, pg.d_pixels);
      const Mat g_pos = g_field + lambda * penalty_grad(r.delta_pos);
      const Mat g_neg = -g_field + lambda * penalty_grad(r.delta_neg);
      if (!std::isfinite(pg.loss) || !g_pos.allFinite() || !g_neg.allFinite()) {
        throw DivergenceError("PixB inversion for class " + std::to_string(c) + " produced a non-finite gradient");
      }
      opt.step({&r.delta_pos, &r.delta_neg}, {&g_pos, &g_neg});
      r.delta_pos = r.delta_pos.cwiseMax(0.0).cwiseMin(1.0);
      r.delta_neg = r.delta_neg.cwiseMax(0.0).cwiseMin(1.0);
    }
    const double asr = TargetRate(model, PixbApply(pool.holdout.pixels, r.delta_pos, r.delta_neg), c);
    r.epoch_asr.push_back(asr);
    lambda = NextLambda(lambda, asr, cfg);
  }
  r.l0_count = PixbL0Count(r.delta_pos, r.delta_neg, shape, cfg.l0_floor);
  r.asr = r.epoch_asr.back();
  return r;
}

MadFlags BaselineAnomaly(const std::vector<double>& values, AnomalyDirection direction, double cutoff) {
  if (values.size() < 3) throw ConfigError("baseline anomaly needs at least 3 classes");
  MadFlags out;
  out.median = Median(values);
  std::vector<double> dev;
  for (double v : values) dev.push_back(std::abs(v - out.median));
  out.mad = Median(dev);
  out.index.assign(values.size(), 0.0);
  out.flagged.assign(values.size(), false);
  // More than half the values tie at the median: fall back to the mean
  // absolute deviation so a lone outlier is still scored.
  double scale = kMadConsistency * out.mad;
  if (!(out.mad > 0.0)) {
    out.mean_ad_fallback = true;
    scale = kMeanAdConsistency * std::accumulate(dev.begin(), dev.end(), 0.0) / static_cast<double>(dev.size());
  }
  if (!(scale > 0.0)) {
    out.degenerate = true;
    return out;
  }
  const double sign = direction == AnomalyDirection::kLow ? -1.0 : 1.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    out.index[i] = sign * (values[i] - out.median) / scale;
    out.flagged[i] = out.index[i] >= cutoff;
  }
  return out;
}

std::vector<int> BaselineReport::flagged_classes() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < classes.size(); ++i) {
    if (anomaly.flagged[i]) out.push_back(classes[i]);
  }
  return out;
}

BaselineReport RunNc(const PromptTunedModel& model, const ImageSet& pool, const BaselineConfig& cfg) {
  cfg.validate();
  model.validate();
  const std::vector<int> classes = Candidates(model, cfg);
  const std::string before = model.checksum();
  const PoolSplit split = SplitPool(pool, cfg.holdout_fraction, cfg.seed);
  std::vector<NcResult> results(classes.size());
  ParallelFor(static_cast<int>(classes.size()), cfg.workers, [&](int i) {
    results[static_cast<std::size_t>(i)] = NcInvert(model, classes[static_cast<std::size_t>(i)], split, cfg);
  });
  std::vector<double> values, asr;
  for (const auto& r : results) {
    values.push_back(r.mask_l1);
    asr.push_back(r.asr);
  }
  BaselineReport report = Assemble("nc", classes, values, asr, cfg);
  report.nc = std::move(results);
  report.model_checksum = model.checksum();
  if (report.model_checksum != before) throw Error("model parameters changed during NC inversion");
  return report;
}

BaselineReport RunPixb(const PromptTunedModel& model, const ImageSet& pool, const BaselineConfig& cfg) {
  cfg.validate();
  model.validate();
  const std::vector<int> classes = Candidates(model, cfg);
  const std::string before = model.checksum();
  const PoolSplit split = SplitPool(pool, cfg.holdout_fraction, cfg.seed);
  std::vector<PixbResult> results(classes.size());
  ParallelFor(static_cast<int>(classes.size()), cfg.workers, [&](int i) {
    results[static_cast<std::size_t>(i)] = PixbInvert(model, classes[static_cast<std::size_t>(i)], split, cfg);
  });
  std::vector<double> values, asr;
  for (const auto& r : results) {
    values.push_back(static_cast<double>(r.l0_count));
    asr.push_back(r.asr);
  }
  BaselineReport report = Assemble("pixb", classes, values, asr, cfg);
  report.pixb = std::move(results);
  report.model_checksum = model.checksum();
  if (report.model_checksum != before) throw Error("model parameters changed during PixB inversion");
  return report;
}

BaselineReport RunBaseline(const std::string& method, const PromptTunedModel& model, const ImageSet& pool,
                           const BaselineConfig& cfg) {
  if (method == "nc") return RunNc(model, pool, cfg);
  if (method == "pixb") return RunPixb(model, pool, cfg);
  throw ConfigError("unknown baseline '" + method + "'");
}

nlohmann::json BaselineConfigJson(const BaselineConfig& cfg) {
  return {{"epochs", cfg.epochs},
          {"batch_size", cfg.batch_size},
          {"step_size", cfg.step_size},
          {"lambda_init", cfg.lambda_init},
          {"lambda_factor", cfg.lambda_factor},
          {"asr_target", cfg.asr_target},
          {"l0_beta", cfg.l0_beta},
          {"l0_floor", cfg.l0_floor},
          {"mad_cutoff", cfg.mad_cutoff},
          {"candidate_classes", cfg.candidate_classes},
          {"holdout_fraction", cfg.holdout_fraction},
          {"seed", cfg.seed},
          {"workers", cfg.workers}};
}

nlohmann::json BaselineReportJson(const BaselineReport& report) {
  const char* metric = report.method == "nc" ? "mask_l1" : "l0_count";
  nlohmann::json classes = nlohmann::json::array();
  for (std::size_t i = 0; i < report.classes.size(); ++i) {
    nlohmann::json row = {{"class_id", report.classes[i]},
                          {"asr", report.asr[i]},
                          {metric, report.values[i]},
                          {"anomaly_index", report.anomaly.index[i]},
                          {"flagged", static_cast<bool>(report.anomaly.flagged[i])}};
    if (!report.nc.empty()) row["lambdas"] = report.nc[i].lambdas;
    if (!report.pixb.empty()) row["lambdas"] = report.pixb[i].lambdas;
    classes.push_back(std::move(row));
  }
  return {{"method", report.method},
          {"classes", classes},
          {"metrics",
           {{metric, {{"median", report.anomaly.median}, {"mad", report.anomaly.mad},
                      {"mean_ad_fallback", report.anomaly.mean_ad_fallback},
                      {"degenerate", report.anomaly.degenerate}}}}},
          {"verdict",
           {{"backdoored", report.backdoored},
            {"s_max", report.s_max},
            {"threshold", report.config.mad_cutoff},
            {"flagged_class", report.flagged_class},
            {"flagged_classes", report.flagged_classes()},
            {"degenerate", report.anomaly.degenerate}}},
          {"statistic", "median absolute deviation, low values anomalous"},
          {"config", BaselineConfigJson(report.config)},
          {"model_checksum", report.model_checksum}};
}

}  // namespace ptaudit
