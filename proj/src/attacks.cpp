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

#include "ptaudit/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ptaudit/optim.hpp"

namespace ptaudit {
namespace {

// Reference sparse budget and the image area it was stated for.
constexpr double kSibaReferenceL0 = 1600.0;
constexpr double kSibaReferenceArea = 224.0 * 224.0;

void CheckTrainSet(const ImageSet& train, const std::vector<int>& classes, int target) {
  if (train.empty()) throw DataError("attack training set is empty");
  if (std::find(classes.begin(), classes.end(), target) == classes.end()) {
    throw ConfigError("target class " + std::to_string(target) + " is not in the tuning label set");
  }
}

std::vector<int> TriggerLossClasses(const PromptTunedModel& model, const std::vector<int>& classes,
                                    const AttackConfig& cfg) {
  if (!cfg.trigger_loss_all_classes) return classes;
  std::vector<int> all(static_cast<std::size_t>(model.dims.num_classes));
  std::iota(all.begin(), all.end(), 0);
  return all;
}

void CheckLoss(double loss, int epoch, long step) {
  if (!std::isfinite(loss)) {
    throw DivergenceError("attack training diverged at epoch " + std::to_string(epoch) + ", step " +
                          std::to_string(step) + " (loss is not finite)");
  }
}

std::vector<int> Gather(const std::vector<int>& v, const std::vector<int>& idx) {
  std::vector<int> out;
  out.reserve(idx.size());
  for (int i : idx) out.push_back(v[static_cast<std::size_t>(i)]);
  return out;
}

Mat GatherRows(const Mat& m, const std::vector<int>& idx) {
  Mat out(static_cast<Eigen::Index>(idx.size()), m.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(idx[i]);
  return out;
}

struct TermResult {
  double loss = 0.0;
  Mat d_pixels;
};

// Weighted cross-entropy from pixels. Meta-net grads go to `grads` when
// non-null; the pixel gradient is returned when requested.
TermResult PixelCe(const PromptTunedModel& model, const Mat& pixels, const std::vector<int>& labels,
                   const std::vector<int>& classes, double weight, ModelParams* grads,
                   bool pixel_grad) {
  ForwardPass pass = Forward(model, pixels, true);
  Mat d_logits;
  TermResult r;
  r.loss = weight * CrossEntropy(pass.logits, labels, classes, model.temperature, &d_logits);
  d_logits *= weight;
  const Mat d_features = BackwardHead(model, pass, d_logits, grads);
  if (pixel_grad) r.d_pixels = BackwardImage(model, pass, d_features, nullptr);
  return r;
}

double FeatureCe(const PromptTunedModel& model, const Mat& features, const std::vector<int>& labels,
                 const std::vector<int>& classes, double weight, ModelParams* grads) {
  ForwardPass pass = ForwardFromFeatures(model, features, true);
  Mat d_logits;
  const double loss = CrossEntropy(pass.logits, labels, classes, model.temperature, &d_logits);
  d_logits *= weight;
  BackwardHead(model, pass, d_logits, grads);
  return weight * loss;
}

void StepPrompt(PromptTunedModel& model, ModelParams& grads, AnyOptimizer& opt) {
  const auto params = model.params.group(ParamGroup::kPrompt);
  const auto g = grads.group(ParamGroup::kPrompt);
  opt.step(params, {g.begin(), g.end()});
}

double LinfViolation(const Mat& field, double epsilon) {
  return std::max(0.0, field.cwiseAbs().maxCoeff() - epsilon);
}

// Exactly floor(rate * n) poisoned indices per epoch, drawn uniformly.
std::vector<char> PoisonFlags(int n, double rate, std::mt19937_64& rng) {
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const int quota = static_cast<int>(std::floor(rate * n));
  std::vector<char> flags(static_cast<std::size_t>(n), 0);
  for (int i = 0; i < quota; ++i) flags[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = 1;
  return flags;
}

void WarnOnLowAsr(AttackResult& result, const ImageSet& train, const std::vector<int>& classes) {
  const int t = result.trigger.target_class;
  bool has_other = false;
  for (int y : train.labels) has_other = has_other || y != t;
  if (!has_other) return;
  const double asr = MeasureAsr(result.model, train, result.trigger, t, classes);
  if (asr < 0.5) {
    result.warnings.push_back("attack failure: training-set ASR " + std::to_string(asr) +
                              " is below 0.5 after training");
  }
}

// Shared driver for data-poisoning attacks: `stamp` builds the poisoned or
// noise-mode image for one sample and may relabel it.
template <class Prepare, class Stamp>
AttackResult RunPoisoning(const PromptTunedModel& start, const ImageSet& train,
                          const std::vector<int>& classes, const AttackConfig& cfg,
                          TriggerPattern trigger, Prepare&& prepare, Stamp&& stamp) {
  AttackResult result;
  result.model = start;
  result.trigger = std::move(trigger);
  const Mat features = EncodeFeatures(start, train.pixels);
  std::vector<int> all_classes(static_cast<std::size_t>(start.dims.num_classes));
  std::iota(all_classes.begin(), all_classes.end(), 0);
  std::mt19937_64 rng(cfg.train.seed ^ 0x5eed0001ULL);
  AnyOptimizer opt(cfg.train.optimizer, cfg.train.learning_rate, cfg.train.momentum);
  const int n = train.size();
  const int bs = cfg.train.batch_size;
  const long total = static_cast<long>((n + bs - 1) / bs) * cfg.train.epochs;
  long step = 0;
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < cfg.train.epochs; ++epoch) {
    // modes[i]: 0 clean, 1 poisoned (relabeled to target), 2 noise mode.
    std::vector<char> modes = prepare(n, rng);
    result.poisoned_per_epoch.push_back(static_cast<int>(std::count(modes.begin(), modes.end(), 1)));
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (int s = 0; s < n; s += bs) {
      const int m = std::min(bs, n - s);
      std::vector<int> idx(order.begin() + s, order.begin() + s + m);
      Mat batch = GatherRows(features, idx);
      std::vector<int> labels = Gather(train.labels, idx);
      for (int i = 0; i < m; ++i) {
        const char mode = modes[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])];
        if (mode == 0) continue;
        Mat img = train.pixels.row(idx[static_cast<std::size_t>(i)]);
        img = stamp(img, mode, rng);
        batch.row(i) = EncodeFeatures(start, img).row(0);
        if (mode == 1) labels[static_cast<std::size_t>(i)] = result.trigger.target_class;
      }
      ModelParams grads = result.model.params.zeros_like();
      double loss = 0.0;
      if (cfg.poison_loss_all_classes) {
        // Poisoned rows are scored against every class name, the rest
        // against the tuning label set.
        std::vector<int> poisoned, other;
        for (int i = 0; i < m; ++i) {
          (modes[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])] == 1 ? poisoned : other).push_back(i);
        }
        if (!other.empty()) {
          loss += FeatureCe(result.model, GatherRows(batch, other), Gather(labels, other), classes,
                            static_cast<double>(other.size()) / m, &grads);
        }
        if (!poisoned.empty()) {
          loss += FeatureCe(result.model, GatherRows(batch, poisoned), Gather(labels, poisoned), all_classes,
                            static_cast<double>(poisoned.size()) / m, &grads);
        }
      } else {
        loss = FeatureCe(result.model, batch, labels, classes, 1.0, &grads);
      }
      CheckLoss(loss, epoch, step);
      opt.set_lr(CosineLr(cfg.train.learning_rate, step, total));
      StepPrompt(result.model, grads, opt);
      epoch_loss += loss * m;
      ++step;
    }
    result.log.epoch_loss.push_back(epoch_loss / n);
  }
  WarnOnLowAsr(result, train, classes);
  return result;
}

}  // namespace

void AttackConfig::validate() const {
  if (!(poison_rate > 0.0 && poison_rate < 1.0)) throw ConfigError("poison_rate must be in (0, 1)");
  if (warmup_epochs < 0 || joint_epochs < 0) throw ConfigError("attack epochs must be non-negative");
  if (epsilon < 0.0) throw ConfigError("epsilon must be non-negative");
  if (trigger_lr <= 0.0) throw ConfigError("trigger_lr must be positive");
  const double p = wanet.p_normal + wanet.p_attack + wanet.p_noise;
  if (std::abs(p - 1.0) > 1e-9 || wanet.p_normal < 0 || wanet.p_attack < 0 || wanet.p_noise < 0) {
    throw ConfigError("WaNet mode probabilities must be non-negative and sum to 1");
  }
  if (wanet.grid_k < 2) throw ConfigError("WaNet grid_k must be >= 2");
  if (wanet.strength < 0.0) throw ConfigError("WaNet strength must be non-negative");
  if (wanet.noise_kind != "jitter" && wanet.noise_kind != "fresh") {
    throw ConfigError("WaNet noise_kind must be 'jitter' or 'fresh'");
  }
  if (siba.linf < 0.0) throw ConfigError("SIBA l-inf budget must be non-negative");
  if (blended.opacity < 0.0 || blended.opacity > 1.0) throw ConfigError("blend opacity must be in [0, 1]");
  if (adaptive.alpha < 0.0 || adaptive.lambda_spec < 0.0 || adaptive.epochs < 0) {
    throw ConfigError("adaptive alpha, lambda_spec and epochs must be non-negative");
  }
  if (target_class < 0) throw ConfigError("target class must be non-negative");
  train.validate();
}

int AttackConfig::siba_l0(const ImageShape& shape) const {
  if (siba.l0 > 0) return std::min(siba.l0, shape.area());
  const double scaled = kSibaReferenceL0 / kSibaReferenceArea * shape.area();
  return std::max(1, static_cast<int>(std::lround(scaled)));
}

WanetMode DrawWanetMode(const WanetConfig& cfg, std::mt19937_64& rng) {
  std::discrete_distribution<int> pick({cfg.p_normal, cfg.p_attack, cfg.p_noise});
  return static_cast<WanetMode>(pick(rng));
}

std::vector<WanetMode> AssignWanetModes(const WanetConfig& cfg, int n, std::mt19937_64& rng) {
  const int attack = static_cast<int>(std::floor(cfg.p_attack * n));
  const int noise = std::min(n - attack, static_cast<int>(std::floor(cfg.p_noise * n)));
  std::vector<WanetMode> modes(static_cast<std::size_t>(n), WanetMode::kNormal);
  std::fill(modes.begin(), modes.begin() + attack, WanetMode::kAttack);
  std::fill(modes.begin() + attack, modes.begin() + attack + noise, WanetMode::kNoise);
  std::shuffle(modes.begin(), modes.end(), rng);
  return modes;
}

AttackResult BadclipAttack(const PromptTunedModel& start, const ImageSet& train,
                           const std::vector<int>& classes, const AttackConfig& cfg) {
  cfg.validate();
  start.validate();
  const int t = cfg.target_class;
  CheckTrainSet(train, classes, t);
  std::mt19937_64 rng(cfg.train.seed ^ 0xbadc11bULL);
  std::uniform_real_distribution<double> init(-cfg.epsilon, cfg.epsilon);
  Mat delta(1, train.shape.pixels());
  for (Eigen::Index j = 0; j < delta.cols(); ++j) delta(0, j) = cfg.epsilon > 0 ? init(rng) : 0.0;

  AttackResult result;
  result.model = start;
  const std::vector<int> tri_classes = TriggerLossClasses(start, classes, cfg);
  const Mat features = EncodeFeatures(start, train.pixels);
  AnyOptimizer theta_opt(cfg.train.optimizer, cfg.train.learning_rate, cfg.train.momentum);
  Adam delta_opt(cfg.trigger_lr);
  const int n = train.size(), bs = cfg.train.batch_size;
  const int epochs = cfg.warmup_epochs + cfg.joint_epochs;
  const long total = static_cast<long>((n + bs - 1) / bs) * epochs;
  long step = 0;
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < epochs; ++epoch) {
    const bool joint = epoch >= cfg.warmup_epochs;
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (int s = 0; s < n; s += bs) {
      const int m = std::min(bs, n - s);
      std::vector<int> idx(order.begin() + s, order.begin() + s + m);
      const std::vector<int> labels = Gather(train.labels, idx);
      const Mat clean = GatherRows(train.pixels, idx);
      ModelParams grads = result.model.params.zeros_like();
      double loss = FeatureCe(result.model, GatherRows(features, idx), labels, classes, 1.0, &grads);
      Mat triggered = (clean.rowwise() + delta.row(0)).cwiseMax(0.0).cwiseMin(1.0);
      const std::vector<int> target(static_cast<std::size_t>(m), t);
      // During warmup the trigger adapts to the clean-trained prompt only.
      TermResult tri = PixelCe(result.model, triggered, target, tri_classes, 1.0, joint ? &grads : nullptr, true);
      loss += tri.loss;
      CheckLoss(loss, epoch, step);
      theta_opt.set_lr(CosineLr(cfg.train.learning_rate, step, total));
      StepPrompt(result.model, grads, theta_opt);
      if (cfg.epsilon > 0.0) {
        const Mat g = AdditiveFieldGradient(clean, delta, tri.d_pixels);
        delta_opt.step({&delta}, {&g});
        ProjectLinf(delta, cfg.epsilon);
      }
      result.budget_violation.push_back(LinfViolation(delta, cfg.epsilon));
      epoch_loss += loss * m;
      ++step;
    }
    result.log.epoch_loss.push_back(epoch_loss / n);
  }
  result.trigger = MakeAdditive(train.shape, delta, cfg.epsilon, t);
  result.trigger.seed = cfg.train.seed;
  WarnOnLowAsr(result, train, classes);
  return result;
}

Mat PerturbTrigger(const Mat& fixed_field, const ImageShape& shape, const std::vector<double>& sigma,
                   double epsilon, double alpha, std::mt19937_64& rng) {
  if (static_cast<int>(sigma.size()) != shape.channels) throw ConfigError("sigma has wrong channel count");
  std::normal_distribution<double> gauss(0.0, 1.0);
  Mat out(1, fixed_field.cols());
  for (Eigen::Index j = 0; j < fixed_field.cols(); ++j) {
    const double s = sigma[static_cast<std::size_t>(j % shape.channels)];
    const double bound = epsilon / s;
    const double noisy = fixed_field(0, j) / s + alpha * bound * gauss(rng);
    out(0, j) = std::clamp(noisy, -bound, bound) * s;
  }
  return out;
}

AttackResult BadclipAdaptiveAttack(const AttackResult& phase1, const ImageSet& train,
                                   const std::vector<int>& classes, const AttackConfig& cfg) {
  cfg.validate();
  const int t = phase1.trigger.target_class;
  CheckTrainSet(train, classes, t);
  AttackResult result;
  result.model = phase1.model;
  result.trigger = phase1.trigger;
  const Mat& fixed = phase1.trigger.field;
  const std::vector<int> tri_classes = TriggerLossClasses(result.model, classes, cfg);
  const Mat features = EncodeFeatures(result.model, train.pixels);
  std::mt19937_64 rng(cfg.train.seed ^ 0xada971eULL);
  AnyOptimizer opt(cfg.train.optimizer, cfg.train.learning_rate, cfg.train.momentum);
  const int n = train.size(), bs = cfg.train.batch_size;
  const long total = static_cast<long>((n + bs - 1) / bs) * cfg.adaptive.epochs;
  long step = 0;
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < cfg.adaptive.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (int s = 0; s < n; s += bs) {
      const int m = std::min(bs, n - s);
      std::vector<int> idx(order.begin() + s, order.begin() + s + m);
      const std::vector<int> labels = Gather(train.labels, idx);
      const Mat clean = GatherRows(train.pixels, idx);
      ModelParams grads = result.model.params.zeros_like();
      double loss = FeatureCe(result.model, GatherRows(features, idx), labels, classes, 1.0, &grads);
      const Mat exact = (clean.rowwise() + fixed.row(0)).cwiseMax(0.0).cwiseMin(1.0);
      loss += PixelCe(result.model, exact, std::vector<int>(static_cast<std::size_t>(m), t), tri_classes, 1.0,
                      &grads, false).loss;
      Mat perturbed(m, clean.cols());
      for (int i = 0; i < m; ++i) {
        perturbed.row(i) = clean.row(i) +
                           PerturbTrigger(fixed, train.shape, result.model.norm.std, cfg.epsilon,
                                          cfg.adaptive.alpha, rng);
      }
      perturbed = perturbed.cwiseMax(0.0).cwiseMin(1.0);
      loss += PixelCe(result.model, perturbed, labels, classes, cfg.adaptive.lambda_spec, &grads, false).loss;
      CheckLoss(loss, epoch, step);
      opt.set_lr(CosineLr(cfg.train.learning_rate, step, total));
      StepPrompt(result.model, grads, opt);
      result.budget_violation.push_back(LinfViolation(fixed, cfg.epsilon));
      epoch_loss += loss * m;
      ++step;
    }
    result.log.epoch_loss.push_back(epoch_loss / n);
  }
  WarnOnLowAsr(result, train, classes);
  return result;
}

AttackResult BlendedAttack(const PromptTunedModel& start, const ImageSet& train,
                           const std::vector<int>& classes, const AttackConfig& cfg) {
  cfg.validate();
  start.validate();
  CheckTrainSet(train, classes, cfg.target_class);
  std::mt19937_64 rng(cfg.train.seed ^ 0xb1e4dULL);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  TriggerPattern trig;
  trig.kind = TriggerKind::kBlend;
  trig.shape = train.shape;
  trig.field.resize(1, train.shape.pixels());
  for (Eigen::Index j = 0; j < trig.field.cols(); ++j) trig.field(0, j) = unit(rng);
  trig.opacity = cfg.blended.opacity;
  trig.target_class = cfg.target_class;
  trig.seed = cfg.train.seed;
  trig.validate();
  const TriggerPattern applied = trig;
  return RunPoisoning(
      start, train, classes, cfg, trig,
      [&](int n, std::mt19937_64& r) { return PoisonFlags(n, cfg.poison_rate, r); },
      [&](const Mat& img, char, std::mt19937_64&) { return ApplyTrigger(img, applied); });
}

AttackResult WanetAttack(const PromptTunedModel& start, const ImageSet& train,
                         const std::vector<int>& classes, const AttackConfig& cfg) {
  cfg.validate();
  start.validate();
  CheckTrainSet(train, classes, cfg.target_class);
  std::mt19937_64 rng(cfg.train.seed ^ 0x3a4e7ULL);
  TriggerPattern trig;
  trig.kind = TriggerKind::kWarp;
  trig.shape = train.shape;
  trig.flow = MakeWarpFlow(train.shape, cfg.wanet.grid_k, cfg.wanet.strength, cfg.wanet.pixel_scale, rng);
  trig.warp_strength = cfg.wanet.strength;
  trig.target_class = cfg.target_class;
  trig.seed = cfg.train.seed;
  trig.validate();
  const Mat flow = trig.flow;
  const ImageShape shape = train.shape;
  return RunPoisoning(
      start, train, classes, cfg, trig,
      [&](int n, std::mt19937_64& r) {
        const auto modes = AssignWanetModes(cfg.wanet, n, r);
        std::vector<char> out(modes.size());
        for (std::size_t i = 0; i < modes.size(); ++i) out[i] = static_cast<char>(modes[i]);
        return out;
      },
      [&](const Mat& img, char mode, std::mt19937_64& r) {
        if (mode == static_cast<char>(WanetMode::kAttack)) return WarpImages(img, shape, flow);
        if (cfg.wanet.noise_kind == "fresh") {
          return WarpImages(img, shape,
                            MakeWarpFlow(shape, cfg.wanet.grid_k, cfg.wanet.strength, cfg.wanet.pixel_scale, r));
        }
        std::uniform_real_distribution<double> jitter(-cfg.wanet.noise_pixels, cfg.wanet.noise_pixels);
        Mat noisy = flow;
        for (Eigen::Index j = 0; j < noisy.cols(); ++j) noisy(0, j) += jitter(r);
        return WarpImages(img, shape, noisy);
      });
}

AttackResult SibaAttack(const PromptTunedModel& start, const ImageSet& train,
                        const std::vector<int>& classes, const AttackConfig& cfg) {
  cfg.validate();
  start.validate();
  const int t = cfg.target_class;
  CheckTrainSet(train, classes, t);
  const ImageShape shape = train.shape;
  const int l0 = cfg.siba_l0(shape);
  const double linf = cfg.siba.linf;
  std::mt19937_64 rng(cfg.train.seed ^ 0x51baULL);
  std::uniform_real_distribution<double> init(-linf, linf);
  Mat field(1, shape.pixels());
  for (Eigen::Index j = 0; j < field.cols(); ++j) field(0, j) = linf > 0 ? init(rng) : 0.0;
  Mat mask = TopKMask(field, shape, l0);

  auto effective = [&]() {
    Mat e = field;
    for (Eigen::Index j = 0; j < e.cols(); ++j) e(0, j) *= mask(0, j / shape.channels);
    return e;
  };

  AttackResult result;
  result.model = start;
  const Mat features = EncodeFeatures(start, train.pixels);
  AnyOptimizer theta_opt(cfg.train.optimizer, cfg.train.learning_rate, cfg.train.momentum);
  Adam field_opt(cfg.trigger_lr);
  const int n = train.size(), bs = cfg.train.batch_size;
  const int epochs = cfg.warmup_epochs + cfg.train.epochs;
  const long total = static_cast<long>((n + bs - 1) / bs) * epochs;
  long step = 0;
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < epochs; ++epoch) {
    const bool joint = epoch >= cfg.warmup_epochs;
    std::vector<char> poison(static_cast<std::size_t>(n), 0);
    if (joint) {
      poison = PoisonFlags(n, cfg.poison_rate, rng);
      result.poisoned_per_epoch.push_back(static_cast<int>(std::count(poison.begin(), poison.end(), 1)));
    }
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (int s = 0; s < n; s += bs) {
      const int m = std::min(bs, n - s);
      std::vector<int> idx(order.begin() + s, order.begin() + s + m);
      std::vector<int> labels = Gather(train.labels, idx);
      const Mat clean = GatherRows(train.pixels, idx);
      const Mat eff = effective();
      // Meta-net step on the (possibly poisoned) batch.
      Mat batch = GatherRows(features, idx);
      for (int i = 0; i < m; ++i) {
        if (!poison[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])]) continue;
        const Mat img = (clean.row(i) + eff.row(0)).cwiseMax(0.0).cwiseMin(1.0);
        batch.row(i) = EncodeFeatures(result.model, img).row(0);
        labels[static_cast<std::size_t>(i)] = t;
      }
      ModelParams grads = result.model.params.zeros_like();
      double loss = FeatureCe(result.model, batch, labels, classes, 1.0, &grads);
      CheckLoss(loss, epoch, step);
      theta_opt.set_lr(CosineLr(cfg.train.learning_rate, step, total));
      StepPrompt(result.model, grads, theta_opt);
      // Trigger step against the current prompt: dense field, straight-through
      // mask, then hard l-inf and l0 projections.
      if (linf > 0.0) {
        const Mat triggered = (clean.rowwise() + eff.row(0)).cwiseMax(0.0).cwiseMin(1.0);
        TermResult tri = PixelCe(result.model, triggered,
                                 std::vector<int>(static_cast<std::size_t>(m), t), classes, 1.0, nullptr, true);
        const Mat g = AdditiveFieldGradient(clean, eff, tri.d_pixels);
        field_opt.step({&field}, {&g});
        ProjectLinf(field, linf);
        mask = TopKMask(field, shape, l0);
      }
      const double l0_excess = std::max(0.0, (mask.array() != 0.0).count() - static_cast<double>(l0));
      result.budget_violation.push_back(std::max(LinfViolation(field, linf), l0_excess));
      epoch_loss += loss * m;
      ++step;
    }
    result.log.epoch_loss.push_back(epoch_loss / n);
  }
  TriggerPattern& trig = result.trigger;
  trig.kind = TriggerKind::kSparseAdditive;
  trig.shape = shape;
  trig.field = field;
  trig.mask = mask;
  trig.linf_budget = linf;
  trig.l0_budget = l0;
  trig.target_class = t;
  trig.seed = cfg.train.seed;
  trig.validate();
  WarnOnLowAsr(result, train, classes);
  return result;
}

AttackResult RunAttack(const PromptTunedModel& start, const ImageSet& train,
                       const std::vector<int>& classes, const AttackConfig& cfg) {
  const std::string& name = cfg.attack_name;
  if (name == "badclip") return BadclipAttack(start, train, classes, cfg);
  if (name == "badclip_adaptive") {
    return BadclipAdaptiveAttack(BadclipAttack(start, train, classes, cfg), train, classes, cfg);
  }
  if (name == "blended") return BlendedAttack(start, train, classes, cfg);
  if (name == "wanet") return WanetAttack(start, train, classes, cfg);
  if (name == "siba") return SibaAttack(start, train, classes, cfg);
  throw ConfigError("unknown attack '" + name + "'");
}

double MeasureAsr(const PromptTunedModel& model, const ImageSet& split, const TriggerPattern& trigger,
                  int target, const std::vector<int>& classes) {
  std::vector<int> keep;
  for (int i = 0; i < split.size(); ++i) {
    if (split.labels[static_cast<std::size_t>(i)] != target) keep.push_back(i);
  }
  if (keep.empty()) throw DataError("ASR split is empty after excluding target-class samples");
  const Mat triggered = ApplyTrigger(GatherRows(split.pixels, keep), trigger);
  const Mat logits = ComputeLogits(model, triggered);
  std::vector<int> cols = classes;
  if (cols.empty()) {
    cols.resize(static_cast<std::size_t>(logits.cols()));
    std::iota(cols.begin(), cols.end(), 0);
  }
  int hits = 0;
  for (Eigen::Index b = 0; b < logits.rows(); ++b) {
    int best = cols[0];
    for (int c : cols) {
      if (logits(b, c) > logits(b, best)) best = c;
    }
    hits += best == target;
  }
  return static_cast<double>(hits) / static_cast<double>(keep.size());
}

nlohmann::json AttackConfigJson(const AttackConfig& cfg) {
  return {{"attack_name", cfg.attack_name},
          {"target_class", cfg.target_class},
          {"poison_rate", cfg.poison_rate},
          {"warmup_epochs", cfg.warmup_epochs},
          {"joint_epochs", cfg.joint_epochs},
          {"epsilon", cfg.epsilon},
          {"trigger_optimizer", "adam"},
          {"trigger_lr", cfg.trigger_lr},
          {"trigger_loss_all_classes", cfg.trigger_loss_all_classes},
          {"poison_loss_all_classes", cfg.poison_loss_all_classes},
          {"train",
           {{"epochs", cfg.train.epochs},
            {"batch_size", cfg.train.batch_size},
            {"learning_rate", cfg.train.learning_rate},
            {"momentum", cfg.train.momentum},
            {"optimizer", cfg.train.optimizer},
            {"shots_per_class", cfg.train.shots_per_class},
            {"seed", cfg.train.seed}}},
          {"wanet",
           {{"grid_k", cfg.wanet.grid_k},
            {"strength", cfg.wanet.strength},
            {"pixel_scale", cfg.wanet.pixel_scale},
            {"p_normal", cfg.wanet.p_normal},
            {"p_attack", cfg.wanet.p_attack},
            {"p_noise", cfg.wanet.p_noise},
            {"noise_kind", cfg.wanet.noise_kind},
            {"noise_pixels", cfg.wanet.noise_pixels}}},
          {"siba", {{"l0", cfg.siba.l0}, {"linf", cfg.siba.linf}}},
          {"blended", {{"opacity", cfg.blended.opacity}}},
          {"adaptive",
           {{"alpha", cfg.adaptive.alpha},
            {"lambda_spec", cfg.adaptive.lambda_spec},
            {"epochs", cfg.adaptive.epochs}}}};
}

}  // namespace ptaudit
