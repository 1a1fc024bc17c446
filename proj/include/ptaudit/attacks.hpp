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

// Backdoor implantation during prompt tuning. Every attack starts from the
// same untuned model the clean twin starts from and only touches the
// meta-net and context; the encoders stay frozen.
//
// BadCLIP runs warmup_epochs + joint_epochs. The data-poisoning attacks
// (Blended, WaNet, SIBA) follow the clean recipe's train.epochs so the
// poisoned model and its clean twin see the same schedule; SIBA adds
// warmup_epochs of trigger-only optimization in front.

#ifndef PTAUDIT_ATTACKS_HPP_
#define PTAUDIT_ATTACKS_HPP_

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ptaudit/model.hpp"
#include "ptaudit/trigger.hpp"

namespace ptaudit {

struct WanetConfig {
  int grid_k = 4;
  double strength = 0.1;
  // Flow values are in units of half the image side, so displacement in
  // pixels is strength * pixel_scale * grid value.
  double pixel_scale = 16.0;
  double p_normal = 0.7;
  double p_attack = 0.1;
  double p_noise = 0.2;
  // Noise mode: "jitter" adds per-pixel uniform jitter of +-noise_pixels to
  // the trigger flow; "fresh" draws an independent random flow of the same
  // strength.
  std::string noise_kind = "jitter";
  double noise_pixels = 0.5;
};

struct SibaConfig {
  int l0 = -1;  // <= 0: scale the reference budget to the image area
  double linf = 8.0 / 255.0;
};

struct BlendedConfig {
  double opacity = 0.2;
};

struct AdaptiveConfig {
  double alpha = 0.5;
  double lambda_spec = 1.0;
  int epochs = 10;
};

struct AttackConfig {
  std::string attack_name = "badclip";
  int target_class = 0;
  double poison_rate = 0.10;
  int warmup_epochs = 3;
  int joint_epochs = 10;
  double epsilon = 4.0 / 255.0;
  double trigger_lr = 2e-3;  // Adam step for trigger parameters
  // BadCLIP only: the attacker runs tuning itself, so its trigger loss may
  // score the target against every class name rather than the tuning set.
  bool trigger_loss_all_classes = true;
  // Data poisoning: score poisoned samples against every class name too.
  bool poison_loss_all_classes = false;
  TrainConfig train;         // meta-net / context schedule
  WanetConfig wanet;
  SibaConfig siba;
  BlendedConfig blended;
  AdaptiveConfig adaptive;

  void validate() const;
  // l0 budget for SIBA on this image shape.
  int siba_l0(const ImageShape& shape) const;
};

struct AttackResult {
  PromptTunedModel model;
  TriggerPattern trigger;
  std::vector<std::string> warnings;
  TrainLog log;
  // Largest trigger-budget violation observed after each optimizer step
  // (0 when the projection is exact).
  std::vector<double> budget_violation;
  // Count of poisoned samples per epoch, for data-poisoning attacks.
  std::vector<int> poisoned_per_epoch;
};

enum class WanetMode { kNormal, kAttack, kNoise };

// I.i.d. draw of one training mode.
WanetMode DrawWanetMode(const WanetConfig& cfg, std::mt19937_64& rng);
// Per-epoch assignment with exact floor(p * n) attack and noise quotas.
std::vector<WanetMode> AssignWanetModes(const WanetConfig& cfg, int n, std::mt19937_64& rng);

// `train` is the few-shot tuning set; `classes` the softmax label set.
AttackResult BadclipAttack(const PromptTunedModel& start, const ImageSet& train,
                           const std::vector<int>& classes, const AttackConfig& cfg);
// Phase 2 on top of a BadCLIP phase-1 result.
AttackResult BadclipAdaptiveAttack(const AttackResult& phase1, const ImageSet& train,
                                   const std::vector<int>& classes, const AttackConfig& cfg);
AttackResult BlendedAttack(const PromptTunedModel& start, const ImageSet& train,
                           const std::vector<int>& classes, const AttackConfig& cfg);
AttackResult WanetAttack(const PromptTunedModel& start, const ImageSet& train,
                         const std::vector<int>& classes, const AttackConfig& cfg);
AttackResult SibaAttack(const PromptTunedModel& start, const ImageSet& train,
                        const std::vector<int>& classes, const AttackConfig& cfg);

// Dispatch on cfg.attack_name ("badclip", "badclip_adaptive", "blended",
// "wanet", "siba").
AttackResult RunAttack(const PromptTunedModel& start, const ImageSet& train,
                       const std::vector<int>& classes, const AttackConfig& cfg);

// Samples perturbed triggers for the adaptive attack: Gaussian noise of
// std alpha*eps/sigma added in normalized space, clipped to +-eps/sigma per
// channel, returned in pixel space.
Mat PerturbTrigger(const Mat& fixed_field, const ImageShape& shape, const std::vector<double>& sigma,
                   double epsilon, double alpha, std::mt19937_64& rng);

// Fraction of triggered samples (excluding true-label `target`) predicted as
// `target`; argmax over `classes` (all K when empty).
double MeasureAsr(const PromptTunedModel& model, const ImageSet& split, const TriggerPattern& trigger,
                  int target, const std::vector<int>& classes = {});

nlohmann::json AttackConfigJson(const AttackConfig& cfg);

}  // namespace ptaudit

#endif  // PTAUDIT_ATTACKS_HPP_
