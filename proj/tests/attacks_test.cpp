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
#include <random>

#include <gtest/gtest.h>

#include "ptaudit/attacks.hpp"
#include "ptaudit/trigger.hpp"
#include "test_support.hpp"

namespace ptaudit {
namespace {

using testing::RandomImages;
using testing::TinyModel;

const ImageShape kShape{8, 8, 3};

TEST(Trigger, IdentityCases) {
  const ImageSet x = RandomImages(4, kShape, 1);
  EXPECT_EQ(ApplyTrigger(x.pixels, MakeAdditive(kShape, Mat::Zero(1, kShape.pixels()), 4.0 / 255, 0)), x.pixels);
  EXPECT_EQ(WarpImages(x.pixels, kShape, Mat::Zero(1, kShape.area() * 2)), x.pixels);
  TriggerPattern blend;
  blend.kind = TriggerKind::kBlend;
  blend.shape = kShape;
  blend.field = Mat::Constant(1, kShape.pixels(), 0.3);
  blend.opacity = 0.0;
  EXPECT_EQ(ApplyTrigger(x.pixels, blend), x.pixels);
  blend.opacity = 1.0;
  EXPECT_LT((ApplyTrigger(x.pixels, blend).array() - 0.3).abs().maxCoeff(), 1e-15);
}

TEST(Trigger, AdditiveOutputIsClipped) {
  const ImageSet x = RandomImages(3, kShape, 2);
  const Mat big = Mat::Constant(1, kShape.pixels(), 0.5);
  TriggerPattern t = MakeAdditive(kShape, big, 0.5, 0);
  const Mat y = ApplyTrigger(x.pixels, t);
  EXPECT_GE(y.minCoeff(), 0.0);
  EXPECT_LE(y.maxCoeff(), 1.0);
  EXPECT_THROW(ApplyTrigger(Mat::Zero(1, 5), t), ConfigError);
}

TEST(Trigger, BudgetViolationsAreRejected) {
  Mat f = Mat::Constant(1, kShape.pixels(), 0.1);
  EXPECT_THROW(MakeAdditive(kShape, f, 0.05, 0).validate(), ConfigError);
}

TEST(Trigger, ProjectLinfClampsEveryEntry) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 1.0);
  Mat f(1, 50);
  for (Eigen::Index i = 0; i < f.size(); ++i) f.data()[i] = n(rng);
  const Mat before = f;
  ProjectLinf(f, 0.2);
  for (Eigen::Index i = 0; i < f.size(); ++i) {
    EXPECT_LE(std::abs(f.data()[i]), 0.2);
    EXPECT_EQ(f.data()[i], std::clamp(before.data()[i], -0.2, 0.2));
  }
}

TEST(Trigger, TopKMaskKeepsLargestPositions) {
  Mat f = Mat::Zero(1, kShape.pixels());
  // Position p covers entries [3p, 3p + 3).
  f(0, 3 * 5) = 0.9;
  f(0, 3 * 9 + 1) = -0.8;
  f(0, 3 * 2 + 2) = 0.1;
  const Mat m = TopKMask(f, kShape, 2);
  EXPECT_EQ(m.sum(), 2.0);
  EXPECT_EQ(m(0, 5), 1.0);
  EXPECT_EQ(m(0, 9), 1.0);
  // Ties go to the lower index.
  const Mat z = TopKMask(Mat::Zero(1, kShape.pixels()), kShape, 3);
  EXPECT_EQ(z(0, 0) + z(0, 1) + z(0, 2), 3.0);
}

TEST(Trigger, ArraysRoundTrip) {
  std::mt19937_64 rng(4);
  TriggerPattern t;
  t.kind = TriggerKind::kWarp;
  t.shape = kShape;
  t.flow = MakeWarpFlow(kShape, 4, 0.5, 4.0, rng);
  t.warp_strength = 0.5;
  t.target_class = 3;
  const TriggerPattern back = TriggerFromArrays(TriggerToArrays(t));
  EXPECT_EQ(back.kind, t.kind);
  EXPECT_EQ(back.flow, t.flow);
  EXPECT_EQ(back.target_class, 3);
}

TEST(Trigger, WarpFlowComponentsAreScaledByStrength) {
  std::mt19937_64 rng(5);
  const ImageShape s{32, 32, 3};
  const Mat flow = MakeWarpFlow(s, 4, 0.5, 16.0, rng);
  // Grid components have unit mean magnitude; bilinear upsampling is a
  // convex combination, so the per-component mean can only shrink.
  const double mean_abs = flow.cwiseAbs().mean();
  EXPECT_GT(mean_abs, 0.0);
  EXPECT_LE(mean_abs, 0.5 * 16.0 + 1e-9);
  std::mt19937_64 again(5);
  EXPECT_EQ(MakeWarpFlow(s, 4, 0.5, 16.0, again), flow);
  std::mt19937_64 r2(5);
  EXPECT_LT((MakeWarpFlow(s, 4, 0.25, 16.0, r2) * 2.0 - flow).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Trigger, AdditiveFieldGradientSkipsClippedEntries) {
  Mat clean(2, 3);
  clean << 0.5, 0.99, 0.0, 0.2, 0.5, 1.0;
  const Mat field = Mat::Constant(1, 3, 0.02);
  const Mat d = Mat::Ones(2, 3);
  const Mat g = AdditiveFieldGradient(clean, field, d);
  EXPECT_EQ(g(0, 0), 2.0);
  EXPECT_EQ(g(0, 1), 1.0);  // 0.99 + 0.02 clips in row 0
  EXPECT_EQ(g(0, 2), 1.0);  // 1.0 + 0.02 clips in row 1
}

TEST(Wanet, ModeDrawsMatchProbabilities) {
  WanetConfig cfg;
  std::mt19937_64 rng(6);
  const int n = 10000;
  int counts[3] = {0, 0, 0};
  for (int i = 0; i < n; ++i) ++counts[static_cast<int>(DrawWanetMode(cfg, rng))];
  const double p[3] = {cfg.p_normal, cfg.p_attack, cfg.p_noise};
  for (int m = 0; m < 3; ++m) {
    // 4-sigma binomial interval.
    const double sd = std::sqrt(n * p[m] * (1 - p[m]));
    EXPECT_NEAR(counts[m], n * p[m], 4 * sd) << "mode " << m;
  }
}

TEST(Wanet, AssignmentHasExactQuotas) {
  WanetConfig cfg;
  std::mt19937_64 rng(7);
  for (int n : {1, 9, 10, 37, 160}) {
    const auto modes = AssignWanetModes(cfg, n, rng);
    ASSERT_EQ(static_cast<int>(modes.size()), n);
    EXPECT_EQ(std::count(modes.begin(), modes.end(), WanetMode::kAttack), static_cast<long>(std::floor(0.1 * n)));
    EXPECT_EQ(std::count(modes.begin(), modes.end(), WanetMode::kNoise), static_cast<long>(std::floor(0.2 * n)));
  }
}

TEST(Adaptive, PerturbedTriggersStayInBudget) {
  std::mt19937_64 rng(8);
  const Mat fixed = Mat::Constant(1, kShape.pixels(), 3.0 / 255);
  const std::vector<double> sigma{0.25, 0.25, 0.25};
  for (int i = 0; i < 20; ++i) {
    const Mat d = PerturbTrigger(fixed, kShape, sigma, 4.0 / 255, 0.5, rng);
    EXPECT_LE(d.cwiseAbs().maxCoeff(), 4.0 / 255 + 1e-12);
  }
}

class AttackFixture : public ::testing::Test {
 protected:
  void SetUp() override {
    start = TinyModel(21, 4);
    train = RandomImages(40, start.dims.image, 22, 4);
    cfg.target_class = 1;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 8;
    cfg.warmup_epochs = 1;
    cfg.joint_epochs = 2;
    cfg.adaptive.epochs = 1;
    cfg.siba.l0 = 6;
  }
  void CheckCommon(const AttackResult& r) const {
    EXPECT_EQ(r.model.checksum(ParamGroup::kEncoder), start.checksum(ParamGroup::kEncoder));
    EXPECT_NO_THROW(r.trigger.validate());
    EXPECT_EQ(r.trigger.target_class, 1);
    for (double v : r.budget_violation) EXPECT_LE(v, 0.0);
  }
  PromptTunedModel start;
  ImageSet train;
  const std::vector<int> classes{0, 1, 2, 3};
  AttackConfig cfg;
};

TEST_F(AttackFixture, BadclipKeepsBudgetAndEncoders) {
  cfg.attack_name = "badclip";
  const AttackResult r = RunAttack(start, train, classes, cfg);
  CheckCommon(r);
  EXPECT_EQ(r.trigger.kind, TriggerKind::kAdditive);
  EXPECT_LE(r.trigger.field.cwiseAbs().maxCoeff(), cfg.epsilon + 1e-15);
  EXPECT_FALSE(r.budget_violation.empty());
  const AttackResult a = BadclipAdaptiveAttack(r, train, classes, cfg);
  CheckCommon(a);
  EXPECT_EQ(a.trigger.field, r.trigger.field);
}

TEST_F(AttackFixture, BlendedPoisonsExactQuota) {
  cfg.attack_name = "blended";
  const AttackResult r = RunAttack(start, train, classes, cfg);
  CheckCommon(r);
  ASSERT_EQ(r.poisoned_per_epoch.size(), 2u);
  for (int p : r.poisoned_per_epoch) EXPECT_EQ(p, 4);
}

TEST_F(AttackFixture, WanetUsesWarpTrigger) {
  cfg.attack_name = "wanet";
  const AttackResult r = RunAttack(start, train, classes, cfg);
  CheckCommon(r);
  EXPECT_EQ(r.trigger.kind, TriggerKind::kWarp);
  for (int p : r.poisoned_per_epoch) EXPECT_EQ(p, 4);
}

TEST_F(AttackFixture, SibaRespectsBothBudgets) {
  cfg.attack_name = "siba";
  const AttackResult r = RunAttack(start, train, classes, cfg);
  CheckCommon(r);
  EXPECT_EQ(r.trigger.kind, TriggerKind::kSparseAdditive);
  EXPECT_LE((r.trigger.mask.array() != 0.0).count(), 6);
  EXPECT_LE(r.trigger.field.cwiseAbs().maxCoeff(), cfg.siba.linf + 1e-15);
}

TEST_F(AttackFixture, SameSeedSameBits) {
  cfg.attack_name = "badclip";
  const AttackResult a = RunAttack(start, train, classes, cfg);
  const AttackResult b = RunAttack(start, train, classes, cfg);
  EXPECT_EQ(a.model.checksum(), b.model.checksum());
  EXPECT_EQ(a.trigger.field, b.trigger.field);
}

TEST_F(AttackFixture, UnknownAttackIsAConfigError) {
  cfg.attack_name = "trojan";
  EXPECT_THROW(RunAttack(start, train, classes, cfg), ConfigError);
}

TEST(MeasureAsr, CountsNonTargetSamplesPredictedAsTarget) {
  const PromptTunedModel m = TinyModel(23, 4);
  const ImageSet x = RandomImages(30, m.dims.image, 24, 4);
  const TriggerPattern t = MakeAdditive(x.shape, Mat::Constant(1, x.shape.pixels(), 0.03), 0.03, 2);
  const std::vector<int> pred = ArgMaxRows(ComputeLogits(m, ApplyTrigger(x.pixels, t)));
  int hit = 0, total = 0;
  for (int i = 0; i < x.size(); ++i) {
    if (x.labels[i] == 2) continue;
    ++total;
    hit += pred[i] == 2;
  }
  EXPECT_DOUBLE_EQ(MeasureAsr(m, x, t, 2), static_cast<double>(hit) / total);
}

}  // namespace
}  // namespace ptaudit
