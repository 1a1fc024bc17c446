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
#include <random>

#include <gtest/gtest.h>

#include "ptaudit/baselines.hpp"
#include "test_support.hpp"

namespace ptaudit {
namespace {

using testing::RandomImages;
using testing::TinyModel;

const ImageShape kShape{8, 8, 3};

TEST(Mad, LoneLowValueIsFlagged) {
  const MadFlags f = BaselineAnomaly({100, 100, 100, 1}, AnomalyDirection::kLow);
  EXPECT_FALSE(f.degenerate);
  EXPECT_TRUE(f.mean_ad_fallback);
  EXPECT_EQ(f.flagged, (std::vector<bool>{false, false, false, true}));
  // Median 100, mean absolute deviation 24.75.
  EXPECT_NEAR(f.index[3], 99.0 / (1.2533 * 24.75), 1e-12);
}

TEST(Mad, ConsistencyConstantAndDirection) {
  const std::vector<double> v{10, 11, 12, 13, 14, 1};
  const MadFlags low = BaselineAnomaly(v, AnomalyDirection::kLow);
  // Median 11.5, absolute deviations {1.5, .5, .5, 1.5, 2.5, 10.5} -> MAD 1.5.
  EXPECT_DOUBLE_EQ(low.median, 11.5);
  EXPECT_DOUBLE_EQ(low.mad, 1.5);
  EXPECT_NEAR(low.index[5], 10.5 / (1.4826 * 1.5), 1e-12);
  EXPECT_TRUE(low.flagged[5]);
  const MadFlags high = BaselineAnomaly(v, AnomalyDirection::kHigh);
  EXPECT_FALSE(high.flagged[5]);
  EXPECT_NEAR(high.index[5], -low.index[5], 1e-12);
}

TEST(Mad, AllEqualFlagsNothing) {
  const MadFlags f = BaselineAnomaly({3, 3, 3, 3}, AnomalyDirection::kLow);
  EXPECT_TRUE(f.degenerate);
  EXPECT_EQ(std::count(f.flagged.begin(), f.flagged.end(), true), 0);
}

TEST(Mad, PermutationEquivariant) {
  std::vector<double> v{5, 9, 2, 7, 7, 30, 1, 8};
  std::vector<int> perm{3, 0, 7, 5, 1, 6, 2, 4};
  std::vector<double> pv;
  for (int p : perm) pv.push_back(v[p]);
  const MadFlags a = BaselineAnomaly(v, AnomalyDirection::kHigh);
  const MadFlags b = BaselineAnomaly(pv, AnomalyDirection::kHigh);
  for (std::size_t i = 0; i < perm.size(); ++i) {
    EXPECT_EQ(b.index[i], a.index[perm[i]]);
    EXPECT_EQ(b.flagged[i], a.flagged[perm[i]]);
  }
}

TEST(Lambda, MultipliesOnSuccessDividesOtherwise) {
  BaselineConfig cfg;
  EXPECT_DOUBLE_EQ(NextLambda(1e-3, 0.99, cfg), 1.5e-3);
  EXPECT_DOUBLE_EQ(NextLambda(1e-3, 0.98, cfg), 1e-3 / 1.5);
}

TEST(NcApply, MaskEndpoints) {
  const ImageSet x = RandomImages(3, kShape, 1);
  const Mat pattern = Mat::Constant(1, kShape.pixels(), 0.25);
  EXPECT_EQ(NcApply(x.pixels, kShape, Mat::Zero(1, kShape.area()), pattern), x.pixels);
  EXPECT_LT((NcApply(x.pixels, kShape, Mat::Ones(1, kShape.area()), pattern).array() - 0.25).abs().maxCoeff(), 1e-15);
  Mat half = Mat::Zero(1, kShape.area());
  half(0, 4) = 0.5;
  const Mat y = NcApply(x.pixels, kShape, half, pattern);
  for (int ch = 0; ch < 3; ++ch) EXPECT_NEAR(y(0, 12 + ch), 0.5 * x.pixels(0, 12 + ch) + 0.125, 1e-15);
  EXPECT_EQ(y(0, 0), x.pixels(0, 0));
}

TEST(PixbApply, SignedFieldsAndClipping) {
  const ImageSet x = RandomImages(2, kShape, 2);
  const Mat zero = Mat::Zero(1, kShape.pixels());
  EXPECT_EQ(PixbApply(x.pixels, zero, zero), x.pixels);
  Mat pos = zero, neg = zero;
  pos(0, 0) = 2.0;
  neg(0, 1) = 2.0;
  const Mat y = PixbApply(x.pixels, pos, neg);
  EXPECT_EQ(y(0, 0), 1.0);
  EXPECT_EQ(y(0, 1), 0.0);
  pos(0, 5) = 0.5;  // same spatial position as entry 3..5
  neg(0, 30) = 1e-4;  // below the floor
  EXPECT_EQ(PixbL0Count(pos, neg, kShape, 1e-3), 2);
}

class BaselineFixture : public ::testing::Test {
 protected:
  void SetUp() override {
    model = TinyModel(41, 4);
    pool = RandomImages(80, kShape, 42, 0);
    cfg.epochs = 3;
    cfg.batch_size = 16;
    cfg.seed = 3;
  }
  PromptTunedModel model;
  ImageSet pool;
  BaselineConfig cfg;
};

template <class R>
void CheckLambdaSchedule(const R& r, const BaselineConfig& cfg) {
  ASSERT_EQ(r.lambdas.size(), static_cast<std::size_t>(cfg.epochs));
  ASSERT_EQ(r.epoch_asr.size(), r.lambdas.size());
  EXPECT_DOUBLE_EQ(r.lambdas[0], cfg.lambda_init);
  for (std::size_t e = 1; e < r.lambdas.size(); ++e) {
    EXPECT_DOUBLE_EQ(r.lambdas[e], NextLambda(r.lambdas[e - 1], r.epoch_asr[e - 1], cfg));
  }
}

TEST_F(BaselineFixture, NcStaysInBoxAndFollowsSchedule) {
  const PoolSplit split = SplitPool(pool, cfg.holdout_fraction, cfg.seed);
  const NcResult r = NcInvert(model, 2, split, cfg);
  EXPECT_GE(r.mask.minCoeff(), 0.0);
  EXPECT_LE(r.mask.maxCoeff(), 1.0);
  EXPECT_GE(r.pattern.minCoeff(), 0.0);
  EXPECT_LE(r.pattern.maxCoeff(), 1.0);
  EXPECT_NEAR(r.mask_l1, r.mask.sum(), 1e-9);
  CheckLambdaSchedule(r, cfg);
  const Mat stamped = NcApply(split.holdout.pixels, kShape, r.mask, r.pattern);
  EXPECT_DOUBLE_EQ(r.asr, TargetRate(model, stamped, 2));
}

TEST_F(BaselineFixture, PixbFieldsAreNonNegativeAndBounded) {
  const PoolSplit split = SplitPool(pool, cfg.holdout_fraction, cfg.seed);
  const PixbResult r = PixbInvert(model, 1, split, cfg);
  EXPECT_GE(r.delta_pos.minCoeff(), 0.0);
  EXPECT_GE(r.delta_neg.minCoeff(), 0.0);
  EXPECT_LE(r.delta_pos.maxCoeff(), 1.0);
  EXPECT_LE(r.delta_neg.maxCoeff(), 1.0);
  EXPECT_EQ(r.l0_count, PixbL0Count(r.delta_pos, r.delta_neg, kShape, cfg.l0_floor));
  CheckLambdaSchedule(r, cfg);
}

TEST_F(BaselineFixture, ReportsAreDeterministicAndLeaveModelIntact) {
  const std::string before = model.checksum();
  const BaselineReport a = RunBaseline("nc", model, pool, cfg);
  cfg.workers = 2;
  const BaselineReport b = RunBaseline("nc", model, pool, cfg);
  EXPECT_EQ(model.checksum(), before);
  EXPECT_EQ(a.values, b.values);
  EXPECT_EQ(a.classes, (std::vector<int>{0, 1, 2, 3}));
  EXPECT_EQ(a.model_checksum, before);
  const auto j = BaselineReportJson(a);
  EXPECT_EQ(j["method"], "nc");
  EXPECT_EQ(j["classes"].size(), 4u);
  EXPECT_THROW(RunBaseline("strip", model, pool, cfg), ConfigError);
}

}  // namespace
}  // namespace ptaudit
