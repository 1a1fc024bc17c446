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
#include <cmath>

#include <gtest/gtest.h>

#include "ptaudit/attacks.hpp"
#include "ptaudit/removal.hpp"
#include "test_support.hpp"

namespace ptaudit {
namespace {

using testing::RandomImages;
using testing::TinyModel;

TEST(RepairBatch, StampsExactlyTheChosenRows) {
  const ImageSet clean = RandomImages(21, {8, 8, 3}, 1, 4, 0.1, 0.9);
  const Mat delta = Mat::Constant(1, clean.shape.pixels(), 0.01);
  const ImageSet b = MakeRepairBatch(clean, delta, 0.5, 7);
  const std::vector<int> rows = RepairStampRows(21, 0.5, 7);
  EXPECT_EQ(rows.size(), 10u);
  EXPECT_EQ(b.labels, clean.labels);
  int changed = 0;
  for (int i = 0; i < clean.size(); ++i) {
    const bool stamped = std::find(rows.begin(), rows.end(), i) != rows.end();
    if (stamped) {
      EXPECT_LT((b.pixels.row(i) - clean.pixels.row(i) - delta).cwiseAbs().maxCoeff(), 1e-15);
    } else {
      EXPECT_EQ(b.pixels.row(i), clean.pixels.row(i));
    }
    changed += b.pixels.row(i) != clean.pixels.row(i);
  }
  EXPECT_EQ(changed, 10);
  EXPECT_EQ(MakeRepairBatch(clean, Mat(), 0.5, 7).pixels, clean.pixels);
  EXPECT_EQ(MakeRepairBatch(clean, delta, 0.0, 7).pixels, clean.pixels);
  EXPECT_THROW(MakeRepairBatch(clean, Mat::Zero(1, 3), 0.5, 7), ConfigError);
}

TEST(RepairBatch, OutputStaysInUnitRange) {
  const ImageSet clean = RandomImages(10, {8, 8, 3}, 2);
  const ImageSet b = MakeRepairBatch(clean, Mat::Constant(1, clean.shape.pixels(), 0.5), 1.0, 1);
  EXPECT_GE(b.pixels.minCoeff(), 0.0);
  EXPECT_LE(b.pixels.maxCoeff(), 1.0);
}

AnomalyReport FakeReport() {
  AnomalyReport r;
  for (int c = 0; c < 4; ++c) {
    ClassInversionResult cr;
    cr.class_id = c;
    cr.delta = Mat::Constant(1, 192, 0.001 * (c + 1));
    r.results.push_back(cr);
  }
  r.anomaly.scores = {0.1, 3.0, 1.2, -0.4};
  r.flagged_class = 1;
  return r;
}

TEST(RepairDelta, ModesPickTheRightPerturbation) {
  const AnomalyReport r = FakeReport();
  const ImageShape s{8, 8, 3};
  RepairConfig cfg;
  cfg.mode = RepairMode::kCiTrigger;
  EXPECT_EQ(RepairDelta(r, cfg, s), r.results[1].delta);
  cfg.mode = RepairMode::kWrongClassDelta;
  EXPECT_EQ(RepairDelta(r, cfg, s), r.results[2].delta);
  cfg.mode = RepairMode::kCleanOnly;
  EXPECT_EQ(RepairDelta(r, cfg, s).size(), 0);
  cfg.mode = RepairMode::kRandomDelta;
  const Mat d = RepairDelta(r, cfg, s);
  EXPECT_EQ(d.cols(), 192);
  EXPECT_LE(d.cwiseAbs().maxCoeff(), cfg.epsilon);
  for (RepairMode m : {RepairMode::kCiTrigger, RepairMode::kCleanOnly, RepairMode::kRandomDelta,
                       RepairMode::kWrongClassDelta}) {
    EXPECT_EQ(ParseRepairMode(RepairModeName(m)), m);
  }
  EXPECT_THROW(ParseRepairMode("finetune"), ConfigError);
}

TEST(Repair, KeepsEncodersAndReportsMetrics) {
  const PromptTunedModel m = TinyModel(51, 4);
  const ImageSet labeled = RandomImages(24, m.dims.image, 52, 4);
  const ImageSet test = RandomImages(40, m.dims.image, 53, 4);
  const TriggerPattern trig = MakeAdditive(test.shape, Mat::Constant(1, test.shape.pixels(), 4.0 / 255), 4.0 / 255, 2);
  RepairEval ev;
  ev.acc_split = &test;
  ev.classes = {0, 1, 2, 3};
  ev.asr_split = &test;
  ev.true_trigger = &trig;
  ev.target = 2;
  RepairConfig cfg;
  cfg.epochs = 1;
  const RepairResult r = Repair(m, labeled, {0, 1, 2, 3}, trig.field, cfg, ev);
  EXPECT_EQ(r.model.checksum(ParamGroup::kEncoder), m.checksum(ParamGroup::kEncoder));
  EXPECT_DOUBLE_EQ(r.before.asr_true, MeasureAsr(m, test, trig, 2));
  EXPECT_DOUBLE_EQ(r.after.asr_true, MeasureAsr(r.model, test, trig, 2));
  EXPECT_DOUBLE_EQ(r.after.acc, Accuracy(r.model, test, {0, 1, 2, 3}));
  EXPECT_EQ(r.log.epoch_loss.size(), 1u);
  // Over-budget deltas and missing deltas are configuration errors.
  EXPECT_THROW(Repair(m, labeled, {0, 1, 2, 3}, Mat::Constant(1, test.shape.pixels(), 0.5), cfg, ev), ConfigError);
  EXPECT_THROW(Repair(m, labeled, {0, 1, 2, 3}, Mat(), cfg, ev), ConfigError);
  cfg.mode = RepairMode::kCleanOnly;
  EXPECT_NO_THROW(Repair(m, labeled, {0, 1, 2, 3}, Mat(), cfg, ev));
}

}  // namespace
}  // namespace ptaudit
