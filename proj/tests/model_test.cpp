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
#include <filesystem>
#include <random>
#include <string>

#include <gtest/gtest.h>

#include "ptaudit/checkpoint.hpp"
#include "ptaudit/container.hpp"
#include "ptaudit/model.hpp"
#include "test_support.hpp"

namespace ptaudit {
namespace {

using testing::RandomImages;
using testing::TinyModel;

Mat RandomWeights(int rows, int cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Mat w(rows, cols);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = n(rng);
  return w;
}

TEST(Softmax, TwoClassOracle) {
  Mat logits(1, 2);
  logits << 1.0, 0.0;
  const Mat p = Softmax(logits, 1.0);
  EXPECT_NEAR(p(0, 0), 0.7310585786, 1e-9);
  EXPECT_NEAR(p(0, 1), 0.2689414214, 1e-9);
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
  const Mat logits = RandomWeights(4, 7, 1);
  const Mat p = Softmax(logits, 0.07);
  const Mat q = Softmax((logits.array() + 3.0).matrix(), 0.07);
  for (int r = 0; r < 4; ++r) EXPECT_NEAR(p.row(r).sum(), 1.0, 1e-12);
  EXPECT_LT((p - q).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Forward, LogitsAreCosinesOfUnitEmbeddings) {
  const PromptTunedModel m = TinyModel();
  const ImageSet x = RandomImages(3, m.dims.image, 11);
  const ForwardPass pass = Forward(m, x.pixels);
  const int k = m.dims.num_classes;
  ASSERT_EQ(pass.logits.rows(), 3);
  ASSERT_EQ(pass.logits.cols(), k);
  for (int b = 0; b < 3; ++b) {
    EXPECT_NEAR(pass.unit_features.row(b).norm(), 1.0, 1e-12);
    EXPECT_NEAR(pass.unit_features.row(b).dot(pass.features.row(b)), pass.features.row(b).norm(), 1e-9);
    for (int c = 0; c < k; ++c) {
      const double cosine = pass.unit_features.row(b).dot(pass.text_unit.row(b * k + c));
      EXPECT_NEAR(pass.logits(b, c), cosine, 1e-12);
      EXPECT_LE(std::abs(pass.logits(b, c)), 1.0 + 1e-12);
    }
  }
  EXPECT_LT((ComputeLogits(m, x.pixels) - pass.logits).cwiseAbs().maxCoeff(), 1e-15);
  const Mat p = PredictProba(m, x.pixels);
  EXPECT_LT((p - Softmax(pass.logits, m.temperature)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Forward, FeaturePathMatchesPixelPath) {
  const PromptTunedModel m = TinyModel();
  const ImageSet x = RandomImages(4, m.dims.image, 12);
  const ForwardPass a = Forward(m, x.pixels);
  const ForwardPass b = ForwardFromFeatures(m, EncodeFeatures(m, x.pixels));
  EXPECT_LT((a.logits - b.logits).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(CrossEntropy, MatchesHandComputation) {
  Mat logits(1, 2);
  logits << 1.0, 0.0;
  Mat d;
  const double ce = CrossEntropy(logits, {0}, {0, 1}, 1.0, &d);
  EXPECT_NEAR(ce, 0.3132616875, 1e-9);
  EXPECT_NEAR(d(0, 0), 0.7310585786 - 1.0, 1e-9);
  EXPECT_NEAR(d(0, 1), 0.2689414214, 1e-9);
}

TEST(CrossEntropy, IgnoresColumnsOutsideLabelSet) {
  Mat logits(1, 3);
  logits << 0.2, 0.5, 9.0;
  Mat d;
  const double ce = CrossEntropy(logits, {1}, {0, 1}, 1.0, &d);
  EXPECT_NEAR(ce, std::log(std::exp(0.2) + std::exp(0.5)) - 0.5, 1e-12);
  EXPECT_EQ(d(0, 2), 0.0);
}

// Relative error between analytic and central-difference gradients over a
// sample of entries of one parameter array.
double FiniteDifferenceError(PromptTunedModel m, Mat ModelParams::*member, const Mat& analytic, const Mat& pixels,
                             const Mat& w, int samples) {
  const auto loss = [&](const PromptTunedModel& mm) { return (ComputeLogits(mm, pixels).array() * w.array()).sum(); };
  Mat& p = m.params.*member;
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<Eigen::Index> pick(0, p.size() - 1);
  double num = 0.0, den = 0.0;
  const double h = 1e-6;
  for (int s = 0; s < samples; ++s) {
    const Eigen::Index i = pick(rng);
    const double keep = p.data()[i];
    p.data()[i] = keep + h;
    const double up = loss(m);
    p.data()[i] = keep - h;
    const double down = loss(m);
    p.data()[i] = keep;
    const double fd = (up - down) / (2 * h);
    num += (analytic.data()[i] - fd) * (analytic.data()[i] - fd);
    den += fd * fd;
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-10);
}

TEST(Gradients, EveryParameterMatchesFiniteDifferences) {
  const PromptTunedModel m = TinyModel(9);
  const ImageSet x = RandomImages(3, m.dims.image, 13);
  const Mat w = RandomWeights(3, m.dims.num_classes, 2);
  const ForwardPass pass = Forward(m, x.pixels);
  ModelParams grads = m.params.zeros_like();
  const Mat d_features = BackwardHead(m, pass, w, &grads);
  BackwardImage(m, pass, d_features, &grads);
  const std::vector<std::pair<const char*, Mat ModelParams::*>> arrays{
      {"conv1_w", &ModelParams::conv1_w},     {"conv2_w", &ModelParams::conv2_w},
      {"image_w", &ModelParams::image_w},     {"image_b", &ModelParams::image_b},
      {"text_ctx_w", &ModelParams::text_ctx_w}, {"text_cls_w", &ModelParams::text_cls_w},
      {"text_gate_w", &ModelParams::text_gate_w}, {"text_b1", &ModelParams::text_b1},
      {"text_w2", &ModelParams::text_w2},     {"class_embeddings", &ModelParams::class_embeddings},
      {"meta_w1", &ModelParams::meta_w1},     {"meta_b1", &ModelParams::meta_b1},
      {"meta_w2", &ModelParams::meta_w2},     {"meta_b2", &ModelParams::meta_b2},
      {"context", &ModelParams::context}};
  for (const auto& [name, member] : arrays) {
    EXPECT_LE(FiniteDifferenceError(m, member, grads.*member, x.pixels, w, 12), 1e-2) << name;
  }
}

TEST(Gradients, PixelGradientMatchesFiniteDifferences) {
  const PromptTunedModel m = TinyModel(4);
  const ImageSet x = RandomImages(2, m.dims.image, 14, 5, 0.2, 0.8);
  const Mat w = RandomWeights(2, m.dims.num_classes, 3);
  const LogitLossFn fn = [&](const Mat& logits, Mat& d) {
    d = w;
    return (logits.array() * w.array()).sum();
  };
  const PixelGradient g = LogitPixelGradient(m, x.pixels, fn);
  Mat p = x.pixels;
  double num = 0.0, den = 0.0;
  const double h = 1e-6;
  for (Eigen::Index i = 0; i < p.size(); i += 7) {
    const double keep = p.data()[i];
    p.data()[i] = keep + h;
    const double up = (ComputeLogits(m, p).array() * w.array()).sum();
    p.data()[i] = keep - h;
    const double down = (ComputeLogits(m, p).array() * w.array()).sum();
    p.data()[i] = keep;
    const double fd = (up - down) / (2 * h);
    num += std::pow(g.d_pixels.data()[i] - fd, 2);
    den += fd * fd;
  }
  EXPECT_LE(std::sqrt(num) / std::sqrt(den), 1e-2);
}

TEST(PromptTune, ChangesOnlyPromptParameters) {
  const PromptTunedModel m = TinyModel(6, 4);
  const ImageSet train = RandomImages(16, m.dims.image, 15, 4);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 4;
  TrainLog log;
  const PromptTunedModel tuned = PromptTune(m, train, {0, 1, 2, 3}, cfg, &log);
  EXPECT_EQ(tuned.checksum(ParamGroup::kEncoder), m.checksum(ParamGroup::kEncoder));
  EXPECT_NE(tuned.checksum(ParamGroup::kPrompt), m.checksum(ParamGroup::kPrompt));
  EXPECT_EQ(log.epoch_loss.size(), 2u);
}

TEST(PromptTune, RejectsBadConfig) {
  TrainConfig cfg;
  cfg.batch_size = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.optimizer = "rmsprop";
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Checkpoint, RoundTripPreservesEveryBit) {
  const PromptTunedModel m = TinyModel(8);
  const auto path = std::filesystem::temp_directory_path() / "ptaudit_model_test.ckpt";
  SaveCheckpoint(m, path.string());
  const PromptTunedModel back = LoadCheckpoint(path.string());
  std::filesystem::remove(path);
  EXPECT_EQ(back.checksum(), m.checksum());
  EXPECT_EQ(back.dims, m.dims);
  EXPECT_EQ(back.temperature, m.temperature);
  const ImageSet x = RandomImages(2, m.dims.image, 16);
  EXPECT_EQ(ComputeLogits(back, x.pixels), ComputeLogits(m, x.pixels));
}

TEST(Container, TruncatedOrCorruptBytesRaiseParseError) {
  ArrayFile f;
  f.metadata["kind"] = "test";
  Mat a(2, 3);
  a << 1, 2, 3, 4, 5, 6;
  f.put("a", a);
  const std::string bytes = SerializeArrayFile(f);
  const ArrayFile back = ParseArrayFile(bytes);
  EXPECT_EQ(back.get("a"), a);
  EXPECT_EQ(back.metadata["kind"], "test");
  EXPECT_THROW(ParseArrayFile(bytes.substr(0, bytes.size() - 1)), ParseError);
  EXPECT_THROW(ParseArrayFile(bytes.substr(0, 12)), ParseError);
  std::string bad = bytes;
  bad[0] = 'X';
  try {
    ParseArrayFile(bad);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
}

TEST(Container, Sha256KnownVector) {
  EXPECT_EQ(Sha256Hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

}  // namespace
}  // namespace ptaudit
