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

// Toy prompt-tuned dual-encoder classifier.
//
// A frozen convolutional image encoder maps pixels to a joint embedding f.
// A frozen MLP text encoder maps a prompt {context tokens, class token} to
// the same space; each class token also gates how strongly the context
// drives each hidden unit. The meta-net reads the normalized image embedding and
// emits one offset per context token; the prompt for class k is
// {V + meta(f), c_k}. Logits are cosine similarities between the image
// embedding and each class's prompt embedding, and probabilities are the
// softmax of logits / temperature.

#ifndef PTAUDIT_MODEL_HPP_
#define PTAUDIT_MODEL_HPP_

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ptaudit/common.hpp"

namespace ptaudit {

struct ModelDims {
  ImageShape image;
  int joint_dim = 64;     // d
  int token_dim = 16;     // e
  int num_context = 4;    // N
  int num_classes = 20;   // K
  int conv1_channels = 8;
  int conv2_channels = 16;
  int meta_hidden = 32;
  int text_hidden = 64;

  int context_size() const { return num_context * token_dim; }
  void validate() const;
  bool operator==(const ModelDims&) const = default;
};

struct NormalizationSpec {
  std::vector<double> mean{0.5, 0.5, 0.5};
  std::vector<double> std{0.25, 0.25, 0.25};

  void validate(int channels) const;
  bool operator==(const NormalizationSpec&) const = default;
};

enum class ParamGroup { kEncoder, kPrompt };

// Every learnable array of the model. Gradients use the same struct.
struct ModelParams {
  // image encoder
  Mat conv1_w, conv1_b, conv2_w, conv2_b, image_w, image_b;
  // text encoder
  Mat text_ctx_w, text_cls_w, text_gate_w, text_b1, text_w2, text_b2;
  Mat class_embeddings;  // K x e, frozen with the encoders
  // meta-net
  Mat meta_w1, meta_b1, meta_w2, meta_b2;
  Mat context;  // 1 x (N*e)

  ModelParams zeros_like() const;

  template <class Self, class Fn>
  static void visit(Self& self, Fn&& fn) {
    fn("image.conv1.weight", self.conv1_w, ParamGroup::kEncoder);
    fn("image.conv1.bias", self.conv1_b, ParamGroup::kEncoder);
    fn("image.conv2.weight", self.conv2_w, ParamGroup::kEncoder);
    fn("image.conv2.bias", self.conv2_b, ParamGroup::kEncoder);
    fn("image.head.weight", self.image_w, ParamGroup::kEncoder);
    fn("image.head.bias", self.image_b, ParamGroup::kEncoder);
    fn("text.ctx.weight", self.text_ctx_w, ParamGroup::kEncoder);
    fn("text.cls.weight", self.text_cls_w, ParamGroup::kEncoder);
    fn("text.gate.weight", self.text_gate_w, ParamGroup::kEncoder);
    fn("text.hidden.bias", self.text_b1, ParamGroup::kEncoder);
    fn("text.out.weight", self.text_w2, ParamGroup::kEncoder);
    fn("text.out.bias", self.text_b2, ParamGroup::kEncoder);
    fn("text.class_embeddings", self.class_embeddings, ParamGroup::kEncoder);
    fn("meta.fc1.weight", self.meta_w1, ParamGroup::kPrompt);
    fn("meta.fc1.bias", self.meta_b1, ParamGroup::kPrompt);
    fn("meta.fc2.weight", self.meta_w2, ParamGroup::kPrompt);
    fn("meta.fc2.bias", self.meta_b2, ParamGroup::kPrompt);
    fn("prompt.context", self.context, ParamGroup::kPrompt);
  }
  template <class Fn>
  void for_each(Fn&& fn) { visit(*this, fn); }
  template <class Fn>
  void for_each(Fn&& fn) const { visit(*this, fn); }

  std::vector<Mat*> group(ParamGroup g);
};

struct PromptTunedModel {
  ModelDims dims;
  NormalizationSpec norm;
  double temperature = 0.07;
  std::uint64_t seed = 0;
  ModelParams params;

  void validate() const;
  // SHA-256 over the arrays of one group, hex encoded.
  std::string checksum(ParamGroup g) const;
  std::string checksum() const;
};

// Randomly initialized model. Encoders are untrained until PretrainEncoders.
PromptTunedModel InitModel(const ModelDims& dims, const NormalizationSpec& norm,
                           double temperature, std::uint64_t seed);

// Re-draws only the meta-net and keeps the learned context, giving the
// starting point of prompt tuning.
void ResetPromptParams(PromptTunedModel& model, std::uint64_t seed);

// Intermediates of one forward pass, kept for backpropagation.
struct ForwardPass {
  int batch = 0;
  bool use_meta = true;
  Mat normalized;
  Mat cols1, act1, cols2, act2;
  Mat features;       // B x d, raw image embedding
  Vec feature_norms;  // B
  Mat unit_features;  // B x d
  Mat meta_hidden;    // B x meta_hidden (post-ReLU)
  Mat context;        // B x (N*e), prompt context per image
  Mat text_hidden;    // (B*K) x text_hidden (post-tanh)
  Vec text_norms;     // B*K
  Mat text_unit;      // (B*K) x d
  Mat logits;         // B x K cosine similarities
};

// Optional overrides for the fixed-context (meta-free) route.
struct PromptOverride {
  const Mat* context = nullptr;           // 1 x (N*e)
  const Mat* class_embeddings = nullptr;  // K x e
};

void EncodeImages(const PromptTunedModel& model, const Mat& pixels, ForwardPass& pass);
void ComputeHead(const PromptTunedModel& model, ForwardPass& pass, bool use_meta,
                 const PromptOverride& prompt = {});
ForwardPass Forward(const PromptTunedModel& model, const Mat& pixels, bool use_meta = true);
// Starts a pass from cached image embeddings (frozen image encoder).
ForwardPass ForwardFromFeatures(const PromptTunedModel& model, const Mat& features,
                                bool use_meta = true);

// Backprop through meta-net and text encoder. Accumulates into `grads` when
// given, returns dL/d(features).
Mat BackwardHead(const PromptTunedModel& model, const ForwardPass& pass, const Mat& d_logits,
                 ModelParams* grads, const PromptOverride& prompt = {});
// Backprop through the image encoder. Accumulates encoder grads when given,
// returns dL/d(pixels).
Mat BackwardImage(const PromptTunedModel& model, const ForwardPass& pass, const Mat& d_features,
                  ModelParams* grads);

// Raw image embeddings f(x), B x d.
Mat EncodeFeatures(const PromptTunedModel& model, const Mat& pixels);

// Image-conditioned cosine logits, B x K, in [-1, 1].
Mat ComputeLogits(const PromptTunedModel& model, const Mat& pixels);
// Fixed-context logits without the meta-net.
Mat ZeroShotLogits(const PromptTunedModel& model, const Mat& pixels);
Mat ZeroShotLogits(const PromptTunedModel& encoders, const Mat& context,
                   const Mat& class_embeddings, const Mat& pixels);
// Row-wise softmax(logits / temperature).
Mat Softmax(const Mat& logits, double temperature);
Mat PredictProba(const PromptTunedModel& model, const Mat& pixels);

// Logits and d(loss)/d(pixels) for a pixel-space loss on the logits.
struct PixelGradient {
  Mat logits;
  Mat d_pixels;
  double loss = 0.0;
};
using LogitLossFn = std::function<double(const Mat& logits, Mat& d_logits)>;
PixelGradient LogitPixelGradient(const PromptTunedModel& model, const Mat& pixels,
                                 const LogitLossFn& loss);

// Mean cross-entropy of softmax(logits[:, classes] / temperature) against
// labels given as class ids. Writes dL/dlogits (full K columns).
double CrossEntropy(const Mat& logits, const std::vector<int>& labels,
                    const std::vector<int>& classes, double temperature, Mat* d_logits);

struct TrainConfig {
  int epochs = 40;
  int batch_size = 8;
  double learning_rate = 0.1;
  double momentum = 0.9;
  std::string optimizer = "sgd";  // "sgd" (momentum) or "adam"
  int shots_per_class = 16;
  std::uint64_t seed = 0;

  void validate() const;
};

// Labeled few-shot training subset: `shots` images from each class.
ImageSet SampleShots(const ImageSet& data, const std::vector<int>& classes, int shots,
                     std::uint64_t seed);

struct TrainLog {
  std::vector<double> epoch_loss;
};

// CoCoOp-style tuning: only the meta-net and context change. `classes` is
// the label set the softmax runs over (the seen classes).
PromptTunedModel PromptTune(const PromptTunedModel& model, const ImageSet& train,
                            const std::vector<int>& classes, const TrainConfig& cfg,
                            TrainLog* log = nullptr);

struct PretrainConfig {
  int epochs = 12;
  int batch_size = 32;
  double learning_rate = 2e-3;
  // Per-sample PGD examples mixed 50/50 with clean ones; 0 disables.
  double adversarial_epsilon = 2.0 / 255.0;
  int adversarial_steps = 2;
  std::uint64_t seed = 0;
};

// Contrastive image/class-name pre-training of the encoders (and the
// initial context), standing in for a foundation model. Encoders are frozen
// afterwards.
void PretrainEncoders(PromptTunedModel& model, const ImageSet& data, const PretrainConfig& cfg,
                      TrainLog* log = nullptr);

// Top-1 accuracy on the samples labeled with one of `classes`, argmax taken
// over `classes` only.
double Accuracy(const PromptTunedModel& model, const ImageSet& data,
                const std::vector<int>& classes);

}  // namespace ptaudit

#endif  // PTAUDIT_MODEL_HPP_
