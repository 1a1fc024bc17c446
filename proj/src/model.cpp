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

#include "ptaudit/model.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "ptaudit/optim.hpp"

namespace ptaudit {
namespace {

constexpr double kNormFloor = 1e-12;
// Rows per chunk for inference over large sets; bounds im2col memory.
constexpr int kInferenceChunk = 128;

struct ConvGeometry {
  int in_h, in_w, in_c, out_c, kernel, stride, pad;
  int out_h() const { return (in_h + 2 * pad - kernel) / stride + 1; }
  int out_w() const { return (in_w + 2 * pad - kernel) / stride + 1; }
  int patch() const { return kernel * kernel * in_c; }
};

ConvGeometry Conv1Geometry(const ModelDims& d) {
  return {d.image.height, d.image.width, d.image.channels, d.conv1_channels, 5, 2, 2};
}

ConvGeometry Conv2Geometry(const ModelDims& d) {
  const ConvGeometry g1 = Conv1Geometry(d);
  return {g1.out_h(), g1.out_w(), d.conv1_channels, d.conv2_channels, 3, 2, 1};
}

int FlatFeatures(const ModelDims& d) {
  const ConvGeometry g2 = Conv2Geometry(d);
  return g2.out_h() * g2.out_w() * g2.out_c;
}

// x: B x (in_h*in_w*in_c) -> cols: (B*out_h*out_w) x (k*k*in_c)
void Im2Col(const Mat& x, const ConvGeometry& g, Mat& cols) {
  const int batch = static_cast<int>(x.rows());
  const int oh = g.out_h(), ow = g.out_w();
  cols.setZero(static_cast<Eigen::Index>(batch) * oh * ow, g.patch());
  for (int b = 0; b < batch; ++b) {
    const double* src = x.row(b).data();
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        double* dst = cols.row((static_cast<Eigen::Index>(b) * oh + oy) * ow + ox).data();
        for (int ky = 0; ky < g.kernel; ++ky) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.in_h) continue;
          for (int kx = 0; kx < g.kernel; ++kx) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix < 0 || ix >= g.in_w) continue;
            const double* pix = src + (iy * g.in_w + ix) * g.in_c;
            double* out = dst + (ky * g.kernel + kx) * g.in_c;
            std::copy(pix, pix + g.in_c, out);
          }
        }
      }
    }
  }
}

// Adjoint of Im2Col.
void Col2Im(const Mat& cols, const ConvGeometry& g, int batch, Mat& x) {
  const int oh = g.out_h(), ow = g.out_w();
  x.setZero(batch, g.in_h * g.in_w * g.in_c);
  for (int b = 0; b < batch; ++b) {
    double* dst = x.row(b).data();
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        const double* src = cols.row((static_cast<Eigen::Index>(b) * oh + oy) * ow + ox).data();
        for (int ky = 0; ky < g.kernel; ++ky) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.in_h) continue;
          for (int kx = 0; kx < g.kernel; ++kx) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix < 0 || ix >= g.in_w) continue;
            double* pix = dst + (iy * g.in_w + ix) * g.in_c;
            const double* in = src + (ky * g.kernel + kx) * g.in_c;
            for (int c = 0; c < g.in_c; ++c) pix[c] += in[c];
          }
        }
      }
    }
  }
}

using RowMap = Eigen::Map<Mat>;
using ConstRowMap = Eigen::Map<const Mat>;

void ReluInPlace(Mat& m) { m = m.cwiseMax(0.0); }

void ReluMask(Mat& grad, const Mat& activation) {
  grad.array() *= (activation.array() > 0.0).cast<double>();
}

Mat Normal(int rows, int cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

// d/dx of x / |x| applied row-wise: (g - y * <y, g>) / |x|
Mat NormalizeBackward(const Mat& unit, const Vec& norms, const Mat& grad_unit) {
  Vec dots = (unit.array() * grad_unit.array()).rowwise().sum();
  Mat out = grad_unit - (unit.array().colwise() * dots.array()).matrix();
  out.array().colwise() /= norms.array();
  return out;
}

void NormalizeRows(const Mat& raw, Vec& norms, Mat& unit) {
  norms = raw.rowwise().norm().cwiseMax(kNormFloor);
  unit = raw;
  unit.array().colwise() /= norms.array();
}

}  // namespace

void ModelDims::validate() const {
  if (num_classes < 2) throw ConfigError("model needs at least 2 classes (K >= 2)");
  if (image.height < 4 || image.width < 4 || image.channels < 1) {
    throw ConfigError("image shape too small");
  }
  if (joint_dim < 1 || token_dim < 1 || num_context < 1 || conv1_channels < 1 ||
      conv2_channels < 1 || meta_hidden < 1 || text_hidden < 1) {
    throw ConfigError("model dimensions must be positive");
  }
}

void NormalizationSpec::validate(int channels) const {
  if (static_cast<int>(mean.size()) != channels || static_cast<int>(std.size()) != channels) {
    throw ConfigError("normalization spec does not match channel count");
  }
  for (double s : std) {
    if (!(s > 0.0)) throw ConfigError("normalization std must be strictly positive");
  }
}

ModelParams ModelParams::zeros_like() const {
  ModelParams out = *this;
  out.for_each([](const char*, Mat& m, ParamGroup) { m.setZero(); });
  return out;
}

std::vector<Mat*> ModelParams::group(ParamGroup g) {
  std::vector<Mat*> out;
  for_each([&](const char*, Mat& m, ParamGroup pg) {
    if (pg == g) out.push_back(&m);
  });
  return out;
}

void PromptTunedModel::validate() const {
  dims.validate();
  norm.validate(dims.image.channels);
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  if (params.meta_w2.cols() != params.context.cols()) {
    throw ConfigError("meta-net output shape must equal context shape");
  }
  if (params.class_embeddings.rows() != dims.num_classes) {
    throw ConfigError("class embedding count does not match K");
  }
}

std::string PromptTunedModel::checksum(ParamGroup g) const {
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  params.for_each([&](const char* name, const Mat& m, ParamGroup pg) {
    if (pg != g) return;
    EVP_DigestUpdate(ctx, name, std::char_traits<char>::length(name));
    const std::int64_t shape[2] = {m.rows(), m.cols()};
    EVP_DigestUpdate(ctx, shape, sizeof(shape));
    EVP_DigestUpdate(ctx, m.data(), static_cast<std::size_t>(m.size()) * sizeof(double));
  });
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  static constexpr char kHex[] = "0123456789abcdef";
  std::string hex;
  for (unsigned int i = 0; i < len; ++i) {
    hex.push_back(kHex[digest[i] >> 4]);
    hex.push_back(kHex[digest[i] & 0xF]);
  }
  return hex;
}

std::string PromptTunedModel::checksum() const {
  return checksum(ParamGroup::kEncoder) + checksum(ParamGroup::kPrompt);
}

PromptTunedModel InitModel(const ModelDims& dims, const NormalizationSpec& norm,
                           double temperature, std::uint64_t seed) {
  dims.validate();
  norm.validate(dims.image.channels);
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  PromptTunedModel model;
  model.dims = dims;
  model.norm = norm;
  model.temperature = temperature;
  model.seed = seed;
  std::mt19937_64 rng(seed);
  auto& p = model.params;
  const ConvGeometry g1 = Conv1Geometry(dims), g2 = Conv2Geometry(dims);
  const int flat = FlatFeatures(dims);
  p.conv1_w = Normal(g1.patch(), g1.out_c, std::sqrt(2.0 / g1.patch()), rng);
  p.conv1_b = Mat::Zero(1, g1.out_c);
  p.conv2_w = Normal(g2.patch(), g2.out_c, std::sqrt(2.0 / g2.patch()), rng);
  p.conv2_b = Mat::Zero(1, g2.out_c);
  p.image_w = Normal(flat, dims.joint_dim, std::sqrt(1.0 / flat), rng);
  p.image_b = Mat::Zero(1, dims.joint_dim);
  const int ctx = dims.context_size();
  const int in_text = ctx + dims.token_dim;
  p.text_ctx_w = Normal(ctx, dims.text_hidden, std::sqrt(1.0 / in_text), rng);
  p.text_cls_w = Normal(dims.token_dim, dims.text_hidden, std::sqrt(1.0 / in_text), rng);
  p.text_gate_w = Normal(dims.token_dim, dims.text_hidden, std::sqrt(1.0 / dims.token_dim), rng);
  p.text_b1 = Mat::Zero(1, dims.text_hidden);
  p.text_w2 = Normal(dims.text_hidden, dims.joint_dim, std::sqrt(1.0 / dims.text_hidden), rng);
  p.text_b2 = Mat::Zero(1, dims.joint_dim);
  p.class_embeddings = Normal(dims.num_classes, dims.token_dim, 1.0, rng);
  p.context = Normal(1, ctx, 0.02, rng);
  ResetPromptParams(model, seed ^ 0x9e3779b97f4a7c15ULL);
  return model;
}

void ResetPromptParams(PromptTunedModel& model, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto& d = model.dims;
  auto& p = model.params;
  p.meta_w1 = Normal(d.joint_dim, d.meta_hidden, std::sqrt(2.0 / d.joint_dim), rng);
  p.meta_b1 = Mat::Zero(1, d.meta_hidden);
  p.meta_w2 = Normal(d.meta_hidden, d.context_size(), 0.01, rng);
  p.meta_b2 = Mat::Zero(1, d.context_size());
}


void EncodeImages(const PromptTunedModel& model, const Mat& pixels, ForwardPass& pass) {
  const auto& d = model.dims;
  const auto& p = model.params;
  if (pixels.cols() != d.image.pixels()) {
    throw ConfigError("input has " + std::to_string(pixels.cols()) +
                      " values per image, encoder expects " + std::to_string(d.image.pixels()));
  }
  const int batch = static_cast<int>(pixels.rows());
  const int channels = d.image.channels;
  pass.batch = batch;
  pass.normalized.resize(batch, pixels.cols());
  for (int b = 0; b < batch; ++b) {
    const double* src = pixels.row(b).data();
    double* dst = pass.normalized.row(b).data();
    for (Eigen::Index i = 0; i < pixels.cols(); ++i) {
      const int c = static_cast<int>(i % channels);
      dst[i] = (src[i] - model.norm.mean[c]) / model.norm.std[c];
    }
  }

  const ConvGeometry g1 = Conv1Geometry(d), g2 = Conv2Geometry(d);
  Im2Col(pass.normalized, g1, pass.cols1);
  Mat out1 = pass.cols1 * p.conv1_w;
  out1.rowwise() += p.conv1_b.row(0);
  ReluInPlace(out1);
  pass.act1 = RowMap(out1.data(), batch, static_cast<Eigen::Index>(g1.out_h()) * g1.out_w() * g1.out_c);

  Im2Col(pass.act1, g2, pass.cols2);
  Mat out2 = pass.cols2 * p.conv2_w;
  out2.rowwise() += p.conv2_b.row(0);
  ReluInPlace(out2);
  pass.act2 = RowMap(out2.data(), batch, static_cast<Eigen::Index>(g2.out_h()) * g2.out_w() * g2.out_c);

  pass.features = pass.act2 * p.image_w;
  pass.features.rowwise() += p.image_b.row(0);
  NormalizeRows(pass.features, pass.feature_norms, pass.unit_features);
}

void ComputeHead(const PromptTunedModel& model, ForwardPass& pass, bool use_meta,
                 const PromptOverride& prompt) {
  const auto& d = model.dims;
  const auto& p = model.params;
  const Mat& ctx0 = prompt.context ? *prompt.context : p.context;
  const Mat& cls = prompt.class_embeddings ? *prompt.class_embeddings : p.class_embeddings;
  const int batch = pass.batch;
  const int k_classes = static_cast<int>(cls.rows());
  if (ctx0.cols() != d.context_size() || cls.cols() != d.token_dim) {
    throw ConfigError("prompt shapes do not match model dims");
  }
  pass.use_meta = use_meta;
  pass.context = ctx0.replicate(batch, 1);
  if (use_meta) {
    pass.meta_hidden = pass.unit_features * p.meta_w1;
    pass.meta_hidden.rowwise() += p.meta_b1.row(0);
    ReluInPlace(pass.meta_hidden);
    Mat tokens = pass.meta_hidden * p.meta_w2;
    tokens.rowwise() += p.meta_b2.row(0);
    pass.context += tokens;
  } else {
    pass.meta_hidden.resize(0, 0);
  }
  // pre(b, k) = a_ctx(b) * (1 + gate(k)) + a_cls(k)
  const Mat a_ctx = pass.context * p.text_ctx_w;  // B x H
  Mat a_cls = cls * p.text_cls_w;                  // K x H
  a_cls.rowwise() += p.text_b1.row(0);
  Mat gain = cls * p.text_gate_w;                  // K x H
  gain.array() += 1.0;
  pass.text_hidden.resize(static_cast<Eigen::Index>(batch) * k_classes, d.text_hidden);
  for (int b = 0; b < batch; ++b) {
    for (int k = 0; k < k_classes; ++k) {
      pass.text_hidden.row(static_cast<Eigen::Index>(b) * k_classes + k) =
          (a_ctx.row(b).array() * gain.row(k).array() + a_cls.row(k).array()).tanh();
    }
  }
  Mat text_raw = pass.text_hidden * p.text_w2;
  text_raw.rowwise() += p.text_b2.row(0);
  NormalizeRows(text_raw, pass.text_norms, pass.text_unit);
  pass.logits.resize(batch, k_classes);
  for (int b = 0; b < batch; ++b) {
    ConstRowMap t(pass.text_unit.row(static_cast<Eigen::Index>(b) * k_classes).data(), k_classes,
                  d.joint_dim);
    pass.logits.row(b) = pass.unit_features.row(b) * t.transpose();
  }
}

ForwardPass Forward(const PromptTunedModel& model, const Mat& pixels, bool use_meta) {
  ForwardPass pass;
  EncodeImages(model, pixels, pass);
  ComputeHead(model, pass, use_meta);
  return pass;
}

ForwardPass ForwardFromFeatures(const PromptTunedModel& model, const Mat& features,
                                bool use_meta) {
  if (features.cols() != model.dims.joint_dim) throw ConfigError("feature width mismatch");
  ForwardPass pass;
  pass.batch = static_cast<int>(features.rows());
  pass.features = features;
  NormalizeRows(pass.features, pass.feature_norms, pass.unit_features);
  ComputeHead(model, pass, use_meta);
  return pass;
}

Mat BackwardHead(const PromptTunedModel& model, const ForwardPass& pass, const Mat& d_logits,
                 ModelParams* grads, const PromptOverride& prompt) {
  const auto& d = model.dims;
  const auto& p = model.params;
  const Mat& cls = prompt.class_embeddings ? *prompt.class_embeddings : p.class_embeddings;
  const int batch = pass.batch;
  const int k_classes = static_cast<int>(cls.rows());

  Mat d_unit = Mat::Zero(batch, d.joint_dim);
  Mat d_text_unit(static_cast<Eigen::Index>(batch) * k_classes, d.joint_dim);
  for (int b = 0; b < batch; ++b) {
    const Eigen::Index r0 = static_cast<Eigen::Index>(b) * k_classes;
    ConstRowMap t(pass.text_unit.row(r0).data(), k_classes, d.joint_dim);
    d_unit.row(b) = d_logits.row(b) * t;
    for (int k = 0; k < k_classes; ++k) {
      d_text_unit.row(r0 + k) = d_logits(b, k) * pass.unit_features.row(b);
    }
  }
  const Mat d_text_raw = NormalizeBackward(pass.text_unit, pass.text_norms, d_text_unit);
  Mat d_pre = d_text_raw * p.text_w2.transpose();
  d_pre.array() *= 1.0 - pass.text_hidden.array().square();

  const Mat a_ctx = pass.context * p.text_ctx_w;
  Mat gain = cls * p.text_gate_w;
  gain.array() += 1.0;
  Mat d_a_ctx = Mat::Zero(batch, d.text_hidden);
  Mat d_a_cls = Mat::Zero(k_classes, d.text_hidden);
  Mat d_gain = Mat::Zero(k_classes, d.text_hidden);
  for (int b = 0; b < batch; ++b) {
    ConstRowMap rows(d_pre.row(static_cast<Eigen::Index>(b) * k_classes).data(), k_classes,
                     d.text_hidden);
    d_a_ctx.row(b) = (rows.array() * gain.array()).colwise().sum();
    d_a_cls += rows;
    d_gain += (rows.array().rowwise() * a_ctx.row(b).array()).matrix();
  }
  const Mat d_context = d_a_ctx * p.text_ctx_w.transpose();  // B x Ne

  if (grads != nullptr) {
    grads->text_w2 += pass.text_hidden.transpose() * d_text_raw;
    grads->text_b2 += d_text_raw.colwise().sum();
    grads->text_ctx_w += pass.context.transpose() * d_a_ctx;
    grads->text_cls_w += cls.transpose() * d_a_cls;
    grads->text_gate_w += cls.transpose() * d_gain;
    grads->text_b1 += d_a_cls.colwise().sum();
    if (prompt.class_embeddings == nullptr) {
      grads->class_embeddings += d_a_cls * p.text_cls_w.transpose() + d_gain * p.text_gate_w.transpose();
    }
    if (prompt.context == nullptr) grads->context += d_context.colwise().sum();
  }

  if (pass.use_meta) {
    if (grads != nullptr) {
      grads->meta_w2 += pass.meta_hidden.transpose() * d_context;
      grads->meta_b2 += d_context.colwise().sum();
    }
    Mat d_hidden = d_context * p.meta_w2.transpose();
    ReluMask(d_hidden, pass.meta_hidden);
    if (grads != nullptr) {
      grads->meta_w1 += pass.unit_features.transpose() * d_hidden;
      grads->meta_b1 += d_hidden.colwise().sum();
    }
    d_unit += d_hidden * p.meta_w1.transpose();
  }
  return NormalizeBackward(pass.unit_features, pass.feature_norms, d_unit);
}

Mat BackwardImage(const PromptTunedModel& model, const ForwardPass& pass, const Mat& d_features,
                  ModelParams* grads) {
  const auto& d = model.dims;
  const auto& p = model.params;
  const int batch = pass.batch;
  if (pass.cols1.size() == 0) throw ConfigError("forward pass has no image-encoder cache");
  const ConvGeometry g1 = Conv1Geometry(d), g2 = Conv2Geometry(d);

  Mat d_act2 = d_features * p.image_w.transpose();
  ReluMask(d_act2, pass.act2);
  if (grads != nullptr) {
    grads->image_w += pass.act2.transpose() * d_features;
    grads->image_b += d_features.colwise().sum();
  }
  ConstRowMap d_out2(d_act2.data(), static_cast<Eigen::Index>(batch) * g2.out_h() * g2.out_w(),
                     g2.out_c);
  if (grads != nullptr) {
    grads->conv2_w += pass.cols2.transpose() * d_out2;
    grads->conv2_b += d_out2.colwise().sum();
  }
  const Mat d_cols2 = d_out2 * p.conv2_w.transpose();
  Mat d_act1;
  Col2Im(d_cols2, g2, batch, d_act1);
  ReluMask(d_act1, pass.act1);
  ConstRowMap d_out1(d_act1.data(), static_cast<Eigen::Index>(batch) * g1.out_h() * g1.out_w(),
                     g1.out_c);
  if (grads != nullptr) {
    grads->conv1_w += pass.cols1.transpose() * d_out1;
    grads->conv1_b += d_out1.colwise().sum();
  }
  const Mat d_cols1 = d_out1 * p.conv1_w.transpose();
  Mat d_pixels;
  Col2Im(d_cols1, g1, batch, d_pixels);
  const int channels = d.image.channels;
  for (int b = 0; b < batch; ++b) {
    double* row = d_pixels.row(b).data();
    for (Eigen::Index i = 0; i < d_pixels.cols(); ++i) {
      row[i] /= model.norm.std[static_cast<std::size_t>(i % channels)];
    }
  }
  return d_pixels;
}

Mat ComputeLogits(const PromptTunedModel& model, const Mat& pixels) {
  Mat out(pixels.rows(), model.dims.num_classes);
  for (Eigen::Index r = 0; r < pixels.rows(); r += kInferenceChunk) {
    const Eigen::Index n = std::min<Eigen::Index>(kInferenceChunk, pixels.rows() - r);
    ForwardPass pass = Forward(model, pixels.middleRows(r, n), true);
    out.middleRows(r, n) = pass.logits;
  }
  return out;
}

Mat ZeroShotLogits(const PromptTunedModel& encoders, const Mat& context,
                   const Mat& class_embeddings, const Mat& pixels) {
  Mat out(pixels.rows(), class_embeddings.rows());
  const PromptOverride prompt{&context, &class_embeddings};
  for (Eigen::Index r = 0; r < pixels.rows(); r += kInferenceChunk) {
    const Eigen::Index n = std::min<Eigen::Index>(kInferenceChunk, pixels.rows() - r);
    ForwardPass pass;
    EncodeImages(encoders, pixels.middleRows(r, n), pass);
    ComputeHead(encoders, pass, false, prompt);
    out.middleRows(r, n) = pass.logits;
  }
  return out;
}

Mat ZeroShotLogits(const PromptTunedModel& model, const Mat& pixels) {
  return ZeroShotLogits(model, model.params.context, model.params.class_embeddings, pixels);
}

Mat Softmax(const Mat& logits, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  Mat out = logits / temperature;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const double mx = out.row(i).maxCoeff();
    out.row(i) = (out.row(i).array() - mx).exp();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

Mat PredictProba(const PromptTunedModel& model, const Mat& pixels) {
  return Softmax(ComputeLogits(model, pixels), model.temperature);
}

PixelGradient LogitPixelGradient(const PromptTunedModel& model, const Mat& pixels,
                                 const LogitLossFn& loss) {
  ForwardPass pass = Forward(model, pixels, true);
  PixelGradient out;
  Mat d_logits = Mat::Zero(pass.logits.rows(), pass.logits.cols());
  out.loss = loss(pass.logits, d_logits);
  const Mat d_features = BackwardHead(model, pass, d_logits, nullptr);
  out.d_pixels = BackwardImage(model, pass, d_features, nullptr);
  out.logits = std::move(pass.logits);
  return out;
}

double CrossEntropy(const Mat& logits, const std::vector<int>& labels,
                    const std::vector<int>& classes, double temperature, Mat* d_logits) {
  const Eigen::Index batch = logits.rows();
  if (static_cast<Eigen::Index>(labels.size()) != batch) throw DataError("label count mismatch");
  std::vector<int> cols = classes;
  if (cols.empty()) {
    cols.resize(static_cast<std::size_t>(logits.cols()));
    std::iota(cols.begin(), cols.end(), 0);
  }
  if (d_logits != nullptr) d_logits->setZero(batch, logits.cols());
  double total = 0.0;
  std::vector<double> z(cols.size());
  for (Eigen::Index i = 0; i < batch; ++i) {
    int target = -1;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < cols.size(); ++j) {
      z[j] = logits(i, cols[j]) / temperature;
      mx = std::max(mx, z[j]);
      if (cols[j] == labels[static_cast<std::size_t>(i)]) target = static_cast<int>(j);
    }
    if (target < 0) throw DataError("label outside the softmax class set");
    double sum = 0.0;
    for (double& v : z) {
      v = std::exp(v - mx);
      sum += v;
    }
    total += -std::log(z[static_cast<std::size_t>(target)] / sum);
    if (d_logits != nullptr) {
      for (std::size_t j = 0; j < cols.size(); ++j) {
        const double prob = z[j] / sum - (static_cast<int>(j) == target ? 1.0 : 0.0);
        (*d_logits)(i, cols[j]) = prob / (temperature * static_cast<double>(batch));
      }
    }
  }
  return total / static_cast<double>(batch);
}

void TrainConfig::validate() const {
  if (epochs < 0 || batch_size <= 0 || !(learning_rate > 0.0) || shots_per_class <= 0) {
    throw ConfigError("train config values must be positive");
  }
  if (optimizer != "sgd" && optimizer != "adam") {
    throw ConfigError("unknown prompt optimizer '" + optimizer + "'");
  }
}

ImageSet SampleShots(const ImageSet& data, const std::vector<int>& classes, int shots,
                     std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<int> picked;
  for (int c : classes) {
    std::vector<int> idx = data.indices_of({c});
    if (static_cast<int>(idx.size()) < shots) {
      throw DataError("class " + std::to_string(c) + " has " + std::to_string(idx.size()) +
                      " samples, fewer than shots_per_class=" + std::to_string(shots));
    }
    std::shuffle(idx.begin(), idx.end(), rng);
    picked.insert(picked.end(), idx.begin(), idx.begin() + shots);
  }
  return data.subset(picked);
}

Mat EncodeFeatures(const PromptTunedModel& model, const Mat& pixels) {
  Mat out(pixels.rows(), model.dims.joint_dim);
  for (Eigen::Index r = 0; r < pixels.rows(); r += kInferenceChunk) {
    const Eigen::Index n = std::min<Eigen::Index>(kInferenceChunk, pixels.rows() - r);
    ForwardPass pass;
    EncodeImages(model, pixels.middleRows(r, n), pass);
    out.middleRows(r, n) = pass.features;
  }
  return out;
}

PromptTunedModel PromptTune(const PromptTunedModel& model, const ImageSet& train,
                            const std::vector<int>& classes, const TrainConfig& cfg,
                            TrainLog* log) {
  cfg.validate();
  model.validate();
  PromptTunedModel out = model;
  if (cfg.epochs == 0) return out;
  for (int c : classes) {
    if (train.indices_of({c}).empty()) {
      throw DataError("class " + std::to_string(c) + " has no training samples");
    }
  }
  const Mat features = EncodeFeatures(model, train.pixels);
  std::mt19937_64 rng(cfg.seed);
  AnyOptimizer opt(cfg.optimizer, cfg.learning_rate, cfg.momentum);
  std::vector<int> order(static_cast<std::size_t>(train.size()));
  std::iota(order.begin(), order.end(), 0);
  const long steps_per_epoch = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
  const long total = steps_per_epoch * cfg.epochs;
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (int start = 0; start < train.size(); start += cfg.batch_size) {
      const int n = std::min(cfg.batch_size, train.size() - start);
      Mat batch_features(n, features.cols());
      std::vector<int> labels(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i) {
        const int idx = order[static_cast<std::size_t>(start + i)];
        batch_features.row(i) = features.row(idx);
        labels[static_cast<std::size_t>(i)] = train.labels[static_cast<std::size_t>(idx)];
      }
      ForwardPass pass = ForwardFromFeatures(out, batch_features, true);
      Mat d_logits;
      const double loss = CrossEntropy(pass.logits, labels, classes, out.temperature, &d_logits);
      if (!std::isfinite(loss)) {
        throw DivergenceError("prompt tuning diverged at epoch " + std::to_string(epoch) +
                              ", step " + std::to_string(step) + " (loss is not finite)");
      }
      ModelParams grads = out.params.zeros_like();
      BackwardHead(out, pass, d_logits, &grads);
      opt.set_lr(CosineLr(cfg.learning_rate, step, total));
      const auto params = out.params.group(ParamGroup::kPrompt);
      const auto g = grads.group(ParamGroup::kPrompt);
      opt.step(params, {g.begin(), g.end()});
      epoch_loss += loss * n;
      ++step;
    }
    if (log != nullptr) log->epoch_loss.push_back(epoch_loss / train.size());
  }
  return out;
}

namespace {

// Untargeted l-inf PGD against the zero-shot route, random start.
Mat PretrainAdversary(const PromptTunedModel& model, const Mat& pixels, const std::vector<int>& labels,
                      double epsilon, int steps, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> init(-epsilon, epsilon);
  Mat delta(pixels.rows(), pixels.cols());
  for (Eigen::Index i = 0; i < delta.size(); ++i) delta.data()[i] = init(rng);
  const double alpha = 2.5 * epsilon / steps;
  for (int s = 0; s < steps; ++s) {
    const Mat x = (pixels + delta).cwiseMax(0.0).cwiseMin(1.0);
    ForwardPass pass;
    EncodeImages(model, x, pass);
    ComputeHead(model, pass, false);
    Mat d_logits;
    CrossEntropy(pass.logits, labels, {}, model.temperature, &d_logits);
    const Mat d_features = BackwardHead(model, pass, d_logits, nullptr);
    const Mat d_pixels = BackwardImage(model, pass, d_features, nullptr);
    delta += alpha * d_pixels.unaryExpr([](double v) { return static_cast<double>((v > 0) - (v < 0)); });
    delta = delta.cwiseMax(-epsilon).cwiseMin(epsilon);
  }
  return (pixels + delta).cwiseMax(0.0).cwiseMin(1.0);
}

double PretrainLoss(const PromptTunedModel& model, const Mat& pixels, const std::vector<int>& labels,
                    double weight, ModelParams& grads) {
  ForwardPass pass;
  EncodeImages(model, pixels, pass);
  ComputeHead(model, pass, false);
  Mat d_logits;
  const double loss = CrossEntropy(pass.logits, labels, {}, model.temperature, &d_logits);
  d_logits *= weight;
  const Mat d_features = BackwardHead(model, pass, d_logits, &grads);
  BackwardImage(model, pass, d_features, &grads);
  return weight * loss;
}

}  // namespace

void PretrainEncoders(PromptTunedModel& model, const ImageSet& data, const PretrainConfig& cfg,
                      TrainLog* log) {
  model.validate();
  const bool adversarial = cfg.adversarial_epsilon > 0.0 && cfg.adversarial_steps > 0;
  std::mt19937_64 rng(cfg.seed);
  Adam opt(cfg.learning_rate);
  std::vector<int> order(static_cast<std::size_t>(data.size()));
  std::iota(order.begin(), order.end(), 0);
  const long steps_per_epoch = (data.size() + cfg.batch_size - 1) / cfg.batch_size;
  const long total = steps_per_epoch * cfg.epochs;
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (int start = 0; start < data.size(); start += cfg.batch_size) {
      const int n = std::min(cfg.batch_size, data.size() - start);
      std::vector<int> idx(order.begin() + start, order.begin() + start + n);
      const ImageSet batch = data.subset(idx);
      ModelParams grads = model.params.zeros_like();
      double loss = 0.0;
      if (adversarial) {
        const Mat adv = PretrainAdversary(model, batch.pixels, batch.labels, cfg.adversarial_epsilon,
                                          cfg.adversarial_steps, rng);
        loss = PretrainLoss(model, batch.pixels, batch.labels, 0.5, grads) +
               PretrainLoss(model, adv, batch.labels, 0.5, grads);
      } else {
        loss = PretrainLoss(model, batch.pixels, batch.labels, 1.0, grads);
      }
      if (!std::isfinite(loss)) throw DivergenceError("encoder pre-training diverged");
      std::vector<Mat*> params = model.params.group(ParamGroup::kEncoder);
      std::vector<Mat*> g = grads.group(ParamGroup::kEncoder);
      params.push_back(&model.params.context);
      g.push_back(&grads.context);
      opt.set_lr(CosineLr(cfg.learning_rate, step, total));
      opt.step(params, {g.begin(), g.end()});
      epoch_loss += loss * n;
      ++step;
    }
    if (log != nullptr) log->epoch_loss.push_back(epoch_loss / data.size());
  }
}

double Accuracy(const PromptTunedModel& model, const ImageSet& data,
                const std::vector<int>& classes) {
  const ImageSet subset = data.subset(data.indices_of(classes));
  if (subset.empty()) throw DataError("accuracy on empty set");
  const Mat logits = ComputeLogits(model, subset.pixels);
  int hits = 0;
  for (int i = 0; i < subset.size(); ++i) {
    int best = -1;
    for (int c : classes) {
      if (best < 0 || logits(i, c) > logits(i, best)) best = c;
    }
    if (best == subset.labels[static_cast<std::size_t>(i)]) ++hits;
  }
  return static_cast<double>(hits) / subset.size();
}

}  // namespace ptaudit
