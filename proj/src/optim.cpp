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

#include "ptaudit/optim.hpp"

#include <cmath>
#include <numbers>

namespace ptaudit {

void Adam::step(const std::vector<Mat*>& params, const std::vector<const Mat*>& grads) {
  if (params.size() != grads.size()) throw ConfigError("Adam: params/grads size mismatch");
  if (m_.empty()) {
    for (const Mat* p : params) {
      m_.push_back(Mat::Zero(p->rows(), p->cols()));
      v_.push_back(Mat::Zero(p->rows(), p->cols()));
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Mat& g = *grads[i];
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g.cwiseAbs2();
    params[i]->array() -=
        lr_ * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
  }
}

void SgdMomentum::step(const std::vector<Mat*>& params, const std::vector<const Mat*>& grads) {
  if (params.size() != grads.size()) throw ConfigError("SGD: params/grads size mismatch");
  if (velocity_.empty()) {
    for (const Mat* p : params) velocity_.push_back(Mat::Zero(p->rows(), p->cols()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    velocity_[i] = momentum_ * velocity_[i] + *grads[i];
    *params[i] -= lr_ * velocity_[i];
  }
}

namespace {

std::variant<SgdMomentum, Adam> MakeOptimizer(const std::string& kind, double lr, double momentum) {
  if (kind == "sgd") return SgdMomentum(lr, momentum);
  if (kind == "adam") return Adam(lr);
  throw ConfigError("unknown optimizer '" + kind + "'");
}

}  // namespace

AnyOptimizer::AnyOptimizer(const std::string& kind, double lr, double momentum)
    : impl_(MakeOptimizer(kind, lr, momentum)) {}

void AnyOptimizer::set_lr(double lr) {
  std::visit([lr](auto& o) { o.set_lr(lr); }, impl_);
}

void AnyOptimizer::step(const std::vector<Mat*>& params, const std::vector<const Mat*>& grads) {
  std::visit([&](auto& o) { o.step(params, grads); }, impl_);
}

double CosineLr(double base_lr, long step, long total_steps) {
  if (total_steps <= 0) return base_lr;
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * frac));
}

}  // namespace ptaudit
