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

#ifndef PTAUDIT_OPTIM_HPP_
#define PTAUDIT_OPTIM_HPP_

#include <string>
#include <variant>
#include <vector>

#include "ptaudit/common.hpp"

namespace ptaudit {

class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  // params[i] -= step(grads[i]); state is keyed by position.
  void step(const std::vector<Mat*>& params, const std::vector<const Mat*>& grads);

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<Mat> m_, v_;
};

class SgdMomentum {
 public:
  explicit SgdMomentum(double lr, double momentum = 0.9) : lr_(lr), momentum_(momentum) {}

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  void step(const std::vector<Mat*>& params, const std::vector<const Mat*>& grads);

 private:
  double lr_, momentum_;
  std::vector<Mat> velocity_;
};

// SGD-momentum or Adam behind one interface, chosen by name ("sgd" or
// "adam"). Throws ConfigError for any other name.
class AnyOptimizer {
 public:
  AnyOptimizer(const std::string& kind, double lr, double momentum);

  void set_lr(double lr);
  void step(const std::vector<Mat*>& params, const std::vector<const Mat*>& grads);

 private:
  std::variant<SgdMomentum, Adam> impl_;
};

// Half-cosine decay from base_lr at step 0 to 0 at total_steps.
double CosineLr(double base_lr, long step, long total_steps);

}  // namespace ptaudit

#endif  // PTAUDIT_OPTIM_HPP_
