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

#ifndef PTAUDIT_COMMON_HPP_
#define PTAUDIT_COMMON_HPP_

#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace ptaudit {

// Batches are row-major: one sample per row, pixels flattened in HWC order.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class DivergenceError : public Error {
 public:
  using Error::Error;
};

class CalibrationError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

struct ImageShape {
  int height = 32;
  int width = 32;
  int channels = 3;

  int pixels() const { return height * width * channels; }
  int area() const { return height * width; }
  bool operator==(const ImageShape&) const = default;
};

enum class SplitTag { kSeen, kUnseen, kOod };

const char* SplitTagName(SplitTag tag);

// One image with its label. OOD samples carry label -1.
struct ImageSample {
  std::vector<double> pixels;
  int label = -1;
  SplitTag split = SplitTag::kOod;
};

// A batch of images sharing one shape.
struct ImageSet {
  ImageShape shape;
  Mat pixels;
  std::vector<int> labels;
  std::vector<SplitTag> splits;

  int size() const { return static_cast<int>(pixels.rows()); }
  bool empty() const { return pixels.rows() == 0; }
  ImageSample sample(int i) const;
  ImageSet subset(const std::vector<int>& indices) const;
  // Rows whose label is in `classes`.
  std::vector<int> indices_of(const std::vector<int>& classes) const;
  void append(const ImageSet& other);
};

// Index of the largest entry in a row, lowest index on ties.
int ArgMax(const Eigen::Ref<const Eigen::Matrix<double, 1, Eigen::Dynamic>>& row);

std::vector<int> ArgMaxRows(const Mat& logits);

// Runs fn(0..n-1) on up to `workers` threads. The first exception thrown by
// any task is rethrown after all threads join.
void ParallelFor(int n, int workers, const std::function<void(int)>& fn);

}  // namespace ptaudit

#endif  // PTAUDIT_COMMON_HPP_
