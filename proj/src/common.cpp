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

#include "ptaudit/common.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <thread>

namespace ptaudit {

const char* SplitTagName(SplitTag tag) {
  switch (tag) {
    case SplitTag::kSeen:
      return "seen";
    case SplitTag::kUnseen:
      return "unseen";
    case SplitTag::kOod:
      return "ood";
  }
  return "unknown";
}

ImageSample ImageSet::sample(int i) const {
  if (i < 0 || i >= size()) throw IndexError("sample index out of range");
  ImageSample s;
  s.pixels.assign(pixels.row(i).data(), pixels.row(i).data() + pixels.cols());
  s.label = labels.empty() ? -1 : labels[i];
  s.split = splits.empty() ? SplitTag::kOod : splits[i];
  return s;
}

ImageSet ImageSet::subset(const std::vector<int>& indices) const {
  ImageSet out;
  out.shape = shape;
  out.pixels.resize(static_cast<Eigen::Index>(indices.size()), pixels.cols());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const int i = indices[r];
    if (i < 0 || i >= size()) throw IndexError("subset index out of range");
    out.pixels.row(static_cast<Eigen::Index>(r)) = pixels.row(i);
    if (!labels.empty()) out.labels.push_back(labels[i]);
    if (!splits.empty()) out.splits.push_back(splits[i]);
  }
  return out;
}

std::vector<int> ImageSet::indices_of(const std::vector<int>& classes) const {
  std::vector<int> out;
  for (int i = 0; i < size(); ++i) {
    if (std::find(classes.begin(), classes.end(), labels[i]) != classes.end()) {
      out.push_back(i);
    }
  }
  return out;
}

void ImageSet::append(const ImageSet& other) {
  if (other.empty()) return;
  if (empty()) {
    *this = other;
    return;
  }
  if (!(other.shape == shape)) throw ConfigError("cannot append images of a different shape");
  Mat merged(pixels.rows() + other.pixels.rows(), pixels.cols());
  merged << pixels, other.pixels;
  pixels = std::move(merged);
  labels.insert(labels.end(), other.labels.begin(), other.labels.end());
  splits.insert(splits.end(), other.splits.begin(), other.splits.end());
}

int ArgMax(const Eigen::Ref<const Eigen::Matrix<double, 1, Eigen::Dynamic>>& row) {
  int best = 0;
  for (int k = 1; k < row.size(); ++k) {
    if (row(k) > row(best)) best = k;
  }
  return best;
}

std::vector<int> ArgMaxRows(const Mat& logits) {
  std::vector<int> out(static_cast<std::size_t>(logits.rows()));
  for (Eigen::Index i = 0; i < logits.rows(); ++i) out[i] = ArgMax(logits.row(i));
  return out;
}

void ParallelFor(int n, int workers, const std::function<void(int)>& fn) {
  const int threads = std::clamp(workers, 1, std::max(1, n));
  if (threads == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  auto run = [&] {
    for (int i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mu);
        if (!error) error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t) pool.emplace_back(run);
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace ptaudit
