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

// Synthetic labeled datasets of colored shapes on textured backgrounds, and
// unlabeled OOD pools drawn from disjoint generator families.
//
// A labeled class is one (shape family, color) pair. OOD images use shape
// families and textures that no labeled class uses, plus band-limited noise,
// so disjointness holds by construction.

#ifndef PTAUDIT_DATAGEN_HPP_
#define PTAUDIT_DATAGEN_HPP_

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ptaudit/common.hpp"

namespace ptaudit {

struct OodSpec {
  int size = 1000;
  // Any of: star, hbar, frame, xcross, crescent, noise.
  std::vector<std::string> families{"star", "hbar", "frame", "xcross", "crescent", "noise"};
  // Labeled families an OOD spec must avoid; filled by the generator.
};

struct DatasetSpec {
  int num_classes = 20;
  double seen_fraction = 0.5;
  ImageShape image;
  int samples_per_class = 64;  // training pool per class
  int test_per_class = 32;
  double position_jitter = 2.0;  // pixels
  double scale_jitter = 0.08;    // relative
  double color_jitter = 0.06;
  double background_contrast = 0.12;
  double noise_std = 0.02;
  OodSpec ood;
  std::uint64_t seed = 7;
  double min_probe_accuracy = 0.95;

  void validate() const;
};

// Shape and color families used for labeled classes.
const std::vector<std::string>& LabeledShapeFamilies();

struct Dataset {
  DatasetSpec spec;
  std::vector<std::string> class_names;
  std::vector<std::string> class_families;  // shape family per class
  std::vector<int> seen_classes;
  std::vector<int> unseen_classes;
  ImageSet train;
  ImageSet test;
  double probe_accuracy = 0.0;

  int num_classes() const { return static_cast<int>(class_names.size()); }
};

// Deterministic per seed. Throws DataError when the linear probe fails the
// separability floor or the spec is degenerate.
Dataset GenerateDataset(const DatasetSpec& spec);

// Unlabeled pool (labels -1, split kOod). Throws DataError if a requested
// family overlaps a labeled family.
ImageSet GenerateOodPool(const DatasetSpec& spec);

// Held-out accuracy of a softmax-regression probe on 4x4-pooled pixels.
double LinearProbeAccuracy(const ImageSet& train, const ImageSet& test, int num_classes,
                           std::uint64_t seed);

nlohmann::json DatasetManifest(const Dataset& data);
void SaveDataset(const Dataset& data, const std::string& path);
Dataset LoadDataset(const std::string& path);

}  // namespace ptaudit

#endif  // PTAUDIT_DATAGEN_HPP_
