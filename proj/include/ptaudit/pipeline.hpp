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

// End-to-end audit pipeline driven by one JSON run configuration.
//
// All artifacts of a run live under <out_dir>/run-<hash>, where <hash> is
// the SHA-256 of the canonical (fully defaulted, key-sorted) config. Every
// unit of work writes a manifest under manifests/ when it finishes; a later
// invocation that finds the manifest skips the unit, so each stage can be
// interrupted and resumed. experiment_log.jsonl receives one appended line
// per completed unit.
//
//   data/         dataset.ptarr, ood.ptarr
//   zoo/          base.ckpt, <model>.ckpt, <model>.trigger, <model>.json
//   reports/      <method>/<model>.json (+ .deltas for the inspector)
//   repair/       <model>_<mode>.json
//   summary/      CSV tables and SVG plots
//   ablate/       one CSV per sweep

#ifndef PTAUDIT_PIPELINE_HPP_
#define PTAUDIT_PIPELINE_HPP_

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ptaudit/attacks.hpp"
#include "ptaudit/baselines.hpp"
#include "ptaudit/datagen.hpp"
#include "ptaudit/evalkit.hpp"
#include "ptaudit/inspector.hpp"
#include "ptaudit/model.hpp"
#include "ptaudit/removal.hpp"

namespace ptaudit {

const char* Version();

struct AblationConfig {
  std::vector<int> ood_sizes{100, 500, 1000};
  std::vector<int> batch_sizes{1, 32};
  std::vector<std::string> loss_kinds{"margin", "ce", "logit"};
  bool id_pool = true;
  // Zoo models to sweep; empty means every attacked model.
  std::vector<std::string> models;
};

struct RunConfig {
  DatasetSpec dataset;
  ModelDims dims;
  double temperature = 0.07;
  std::uint64_t model_seed = 1;
  PretrainConfig pretrain;
  TrainConfig train;
  AttackConfig attack;  // shared attack settings; name and target set per model
  std::vector<std::string> attacks{"badclip", "blended", "wanet", "siba"};
  std::vector<int> seeds{1};
  InversionConfig inspector;
  double k = 2.0;
  std::vector<std::string> baselines{"nc", "pixb"};
  BaselineConfig baseline;
  std::vector<std::string> repair_modes{"ci_trigger", "clean_only", "random_delta", "wrong_class_delta"};
  RepairConfig repair;
  AblationConfig ablate;
  std::string out_dir = "runs";
  int workers = 1;

  RunConfig();
  void validate() const;
};

// Complete config as JSON (every default filled in).
nlohmann::json RunConfigToJson(const RunConfig& cfg);
// Overlays `j` on the defaults. Unknown keys and ill-typed values throw
// ConfigError naming the offending path.
RunConfig RunConfigFromJson(const nlohmann::json& j);
RunConfig LoadRunConfig(const std::string& path);
// SHA-256 of the canonical serialization; independent of key order in the
// source file. The output location and worker count are excluded.
std::string RunConfigHash(const RunConfig& cfg);

// Target class attacked in the zoo for one seed.
int ZooTarget(const Dataset& data, int seed);
std::string ZooModelId(int seed, const std::string& attack);

struct ZooEntry {
  std::string id;
  std::string attack;  // "clean" for the clean twin
  int seed = 0;
  int target = -1;     // -1 for clean models
  std::string checkpoint;
  std::string trigger;  // empty for clean models
  nlohmann::json manifest;
};

class Workspace {
 public:
  explicit Workspace(RunConfig cfg);

  const RunConfig& config() const { return cfg_; }
  const std::string& hash() const { return hash_; }
  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path path(const std::string& rel) const { return root_ / rel; }

  bool done(const std::string& unit) const;
  nlohmann::json manifest(const std::string& unit) const;
  void complete(const std::string& unit, nlohmann::json manifest);
  void log(const nlohmann::json& entry);

  // Lazily generated or loaded shared inputs.
  const Dataset& data();
  const ImageSet& ood();
  const PromptTunedModel& base_model();
  // Few-shot tuning set for one seed, and the defender's disjointly seeded
  // labeled subset used by repair.
  ImageSet shots(int seed);
  ImageSet defender_set(int seed);
  // Unseen-class test images plus the OOD pool.
  ImageSet eval_split();
  ImageSet seen_test();

 private:
  RunConfig cfg_;
  std::string hash_;
  std::filesystem::path root_;
  bool have_data_ = false, have_ood_ = false, have_base_ = false;
  Dataset data_;
  ImageSet ood_;
  PromptTunedModel base_;
};

// Stage tags used in error messages and manifests.
class StageError : public Error {
 public:
  StageError(const std::string& stage, const std::string& what) : Error(stage + ": " + what), stage_(stage) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

std::vector<ZooEntry> BuildZoo(Workspace& ws);
// Zoo entries in build order; throws StageError if a model is missing.
std::vector<ZooEntry> ListZoo(Workspace& ws);
PromptTunedModel LoadZooModel(const ZooEntry& e);
TriggerPattern LoadZooTrigger(const ZooEntry& e);

struct InspectOutcome {
  std::vector<nlohmann::json> reports;
  bool any_degenerate = false;
};
InspectOutcome InspectZoo(Workspace& ws);
AnomalyReport LoadInspection(Workspace& ws, const ZooEntry& e);
std::vector<nlohmann::json> BaselineZoo(Workspace& ws, const std::string& method);
std::vector<nlohmann::json> RepairZoo(Workspace& ws);
Summary ReportRun(Workspace& ws);
// Runs every configured sweep; returns the CSV files written.
std::vector<std::string> AblateRun(Workspace& ws);

// Records for evalkit from finished detector reports.
std::vector<ExperimentRecord> CollectRecords(Workspace& ws);

}  // namespace ptaudit

#endif  // PTAUDIT_PIPELINE_HPP_
