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

#include "ptaudit/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "ptaudit/checkpoint.hpp"
#include "ptaudit/container.hpp"
#include "ptaudit/trigger.hpp"

#ifndef PTAUDIT_VERSION
#define PTAUDIT_VERSION "0.0.0"
#endif

namespace ptaudit {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kOutRootEnv[] = "PTAUDIT_OUT_ROOT";

// Reads the keys of one JSON object into existing values, remembering which
// keys were used so leftovers can be reported.
class Fields {
 public:
  Fields(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + " must be an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  // Calls fn(Fields&) on a nested object when present.
  template <class Fn>
  void sub(const char* key, Fn&& fn) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    Fields f(j_.at(key), where_ + "." + key);
    fn(f);
    f.finish();
  }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (seen_.count(item.key()) == 0) throw ConfigError("unknown config key " + where_ + "." + item.key());
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

void WriteJson(const fs::path& path, const json& j) {
  fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    out << j.dump(2) << '\n';
  }
  fs::rename(tmp, path);
}

json ReadJson(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

std::string UnitFile(const std::string& unit) {
  std::string s = unit;
  std::replace(s.begin(), s.end(), '/', '.');
  return "manifests/" + s + ".json";
}

std::string NowIso() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

double Seconds(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - since).count();
}

ImageSet Unlabeled(ImageSet set) {
  std::fill(set.labels.begin(), set.labels.end(), -1);
  std::fill(set.splits.begin(), set.splits.end(), SplitTag::kOod);
  return set;
}

ImageSet Head(const ImageSet& set, int n) {
  std::vector<int> idx(static_cast<std::size_t>(std::min(n, set.size())));
  std::iota(idx.begin(), idx.end(), 0);
  return set.subset(idx);
}

InversionConfig InspectorConfig(const RunConfig& cfg) {
  InversionConfig ic = cfg.inspector;
  ic.workers = cfg.workers;
  return ic;
}

// Inversion ASR of the target class and mean ASR of the other classes.
std::pair<double, double> TargetAndBenignAsr(const AnomalyReport& r, int target) {
  double target_asr = 0.0, benign = 0.0;
  int n = 0;
  for (const auto& c : r.results) {
    if (c.class_id == target) {
      target_asr = c.asr;
    } else {
      benign += c.asr;
      ++n;
    }
  }
  return {target_asr, n > 0 ? benign / n : 0.0};
}

json DatasetSpecJson(const DatasetSpec& s) {
  return {{"num_classes", s.num_classes},
          {"seen_fraction", s.seen_fraction},
          {"image", {{"height", s.image.height}, {"width", s.image.width}, {"channels", s.image.channels}}},
          {"samples_per_class", s.samples_per_class},
          {"test_per_class", s.test_per_class},
          {"position_jitter", s.position_jitter},
          {"scale_jitter", s.scale_jitter},
          {"color_jitter", s.color_jitter},
          {"background_contrast", s.background_contrast},
          {"noise_std", s.noise_std},
          {"ood", {{"size", s.ood.size}, {"families", s.ood.families}}},
          {"seed", s.seed},
          {"min_probe_accuracy", s.min_probe_accuracy}};
}

json AttackSettingsJson(const AttackConfig& a) {
  json j = AttackConfigJson(a);
  j.erase("attack_name");
  j.erase("target_class");
  j.erase("train");
  j.erase("trigger_optimizer");
  return j;
}

}  // namespace

const char* Version() { return PTAUDIT_VERSION; }

RunConfig::RunConfig() { attack.joint_epochs = 20; }

void RunConfig::validate() const {
  dataset.validate();
  ModelDims d = dims;
  d.image = dataset.image;
  d.validate();
  if (dims.num_classes != dataset.num_classes) {
    throw ConfigError("model.num_classes (" + std::to_string(dims.num_classes) + ") differs from dataset.num_classes (" +
                      std::to_string(dataset.num_classes) + ")");
  }
  if (!(temperature > 0.0)) throw ConfigError("model.temperature must be positive");
  train.validate();
  AttackConfig a = attack;
  a.train = train;
  a.validate();
  for (const auto& name : attacks) {
    static const std::set<std::string> known{"badclip", "badclip_adaptive", "blended", "wanet", "siba"};
    if (known.count(name) == 0) throw ConfigError("unknown attack '" + name + "'");
  }
  if (seeds.empty()) throw ConfigError("at least one seed is required");
  inspector.validate();
  if (!(k > 0.0)) throw ConfigError("k must be positive");
  for (const auto& m : baselines) {
    if (m != "nc" && m != "pixb") throw ConfigError("unknown baseline '" + m + "'");
  }
  baseline.validate();
  for (const auto& m : repair_modes) ParseRepairMode(m);
  repair.validate();
  for (int s : ablate.ood_sizes) {
    if (s <= 0 || s > dataset.ood.size) throw ConfigError("ablation OOD size out of range");
  }
  for (int b : ablate.batch_sizes) {
    if (b <= 0) throw ConfigError("ablation batch size must be positive");
  }
  for (const auto& l : ablate.loss_kinds) ParseLossKind(l);
  if (workers <= 0) throw ConfigError("workers must be positive");
}

json RunConfigToJson(const RunConfig& c) {
  return {
      {"dataset", DatasetSpecJson(c.dataset)},
      {"model",
       {{"joint_dim", c.dims.joint_dim},
        {"token_dim", c.dims.token_dim},
        {"num_context", c.dims.num_context},
        {"num_classes", c.dims.num_classes},
        {"conv1_channels", c.dims.conv1_channels},
        {"conv2_channels", c.dims.conv2_channels},
        {"meta_hidden", c.dims.meta_hidden},
        {"text_hidden", c.dims.text_hidden},
        {"temperature", c.temperature},
        {"seed", c.model_seed}}},
      {"pretrain",
       {{"epochs", c.pretrain.epochs},
        {"batch_size", c.pretrain.batch_size},
        {"learning_rate", c.pretrain.learning_rate},
        {"adversarial_epsilon", c.pretrain.adversarial_epsilon},
        {"adversarial_steps", c.pretrain.adversarial_steps},
        {"seed", c.pretrain.seed}}},
      {"train",
       {{"epochs", c.train.epochs},
        {"batch_size", c.train.batch_size},
        {"learning_rate", c.train.learning_rate},
        {"momentum", c.train.momentum},
        {"optimizer", c.train.optimizer},
        {"shots_per_class", c.train.shots_per_class}}},
      {"attack", AttackSettingsJson(c.attack)},
      {"attacks", c.attacks},
      {"seeds", c.seeds},
      {"inspector",
       {{"epsilon", c.inspector.epsilon},
        {"step_size", c.inspector.step_size},
        {"batch_size", c.inspector.batch_size},
        {"epochs", c.inspector.epochs},
        {"loss_kind", LossKindName(c.inspector.loss_kind)},
        {"candidate_classes", c.inspector.candidate_classes},
        {"holdout_fraction", c.inspector.holdout_fraction},
        {"seed", c.inspector.seed},
        {"k", c.k}}},
      {"baselines", c.baselines},
      {"baseline",
       {{"epochs", c.baseline.epochs},
        {"batch_size", c.baseline.batch_size},
        {"step_size", c.baseline.step_size},
        {"lambda_init", c.baseline.lambda_init},
        {"lambda_factor", c.baseline.lambda_factor},
        {"asr_target", c.baseline.asr_target},
        {"l0_beta", c.baseline.l0_beta},
        {"l0_floor", c.baseline.l0_floor},
        {"mad_cutoff", c.baseline.mad_cutoff},
        {"candidate_classes", c.baseline.candidate_classes},
        {"holdout_fraction", c.baseline.holdout_fraction},
        {"seed", c.baseline.seed}}},
      {"repair_modes", c.repair_modes},
      {"repair",
       {{"epochs", c.repair.epochs},
        {"batch_size", c.repair.batch_size},
        {"learning_rate", c.repair.learning_rate},
        {"momentum", c.repair.momentum},
        {"stamp_fraction", c.repair.stamp_fraction},
        {"epsilon", c.repair.epsilon},
        {"seed", c.repair.seed}}},
      {"ablate",
       {{"ood_sizes", c.ablate.ood_sizes},
        {"batch_sizes", c.ablate.batch_sizes},
        {"loss_kinds", c.ablate.loss_kinds},
        {"id_pool", c.ablate.id_pool},
        {"models", c.ablate.models}}},
      {"out_dir", c.out_dir},
      {"workers", c.workers},
  };
}

RunConfig RunConfigFromJson(const json& j) {
  RunConfig c;
  Fields top(j, "config");
  top.sub("dataset", [&](Fields& f) {
    auto& s = c.dataset;
    f.get("num_classes", s.num_classes);
    f.get("seen_fraction", s.seen_fraction);
    f.sub("image", [&](Fields& g) {
      g.get("height", s.image.height);
      g.get("width", s.image.width);
      g.get("channels", s.image.channels);
    });
    f.get("samples_per_class", s.samples_per_class);
    f.get("test_per_class", s.test_per_class);
    f.get("position_jitter", s.position_jitter);
    f.get("scale_jitter", s.scale_jitter);
    f.get("color_jitter", s.color_jitter);
    f.get("background_contrast", s.background_contrast);
    f.get("noise_std", s.noise_std);
    f.sub("ood", [&](Fields& g) {
      g.get("size", s.ood.size);
      g.get("families", s.ood.families);
    });
    f.get("seed", s.seed);
    f.get("min_probe_accuracy", s.min_probe_accuracy);
  });
  c.dims.num_classes = c.dataset.num_classes;
  top.sub("model", [&](Fields& f) {
    f.get("joint_dim", c.dims.joint_dim);
    f.get("token_dim", c.dims.token_dim);
    f.get("num_context", c.dims.num_context);
    f.get("num_classes", c.dims.num_classes);
    f.get("conv1_channels", c.dims.conv1_channels);
    f.get("conv2_channels", c.dims.conv2_channels);
    f.get("meta_hidden", c.dims.meta_hidden);
    f.get("text_hidden", c.dims.text_hidden);
    f.get("temperature", c.temperature);
    f.get("seed", c.model_seed);
  });
  c.dims.image = c.dataset.image;
  top.sub("pretrain", [&](Fields& f) {
    f.get("epochs", c.pretrain.epochs);
    f.get("batch_size", c.pretrain.batch_size);
    f.get("learning_rate", c.pretrain.learning_rate);
    f.get("adversarial_epsilon", c.pretrain.adversarial_epsilon);
    f.get("adversarial_steps", c.pretrain.adversarial_steps);
    f.get("seed", c.pretrain.seed);
  });
  top.sub("train", [&](Fields& f) {
    f.get("epochs", c.train.epochs);
    f.get("batch_size", c.train.batch_size);
    f.get("learning_rate", c.train.learning_rate);
    f.get("momentum", c.train.momentum);
    f.get("optimizer", c.train.optimizer);
    f.get("shots_per_class", c.train.shots_per_class);
  });
  top.sub("attack", [&](Fields& f) {
    auto& a = c.attack;
    f.get("poison_rate", a.poison_rate);
    f.get("warmup_epochs", a.warmup_epochs);
    f.get("joint_epochs", a.joint_epochs);
    f.get("epsilon", a.epsilon);
    f.get("trigger_lr", a.trigger_lr);
    f.get("trigger_loss_all_classes", a.trigger_loss_all_classes);
    f.get("poison_loss_all_classes", a.poison_loss_all_classes);
    f.sub("wanet", [&](Fields& g) {
      g.get("grid_k", a.wanet.grid_k);
      g.get("strength", a.wanet.strength);
      g.get("pixel_scale", a.wanet.pixel_scale);
      g.get("p_normal", a.wanet.p_normal);
      g.get("p_attack", a.wanet.p_attack);
      g.get("p_noise", a.wanet.p_noise);
      g.get("noise_kind", a.wanet.noise_kind);
      g.get("noise_pixels", a.wanet.noise_pixels);
    });
    f.sub("siba", [&](Fields& g) {
      g.get("l0", a.siba.l0);
      g.get("linf", a.siba.linf);
    });
    f.sub("blended", [&](Fields& g) { g.get("opacity", a.blended.opacity); });
    f.sub("adaptive", [&](Fields& g) {
      g.get("alpha", a.adaptive.alpha);
      g.get("lambda_spec", a.adaptive.lambda_spec);
      g.get("epochs", a.adaptive.epochs);
    });
  });
  top.get("attacks", c.attacks);
  top.get("seeds", c.seeds);
  top.sub("inspector", [&](Fields& f) {
    std::string loss = LossKindName(c.inspector.loss_kind);
    f.get("epsilon", c.inspector.epsilon);
    f.get("step_size", c.inspector.step_size);
    f.get("batch_size", c.inspector.batch_size);
    f.get("epochs", c.inspector.epochs);
    f.get("loss_kind", loss);
    f.get("candidate_classes", c.inspector.candidate_classes);
    f.get("holdout_fraction", c.inspector.holdout_fraction);
    f.get("seed", c.inspector.seed);
    f.get("k", c.k);
    c.inspector.loss_kind = ParseLossKind(loss);
  });
  top.get("baselines", c.baselines);
  top.sub("baseline", [&](Fields& f) {
    auto& b = c.baseline;
    f.get("epochs", b.epochs);
    f.get("batch_size", b.batch_size);
    f.get("step_size", b.step_size);
    f.get("lambda_init", b.lambda_init);
    f.get("lambda_factor", b.lambda_factor);
    f.get("asr_target", b.asr_target);
    f.get("l0_beta", b.l0_beta);
    f.get("l0_floor", b.l0_floor);
    f.get("mad_cutoff", b.mad_cutoff);
    f.get("candidate_classes", b.candidate_classes);
    f.get("holdout_fraction", b.holdout_fraction);
    f.get("seed", b.seed);
  });
  top.get("repair_modes", c.repair_modes);
  top.sub("repair", [&](Fields& f) {
    auto& r = c.repair;
    f.get("epochs", r.epochs);
    f.get("batch_size", r.batch_size);
    f.get("learning_rate", r.learning_rate);
    f.get("momentum", r.momentum);
    f.get("stamp_fraction", r.stamp_fraction);
    f.get("epsilon", r.epsilon);
    f.get("seed", r.seed);
  });
  top.sub("ablate", [&](Fields& f) {
    f.get("ood_sizes", c.ablate.ood_sizes);
    f.get("batch_sizes", c.ablate.batch_sizes);
    f.get("loss_kinds", c.ablate.loss_kinds);
    f.get("id_pool", c.ablate.id_pool);
    f.get("models", c.ablate.models);
  });
  top.get("out_dir", c.out_dir);
  top.get("workers", c.workers);
  top.finish();
  c.validate();
  return c;
}

RunConfig LoadRunConfig(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return RunConfigFromJson(j);
}

std::string RunConfigHash(const RunConfig& cfg) {
  json j = RunConfigToJson(cfg);
  j.erase("out_dir");
  j.erase("workers");
  return Sha256Hex(j.dump());
}

int ZooTarget(const Dataset& data, int seed) {
  const auto n = static_cast<int>(data.seen_classes.size());
  return data.seen_classes[static_cast<std::size_t>(((seed * 3) % n + n) % n)];
}

std::string ZooModelId(int seed, const std::string& attack) { return "s" + std::to_string(seed) + "_" + attack; }

Workspace::Workspace(RunConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  hash_ = RunConfigHash(cfg_);
  const char* env = std::getenv(kOutRootEnv);
  const fs::path out = env != nullptr && *env != '\0' ? fs::path(env) : fs::path(cfg_.out_dir);
  root_ = out / ("run-" + hash_.substr(0, 16));
  fs::create_directories(root_);
  if (!fs::exists(root_ / "config.json")) {
    json j = RunConfigToJson(cfg_);
    j["config_hash"] = hash_;
    j["version"] = Version();
    WriteJson(root_ / "config.json", j);
  }
}

bool Workspace::done(const std::string& unit) const {
  const fs::path p = root_ / UnitFile(unit);
  if (!fs::exists(p)) return false;
  try {
    const json j = ReadJson(p);
    return j.value("config_hash", "") == hash_ && j.value("status", "") == "done";
  } catch (const Error&) {
    return false;
  }
}

json Workspace::manifest(const std::string& unit) const { return ReadJson(root_ / UnitFile(unit)); }

void Workspace::complete(const std::string& unit, json manifest) {
  manifest["unit"] = unit;
  manifest["status"] = "done";
  manifest["config_hash"] = hash_;
  manifest["version"] = Version();
  WriteJson(root_ / UnitFile(unit), manifest);
  log({{"unit", unit}, {"completed_at", NowIso()}, {"seconds", manifest.value("seconds", 0.0)}});
}

void Workspace::log(const json& entry) {
  json e = entry;
  e["config_hash"] = hash_;
  e["version"] = Version();
  std::ofstream out(root_ / "experiment_log.jsonl", std::ios::app);
  out << e.dump() << '\n';
}

const Dataset& Workspace::data() {
  if (have_data_) return data_;
  const fs::path path = root_ / "data" / "dataset.ptarr";
  if (done("data")) {
    data_ = LoadDataset(path.string());
  } else {
    const auto t0 = std::chrono::steady_clock::now();
    try {
      data_ = GenerateDataset(cfg_.dataset);
    } catch (const Error& e) {
      throw StageError("data", e.what());
    }
    fs::create_directories(path.parent_path());
    SaveDataset(data_, path.string());
    complete("data", {{"seconds", Seconds(t0)}, {"probe_accuracy", data_.probe_accuracy}, {"manifest", DatasetManifest(data_)}});
  }
  have_data_ = true;
  return data_;
}

const ImageSet& Workspace::ood() {
  if (have_ood_) return ood_;
  const fs::path path = root_ / "data" / "ood.ptarr";
  if (done("ood")) {
    const ArrayFile f = ReadArrayFile(path.string());
    ood_.shape = cfg_.dataset.image;
    ood_.pixels = f.get("pixels");
    ood_.labels.assign(static_cast<std::size_t>(ood_.pixels.rows()), -1);
    ood_.splits.assign(static_cast<std::size_t>(ood_.pixels.rows()), SplitTag::kOod);
  } else {
    const auto t0 = std::chrono::steady_clock::now();
    try {
      ood_ = GenerateOodPool(cfg_.dataset);
    } catch (const Error& e) {
      throw StageError("data", e.what());
    }
    ArrayFile f;
    f.metadata = {{"format", "ptaudit-ood-pool"}, {"families", cfg_.dataset.ood.families}, {"seed", cfg_.dataset.seed}};
    f.put("pixels", ood_.pixels);
    fs::create_directories(path.parent_path());
    WriteArrayFile(path.string(), f);
    complete("ood", {{"seconds", Seconds(t0)}, {"size", ood_.size()}});
  }
  have_ood_ = true;
  return ood_;
}

const PromptTunedModel& Workspace::base_model() {
  if (have_base_) return base_;
  const fs::path path = root_ / "zoo" / "base.ckpt";
  if (done("pretrain")) {
    base_ = LoadCheckpoint(path.string());
  } else {
    const Dataset& d = data();
    const auto t0 = std::chrono::steady_clock::now();
    ModelDims dims = cfg_.dims;
    dims.image = cfg_.dataset.image;
    TrainLog log;
    try {
      base_ = InitModel(dims, NormalizationSpec{}, cfg_.temperature, cfg_.model_seed);
      PretrainEncoders(base_, d.train, cfg_.pretrain, &log);
    } catch (const Error& e) {
      throw StageError("pretrain", e.what());
    }
    fs::create_directories(path.parent_path());
    SaveCheckpoint(base_, path.string());
    std::vector<int> all(static_cast<std::size_t>(dims.num_classes));
    std::iota(all.begin(), all.end(), 0);
    complete("pretrain", {{"seconds", Seconds(t0)},
                          {"zero_shot_acc", Accuracy(base_, d.test, all)},
                          {"epoch_loss", log.epoch_loss},
                          {"encoder_checksum", base_.checksum(ParamGroup::kEncoder)}});
  }
  have_base_ = true;
  return base_;
}

ImageSet Workspace::shots(int seed) {
  return SampleShots(data().train, data().seen_classes, cfg_.train.shots_per_class, static_cast<std::uint64_t>(seed));
}

ImageSet Workspace::defender_set(int seed) {
  return SampleShots(data().train, data().seen_classes, cfg_.train.shots_per_class,
                     static_cast<std::uint64_t>(seed) + 7919);
}

ImageSet Workspace::eval_split() {
  ImageSet out = data().test.subset(data().test.indices_of(data().unseen_classes));
  out.append(ood());
  return out;
}

ImageSet Workspace::seen_test() { return data().test.subset(data().test.indices_of(data().seen_classes)); }

namespace {

json ZooMetrics(Workspace& ws, const PromptTunedModel& m, const TriggerPattern* trig, int target) {
  const Dataset& d = ws.data();
  json j = {{"acc_seen", Accuracy(m, d.test, d.seen_classes)}, {"acc_unseen", Accuracy(m, d.test, d.unseen_classes)}};
  if (trig != nullptr) {
    j["asr_seen"] = MeasureAsr(m, ws.seen_test(), *trig, target);
    j["asr_unseen"] = MeasureAsr(m, d.test.subset(d.test.indices_of(d.unseen_classes)), *trig, target);
    j["asr_ood"] = MeasureAsr(m, ws.ood(), *trig, target);
    j["asr_eval"] = MeasureAsr(m, ws.eval_split(), *trig, target);
  }
  return j;
}

ZooEntry EntryFor(Workspace& ws, int seed, const std::string& attack) {
  ZooEntry e;
  e.id = ZooModelId(seed, attack);
  e.attack = attack;
  e.seed = seed;
  e.target = attack == "clean" ? -1 : ZooTarget(ws.data(), seed);
  e.checkpoint = ws.path("zoo/" + e.id + ".ckpt").string();
  if (attack != "clean") e.trigger = ws.path("zoo/" + e.id + ".trigger").string();
  return e;
}

}  // namespace

std::vector<ZooEntry> BuildZoo(Workspace& ws) {
  const RunConfig& cfg = ws.config();
  std::vector<ZooEntry> out;
  for (int seed : cfg.seeds) {
    const std::string clean_unit = "zoo/" + ZooModelId(seed, "clean");
    ZooEntry clean = EntryFor(ws, seed, "clean");
    PromptTunedModel start = ws.base_model();
    ResetPromptParams(start, 100 + static_cast<std::uint64_t>(seed));
    TrainConfig tc = cfg.train;
    tc.seed = static_cast<std::uint64_t>(seed);
    const ImageSet shots = ws.shots(seed);
    const Dataset& d = ws.data();
    if (!ws.done(clean_unit)) {
      const auto t0 = std::chrono::steady_clock::now();
      TrainLog log;
      PromptTunedModel m;
      try {
        m = PromptTune(start, shots, d.seen_classes, tc, &log);
      } catch (const Error& e) {
        throw StageError("build-zoo/" + clean.id, e.what());
      }
      SaveCheckpoint(m, clean.checkpoint);
      json man = {{"id", clean.id}, {"attack", "clean"}, {"seed", seed}, {"target", -1},
                  {"checkpoint", fs::path(clean.checkpoint).filename().string()},
                  {"metrics", ZooMetrics(ws, m, nullptr, -1)}, {"epoch_loss", log.epoch_loss},
                  {"checksum", m.checksum()}, {"encoder_checksum", m.checksum(ParamGroup::kEncoder)},
                  {"seconds", Seconds(t0)}};
      WriteJson(ws.path("zoo/" + clean.id + ".json"), man);
      ws.complete(clean_unit, man);
    }
    clean.manifest = ws.manifest(clean_unit);
    out.push_back(clean);
    const double twin_acc = clean.manifest["metrics"]["acc_seen"].get<double>();

    for (const auto& attack : cfg.attacks) {
      ZooEntry e = EntryFor(ws, seed, attack);
      const std::string unit = "zoo/" + e.id;
      if (!ws.done(unit)) {
        const auto t0 = std::chrono::steady_clock::now();
        AttackConfig ac = cfg.attack;
        ac.attack_name = attack;
        ac.target_class = e.target;
        ac.train = tc;
        AttackResult r;
        try {
          r = RunAttack(start, shots, d.seen_classes, ac);
        } catch (const Error& err) {
          throw StageError("build-zoo/" + e.id, err.what());
        }
        if (r.model.checksum(ParamGroup::kEncoder) != start.checksum(ParamGroup::kEncoder)) {
          throw StageError("build-zoo/" + e.id, "attack changed encoder parameters");
        }
        SaveCheckpoint(r.model, e.checkpoint);
        WriteArrayFile(e.trigger, TriggerToArrays(r.trigger));
        json metrics = ZooMetrics(ws, r.model, &r.trigger, e.target);
        metrics["clean_twin_acc_seen"] = twin_acc;
        metrics["acc_drop"] = twin_acc - metrics["acc_seen"].get<double>();
        const double max_violation =
            r.budget_violation.empty() ? 0.0 : *std::max_element(r.budget_violation.begin(), r.budget_violation.end());
        json man = {{"id", e.id}, {"attack", attack}, {"seed", seed}, {"target", e.target},
                    {"checkpoint", fs::path(e.checkpoint).filename().string()},
                    {"trigger", fs::path(e.trigger).filename().string()},
                    {"trigger_kind", TriggerKindName(r.trigger.kind)},
                    {"metrics", metrics}, {"warnings", r.warnings}, {"epoch_loss", r.log.epoch_loss},
                    {"poisoned_per_epoch", r.poisoned_per_epoch}, {"max_budget_violation", max_violation},
                    {"attack_config", AttackConfigJson(ac)},
                    {"checksum", r.model.checksum()}, {"encoder_checksum", r.model.checksum(ParamGroup::kEncoder)},
                    {"seconds", Seconds(t0)}};
        WriteJson(ws.path("zoo/" + e.id + ".json"), man);
        ws.complete(unit, man);
      }
      e.manifest = ws.manifest(unit);
      out.push_back(e);
    }
  }
  return out;
}

std::vector<ZooEntry> ListZoo(Workspace& ws) {
  std::vector<ZooEntry> out;
  for (int seed : ws.config().seeds) {
    std::vector<std::string> names{"clean"};
    names.insert(names.end(), ws.config().attacks.begin(), ws.config().attacks.end());
    for (const auto& a : names) {
      ZooEntry e = EntryFor(ws, seed, a);
      if (!ws.done("zoo/" + e.id)) throw StageError("zoo", "model " + e.id + " has not been built; run build-zoo first");
      e.manifest = ws.manifest("zoo/" + e.id);
      out.push_back(e);
    }
  }
  return out;
}

PromptTunedModel LoadZooModel(const ZooEntry& e) { return LoadCheckpoint(e.checkpoint); }

TriggerPattern LoadZooTrigger(const ZooEntry& e) {
  if (e.trigger.empty()) throw DataError("model " + e.id + " has no trigger");
  return TriggerFromArrays(ReadArrayFile(e.trigger));
}

InspectOutcome InspectZoo(Workspace& ws) {
  InspectOutcome out;
  const InversionConfig ic = InspectorConfig(ws.config());
  for (const auto& e : ListZoo(ws)) {
    const std::string unit = "inspect/" + e.id;
    const fs::path report_path = ws.path("reports/ci/" + e.id + ".json");
    if (!ws.done(unit)) {
      const auto t0 = std::chrono::steady_clock::now();
      AnomalyReport r;
      try {
        r = InspectModel(LoadZooModel(e), ws.ood(), ic, ws.config().k);
      } catch (const Error& err) {
        throw StageError("inspect/" + e.id, err.what());
      }
      json j = AnomalyReportJson(r);
      j["model_id"] = e.id;
      j["seconds"] = Seconds(t0);
      WriteJson(report_path, j);
      WriteArrayFile(ws.path("reports/ci/" + e.id + ".deltas").string(), AnomalyReportDeltas(r));
      ws.complete(unit, {{"report", "reports/ci/" + e.id + ".json"}, {"s_max", r.verdict.s_max},
                         {"backdoored", r.verdict.backdoored}, {"seconds", Seconds(t0)}});
    }
    json j = ReadJson(report_path);
    out.any_degenerate = out.any_degenerate || j["verdict"]["degenerate"].get<bool>();
    out.reports.push_back(std::move(j));
  }
  return out;
}

AnomalyReport LoadInspection(Workspace& ws, const ZooEntry& e) {
  if (!ws.done("inspect/" + e.id)) throw StageError("repair", "model " + e.id + " has not been inspected");
  return AnomalyReportFromJson(ReadJson(ws.path("reports/ci/" + e.id + ".json")),
                               ReadArrayFile(ws.path("reports/ci/" + e.id + ".deltas").string()));
}

std::vector<json> BaselineZoo(Workspace& ws, const std::string& method) {
  if (method != "nc" && method != "pixb") throw ConfigError("unknown baseline '" + method + "'");
  std::vector<json> out;
  BaselineConfig bc = ws.config().baseline;
  bc.workers = ws.config().workers;
  for (const auto& e : ListZoo(ws)) {
    const std::string unit = method + "/" + e.id;
    const fs::path report_path = ws.path("reports/" + method + "/" + e.id + ".json");
    if (!ws.done(unit)) {
      const auto t0 = std::chrono::steady_clock::now();
      BaselineReport r;
      try {
        r = RunBaseline(method, LoadZooModel(e), ws.ood(), bc);
      } catch (const Error& err) {
        throw StageError(method + "/" + e.id, err.what());
      }
      json j = BaselineReportJson(r);
      j["model_id"] = e.id;
      j["seconds"] = Seconds(t0);
      WriteJson(report_path, j);
      ws.complete(unit, {{"report", "reports/" + method + "/" + e.id + ".json"}, {"s_max", r.s_max},
                         {"backdoored", r.backdoored}, {"seconds", Seconds(t0)}});
    }
    out.push_back(ReadJson(report_path));
  }
  return out;
}

std::vector<json> RepairZoo(Workspace& ws) {
  std::vector<json> out;
  const RunConfig& cfg = ws.config();
  const Dataset& d = ws.data();
  const ImageSet seen = ws.seen_test();
  const ImageSet transfer = ws.eval_split();
  for (const auto& e : ListZoo(ws)) {
    if (e.attack == "clean") continue;
    const AnomalyReport report = LoadInspection(ws, e);
    for (const auto& mode_name : cfg.repair_modes) {
      const std::string unit = "repair/" + e.id + "_" + mode_name;
      const fs::path path = ws.path("repair/" + e.id + "_" + mode_name + ".json");
      if (!ws.done(unit)) {
        const auto t0 = std::chrono::steady_clock::now();
        json j = {{"model_id", e.id}, {"attack", e.attack}, {"seed", e.seed}, {"target", e.target},
                  {"flagged_class", report.flagged_class}, {"mode", mode_name}};
        if (!report.verdict.backdoored) {
          j["skipped"] = "inspector did not flag this model";
        } else {
          RepairConfig rc = cfg.repair;
          rc.mode = ParseRepairMode(mode_name);
          const TriggerPattern trig = LoadZooTrigger(e);
          RepairEval ev;
          ev.acc_split = &d.test;
          ev.classes = d.seen_classes;
          ev.asr_split = &seen;
          ev.transfer_split = &transfer;
          ev.true_trigger = &trig;
          ev.target = e.target;
          try {
            const Mat delta = RepairDelta(report, rc, d.test.shape);
            const RepairResult r = Repair(LoadZooModel(e), ws.defender_set(e.seed), d.seen_classes, delta, rc, ev);
            j.update(RepairResultJson(r, rc));
          } catch (const Error& err) {
            throw StageError(unit, err.what());
          }
        }
        j["seconds"] = Seconds(t0);
        WriteJson(path, j);
        ws.complete(unit, {{"report", "repair/" + e.id + "_" + mode_name + ".json"}, {"seconds", Seconds(t0)}});
      }
      out.push_back(ReadJson(path));
    }
  }
  return out;
}

std::vector<ExperimentRecord> CollectRecords(Workspace& ws) {
  std::vector<ExperimentRecord> out;
  std::vector<ZooEntry> zoo;
  try {
    zoo = ListZoo(ws);
  } catch (const StageError&) {
    return out;
  }
  std::vector<std::string> methods{"ci"};
  methods.insert(methods.end(), ws.config().baselines.begin(), ws.config().baselines.end());
  for (const auto& e : zoo) {
    for (const auto& method : methods) {
      const std::string unit = (method == "ci" ? "inspect" : method) + "/" + e.id;
      if (!ws.done(unit)) continue;
      const json j = ReadJson(ws.path("reports/" + method + "/" + e.id + ".json"));
      ExperimentRecord r;
      r.model_id = e.id;
      r.attack = e.attack;
      r.method = method;
      r.seed = e.seed;
      r.true_backdoored = e.attack != "clean";
      r.true_target = e.target;
      r.acc = e.manifest["metrics"]["acc_seen"].get<double>();
      r.asr = e.manifest["metrics"].value("asr_eval", 0.0);
      const auto& v = j.at("verdict");
      r.s_max = v.at("s_max").get<double>();
      r.verdict = v.at("backdoored").get<bool>();
      r.threshold = v.at("threshold").get<double>();
      r.flagged_class = v.at("flagged_class").get<int>();
      r.flagged_classes = v.at("flagged_classes").get<std::vector<int>>();
      for (const auto& row : j.at("classes")) {
        r.classes.push_back(row.at("class_id").get<int>());
        r.class_scores.push_back(method == "ci" ? row.at("z").get<double>() : row.at("anomaly_index").get<double>());
      }
      out.push_back(std::move(r));
    }
  }
  return out;
}

Summary ReportRun(Workspace& ws) {
  const std::vector<ExperimentRecord> records = CollectRecords(ws);
  if (records.empty()) throw StageError("report", "no detector reports found under " + ws.root().string());
  Summary s;
  fs::create_directories(ws.path("summary"));
  {
    std::ofstream out(ws.path("summary/records.jsonl"), std::ios::binary);
    for (const auto& r : records) out << RecordJson(r).dump() << '\n';
  }
  s = Summarize(records, ws.path("summary").string());
  s.files.push_back("records.jsonl");
  ws.log({{"unit", "report"}, {"completed_at", NowIso()}, {"records", records.size()}});
  return s;
}

std::vector<std::string> AblateRun(Workspace& ws) {
  const RunConfig& cfg = ws.config();
  std::vector<ZooEntry> models;
  for (const auto& e : ListZoo(ws)) {
    const bool listed = std::find(cfg.ablate.models.begin(), cfg.ablate.models.end(), e.id) != cfg.ablate.models.end();
    if (cfg.ablate.models.empty() ? e.attack != "clean" : listed) models.push_back(e);
  }
  if (models.empty()) throw StageError("ablate", "no zoo models selected for ablation");
  const InversionConfig base = InspectorConfig(cfg);

  // Runs one inspection variant per model. Variants are cached by pool and
  // inversion settings, so sweeps that revisit the default share its run.
  const auto run = [&](const std::string& sweep, const std::string& value, const ZooEntry& e,
                       const std::string& pool_name, const ImageSet& pool, const InversionConfig& ic) {
    const std::string unit = "ablate/" + pool_name + "_b" + std::to_string(ic.batch_size) + "_" +
                             LossKindName(ic.loss_kind) + "/" + e.id;
    if (!ws.done(unit)) {
      const auto t0 = std::chrono::steady_clock::now();
      AnomalyReport r;
      try {
        r = InspectModel(LoadZooModel(e), pool, ic, cfg.k);
      } catch (const Error& err) {
        throw StageError(unit, err.what());
      }
      const auto [target_asr, benign_asr] = TargetAndBenignAsr(r, e.target);
      ws.complete(unit, {{"model_id", e.id}, {"attack", e.attack}, {"seed", e.seed}, {"target", e.target},
                         {"target_asr", target_asr}, {"benign_asr", benign_asr}, {"s_max", r.verdict.s_max},
                         {"backdoored", r.verdict.backdoored}, {"flagged_class", r.flagged_class},
                         {"seconds", Seconds(t0)}});
    }
    json row = ws.manifest(unit);
    row["sweep"] = sweep;
    row["value"] = value;
    return row;
  };
  const std::string ood_name = "ood" + std::to_string(ws.ood().size());

  std::vector<std::string> files;
  const auto write = [&](const std::string& sweep, const std::vector<json>& rows) {
    std::ostringstream csv;
    csv << "model_id,attack,seed,target," << sweep << ",target_asr,benign_asr,s_max,backdoored,flagged_class\n";
    for (const auto& r : rows) {
      csv << r["model_id"].get<std::string>() << ',' << r["attack"].get<std::string>() << ',' << r["seed"] << ','
          << r["target"] << ',' << r["value"].get<std::string>() << ',' << r["target_asr"] << ',' << r["benign_asr"]
          << ',' << r["s_max"] << ',' << (r["backdoored"].get<bool>() ? 1 : 0) << ',' << r["flagged_class"] << '\n';
    }
    const std::string rel = "ablate/" + sweep + ".csv";
    fs::create_directories(ws.path("ablate"));
    std::ofstream(ws.path(rel), std::ios::binary) << csv.str();
    files.push_back(rel);
  };

  std::vector<json> rows;
  for (int size : cfg.ablate.ood_sizes) {
    const ImageSet pool = Head(ws.ood(), size);
    for (const auto& e : models) {
      rows.push_back(run("ood_size", std::to_string(size), e, "ood" + std::to_string(pool.size()), pool, base));
    }
  }
  if (!cfg.ablate.ood_sizes.empty()) write("ood_size", rows);

  rows.clear();
  for (int b : cfg.ablate.batch_sizes) {
    InversionConfig ic = base;
    ic.batch_size = b;
    for (const auto& e : models) rows.push_back(run("batch_size", std::to_string(b), e, ood_name, ws.ood(), ic));
  }
  if (!cfg.ablate.batch_sizes.empty()) write("batch_size", rows);

  rows.clear();
  for (const auto& l : cfg.ablate.loss_kinds) {
    InversionConfig ic = base;
    ic.loss_kind = ParseLossKind(l);
    for (const auto& e : models) rows.push_back(run("loss_kind", l, e, ood_name, ws.ood(), ic));
  }
  if (!cfg.ablate.loss_kinds.empty()) write("loss_kind", rows);

  if (cfg.ablate.id_pool) {
    rows.clear();
    const ImageSet id_pool = Unlabeled(ws.data().test);
    for (const auto& e : models) {
      rows.push_back(run("pool", "ood", e, ood_name, ws.ood(), base));
      rows.push_back(run("pool", "id", e, "id" + std::to_string(id_pool.size()), id_pool, base));
    }
    write("pool", rows);
  }
  ws.log({{"unit", "ablate"}, {"completed_at", NowIso()}, {"files", files}});
  return files;
}

}  // namespace ptaudit
