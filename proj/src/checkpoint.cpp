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

#include "ptaudit/checkpoint.hpp"

namespace ptaudit {

ArrayFile ModelToArrays(const PromptTunedModel& model) {
  model.validate();
  ArrayFile file;
  const auto& d = model.dims;
  file.metadata = {
      {"format", kCheckpointFormat},
      {"version", kFormatVersion},
      {"dims",
       {{"height", d.image.height},
        {"width", d.image.width},
        {"channels", d.image.channels},
        {"d", d.joint_dim},
        {"e", d.token_dim},
        {"N", d.num_context},
        {"K", d.num_classes},
        {"conv1_channels", d.conv1_channels},
        {"conv2_channels", d.conv2_channels},
        {"meta_hidden", d.meta_hidden},
        {"text_hidden", d.text_hidden}}},
      {"normalization", {{"mean", model.norm.mean}, {"std", model.norm.std}}},
      {"temperature", model.temperature},
      {"seed", model.seed},
      {"encoder_checksum", model.checksum(ParamGroup::kEncoder)},
      {"prompt_checksum", model.checksum(ParamGroup::kPrompt)},
  };
  model.params.for_each([&](const char* name, const Mat& m, ParamGroup) { file.put(name, m); });
  return file;
}

PromptTunedModel ModelFromArrays(const ArrayFile& file) {
  const auto& meta = file.metadata;
  if (meta.value("format", "") != kCheckpointFormat) {
    throw DataError("container is not a ptaudit checkpoint");
  }
  PromptTunedModel model;
  try {
    const auto& d = meta.at("dims");
    model.dims.image = {d.at("height").get<int>(), d.at("width").get<int>(),
                        d.at("channels").get<int>()};
    model.dims.joint_dim = d.at("d").get<int>();
    model.dims.token_dim = d.at("e").get<int>();
    model.dims.num_context = d.at("N").get<int>();
    model.dims.num_classes = d.at("K").get<int>();
    model.dims.conv1_channels = d.at("conv1_channels").get<int>();
    model.dims.conv2_channels = d.at("conv2_channels").get<int>();
    model.dims.meta_hidden = d.at("meta_hidden").get<int>();
    model.dims.text_hidden = d.at("text_hidden").get<int>();
    model.norm.mean = meta.at("normalization").at("mean").get<std::vector<double>>();
    model.norm.std = meta.at("normalization").at("std").get<std::vector<double>>();
    model.temperature = meta.at("temperature").get<double>();
    model.seed = meta.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint metadata incomplete: ") + e.what());
  }
  model.params.for_each([&](const char* name, Mat& m, ParamGroup) { m = file.get(name); });
  model.validate();
  return model;
}

void SaveCheckpoint(const PromptTunedModel& model, const std::string& path) {
  WriteArrayFile(path, ModelToArrays(model));
}

PromptTunedModel LoadCheckpoint(const std::string& path) {
  return ModelFromArrays(ReadArrayFile(path));
}

}  // namespace ptaudit
