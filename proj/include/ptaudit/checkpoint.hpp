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

#ifndef PTAUDIT_CHECKPOINT_HPP_
#define PTAUDIT_CHECKPOINT_HPP_

#include <string>

#include "ptaudit/container.hpp"
#include "ptaudit/model.hpp"

namespace ptaudit {

inline constexpr char kCheckpointFormat[] = "ptaudit-checkpoint";
inline constexpr char kFormatVersion[] = "1.0";

ArrayFile ModelToArrays(const PromptTunedModel& model);
PromptTunedModel ModelFromArrays(const ArrayFile& file);

void SaveCheckpoint(const PromptTunedModel& model, const std::string& path);
PromptTunedModel LoadCheckpoint(const std::string& path);

}  // namespace ptaudit

#endif  // PTAUDIT_CHECKPOINT_HPP_
