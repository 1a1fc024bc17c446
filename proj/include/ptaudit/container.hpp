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

// Self-describing array container used for checkpoints, triggers and
// datasets.
//
// Layout (all integers little-endian):
//   bytes 0..7    magic "PTARRAY1"
//   bytes 8..15   u64 header length H
//   bytes 16..    H bytes of UTF-8 JSON:
//                   {"metadata": {...},
//                    "arrays": [{"name", "rows", "cols", "dtype": "f64le",
//                                "offset"}, ...]}
//   then          the data section; each array is rows*cols IEEE-754
//                 doubles in row-major order starting at `offset` bytes
//                 from the start of the data section.
//
// Any reader with a JSON parser can load the file; no training code is
// needed.

#ifndef PTAUDIT_CONTAINER_HPP_
#define PTAUDIT_CONTAINER_HPP_

#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ptaudit/common.hpp"

namespace ptaudit {

struct ArrayFile {
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<std::pair<std::string, Mat>> arrays;

  const Mat& get(const std::string& name) const;
  bool has(const std::string& name) const;
  void put(std::string name, Mat value);
};

std::string SerializeArrayFile(const ArrayFile& file);
// Throws ParseError carrying the byte offset of the first inconsistency.
ArrayFile ParseArrayFile(const std::string& bytes);

void WriteArrayFile(const std::string& path, const ArrayFile& file);
ArrayFile ReadArrayFile(const std::string& path);

// Hex SHA-256 of a byte string.
std::string Sha256Hex(const std::string& bytes);

}  // namespace ptaudit

#endif  // PTAUDIT_CONTAINER_HPP_
