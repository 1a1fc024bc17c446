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

#include "ptaudit/container.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace ptaudit {
namespace {

constexpr char kMagic[] = "PTARRAY1";
constexpr std::size_t kMagicSize = 8;
constexpr std::size_t kPrefixSize = 16;

static_assert(std::endian::native == std::endian::little,
              "container I/O assumes a little-endian host");

void PutU64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t GetU64(const std::string& in, std::size_t pos) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  }
  return v;
}

}  // namespace

const Mat& ArrayFile::get(const std::string& name) const {
  for (const auto& [n, m] : arrays) {
    if (n == name) return m;
  }
  throw DataError("array '" + name + "' not present in container");
}

bool ArrayFile::has(const std::string& name) const {
  for (const auto& entry : arrays) {
    if (entry.first == name) return true;
  }
  return false;
}

void ArrayFile::put(std::string name, Mat value) {
  for (auto& [n, m] : arrays) {
    if (n == name) {
      m = std::move(value);
      return;
    }
  }
  arrays.emplace_back(std::move(name), std::move(value));
}

std::string SerializeArrayFile(const ArrayFile& file) {
  nlohmann::json header;
  header["metadata"] = file.metadata;
  header["arrays"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, m] : file.arrays) {
    header["arrays"].push_back({{"name", name},
                                {"rows", m.rows()},
                                {"cols", m.cols()},
                                {"dtype", "f64le"},
                                {"offset", offset}});
    offset += static_cast<std::uint64_t>(m.size()) * sizeof(double);
  }
  const std::string text = header.dump();
  std::string out(kMagic, kMagicSize);
  PutU64(out, text.size());
  out += text;
  for (const auto& entry : file.arrays) {
    const Mat& m = entry.second;
    out.append(reinterpret_cast<const char*>(m.data()),
               static_cast<std::size_t>(m.size()) * sizeof(double));
  }
  return out;
}

ArrayFile ParseArrayFile(const std::string& bytes) {
  if (bytes.size() < kMagicSize || std::memcmp(bytes.data(), kMagic, kMagicSize) != 0) {
    throw ParseError("missing PTARRAY1 magic", 0);
  }
  if (bytes.size() < kPrefixSize) throw ParseError("truncated header length", kMagicSize);
  const std::uint64_t header_len = GetU64(bytes, kMagicSize);
  if (header_len > bytes.size() - kPrefixSize) {
    throw ParseError("header length " + std::to_string(header_len) + " exceeds file size",
                     kMagicSize);
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + kPrefixSize,
                                   bytes.begin() + kPrefixSize + static_cast<long>(header_len));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("malformed JSON header: ") + e.what(), kPrefixSize + e.byte);
  }
  const std::size_t data_start = kPrefixSize + header_len;
  ArrayFile file;
  if (!header.contains("arrays") || !header["arrays"].is_array()) {
    throw ParseError("header has no 'arrays' list", kPrefixSize);
  }
  file.metadata = header.value("metadata", nlohmann::json::object());
  for (const auto& entry : header["arrays"]) {
    std::string name;
    std::int64_t rows = 0, cols = 0;
    std::uint64_t offset = 0;
    try {
      name = entry.at("name").get<std::string>();
      rows = entry.at("rows").get<std::int64_t>();
      cols = entry.at("cols").get<std::int64_t>();
      offset = entry.at("offset").get<std::uint64_t>();
      if (entry.at("dtype").get<std::string>() != "f64le") {
        throw ParseError("unsupported dtype for array '" + name + "'", kPrefixSize);
      }
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("bad array descriptor: ") + e.what(), kPrefixSize);
    }
    if (rows < 0 || cols < 0) throw ParseError("negative array shape", kPrefixSize);
    const std::uint64_t nbytes = static_cast<std::uint64_t>(rows * cols) * sizeof(double);
    const std::uint64_t begin = data_start + offset;
    if (begin > bytes.size() || nbytes > bytes.size() - begin) {
      throw ParseError("array '" + name + "' runs past end of file", bytes.size());
    }
    Mat m(rows, cols);
    std::memcpy(m.data(), bytes.data() + begin, nbytes);
    file.arrays.emplace_back(std::move(name), std::move(m));
  }
  return file;
}

void WriteArrayFile(const std::string& path, const ArrayFile& file) {
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open " + tmp + " for writing");
    const std::string bytes = SerializeArrayFile(file);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

ArrayFile ReadArrayFile(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ParseArrayFile(ss.str());
}

std::string Sha256Hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr);
  static constexpr char kHex[] = "0123456789abcdef";
  std::string hex;
  for (unsigned int i = 0; i < len; ++i) {
    hex.push_back(kHex[digest[i] >> 4]);
    hex.push_back(kHex[digest[i] & 0xF]);
  }
  return hex;
}

}  // namespace ptaudit
