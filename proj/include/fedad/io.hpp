/*
 * Copyright 2026 The FedAD Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *      http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <torch/torch.h>

namespace fedad::io {

struct NamedTensor {
  std::string name;
  torch::Tensor value;
};

struct ArchiveStats {
  std::uint64_t payload_bytes = 0;   // raw tensor data
  std::uint64_t metadata_bytes = 0;  // magic, names, dtypes, shapes
  std::uint64_t total() const { return payload_bytes + metadata_bytes; }
};

// Binary tensor archive ("FADT"): magic, version, tensor count, then for each
// tensor its name, dtype code, rank, dims and contiguous little-endian data.
// Supported dtypes: float32, float16, float64, int64.
ArchiveStats write_tensor_archive(const std::filesystem::path& path,
                                  const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_tensor_archive(const std::filesystem::path& path);
ArchiveStats archive_stats(const std::vector<NamedTensor>& tensors);

// Looks a tensor up by name; throws std::out_of_range when absent.
const torch::Tensor& find_tensor(const std::vector<NamedTensor>& tensors, std::string_view name);

// Write-temp-then-rename so readers never observe a partial file.
void atomic_write(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

std::string sha256_hex(std::string_view bytes);
// Hash over dtype, shape and contents of each tensor, in order.
std::string tensor_hash(const std::vector<torch::Tensor>& tensors);
std::string file_sha256(const std::filesystem::path& path);

}  // namespace fedad::io
