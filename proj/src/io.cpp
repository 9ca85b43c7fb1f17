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
#include "fedad/io.hpp"

#include <openssl/evp.h>

#include <array>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <unistd.h>

namespace fedad::io {
namespace {

constexpr std::array<char, 4> kMagic = {'F', 'A', 'D', 'T'};
constexpr std::uint32_t kVersion = 1;

std::uint8_t dtype_code(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat32: return 0;
    case torch::kFloat16: return 1;
    case torch::kFloat64: return 2;
    case torch::kInt64: return 3;
    default: throw std::invalid_argument("tensor archive: unsupported dtype");
  }
}

torch::ScalarType dtype_from_code(std::uint8_t c) {
  switch (c) {
    case 0: return torch::kFloat32;
    case 1: return torch::kFloat16;
    case 2: return torch::kFloat64;
    case 3: return torch::kInt64;
    default: throw std::runtime_error("tensor archive: bad dtype code " + std::to_string(c));
  }
}

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string data) : data_(std::move(data)) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string_view bytes(std::size_t n) {
    need(n);
    std::string_view v(data_.data() + pos_, n);
    pos_ += n;
    return v;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) throw std::runtime_error("tensor archive: truncated file");
  }
  std::string data_;
  std::size_t pos_ = 0;
};

std::uint64_t header_bytes(const NamedTensor& t) {
  return sizeof(std::uint32_t) + t.name.size() + 2 * sizeof(std::uint8_t) +
         static_cast<std::uint64_t>(t.value.dim()) * sizeof(std::int64_t);
}

}  // namespace

ArchiveStats archive_stats(const std::vector<NamedTensor>& tensors) {
  ArchiveStats s;
  s.metadata_bytes = kMagic.size() + 2 * sizeof(std::uint32_t);
  for (const auto& t : tensors) {
    s.metadata_bytes += header_bytes(t);
    s.payload_bytes += static_cast<std::uint64_t>(t.value.numel()) * t.value.element_size();
  }
  return s;
}

ArchiveStats write_tensor_archive(const std::filesystem::path& path,
                                  const std::vector<NamedTensor>& tensors) {
  std::string out;
  out.append(kMagic.data(), kMagic.size());
  put<std::uint32_t>(out, kVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    auto v = t.value.detach().to(torch::kCPU).contiguous();
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    put<std::uint8_t>(out, dtype_code(v.scalar_type()));
    put<std::uint8_t>(out, static_cast<std::uint8_t>(v.dim()));
    for (auto d : v.sizes()) put<std::int64_t>(out, d);
    out.append(static_cast<const char*>(v.data_ptr()), v.numel() * v.element_size());
  }
  atomic_write(path, out);
  return archive_stats(tensors);
}

std::vector<NamedTensor> read_tensor_archive(const std::filesystem::path& path) {
  Reader r(read_file(path));
  auto magic = r.bytes(kMagic.size());
  if (std::memcmp(magic.data(), kMagic.data(), kMagic.size()) != 0)
    throw std::runtime_error("tensor archive: bad magic in " + path.string());
  if (r.get<std::uint32_t>() != kVersion)
    throw std::runtime_error("tensor archive: unsupported version in " + path.string());
  auto count = r.get<std::uint32_t>();
  std::vector<NamedTensor> result;
  result.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = std::string(r.bytes(r.get<std::uint32_t>()));
    auto dtype = dtype_from_code(r.get<std::uint8_t>());
    auto rank = r.get<std::uint8_t>();
    std::vector<std::int64_t> dims(rank);
    for (auto& d : dims) d = r.get<std::int64_t>();
    t.value = torch::empty(dims, torch::TensorOptions().dtype(dtype));
    auto raw = r.bytes(t.value.numel() * t.value.element_size());
    std::memcpy(t.value.data_ptr(), raw.data(), raw.size());
    result.push_back(std::move(t));
  }
  if (!r.done()) throw std::runtime_error("tensor archive: trailing bytes in " + path.string());
  return result;
}

const torch::Tensor& find_tensor(const std::vector<NamedTensor>& tensors, std::string_view name) {
  for (const auto& t : tensors)
    if (t.name == name) return t.value;
  throw std::out_of_range("tensor archive: no tensor named '" + std::string(name) + "'");
}

void atomic_write(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

namespace {

struct DigestDeleter {
  void operator()(EVP_MD_CTX* c) const { EVP_MD_CTX_free(c); }
};

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new()) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1)
      throw std::runtime_error("sha256: init failed");
  }
  void update(const void* data, std::size_t n) {
    if (EVP_DigestUpdate(ctx_.get(), data, n) != 1) throw std::runtime_error("sha256: update failed");
  }
  std::string hex() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx_.get(), md, &len);
    static constexpr char kDigits[] = "0123456789abcdef";
    std::string s;
    for (unsigned int i = 0; i < len; ++i) {
      s += kDigits[md[i] >> 4];
      s += kDigits[md[i] & 0xf];
    }
    return s;
  }

 private:
  std::unique_ptr<EVP_MD_CTX, DigestDeleter> ctx_;
};

}  // namespace

std::string sha256_hex(std::string_view bytes) {
  Sha256 h;
  h.update(bytes.data(), bytes.size());
  return h.hex();
}

std::string tensor_hash(const std::vector<torch::Tensor>& tensors) {
  Sha256 h;
  for (const auto& t : tensors) {
    auto v = t.detach().to(torch::kCPU).contiguous();
    auto code = dtype_code(v.scalar_type());
    h.update(&code, 1);
    for (auto d : v.sizes()) h.update(&d, sizeof(d));
    h.update(v.data_ptr(), v.numel() * v.element_size());
  }
  return h.hex();
}

std::string file_sha256(const std::filesystem::path& path) { return sha256_hex(read_file(path)); }

}  // namespace fedad::io
