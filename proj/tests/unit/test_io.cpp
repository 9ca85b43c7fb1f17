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
#include <filesystem>
#include <fstream>

#include "test_framework.hpp"
#include <torch/torch.h>

#include "fedad/io.hpp"
#include "helpers.hpp"

using namespace fedad;
using fedad::testing::TempDir;

TEST_SUITE("io") {
  TEST_CASE("tensor archives round-trip every supported dtype") {
    TempDir dir("io");
    std::vector<io::NamedTensor> in{{"f32", torch::rand({3, 4})},
                                    {"f16", torch::rand({2, 2}).to(torch::kFloat16)},
                                    {"f64", torch::rand({5}, torch::kFloat64)},
                                    {"i64", torch::arange(6, torch::kInt64).view({2, 3})},
                                    {"scalar", torch::tensor(2.5)}};
    auto stats = io::write_tensor_archive(dir.path() / "a.fadt", in);
    CHECK(stats.payload_bytes == 12 * 4 + 4 * 2 + 5 * 8 + 6 * 8 + 4);
    CHECK(stats.total() == std::filesystem::file_size(dir.path() / "a.fadt"));
    CHECK(stats.total() == io::archive_stats(in).total());
    auto out = io::read_tensor_archive(dir.path() / "a.fadt");
    REQUIRE(out.size() == in.size());
    for (std::size_t i = 0; i < in.size(); ++i) {
      CHECK(out[i].name == in[i].name);
      CHECK(out[i].value.dtype() == in[i].value.dtype());
      CHECK(torch::equal(out[i].value, in[i].value));
    }
    CHECK_THROWS_AS(io::find_tensor(out, "absent"), std::out_of_range);
  }

  TEST_CASE("corrupt archives are rejected") {
    TempDir dir("io");
    io::atomic_write(dir.path() / "bad.fadt", "not an archive");
    CHECK_THROWS(io::read_tensor_archive(dir.path() / "bad.fadt"));
    io::write_tensor_archive(dir.path() / "t.fadt", {{"x", torch::rand({64})}});
    auto bytes = io::read_file(dir.path() / "t.fadt");
    io::atomic_write(dir.path() / "t.fadt", bytes.substr(0, bytes.size() / 2));
    CHECK_THROWS(io::read_tensor_archive(dir.path() / "t.fadt"));
    CHECK_THROWS(io::read_tensor_archive(dir.path() / "missing.fadt"));
  }

  TEST_CASE("atomic write leaves no temporary files behind") {
    TempDir dir("io");
    io::atomic_write(dir.path() / "f.txt", "one");
    io::atomic_write(dir.path() / "f.txt", "two");
    CHECK(io::read_file(dir.path() / "f.txt") == "two");
    int files = 0;
    for ([[maybe_unused]] const auto& e : std::filesystem::directory_iterator(dir.path())) ++files;
    CHECK(files == 1);
  }

  TEST_CASE("sha-256 known answers and tensor hashes") {
    CHECK(io::sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    CHECK(io::sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    auto a = torch::arange(4, torch::kFloat32);
    CHECK(io::tensor_hash({a}) == io::tensor_hash({a.clone()}));
    CHECK(io::tensor_hash({a}) != io::tensor_hash({a.view({2, 2})}));
    CHECK(io::tensor_hash({a}) != io::tensor_hash({a.to(torch::kFloat64)}));
  }
}
