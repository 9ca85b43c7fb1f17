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
#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>
#include <vector>

#include "test_framework.hpp"
#include <torch/torch.h>

#include "fedad/io.hpp"
#include "fedad/partition.hpp"
#include "helpers.hpp"

using namespace fedad;
using fedad::testing::TempDir;

namespace {

std::vector<std::int64_t> cyclic_labels(std::int64_t n, std::int64_t classes) {
  std::vector<std::int64_t> y(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) y[static_cast<std::size_t>(i)] = i % classes;
  return y;
}

void check_disjoint_cover(const PartitionSpec& p, std::int64_t n) {
  std::vector<int> seen(static_cast<std::size_t>(n), 0);
  for (const auto& a : p.assignments) {
    CHECK(std::is_sorted(a.begin(), a.end()));
    for (auto i : a) ++seen[static_cast<std::size_t>(i)];
  }
  CHECK(std::all_of(seen.begin(), seen.end(), [](int s) { return s == 1; }));
}

}  // namespace

TEST_SUITE("partition") {
  TEST_CASE("dirichlet partition covers every sample once and matches its class counts") {
    auto y = cyclic_labels(1000, 7);
    auto p = dirichlet_partition(y, 4, 0.5, 3);
    CHECK(p.num_nodes == 4);
    check_disjoint_cover(p, 1000);
    for (std::size_t k = 0; k < 4; ++k) {
      std::vector<std::int64_t> counts(7, 0);
      for (auto i : p.assignments[k]) ++counts[static_cast<std::size_t>(y[static_cast<std::size_t>(i)])];
      CHECK(counts == p.class_counts[k]);
    }
    auto again = dirichlet_partition(y, 4, 0.5, 3);
    CHECK(again.assignments == p.assignments);
  }

  TEST_CASE("every node receives at least one sample") {
    auto y = cyclic_labels(30, 3);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      auto p = dirichlet_partition(y, 12, 0.05, seed);
      for (auto n : p.node_sizes()) CHECK(n >= 1);
      check_disjoint_cover(p, 30);
    }
  }

  TEST_CASE("mean per-node class proportions approach 1/K") {
    const std::int64_t K = 4, C = 10;
    auto y = cyclic_labels(10000, C);
    std::vector<double> mean(static_cast<std::size_t>(K * C), 0.0);
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      auto p = dirichlet_partition(y, K, 100.0, seed);
      for (std::int64_t k = 0; k < K; ++k)
        for (std::int64_t c = 0; c < C; ++c)
          mean[static_cast<std::size_t>(k * C + c)] += p.class_counts[k][c] / 1000.0 / 100.0;
    }
    double mad = 0.0;
    for (auto m : mean) mad += std::abs(m - 1.0 / K);
    CHECK(mad / mean.size() < 0.02);
  }

  TEST_CASE("smaller alpha gives more skewed nodes") {
    auto y = cyclic_labels(10000, 10);
    double skew_low = 0.0, skew_high = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      skew_low += non_iid_degree(dirichlet_partition(y, 5, 0.1, seed));
      skew_high += non_iid_degree(dirichlet_partition(y, 5, 1.0, seed));
    }
    CHECK(skew_low > skew_high);
  }

  TEST_CASE("partition rejects bad arguments and round-trips through json") {
    auto y = cyclic_labels(20, 2);
    CHECK_THROWS_AS(dirichlet_partition(y, 0, 1.0, 0), std::invalid_argument);
    CHECK_THROWS_AS(dirichlet_partition(y, 2, 0.0, 0), std::invalid_argument);
    auto p = dirichlet_partition(y, 3, 1.0, 1);
    nlohmann::json j = p;
    auto back = j.get<PartitionSpec>();
    CHECK(back.assignments == p.assignments);
    CHECK(back.class_counts == p.class_counts);
  }

  TEST_CASE("fraction partition follows the requested sizes") {
    std::vector<double> f{0.7, 0.2, 0.1};
    auto p = fraction_partition(100, f, 4);
    CHECK(p.node_sizes() == std::vector<std::int64_t>{70, 20, 10});
    check_disjoint_cover(p, 100);
    CHECK_THROWS_AS(fraction_partition(2, f, 0), std::invalid_argument);
  }

  TEST_CASE("holdout keeps a tenth for validation") {
    std::vector<std::int64_t> idx(100);
    std::iota(idx.begin(), idx.end(), 0);
    auto s = holdout_validation(idx, 0.1, 9);
    CHECK(s.train.size() == 90);
    CHECK(s.validation.size() == 10);
    std::set<std::int64_t> all(s.train.begin(), s.train.end());
    all.insert(s.validation.begin(), s.validation.end());
    CHECK(all.size() == 100);
    CHECK_THROWS_AS(holdout_validation(idx, 0.0, 0), std::invalid_argument);
    CHECK_THROWS_AS(holdout_validation(std::vector<std::int64_t>{1, 2, 3}, 0.1, 0), std::invalid_argument);
  }

  TEST_CASE("multi-label reduction picks one of the positive labels") {
    std::vector<std::vector<std::int64_t>> sets{{1, 4}, {2}, {0, 3, 5}};
    auto y = reduce_multilabel(sets, 2);
    REQUIRE(y.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) CHECK(std::count(sets[i].begin(), sets[i].end(), y[i]) == 1);
    CHECK(reduce_multilabel(sets, 2) == y);
  }

  TEST_CASE("synthetic classification data is deterministic and labelled") {
    SyntheticConfig c;
    c.num_samples = 50;
    c.seed = 4;
    auto a = generate_synthetic(c), b = generate_synthetic(c);
    CHECK(a.inputs.sizes() == torch::IntArrayRef{50, 1, 16, 16});
    CHECK(torch::equal(a.inputs, b.inputs));
    CHECK(a.labels == b.labels);
    CHECK(a.checksum == b.checksum);
    c.seed = 5;
    CHECK(generate_synthetic(c).checksum != a.checksum);
  }

  TEST_CASE("synthetic reconstruction pairs corrupted inputs with clean targets") {
    SyntheticConfig c;
    c.task = Task::kReconstruction;
    c.num_samples = 6;
    auto d = generate_synthetic(c);
    CHECK(d.inputs.sizes() == d.targets.sizes());
    CHECK_FALSE(torch::allclose(d.inputs, d.targets));
    auto mask = undersampling_mask(16, 16, 3.0, 0.25, 7);
    CHECK(mask.index({torch::indexing::Slice(), 0}).all().item<bool>());
    auto full = undersample(d.targets, torch::ones_like(mask));
    CHECK(torch::allclose(full, d.targets.abs(), 1e-4, 1e-5));
  }

  TEST_CASE("image-dir and archive loaders") {
    TempDir dir("data");
    for (int i = 0; i < 2; ++i) {
      std::ofstream f(dir.path() / ("img" + std::to_string(i) + ".pgm"), std::ios::binary);
      f << "P5\n2 2\n255\n";
      const unsigned char px[4] = {0, 255, static_cast<unsigned char>(i * 100), 51};
      f.write(reinterpret_cast<const char*>(px), 4);
    }
    {
      std::ofstream f(dir.path() / "labels.csv");
      f << "filename,label\nimg0.pgm,1\nimg1.pgm,0\n";
    }
    auto d = load_dataset(dir.path(), "image-dir");
    CHECK(d.inputs.sizes() == torch::IntArrayRef{2, 1, 2, 2});
    CHECK(d.labels == std::vector<std::int64_t>{1, 0});
    CHECK(d.inputs[0][0][0][1].item<float>() == doctest::Approx(1.0));
    CHECK(d.inputs[0][0][1][1].item<float>() == doctest::Approx(0.2));

    io::write_tensor_archive(dir.path() / "set.fadt",
                             {{"images", d.inputs}, {"labels", torch::tensor({1, 0}, torch::kInt64)}});
    auto a = load_dataset(dir.path() / "set.fadt", "archive");
    CHECK(torch::equal(a.inputs, d.inputs));
    CHECK(a.labels == d.labels);
    CHECK_THROWS(load_dataset(dir.path() / "missing", "image-dir"));
    CHECK_THROWS(load_dataset(dir.path(), "parquet"));
  }

  TEST_CASE("public data ids track contents and truncation") {
    auto s = torch::rand({10, 1, 4, 4});
    auto p = make_public_dataset(s, "image");
    CHECK(make_public_dataset(s.clone(), "image").id == p.id);
    auto t = truncate_public(p, 4);
    CHECK(t.size() == 4);
    CHECK(t.id != p.id);
    CHECK(torch::equal(t.samples, s.narrow(0, 0, 4)));
  }
}
