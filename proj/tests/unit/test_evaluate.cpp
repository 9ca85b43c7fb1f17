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
#include <cmath>
#include <random>
#include <vector>

#include "test_framework.hpp"
#include <torch/torch.h>

#include "fedad/evaluate.hpp"

using namespace fedad;

TEST_SUITE("evaluate") {
  TEST_CASE("binary auc: separation, reversal, ties and missing classes") {
    std::vector<double> s{0.1, 0.4, 0.35, 0.8};
    std::vector<std::int64_t> y{0, 0, 1, 1};
    // Pairs (pos, neg): (0.35>0.1), (0.35<0.4), (0.8>0.1), (0.8>0.4) -> 3/4.
    CHECK(*binary_auc(s, y) == doctest::Approx(0.75));
    std::vector<double> rev{-0.1, -0.4, -0.35, -0.8};
    CHECK(*binary_auc(rev, y) == doctest::Approx(0.25));
    std::vector<double> cubed;
    for (auto v : s) cubed.push_back(v * v * v + 2);
    CHECK(*binary_auc(cubed, y) == *binary_auc(s, y));
    std::vector<double> tied{0.5, 0.5, 0.5, 0.9};
    CHECK(*binary_auc(tied, y) == doctest::Approx((0.5 + 0.5 + 1 + 1) / 4));
    std::vector<std::int64_t> all_neg{0, 0, 0, 0};
    CHECK_FALSE(binary_auc(s, all_neg).has_value());
    std::vector<double> sep{0.1, 0.2, 0.3, 0.9};
    CHECK(*binary_auc(sep, y) == 1.0);
  }

  TEST_CASE("random scores give auc near one half") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0, 1);
    std::vector<double> s(10000);
    std::vector<std::int64_t> y(10000);
    for (std::size_t i = 0; i < s.size(); ++i) {
      s[i] = u(rng);
      y[i] = static_cast<std::int64_t>(i % 2);
    }
    CHECK(std::abs(*binary_auc(s, y) - 0.5) < 0.02);
  }

  TEST_CASE("multi-class auc excludes classes without positives") {
    auto scores = torch::tensor({{0.9, 0.1, 0.0}, {0.2, 0.8, 0.0}, {0.7, 0.3, 0.0}}, torch::kFloat64);
    std::vector<std::int64_t> labels{0, 1, 0};
    auto r = auc(scores, labels, 3);
    REQUIRE(r.per_class.size() == 3);
    CHECK(*r.per_class[0] == 1.0);
    CHECK(*r.per_class[1] == 1.0);
    CHECK_FALSE(r.per_class[2].has_value());
    CHECK(r.mean == 1.0);
    CHECK_FALSE(r.warnings.empty());
    auto perm = torch::tensor({2, 0, 1});
    std::vector<std::int64_t> permuted{0, 0, 1};
    CHECK(auc(scores.index_select(0, perm), permuted, 3).mean == r.mean);
  }

  TEST_CASE("dice") {
    auto a = torch::tensor({1, 1, 0, 0}, torch::kBool), b = torch::tensor({1, 0, 1, 0}, torch::kBool);
    CHECK(dice(a, a) == 1.0);
    CHECK(dice(a, torch::tensor({0, 0, 1, 1}, torch::kBool)) == 0.0);
    CHECK(dice(a, b) == doctest::Approx(0.5));
    CHECK(dice(torch::zeros({4}, torch::kBool), torch::zeros({4}, torch::kBool)) == 1.0);
    CHECK_THROWS_AS(dice(a, torch::zeros({3}, torch::kBool)), std::invalid_argument);
  }

  TEST_CASE("psnr against a known noise level") {
    torch::manual_seed(2);
    auto ref = 0.25 + 0.5 * torch::rand({256, 256}, torch::kFloat64);
    const double a = 0.05;
    auto noisy = ref + (torch::rand({256, 256}, torch::kFloat64) * 2 - 1) * a;
    const double sigma = a / std::sqrt(3.0);
    CHECK(std::abs(psnr(noisy, ref) - 20 * std::log10(1.0 / sigma)) < 0.1);
    CHECK(psnr(ref, ref) == kPsnrCap);
  }

  TEST_CASE("ssim identity and luminance shift") {
    auto ref = torch::rand({24, 24}, torch::kFloat64);
    CHECK(ssim(ref, ref) == doctest::Approx(1.0));
    const double mu = 0.4, d = 0.1, c1 = 0.01 * 0.01;
    auto flat = torch::full({24, 24}, mu, torch::kFloat64);
    const double want = (2 * mu * (mu + d) + c1) / (mu * mu + (mu + d) * (mu + d) + c1);
    CHECK(ssim(flat + d, flat) == doctest::Approx(want).epsilon(1e-9));
    CHECK(ssim(flat + 0.2, flat) < ssim(flat + d, flat));
    CHECK_THROWS_AS(ssim(ref, torch::rand({24, 23}, torch::kFloat64)), std::invalid_argument);
  }

  TEST_CASE("weighted generalization bound arithmetic") {
    std::vector<double> zero{0.0, 0.0}, w{0.5, 0.5};
    auto b = weighted_generalization_bound(0.1, zero, w, 1, 2, 0.5, 0.0);
    CHECK(b.total() == doctest::Approx(0.1 + 4 * std::sqrt((2 * std::log(4.0) + std::log(4.0)) / 2)).epsilon(1e-12));
    std::vector<double> more{0.3, 0.0};
    CHECK(weighted_generalization_bound(0.1, more, w, 1, 2, 0.5).total() > b.total());
    CHECK(weighted_generalization_bound(0.0, zero, w, 1, 1000000000, 0.5).complexity_term < 1e-3);
    CHECK_THROWS_AS(weighted_generalization_bound(0.1, zero, w, 1, 2, 1.5), std::invalid_argument);
    CHECK_THROWS_AS(weighted_generalization_bound(0.1, zero, w, 1, 0, 0.5), std::invalid_argument);

    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u(0.01, 0.99);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<double> div{2 * u(rng), 2 * u(rng), 2 * u(rng)};
      double w0 = u(rng), w1 = u(rng), w2 = u(rng), s = w0 + w1 + w2;
      std::vector<double> ws{w0 / s, w1 / s, w2 / s};
      double eps = u(rng), delta = u(rng), lambda = u(rng);
      std::int64_t d = 1 + trial % 7, n = 10 + 37 * trial;
      double want = eps + (ws[0] * div[0] + ws[1] * div[1] + ws[2] * div[2]) / 2 +
                    4 * std::sqrt((2.0 * d * std::log(2.0 * n) + std::log(2.0 / delta)) / n) + lambda;
      CHECK(std::abs(weighted_generalization_bound(eps, div, ws, d, n, delta, lambda).total() - want) < 1e-12);
    }
  }

  TEST_CASE("proxy divergence of identical and separated samples") {
    torch::manual_seed(6);
    auto a = torch::randn({2000, 4}, torch::kFloat64), b = torch::randn({2000, 4}, torch::kFloat64);
    CHECK(std::abs(proxy_divergence(a, b)) < 0.1);
    auto far = torch::randn({2000, 4}, torch::kFloat64) + 8.0;
    auto d = proxy_divergence(a, far);
    CHECK(d > 1.8);
    CHECK(std::abs(proxy_divergence(far, a) - d) < 0.1);
    CHECK_THROWS(proxy_divergence(a.narrow(0, 0, 1), b.narrow(0, 0, 1)));
  }

  TEST_CASE("classification scores and report serialisation") {
    Dataset d;
    d.num_classes = 3;
    d.labels = {0, 1, 2, 1};
    d.inputs = torch::zeros({4, 1, 2, 2});
    auto logits = torch::tensor({{3.0, 0.0, 0.0}, {0.0, 2.0, 0.0}, {1.0, 0.0, 0.5}, {0.0, 1.0, 0.0}});
    auto r = score_classification(logits, d);
    CHECK(r.extras.at("accuracy") == doctest::Approx(0.75));
    CHECK(headline_score(r) == doctest::Approx(0.75));
    CHECK(r.mean == doctest::Approx(mean_of_present(r.per_class)).epsilon(1e-9));
    nlohmann::json j = r;
    auto back = j.get<MetricReport>();
    CHECK((back.per_class == r.per_class));
    CHECK(back.extras == r.extras);
    auto csv = comparison_csv({{"FedAD", "all", "test", {{"auc", 0.5}}}});
    CHECK(csv == "method,train-domains,test-domain,auc\nFedAD,all,test,0.5\n");
  }
}
