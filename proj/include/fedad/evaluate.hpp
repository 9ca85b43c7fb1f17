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
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "fedad/models.hpp"
#include "fedad/partition.hpp"

namespace fedad {

// Per-class values of the task's primary metric (AUC, Dice or SSIM) with
// classes that could not be scored left empty, plus scalar extras such as
// accuracy or PSNR.
struct MetricReport {
  Task task = Task::kClassification;
  std::string metric;
  std::vector<std::optional<double>> per_class;
  double mean = 0.0;  // over the present per-class values
  std::map<std::string, double> extras;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::vector<std::string> warnings;
};

void to_json(nlohmann::json& j, const MetricReport& r);
void from_json(const nlohmann::json& j, MetricReport& r);

// Mean of the present values; 0 when none are present.
double mean_of_present(const std::vector<std::optional<double>>& values);

// Rank-based AUC with midrank ties; empty when a class has no positive or no
// negative sample.
std::optional<double> binary_auc(std::span<const double> scores, std::span<const std::int64_t> labels);

struct AucResult {
  std::vector<std::optional<double>> per_class;
  double mean = 0.0;
  std::vector<std::string> warnings;
};

// scores and binary labels are N x C.
AucResult auc(const torch::Tensor& scores, const torch::Tensor& labels);
// One-vs-rest AUC for single-label ground truth.
AucResult auc(const torch::Tensor& scores, std::span<const std::int64_t> labels, std::int64_t num_classes);

// 2|P & T| / (|P| + |T|); 1 when both masks are empty.
double dice(const torch::Tensor& prediction, const torch::Tensor& truth);

// Gaussian-window SSIM (11x11, sigma 1.5, K1 0.01, K2 0.03) over the valid
// region of two H x W images with the given dynamic range.
double ssim(const torch::Tensor& image, const torch::Tensor& reference, double data_range = 1.0);

constexpr double kPsnrCap = 99.0;
// Capped at kPsnrCap for identical images.
double psnr(const torch::Tensor& image, const torch::Tensor& reference, double data_range = 1.0);

struct GeneralizationBound {
  double empirical_risk = 0.0;
  double divergence_term = 0.0;  // sum_k w_k * d_k / 2
  double complexity_term = 0.0;  // 4 sqrt((2 d log(2N) + log(2/delta)) / N)
  double lambda = 0.0;
  double total() const { return empirical_risk + divergence_term + complexity_term + lambda; }
};

// `weighted_risk` is the risk of the weighted hypothesis on the private
// domains; `divergences` are per-node H-delta-H divergence estimates.
GeneralizationBound weighted_generalization_bound(double weighted_risk, std::span<const double> divergences,
                                                  std::span<const double> weights, std::int64_t vc_dimension,
                                                  std::int64_t sample_size, double delta, double lambda = 0.0);

// Proxy A-distance 2(1 - 2 err) of a logistic-regression domain classifier
// trained on a random half of the pooled samples and scored on the other
// half; clipped to [0, 2]. Features are n x D.
double proxy_divergence(const torch::Tensor& features_a, const torch::Tensor& features_b, std::uint64_t seed = 0);

// --- model-level evaluation -------------------------------------------------

torch::Tensor predict(Network& net, const torch::Tensor& inputs, std::int64_t batch_size = 256);

MetricReport score_classification(const torch::Tensor& logits, const Dataset& data);
MetricReport score_segmentation(const torch::Tensor& logits, const Dataset& data);
MetricReport score_reconstruction(const torch::Tensor& images, const Dataset& data, double data_range = 1.0);
// Scores precomputed outputs, e.g. an ensemble's.
MetricReport score_outputs(const torch::Tensor& outputs, const Dataset& data, Task task);

MetricReport evaluate_classifier(Network& net, const Dataset& data);
MetricReport evaluate_segmentation(Network& net, const Dataset& data);
MetricReport evaluate_reconstruction(Network& net, const Dataset& data, double data_range = 1.0);
MetricReport evaluate_model(Network& net, const Dataset& data, Task task);

// Headline scalar used for comparisons: accuracy, mean Dice or mean SSIM.
double headline_score(const MetricReport& r);

// CSV rows for method comparison tables.
struct ComparisonRow {
  std::string method;
  std::string train_domains;
  std::string test_domain;
  std::map<std::string, double> metrics;
};
std::string comparison_csv(const std::vector<ComparisonRow>& rows);

}  // namespace fedad
