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
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "fedad/attention.hpp"

namespace fedad {

enum class WeightBasis { kClassCounts, kNodeSizes, kUniform };

// Per-node, optionally per-class, ensemble weights. `values` is K x C for
// class-count weights and K x 1 otherwise; every column sums to one.
struct ImportanceWeights {
  WeightBasis basis = WeightBasis::kUniform;
  std::vector<std::vector<double>> values;
  // Classes no node has seen; their column fell back to 1/K.
  std::vector<std::int64_t> zero_count_classes;

  std::int64_t num_nodes() const { return static_cast<std::int64_t>(values.size()); }
  bool class_specific() const { return basis == WeightBasis::kClassCounts; }
  double at(std::int64_t node, std::int64_t cls) const;
};

void to_json(nlohmann::json& j, const ImportanceWeights& w);
void from_json(const nlohmann::json& j, ImportanceWeights& w);

// Columnwise normalisation of N[k][c].
ImportanceWeights class_importance_weights(const std::vector<std::vector<std::int64_t>>& class_counts);
// |D_k| / sum |D_k|.
ImportanceWeights size_weights(const std::vector<std::int64_t>& sizes);
ImportanceWeights uniform_weights(std::int64_t num_nodes);

// sum_k w_k * z_k. Class-specific weights scale the class axis, which is
// dim 1 for batched predictions (N x C or N x C x H x W) and dim 0 for a
// single C vector.
torch::Tensor weighted_ensemble(const std::vector<torch::Tensor>& predictions, const ImportanceWeights& weights);

// softmax(z / tau) over the last axis.
torch::Tensor softened_probs(const torch::Tensor& logits, double tau);

// sum_c p_t log(p_t / p_s) with p = softened_probs(., tau), over the last
// axis; one value per leading index.
torch::Tensor kl_distill_loss(const torch::Tensor& teacher, const torch::Tensor& student, double tau);

// Euclidean (Frobenius) norm of (student - teacher) over all axes after
// `batch_dims` leading ones.
torch::Tensor l2_logit_loss(const torch::Tensor& teacher, const torch::Tensor& student, std::int64_t batch_dims = 0);

// Ensemble targets for one public sample.
struct EnsembleBundle {
  std::int64_t sample_id = 0;
  torch::Tensor z_hat;            // C logits, C x H x W logits or 1 x H x W image
  std::vector<BoundPair> bounds;  // one per class, or a single pair
};

// Ensemble targets for a whole public dataset, stored column-wise. Row i
// belongs to public sample i.
struct BundleSet {
  std::string public_id;
  AttentionKind kind = AttentionKind::kGradCam;
  torch::Tensor z_hat;  // N x ...
  torch::Tensor lower;  // N x C x h x w (per class) or N x HW x HW
  torch::Tensor upper;

  std::int64_t size() const { return z_hat.defined() ? z_hat.size(0) : 0; }
  bool per_class() const { return kind != AttentionKind::kNonlocalRow; }
  EnsembleBundle at(std::int64_t sample) const;
  BundleSet select(const std::vector<std::int64_t>& samples) const;
};

}  // namespace fedad
