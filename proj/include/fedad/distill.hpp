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
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "fedad/attention.hpp"
#include "fedad/ensemble.hpp"
#include "fedad/models.hpp"
#include "fedad/partition.hpp"
#include "fedad/training.hpp"

namespace fedad {

struct LossToggles {
  bool use_lower = true;
  bool use_upper = true;
  bool use_kl = false;  // KL on softened outputs instead of the l2 logit loss
};

// Per-term multipliers; the defaults sum the terms unweighted.
struct LossCoefficients {
  double w = 1.0;
  double low = 1.0;
  double up = 1.0;
};

struct DistillConfig {
  Task task = Task::kClassification;
  double tau = 1.0;
  OptimizerSpec optimizer;
  LossToggles toggles;
  LossCoefficients coefficients;
  SoftMaskParams mask;
  BoundScaling scaling = BoundScaling::kVerbatim;
  bool one_shot = true;
  std::int64_t rounds = 1;
  std::string attention_layer;  // empty: the student's default layer
  std::uint64_t seed = 0;

  void validate() const;
  // SGD + cosine 1e-2 -> 1e-3 for classification and segmentation, constant
  // RMSprop 1e-4 for reconstruction.
  static DistillConfig defaults_for(Task task);
};

void to_json(nlohmann::json& j, const DistillConfig& c);
void from_json(const nlohmann::json& j, DistillConfig& c);

struct LossRecord {
  std::int64_t step = 0;
  double total = 0.0;
  double w = 0.0;
  double low = 0.0;
  double up = 0.0;
};

void to_json(nlohmann::json& j, const LossRecord& r);
void from_json(const nlohmann::json& j, LossRecord& r);

struct StudentState {
  NetworkPtr model;
  std::int64_t step = 0;
  std::int64_t epoch = 0;
  std::vector<LossRecord> history;  // one entry per optimizer step
};

// Batch-mean loss terms (float64 scalars). `total` already includes the
// coefficients, so total == w + low + up.
struct LossBreakdown {
  torch::Tensor total;
  torch::Tensor w;
  torch::Tensor low;
  torch::Tensor up;
  std::int64_t degenerate_lower = 0;
  std::int64_t degenerate_upper = 0;

  LossRecord record(std::int64_t step) const;
};

// Student prediction plus the attention the bound terms compare against:
// normalised Grad-CAM maps (classification), softened per-pixel class
// probabilities (segmentation) or the normalised non-local matrix
// (reconstruction). `attention` is undefined when not requested.
struct StudentOutputs {
  torch::Tensor prediction;
  torch::Tensor attention;
};

StudentOutputs student_forward(Network& student, const torch::Tensor& inputs, const DistillConfig& config,
                               bool with_attention, bool create_graph = true);

// (1/C) sum_c [L_w(z~c, z^c) + L_low(A~c, Ic) + L_up(A~c, Uc)], averaged over
// the batch. Also used for segmentation with per-pixel logits.
LossBreakdown classification_loss(const StudentOutputs& student, const BundleSet& targets, const DistillConfig& config);
// L_w(z~, z^) + L_low(A~, I) + L_up(A~, U), averaged over the batch.
LossBreakdown reconstruction_loss(const StudentOutputs& student, const BundleSet& targets, const DistillConfig& config);
LossBreakdown distill_loss(const StudentOutputs& student, const BundleSet& targets, const DistillConfig& config);

// Where the ensemble targets for a batch come from.
class BundleSource {
 public:
  virtual ~BundleSource() = default;
  virtual const std::string& public_id() const = 0;
  virtual std::int64_t size() const = 0;
  virtual BundleSet fetch(const std::vector<std::int64_t>& samples, const torch::Tensor& inputs) = 0;
};

// One-shot mode: targets computed once, reused every step.
class PrecomputedBundles : public BundleSource {
 public:
  explicit PrecomputedBundles(BundleSet bundles) : bundles_(std::move(bundles)) {}
  const std::string& public_id() const override { return bundles_.public_id; }
  std::int64_t size() const override { return bundles_.size(); }
  BundleSet fetch(const std::vector<std::int64_t>& samples, const torch::Tensor&) override {
    return bundles_.select(samples);
  }

 private:
  BundleSet bundles_;
};

NetworkPtr build_student(const ArchitectureSpec& spec);

// One pass over the public data, one optimizer step per batch. Batch order is
// drawn from (config.seed, epoch).
void distill_epoch(StudentState& state, const PublicDataset& data, BundleSource& bundles,
                   const DistillConfig& config, Trainer& trainer);

// All configured epochs.
StudentState distill(NetworkPtr student, const PublicDataset& data, BundleSource& bundles,
                     const DistillConfig& config);

std::string loss_history_csv(const std::vector<LossRecord>& history);
nlohmann::json training_record(const StudentState& state, const std::string& config_hash);

}  // namespace fedad
