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
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace fedad {

class Network;

enum class AttentionKind { kGradCam, kSegmentationProb, kNonlocalRow };

std::string to_string(AttentionKind kind);
AttentionKind attention_kind_from_string(const std::string& name);

struct AttentionMap {
  torch::Tensor values;  // H x W
  AttentionKind kind = AttentionKind::kGradCam;
  std::optional<std::int64_t> class_id;
  bool normalized = false;
  bool zero_map = false;  // normalisation found an all-zero map
};

// Consensus (elementwise min) and diversity (elementwise max) of teacher maps.
struct BoundPair {
  AttentionMap lower;
  AttentionMap upper;
};

struct SoftMaskParams {
  double rho = 8.0;  // sharpness
  double b = 0.5;    // threshold

  void validate() const;
};

// How the bound losses are scaled. kVerbatim keeps the 1/(HW) prefactor,
// kNormalized drops it so the loss magnitude does not depend on resolution.
enum class BoundScaling { kVerbatim, kNormalized };

struct BoundLossOptions {
  SoftMaskParams mask;
  BoundScaling scaling = BoundScaling::kVerbatim;
};

// Per-map loss values and the maps whose denominator vanished (loss 0 there).
struct BoundLoss {
  torch::Tensor loss;        // shape of the leading (batch) dims
  torch::Tensor degenerate;  // bool, same shape
};

struct LossValue {
  double value = 0.0;
  bool degenerate = false;
};

// --- Grad-CAM ---------------------------------------------------------------

struct GradCamResult {
  torch::Tensor logits;    // N x C
  torch::Tensor weights;   // N x C x J: spatial mean of d z^c / d F_j
  torch::Tensor maps;      // N x C x h x w, ReLU(sum_j weights * F_j), unnormalised
};

// Grad-CAM for every class at once. Samples are treated independently, which
// holds for the registered networks (no cross-sample layers). With
// create_graph the maps stay differentiable w.r.t. the network parameters.
GradCamResult gradcam_all(Network& model, const torch::Tensor& input, const std::string& layer,
                          bool create_graph = false);

// Single sample (1 x C x H x W input), single class.
AttentionMap gradcam(Network& model, const torch::Tensor& input, std::int64_t class_id,
                     const std::string& layer);

// --- map utilities ----------------------------------------------------------

AttentionMap normalize_attention(const AttentionMap& map);
// Divides every trailing H x W map by its maximum; all-zero maps pass through.
// Differentiable.
torch::Tensor normalize_maps(const torch::Tensor& maps);

// Class-`class_id` plane of softmax(logits / tau) over the class axis.
// logits: C x H x W.
AttentionMap segmentation_attention(const torch::Tensor& logits, std::int64_t class_id, double tau);
// N x C x H x W -> N x C x H x W probabilities.
torch::Tensor segmentation_attention_maps(const torch::Tensor& logits, double tau);

// --- non-local self-attention -------------------------------------------------

struct NonlocalResult {
  torch::Tensor features;   // enhanced, same shape as the input
  torch::Tensor attention;  // (N x) HW x HW, columns sum to 1
};

// F: J x H x W or N x J x H x W. S = F^T F over the flattened spatial axis,
// softmax along the first spatial axis.
torch::Tensor nonlocal_attention(const torch::Tensor& features);
// F + reshape((A F^T)^T).
torch::Tensor nonlocal_enhance(const torch::Tensor& features);
NonlocalResult nonlocal_block(const torch::Tensor& features);

// --- attention bounds -------------------------------------------------------

BoundPair attention_bounds(const std::vector<AttentionMap>& maps);
// Stacked K x ... tensor -> (min over K, max over K).
std::pair<torch::Tensor, torch::Tensor> bounds_of(const torch::Tensor& stacked);

torch::Tensor soft_mask(const torch::Tensor& maps, const SoftMaskParams& params);
AttentionMap soft_mask(const AttentionMap& map, const SoftMaskParams& params);

// -(1/HW) * sum(I * T(student)) / sum(I) over the trailing two dims.
BoundLoss lower_bound_loss(const torch::Tensor& student, const torch::Tensor& consensus,
                           const BoundLossOptions& options);
// -(1/HW) * sum(student * T(U)) / sum(student) over the trailing two dims.
BoundLoss upper_bound_loss(const torch::Tensor& student, const torch::Tensor& diversity,
                           const BoundLossOptions& options);

LossValue lower_bound_loss(const AttentionMap& student, const AttentionMap& consensus,
                           const SoftMaskParams& params, BoundScaling scaling = BoundScaling::kVerbatim);
LossValue upper_bound_loss(const AttentionMap& student, const AttentionMap& diversity,
                           const SoftMaskParams& params, BoundScaling scaling = BoundScaling::kVerbatim);

// JSON sidecar for a serialized map: {kind, class_id, shape, normalized, flags}.
nlohmann::json attention_sidecar(const AttentionMap& map);
// Writes `<stem>.fadt` (float32 values) and `<stem>.json` (sidecar).
void save_attention_map(const std::string& stem, const AttentionMap& map);
AttentionMap load_attention_map(const std::string& stem);

}  // namespace fedad
