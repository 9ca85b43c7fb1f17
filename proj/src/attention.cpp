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
#include "fedad/attention.hpp"

#include <cmath>
#include <stdexcept>

#include "fedad/io.hpp"
#include "fedad/models.hpp"

namespace fedad {

std::string to_string(AttentionKind kind) {
  switch (kind) {
    case AttentionKind::kGradCam: return "gradcam";
    case AttentionKind::kSegmentationProb: return "segmentation-prob";
    case AttentionKind::kNonlocalRow: return "nonlocal-row";
  }
  return "unknown";
}

AttentionKind attention_kind_from_string(const std::string& name) {
  if (name == "gradcam") return AttentionKind::kGradCam;
  if (name == "segmentation-prob") return AttentionKind::kSegmentationProb;
  if (name == "nonlocal-row") return AttentionKind::kNonlocalRow;
  throw std::invalid_argument("unknown attention kind '" + name + "'");
}

void SoftMaskParams::validate() const {
  if (!(rho > 0.0) || !std::isfinite(rho)) throw std::invalid_argument("soft mask: rho must be positive");
  if (!(b >= 0.0 && b <= 1.0)) throw std::invalid_argument("soft mask: b must lie in [0, 1]");
}

namespace {

void require_finite(const torch::Tensor& t, const char* what) {
  if (!torch::isfinite(t).all().item<bool>())
    throw std::invalid_argument(std::string(what) + ": non-finite values");
}

void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes()) throw std::invalid_argument(std::string(what) + ": shape mismatch");
}

double map_scale(const torch::Tensor& maps, BoundScaling scaling) {
  if (scaling == BoundScaling::kNormalized) return 1.0;
  return 1.0 / static_cast<double>(maps.size(-1) * maps.size(-2));
}

}  // namespace

// ---------------------------------------------------------------------------

GradCamResult gradcam_all(Network& model, const torch::Tensor& input, const std::string& layer,
                          bool create_graph) {
  auto fw = model.forward(input);
  auto it = fw.features.find(layer);
  if (it == fw.features.end())
    throw std::invalid_argument("gradcam: network " + model.architecture() + " has no layer '" + layer + "'");
  const auto& features = it->second;
  if (features.dim() != 4)
    throw std::invalid_argument("gradcam: layer '" + layer + "' has no spatial extent");
  if (fw.output.dim() != 2)
    throw std::invalid_argument("gradcam: network does not produce class scores");
  if (!fw.output.requires_grad() || !features.requires_grad())
    throw std::runtime_error("gradcam: gradients unavailable (inference-only forward pass)");

  const auto classes = fw.output.size(1);
  std::vector<torch::Tensor> weights, maps;
  for (std::int64_t c = 0; c < classes; ++c) {
    auto score = fw.output.select(1, c).sum();
    auto grad = torch::autograd::grad({score}, {features}, {}, /*retain_graph=*/true, create_graph)[0];
    auto beta = grad.mean({2, 3});  // N x J
    weights.push_back(beta);
    maps.push_back(torch::relu((beta.unsqueeze(-1).unsqueeze(-1) * features).sum(1)));
  }
  GradCamResult r;
  r.logits = fw.output;
  r.weights = torch::stack(weights, 1);
  r.maps = torch::stack(maps, 1);
  return r;
}

AttentionMap gradcam(Network& model, const torch::Tensor& input, std::int64_t class_id,
                     const std::string& layer) {
  if (input.dim() != 4 || input.size(0) != 1) throw std::invalid_argument("gradcam: expected a 1 x C x H x W input");
  auto fw = model.forward(input);
  if (fw.output.dim() != 2 || class_id < 0 || class_id >= fw.output.size(1))
    throw std::invalid_argument("gradcam: class id out of range");
  auto it = fw.features.find(layer);
  if (it == fw.features.end())
    throw std::invalid_argument("gradcam: network " + model.architecture() + " has no layer '" + layer + "'");
  const auto& features = it->second;
  if (features.dim() != 4) throw std::invalid_argument("gradcam: layer '" + layer + "' has no spatial extent");
  if (!fw.output.requires_grad() || !features.requires_grad())
    throw std::runtime_error("gradcam: gradients unavailable (inference-only forward pass)");
  auto grad = torch::autograd::grad({fw.output[0][class_id]}, {features})[0];
  auto beta = grad.mean({2, 3});
  AttentionMap m;
  m.values = torch::relu((beta.unsqueeze(-1).unsqueeze(-1) * features).sum(1))[0].detach();
  m.kind = AttentionKind::kGradCam;
  m.class_id = class_id;
  return m;
}

// ---------------------------------------------------------------------------

torch::Tensor normalize_maps(const torch::Tensor& maps) {
  auto peak = maps.amax({-2, -1}, /*keepdim=*/true);
  auto safe = torch::where(peak > 0, peak, torch::ones_like(peak));
  return maps / safe;
}

AttentionMap normalize_attention(const AttentionMap& map) {
  if (map.values.dim() != 2) throw std::invalid_argument("normalize_attention: expected an H x W map");
  require_finite(map.values, "normalize_attention");
  if ((map.values < 0).any().item<bool>())
    throw std::invalid_argument("normalize_attention: negative values");
  AttentionMap out = map;
  auto peak = map.values.max().item<double>();
  out.zero_map = !(peak > 0.0);
  out.values = out.zero_map ? map.values.clone() : map.values / peak;
  out.normalized = true;
  return out;
}

torch::Tensor segmentation_attention_maps(const torch::Tensor& logits, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("segmentation_attention: tau must be positive");
  if (logits.dim() != 4) throw std::invalid_argument("segmentation_attention: expected N x C x H x W logits");
  return torch::softmax(logits / tau, 1);
}

AttentionMap segmentation_attention(const torch::Tensor& logits, std::int64_t class_id, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("segmentation_attention: tau must be positive");
  if (logits.dim() != 3) throw std::invalid_argument("segmentation_attention: expected C x H x W logits");
  if (class_id < 0 || class_id >= logits.size(0))
    throw std::invalid_argument("segmentation_attention: class id out of range");
  require_finite(logits, "segmentation_attention");
  AttentionMap m;
  m.values = torch::softmax(logits.to(torch::kFloat64) / tau, 0)[class_id].to(logits.dtype());
  m.kind = AttentionKind::kSegmentationProb;
  m.class_id = class_id;
  m.normalized = false;
  return m;
}

// ---------------------------------------------------------------------------

NonlocalResult nonlocal_block(const torch::Tensor& features) {
  const bool batched = features.dim() == 4;
  if (!batched && features.dim() != 3)
    throw std::invalid_argument("nonlocal: expected J x H x W or N x J x H x W features");
  auto f = batched ? features : features.unsqueeze(0);
  if (f.size(1) < 1 || f.size(2) < 1 || f.size(3) < 1) throw std::invalid_argument("nonlocal: empty feature map");
  auto flat = f.flatten(2);                          // N x J x HW
  auto similarity = torch::bmm(flat.transpose(1, 2), flat);  // N x HW x HW
  auto attention = torch::softmax(similarity, 1);    // each column sums to 1
  auto context = torch::bmm(attention, flat.transpose(1, 2));  // N x HW x J
  auto enhanced = f + context.transpose(1, 2).reshape(f.sizes());
  NonlocalResult r;
  r.features = batched ? enhanced : enhanced.squeeze(0);
  r.attention = batched ? attention : attention.squeeze(0);
  return r;
}

torch::Tensor nonlocal_attention(const torch::Tensor& features) {
  require_finite(features, "nonlocal_attention");
  return nonlocal_block(features).attention;
}

torch::Tensor nonlocal_enhance(const torch::Tensor& features) {
  require_finite(features, "nonlocal_enhance");
  return nonlocal_block(features).features;
}

// ---------------------------------------------------------------------------

std::pair<torch::Tensor, torch::Tensor> bounds_of(const torch::Tensor& stacked) {
  if (stacked.dim() < 1 || stacked.size(0) < 1) throw std::invalid_argument("attention_bounds: no maps");
  return {std::get<0>(stacked.min(0)), std::get<0>(stacked.max(0))};
}

BoundPair attention_bounds(const std::vector<AttentionMap>& maps) {
  if (maps.empty()) throw std::invalid_argument("attention_bounds: empty map list");
  std::vector<torch::Tensor> values;
  for (const auto& m : maps) {
    require_same_shape(m.values, maps.front().values, "attention_bounds");
    values.push_back(m.values);
  }
  auto [lo, hi] = bounds_of(torch::stack(values));
  BoundPair pair;
  pair.lower.values = lo;
  pair.upper.values = hi;
  for (auto* m : {&pair.lower, &pair.upper}) {
    m->kind = maps.front().kind;
    m->class_id = maps.front().class_id;
    m->normalized = true;
    for (const auto& src : maps) m->normalized = m->normalized && src.normalized;
  }
  return pair;
}

torch::Tensor soft_mask(const torch::Tensor& maps, const SoftMaskParams& params) {
  params.validate();
  return torch::sigmoid(params.rho * (maps - params.b));
}

AttentionMap soft_mask(const AttentionMap& map, const SoftMaskParams& params) {
  require_finite(map.values, "soft_mask");
  AttentionMap out = map;
  out.values = soft_mask(map.values, params);
  return out;
}

BoundLoss lower_bound_loss(const torch::Tensor& student, const torch::Tensor& consensus,
                           const BoundLossOptions& options) {
  require_same_shape(student, consensus, "lower_bound_loss");
  if (student.dim() < 2) throw std::invalid_argument("lower_bound_loss: maps must be at least 2-D");
  auto numerator = (consensus * soft_mask(student, options.mask)).sum({-2, -1});
  auto denominator = consensus.sum({-2, -1});
  auto degenerate = denominator <= 0;
  auto safe = torch::where(degenerate, torch::ones_like(denominator), denominator);
  auto loss = -map_scale(student, options.scaling) * numerator / safe;
  return {torch::where(degenerate, torch::zeros_like(loss), loss), degenerate};
}

BoundLoss upper_bound_loss(const torch::Tensor& student, const torch::Tensor& diversity,
                           const BoundLossOptions& options) {
  require_same_shape(student, diversity, "upper_bound_loss");
  if (student.dim() < 2) throw std::invalid_argument("upper_bound_loss: maps must be at least 2-D");
  auto numerator = (student * soft_mask(diversity, options.mask)).sum({-2, -1});
  auto denominator = student.sum({-2, -1});
  auto degenerate = denominator <= 0;
  auto safe = torch::where(degenerate, torch::ones_like(denominator), denominator);
  auto loss = -map_scale(student, options.scaling) * numerator / safe;
  return {torch::where(degenerate, torch::zeros_like(loss), loss), degenerate};
}

LossValue lower_bound_loss(const AttentionMap& student, const AttentionMap& consensus,
                           const SoftMaskParams& params, BoundScaling scaling) {
  auto r = lower_bound_loss(student.values, consensus.values, {params, scaling});
  return {r.loss.item<double>(), r.degenerate.item<bool>()};
}

LossValue upper_bound_loss(const AttentionMap& student, const AttentionMap& diversity,
                           const SoftMaskParams& params, BoundScaling scaling) {
  auto r = upper_bound_loss(student.values, diversity.values, {params, scaling});
  return {r.loss.item<double>(), r.degenerate.item<bool>()};
}

nlohmann::json attention_sidecar(const AttentionMap& map) {
  nlohmann::json flags = nlohmann::json::array();
  if (map.zero_map) flags.push_back("zero-map");
  return {{"kind", to_string(map.kind)},
          {"class_id", map.class_id ? nlohmann::json(*map.class_id) : nlohmann::json(nullptr)},
          {"shape", map.values.sizes().vec()},
          {"normalized", map.normalized},
          {"flags", flags}};
}

void save_attention_map(const std::string& stem, const AttentionMap& map) {
  io::write_tensor_archive(stem + ".fadt", {{"values", map.values.to(torch::kFloat32)}});
  io::atomic_write(stem + ".json", attention_sidecar(map).dump(2));
}

AttentionMap load_attention_map(const std::string& stem) {
  auto sidecar = nlohmann::json::parse(io::read_file(stem + ".json"));
  AttentionMap m;
  m.values = io::find_tensor(io::read_tensor_archive(stem + ".fadt"), "values");
  if (m.values.sizes().vec() != sidecar.at("shape").get<std::vector<std::int64_t>>())
    throw std::runtime_error("attention map " + stem + ": shape disagrees with sidecar");
  m.kind = attention_kind_from_string(sidecar.at("kind").get<std::string>());
  if (!sidecar.at("class_id").is_null()) m.class_id = sidecar.at("class_id").get<std::int64_t>();
  m.normalized = sidecar.at("normalized").get<bool>();
  for (const auto& f : sidecar.at("flags"))
    if (f == "zero-map") m.zero_map = true;
  return m;
}

}  // namespace fedad
