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
#include "fedad/ensemble.hpp"

#include <numeric>
#include <stdexcept>

namespace fedad {

double ImportanceWeights::at(std::int64_t node, std::int64_t cls) const {
  const auto& row = values.at(static_cast<std::size_t>(node));
  return class_specific() ? row.at(static_cast<std::size_t>(cls)) : row.at(0);
}

namespace {

std::string basis_name(WeightBasis b) {
  switch (b) {
    case WeightBasis::kClassCounts: return "class_counts";
    case WeightBasis::kNodeSizes: return "node_sizes";
    case WeightBasis::kUniform: return "uniform";
  }
  return "uniform";
}

}  // namespace

void to_json(nlohmann::json& j, const ImportanceWeights& w) {
  j = nlohmann::json{{"basis", basis_name(w.basis)}, {"values", w.values}, {"zero_count_classes", w.zero_count_classes}};
}

void from_json(const nlohmann::json& j, ImportanceWeights& w) {
  auto basis = j.at("basis").get<std::string>();
  if (basis == "class_counts") w.basis = WeightBasis::kClassCounts;
  else if (basis == "node_sizes") w.basis = WeightBasis::kNodeSizes;
  else if (basis == "uniform") w.basis = WeightBasis::kUniform;
  else throw std::invalid_argument("importance weights: unknown basis '" + basis + "'");
  j.at("values").get_to(w.values);
  w.zero_count_classes = j.value("zero_count_classes", std::vector<std::int64_t>{});
}

ImportanceWeights class_importance_weights(const std::vector<std::vector<std::int64_t>>& class_counts) {
  if (class_counts.empty()) throw std::invalid_argument("class_importance_weights: no nodes");
  const auto nodes = class_counts.size();
  const auto classes = class_counts.front().size();
  ImportanceWeights w;
  w.basis = WeightBasis::kClassCounts;
  w.values.assign(nodes, std::vector<double>(classes, 0.0));
  for (const auto& row : class_counts) {
    if (row.size() != classes) throw std::invalid_argument("class_importance_weights: ragged count matrix");
    for (auto n : row)
      if (n < 0) throw std::invalid_argument("class_importance_weights: negative count");
  }
  for (std::size_t c = 0; c < classes; ++c) {
    std::int64_t total = 0;
    for (std::size_t k = 0; k < nodes; ++k) total += class_counts[k][c];
    for (std::size_t k = 0; k < nodes; ++k)
      w.values[k][c] = total > 0 ? static_cast<double>(class_counts[k][c]) / static_cast<double>(total)
                                 : 1.0 / static_cast<double>(nodes);
    if (total == 0) w.zero_count_classes.push_back(static_cast<std::int64_t>(c));
  }
  return w;
}

ImportanceWeights size_weights(const std::vector<std::int64_t>& sizes) {
  if (sizes.empty()) throw std::invalid_argument("size_weights: empty size list");
  std::int64_t total = 0;
  for (auto s : sizes) {
    if (s < 1) throw std::invalid_argument("size_weights: every node needs at least one sample");
    total += s;
  }
  ImportanceWeights w;
  w.basis = WeightBasis::kNodeSizes;
  for (auto s : sizes) w.values.push_back({static_cast<double>(s) / static_cast<double>(total)});
  return w;
}

ImportanceWeights uniform_weights(std::int64_t num_nodes) {
  if (num_nodes < 1) throw std::invalid_argument("uniform_weights: need at least one node");
  ImportanceWeights w;
  w.basis = WeightBasis::kUniform;
  w.values.assign(static_cast<std::size_t>(num_nodes), {1.0 / static_cast<double>(num_nodes)});
  return w;
}

torch::Tensor weighted_ensemble(const std::vector<torch::Tensor>& predictions, const ImportanceWeights& weights) {
  if (predictions.empty()) throw std::invalid_argument("weighted_ensemble: no predictions");
  if (static_cast<std::int64_t>(predictions.size()) != weights.num_nodes())
    throw std::invalid_argument("weighted_ensemble: weight count does not match node count");
  const auto& ref = predictions.front();
  for (const auto& p : predictions)
    if (p.sizes() != ref.sizes()) throw std::invalid_argument("weighted_ensemble: prediction shape mismatch");

  const std::int64_t class_axis = ref.dim() >= 2 ? 1 : 0;
  auto result = torch::zeros_like(ref);
  for (std::size_t k = 0; k < predictions.size(); ++k) {
    const auto& row = weights.values[k];
    if (weights.class_specific()) {
      if (static_cast<std::int64_t>(row.size()) != ref.size(class_axis))
        throw std::invalid_argument("weighted_ensemble: class weight count does not match class axis");
      std::vector<std::int64_t> shape(static_cast<std::size_t>(ref.dim()), 1);
      shape[static_cast<std::size_t>(class_axis)] = ref.size(class_axis);
      auto w = torch::tensor(row, ref.options().dtype(torch::kFloat64)).to(ref.dtype()).view(shape);
      result = result + w * predictions[k];
    } else {
      result = result + row.at(0) * predictions[k];
    }
  }
  return result;
}

torch::Tensor softened_probs(const torch::Tensor& logits, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("softened_probs: tau must be positive");
  return torch::softmax(logits / tau, -1);
}

torch::Tensor kl_distill_loss(const torch::Tensor& teacher, const torch::Tensor& student, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("kl_distill_loss: tau must be positive");
  if (teacher.sizes() != student.sizes()) throw std::invalid_argument("kl_distill_loss: shape mismatch");
  if (!torch::isfinite(teacher).all().item<bool>() || !torch::isfinite(student).all().item<bool>())
    throw std::invalid_argument("kl_distill_loss: non-finite logits");
  auto log_t = torch::log_softmax(teacher / tau, -1);
  auto log_s = torch::log_softmax(student / tau, -1);
  return (log_t.exp() * (log_t - log_s)).sum(-1);
}

torch::Tensor l2_logit_loss(const torch::Tensor& teacher, const torch::Tensor& student, std::int64_t batch_dims) {
  if (teacher.sizes() != student.sizes()) throw std::invalid_argument("l2_logit_loss: shape mismatch");
  if (batch_dims < 0 || batch_dims > teacher.dim()) throw std::invalid_argument("l2_logit_loss: bad batch_dims");
  auto diff = student - teacher;
  if (batch_dims == teacher.dim()) return diff.abs();
  diff = diff.flatten(batch_dims);
  return torch::linalg_vector_norm(diff, 2, {-1});
}

EnsembleBundle BundleSet::at(std::int64_t sample) const {
  if (sample < 0 || sample >= size()) throw std::out_of_range("bundle index out of range");
  EnsembleBundle b;
  b.sample_id = sample;
  b.z_hat = z_hat[sample];
  auto make_pair = [&](const torch::Tensor& lo, const torch::Tensor& hi, std::optional<std::int64_t> cls) {
    BoundPair p;
    p.lower = AttentionMap{lo, kind, cls, true, false};
    p.upper = AttentionMap{hi, kind, cls, true, false};
    return p;
  };
  if (per_class()) {
    for (std::int64_t c = 0; c < lower.size(1); ++c)
      b.bounds.push_back(make_pair(lower[sample][c], upper[sample][c], c));
  } else {
    b.bounds.push_back(make_pair(lower[sample], upper[sample], std::nullopt));
  }
  return b;
}

BundleSet BundleSet::select(const std::vector<std::int64_t>& samples) const {
  auto idx = torch::tensor(samples, torch::kInt64);
  BundleSet out;
  out.public_id = public_id;
  out.kind = kind;
  out.z_hat = z_hat.index_select(0, idx);
  if (lower.defined()) out.lower = lower.index_select(0, idx);
  if (upper.defined()) out.upper = upper.index_select(0, idx);
  return out;
}

}  // namespace fedad
