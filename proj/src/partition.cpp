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
#include "fedad/partition.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include "fedad/io.hpp"

namespace fedad {

std::string to_string(Task task) {
  switch (task) {
    case Task::kClassification: return "classification";
    case Task::kSegmentation: return "segmentation";
    case Task::kReconstruction: return "reconstruction";
  }
  return "unknown";
}

Task task_from_string(const std::string& name) {
  if (name == "classification") return Task::kClassification;
  if (name == "segmentation") return Task::kSegmentation;
  if (name == "reconstruction") return Task::kReconstruction;
  throw std::invalid_argument("unknown task '" + name + "'");
}

Dataset Dataset::subset(std::span<const std::int64_t> indices) const {
  Dataset out;
  auto idx = torch::tensor(std::vector<std::int64_t>(indices.begin(), indices.end()), torch::kInt64);
  out.inputs = inputs.index_select(0, idx);
  if (targets.defined()) out.targets = targets.index_select(0, idx);
  if (!labels.empty()) {
    out.labels.reserve(indices.size());
    for (auto i : indices) out.labels.push_back(labels.at(static_cast<std::size_t>(i)));
  }
  out.num_classes = num_classes;
  out.checksum = dataset_checksum(out);
  return out;
}

std::vector<std::int64_t> Dataset::class_histogram() const {
  std::vector<std::int64_t> h(static_cast<std::size_t>(std::max<std::int64_t>(num_classes, 0)), 0);
  for (auto l : labels) {
    if (l < 0) continue;
    if (static_cast<std::size_t>(l) >= h.size()) h.resize(static_cast<std::size_t>(l) + 1, 0);
    ++h[static_cast<std::size_t>(l)];
  }
  return h;
}

std::string dataset_checksum(const Dataset& d) {
  std::vector<torch::Tensor> parts;
  if (d.inputs.defined()) parts.push_back(d.inputs);
  if (!d.labels.empty()) parts.push_back(torch::tensor(d.labels, torch::kInt64));
  if (d.targets.defined()) parts.push_back(d.targets);
  return io::tensor_hash(parts);
}

PublicDataset make_public_dataset(torch::Tensor samples, std::string modality) {
  if (!samples.defined() || samples.dim() != 4)
    throw std::invalid_argument("public dataset: samples must be N x C x H x W");
  PublicDataset p;
  p.samples = samples.to(torch::kFloat32).contiguous();
  p.id = io::tensor_hash({p.samples});
  p.modality = std::move(modality);
  return p;
}

PublicDataset truncate_public(const PublicDataset& full, std::int64_t count) {
  if (count < 1 || count > full.size())
    throw std::invalid_argument("public subsample size out of range");
  return make_public_dataset(full.samples.slice(0, 0, count).clone(), full.modality);
}

std::vector<std::int64_t> PartitionSpec::node_sizes() const {
  std::vector<std::int64_t> s;
  s.reserve(assignments.size());
  for (const auto& a : assignments) s.push_back(static_cast<std::int64_t>(a.size()));
  return s;
}

void to_json(nlohmann::json& j, const PartitionSpec& p) {
  j = nlohmann::json{{"K", p.num_nodes},
                     {"alpha", p.alpha},
                     {"seed", p.seed},
                     {"assignments", p.assignments},
                     {"class_counts", p.class_counts}};
}

void from_json(const nlohmann::json& j, PartitionSpec& p) {
  j.at("K").get_to(p.num_nodes);
  j.at("alpha").get_to(p.alpha);
  j.at("seed").get_to(p.seed);
  j.at("assignments").get_to(p.assignments);
  j.at("class_counts").get_to(p.class_counts);
  if (static_cast<std::int64_t>(p.assignments.size()) != p.num_nodes ||
      static_cast<std::int64_t>(p.class_counts.size()) != p.num_nodes)
    throw std::invalid_argument("partition spec: node count mismatch");
}

namespace {

// Integer apportionment of `total` by `shares` (which sum to ~1); ties go to
// the lower index.
std::vector<std::int64_t> largest_remainder(std::span<const double> shares, std::int64_t total) {
  std::vector<std::int64_t> counts(shares.size());
  std::vector<std::pair<double, std::size_t>> rem;
  std::int64_t assigned = 0;
  for (std::size_t i = 0; i < shares.size(); ++i) {
    double exact = shares[i] * static_cast<double>(total);
    counts[i] = static_cast<std::int64_t>(std::floor(exact));
    assigned += counts[i];
    rem.emplace_back(exact - static_cast<double>(counts[i]), i);
  }
  std::stable_sort(rem.begin(), rem.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t r = 0; assigned < total; ++r, ++assigned) ++counts[rem[r % rem.size()].second];
  return counts;
}

std::vector<double> dirichlet_draw(std::mt19937_64& rng, std::int64_t k, double alpha) {
  std::gamma_distribution<double> gamma(alpha, 1.0);
  std::vector<double> p(static_cast<std::size_t>(k));
  double sum = 0.0;
  for (auto& v : p) {
    v = gamma(rng);
    sum += v;
  }
  if (!(sum > 0.0)) {
    // Every gamma draw underflowed (tiny alpha): the limit is a one-hot vector.
    std::uniform_int_distribution<std::int64_t> pick(0, k - 1);
    std::fill(p.begin(), p.end(), 0.0);
    p[static_cast<std::size_t>(pick(rng))] = 1.0;
    return p;
  }
  for (auto& v : p) v /= sum;
  return p;
}

}  // namespace

PartitionSpec dirichlet_partition(std::span<const std::int64_t> labels, std::int64_t num_nodes,
                                  double alpha, std::uint64_t seed, std::int64_t num_classes) {
  if (labels.empty()) throw std::invalid_argument("dirichlet_partition: empty label list");
  if (num_nodes < 1) throw std::invalid_argument("dirichlet_partition: K must be >= 1");
  if (!(alpha > 0.0) || !std::isfinite(alpha))
    throw std::invalid_argument("dirichlet_partition: alpha must be positive and finite");
  if (num_nodes > static_cast<std::int64_t>(labels.size()))
    throw std::invalid_argument("dirichlet_partition: K exceeds dataset size");
  std::int64_t max_label = *std::max_element(labels.begin(), labels.end());
  if (*std::min_element(labels.begin(), labels.end()) < 0)
    throw std::invalid_argument("dirichlet_partition: negative label");
  std::int64_t classes = num_classes > 0 ? num_classes : max_label + 1;
  if (max_label >= classes) throw std::invalid_argument("dirichlet_partition: label out of range");

  std::vector<std::vector<std::int64_t>> by_class(static_cast<std::size_t>(classes));
  for (std::size_t i = 0; i < labels.size(); ++i)
    by_class[static_cast<std::size_t>(labels[i])].push_back(static_cast<std::int64_t>(i));

  std::mt19937_64 rng(seed);
  PartitionSpec spec;
  spec.num_nodes = num_nodes;
  spec.alpha = alpha;
  spec.seed = seed;
  spec.assignments.assign(static_cast<std::size_t>(num_nodes), {});
  spec.class_counts.assign(static_cast<std::size_t>(num_nodes),
                           std::vector<std::int64_t>(static_cast<std::size_t>(classes), 0));

  for (std::int64_t c = 0; c < classes; ++c) {
    auto& members = by_class[static_cast<std::size_t>(c)];
    std::shuffle(members.begin(), members.end(), rng);
    auto shares = dirichlet_draw(rng, num_nodes, alpha);
    auto counts = largest_remainder(shares, static_cast<std::int64_t>(members.size()));
    std::size_t cursor = 0;
    for (std::int64_t k = 0; k < num_nodes; ++k) {
      auto n = counts[static_cast<std::size_t>(k)];
      auto& dst = spec.assignments[static_cast<std::size_t>(k)];
      dst.insert(dst.end(), members.begin() + static_cast<std::ptrdiff_t>(cursor),
                 members.begin() + static_cast<std::ptrdiff_t>(cursor + static_cast<std::size_t>(n)));
      spec.class_counts[static_cast<std::size_t>(k)][static_cast<std::size_t>(c)] += n;
      cursor += static_cast<std::size_t>(n);
    }
  }

  for (std::int64_t k = 0; k < num_nodes; ++k) {
    auto& empty = spec.assignments[static_cast<std::size_t>(k)];
    if (!empty.empty()) continue;
    auto largest = std::max_element(spec.assignments.begin(), spec.assignments.end(),
                                    [](const auto& a, const auto& b) { return a.size() < b.size(); });
    auto donor = static_cast<std::size_t>(largest - spec.assignments.begin());
    std::uniform_int_distribution<std::size_t> pick(0, largest->size() - 1);
    auto pos = pick(rng);
    auto sample = (*largest)[pos];
    largest->erase(largest->begin() + static_cast<std::ptrdiff_t>(pos));
    empty.push_back(sample);
    auto label = static_cast<std::size_t>(labels[static_cast<std::size_t>(sample)]);
    --spec.class_counts[donor][label];
    ++spec.class_counts[static_cast<std::size_t>(k)][label];
  }

  for (auto& a : spec.assignments) std::sort(a.begin(), a.end());
  return spec;
}

PartitionSpec fraction_partition(std::int64_t n, std::span<const double> fractions,
                                 std::uint64_t seed) {
  if (fractions.empty()) throw std::invalid_argument("fraction_partition: no fractions");
  if (static_cast<std::int64_t>(fractions.size()) > n)
    throw std::invalid_argument("fraction_partition: K exceeds dataset size");
  double total = 0.0;
  for (double f : fractions) {
    if (!(f > 0.0)) throw std::invalid_argument("fraction_partition: fractions must be positive");
    total += f;
  }
  std::vector<double> shares;
  for (double f : fractions) shares.push_back(f / total);
  auto counts = largest_remainder(shares, n);

  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  PartitionSpec spec;
  spec.num_nodes = static_cast<std::int64_t>(fractions.size());
  spec.alpha = 0.0;
  spec.seed = seed;
  std::size_t cursor = 0;
  for (auto c : counts) {
    if (c < 1) throw std::invalid_argument("fraction_partition: a node would receive no samples");
    std::vector<std::int64_t> a(order.begin() + static_cast<std::ptrdiff_t>(cursor),
                                order.begin() + static_cast<std::ptrdiff_t>(cursor + static_cast<std::size_t>(c)));
    std::sort(a.begin(), a.end());
    spec.assignments.push_back(std::move(a));
    spec.class_counts.push_back({c});
    cursor += static_cast<std::size_t>(c);
  }
  return spec;
}

double non_iid_degree(const PartitionSpec& p) {
  double acc = 0.0;
  for (const auto& row : p.class_counts) {
    auto total = std::accumulate(row.begin(), row.end(), std::int64_t{0});
    if (total == 0) continue;
    acc += static_cast<double>(*std::max_element(row.begin(), row.end())) / static_cast<double>(total);
  }
  return acc / static_cast<double>(p.class_counts.size());
}

HoldoutSplit holdout_validation(std::span<const std::int64_t> train_indices, double fraction,
                                std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0))
    throw std::invalid_argument("holdout_validation: fraction must lie in (0, 1)");
  auto n = static_cast<double>(train_indices.size());
  auto v = static_cast<std::size_t>(std::llround(fraction * n));
  if (v == 0)
    throw std::invalid_argument("holdout_validation: validation set would be empty (N=" +
                                std::to_string(train_indices.size()) + ")");
  if (v >= train_indices.size())
    throw std::invalid_argument("holdout_validation: training set would be empty");
  std::vector<std::int64_t> order(train_indices.begin(), train_indices.end());
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  HoldoutSplit split;
  split.validation.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(v));
  split.train.assign(order.begin() + static_cast<std::ptrdiff_t>(v), order.end());
  std::sort(split.validation.begin(), split.validation.end());
  std::sort(split.train.begin(), split.train.end());
  return split;
}

std::vector<std::int64_t> reduce_multilabel(const std::vector<std::vector<std::int64_t>>& label_sets,
                                            std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::int64_t> out;
  out.reserve(label_sets.size());
  for (std::size_t i = 0; i < label_sets.size(); ++i) {
    const auto& s = label_sets[i];
    if (s.empty())
      throw std::invalid_argument("reduce_multilabel: sample " + std::to_string(i) + " has no positive label");
    std::uniform_int_distribution<std::size_t> pick(0, s.size() - 1);
    out.push_back(s[s.size() == 1 ? 0 : pick(rng)]);
  }
  return out;
}

}  // namespace fedad
