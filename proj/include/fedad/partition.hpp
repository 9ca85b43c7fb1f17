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
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace fedad {

enum class Task { kClassification, kSegmentation, kReconstruction };

std::string to_string(Task task);
Task task_from_string(const std::string& name);

// Samples in the framework layout: inputs are N x channels x H x W float32.
// `labels` holds one class id per sample for classification. `targets` holds
// per-pixel class ids (N x H x W, int64) for segmentation or clean images
// (N x 1 x H x W) for reconstruction.
struct Dataset {
  torch::Tensor inputs;
  std::vector<std::int64_t> labels;
  torch::Tensor targets;
  std::int64_t num_classes = 0;
  std::string checksum;

  std::int64_t size() const { return inputs.defined() ? inputs.size(0) : 0; }
  Dataset subset(std::span<const std::int64_t> indices) const;
  std::vector<std::int64_t> class_histogram() const;
};

std::string dataset_checksum(const Dataset& d);

// Unlabeled data shared by every participant. `id` is a content hash over the
// ordered samples so all parties agree on indexing.
struct PublicDataset {
  torch::Tensor samples;
  std::string id;
  std::string modality;

  std::int64_t size() const { return samples.defined() ? samples.size(0) : 0; }
};

PublicDataset make_public_dataset(torch::Tensor samples, std::string modality);
// First `count` samples of `full`, re-hashed.
PublicDataset truncate_public(const PublicDataset& full, std::int64_t count);

struct PartitionSpec {
  std::int64_t num_nodes = 0;
  double alpha = 0.0;
  std::uint64_t seed = 0;
  std::vector<std::vector<std::int64_t>> assignments;  // sorted indices per node
  std::vector<std::vector<std::int64_t>> class_counts;  // [node][class]

  std::vector<std::int64_t> node_sizes() const;
};

void to_json(nlohmann::json& j, const PartitionSpec& p);
void from_json(const nlohmann::json& j, PartitionSpec& p);

// Per-class Dirichlet(alpha * 1_K) proportions over nodes, largest-remainder
// rounding, then empty nodes are backfilled with one random sample taken from
// the largest node. `num_classes` of 0 means max(label) + 1.
PartitionSpec dirichlet_partition(std::span<const std::int64_t> labels, std::int64_t num_nodes,
                                  double alpha, std::uint64_t seed, std::int64_t num_classes = 0);

// Shuffles [0, n) and cuts it by the given fractions (largest remainder).
// class_counts has a single column holding node sizes.
PartitionSpec fraction_partition(std::int64_t n, std::span<const double> fractions,
                                 std::uint64_t seed);

// Mean over nodes of the largest single-class share.
double non_iid_degree(const PartitionSpec& p);

struct HoldoutSplit {
  std::vector<std::int64_t> train;
  std::vector<std::int64_t> validation;
};

HoldoutSplit holdout_validation(std::span<const std::int64_t> train_indices, double fraction,
                                std::uint64_t seed);

// Picks one positive label per multi-label sample with a seeded draw.
std::vector<std::int64_t> reduce_multilabel(const std::vector<std::vector<std::int64_t>>& label_sets,
                                            std::uint64_t seed);

// ---------------------------------------------------------------------------
// Synthetic data

struct SyntheticConfig {
  Task task = Task::kClassification;
  std::int64_t num_samples = 1000;
  std::int64_t num_classes = 10;
  std::int64_t height = 16;
  std::int64_t width = 16;
  std::uint64_t seed = 0;
  // Shared across every dataset drawn from the same family.
  std::uint64_t prototype_seed = 1234;
  double noise = 0.6;
  // classification: a class glyph placed at a random position, plus a
  // weaker glyph of another class placed elsewhere.
  std::int64_t glyph_size = 5;
  double contrast = 1.0;
  double distractor_contrast = 0.0;
  // reconstruction: random-ellipse phantoms, corrupted by a fixed
  // undersampling mask in the 2D Fourier domain.
  std::int64_t ellipses = 4;
  double acceleration = 3.0;
  double center_fraction = 0.25;
  std::uint64_t mask_seed = 7;
};

void to_json(nlohmann::json& j, const SyntheticConfig& c);
void from_json(const nlohmann::json& j, SyntheticConfig& c);

Dataset generate_synthetic(const SyntheticConfig& config);

// Keeps the centre columns plus random columns at rate 1/acceleration.
torch::Tensor undersampling_mask(std::int64_t height, std::int64_t width, double acceleration,
                                 double center_fraction, std::uint64_t seed);
// |ifft2(mask * fft2(x))| for x of shape N x 1 x H x W.
torch::Tensor undersample(const torch::Tensor& images, const torch::Tensor& mask);

// Formats: "synthetic" (JSON generator config), "image-dir" (directory of
// binary PGM images plus labels.csv with columns filename,label) and "archive"
// (tensor archive with keys "images" and "labels").
Dataset load_dataset(const std::filesystem::path& path, const std::string& format);

}  // namespace fedad
