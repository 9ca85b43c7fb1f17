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
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedad/distill.hpp"
#include "fedad/partition.hpp"
#include "fedad/training.hpp"

namespace fedad {

// Where a dataset comes from: a synthetic generator, a directory of PGM
// images with labels.csv, or a tensor archive.
struct DataSourceSpec {
  std::string format = "synthetic";
  std::string path;
  SyntheticConfig synthetic;
  std::string modality = "grayscale";

  Dataset load() const;
};

void to_json(nlohmann::json& j, const DataSourceSpec& s);
void from_json(const nlohmann::json& j, DataSourceSpec& s);

struct NodeTemplate {
  std::string architecture;
  OptimizerSpec training;
};

struct ProductOptions {
  bool float16_attention = false;
  bool top1_only = false;  // classification: only the predicted class's map
};

struct EvaluationSpec {
  std::int64_t vc_dimension = 0;  // 0: use the student's parameter count
  double delta = 0.05;
  double lambda = 0.0;
};

struct ExperimentConfig {
  std::string name;
  Task task = Task::kClassification;
  std::uint64_t seed = 0;
  std::string output_dir;

  DataSourceSpec private_data;
  DataSourceSpec test_data;
  DataSourceSpec public_data;
  std::int64_t public_size = 0;  // 0 keeps the whole public set
  double holdout_fraction = 0.1;

  std::int64_t num_nodes = 1;
  double alpha = 1.0;
  std::optional<std::uint64_t> partition_seed;  // defaults to `seed`
  std::vector<double> size_fractions;           // fixed node shares instead of Dirichlet draws

  std::vector<NodeTemplate> nodes;  // exactly num_nodes entries after parsing
  NodeTemplate student;
  DistillConfig distill;

  std::string weighting = "importance";  // importance | uniform
  bool skip_zero_maps = false;
  ProductOptions products;

  std::int64_t fedavg_rounds = 10;
  std::int64_t fedavg_local_epochs = 1;

  EvaluationSpec evaluation;

  std::uint64_t effective_partition_seed() const { return partition_seed.value_or(seed); }
  nlohmann::json to_json() const;
  // SHA-256 of the canonical JSON form.
  std::string hash() const;
};

// The published schema (config/experiment.schema.json), compiled in.
const nlohmann::json& experiment_schema();

// Subset of JSON Schema: type, enum, required, properties,
// additionalProperties, items, minItems, minLength, (exclusive)minimum,
// (exclusive)maximum and local $ref. Throws ConfigError naming the offending
// path.
void validate_against_schema(const nlohmann::json& document, const nlohmann::json& schema);

// Validates first, then fills defaults for the task.
ExperimentConfig parse_experiment_config(const nlohmann::json& document);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

// Replaces the experiment seed and every seed derived from it.
void apply_seed_override(ExperimentConfig& config, std::uint64_t seed);

std::string default_architecture(Task task);
OptimizerSpec default_local_training(Task task);

}  // namespace fedad
