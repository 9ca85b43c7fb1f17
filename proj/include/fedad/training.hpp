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
#include <memory>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace fedad {

struct OptimizerSpec {
  std::string name = "sgd";         // sgd | rmsprop | adam
  std::string schedule = "cosine";  // cosine | constant
  double lr = 1e-2;
  double lr_min = 1e-3;             // end of the cosine schedule
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::int64_t epochs = 20;
  std::int64_t batch_size = 64;

  void validate() const;
};

void to_json(nlohmann::json& j, const OptimizerSpec& s);
void from_json(const nlohmann::json& j, OptimizerSpec& s);

// Optimizer plus a per-step learning-rate schedule.
class Trainer {
 public:
  Trainer(std::vector<torch::Tensor> parameters, const OptimizerSpec& spec, std::int64_t total_steps);

  // Applies the scheduled learning rate for the current step, then steps.
  void step();
  void zero_grad() { optimizer_->zero_grad(); }
  double current_lr() const;
  std::int64_t steps_taken() const { return step_; }

 private:
  OptimizerSpec spec_;
  std::int64_t total_steps_;
  std::int64_t step_ = 0;
  std::unique_ptr<torch::optim::Optimizer> optimizer_;
};

// Deterministic shuffled mini-batches of [0, n).
std::vector<std::vector<std::int64_t>> make_batches(std::int64_t n, std::int64_t batch_size, std::mt19937_64& rng,
                                                    bool shuffle = true);

torch::Tensor index_tensor(const std::vector<std::int64_t>& indices);

// Seeds torch's global generator from a (seed, stream) pair so every node
// draws the same initial weights in any process.
void seed_torch(std::uint64_t seed, std::uint64_t stream);
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace fedad
