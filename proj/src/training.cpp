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
#include "fedad/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace fedad {

void OptimizerSpec::validate() const {
  if (name != "sgd" && name != "rmsprop" && name != "adam")
    throw std::invalid_argument("optimizer: unknown name '" + name + "'");
  if (schedule != "cosine" && schedule != "constant")
    throw std::invalid_argument("optimizer: unknown schedule '" + schedule + "'");
  if (!(lr >= 0.0) || !(lr_min >= 0.0)) throw std::invalid_argument("optimizer: learning rates must be >= 0");
  if (epochs < 1) throw std::invalid_argument("optimizer: epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("optimizer: batch_size must be >= 1");
}

void to_json(nlohmann::json& j, const OptimizerSpec& s) {
  j = nlohmann::json{{"name", s.name},         {"schedule", s.schedule}, {"lr", s.lr},
                     {"lr_min", s.lr_min},     {"momentum", s.momentum}, {"weight_decay", s.weight_decay},
                     {"epochs", s.epochs},     {"batch_size", s.batch_size}};
}

void from_json(const nlohmann::json& j, OptimizerSpec& s) {
  OptimizerSpec d;
  s.name = j.value("name", d.name);
  s.schedule = j.value("schedule", d.schedule);
  s.lr = j.value("lr", d.lr);
  s.lr_min = j.value("lr_min", d.lr_min);
  s.momentum = j.value("momentum", d.momentum);
  s.weight_decay = j.value("weight_decay", d.weight_decay);
  s.epochs = j.value("epochs", d.epochs);
  s.batch_size = j.value("batch_size", d.batch_size);
}

Trainer::Trainer(std::vector<torch::Tensor> parameters, const OptimizerSpec& spec, std::int64_t total_steps)
    : spec_(spec), total_steps_(std::max<std::int64_t>(total_steps, 1)) {
  spec_.validate();
  if (spec.name == "sgd") {
    optimizer_ = std::make_unique<torch::optim::SGD>(
        parameters, torch::optim::SGDOptions(spec.lr).momentum(spec.momentum).weight_decay(spec.weight_decay));
  } else if (spec.name == "rmsprop") {
    optimizer_ = std::make_unique<torch::optim::RMSprop>(
        parameters, torch::optim::RMSpropOptions(spec.lr).weight_decay(spec.weight_decay));
  } else {
    optimizer_ = std::make_unique<torch::optim::Adam>(
        parameters, torch::optim::AdamOptions(spec.lr).weight_decay(spec.weight_decay));
  }
}

double Trainer::current_lr() const {
  if (spec_.schedule == "constant") return spec_.lr;
  double progress = static_cast<double>(std::min(step_, total_steps_)) / static_cast<double>(total_steps_);
  return spec_.lr_min + 0.5 * (spec_.lr - spec_.lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

void Trainer::step() {
  double lr = current_lr();
  for (auto& group : optimizer_->param_groups()) group.options().set_lr(lr);
  optimizer_->step();
  ++step_;
}

std::vector<std::vector<std::int64_t>> make_batches(std::int64_t n, std::int64_t batch_size, std::mt19937_64& rng,
                                                    bool shuffle) {
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  if (shuffle) std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::int64_t>> batches;
  for (std::int64_t start = 0; start < n; start += batch_size) {
    auto end = std::min(n, start + batch_size);
    batches.emplace_back(order.begin() + start, order.begin() + end);
  }
  return batches;
}

torch::Tensor index_tensor(const std::vector<std::int64_t>& indices) {
  return torch::tensor(indices, torch::kInt64);
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finaliser over the combined value
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

void seed_torch(std::uint64_t seed, std::uint64_t stream) {
  torch::manual_seed(mix_seed(seed, stream) & 0x7fffffffffffffffULL);
}

}  // namespace fedad
