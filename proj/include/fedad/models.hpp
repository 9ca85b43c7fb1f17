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
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace fedad {

// Everything a forward pass exposes to attention extraction.
struct ForwardResult {
  // Class logits (N x C), per-pixel logits (N x C x H x W) or an image
  // (N x 1 x H x W), depending on the architecture.
  torch::Tensor output;
  // Named convolutional feature maps (N x J x h x w), usable as Grad-CAM layers.
  std::map<std::string, torch::Tensor> features;
  // N x hw x hw spatial self-attention of the bottleneck, when present.
  torch::Tensor nonlocal_attention;
};

class Network : public torch::nn::Module {
 public:
  virtual ForwardResult forward(const torch::Tensor& input) = 0;
  virtual std::string architecture() const = 0;
  virtual std::string default_attention_layer() const = 0;
  virtual std::vector<std::string> layer_names() const = 0;
};

using NetworkPtr = std::shared_ptr<Network>;

struct ArchitectureSpec {
  std::string name = "cnn-small";
  std::int64_t in_channels = 1;
  std::int64_t height = 16;
  std::int64_t width = 16;
  std::int64_t num_classes = 10;
};

void to_json(nlohmann::json& j, const ArchitectureSpec& s);
void from_json(const nlohmann::json& j, ArchitectureSpec& s);

// Registered keys:
//   cnn-small, cnn-wide       conv-relu-pool-conv-relu-fc-fc classifiers;
//                             layers "conv1" (full res), "conv2" (half res)
//   seg-tiny                  two 3x3 convs then a 1x1 per-pixel classifier
//   unet-tiny                 two-level encoder/decoder with skip connections
//   unet-tiny+nonlocal        same, bottleneck routed through nonlocal_enhance
// Parameters are initialised from torch's global generator; seed it first.
NetworkPtr build_network(const ArchitectureSpec& spec);
std::vector<std::string> registered_architectures();

// Flat float32 copy of all parameters, in registration order.
torch::Tensor flatten_parameters(const Network& net);
void load_flat_parameters(Network& net, const torch::Tensor& flat);
std::int64_t parameter_count(const Network& net);

void save_network(const Network& net, const std::string& path);
void load_network(Network& net, const std::string& path);

}  // namespace fedad
