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

#include <atomic>
#include <filesystem>
#include <string>
#include <unistd.h>

#include <torch/torch.h>

#include "fedad/models.hpp"

namespace fedad::testing {

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("fedad-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

// Feature map "feat" is the input through a unit 1x1 convolution; the single
// logit is its spatial mean.
class GapNet : public Network {
 public:
  GapNet() {
    conv_ = register_module("feat", torch::nn::Conv2d(torch::nn::Conv2dOptions(1, 1, 1).bias(false)));
    torch::NoGradGuard guard;
    conv_->weight.fill_(1.0);
  }
  ForwardResult forward(const torch::Tensor& input) override {
    ForwardResult r;
    auto f = conv_->forward(input);
    r.features["feat"] = f;
    r.output = f.mean({2, 3});
    return r;
  }
  std::string architecture() const override { return "gap-toy"; }
  std::string default_attention_layer() const override { return "feat"; }
  std::vector<std::string> layer_names() const override { return {"feat"}; }

 private:
  torch::nn::Conv2d conv_{nullptr};
};

// conv-relu-conv feature extractor with the classifier head exposed, so the
// logits can be re-evaluated on perturbed features.
class TwoConvNet : public Network {
 public:
  explicit TwoConvNet(std::int64_t classes = 3) {
    conv1_ = register_module("conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(1, 3, 3).padding(1)));
    conv2_ = register_module("conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(3, 4, 3).padding(1)));
    fc_ = register_module("fc", torch::nn::Linear(4 * 16, classes));
  }
  torch::Tensor features(const torch::Tensor& input) {
    return conv2_->forward(torch::relu(conv1_->forward(input)));
  }
  torch::Tensor head(const torch::Tensor& f) {
    // Pools 6x6 maps to 4x4 cells; any smooth, non-linear head will do.
    auto pooled = torch::adaptive_avg_pool2d(torch::tanh(f), {4, 4});
    return fc_->forward(pooled.flatten(1));
  }
  ForwardResult forward(const torch::Tensor& input) override {
    ForwardResult r;
    auto f = features(input);
    r.features["conv2"] = f;
    r.output = head(f);
    return r;
  }
  std::string architecture() const override { return "two-conv-toy"; }
  std::string default_attention_layer() const override { return "conv2"; }
  std::vector<std::string> layer_names() const override { return {"conv2"}; }

 private:
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
  torch::nn::Linear fc_{nullptr};
};

inline double max_rel_err(const torch::Tensor& got, const torch::Tensor& want, double floor = 1e-12) {
  auto g = got.to(torch::kFloat64);
  auto w = want.to(torch::kFloat64);
  return ((g - w).abs() / w.abs().clamp_min(floor)).max().item<double>();
}

}  // namespace fedad::testing
