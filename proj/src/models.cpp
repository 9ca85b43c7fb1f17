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
#include "fedad/models.hpp"

#include <filesystem>
#include <stdexcept>
#include <unistd.h>

#include "fedad/attention.hpp"

namespace fedad {

void to_json(nlohmann::json& j, const ArchitectureSpec& s) {
  j = nlohmann::json{{"name", s.name},
                     {"in_channels", s.in_channels},
                     {"height", s.height},
                     {"width", s.width},
                     {"num_classes", s.num_classes}};
}

void from_json(const nlohmann::json& j, ArchitectureSpec& s) {
  ArchitectureSpec d;
  s.name = j.value("name", d.name);
  s.in_channels = j.value("in_channels", d.in_channels);
  s.height = j.value("height", d.height);
  s.width = j.value("width", d.width);
  s.num_classes = j.value("num_classes", d.num_classes);
}

namespace {

namespace F = torch::nn::functional;

torch::nn::Conv2d conv3x3(std::int64_t in, std::int64_t out) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).padding(1));
}

class ConvClassifier : public Network {
 public:
  ConvClassifier(const ArchitectureSpec& spec, std::int64_t c1, std::int64_t c2, std::int64_t hidden)
      : name_(spec.name) {
    if (spec.height % 2 != 0 || spec.width % 2 != 0)
      throw std::invalid_argument(spec.name + ": input height and width must be even");
    conv1_ = register_module("conv1", conv3x3(spec.in_channels, c1));
    conv2_ = register_module("conv2", conv3x3(c1, c2));
    fc1_ = register_module("fc1", torch::nn::Linear(c2 * (spec.height / 2) * (spec.width / 2), hidden));
    fc2_ = register_module("fc2", torch::nn::Linear(hidden, spec.num_classes));
  }

  ForwardResult forward(const torch::Tensor& x) override {
    ForwardResult r;
    auto h1 = torch::relu(conv1_->forward(x));
    auto h2 = torch::relu(conv2_->forward(F::max_pool2d(h1, F::MaxPool2dFuncOptions(2))));
    r.features.emplace("conv1", h1);
    r.features.emplace("conv2", h2);
    auto flat = h2.flatten(1);
    r.output = fc2_->forward(torch::relu(fc1_->forward(flat)));
    return r;
  }

  std::string architecture() const override { return name_; }
  std::string default_attention_layer() const override { return "conv2"; }
  std::vector<std::string> layer_names() const override { return {"conv1", "conv2"}; }

 private:
  std::string name_;
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
  torch::nn::Linear fc1_{nullptr}, fc2_{nullptr};
};

class SegmentationNet : public Network {
 public:
  explicit SegmentationNet(const ArchitectureSpec& spec) {
    conv1_ = register_module("conv1", conv3x3(spec.in_channels, 16));
    conv2_ = register_module("conv2", conv3x3(16, 16));
    head_ = register_module("head", torch::nn::Conv2d(torch::nn::Conv2dOptions(16, spec.num_classes, 1)));
  }

  ForwardResult forward(const torch::Tensor& x) override {
    ForwardResult r;
    auto h1 = torch::relu(conv1_->forward(x));
    auto h2 = torch::relu(conv2_->forward(h1));
    r.features.emplace("conv1", h1);
    r.features.emplace("conv2", h2);
    r.output = head_->forward(h2);
    return r;
  }

  std::string architecture() const override { return "seg-tiny"; }
  std::string default_attention_layer() const override { return "conv2"; }
  std::vector<std::string> layer_names() const override { return {"conv1", "conv2"}; }

 private:
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr}, head_{nullptr};
};

// Predicts a residual on top of the corrupted input.
class TinyUNet : public Network {
 public:
  TinyUNet(const ArchitectureSpec& spec, bool nonlocal) : nonlocal_(nonlocal) {
    if (spec.height % 4 != 0 || spec.width % 4 != 0)
      throw std::invalid_argument("unet-tiny: input height and width must be multiples of 4");
    enc1_ = register_module("enc1", conv3x3(spec.in_channels, 16));
    enc2_ = register_module("enc2", conv3x3(16, 32));
    bottleneck_ = register_module("bottleneck", conv3x3(32, 32));
    dec2_ = register_module("dec2", conv3x3(64, 16));
    dec1_ = register_module("dec1", conv3x3(32, 16));
    out_ = register_module("out", torch::nn::Conv2d(torch::nn::Conv2dOptions(16, spec.in_channels, 1)));
  }

  ForwardResult forward(const torch::Tensor& x) override {
    ForwardResult r;
    auto pool = F::MaxPool2dFuncOptions(2);
    auto e1 = torch::relu(enc1_->forward(x));
    auto e2 = torch::relu(enc2_->forward(F::max_pool2d(e1, pool)));
    auto b = torch::relu(bottleneck_->forward(F::max_pool2d(e2, pool)));
    auto nl = nonlocal_block(b);
    r.nonlocal_attention = nl.attention;
    if (nonlocal_) b = nl.features;
    auto up = F::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest);
    auto d2 = torch::relu(dec2_->forward(torch::cat({F::interpolate(b, up), e2}, 1)));
    auto d1 = torch::relu(dec1_->forward(torch::cat({F::interpolate(d2, up), e1}, 1)));
    r.output = x + out_->forward(d1);
    r.features.emplace("enc1", e1);
    r.features.emplace("enc2", e2);
    r.features.emplace("bottleneck", b);
    return r;
  }

  std::string architecture() const override { return nonlocal_ ? "unet-tiny+nonlocal" : "unet-tiny"; }
  std::string default_attention_layer() const override { return "bottleneck"; }
  std::vector<std::string> layer_names() const override { return {"enc1", "enc2", "bottleneck"}; }

 private:
  bool nonlocal_;
  torch::nn::Conv2d enc1_{nullptr}, enc2_{nullptr}, bottleneck_{nullptr}, dec2_{nullptr}, dec1_{nullptr},
      out_{nullptr};
};

}  // namespace

NetworkPtr build_network(const ArchitectureSpec& spec) {
  if (spec.in_channels < 1 || spec.height < 1 || spec.width < 1)
    throw std::invalid_argument("architecture: invalid input geometry");
  if (spec.name == "cnn-small") return std::make_shared<ConvClassifier>(spec, 16, 32, 32);
  if (spec.name == "cnn-wide") return std::make_shared<ConvClassifier>(spec, 32, 64, 64);
  if (spec.name == "seg-tiny") return std::make_shared<SegmentationNet>(spec);
  if (spec.name == "unet-tiny") return std::make_shared<TinyUNet>(spec, false);
  if (spec.name == "unet-tiny+nonlocal") return std::make_shared<TinyUNet>(spec, true);
  throw std::invalid_argument("unknown architecture '" + spec.name + "'");
}

std::vector<std::string> registered_architectures() {
  return {"cnn-small", "cnn-wide", "seg-tiny", "unet-tiny", "unet-tiny+nonlocal"};
}

torch::Tensor flatten_parameters(const Network& net) {
  std::vector<torch::Tensor> parts;
  for (const auto& p : net.parameters()) parts.push_back(p.detach().to(torch::kFloat32).flatten());
  return torch::cat(parts);
}

void load_flat_parameters(Network& net, const torch::Tensor& flat) {
  torch::NoGradGuard guard;
  std::int64_t offset = 0;
  for (auto& p : net.parameters()) {
    auto n = p.numel();
    if (offset + n > flat.numel()) throw std::invalid_argument("parameter vector too short");
    p.copy_(flat.slice(0, offset, offset + n).view(p.sizes()).to(p.dtype()));
    offset += n;
  }
  if (offset != flat.numel()) throw std::invalid_argument("parameter vector too long");
}

std::int64_t parameter_count(const Network& net) {
  std::int64_t n = 0;
  for (const auto& p : net.parameters()) n += p.numel();
  return n;
}

void save_network(const Network& net, const std::string& path) {
  torch::serialize::OutputArchive archive;
  net.save(archive);
  auto tmp = path + ".tmp." + std::to_string(::getpid());
  archive.save_to(tmp);
  std::filesystem::rename(tmp, path);
}

void load_network(Network& net, const std::string& path) {
  torch::serialize::InputArchive archive;
  archive.load_from(path);
  net.load(archive);
}

}  // namespace fedad
