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
#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>

#include "fedad/io.hpp"
#include "fedad/partition.hpp"

namespace fedad {

void to_json(nlohmann::json& j, const SyntheticConfig& c) {
  j = nlohmann::json{{"task", to_string(c.task)},
                     {"num_samples", c.num_samples},
                     {"num_classes", c.num_classes},
                     {"height", c.height},
                     {"width", c.width},
                     {"seed", c.seed},
                     {"prototype_seed", c.prototype_seed},
                     {"noise", c.noise},
                     {"glyph_size", c.glyph_size},
                     {"contrast", c.contrast},
                     {"distractor_contrast", c.distractor_contrast},
                     {"ellipses", c.ellipses},
                     {"acceleration", c.acceleration},
                     {"center_fraction", c.center_fraction},
                     {"mask_seed", c.mask_seed}};
}

void from_json(const nlohmann::json& j, SyntheticConfig& c) {
  SyntheticConfig d;
  c.task = task_from_string(j.value("task", to_string(d.task)));
  c.num_samples = j.value("num_samples", d.num_samples);
  c.num_classes = j.value("num_classes", d.num_classes);
  c.height = j.value("height", d.height);
  c.width = j.value("width", d.width);
  c.seed = j.value("seed", d.seed);
  c.prototype_seed = j.value("prototype_seed", d.prototype_seed);
  c.noise = j.value("noise", d.noise);
  c.glyph_size = j.value("glyph_size", d.glyph_size);
  c.contrast = j.value("contrast", d.contrast);
  c.distractor_contrast = j.value("distractor_contrast", d.distractor_contrast);
  c.ellipses = j.value("ellipses", d.ellipses);
  c.acceleration = j.value("acceleration", d.acceleration);
  c.center_fraction = j.value("center_fraction", d.center_fraction);
  c.mask_seed = j.value("mask_seed", d.mask_seed);
}

namespace {

void check_geometry(const SyntheticConfig& c) {
  if (c.num_samples < 1) throw std::invalid_argument("synthetic: num_samples must be >= 1");
  if (c.height < 4 || c.width < 4) throw std::invalid_argument("synthetic: image must be at least 4x4");
  if (c.noise < 0.0) throw std::invalid_argument("synthetic: noise must be >= 0");
}

Dataset make_classification(const SyntheticConfig& c) {
  if (c.num_classes < 2) throw std::invalid_argument("synthetic: need at least 2 classes");
  if (c.glyph_size < 1 || c.glyph_size > std::min(c.height, c.width))
    throw std::invalid_argument("synthetic: glyph does not fit the image");
  const auto s = c.glyph_size;
  std::mt19937_64 proto_rng(c.prototype_seed);
  std::bernoulli_distribution coin(0.5);
  std::vector<std::vector<float>> glyphs(static_cast<std::size_t>(c.num_classes),
                                         std::vector<float>(static_cast<std::size_t>(s * s)));
  for (auto& g : glyphs)
    for (auto& v : g) v = coin(proto_rng) ? 1.0f : -1.0f;

  std::mt19937_64 rng(c.seed);
  std::normal_distribution<float> gauss(0.0f, static_cast<float>(c.noise));
  std::uniform_int_distribution<std::int64_t> pick_class(0, c.num_classes - 1);
  std::uniform_int_distribution<std::int64_t> pick_row(0, c.height - s);
  std::uniform_int_distribution<std::int64_t> pick_col(0, c.width - s);

  auto images = torch::empty({c.num_samples, 1, c.height, c.width}, torch::kFloat32);
  auto* px = images.data_ptr<float>();
  Dataset d;
  d.labels.resize(static_cast<std::size_t>(c.num_samples));
  d.num_classes = c.num_classes;
  const auto plane = c.height * c.width;
  auto stamp = [&](float* img, const std::vector<float>& g, float scale) {
    auto r0 = pick_row(rng);
    auto c0 = pick_col(rng);
    for (std::int64_t r = 0; r < s; ++r)
      for (std::int64_t q = 0; q < s; ++q)
        img[(r0 + r) * c.width + c0 + q] += scale * g[static_cast<std::size_t>(r * s + q)];
  };
  for (std::int64_t i = 0; i < c.num_samples; ++i) {
    float* img = px + i * plane;
    for (std::int64_t p = 0; p < plane; ++p) img[p] = gauss(rng);
    auto label = pick_class(rng);
    d.labels[static_cast<std::size_t>(i)] = label;
    stamp(img, glyphs[static_cast<std::size_t>(label)], static_cast<float>(c.contrast));
    if (c.distractor_contrast > 0.0) {
      auto other = pick_class(rng);
      if (other == label) other = (other + 1) % c.num_classes;
      stamp(img, glyphs[static_cast<std::size_t>(other)], static_cast<float>(c.distractor_contrast));
    }
  }
  d.inputs = images;
  return d;
}

Dataset make_segmentation(const SyntheticConfig& c) {
  if (c.num_classes < 2) throw std::invalid_argument("synthetic: need at least 2 classes");
  std::mt19937_64 rng(c.seed);
  std::normal_distribution<float> gauss(0.0f, static_cast<float>(c.noise));
  std::uniform_int_distribution<std::int64_t> pick_class(1, c.num_classes - 1);
  std::uniform_int_distribution<int> pick_count(1, 2);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  auto images = torch::empty({c.num_samples, 1, c.height, c.width}, torch::kFloat32);
  auto masks = torch::zeros({c.num_samples, c.height, c.width}, torch::kInt64);
  auto* px = images.data_ptr<float>();
  auto* mk = masks.data_ptr<std::int64_t>();
  const auto plane = c.height * c.width;
  const double max_radius = std::max(2.0, std::min(c.height, c.width) / 4.0);
  for (std::int64_t i = 0; i < c.num_samples; ++i) {
    auto* m = mk + i * plane;
    int objects = pick_count(rng);
    for (int o = 0; o < objects; ++o) {
      auto cls = pick_class(rng);
      double cy = unit(rng) * static_cast<double>(c.height);
      double cx = unit(rng) * static_cast<double>(c.width);
      double radius = 1.5 + unit(rng) * (max_radius - 1.5);
      for (std::int64_t r = 0; r < c.height; ++r)
        for (std::int64_t q = 0; q < c.width; ++q) {
          double dy = static_cast<double>(r) + 0.5 - cy;
          double dx = static_cast<double>(q) + 0.5 - cx;
          if (dy * dy + dx * dx <= radius * radius) m[r * c.width + q] = cls;
        }
    }
    float* img = px + i * plane;
    for (std::int64_t p = 0; p < plane; ++p) {
      auto level = static_cast<float>(c.contrast * static_cast<double>(m[p]) /
                                      static_cast<double>(c.num_classes - 1));
      img[p] = level + gauss(rng);
    }
  }
  Dataset d;
  d.inputs = images;
  d.targets = masks;
  d.num_classes = c.num_classes;
  return d;
}

Dataset make_reconstruction(const SyntheticConfig& c) {
  std::mt19937_64 rng(c.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto clean = torch::zeros({c.num_samples, 1, c.height, c.width}, torch::kFloat32);
  auto* px = clean.data_ptr<float>();
  const auto plane = c.height * c.width;
  const double h = static_cast<double>(c.height);
  const double w = static_cast<double>(c.width);
  for (std::int64_t i = 0; i < c.num_samples; ++i) {
    float* img = px + i * plane;
    for (std::int64_t e = 0; e < c.ellipses; ++e) {
      double cy = (0.2 + 0.6 * unit(rng)) * h;
      double cx = (0.2 + 0.6 * unit(rng)) * w;
      double ay = (0.1 + 0.25 * unit(rng)) * h;
      double ax = (0.1 + 0.25 * unit(rng)) * w;
      double angle = unit(rng) * std::numbers::pi;
      double value = 0.2 + 0.8 * unit(rng);
      double ca = std::cos(angle), sa = std::sin(angle);
      for (std::int64_t r = 0; r < c.height; ++r)
        for (std::int64_t q = 0; q < c.width; ++q) {
          double dy = static_cast<double>(r) + 0.5 - cy;
          double dx = static_cast<double>(q) + 0.5 - cx;
          double u = (dx * ca + dy * sa) / ax;
          double v = (-dx * sa + dy * ca) / ay;
          if (u * u + v * v <= 1.0) img[r * c.width + q] += static_cast<float>(value);
        }
    }
  }
  clean.clamp_(0.0, 1.0);
  auto mask = undersampling_mask(c.height, c.width, c.acceleration, c.center_fraction, c.mask_seed);
  auto corrupted = undersample(clean, mask);
  if (c.noise > 0.0) {
    std::normal_distribution<float> gauss(0.0f, static_cast<float>(c.noise));
    auto noise = torch::empty_like(corrupted);
    auto* np = noise.data_ptr<float>();
    for (std::int64_t p = 0; p < noise.numel(); ++p) np[p] = gauss(rng);
    corrupted = corrupted + noise;
  }
  Dataset d;
  d.inputs = corrupted.contiguous();
  d.targets = clean;
  d.num_classes = 0;
  return d;
}

}  // namespace

torch::Tensor undersampling_mask(std::int64_t height, std::int64_t width, double acceleration,
                                 double center_fraction, std::uint64_t seed) {
  if (!(acceleration >= 1.0)) throw std::invalid_argument("undersampling: acceleration must be >= 1");
  if (!(center_fraction >= 0.0 && center_fraction <= 1.0))
    throw std::invalid_argument("undersampling: center_fraction must lie in [0, 1]");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto centre = static_cast<std::int64_t>(std::llround(center_fraction * static_cast<double>(width)));
  auto mask = torch::zeros({height, width}, torch::kFloat32);
  for (std::int64_t j = 0; j < width; ++j) {
    // unshifted FFT layout: frequency magnitude of column j
    auto freq = std::min(j, width - j);
    bool keep = 2 * freq < std::max<std::int64_t>(centre, 1) || unit(rng) < 1.0 / acceleration;
    if (keep) mask.select(1, j).fill_(1.0f);
  }
  return mask;
}

torch::Tensor undersample(const torch::Tensor& images, const torch::Tensor& mask) {
  auto k = torch::fft::fft2(images.to(torch::kFloat32));
  auto filtered = torch::fft::ifft2(k * mask);
  return torch::abs(filtered).to(torch::kFloat32);
}

Dataset generate_synthetic(const SyntheticConfig& config) {
  check_geometry(config);
  Dataset d;
  switch (config.task) {
    case Task::kClassification: d = make_classification(config); break;
    case Task::kSegmentation: d = make_segmentation(config); break;
    case Task::kReconstruction: d = make_reconstruction(config); break;
  }
  d.checksum = dataset_checksum(d);
  return d;
}

namespace {

torch::Tensor read_pgm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read image " + path.string());
  std::string magic;
  f >> magic;
  if (magic != "P5" && magic != "P2") throw std::runtime_error(path.string() + ": not a PGM image");
  auto next_int = [&]() {
    f >> std::ws;
    while (f.peek() == '#') {
      std::string comment;
      std::getline(f, comment);
      f >> std::ws;
    }
    long v = 0;
    if (!(f >> v)) throw std::runtime_error(path.string() + ": malformed PGM header");
    return v;
  };
  long width = next_int(), height = next_int(), maxval = next_int();
  if (width <= 0 || height <= 0 || maxval <= 0 || maxval > 255)
    throw std::runtime_error(path.string() + ": unsupported PGM geometry or depth");
  auto img = torch::empty({1, height, width}, torch::kFloat32);
  auto* p = img.data_ptr<float>();
  const auto n = height * width;
  if (magic == "P5") {
    f.get();
    std::vector<unsigned char> raw(static_cast<std::size_t>(n));
    f.read(reinterpret_cast<char*>(raw.data()), n);
    if (f.gcount() != n) throw std::runtime_error(path.string() + ": truncated PGM data");
    for (long i = 0; i < n; ++i) p[i] = static_cast<float>(raw[static_cast<std::size_t>(i)]) / static_cast<float>(maxval);
  } else {
    for (long i = 0; i < n; ++i) p[i] = static_cast<float>(next_int()) / static_cast<float>(maxval);
  }
  return img;
}

Dataset load_image_dir(const std::filesystem::path& dir) {
  auto manifest = dir / "labels.csv";
  std::ifstream f(manifest);
  if (!f) throw std::runtime_error("image-dir: missing manifest " + manifest.string());
  std::vector<torch::Tensor> images;
  Dataset d;
  std::string line;
  std::size_t row = 0;
  while (std::getline(f, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (row == 1 && line == "filename,label") continue;
    auto comma = line.find(',');
    auto fail = [&](const std::string& why) {
      throw std::runtime_error("image-dir: labels.csv row " + std::to_string(row) + ": " + why);
    };
    if (comma == std::string::npos || line.find(',', comma + 1) != std::string::npos)
      fail("expected 'filename,label'");
    auto name = line.substr(0, comma);
    auto label_text = line.substr(comma + 1);
    std::int64_t label = 0;
    try {
      std::size_t used = 0;
      label = std::stoll(label_text, &used);
      if (used != label_text.size()) fail("label '" + label_text + "' is not an integer");
    } catch (const std::logic_error&) {
      fail("label '" + label_text + "' is not an integer");
    }
    if (label < 0) fail("negative label");
    if (name.empty()) fail("empty filename");
    torch::Tensor img;
    try {
      img = read_pgm(dir / name);
    } catch (const std::runtime_error& e) {
      fail(e.what());
    }
    if (!images.empty() && img.sizes() != images.front().sizes())
      fail("image " + name + " has a different shape than the first image");
    images.push_back(img);
    d.labels.push_back(label);
  }
  if (images.empty()) throw std::runtime_error("image-dir: manifest lists no images");
  d.inputs = torch::stack(images);
  d.num_classes = *std::max_element(d.labels.begin(), d.labels.end()) + 1;
  return d;
}

Dataset load_archive(const std::filesystem::path& path) {
  auto tensors = io::read_tensor_archive(path);
  torch::Tensor images, labels;
  try {
    images = io::find_tensor(tensors, "images").to(torch::kFloat32);
    labels = io::find_tensor(tensors, "labels").to(torch::kInt64);
  } catch (const std::out_of_range& e) {
    throw std::runtime_error(std::string("archive: ") + e.what());
  }
  if (images.dim() == 3) images = images.unsqueeze(1);
  if (images.dim() != 4) throw std::runtime_error("archive: images must be N x H x W or N x C x H x W");
  if (labels.dim() != 1 || labels.size(0) != images.size(0))
    throw std::runtime_error("archive: labels length does not match image count");
  Dataset d;
  d.inputs = images.contiguous();
  d.labels.assign(labels.data_ptr<std::int64_t>(), labels.data_ptr<std::int64_t>() + labels.numel());
  d.num_classes = d.labels.empty() ? 0 : *std::max_element(d.labels.begin(), d.labels.end()) + 1;
  return d;
}

}  // namespace

Dataset load_dataset(const std::filesystem::path& path, const std::string& format) {
  if (!std::filesystem::exists(path)) throw std::runtime_error("dataset path does not exist: " + path.string());
  Dataset d;
  if (format == "synthetic") {
    auto j = nlohmann::json::parse(io::read_file(path));
    d = generate_synthetic(j.get<SyntheticConfig>());
  } else if (format == "image-dir") {
    d = load_image_dir(path);
  } else if (format == "archive") {
    d = load_archive(path);
  } else {
    throw std::invalid_argument("unknown dataset format '" + format + "'");
  }
  d.checksum = dataset_checksum(d);
  return d;
}

}  // namespace fedad
