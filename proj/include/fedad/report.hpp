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

#include <array>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "fedad/federation.hpp"

namespace fedad {

struct Series {
  std::string name;
  std::vector<std::pair<double, double>> points;
};

std::string svg_line_chart(const std::vector<Series>& series, const std::string& title, const std::string& x_label,
                           const std::string& y_label);

// One group of bars per category, one bar per series.
std::string svg_bar_chart(const std::vector<std::string>& categories, const std::vector<Series>& series,
                          const std::string& title, const std::string& y_label);

// Grayscale image with the consensus map thresholded at `threshold` filled in
// and the diversity map's threshold contour outlined. Maps are resampled to
// the image grid by nearest neighbour.
std::string svg_attention_overlay(const torch::Tensor& image, const torch::Tensor& consensus,
                                  const torch::Tensor& diversity, double threshold, const std::string& title);

// Mask cells at or above threshold -> boundary segments (x0, y0, x1, y1) in
// cell units.
std::vector<std::array<double, 4>> threshold_contour(const torch::Tensor& map, double threshold);

struct ReportFiles {
  std::vector<std::filesystem::path> figures;
  std::vector<std::filesystem::path> tables;
};

// Reads the evaluated run under fed.out_dir() and writes figures/ and tables.
ReportFiles render_report(Federation& fed, std::int64_t overlay_samples = 4);

}  // namespace fedad
