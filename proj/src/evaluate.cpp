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
#include "fedad/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

#include "fedad/training.hpp"

namespace fedad {

void to_json(nlohmann::json& j, const MetricReport& r) {
  nlohmann::json per_class = nlohmann::json::array();
  for (const auto& v : r.per_class) per_class.push_back(v ? nlohmann::json(*v) : nlohmann::json(nullptr));
  j = nlohmann::json{{"task", to_string(r.task)}, {"metric", r.metric}, {"per_class", per_class},
                     {"mean", r.mean},            {"extras", r.extras}, {"seed", r.seed},
                     {"config_hash", r.config_hash}, {"warnings", r.warnings}};
}

void from_json(const nlohmann::json& j, MetricReport& r) {
  r.task = task_from_string(j.at("task").get<std::string>());
  r.metric = j.at("metric").get<std::string>();
  r.per_class.clear();
  for (const auto& v : j.at("per_class"))
    r.per_class.push_back(v.is_null() ? std::nullopt : std::optional<double>(v.get<double>()));
  r.mean = j.at("mean").get<double>();
  r.extras = j.value("extras", std::map<std::string, double>{});
  r.seed = j.value("seed", std::uint64_t{0});
  r.config_hash = j.value("config_hash", std::string{});
  r.warnings = j.value("warnings", std::vector<std::string>{});
}

double mean_of_present(const std::vector<std::optional<double>>& values) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& v : values)
    if (v) {
      sum += *v;
      ++n;
    }
  return n ? sum / static_cast<double>(n) : 0.0;
}

std::optional<double> binary_auc(std::span<const double> scores, std::span<const std::int64_t> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("auc: score/label length mismatch");
  const auto n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    double mid = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t t = i; t <= j; ++t) rank[order[t]] = mid;
    i = j + 1;
  }
  double pos = 0.0, rank_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw std::invalid_argument("auc: labels must be binary");
    if (labels[i] == 1) {
      pos += 1.0;
      rank_sum += rank[i];
    }
  }
  double neg = static_cast<double>(n) - pos;
  if (pos == 0.0 || neg == 0.0) return std::nullopt;
  return (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

AucResult auc(const torch::Tensor& scores, const torch::Tensor& labels) {
  if (scores.dim() != 2 || scores.sizes() != labels.sizes())
    throw std::invalid_argument("auc: scores and labels must both be N x C");
  auto s = scores.to(torch::kFloat64).contiguous();
  auto l = labels.to(torch::kInt64).contiguous();
  AucResult r;
  for (std::int64_t c = 0; c < s.size(1); ++c) {
    auto sc = s.select(1, c).contiguous();
    auto lc = l.select(1, c).contiguous();
    auto value = binary_auc({sc.data_ptr<double>(), static_cast<std::size_t>(sc.numel())},
                            {lc.data_ptr<std::int64_t>(), static_cast<std::size_t>(lc.numel())});
    if (!value) r.warnings.push_back("class " + std::to_string(c) + " has a single label value; excluded from mean");
    r.per_class.push_back(value);
  }
  r.mean = mean_of_present(r.per_class);
  return r;
}

AucResult auc(const torch::Tensor& scores, std::span<const std::int64_t> labels, std::int64_t num_classes) {
  auto onehot = torch::zeros({static_cast<std::int64_t>(labels.size()), num_classes}, torch::kInt64);
  for (std::size_t i = 0; i < labels.size(); ++i) onehot[static_cast<std::int64_t>(i)][labels[i]] = 1;
  return auc(scores, onehot);
}

double dice(const torch::Tensor& prediction, const torch::Tensor& truth) {
  if (prediction.sizes() != truth.sizes()) throw std::invalid_argument("dice: shape mismatch");
  auto p = prediction.to(torch::kBool);
  auto t = truth.to(torch::kBool);
  auto inter = (p & t).sum().item<double>();
  auto total = p.sum().item<double>() + t.sum().item<double>();
  return total == 0.0 ? 1.0 : 2.0 * inter / total;
}

namespace {

torch::Tensor as_plane(const torch::Tensor& image) {
  auto x = image.to(torch::kFloat64);
  while (x.dim() > 2 && x.size(0) == 1) x = x.squeeze(0);
  if (x.dim() != 2) throw std::invalid_argument("image metrics expect a single H x W plane");
  return x;
}

torch::Tensor gaussian_window(std::int64_t size, double sigma) {
  auto coords = torch::arange(size, torch::kFloat64) - static_cast<double>(size - 1) / 2.0;
  auto g = torch::exp(-(coords * coords) / (2.0 * sigma * sigma));
  g = g / g.sum();
  return torch::outer(g, g).view({1, 1, size, size});
}

}  // namespace

double ssim(const torch::Tensor& image, const torch::Tensor& reference, double data_range) {
  auto x = as_plane(image);
  auto y = as_plane(reference);
  if (x.sizes() != y.sizes()) throw std::invalid_argument("ssim: shape mismatch");
  if (!(data_range > 0.0)) throw std::invalid_argument("ssim: data range must be positive");
  constexpr std::int64_t kWindow = 11;
  if (x.size(0) < kWindow || x.size(1) < kWindow)
    throw std::invalid_argument("ssim: image smaller than the 11x11 window");
  auto w = gaussian_window(kWindow, 1.5);
  auto filt = [&](const torch::Tensor& t) { return torch::conv2d(t.view({1, 1, t.size(0), t.size(1)}), w); };
  auto mu_x = filt(x), mu_y = filt(y);
  auto sxx = filt(x * x) - mu_x * mu_x;
  auto syy = filt(y * y) - mu_y * mu_y;
  auto sxy = filt(x * y) - mu_x * mu_y;
  const double c1 = std::pow(0.01 * data_range, 2);
  const double c2 = std::pow(0.03 * data_range, 2);
  auto map = ((2 * mu_x * mu_y + c1) * (2 * sxy + c2)) / ((mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2));
  return map.mean().item<double>();
}

double psnr(const torch::Tensor& image, const torch::Tensor& reference, double data_range) {
  if (image.sizes() != reference.sizes()) throw std::invalid_argument("psnr: shape mismatch");
  if (!(data_range > 0.0)) throw std::invalid_argument("psnr: data range must be positive");
  auto diff = image.to(torch::kFloat64) - reference.to(torch::kFloat64);
  double mse = (diff * diff).mean().item<double>();
  if (mse <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(data_range * data_range / mse));
}

GeneralizationBound weighted_generalization_bound(double weighted_risk, std::span<const double> divergences,
                                                  std::span<const double> weights, std::int64_t vc_dimension,
                                                  std::int64_t sample_size, double delta, double lambda) {
  if (!(delta > 0.0 && delta < 1.0)) throw std::invalid_argument("bound: delta must lie in (0, 1)");
  if (sample_size < 1) throw std::invalid_argument("bound: N must be >= 1");
  if (vc_dimension < 0) throw std::invalid_argument("bound: VC dimension must be >= 0");
  if (divergences.size() != weights.size() || weights.empty())
    throw std::invalid_argument("bound: need one divergence per weight");
  double wsum = 0.0;
  for (double w : weights) {
    if (w < 0.0) throw std::invalid_argument("bound: weights must be non-negative");
    wsum += w;
  }
  if (std::abs(wsum - 1.0) > 1e-9) throw std::invalid_argument("bound: weights must sum to 1");
  GeneralizationBound b;
  b.empirical_risk = weighted_risk;
  for (std::size_t k = 0; k < weights.size(); ++k) b.divergence_term += weights[k] * 0.5 * divergences[k];
  const double n = static_cast<double>(sample_size);
  b.complexity_term =
      4.0 * std::sqrt((2.0 * static_cast<double>(vc_dimension) * std::log(2.0 * n) + std::log(2.0 / delta)) / n);
  b.lambda = lambda;
  return b;
}

double proxy_divergence(const torch::Tensor& features_a, const torch::Tensor& features_b, std::uint64_t seed) {
  if (features_a.dim() != 2 || features_b.dim() != 2 || features_a.size(1) != features_b.size(1))
    throw std::invalid_argument("proxy_divergence: features must be n x D with equal D");
  if (features_a.size(0) < 2 || features_b.size(0) < 2)
    throw std::invalid_argument("proxy_divergence: need at least two samples per domain");
  auto x = torch::cat({features_a, features_b}).to(torch::kFloat64);
  auto y = torch::cat({torch::zeros({features_a.size(0)}, torch::kFloat64),
                       torch::ones({features_b.size(0)}, torch::kFloat64)});
  const auto n = x.size(0);
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  auto half = n / 2;
  auto train_idx = index_tensor({order.begin(), order.begin() + half});
  auto test_idx = index_tensor({order.begin() + half, order.end()});
  auto xtr = x.index_select(0, train_idx), ytr = y.index_select(0, train_idx);
  auto xte = x.index_select(0, test_idx), yte = y.index_select(0, test_idx);
  auto mu = xtr.mean(0);
  auto sd = xtr.std(0).clamp_min(1e-12);
  xtr = (xtr - mu) / sd;
  xte = (xte - mu) / sd;

  // Full-batch gradient descent on the L2-regularised logistic loss.
  auto w = torch::zeros({x.size(1)}, torch::kFloat64);
  double bias = 0.0;
  constexpr double kStep = 0.5, kRidge = 1e-3;
  for (int it = 0; it < 300; ++it) {
    auto p = torch::sigmoid(xtr.matmul(w) + bias);
    auto g = p - ytr;
    w = w - kStep * (xtr.t().matmul(g) / static_cast<double>(half) + kRidge * w);
    bias -= kStep * g.mean().item<double>();
  }
  auto predicted = (xte.matmul(w) + bias) > 0;
  auto err = (predicted.to(torch::kFloat64) != yte).to(torch::kFloat64).mean().item<double>();
  return std::clamp(2.0 * (1.0 - 2.0 * err), 0.0, 2.0);
}

// ---------------------------------------------------------------------------

torch::Tensor predict(Network& net, const torch::Tensor& inputs, std::int64_t batch_size) {
  torch::NoGradGuard guard;
  net.eval();
  std::vector<torch::Tensor> out;
  for (std::int64_t s = 0; s < inputs.size(0); s += batch_size)
    out.push_back(net.forward(inputs.slice(0, s, std::min(inputs.size(0), s + batch_size))).output);
  return torch::cat(out);
}

MetricReport score_classification(const torch::Tensor& logits, const Dataset& data) {
  if (data.labels.empty()) throw std::invalid_argument("evaluate_classifier: dataset has no labels");
  auto probs = torch::softmax(logits.to(torch::kFloat64), 1);
  auto a = auc(probs, data.labels, logits.size(1));
  auto pred = logits.argmax(1);
  auto truth = torch::tensor(data.labels, torch::kInt64);
  MetricReport r;
  r.task = Task::kClassification;
  r.metric = "auc";
  r.per_class = a.per_class;
  r.mean = a.mean;
  r.warnings = a.warnings;
  r.extras["accuracy"] = pred.eq(truth).to(torch::kFloat64).mean().item<double>();
  return r;
}

MetricReport score_segmentation(const torch::Tensor& logits, const Dataset& data) {
  if (!data.targets.defined()) throw std::invalid_argument("evaluate_segmentation: dataset has no masks");
  auto pred = logits.argmax(1);
  MetricReport r;
  r.task = Task::kSegmentation;
  r.metric = "dice";
  // Background (class 0) is not scored.
  for (std::int64_t c = 1; c < data.num_classes; ++c) {
    double sum = 0.0;
    std::int64_t counted = 0;
    for (std::int64_t i = 0; i < pred.size(0); ++i) {
      auto t = data.targets[i].eq(c);
      if (!t.any().item<bool>()) continue;
      sum += dice(pred[i].eq(c), t);
      ++counted;
    }
    r.per_class.push_back(counted ? std::optional<double>(sum / static_cast<double>(counted)) : std::nullopt);
  }
  r.mean = mean_of_present(r.per_class);
  r.extras["pixel_accuracy"] = pred.eq(data.targets).to(torch::kFloat64).mean().item<double>();
  return r;
}

MetricReport score_reconstruction(const torch::Tensor& out, const Dataset& data, double data_range) {
  if (!data.targets.defined()) throw std::invalid_argument("evaluate_reconstruction: dataset has no clean images");
  double ssim_sum = 0.0, psnr_sum = 0.0;
  for (std::int64_t i = 0; i < out.size(0); ++i) {
    ssim_sum += ssim(out[i], data.targets[i], data_range);
    psnr_sum += psnr(out[i], data.targets[i], data_range);
  }
  auto n = static_cast<double>(out.size(0));
  MetricReport r;
  r.task = Task::kReconstruction;
  r.metric = "ssim";
  r.per_class = {ssim_sum / n};
  r.mean = ssim_sum / n;
  r.extras["psnr"] = psnr_sum / n;
  return r;
}

MetricReport score_outputs(const torch::Tensor& outputs, const Dataset& data, Task task) {
  if (outputs.size(0) != data.size()) throw std::invalid_argument("score_outputs: output count does not match dataset");
  switch (task) {
    case Task::kClassification: return score_classification(outputs, data);
    case Task::kSegmentation: return score_segmentation(outputs, data);
    case Task::kReconstruction: return score_reconstruction(outputs, data, 1.0);
  }
  throw std::invalid_argument("score_outputs: unknown task");
}

MetricReport evaluate_classifier(Network& net, const Dataset& data) {
  return score_classification(predict(net, data.inputs), data);
}

MetricReport evaluate_segmentation(Network& net, const Dataset& data) {
  return score_segmentation(predict(net, data.inputs), data);
}

MetricReport evaluate_reconstruction(Network& net, const Dataset& data, double data_range) {
  return score_reconstruction(predict(net, data.inputs), data, data_range);
}

MetricReport evaluate_model(Network& net, const Dataset& data, Task task) {
  return score_outputs(predict(net, data.inputs), data, task);
}

double headline_score(const MetricReport& r) {
  if (r.task == Task::kClassification) return r.extras.at("accuracy");
  return r.mean;
}

std::string comparison_csv(const std::vector<ComparisonRow>& rows) {
  std::set<std::string> metric_names;
  for (const auto& r : rows)
    for (const auto& [k, v] : r.metrics) metric_names.insert(k);
  std::ostringstream out;
  out << "method,train-domains,test-domain";
  for (const auto& m : metric_names) out << ',' << m;
  out << '\n';
  for (const auto& r : rows) {
    out << r.method << ',' << r.train_domains << ',' << r.test_domain;
    for (const auto& m : metric_names) {
      out << ',';
      if (auto it = r.metrics.find(m); it != r.metrics.end()) out << it->second;
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace fedad
