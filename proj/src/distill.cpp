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
#include "fedad/distill.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace fedad {

void DistillConfig::validate() const {
  if (!(tau > 0.0)) throw std::invalid_argument("distill: tau must be positive");
  if (rounds < 1) throw std::invalid_argument("distill: rounds must be >= 1");
  optimizer.validate();
  mask.validate();
}

DistillConfig DistillConfig::defaults_for(Task task) {
  DistillConfig c;
  c.task = task;
  if (task == Task::kReconstruction) {
    c.optimizer.name = "rmsprop";
    c.optimizer.schedule = "constant";
    c.optimizer.lr = 1e-4;
    c.optimizer.lr_min = 1e-4;
    c.optimizer.epochs = 5;
  } else {
    c.optimizer.name = "sgd";
    c.optimizer.schedule = "cosine";
    c.optimizer.lr = 1e-2;
    c.optimizer.lr_min = 1e-3;
    c.optimizer.epochs = 20;
  }
  return c;
}

void to_json(nlohmann::json& j, const DistillConfig& c) {
  j = nlohmann::json{
      {"task", to_string(c.task)},
      {"tau", c.tau},
      {"optimizer", c.optimizer},
      {"use_lower", c.toggles.use_lower},
      {"use_upper", c.toggles.use_upper},
      {"use_kl", c.toggles.use_kl},
      {"coefficients", {{"w", c.coefficients.w}, {"low", c.coefficients.low}, {"up", c.coefficients.up}}},
      {"rho", c.mask.rho},
      {"b", c.mask.b},
      {"bound_scaling", c.scaling == BoundScaling::kVerbatim ? "verbatim" : "normalized"},
      {"one_shot", c.one_shot},
      {"rounds", c.rounds},
      {"attention_layer", c.attention_layer},
      {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, DistillConfig& c) {
  auto task = task_from_string(j.value("task", std::string("classification")));
  c = DistillConfig::defaults_for(task);
  c.tau = j.value("tau", c.tau);
  if (j.contains("optimizer")) {
    // start from the task defaults, override what is given
    auto merged = nlohmann::json(c.optimizer);
    merged.update(j.at("optimizer"));
    c.optimizer = merged.get<OptimizerSpec>();
  }
  c.toggles.use_lower = j.value("use_lower", c.toggles.use_lower);
  c.toggles.use_upper = j.value("use_upper", c.toggles.use_upper);
  c.toggles.use_kl = j.value("use_kl", c.toggles.use_kl);
  if (j.contains("coefficients")) {
    const auto& k = j.at("coefficients");
    c.coefficients.w = k.value("w", 1.0);
    c.coefficients.low = k.value("low", 1.0);
    c.coefficients.up = k.value("up", 1.0);
  }
  c.mask.rho = j.value("rho", c.mask.rho);
  c.mask.b = j.value("b", c.mask.b);
  auto scaling = j.value("bound_scaling", std::string("verbatim"));
  if (scaling == "verbatim") c.scaling = BoundScaling::kVerbatim;
  else if (scaling == "normalized") c.scaling = BoundScaling::kNormalized;
  else throw std::invalid_argument("distill: bound_scaling must be 'verbatim' or 'normalized'");
  c.one_shot = j.value("one_shot", c.one_shot);
  c.rounds = j.value("rounds", c.rounds);
  c.attention_layer = j.value("attention_layer", c.attention_layer);
  c.seed = j.value("seed", c.seed);
}

void to_json(nlohmann::json& j, const LossRecord& r) {
  j = nlohmann::json{{"step", r.step}, {"total", r.total}, {"L_w", r.w}, {"L_low", r.low}, {"L_up", r.up}};
}

void from_json(const nlohmann::json& j, LossRecord& r) {
  j.at("step").get_to(r.step);
  j.at("total").get_to(r.total);
  j.at("L_w").get_to(r.w);
  j.at("L_low").get_to(r.low);
  j.at("L_up").get_to(r.up);
}

LossRecord LossBreakdown::record(std::int64_t step) const {
  return {step, total.item<double>(), w.item<double>(), low.item<double>(), up.item<double>()};
}

// ---------------------------------------------------------------------------

StudentOutputs student_forward(Network& student, const torch::Tensor& inputs, const DistillConfig& config,
                               bool with_attention, bool create_graph) {
  StudentOutputs out;
  if (!with_attention) {
    out.prediction = student.forward(inputs).output;
    return out;
  }
  switch (config.task) {
    case Task::kClassification: {
      auto layer = config.attention_layer.empty() ? student.default_attention_layer() : config.attention_layer;
      auto cam = gradcam_all(student, inputs, layer, create_graph);
      out.prediction = cam.logits;
      out.attention = normalize_maps(cam.maps);
      break;
    }
    case Task::kSegmentation: {
      out.prediction = student.forward(inputs).output;
      out.attention = segmentation_attention_maps(out.prediction, config.tau);
      break;
    }
    case Task::kReconstruction: {
      auto fw = student.forward(inputs);
      if (!fw.nonlocal_attention.defined())
        throw std::invalid_argument("distill: student " + student.architecture() + " exposes no non-local attention");
      out.prediction = fw.output;
      out.attention = normalize_maps(fw.nonlocal_attention);
      break;
    }
  }
  return out;
}

namespace {

torch::Tensor zero_scalar() { return torch::zeros({}, torch::kFloat64); }

void check_targets(const StudentOutputs& student, const BundleSet& targets, bool needs_attention) {
  if (student.prediction.sizes() != targets.z_hat.sizes())
    throw std::invalid_argument("distill loss: student output shape does not match the ensemble target");
  if (needs_attention) {
    if (!targets.lower.defined() || !targets.upper.defined())
      throw std::invalid_argument("distill loss: missing attention bounds");
    if (!student.attention.defined()) throw std::invalid_argument("distill loss: student attention missing");
  }
}

// Resamples student maps onto the bundle's spatial grid when the student and
// teacher attention layers differ in resolution.
torch::Tensor match_resolution(const torch::Tensor& student, const torch::Tensor& target) {
  if (student.sizes() == target.sizes()) return student;
  if (student.dim() != 4 || target.dim() != 4 || student.size(0) != target.size(0) ||
      student.size(1) != target.size(1))
    throw std::invalid_argument("distill loss: attention maps cannot be aligned");
  namespace F = torch::nn::functional;
  return F::interpolate(student, F::InterpolateFuncOptions()
                                     .size(std::vector<std::int64_t>{target.size(2), target.size(3)})
                                     .mode(torch::kBilinear)
                                     .align_corners(false));
}

struct BoundTerms {
  torch::Tensor low;  // per sample
  torch::Tensor up;
  std::int64_t degenerate_lower = 0;
  std::int64_t degenerate_upper = 0;
};

// Bound losses averaged over every axis but the batch axis. Maps are
// N x C x h x w (per class) or N x hw x hw.
BoundTerms bound_terms(const torch::Tensor& student_attention, const BundleSet& targets, const DistillConfig& config) {
  BoundTerms t;
  auto batch = targets.z_hat.size(0);
  auto zeros = torch::zeros({batch}, torch::kFloat64);
  t.low = zeros;
  t.up = zeros;
  if (!config.toggles.use_lower && !config.toggles.use_upper) return t;
  auto student = match_resolution(student_attention, targets.lower).to(torch::kFloat64);
  auto lower = targets.lower.to(torch::kFloat64);
  auto upper = targets.upper.to(torch::kFloat64);
  BoundLossOptions opts{config.mask, config.scaling};
  auto per_sample = [&](const torch::Tensor& loss) {
    return loss.dim() > 1 ? loss.flatten(1).mean(1) : loss;
  };
  if (config.toggles.use_lower) {
    auto r = lower_bound_loss(student, lower, opts);
    t.low = per_sample(r.loss);
    t.degenerate_lower = r.degenerate.sum().item<std::int64_t>();
  }
  if (config.toggles.use_upper) {
    auto r = upper_bound_loss(student, upper, opts);
    t.up = per_sample(r.loss);
    t.degenerate_upper = r.degenerate.sum().item<std::int64_t>();
  }
  return t;
}

LossBreakdown assemble(const torch::Tensor& w, const BoundTerms& bounds, const DistillConfig& config) {
  LossBreakdown b;
  b.w = config.coefficients.w * w.mean();
  b.low = config.toggles.use_lower ? config.coefficients.low * bounds.low.mean() : zero_scalar();
  b.up = config.toggles.use_upper ? config.coefficients.up * bounds.up.mean() : zero_scalar();
  b.total = b.w + b.low + b.up;
  b.degenerate_lower = bounds.degenerate_lower;
  b.degenerate_upper = bounds.degenerate_upper;
  return b;
}

}  // namespace

LossBreakdown classification_loss(const StudentOutputs& student, const BundleSet& targets, const DistillConfig& config) {
  const bool attention = config.toggles.use_lower || config.toggles.use_upper;
  check_targets(student, targets, attention);
  auto z = student.prediction.to(torch::kFloat64);
  auto z_hat = targets.z_hat.to(torch::kFloat64);
  if (z.dim() < 2 || z.size(1) < 1) throw std::invalid_argument("classification_loss: need at least one class");
  torch::Tensor w;
  if (config.toggles.use_kl) {
    if (z.dim() == 2) {
      w = kl_distill_loss(z_hat, z, config.tau);
    } else {
      // per-pixel KL over the class axis, averaged over pixels
      w = kl_distill_loss(z_hat.movedim(1, -1), z.movedim(1, -1), config.tau).flatten(1).mean(1);
    }
  } else {
    w = l2_logit_loss(z_hat, z, /*batch_dims=*/2).mean(1);  // (1/C) sum_c ||z~c - z^c||
  }
  return assemble(w, attention ? bound_terms(student.attention, targets, config) : BoundTerms{
      torch::zeros({z.size(0)}, torch::kFloat64), torch::zeros({z.size(0)}, torch::kFloat64)}, config);
}

LossBreakdown reconstruction_loss(const StudentOutputs& student, const BundleSet& targets, const DistillConfig& config) {
  const bool attention = config.toggles.use_lower || config.toggles.use_upper;
  check_targets(student, targets, attention);
  auto z = student.prediction.to(torch::kFloat64);
  auto z_hat = targets.z_hat.to(torch::kFloat64);
  auto w = l2_logit_loss(z_hat, z, /*batch_dims=*/1);
  return assemble(w, attention ? bound_terms(student.attention, targets, config) : BoundTerms{
      torch::zeros({z.size(0)}, torch::kFloat64), torch::zeros({z.size(0)}, torch::kFloat64)}, config);
}

LossBreakdown distill_loss(const StudentOutputs& student, const BundleSet& targets, const DistillConfig& config) {
  return config.task == Task::kReconstruction ? reconstruction_loss(student, targets, config)
                                              : classification_loss(student, targets, config);
}

NetworkPtr build_student(const ArchitectureSpec& spec) { return build_network(spec); }

void distill_epoch(StudentState& state, const PublicDataset& data, BundleSource& bundles,
                   const DistillConfig& config, Trainer& trainer) {
  if (!state.model) throw std::invalid_argument("distill_epoch: no student model");
  if (bundles.public_id() != data.id || bundles.size() != data.size())
    throw std::invalid_argument("distill_epoch: bundles do not align with the public batches (sample-id check)");
  const bool attention = config.toggles.use_lower || config.toggles.use_upper;
  auto& student = *state.model;
  student.train();
  std::mt19937_64 rng(mix_seed(config.seed, static_cast<std::uint64_t>(state.epoch)));
  for (const auto& batch : make_batches(data.size(), config.optimizer.batch_size, rng)) {
    auto inputs = data.samples.index_select(0, index_tensor(batch));
    auto targets = bundles.fetch(batch, inputs);
    if (targets.size() != static_cast<std::int64_t>(batch.size()) || targets.public_id != data.id)
      throw std::invalid_argument("distill_epoch: bundle/batch misalignment");
    trainer.zero_grad();
    auto outputs = student_forward(student, inputs, config, attention);
    auto loss = distill_loss(outputs, targets, config);
    if (!std::isfinite(loss.total.item<double>()))
      throw std::runtime_error("distill_epoch: non-finite loss at step " + std::to_string(state.step));
    loss.total.backward();
    trainer.step();
    state.history.push_back(loss.record(state.step));
    ++state.step;
  }
  ++state.epoch;
}

StudentState distill(NetworkPtr student, const PublicDataset& data, BundleSource& bundles,
                     const DistillConfig& config) {
  config.validate();
  if (data.size() < 1) throw std::invalid_argument("distill: empty public dataset");
  StudentState state;
  state.model = std::move(student);
  auto batches_per_epoch = (data.size() + config.optimizer.batch_size - 1) / config.optimizer.batch_size;
  Trainer trainer(state.model->parameters(), config.optimizer, batches_per_epoch * config.optimizer.epochs);
  for (std::int64_t e = 0; e < config.optimizer.epochs; ++e) distill_epoch(state, data, bundles, config, trainer);
  state.model->eval();
  return state;
}

std::string loss_history_csv(const std::vector<LossRecord>& history) {
  std::ostringstream out;
  out << "step,total,L_w,L_low,L_up\n" << std::setprecision(10);
  for (const auto& r : history) out << r.step << ',' << r.total << ',' << r.w << ',' << r.low << ',' << r.up << '\n';
  return out.str();
}

nlohmann::json training_record(const StudentState& state, const std::string& config_hash) {
  return {{"config_hash", config_hash},
          {"step", state.step},
          {"epoch", state.epoch},
          {"architecture", state.model ? state.model->architecture() : ""},
          {"losses", state.history}};
}

}  // namespace fedad
