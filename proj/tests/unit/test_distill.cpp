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
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "test_framework.hpp"
#include <torch/torch.h>

#include "fedad/distill.hpp"
#include "fedad/federation.hpp"
#include "fedad/models.hpp"
#include "fedad/training.hpp"
#include "helpers.hpp"

using namespace fedad;
using fedad::testing::TempDir;

namespace {

ArchitectureSpec arch(const std::string& name, std::int64_t classes = 4) {
  ArchitectureSpec s;
  s.name = name;
  s.num_classes = classes;
  return s;
}

NetworkPtr seeded(const ArchitectureSpec& spec, std::uint64_t seed) {
  torch::manual_seed(seed);
  return build_network(spec);
}

// Ensemble targets taken from a few random teachers, the way the pipeline
// builds them.
BundleSet teacher_bundles(const PublicDataset& data, Task task, std::int64_t teachers, const ArchitectureSpec& spec) {
  std::vector<LocalProduct> products;
  for (std::int64_t k = 0; k < teachers; ++k) {
    auto net = seeded(spec, 100 + k);
    products.push_back(infer_public_products(*net, data, task, ProductOptions{}, 1.0, node_id(k)));
    products.back().dataset_size = 10 + k;
    products.back().class_counts.assign(static_cast<std::size_t>(spec.num_classes), 1 + k);
  }
  return build_bundles(products, product_weights(products, "importance"));
}

PublicDataset toy_public(std::int64_t n, std::uint64_t seed) {
  torch::manual_seed(seed);
  return make_public_dataset(torch::rand({n, 1, 16, 16}), "toy");
}

}  // namespace

TEST_SUITE("distill") {
  TEST_CASE("architecture registry") {
    for (const auto& name : registered_architectures()) CHECK(build_network(arch(name)) != nullptr);
    auto cnn = build_network(arch("cnn-small"));
    CHECK(cnn->default_attention_layer() == "conv2");
    auto out = cnn->forward(torch::rand({2, 1, 16, 16}));
    CHECK(out.output.sizes() == torch::IntArrayRef{2, 4});
    for (const auto& layer : cnn->layer_names()) CHECK(out.features.count(layer) == 1);
    auto unet = build_network(arch("unet-tiny+nonlocal"));
    auto r = unet->forward(torch::rand({2, 1, 16, 16}));
    CHECK(r.output.sizes() == torch::IntArrayRef{2, 1, 16, 16});
    REQUIRE(r.nonlocal_attention.defined());
    const auto hw = r.nonlocal_attention.size(1);
    CHECK(r.nonlocal_attention.sizes() == torch::IntArrayRef{2, hw, hw});
    CHECK(((r.nonlocal_attention.sum(1) - 1).abs().max().item<double>()) < 1e-5);
    auto plain = build_network(arch("unet-tiny"))->forward(torch::rand({1, 1, 16, 16}));
    CHECK(plain.output.sizes() == torch::IntArrayRef{1, 1, 16, 16});
    CHECK_THROWS_AS(build_network(arch("resnet-152")), std::invalid_argument);
  }

  TEST_CASE("flat parameters and checkpoints round-trip") {
    TempDir dir("models");
    auto a = seeded(arch("cnn-small"), 1), b = seeded(arch("cnn-small"), 2);
    auto flat = flatten_parameters(*a);
    CHECK(flat.numel() == parameter_count(*a));
    load_flat_parameters(*b, flat);
    CHECK(torch::equal(flatten_parameters(*b), flat));
    auto c = seeded(arch("cnn-small"), 3);
    save_network(*a, (dir.path() / "m.pt").string());
    load_network(*c, (dir.path() / "m.pt").string());
    CHECK(torch::equal(flatten_parameters(*c), flat));
  }

  TEST_CASE("cosine schedule runs from lr to lr_min") {
    auto p = torch::zeros({1}, torch::requires_grad());
    OptimizerSpec spec;
    spec.lr = 0.1;
    spec.lr_min = 0.01;
    Trainer t({p}, spec, 10);
    CHECK(t.current_lr() == doctest::Approx(0.1));
    for (int i = 0; i < 5; ++i) {
      p.mutable_grad() = torch::zeros({1});
      t.step();
    }
    CHECK(t.current_lr() == doctest::Approx(0.055));
    for (int i = 0; i < 5; ++i) t.step();
    CHECK(t.current_lr() == doctest::Approx(0.01));
    std::mt19937_64 rng(1);
    auto batches = make_batches(10, 4, rng);
    CHECK(batches.size() == 3);
    CHECK(batches.back().size() == 2);
  }

  TEST_CASE("classification loss terms sum to the total and match a loop oracle") {
    auto data = toy_public(6, 1);
    auto spec = arch("cnn-small");
    auto targets = teacher_bundles(data, Task::kClassification, 3, spec);
    auto student = seeded(spec, 7);
    auto config = DistillConfig::defaults_for(Task::kClassification);
    auto out = student_forward(*student, data.samples, config, true);
    auto loss = classification_loss(out, targets, config);
    CHECK(loss.total.item<double>() ==
          doctest::Approx((loss.w + loss.low + loss.up).item<double>()).epsilon(1e-12));

    // Loop oracle over samples and classes.
    auto z = out.prediction.detach().to(torch::kFloat64);
    auto a = out.attention.detach().to(torch::kFloat64);
    auto zh = targets.z_hat.to(torch::kFloat64);
    auto lo = targets.lower.to(torch::kFloat64), hi = targets.upper.to(torch::kFloat64);
    const auto N = z.size(0), C = z.size(1), H = a.size(2), W = a.size(3);
    double w = 0, low = 0, up = 0;
    auto T = [&](double v) { return 1.0 / (1.0 + std::exp(-config.mask.rho * (v - config.mask.b))); };
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t c = 0; c < C; ++c) {
        w += std::abs(z[n][c].item<double>() - zh[n][c].item<double>()) / C / N;
        double ln = 0, ld = 0, un = 0, ud = 0;
        for (std::int64_t p = 0; p < H; ++p)
          for (std::int64_t q = 0; q < W; ++q) {
            double s = a[n][c][p][q].item<double>();
            ln += lo[n][c][p][q].item<double>() * T(s);
            ld += lo[n][c][p][q].item<double>();
            un += s * T(hi[n][c][p][q].item<double>());
            ud += s;
          }
        if (ld > 0) low += -ln / ld / (H * W) / C / N;
        if (ud > 0) up += -un / ud / (H * W) / C / N;
      }
    CHECK(loss.w.item<double>() == doctest::Approx(w).epsilon(1e-6));
    CHECK(loss.low.item<double>() == doctest::Approx(low).epsilon(1e-6));
    CHECK(loss.up.item<double>() == doctest::Approx(up).epsilon(1e-6));
  }

  TEST_CASE("without bounds the objective is plain ensemble logit distillation") {
    auto data = toy_public(5, 2);
    auto spec = arch("cnn-small");
    std::vector<NetworkPtr> teachers{seeded(spec, 31), seeded(spec, 32)};
    BundleSet targets;
    targets.public_id = data.id;
    {
      torch::NoGradGuard guard;
      targets.z_hat = (teachers[0]->forward(data.samples).output + teachers[1]->forward(data.samples).output) / 2;
    }
    auto config = DistillConfig::defaults_for(Task::kClassification);
    config.toggles.use_lower = config.toggles.use_upper = false;
    auto student = seeded(spec, 8);
    auto out = student_forward(*student, data.samples, config, false);
    auto loss = classification_loss(out, targets, config);
    auto want = (out.prediction.detach().to(torch::kFloat64) - targets.z_hat.to(torch::kFloat64)).abs().mean();
    CHECK(std::abs(loss.total.item<double>() - want.item<double>()) < 1e-9);
    CHECK(loss.low.item<double>() == 0.0);
    CHECK(loss.up.item<double>() == 0.0);
  }

  TEST_CASE("a single class reduces to the three per-map terms") {
    StudentOutputs s;
    s.prediction = torch::tensor({{2.0}}, torch::kFloat64);
    s.attention = torch::tensor({{{{0.2, 1.0}}}}, torch::kFloat64);
    BundleSet t;
    t.z_hat = torch::tensor({{0.5}}, torch::kFloat64);
    t.lower = torch::tensor({{{{0.0, 1.0}}}}, torch::kFloat64);
    t.upper = torch::tensor({{{{0.6, 1.0}}}}, torch::kFloat64);
    auto config = DistillConfig::defaults_for(Task::kClassification);
    auto loss = classification_loss(s, t, config);
    AttentionMap a{s.attention[0][0], AttentionKind::kGradCam, 0, true, false};
    AttentionMap i{t.lower[0][0], AttentionKind::kGradCam, 0, true, false};
    AttentionMap u{t.upper[0][0], AttentionKind::kGradCam, 0, true, false};
    const double want = 1.5 + lower_bound_loss(a, i, config.mask).value + upper_bound_loss(a, u, config.mask).value;
    CHECK(loss.total.item<double>() == doctest::Approx(want).epsilon(1e-12));
    CHECK_THROWS_AS(classification_loss(s, BundleSet{}, config), std::invalid_argument);
  }

  TEST_CASE("reconstruction loss identity and degenerate bounds") {
    StudentOutputs s;
    s.prediction = torch::rand({2, 1, 4, 4}, torch::kFloat64);
    s.attention = normalize_maps(torch::rand({2, 16, 16}, torch::kFloat64));
    BundleSet t;
    t.kind = AttentionKind::kNonlocalRow;
    t.z_hat = s.prediction.clone();
    t.lower = torch::zeros({2, 16, 16}, torch::kFloat64);
    t.upper = torch::ones({2, 16, 16}, torch::kFloat64);
    auto config = DistillConfig::defaults_for(Task::kReconstruction);
    auto loss = reconstruction_loss(s, t, config);
    CHECK(loss.w.item<double>() == 0.0);
    CHECK(loss.low.item<double>() == 0.0);
    CHECK(loss.degenerate_lower == 2);
    t.z_hat = torch::zeros_like(s.prediction);
    auto with_error = reconstruction_loss(s, t, config);
    auto frob = s.prediction.flatten(1).norm(2, 1).mean().item<double>();
    CHECK(with_error.w.item<double>() == doctest::Approx(frob).epsilon(1e-12));
  }

  TEST_CASE("loss-term gradients match central finite differences") {
    torch::manual_seed(4);
    BoundLossOptions opts;
    auto student = normalize_maps(torch::rand({1, 3, 3}, torch::kFloat64)).requires_grad_(true);
    auto lo = normalize_maps(torch::rand({1, 3, 3}, torch::kFloat64));
    auto hi = torch::max(lo, normalize_maps(torch::rand({1, 3, 3}, torch::kFloat64)));
    auto zt = torch::randn({1, 5}, torch::kFloat64);
    auto zs = torch::randn({1, 5}, torch::kFloat64).requires_grad_(true);
    std::vector<std::pair<std::function<torch::Tensor(const torch::Tensor&)>, torch::Tensor>> terms{
        {[&](const torch::Tensor& a) { return lower_bound_loss(a, lo, opts).loss.sum(); }, student},
        {[&](const torch::Tensor& a) { return upper_bound_loss(a, hi, opts).loss.sum(); }, student},
        {[&](const torch::Tensor& z) { return l2_logit_loss(zt, z, 1).sum(); }, zs},
        {[&](const torch::Tensor& z) { return kl_distill_loss(zt, z, 3.0).sum(); }, zs}};
    for (auto& [f, x] : terms) {
      auto g = torch::autograd::grad({f(x)}, {x})[0];
      auto flat = x.detach().flatten();
      for (std::int64_t i = 0; i < flat.numel(); ++i) {
        const double h = 1e-6;
        auto up = flat.clone(), dn = flat.clone();
        up[i] += h;
        dn[i] -= h;
        double fd = (f(up.view(x.sizes())).item<double>() - f(dn.view(x.sizes())).item<double>()) / (2 * h);
        CHECK(g.flatten()[i].item<double>() == doctest::Approx(fd).epsilon(1e-3).scale(1e-6));
      }
    }
  }

  TEST_CASE("zero learning rate leaves the student unchanged; seeds reproduce the history") {
    auto data = toy_public(12, 3);
    auto spec = arch("cnn-small");
    auto config = DistillConfig::defaults_for(Task::kClassification);
    config.optimizer.epochs = 2;
    config.optimizer.batch_size = 5;
    PrecomputedBundles bundles(teacher_bundles(data, Task::kClassification, 2, spec));

    auto frozen = config;
    frozen.optimizer.lr = frozen.optimizer.lr_min = 0.0;
    auto student = seeded(spec, 9);
    auto before = flatten_parameters(*student);
    auto state = distill(student, data, bundles, frozen);
    CHECK(torch::equal(flatten_parameters(*state.model), before));
    CHECK(state.history.size() == 6);

    auto a = distill(seeded(spec, 9), data, bundles, config);
    auto b = distill(seeded(spec, 9), data, bundles, config);
    REQUIRE(a.history.size() == b.history.size());
    for (std::size_t i = 0; i < a.history.size(); ++i) {
      CHECK(a.history[i].total == b.history[i].total);
      CHECK(a.history[i].low == b.history[i].low);
    }
    CHECK(torch::equal(flatten_parameters(*a.model), flatten_parameters(*b.model)));
  }

  TEST_CASE("misaligned bundles are rejected") {
    auto data = toy_public(6, 4);
    auto spec = arch("cnn-small");
    auto set = teacher_bundles(data, Task::kClassification, 2, spec);
    set.public_id = "other";
    PrecomputedBundles wrong_id(set);
    auto config = DistillConfig::defaults_for(Task::kClassification);
    config.optimizer.epochs = 1;
    CHECK_THROWS_AS(distill(seeded(spec, 1), data, wrong_id, config), std::invalid_argument);
    PrecomputedBundles short_set(teacher_bundles(truncate_public(data, 3), Task::kClassification, 2, spec));
    CHECK_THROWS_AS(distill(seeded(spec, 1), data, short_set, config), std::invalid_argument);
  }

  TEST_CASE("one-shot distillation never calls a teacher and works across architectures") {
    auto data = toy_public(8, 5);
    auto bundles = teacher_bundles(data, Task::kClassification, 2, arch("cnn-small"));
    PrecomputedBundles source(bundles);
    auto config = DistillConfig::defaults_for(Task::kClassification);
    config.optimizer.epochs = 1;
    const auto before = teacher_invocations();
    auto state = distill(seeded(arch("cnn-wide"), 2), data, source, config);
    CHECK(teacher_invocations() == before);
    CHECK(state.model->architecture() == "cnn-wide");
  }

  TEST_CASE("reconstruction distillation loss falls on a one-sample problem") {
    auto spec = arch("unet-tiny+nonlocal");
    torch::manual_seed(12);
    auto data = make_public_dataset(torch::rand({1, 1, 16, 16}), "toy");
    auto bundles = teacher_bundles(data, Task::kReconstruction, 2, spec);
    PrecomputedBundles source(bundles);
    auto config = DistillConfig::defaults_for(Task::kReconstruction);
    config.optimizer.epochs = 100;
    config.optimizer.batch_size = 1;
    auto state = distill(seeded(spec, 3), data, source, config);
    REQUIRE(state.history.size() == 100);
    std::vector<double> window;
    for (std::size_t start = 0; start < 100; start += 10) {
      double s = 0;
      for (std::size_t i = start; i < start + 10; ++i) s += state.history[i].total;
      window.push_back(s / 10);
    }
    for (std::size_t i = 1; i < window.size(); ++i) CHECK(window[i] < window[i - 1]);
  }

  TEST_CASE("loss history exports as csv and the record carries the hash") {
    StudentState s;
    s.history = {{0, 1.5, 1.0, 0.25, 0.25}, {1, 1.0, 1.0, 0.0, 0.0}};
    s.step = 2;
    auto csv = loss_history_csv(s.history);
    CHECK(csv.rfind("step,total,L_w,L_low,L_up\n0,1.5,1,0.25,0.25\n", 0) == 0);
    auto j = training_record(s, "abc");
    CHECK(j["config_hash"] == "abc");
    CHECK(j["losses"].size() == 2);
  }
}
