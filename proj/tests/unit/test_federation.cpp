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
#include <filesystem>
#include <vector>

#include "test_framework.hpp"
#include <torch/torch.h>

#include "fedad/config.hpp"
#include "fedad/errors.hpp"
#include "fedad/federation.hpp"
#include "helpers.hpp"

using namespace fedad;
using fedad::testing::TempDir;
namespace fs = std::filesystem;

namespace {

nlohmann::json tiny_config() {
  auto source = [](int n, int seed) {
    return nlohmann::json{{"format", "synthetic"},
                          {"synthetic", {{"num_samples", n}, {"num_classes", 4}, {"seed", seed}, {"noise", 0.3}}}};
  };
  return {{"name", "tiny"},
          {"task", "classification"},
          {"seed", 1},
          {"output_dir", "unused"},
          {"data", {{"private", source(300, 1)}, {"public", source(40, 2)}, {"test", source(60, 3)}}},
          {"partition", {{"K", 3}, {"alpha", 1.0}}},
          {"node_defaults",
           {{"architecture", "cnn-small"},
            {"training", {{"name", "sgd"}, {"lr", 0.05}, {"epochs", 1}, {"batch_size", 32}}}}},
          {"student", {{"architecture", "cnn-small"}}},
          {"distill", {{"optimizer", {{"epochs", 1}, {"batch_size", 16}}}}},
          {"fedavg", {{"rounds", 2}, {"local_epochs", 1}}}};
}

LocalProduct fake_product(const std::string& id, torch::Tensor z, torch::Tensor a, std::vector<std::int64_t> counts) {
  LocalProduct p;
  p.node_id = id;
  p.public_id = "pub";
  p.predictions = std::move(z);
  p.attention = std::move(a);
  p.class_counts = std::move(counts);
  p.dataset_size = 1;
  return p;
}

}  // namespace

TEST_SUITE("federation") {
  TEST_CASE("manifest validation and json round-trip") {
    FederationManifest m;
    m.pool_size = 10;
    m.nodes = {NodeEntry{node_id(0), {}, {}, {0, 1, 2}, {}, "pending"}, NodeEntry{node_id(1), {}, {}, {3, 4}, {}, "pending"}};
    CHECK_NOTHROW(m.validate());
    nlohmann::json j = m;
    auto back = j.get<FederationManifest>();
    CHECK(back.nodes.size() == 2);
    CHECK(back.node("node-1").slice == std::vector<std::int64_t>{3, 4});
    auto overlap = m;
    overlap.nodes[1].slice = {2, 3};
    CHECK_THROWS(overlap.validate());
    auto dup = m;
    dup.nodes[1].id = node_id(0);
    CHECK_THROWS(dup.validate());
    auto outside = m;
    outside.nodes[1].slice = {12};
    CHECK_THROWS(outside.validate());
  }

  TEST_CASE("private store logs every read with its requester and stage") {
    FederationManifest m;
    m.pool_size = 6;
    m.nodes = {NodeEntry{node_id(0), {}, {}, {0, 1, 2}, {}, "pending"}, NodeEntry{node_id(1), {}, {}, {3, 4, 5}, {}, "pending"}};
    SyntheticConfig c;
    c.num_samples = 6;
    AccessLog log;
    PrivateStore store(generate_synthetic(c), m, log);
    auto own = store.read_slice("node-0", "node-0", kLocalTrainingStage);
    CHECK(own.size() == 3);
    CHECK(log.foreign_reads() == 0);
    CHECK(log.reads_outside(kLocalTrainingStage) == 0);
    store.read_slice("central", "node-1", "distill");
    CHECK(log.foreign_reads() == 1);
    CHECK(log.reads_outside(kLocalTrainingStage) == 1);
    CHECK_THROWS(store.read_slice("node-0", "node-9", kLocalTrainingStage));
  }

  TEST_CASE("a node holding one class learns to predict it") {
    SyntheticConfig c;
    c.num_samples = 200;
    c.num_classes = 4;
    auto all = generate_synthetic(c);
    std::vector<std::int64_t> idx;
    for (std::int64_t i = 0; i < all.size(); ++i)
      if (all.labels[static_cast<std::size_t>(i)] == 2) idx.push_back(i);
    auto only = all.subset(idx);
    ArchitectureSpec spec;
    spec.num_classes = 4;
    torch::manual_seed(1);
    OptimizerSpec opt;
    opt.epochs = 3;
    opt.batch_size = 16;
    auto r = train_supervised(build_network(spec), only, Task::kClassification, opt, 1, "node-0");
    auto pred = predict(*r.model, only.inputs).argmax(1);
    CHECK(pred.eq(2).to(torch::kFloat64).mean().item<double>() >= 0.99);
  }

  TEST_CASE("products are deterministic and their size matches the closed form") {
    TempDir dir("products");
    ArchitectureSpec spec;
    spec.num_classes = 4;
    torch::manual_seed(3);
    auto net = build_network(spec);
    torch::manual_seed(4);
    auto data = make_public_dataset(torch::rand({10, 1, 16, 16}), "toy");
    auto a = infer_public_products(*net, data, Task::kClassification, ProductOptions{}, 1.0, "node-0", 4);
    auto b = infer_public_products(*net, data, Task::kClassification, ProductOptions{}, 1.0, "node-0", 7);
    CHECK(torch::equal(a.predictions, b.predictions));
    CHECK(torch::equal(a.attention, b.attention));
    CHECK(a.attention.max().item<double>() <= 1.0);

    const std::int64_t C = 4, h = 8, w = 8;
    CHECK(product_payload_bytes(a) == static_cast<std::uint64_t>(10 * (C * 4 + C * h * w * 4)));
    write_product(dir.path(), a);
    const auto on_disk = fs::file_size(dir.path() / "node-0.fadt") + fs::file_size(dir.path() / "node-0.json");
    CHECK(a.byte_size() == on_disk);
    CHECK(a.archive.payload_bytes == product_payload_bytes(a));
    CHECK(a.byte_size() == product_payload_bytes(a) + a.metadata_bytes());
    auto back = read_product(dir.path(), "node-0");
    CHECK(torch::equal(back.attention, a.attention));
    CHECK(parameter_tensors_in(back, *net) == 0);

    ProductOptions top1;
    top1.top1_only = true;
    auto t = infer_public_products(*net, data, Task::kClassification, top1, 1.0, "node-0");
    CHECK(product_payload_bytes(t) == static_cast<std::uint64_t>(10 * (C * 4 + h * w * 4 + 8)));
    auto rows = a.attention.index({torch::arange(10), t.top1});
    CHECK(torch::equal(t.attention.squeeze(1), rows));

    auto empty = make_public_dataset(torch::zeros({0, 1, 16, 16}), "toy");
    CHECK_THROWS(infer_public_products(*net, empty, Task::kClassification, ProductOptions{}, 1.0, "node-0"));
  }

  TEST_CASE("parameter tensors smuggled into a product are detected") {
    ArchitectureSpec spec;
    spec.num_classes = 4;
    auto net = build_network(spec);
    auto p = fake_product("node-0", torch::zeros({1, 4}), torch::zeros({1, 4, 8, 8}), {1, 1, 1, 1});
    CHECK(parameter_tensors_in(p, *net) == 0);
    p.predictions = net->parameters().back().detach().clone().view({1, 4});
    CHECK(parameter_tensors_in(p, *net) == 1);
  }

  TEST_CASE("bundles: hand case, single teacher and product order") {
    auto p0 = fake_product("node-0", torch::tensor({{0.0, 2.0}}), torch::tensor({{{{0.2, 0.8}}, {{1.0, 0.0}}}}), {1, 3});
    auto p1 = fake_product("node-1", torch::tensor({{2.0, 0.0}}), torch::tensor({{{{0.5, 0.3}}, {{0.4, 0.6}}}}), {3, 1});
    auto w = product_weights({p0, p1}, "importance");
    auto set = build_bundles({p0, p1}, w);
    // Class 0: 0.25*0 + 0.75*2; class 1: 0.75*2 + 0.25*0.
    CHECK(set.z_hat[0][0].item<float>() == doctest::Approx(1.5));
    CHECK(set.z_hat[0][1].item<float>() == doctest::Approx(1.5));
    CHECK(torch::allclose(set.lower[0][0][0], torch::tensor({0.2f, 0.3f})));
    CHECK(torch::allclose(set.upper[0][0][0], torch::tensor({0.5f, 0.8f})));
    CHECK(torch::allclose(set.lower[0][1][0], torch::tensor({0.4f, 0.0f})));
    CHECK(torch::allclose(set.upper[0][1][0], torch::tensor({1.0f, 0.6f})));

    auto swapped_w = product_weights({p1, p0}, "importance");
    auto swapped = build_bundles({p1, p0}, swapped_w);
    CHECK(torch::equal(swapped.z_hat, set.z_hat));
    CHECK(torch::equal(swapped.lower, set.lower));
    CHECK(torch::equal(swapped.upper, set.upper));

    auto single = build_bundles({p0}, product_weights({p0}, "importance"));
    CHECK(torch::equal(single.z_hat, p0.predictions));
    CHECK(torch::equal(single.lower, p0.attention));
    CHECK(torch::equal(single.upper, p0.attention));

    auto other = p1;
    other.public_id = "different";
    CHECK_THROWS(build_bundles({p0, other}, w));
  }

  TEST_CASE("bandwidth ledger totals, empty report and json round-trip") {
    BandwidthLedger empty;
    auto r0 = bandwidth_report(empty);
    REQUIRE(r0.rows.size() == 1);
    CHECK(r0.rows[0].total_bytes == 0);
    BandwidthLedger l;
    l.method = "FedAD";
    l.asynchronous = true;
    l.add({"node-0", kCentralId, "inference-products", 120, 100, 20, 0});
    l.add({"node-1", kCentralId, "inference-products", 80, 70, 10, 0});
    l.add({kCentralId, "node-1", "model-parameters", 5, 4, 1, 1});
    CHECK(l.uplink_bytes() == 200);
    CHECK(l.downlink_bytes() == 5);
    CHECK(l.total_bytes() == 205);
    CHECK(l.transfers("up") == 2);
    nlohmann::json j = l;
    CHECK(j.get<BandwidthLedger>() == l);
    auto report = bandwidth_report(std::vector<BandwidthLedger>{l, empty});
    nlohmann::json rj = report;
    CHECK(rj.get<BandwidthReport>() == report);
    CHECK(bandwidth_csv(report).find("FedAD") != std::string::npos);
  }

  TEST_CASE("pipeline stages resume from their artifacts") {
    TempDir dir("fed");
    auto config = parse_experiment_config(tiny_config());
    Federation fed(config, dir.path());
    auto report = fed.run_all();
    CHECK(report.ledger.transfers("up") == 3);
    CHECK(report.ledger.downlink_bytes() == 0);
    CHECK(report.privacy.reads_after_local_training == 0);
    CHECK(report.privacy.foreign_reads == 0);
    CHECK(report.privacy.teacher_invocations_during_distill == 0);

    fs::remove(fed.central_dir() / "model.pt");
    Federation again(config, dir.path());
    auto second = again.run_all();
    for (const auto& s : second.stages) {
      const bool is_distill = s.stage == "distill" || s.stage == "evaluate";
      if (!is_distill) CHECK_MESSAGE(s.reused, s.stage);
    }
    auto distill = std::find_if(second.stages.begin(), second.stages.end(),
                                [](const StageRun& s) { return s.stage == "distill"; });
    REQUIRE(distill != second.stages.end());
    CHECK_FALSE(distill->reused);
    CHECK(second.central.mean == report.central.mean);
  }

  TEST_CASE("stages called out of order name the missing artifact") {
    TempDir dir("fed");
    Federation fed(parse_experiment_config(tiny_config()), dir.path());
    CHECK_THROWS_AS(fed.train_local(0), MissingArtifactError);
    fed.partition();
    CHECK_THROWS_AS(fed.products(0), MissingArtifactError);
    CHECK_THROWS_AS(fed.distill(), MissingArtifactError);
  }

  TEST_CASE("fedavg fixed point, ledger size and architecture check") {
    TempDir dir("fedavg");
    auto config = parse_experiment_config(tiny_config());
    Federation fed(config, dir.path());
    fed.partition();
    AccessLog log;
    auto pool = config.private_data.load();
    PrivateStore store(pool, fed.manifest(), log);

    auto still = fedavg_baseline(fed.manifest(), store, 1, 0);
    auto fresh = fedavg_baseline(fed.manifest(), store, 1, 0);
    CHECK(torch::equal(flatten_parameters(*still.model), flatten_parameters(*fresh.model)));

    auto r = fedavg_baseline(fed.manifest(), store, 2, 1);
    const auto param_bytes = static_cast<std::uint64_t>(parameter_count(*r.model) * 4);
    CHECK(r.param_bytes == param_bytes);
    CHECK(r.ledger.payload_bytes() == 2 * 3 * 2 * param_bytes);
    std::uint64_t meta = 0;
    for (const auto& t : r.ledger.records) meta += t.metadata_bytes;
    CHECK(r.ledger.total_bytes() == 2 * 3 * 2 * param_bytes + meta);
    CHECK(r.ledger.transfers("down") == 6);
    CHECK(log.foreign_reads() == 0);

    auto mixed = fed.manifest();
    mixed.nodes[1].architecture.name = "cnn-wide";
    CHECK_THROWS(fedavg_baseline(mixed, store, 1, 1));
  }

  TEST_CASE("heterogeneous teachers distill into a different student") {
    TempDir dir("hetero");
    auto doc = tiny_config();
    doc["nodes"] = nlohmann::json::array({{{"architecture", "cnn-small"}}, {{"architecture", "cnn-wide"}}, {{"architecture", "cnn-small"}}});
    doc["student"] = {{"architecture", "cnn-wide"}};
    Federation fed(parse_experiment_config(doc), dir.path());
    auto r = fed.run_all();
    CHECK(fed.load_central_model()->architecture() == "cnn-wide");
    CHECK(r.central.per_class.size() == 4);
  }
}
