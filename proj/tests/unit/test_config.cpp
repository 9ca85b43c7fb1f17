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
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "test_framework.hpp"

#include "fedad/config.hpp"
#include "fedad/errors.hpp"
#include "fedad/io.hpp"
#include "helpers.hpp"

using namespace fedad;
using fedad::testing::TempDir;
namespace fs = std::filesystem;

namespace {

nlohmann::json small_config() {
  auto source = [](int n, int seed) {
    return nlohmann::json{{"format", "synthetic"},
                          {"synthetic", {{"num_samples", n}, {"num_classes", 4}, {"seed", seed}, {"noise", 0.3}}}};
  };
  return {{"name", "cli-toy"},
          {"task", "classification"},
          {"seed", 2},
          {"output_dir", "runs/cli-toy"},
          {"data", {{"private", source(240, 1)}, {"public", source(32, 2)}, {"test", source(40, 3)}}},
          {"partition", {{"K", 2}, {"alpha", 1.0}}},
          {"node_defaults", {{"training", {{"epochs", 1}, {"batch_size", 32}}}}},
          {"distill", {{"optimizer", {{"epochs", 1}, {"batch_size", 16}}}}},
          {"fedavg", {{"rounds", 1}}}};
}

fs::path write_config(const fs::path& dir, const nlohmann::json& doc, const std::string& name = "exp.json") {
  auto p = dir / name;
  io::atomic_write(p, doc.dump(2));
  return p;
}

struct Outcome {
  int code = -1;
  std::string out;
  std::string err;
};

Outcome run_cli(const std::string& args, const fs::path& scratch, const std::string& env = "") {
  auto out = scratch / "stdout.txt", err = scratch / "stderr.txt";
  auto cmd = env + " '" + std::string(FEDAD_CLI_PATH) + "' " + args + " >'" + out.string() + "' 2>'" + err.string() + "'";
  int status = std::system(cmd.c_str());
  Outcome o;
  o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  o.out = io::read_file(out);
  o.err = io::read_file(err);
  return o;
}

}  // namespace

TEST_SUITE("config") {
  TEST_CASE("schema rejects invalid values and unknown keys") {
    auto doc = small_config();
    doc["partition"]["alpha"] = 0;
    try {
      parse_experiment_config(doc);
      FAIL("expected a configuration error");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("/partition/alpha") != std::string::npos);
    }
    auto extra = small_config();
    extra["surprise"] = 1;
    CHECK_THROWS_AS(parse_experiment_config(extra), ConfigError);
    auto bad_task = small_config();
    bad_task["task"] = "detection";
    CHECK_THROWS_AS(parse_experiment_config(bad_task), ConfigError);
  }

  TEST_CASE("defaults follow the task") {
    auto c = parse_experiment_config(small_config());
    CHECK(c.num_nodes == 2);
    REQUIRE(c.nodes.size() == 2);
    CHECK(c.nodes[0].architecture == default_architecture(Task::kClassification));
    CHECK(c.distill.seed == c.seed);
    CHECK(default_architecture(Task::kReconstruction) == "unet-tiny+nonlocal");
    CHECK(default_local_training(Task::kReconstruction).name == "adam");
  }

  TEST_CASE("seed override and hash") {
    auto c = parse_experiment_config(small_config());
    auto moved = c;
    moved.output_dir = "elsewhere";
    CHECK(moved.hash() == c.hash());
    apply_seed_override(moved, 9);
    CHECK(moved.seed == 9);
    CHECK(moved.distill.seed == 9);
    CHECK(moved.effective_partition_seed() == 9);
    CHECK(moved.hash() != c.hash());
  }

  TEST_CASE("loading resolves data paths against the config file") {
    TempDir dir("cfg");
    auto doc = small_config();
    doc["data"]["private"] = {{"format", "archive"}, {"path", "pool.fadt"}};
    auto c = load_experiment_config(write_config(dir.path(), doc));
    CHECK(fs::path(c.private_data.path) == dir.path() / "pool.fadt");
    CHECK_THROWS_AS(load_experiment_config(dir.path() / "absent.json"), ConfigError);
    io::atomic_write(dir.path() / "broken.json", "{ not json");
    CHECK_THROWS_AS(load_experiment_config(dir.path() / "broken.json"), ConfigError);
  }

  TEST_CASE("bundled experiment configs validate") {
    for (const auto& name : {"toy_classification.json", "toy_reconstruction.json"})
      CHECK_NOTHROW(load_experiment_config(fs::path(FEDAD_CONFIG_DIR) / name));
  }
}

TEST_SUITE("cli") {
  TEST_CASE("usage errors and schema violations exit with 2 before any work") {
    TempDir dir("cli");
    CHECK(run_cli("--help", dir.path()).code == 0);
    CHECK(run_cli("", dir.path()).code == 2);
    CHECK(run_cli("partition", dir.path()).code == 2);
    CHECK(run_cli("partition --config x.json --bogus", dir.path()).code == 2);
    auto doc = small_config();
    doc["partition"]["alpha"] = 0;
    auto cfg = write_config(dir.path(), doc);
    auto out = dir.path() / "out";
    auto r = run_cli("run-all --config '" + cfg.string() + "' --out '" + out.string() + "'", dir.path());
    CHECK(r.code == 2);
    CHECK(r.err.find("alpha") != std::string::npos);
    CHECK_FALSE(fs::exists(out / "partition.json"));
    CHECK(run_cli("partition --config '" + (dir.path() / "nope.json").string() + "'", dir.path()).code == 2);
  }

  TEST_CASE("stages run one by one, then evaluate and report reuse everything") {
    TempDir dir("cli");
    auto cfg = write_config(dir.path(), small_config());
    const auto base = "--config '" + cfg.string() + "' --out '" + (dir.path() / "out").string() + "'";
    CHECK(run_cli("distill " + base, dir.path()).code == 3);
    CHECK(run_cli("partition " + base, dir.path()).code == 0);
    CHECK(run_cli("products --node 0 " + base, dir.path()).code == 3);
    for (int k = 0; k < 2; ++k) {
      CHECK(run_cli("train-local --node " + std::to_string(k) + " " + base, dir.path()).code == 0);
      CHECK(run_cli("products --node " + std::to_string(k) + " " + base, dir.path()).code == 0);
    }
    CHECK(run_cli("distill " + base, dir.path()).code == 0);
    auto eval = run_cli("evaluate " + base, dir.path());
    CHECK(eval.code == 0);
    CHECK(eval.out.find("FedAD central") != std::string::npos);
    CHECK(eval.err.find("done in") == std::string::npos);
    auto again = run_cli("run-all " + base, dir.path());
    CHECK(again.code == 0);
    CHECK(again.err.find("local-training/node-0: reused") != std::string::npos);
    CHECK(again.err.find("distill: reused") != std::string::npos);
    auto report = run_cli("report " + base, dir.path());
    CHECK(report.code == 0);
    CHECK(fs::exists(dir.path() / "out" / "figures" / "loss_curves.svg"));
    CHECK(fs::exists(dir.path() / "out" / "comparison.csv"));
    CHECK(run_cli("baseline-fedavg " + base, dir.path()).code == 0);
    CHECK(fs::exists(dir.path() / "out" / "bandwidth.csv"));
  }

  TEST_CASE("damaged artifacts are runtime failures") {
    TempDir dir("cli");
    auto cfg = write_config(dir.path(), small_config());
    const auto base = "--config '" + cfg.string() + "' --out '" + (dir.path() / "out").string() + "'";
    REQUIRE(run_cli("run-all " + base, dir.path()).code == 0);
    io::atomic_write(dir.path() / "out" / "products" / "node-0.fadt", "garbage");
    auto r = run_cli("distill --force " + base, dir.path());
    CHECK(r.code == 4);
    CHECK(r.err.find("stage") != std::string::npos);
  }

  TEST_CASE("output root and seed override pick the run directory") {
    TempDir dir("cli");
    auto cfg = write_config(dir.path(), small_config());
    auto r = run_cli("partition --config '" + cfg.string() + "' --seed-override 5", dir.path(),
                     "FEDAD_OUTPUT_ROOT='" + dir.path().string() + "'");
    CHECK(r.code == 0);
    CHECK(fs::exists(dir.path() / "runs" / "cli-toy" / "seed-5" / "partition.json"));
  }
}
