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
// fedad: runs a federation stage by stage or end to end.
//
// Exit codes: 0 success, 2 configuration error, 3 missing dependency
// artifact, 4 runtime failure.

#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <torch/torch.h>

#include "fedad/config.hpp"
#include "fedad/errors.hpp"
#include "fedad/federation.hpp"
#include "fedad/io.hpp"
#include "fedad/report.hpp"

extern char** environ;

namespace {

namespace fs = std::filesystem;

constexpr int kExitConfig = 2;
constexpr int kExitMissing = 3;
constexpr int kExitRuntime = 4;

constexpr const char* kOutputRootEnv = "FEDAD_OUTPUT_ROOT";

struct Options {
  std::string config;
  std::int64_t node = -1;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool force = false;
  bool multiprocess = false;
  std::optional<std::int64_t> rounds;
};

fs::path resolve_out(const fedad::ExperimentConfig& c, const Options& o) {
  if (!o.out.empty()) return o.out;
  fs::path dir = c.output_dir;
  if (const char* root = std::getenv(kOutputRootEnv); root && *root && dir.is_relative()) dir = fs::path(root) / dir;
  if (o.seed) dir /= "seed-" + std::to_string(*o.seed);
  return dir;
}

void log_stage(const fedad::StageRun& run) {
  std::cerr << "[fedad] " << run.stage << ": "
            << (run.reused ? "reused existing artifact" : "done in " + std::to_string(run.seconds) + " s") << '\n';
}

std::string self_path() {
  std::error_code ec;
  auto p = fs::read_symlink("/proc/self/exe", ec);
  if (ec) throw std::runtime_error("cannot locate the fedad executable for worker processes");
  return p.string();
}

// Runs one worker process per node and waits for all of them.
fedad::NodeRunner process_runner(const Options& o, const fs::path& out) {
  return [o, out](const std::string& stage, const std::vector<std::int64_t>& nodes) {
    const auto exe = self_path();
    std::vector<pid_t> pids;
    for (auto k : nodes) {
      std::vector<std::string> args{exe, stage, "--config", o.config, "--node", std::to_string(k), "--out", out.string()};
      if (o.seed) args.insert(args.end(), {"--seed-override", std::to_string(*o.seed)});
      std::vector<char*> argv;
      for (auto& a : args) argv.push_back(a.data());
      argv.push_back(nullptr);
      pid_t pid = 0;
      if (posix_spawn(&pid, exe.c_str(), nullptr, nullptr, argv.data(), environ) != 0)
        throw fedad::StageError(stage, "failed to spawn worker for node " + std::to_string(k));
      pids.push_back(pid);
    }
    std::string failed;
    for (std::size_t i = 0; i < pids.size(); ++i) {
      int status = 0;
      waitpid(pids[i], &status, 0);
      if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) failed += " " + fedad::node_id(nodes[i]);
    }
    if (!failed.empty()) throw fedad::StageError(stage, "worker process failed for" + failed);
  };
}

void print_summary(const fedad::FederationReport& r) {
  std::cout << std::fixed << std::setprecision(4);
  std::cout << "standalone (mean)   " << r.standalone_mean << "\n";
  std::cout << "ensemble            " << fedad::headline_score(r.ensemble) << "\n";
  std::cout << "FedAD central       " << fedad::headline_score(r.central) << "  (" << r.central.metric << " "
            << r.central.mean << ")\n";
  std::cout << "uplink bytes        " << r.ledger.uplink_bytes() << "\n";
  std::cout << "downlink bytes      " << r.ledger.downlink_bytes() << "\n";
}

int run(const std::string& command, const Options& o) {
  auto config = fedad::load_experiment_config(o.config);
  if (o.seed) fedad::apply_seed_override(config, *o.seed);
  const auto out = resolve_out(config, o);
  fs::create_directories(out);
  fedad::io::atomic_write(out / "config.json", config.to_json().dump(2));
  fedad::Federation fed(config, out);

  auto need_node = [&] {
    if (o.node < 0) throw fedad::ConfigError(command + ": --node is required");
    return o.node;
  };

  if (command == "partition") {
    log_stage(fed.partition(o.force));
    std::cout << (out / "partition.json").string() << "\n";
  } else if (command == "train-local") {
    log_stage(fed.train_local(need_node(), o.force));
  } else if (command == "products") {
    log_stage(fed.products(need_node(), o.force));
  } else if (command == "distill") {
    log_stage(fed.bundles(o.force));
    log_stage(fed.distill(o.force));
  } else if (command == "evaluate") {
    auto r = fed.evaluate();
    print_summary(r);
  } else if (command == "report") {
    auto files = fedad::render_report(fed);
    for (const auto& f : files.figures) std::cout << f.string() << "\n";
    for (const auto& f : files.tables) std::cout << f.string() << "\n";
  } else if (command == "run-all") {
    auto r = o.multiprocess ? fed.run_all(process_runner(o, out)) : fed.run_all();
    for (const auto& s : r.stages) log_stage(s);
    fedad::render_report(fed);
    print_summary(r);
  } else if (command == "baseline-fedavg") {
    fed.partition();
    auto r = fed.baseline_fedavg(o.rounds);
    std::cout << std::fixed << std::setprecision(4) << "FedAvg central      " << fedad::headline_score(r.report)
              << "\nledger total bytes  " << r.ledger.total_bytes() << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  at::set_num_threads(1);
  CLI::App app{"fedad: one-way offline federated distillation"};
  app.require_subcommand(1);
  Options o;
  const std::vector<std::pair<std::string, std::string>> commands{
      {"partition", "split the private pool into node slices"},
      {"train-local", "train one node's model on its slice"},
      {"products", "infer one node's products on the public data"},
      {"distill", "build ensemble bundles and distill the central model"},
      {"evaluate", "score standalone, ensemble and central models"},
      {"report", "render figures and tables for an evaluated run"},
      {"run-all", "run every stage, reusing finished ones"},
      {"baseline-fedavg", "train the parameter-averaging baseline"}};
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", o.config, "experiment JSON")->required();
    sub->add_option("--seed-override", o.seed, "replace the experiment seed");
    sub->add_option("--out", o.out, "output directory (default: config output_dir, under $FEDAD_OUTPUT_ROOT)");
    if (name == "train-local" || name == "products") sub->add_option("--node", o.node, "node index")->required();
    if (name != "evaluate" && name != "report") sub->add_flag("--force", o.force, "recompute even if up to date");
    if (name == "run-all") sub->add_flag("--multiprocess", o.multiprocess, "one worker process per node");
    if (name == "baseline-fedavg") sub->add_option("--rounds", o.rounds, "communication rounds");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }
  const auto command = app.get_subcommands().front()->get_name();
  try {
    return run(command, o);
  } catch (const fedad::ConfigError& e) {
    std::cerr << "fedad: configuration error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const fedad::MissingArtifactError& e) {
    std::cerr << "fedad: missing artifact: " << e.what() << "\n";
    return kExitMissing;
  } catch (const fedad::StageError& e) {
    std::cerr << "fedad: stage " << e.stage() << " failed: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "fedad: " << e.what() << "\n";
    return kExitRuntime;
  }
}
