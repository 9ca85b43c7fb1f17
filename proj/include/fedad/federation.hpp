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

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "fedad/config.hpp"
#include "fedad/distill.hpp"
#include "fedad/ensemble.hpp"
#include "fedad/evaluate.hpp"
#include "fedad/io.hpp"
#include "fedad/models.hpp"
#include "fedad/partition.hpp"

namespace fedad {

inline constexpr const char* kCentralId = "central";

// ---------------------------------------------------------------------------
// Manifest

struct NodeEntry {
  std::string id;
  ArchitectureSpec architecture;
  OptimizerSpec training;
  std::vector<std::int64_t> slice;  // indices into the private pool
  std::vector<std::int64_t> class_counts;
  std::string status = "pending";   // pending | trained | products
};

struct FederationManifest {
  std::string name;
  Task task = Task::kClassification;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::int64_t pool_size = 0;  // private samples before the split
  // Held out from every slice; never read by the pipeline.
  std::vector<std::int64_t> validation;
  std::vector<NodeEntry> nodes;
  ArchitectureSpec student;
  std::string public_id;
  std::int64_t public_size = 0;
  DistillConfig distill;
  ImportanceWeights weights;  // filled once products are in

  // Unique ids; slices non-empty, inside the pool, pairwise disjoint.
  void validate() const;
  const NodeEntry& node(const std::string& id) const;
  NodeEntry& node(const std::string& id);
  std::int64_t node_index(const std::string& id) const;
};

void to_json(nlohmann::json& j, const FederationManifest& m);
void from_json(const nlohmann::json& j, FederationManifest& m);

std::string node_id(std::int64_t index);

// ---------------------------------------------------------------------------
// Private data access with an audit trail

struct AccessRecord {
  std::string requester;
  std::string owner;  // node id, or "validation"
  std::string stage;
  std::int64_t samples = 0;
};

void to_json(nlohmann::json& j, const AccessRecord& r);

class AccessLog {
 public:
  void add(AccessRecord r) { records_.push_back(std::move(r)); }
  const std::vector<AccessRecord>& records() const { return records_; }
  // Reads where the requester is not the slice owner.
  std::int64_t foreign_reads() const;
  // Reads tagged with any stage other than the given one.
  std::int64_t reads_outside(const std::string& stage) const;

 private:
  std::vector<AccessRecord> records_;
};

// Every read of a private slice goes through here and is logged.
class PrivateStore {
 public:
  PrivateStore(Dataset pool, const FederationManifest& manifest, AccessLog& log);

  Dataset read_slice(const std::string& requester, const std::string& owner, const std::string& stage);
  const Dataset& pool_for_hashing() const { return pool_; }

 private:
  Dataset pool_;
  std::map<std::string, std::vector<std::int64_t>> slices_;
  AccessLog* log_;
};

inline constexpr const char* kLocalTrainingStage = "local-training";

// ---------------------------------------------------------------------------
// Local training

struct LocalTrainingResult {
  NetworkPtr model;
  std::vector<double> epoch_losses;
};

// Supervised training: cross-entropy (classification, per-pixel for
// segmentation) or L1 (reconstruction). Non-finite losses abort with the
// node, epoch and step in the message.
LocalTrainingResult train_supervised(NetworkPtr model, const Dataset& data, Task task, const OptimizerSpec& spec,
                                     std::uint64_t seed, const std::string& label);

LocalTrainingResult train_local(const FederationManifest& manifest, const std::string& node_id, PrivateStore& store);

// ---------------------------------------------------------------------------
// Inference products (the only payload that leaves a node)

struct LocalProduct {
  std::string node_id;
  std::string public_id;
  Task task = Task::kClassification;
  AttentionKind kind = AttentionKind::kGradCam;
  torch::Tensor predictions;  // N x C, N x C x H x W or N x 1 x H x W
  torch::Tensor attention;    // N x C x h x w (N x 1 x h x w in top-1 mode) or N x HW x HW
  torch::Tensor top1;         // N int64, top-1 mode only
  std::vector<std::int64_t> class_counts;
  std::int64_t dataset_size = 0;
  std::int64_t zero_maps = 0;  // all-zero teacher maps
  bool normalized = true;
  bool float16_attention = false;
  bool top1_only = false;
  // Measured on the wire.
  io::ArchiveStats archive;
  std::uint64_t sidecar_bytes = 0;
  std::string config_hash;  // stage hash of the run that produced it

  std::int64_t samples() const { return predictions.defined() ? predictions.size(0) : 0; }
  std::uint64_t byte_size() const { return archive.total() + sidecar_bytes; }
  std::uint64_t metadata_bytes() const { return archive.metadata_bytes + sidecar_bytes; }
};

struct BatchProducts {
  torch::Tensor predictions;
  torch::Tensor attention;
  torch::Tensor top1;
};

// Teacher forward on a batch: predictions plus normalised attention.
BatchProducts compute_products(Network& model, const torch::Tensor& inputs, Task task, const ProductOptions& options,
                               double tau);

// Process-wide count of teacher forward passes made through compute_products.
std::int64_t teacher_invocations();

LocalProduct infer_public_products(Network& model, const PublicDataset& data, Task task, const ProductOptions& options,
                                   double tau, const std::string& node_id, std::int64_t batch_size = 128);

// Closed-form payload bytes: samples x (prediction + attention) values at
// their wire precision, plus the top-1 index in top-1 mode.
std::uint64_t product_payload_bytes(const LocalProduct& product);

// <dir>/<node>.fadt + <dir>/<node>.json, each written atomically. Fills the
// measured sizes into `product`.
void write_product(const std::filesystem::path& dir, LocalProduct& product);
LocalProduct read_product(const std::filesystem::path& dir, const std::string& node_id);

// Number of product tensors equal in shape and value to one of the model's
// parameter tensors.
std::int64_t parameter_tensors_in(const LocalProduct& product, const Network& model);

// ---------------------------------------------------------------------------
// Bundles

struct BundleOptions {
  // Leave all-zero teacher maps out of the min/max.
  bool skip_zero_maps = false;
};

// Class-count weights for classification, size weights otherwise; or uniform.
ImportanceWeights product_weights(const std::vector<LocalProduct>& products, const std::string& weighting);

// Products are combined in node-id order, so input order does not matter.
// `weights` rows follow `products` order.
BundleSet build_bundles(const std::vector<LocalProduct>& products, const ImportanceWeights& weights,
                        const BundleOptions& options = {});

void write_bundles(const std::filesystem::path& path, const BundleSet& bundles);
BundleSet read_bundles(const std::filesystem::path& path);

// Non-one-shot mode: teachers stay reachable and recompute products for
// every batch.
class OnlineTeachers : public BundleSource {
 public:
  OnlineTeachers(std::vector<NetworkPtr> teachers, std::vector<std::string> ids, const PublicDataset& data,
                 ImportanceWeights weights, Task task, ProductOptions products, double tau, BundleOptions options);
  const std::string& public_id() const override { return public_id_; }
  std::int64_t size() const override { return size_; }
  BundleSet fetch(const std::vector<std::int64_t>& samples, const torch::Tensor& inputs) override;

 private:
  std::vector<NetworkPtr> teachers_;
  std::vector<std::string> ids_;
  std::string public_id_;
  std::int64_t size_;
  ImportanceWeights weights_;
  Task task_;
  ProductOptions products_;
  double tau_;
  BundleOptions options_;
};

// ---------------------------------------------------------------------------
// Bandwidth accounting

struct TransferRecord {
  std::string sender;
  std::string receiver;
  std::string payload_kind;  // inference-products | model-parameters
  std::uint64_t bytes = 0;
  std::uint64_t payload_bytes = 0;
  std::uint64_t metadata_bytes = 0;
  std::int64_t round = 0;

  bool operator==(const TransferRecord&) const = default;
};

struct BandwidthLedger {
  std::string method;
  bool asynchronous = false;
  std::vector<TransferRecord> records;

  void add(TransferRecord r) { records.push_back(std::move(r)); }
  std::uint64_t uplink_bytes() const;    // node -> central
  std::uint64_t downlink_bytes() const;  // central -> node
  std::uint64_t total_bytes() const { return uplink_bytes() + downlink_bytes(); }
  std::uint64_t payload_bytes() const;
  std::int64_t transfers(const std::string& direction) const;  // "up" | "down"

  bool operator==(const BandwidthLedger&) const = default;
};

void to_json(nlohmann::json& j, const TransferRecord& r);
void from_json(const nlohmann::json& j, TransferRecord& r);
void to_json(nlohmann::json& j, const BandwidthLedger& l);
void from_json(const nlohmann::json& j, BandwidthLedger& l);
std::string ledger_csv(const BandwidthLedger& ledger);

struct BandwidthRow {
  std::string method;
  std::int64_t transfers = 0;
  std::uint64_t uplink_bytes = 0;
  std::uint64_t downlink_bytes = 0;
  std::uint64_t total_bytes = 0;
  std::uint64_t metadata_bytes = 0;
  std::int64_t rounds = 0;
  bool asynchronous = false;

  bool operator==(const BandwidthRow&) const = default;
};

struct BandwidthReport {
  std::vector<BandwidthRow> rows;
  bool operator==(const BandwidthReport&) const = default;
};

void to_json(nlohmann::json& j, const BandwidthReport& r);
void from_json(const nlohmann::json& j, BandwidthReport& r);
BandwidthReport bandwidth_report(const std::vector<BandwidthLedger>& ledgers);
BandwidthReport bandwidth_report(const BandwidthLedger& ledger);
std::string bandwidth_csv(const BandwidthReport& report);

// ---------------------------------------------------------------------------
// FedAvg baseline

struct FedAvgResult {
  NetworkPtr model;
  BandwidthLedger ledger;
  std::uint64_t param_bytes = 0;
  MetricReport report;
  bool reused = false;
};

// Parameter averaging weighted by slice size. Every node starts each round
// from the global model; the learning rate follows a cosine over rounds.
FedAvgResult fedavg_baseline(const FederationManifest& manifest, PrivateStore& store, std::int64_t rounds,
                             std::int64_t local_epochs);

// ---------------------------------------------------------------------------
// Pipeline

struct StageRun {
  std::string stage;
  bool reused = false;
  double seconds = 0.0;
};

struct PrivacyAudit {
  std::int64_t reads_after_local_training = 0;
  std::int64_t foreign_reads = 0;
  std::int64_t teacher_invocations_during_distill = 0;
  std::int64_t parameter_tensors_in_transfers = 0;
  std::int64_t parameter_transfers = 0;  // ledger records of kind model-parameters
};

struct FederationReport {
  std::string name;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::vector<MetricReport> standalone;
  double standalone_mean = 0.0;           // headline score, plain mean over nodes
  double standalone_weighted_mean = 0.0;  // weighted by slice size
  MetricReport ensemble;                  // weighted teacher ensemble on the test set
  MetricReport central;
  BandwidthLedger ledger;
  ImportanceWeights weights;
  std::int64_t teacher_zero_maps = 0;
  PrivacyAudit privacy;
  std::vector<StageRun> stages;
};

void to_json(nlohmann::json& j, const FederationReport& r);

// Runs a per-node stage ("train-local" or "products") for a set of nodes,
// e.g. in separate processes. Must return only once all of them finished.
using NodeRunner = std::function<void(const std::string& stage, const std::vector<std::int64_t>& nodes)>;

// Stage-by-stage driver over an output directory. Every artifact carries the
// hash of the configuration it depends on; a stage whose artifact matches is
// skipped. Stages called directly (not through run_all) require their inputs
// to exist and throw MissingArtifactError otherwise.
class Federation {
 public:
  Federation(ExperimentConfig config, std::filesystem::path out_dir);

  const ExperimentConfig& config() const { return config_; }
  const std::filesystem::path& out_dir() const { return out_; }
  const FederationManifest& manifest();
  const AccessLog& access_log() const { return access_; }
  const std::vector<StageRun>& stages() const { return stages_; }

  StageRun partition(bool force = false);
  StageRun train_local(std::int64_t node, bool force = false);
  StageRun products(std::int64_t node, bool force = false);
  StageRun bundles(bool force = false);
  StageRun distill(bool force = false);
  FederationReport evaluate();
  FederationReport run_all(const NodeRunner& runner = {});
  FedAvgResult baseline_fedavg(std::optional<std::int64_t> rounds = std::nullopt);

  // Artifact locations.
  std::filesystem::path manifest_path() const { return out_ / "manifest.json"; }
  std::filesystem::path node_dir(std::int64_t node) const;
  std::filesystem::path products_dir() const { return out_ / "products"; }
  std::filesystem::path central_dir() const { return out_ / "central"; }

  // Stage hashes.
  std::string partition_hash() const;
  std::string node_hash(std::int64_t node) const;
  std::string product_hash(std::int64_t node) const;
  std::string bundle_hash() const;
  std::string distill_hash() const;

  NetworkPtr load_local_model(std::int64_t node);
  NetworkPtr load_central_model();
  std::vector<LocalProduct> load_products();
  const PublicDataset& public_data();
  const Dataset& test_data();

 private:
  template <typename F>
  StageRun timed(const std::string& stage, F&& body);
  bool record_matches(const std::filesystem::path& record, const std::string& hash) const;
  void require(const std::filesystem::path& record, const std::string& hash, const std::string& stage,
               const std::string& what) const;
  PrivateStore& store();
  ArchitectureSpec resolve_architecture(const std::string& name);
  void save_manifest();

  ExperimentConfig config_;
  std::filesystem::path out_;
  std::optional<FederationManifest> manifest_;
  std::optional<Dataset> pool_;
  std::optional<Dataset> test_;
  std::optional<PublicDataset> public_;
  std::optional<PrivateStore> store_;
  AccessLog access_;
  std::vector<StageRun> stages_;
  std::int64_t distill_invocations_ = 0;
};

}  // namespace fedad
