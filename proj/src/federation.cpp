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
#include "fedad/federation.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>

#include "fedad/errors.hpp"

namespace fedad {

using nlohmann::json;
namespace fs = std::filesystem;

std::string node_id(std::int64_t index) { return "node-" + std::to_string(index); }

// ---------------------------------------------------------------------------
// Manifest

void FederationManifest::validate() const {
  std::set<std::string> ids;
  std::vector<char> seen(static_cast<std::size_t>(std::max<std::int64_t>(pool_size, 0)), 0);
  for (auto v : validation)
    if (v >= 0 && v < pool_size) seen[static_cast<std::size_t>(v)] = 1;
  for (const auto& n : nodes) {
    if (!ids.insert(n.id).second) throw std::invalid_argument("manifest: duplicate node id '" + n.id + "'");
    if (n.slice.empty()) throw std::invalid_argument("manifest: node '" + n.id + "' has an empty slice");
    for (auto i : n.slice) {
      if (i < 0 || i >= pool_size)
        throw std::invalid_argument("manifest: node '" + n.id + "' references sample " + std::to_string(i) +
                                    " outside the private pool");
      if (seen[static_cast<std::size_t>(i)])
        throw std::invalid_argument("manifest: sample " + std::to_string(i) + " assigned twice (node '" + n.id + "')");
      seen[static_cast<std::size_t>(i)] = 1;
    }
  }
}

const NodeEntry& FederationManifest::node(const std::string& id) const {
  for (const auto& n : nodes)
    if (n.id == id) return n;
  throw std::out_of_range("manifest: unknown node '" + id + "'");
}

NodeEntry& FederationManifest::node(const std::string& id) {
  return const_cast<NodeEntry&>(std::as_const(*this).node(id));
}

std::int64_t FederationManifest::node_index(const std::string& id) const {
  for (std::size_t k = 0; k < nodes.size(); ++k)
    if (nodes[k].id == id) return static_cast<std::int64_t>(k);
  throw std::out_of_range("manifest: unknown node '" + id + "'");
}

void to_json(json& j, const FederationManifest& m) {
  json nodes = json::array();
  for (const auto& n : m.nodes)
    nodes.push_back({{"id", n.id},
                     {"architecture", n.architecture},
                     {"training", n.training},
                     {"slice", n.slice},
                     {"class_counts", n.class_counts},
                     {"status", n.status}});
  j = json{{"name", m.name},
           {"task", to_string(m.task)},
           {"seed", m.seed},
           {"config_hash", m.config_hash},
           {"pool_size", m.pool_size},
           {"validation", m.validation},
           {"nodes", nodes},
           {"student", m.student},
           {"public_id", m.public_id},
           {"public_size", m.public_size},
           {"distill", m.distill},
           {"weights", m.weights}};
}

void from_json(const json& j, FederationManifest& m) {
  m = FederationManifest{};
  m.name = j.at("name").get<std::string>();
  m.task = task_from_string(j.at("task").get<std::string>());
  m.seed = j.at("seed").get<std::uint64_t>();
  m.config_hash = j.value("config_hash", std::string());
  m.pool_size = j.at("pool_size").get<std::int64_t>();
  m.validation = j.value("validation", std::vector<std::int64_t>{});
  for (const auto& n : j.at("nodes")) {
    NodeEntry e;
    e.id = n.at("id").get<std::string>();
    e.architecture = n.at("architecture").get<ArchitectureSpec>();
    e.training = n.at("training").get<OptimizerSpec>();
    e.slice = n.at("slice").get<std::vector<std::int64_t>>();
    e.class_counts = n.value("class_counts", std::vector<std::int64_t>{});
    e.status = n.value("status", std::string("pending"));
    m.nodes.push_back(std::move(e));
  }
  m.student = j.at("student").get<ArchitectureSpec>();
  m.public_id = j.value("public_id", std::string());
  m.public_size = j.value("public_size", std::int64_t{0});
  m.distill = j.at("distill").get<DistillConfig>();
  if (j.contains("weights")) m.weights = j.at("weights").get<ImportanceWeights>();
}

// ---------------------------------------------------------------------------
// Private store

std::int64_t AccessLog::foreign_reads() const {
  return std::count_if(records_.begin(), records_.end(), [](const auto& r) { return r.requester != r.owner; });
}

std::int64_t AccessLog::reads_outside(const std::string& stage) const {
  return std::count_if(records_.begin(), records_.end(), [&](const auto& r) { return r.stage != stage; });
}

void to_json(json& j, const AccessRecord& r) {
  j = json{{"requester", r.requester}, {"owner", r.owner}, {"stage", r.stage}, {"samples", r.samples}};
}

namespace {

AccessRecord access_from_json(const json& j) {
  return {j.at("requester").get<std::string>(), j.at("owner").get<std::string>(), j.at("stage").get<std::string>(),
          j.at("samples").get<std::int64_t>()};
}

}  // namespace

PrivateStore::PrivateStore(Dataset pool, const FederationManifest& manifest, AccessLog& log)
    : pool_(std::move(pool)), log_(&log) {
  if (pool_.size() != manifest.pool_size)
    throw std::invalid_argument("private store: pool has " + std::to_string(pool_.size()) +
                                " samples, manifest expects " + std::to_string(manifest.pool_size));
  for (const auto& n : manifest.nodes) slices_[n.id] = n.slice;
}

Dataset PrivateStore::read_slice(const std::string& requester, const std::string& owner, const std::string& stage) {
  auto it = slices_.find(owner);
  if (it == slices_.end()) throw std::out_of_range("private store: no slice for node '" + owner + "'");
  log_->add({requester, owner, stage, static_cast<std::int64_t>(it->second.size())});
  return pool_.subset(it->second);
}

// ---------------------------------------------------------------------------
// Local training

namespace {

torch::Tensor supervised_loss(const torch::Tensor& output, const Dataset& data, const torch::Tensor& idx, Task task) {
  namespace F = torch::nn::functional;
  switch (task) {
    case Task::kClassification: {
      auto labels = torch::tensor(data.labels, torch::kInt64).index_select(0, idx);
      return F::cross_entropy(output, labels);
    }
    case Task::kSegmentation: return F::cross_entropy(output, data.targets.index_select(0, idx));
    case Task::kReconstruction: return F::l1_loss(output, data.targets.index_select(0, idx));
  }
  throw std::invalid_argument("unknown task");
}

}  // namespace

LocalTrainingResult train_supervised(NetworkPtr model, const Dataset& data, Task task, const OptimizerSpec& spec,
                                     std::uint64_t seed, const std::string& label) {
  spec.validate();
  if (!model) throw std::invalid_argument(label + ": no model");
  if (data.size() < 1) throw std::invalid_argument(label + ": empty training slice");
  if (task == Task::kClassification && static_cast<std::int64_t>(data.labels.size()) != data.size())
    throw std::invalid_argument(label + ": classification data without labels");
  if (task != Task::kClassification && !data.targets.defined())
    throw std::invalid_argument(label + ": data without targets");

  LocalTrainingResult result;
  result.model = model;
  const auto per_epoch = (data.size() + spec.batch_size - 1) / spec.batch_size;
  Trainer trainer(model->parameters(), spec, per_epoch * spec.epochs);
  model->train();
  for (std::int64_t e = 0; e < spec.epochs; ++e) {
    std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(e)));
    double sum = 0.0;
    std::int64_t count = 0;
    for (const auto& batch : make_batches(data.size(), spec.batch_size, rng)) {
      auto idx = index_tensor(batch);
      trainer.zero_grad();
      auto out = model->forward(data.inputs.index_select(0, idx)).output;
      auto loss = supervised_loss(out, data, idx, task);
      double v = loss.item<double>();
      if (!std::isfinite(v)) {
        std::ostringstream msg;
        msg << label << ": non-finite training loss at epoch " << e << ", step " << trainer.steps_taken()
            << " (lr " << trainer.current_lr() << ", batch of " << batch.size() << ")";
        throw std::runtime_error(msg.str());
      }
      loss.backward();
      trainer.step();
      sum += v * static_cast<double>(batch.size());
      count += static_cast<std::int64_t>(batch.size());
    }
    result.epoch_losses.push_back(sum / static_cast<double>(count));
  }
  model->eval();
  return result;
}

LocalTrainingResult train_local(const FederationManifest& manifest, const std::string& id, PrivateStore& store) {
  const auto& entry = manifest.node(id);
  auto k = static_cast<std::uint64_t>(manifest.node_index(id));
  auto data = store.read_slice(id, id, kLocalTrainingStage);
  seed_torch(manifest.seed, 1000 + k);
  auto model = build_network(entry.architecture);
  return train_supervised(model, data, manifest.task, entry.training, mix_seed(manifest.seed, 2000 + k), id);
}

// ---------------------------------------------------------------------------
// Products

namespace {
std::atomic<std::int64_t> g_teacher_invocations{0};

AttentionKind kind_for(Task task) {
  switch (task) {
    case Task::kClassification: return AttentionKind::kGradCam;
    case Task::kSegmentation: return AttentionKind::kSegmentationProb;
    case Task::kReconstruction: return AttentionKind::kNonlocalRow;
  }
  return AttentionKind::kGradCam;
}

// All-zero trailing 2D maps.
torch::Tensor zero_map_mask(const torch::Tensor& maps) { return maps.flatten(-2).amax(-1).le(0); }
}  // namespace

std::int64_t teacher_invocations() { return g_teacher_invocations.load(); }

BatchProducts compute_products(Network& model, const torch::Tensor& inputs, Task task, const ProductOptions& options,
                               double tau) {
  ++g_teacher_invocations;
  model.eval();
  BatchProducts out;
  switch (task) {
    case Task::kClassification: {
      torch::AutoGradMode grad(true);
      auto cam = gradcam_all(model, inputs, model.default_attention_layer(), false);
      out.predictions = cam.logits.detach();
      out.attention = normalize_maps(cam.maps.detach());
      if (options.top1_only) {
        out.top1 = out.predictions.argmax(1);
        auto n = out.attention.size(0);
        auto index = out.top1.view({n, 1, 1, 1}).expand({n, 1, out.attention.size(2), out.attention.size(3)});
        out.attention = out.attention.gather(1, index);
      }
      break;
    }
    case Task::kSegmentation: {
      torch::NoGradGuard guard;
      out.predictions = model.forward(inputs).output;
      out.attention = segmentation_attention_maps(out.predictions, tau);
      break;
    }
    case Task::kReconstruction: {
      torch::NoGradGuard guard;
      auto fw = model.forward(inputs);
      if (!fw.nonlocal_attention.defined())
        throw std::invalid_argument("products: " + model.architecture() + " exposes no non-local attention");
      out.predictions = fw.output;
      out.attention = normalize_maps(fw.nonlocal_attention);
      break;
    }
  }
  out.predictions = out.predictions.to(torch::kFloat32).contiguous();
  out.attention = out.attention.to(options.float16_attention ? torch::kHalf : torch::kFloat32).contiguous();
  return out;
}

LocalProduct infer_public_products(Network& model, const PublicDataset& data, Task task, const ProductOptions& options,
                                   double tau, const std::string& id, std::int64_t batch_size) {
  if (data.size() < 1) throw std::invalid_argument("products: empty public dataset");
  if (batch_size < 1) throw std::invalid_argument("products: batch size must be positive");
  if (options.top1_only && task != Task::kClassification)
    throw std::invalid_argument("products: top-1 mode needs a classification task");
  std::vector<torch::Tensor> preds, maps, top1;
  for (std::int64_t s = 0; s < data.size(); s += batch_size) {
    auto batch = data.samples.slice(0, s, std::min(data.size(), s + batch_size));
    auto p = compute_products(model, batch, task, options, tau);
    preds.push_back(p.predictions);
    maps.push_back(p.attention);
    if (p.top1.defined()) top1.push_back(p.top1);
  }
  LocalProduct product;
  product.node_id = id;
  product.public_id = data.id;
  product.task = task;
  product.kind = kind_for(task);
  product.predictions = torch::cat(preds);
  product.attention = torch::cat(maps);
  if (!top1.empty()) product.top1 = torch::cat(top1);
  product.float16_attention = options.float16_attention;
  product.top1_only = options.top1_only;
  product.zero_maps = zero_map_mask(product.attention.to(torch::kFloat32)).sum().item<std::int64_t>();
  return product;
}

std::uint64_t product_payload_bytes(const LocalProduct& p) {
  std::uint64_t bytes = static_cast<std::uint64_t>(p.predictions.numel()) * 4;
  bytes += static_cast<std::uint64_t>(p.attention.numel()) * (p.float16_attention ? 2 : 4);
  if (p.top1_only) bytes += static_cast<std::uint64_t>(p.samples()) * 8;
  return bytes;
}

namespace {

std::vector<io::NamedTensor> product_tensors(const LocalProduct& p) {
  std::vector<io::NamedTensor> t{{"predictions", p.predictions}, {"attention", p.attention}};
  if (p.top1_only) t.push_back({"top1", p.top1});
  return t;
}

json product_sidecar(const LocalProduct& p, const std::string& archive_sha) {
  return json{{"node_id", p.node_id},
              {"public_id", p.public_id},
              {"task", to_string(p.task)},
              {"kind", to_string(p.kind)},
              {"samples", p.samples()},
              {"class_counts", p.class_counts},
              {"dataset_size", p.dataset_size},
              {"zero_maps", p.zero_maps},
              {"normalized", p.normalized},
              {"float16_attention", p.float16_attention},
              {"top1_only", p.top1_only},
              {"archive_sha256", archive_sha},
              {"hash", p.config_hash}};
}

}  // namespace

void write_product(const fs::path& dir, LocalProduct& p) {
  if (p.samples() < 1) throw std::invalid_argument("write_product: empty product");
  fs::create_directories(dir);
  auto archive = dir / (p.node_id + ".fadt");
  p.archive = io::write_tensor_archive(archive, product_tensors(p));
  auto sidecar = product_sidecar(p, io::file_sha256(archive)).dump(2);
  io::atomic_write(dir / (p.node_id + ".json"), sidecar);
  p.sidecar_bytes = sidecar.size();
}

LocalProduct read_product(const fs::path& dir, const std::string& id) {
  auto archive = dir / (id + ".fadt");
  auto sidecar = dir / (id + ".json");
  if (!fs::exists(archive) || !fs::exists(sidecar))
    throw MissingArtifactError("products: no product files for " + id + " in " + dir.string());
  auto meta = json::parse(io::read_file(sidecar));
  if (meta.at("archive_sha256").get<std::string>() != io::file_sha256(archive))
    throw std::runtime_error("products: " + archive.string() + " does not match its sidecar hash");
  auto tensors = io::read_tensor_archive(archive);
  LocalProduct p;
  p.node_id = meta.at("node_id").get<std::string>();
  p.public_id = meta.at("public_id").get<std::string>();
  p.task = task_from_string(meta.at("task").get<std::string>());
  p.kind = attention_kind_from_string(meta.at("kind").get<std::string>());
  p.class_counts = meta.at("class_counts").get<std::vector<std::int64_t>>();
  p.dataset_size = meta.at("dataset_size").get<std::int64_t>();
  p.zero_maps = meta.at("zero_maps").get<std::int64_t>();
  p.normalized = meta.at("normalized").get<bool>();
  p.float16_attention = meta.at("float16_attention").get<bool>();
  p.top1_only = meta.at("top1_only").get<bool>();
  p.config_hash = meta.value("hash", std::string());
  p.predictions = io::find_tensor(tensors, "predictions");
  p.attention = io::find_tensor(tensors, "attention");
  if (p.top1_only) p.top1 = io::find_tensor(tensors, "top1");
  if (p.samples() != meta.at("samples").get<std::int64_t>() || p.attention.size(0) != p.samples())
    throw std::runtime_error("products: sample count of " + id + " disagrees with its sidecar");
  p.archive = io::archive_stats(tensors);
  p.sidecar_bytes = fs::file_size(sidecar);
  return p;
}

std::int64_t parameter_tensors_in(const LocalProduct& product, const Network& model) {
  std::int64_t hits = 0;
  auto params = model.parameters();
  for (const auto& t : product_tensors(product)) {
    auto value = t.value.to(torch::kFloat32).flatten();
    for (const auto& p : params) {
      if (p.numel() != value.numel()) continue;
      if (torch::equal(value, p.detach().to(torch::kFloat32).flatten())) ++hits;
    }
  }
  return hits;
}

// ---------------------------------------------------------------------------
// Bundles

ImportanceWeights product_weights(const std::vector<LocalProduct>& products, const std::string& weighting) {
  if (products.empty()) throw std::invalid_argument("weights: no products");
  if (weighting == "uniform") return uniform_weights(static_cast<std::int64_t>(products.size()));
  if (weighting != "importance") throw std::invalid_argument("weights: unknown weighting '" + weighting + "'");
  if (products.front().task == Task::kClassification) {
    std::vector<std::vector<std::int64_t>> counts;
    for (const auto& p : products) counts.push_back(p.class_counts);
    return class_importance_weights(counts);
  }
  std::vector<std::int64_t> sizes;
  for (const auto& p : products) sizes.push_back(p.dataset_size);
  return size_weights(sizes);
}

namespace {

// Per-class maps and the availability of each map; top-1 products only
// carry the predicted class.
std::pair<torch::Tensor, torch::Tensor> expand_attention(const LocalProduct& p, std::int64_t classes) {
  auto maps = p.attention.to(torch::kFloat32);
  auto n = maps.size(0);
  if (!p.top1_only) {
    std::vector<std::int64_t> lead(maps.sizes().begin(), maps.sizes().end() - 2);
    return {maps, torch::ones(lead, torch::kBool)};
  }
  auto h = maps.size(2), w = maps.size(3);
  auto full = torch::zeros({n, classes, h, w}, torch::kFloat32);
  full.scatter_(1, p.top1.view({n, 1, 1, 1}).expand({n, 1, h, w}), maps);
  auto avail = torch::zeros({n, classes}, torch::kBool);
  avail.scatter_(1, p.top1.view({n, 1}), true);
  return {full, avail};
}

}  // namespace

BundleSet build_bundles(const std::vector<LocalProduct>& products, const ImportanceWeights& weights,
                        const BundleOptions& options) {
  if (products.empty()) throw std::invalid_argument("build_bundles: missing node products");
  if (weights.num_nodes() != static_cast<std::int64_t>(products.size()))
    throw std::invalid_argument("build_bundles: " + std::to_string(weights.num_nodes()) + " weight rows for " +
                                std::to_string(products.size()) + " products");
  std::vector<std::size_t> order(products.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return products[a].node_id < products[b].node_id; });
  for (std::size_t i = 1; i < order.size(); ++i)
    if (products[order[i]].node_id == products[order[i - 1]].node_id)
      throw std::invalid_argument("build_bundles: duplicate product from " + products[order[i]].node_id);

  const auto& ref = products[order.front()];
  for (const auto& p : products) {
    if (p.public_id != ref.public_id)
      throw std::invalid_argument("build_bundles: public dataset hash mismatch (" + p.node_id + ")");
    if (p.task != ref.task || p.top1_only != ref.top1_only)
      throw std::invalid_argument("build_bundles: product mode differs for " + p.node_id);
    if (p.predictions.sizes() != ref.predictions.sizes() || p.attention.sizes() != ref.attention.sizes())
      throw std::invalid_argument("build_bundles: shape drift in products of " + p.node_id);
    if (p.samples() < 1) throw std::invalid_argument("build_bundles: empty product from " + p.node_id);
  }

  ImportanceWeights sorted = weights;
  std::vector<torch::Tensor> preds;
  for (std::size_t i = 0; i < order.size(); ++i) {
    sorted.values[i] = weights.values[order[i]];
    preds.push_back(products[order[i]].predictions.to(torch::kFloat32));
  }

  BundleSet b;
  b.public_id = ref.public_id;
  b.kind = ref.kind;
  b.z_hat = weighted_ensemble(preds, sorted);

  const auto classes = ref.predictions.dim() >= 2 ? ref.predictions.size(1) : 1;
  std::vector<torch::Tensor> maps, avail;
  for (auto i : order) {
    auto [m, a] = expand_attention(products[i], classes);
    if (options.skip_zero_maps) a = a.logical_and(zero_map_mask(m).logical_not());
    maps.push_back(m);
    avail.push_back(a);
  }
  auto stacked = torch::stack(maps);
  auto available = torch::stack(avail);
  if (available.all().item<bool>()) {
    std::tie(b.lower, b.upper) = bounds_of(stacked);
  } else {
    auto mask = available.unsqueeze(-1).unsqueeze(-1).expand_as(stacked);
    auto inf = std::numeric_limits<float>::infinity();
    auto any = available.any(0).unsqueeze(-1).unsqueeze(-1).expand_as(stacked[0]);
    auto lo = torch::where(mask, stacked, torch::full_like(stacked, inf)).amin(0);
    auto hi = torch::where(mask, stacked, torch::full_like(stacked, -inf)).amax(0);
    b.lower = torch::where(any, lo, torch::zeros_like(lo));
    b.upper = torch::where(any, hi, torch::zeros_like(hi));
  }
  return b;
}

void write_bundles(const fs::path& path, const BundleSet& b) {
  io::write_tensor_archive(path, {{"z_hat", b.z_hat}, {"lower", b.lower}, {"upper", b.upper}});
  auto meta = json{{"public_id", b.public_id}, {"kind", to_string(b.kind)}};
  io::atomic_write(fs::path(path).replace_extension(".meta.json"), meta.dump(2));
}

BundleSet read_bundles(const fs::path& path) {
  auto meta_path = fs::path(path).replace_extension(".meta.json");
  if (!fs::exists(path) || !fs::exists(meta_path)) throw MissingArtifactError("bundles: missing " + path.string());
  auto tensors = io::read_tensor_archive(path);
  auto meta = json::parse(io::read_file(meta_path));
  BundleSet b;
  b.public_id = meta.at("public_id").get<std::string>();
  b.kind = attention_kind_from_string(meta.at("kind").get<std::string>());
  b.z_hat = io::find_tensor(tensors, "z_hat");
  b.lower = io::find_tensor(tensors, "lower");
  b.upper = io::find_tensor(tensors, "upper");
  return b;
}

OnlineTeachers::OnlineTeachers(std::vector<NetworkPtr> teachers, std::vector<std::string> ids, const PublicDataset& data,
                               ImportanceWeights weights, Task task, ProductOptions products, double tau,
                               BundleOptions options)
    : teachers_(std::move(teachers)),
      ids_(std::move(ids)),
      public_id_(data.id),
      size_(data.size()),
      weights_(std::move(weights)),
      task_(task),
      products_(products),
      tau_(tau),
      options_(options) {
  if (teachers_.empty() || teachers_.size() != ids_.size())
    throw std::invalid_argument("online teachers: need one id per teacher");
}

BundleSet OnlineTeachers::fetch(const std::vector<std::int64_t>&, const torch::Tensor& inputs) {
  std::vector<LocalProduct> products;
  for (std::size_t k = 0; k < teachers_.size(); ++k) {
    auto batch = compute_products(*teachers_[k], inputs, task_, products_, tau_);
    LocalProduct p;
    p.node_id = ids_[k];
    p.public_id = public_id_;
    p.task = task_;
    p.kind = kind_for(task_);
    p.predictions = batch.predictions;
    p.attention = batch.attention;
    p.top1 = batch.top1;
    p.top1_only = products_.top1_only;
    products.push_back(std::move(p));
  }
  return build_bundles(products, weights_, options_);
}

// ---------------------------------------------------------------------------
// Ledger

std::uint64_t BandwidthLedger::uplink_bytes() const {
  std::uint64_t s = 0;
  for (const auto& r : records)
    if (r.receiver == kCentralId) s += r.bytes;
  return s;
}

std::uint64_t BandwidthLedger::downlink_bytes() const {
  std::uint64_t s = 0;
  for (const auto& r : records)
    if (r.sender == kCentralId) s += r.bytes;
  return s;
}

std::uint64_t BandwidthLedger::payload_bytes() const {
  std::uint64_t s = 0;
  for (const auto& r : records) s += r.payload_bytes;
  return s;
}

std::int64_t BandwidthLedger::transfers(const std::string& direction) const {
  if (direction != "up" && direction != "down") throw std::invalid_argument("ledger: direction is 'up' or 'down'");
  const bool up = direction == "up";
  return std::count_if(records.begin(), records.end(),
                       [&](const auto& r) { return up ? r.receiver == kCentralId : r.sender == kCentralId; });
}

void to_json(json& j, const TransferRecord& r) {
  j = json{{"sender", r.sender},
           {"receiver", r.receiver},
           {"payload_kind", r.payload_kind},
           {"bytes", r.bytes},
           {"payload_bytes", r.payload_bytes},
           {"metadata_bytes", r.metadata_bytes},
           {"round", r.round}};
}

void from_json(const json& j, TransferRecord& r) {
  j.at("sender").get_to(r.sender);
  j.at("receiver").get_to(r.receiver);
  j.at("payload_kind").get_to(r.payload_kind);
  j.at("bytes").get_to(r.bytes);
  j.at("payload_bytes").get_to(r.payload_bytes);
  j.at("metadata_bytes").get_to(r.metadata_bytes);
  j.at("round").get_to(r.round);
}

void to_json(json& j, const BandwidthLedger& l) {
  j = json{{"method", l.method},
           {"asynchronous", l.asynchronous},
           {"records", l.records},
           {"totals", {{"uplink_bytes", l.uplink_bytes()}, {"downlink_bytes", l.downlink_bytes()},
                       {"total_bytes", l.total_bytes()}}}};
}

void from_json(const json& j, BandwidthLedger& l) {
  l.method = j.at("method").get<std::string>();
  l.asynchronous = j.at("asynchronous").get<bool>();
  l.records = j.at("records").get<std::vector<TransferRecord>>();
}

std::string ledger_csv(const BandwidthLedger& l) {
  std::ostringstream out;
  out << "method,round,sender,receiver,payload_kind,bytes,payload_bytes,metadata_bytes\n";
  for (const auto& r : l.records)
    out << l.method << ',' << r.round << ',' << r.sender << ',' << r.receiver << ',' << r.payload_kind << ','
        << r.bytes << ',' << r.payload_bytes << ',' << r.metadata_bytes << '\n';
  return out.str();
}

void to_json(json& j, const BandwidthReport& r) {
  j = json::array();
  for (const auto& row : r.rows)
    j.push_back({{"method", row.method},
                 {"transfers", row.transfers},
                 {"uplink_bytes", row.uplink_bytes},
                 {"downlink_bytes", row.downlink_bytes},
                 {"total_bytes", row.total_bytes},
                 {"metadata_bytes", row.metadata_bytes},
                 {"rounds", row.rounds},
                 {"asynchronous", row.asynchronous}});
}

void from_json(const json& j, BandwidthReport& r) {
  r.rows.clear();
  for (const auto& e : j) {
    BandwidthRow row;
    e.at("method").get_to(row.method);
    e.at("transfers").get_to(row.transfers);
    e.at("uplink_bytes").get_to(row.uplink_bytes);
    e.at("downlink_bytes").get_to(row.downlink_bytes);
    e.at("total_bytes").get_to(row.total_bytes);
    e.at("metadata_bytes").get_to(row.metadata_bytes);
    e.at("rounds").get_to(row.rounds);
    e.at("asynchronous").get_to(row.asynchronous);
    r.rows.push_back(std::move(row));
  }
}

BandwidthReport bandwidth_report(const std::vector<BandwidthLedger>& ledgers) {
  BandwidthReport report;
  for (const auto& l : ledgers) {
    BandwidthRow row;
    row.method = l.method;
    row.transfers = static_cast<std::int64_t>(l.records.size());
    row.uplink_bytes = l.uplink_bytes();
    row.downlink_bytes = l.downlink_bytes();
    row.total_bytes = l.total_bytes();
    for (const auto& r : l.records) {
      row.metadata_bytes += r.metadata_bytes;
      row.rounds = std::max(row.rounds, r.round + 1);
    }
    row.asynchronous = l.asynchronous;
    report.rows.push_back(std::move(row));
  }
  return report;
}

BandwidthReport bandwidth_report(const BandwidthLedger& ledger) { return bandwidth_report(std::vector{ledger}); }

std::string bandwidth_csv(const BandwidthReport& report) {
  std::ostringstream out;
  out << "method,transfers,uplink_bytes,downlink_bytes,total_bytes,metadata_bytes,rounds,asynchronous\n";
  for (const auto& r : report.rows)
    out << r.method << ',' << r.transfers << ',' << r.uplink_bytes << ',' << r.downlink_bytes << ',' << r.total_bytes
        << ',' << r.metadata_bytes << ',' << r.rounds << ',' << (r.asynchronous ? "true" : "false") << '\n';
  return out.str();
}

// ---------------------------------------------------------------------------
// FedAvg

FedAvgResult fedavg_baseline(const FederationManifest& manifest, PrivateStore& store, std::int64_t rounds,
                             std::int64_t local_epochs) {
  if (manifest.nodes.empty()) throw std::invalid_argument("fedavg: no nodes");
  if (rounds < 1) throw std::invalid_argument("fedavg: rounds must be >= 1");
  if (local_epochs < 0) throw std::invalid_argument("fedavg: local_epochs must be >= 0");
  const auto& arch = manifest.nodes.front().architecture;
  for (const auto& n : manifest.nodes)
    if (json(n.architecture) != json(arch))
      throw std::invalid_argument("fedavg: heterogeneous architectures (" + manifest.nodes.front().id + ": " +
                                  arch.name + ", " + n.id + ": " + n.architecture.name +
                                  "); parameter averaging needs identical parameter layouts");

  FedAvgResult result;
  result.ledger.method = "FedAvg";
  result.ledger.asynchronous = false;
  seed_torch(manifest.seed, 2);
  result.model = build_network(arch);
  const auto params = parameter_count(*result.model);
  result.param_bytes = static_cast<std::uint64_t>(params) * 4;
  const auto wire = io::archive_stats({{"parameters", torch::zeros({params}, torch::kFloat32)}});

  std::vector<Dataset> slices;
  std::int64_t total = 0;
  for (const auto& n : manifest.nodes) {
    slices.push_back(store.read_slice(n.id, n.id, "fedavg-baseline"));
    total += slices.back().size();
  }

  for (std::int64_t r = 0; r < rounds; ++r) {
    auto global = flatten_parameters(*result.model);
    auto accum = torch::zeros({params}, torch::kFloat64);
    for (std::size_t k = 0; k < manifest.nodes.size(); ++k) {
      const auto& node = manifest.nodes[k];
      result.ledger.add({kCentralId, node.id, "model-parameters", wire.total(), wire.payload_bytes,
                         wire.metadata_bytes, r});
      auto local = build_network(arch);
      load_flat_parameters(*local, global);
      if (local_epochs > 0) {
        auto spec = node.training;
        const double t = static_cast<double>(r) / static_cast<double>(rounds);
        spec.lr = spec.schedule == "cosine"
                      ? spec.lr_min + 0.5 * (spec.lr - spec.lr_min) * (1.0 + std::cos(std::numbers::pi * t))
                      : spec.lr;
        spec.schedule = "constant";
        spec.epochs = local_epochs;
        train_supervised(local, slices[k], manifest.task, spec,
                         mix_seed(manifest.seed, 3000 + static_cast<std::uint64_t>(r) * 97 + k), node.id);
      }
      result.ledger.add({node.id, kCentralId, "model-parameters", wire.total(), wire.payload_bytes,
                         wire.metadata_bytes, r});
      accum += static_cast<double>(slices[k].size()) * flatten_parameters(*local).to(torch::kFloat64);
    }
    load_flat_parameters(*result.model, (accum / static_cast<double>(total)).to(torch::kFloat32));
  }
  result.model->eval();
  return result;
}

// ---------------------------------------------------------------------------
// Report

void to_json(json& j, const FederationReport& r) {
  json stages = json::array();
  for (const auto& s : r.stages) stages.push_back({{"stage", s.stage}, {"reused", s.reused}, {"seconds", s.seconds}});
  j = json{{"name", r.name},
           {"config_hash", r.config_hash},
           {"seed", r.seed},
           {"standalone", r.standalone},
           {"standalone_mean", r.standalone_mean},
           {"standalone_weighted_mean", r.standalone_weighted_mean},
           {"ensemble", r.ensemble},
           {"central", r.central},
           {"ledger", r.ledger},
           {"bandwidth", bandwidth_report(r.ledger)},
           {"weights", r.weights},
           {"teacher_zero_maps", r.teacher_zero_maps},
           {"privacy",
            {{"reads_after_local_training", r.privacy.reads_after_local_training},
             {"foreign_reads", r.privacy.foreign_reads},
             {"teacher_invocations_during_distill", r.privacy.teacher_invocations_during_distill},
             {"parameter_tensors_in_transfers", r.privacy.parameter_tensors_in_transfers},
             {"parameter_transfers", r.privacy.parameter_transfers}}},
           {"stages", stages}};
}

// ---------------------------------------------------------------------------
// Pipeline

namespace {

std::string hash_of(const json& j) { return io::sha256_hex(j.dump()); }

json read_json(const fs::path& p) { return json::parse(io::read_file(p)); }

void write_json(const fs::path& p, const json& j) {
  fs::create_directories(p.parent_path());
  io::atomic_write(p, j.dump(2));
}

std::vector<std::int64_t> partition_labels(const Dataset& pool, Task task) {
  switch (task) {
    case Task::kClassification: return pool.labels;
    case Task::kSegmentation: {
      // dominant foreground class of each mask (0 when there is none)
      std::vector<std::int64_t> labels;
      auto counts = torch::nn::functional::one_hot(pool.targets.flatten(1), pool.num_classes).sum(1);
      counts.select(1, 0).zero_();
      auto best = counts.argmax(1);
      for (std::int64_t i = 0; i < best.size(0); ++i) labels.push_back(best[i].item<std::int64_t>());
      return labels;
    }
    case Task::kReconstruction: return std::vector<std::int64_t>(static_cast<std::size_t>(pool.size()), 0);
  }
  return {};
}

}  // namespace

Federation::Federation(ExperimentConfig config, fs::path out_dir) : config_(std::move(config)), out_(std::move(out_dir)) {
  if (config_.num_nodes != static_cast<std::int64_t>(config_.nodes.size()))
    throw ConfigError("config: " + std::to_string(config_.nodes.size()) + " node entries for K = " +
                      std::to_string(config_.num_nodes));
}

fs::path Federation::node_dir(std::int64_t node) const { return out_ / "nodes" / node_id(node); }

std::string Federation::partition_hash() const {
  return hash_of({{"task", to_string(config_.task)},
                  {"private", config_.private_data},
                  {"holdout_fraction", config_.holdout_fraction},
                  {"K", config_.num_nodes},
                  {"alpha", config_.alpha},
                  {"seed", config_.effective_partition_seed()},
                  {"size_fractions", config_.size_fractions}});
}

std::string Federation::node_hash(std::int64_t k) const {
  const auto& n = config_.nodes.at(static_cast<std::size_t>(k));
  return hash_of({{"partition", partition_hash()},
                  {"node", k},
                  {"architecture", n.architecture},
                  {"training", n.training},
                  {"seed", config_.seed}});
}

std::string Federation::product_hash(std::int64_t k) const {
  json j = {{"node", node_hash(k)},
            {"public", config_.public_data},
            {"public_size", config_.public_size},
            {"float16_attention", config_.products.float16_attention},
            {"top1_only", config_.products.top1_only}};
  if (config_.task == Task::kSegmentation) j["tau"] = config_.distill.tau;
  return hash_of(j);
}

std::string Federation::bundle_hash() const {
  json products = json::array();
  for (std::int64_t k = 0; k < config_.num_nodes; ++k) products.push_back(product_hash(k));
  return hash_of({{"products", products}, {"weighting", config_.weighting}, {"skip_zero_maps", config_.skip_zero_maps}});
}

std::string Federation::distill_hash() const {
  return hash_of({{"bundles", bundle_hash()},
                  {"student", config_.student.architecture},
                  {"distill", config_.distill},
                  {"seed", config_.seed}});
}

bool Federation::record_matches(const fs::path& record, const std::string& hash) const {
  if (!fs::exists(record)) return false;
  try {
    return read_json(record).value("hash", std::string()) == hash;
  } catch (const json::exception&) {
    return false;
  }
}

void Federation::require(const fs::path& record, const std::string& hash, const std::string& stage,
                         const std::string& what) const {
  if (!fs::exists(record))
    throw MissingArtifactError(stage + ": missing " + what + " (" + record.string() + "); run that stage first");
  if (!record_matches(record, hash))
    throw MissingArtifactError(stage + ": " + what + " was produced by a different configuration (hash mismatch in " +
                               record.string() + "); rerun that stage");
}

template <typename F>
StageRun Federation::timed(const std::string& stage, F&& body) {
  auto start = std::chrono::steady_clock::now();
  const auto logged = access_.records().size();
  StageRun run{stage, false, 0.0};
  try {
    run.reused = body();
  } catch (const ConfigError&) {
    throw;
  } catch (const MissingArtifactError&) {
    throw;
  } catch (const StageError&) {
    throw;
  } catch (const c10::Error& e) {
    throw StageError(stage, e.what_without_backtrace());
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
  run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (!run.reused) {
    // persist this stage's private reads so audits survive process boundaries
    json reads = json::array();
    for (auto i = logged; i < access_.records().size(); ++i) reads.push_back(access_.records()[i]);
    auto name = stage;
    std::replace(name.begin(), name.end(), '/', '-');
    write_json(out_ / "audit" / (name + ".json"), reads);
  }
  stages_.push_back(run);
  return run;
}

ArchitectureSpec Federation::resolve_architecture(const std::string& name) {
  auto part = read_json(out_ / "partition.json");
  ArchitectureSpec spec = part.at("geometry").get<ArchitectureSpec>();
  spec.name = name;
  return spec;
}

const PublicDataset& Federation::public_data() {
  if (!public_) {
    auto d = config_.public_data.load();
    auto full = make_public_dataset(d.inputs, config_.public_data.modality);
    if (config_.public_size > full.size())
      throw ConfigError("config /data/public_size: " + std::to_string(config_.public_size) + " exceeds the " +
                        std::to_string(full.size()) + " available public samples");
    public_ = config_.public_size > 0 && config_.public_size < full.size() ? truncate_public(full, config_.public_size)
                                                                           : full;
  }
  return *public_;
}

const Dataset& Federation::test_data() {
  if (!test_) test_ = config_.test_data.load();
  return *test_;
}

const FederationManifest& Federation::manifest() {
  if (manifest_) return *manifest_;
  auto part_path = out_ / "partition.json";
  require(part_path, partition_hash(), "partition", "partition");
  auto part = read_json(part_path);
  FederationManifest m;
  m.name = config_.name;
  m.task = config_.task;
  m.seed = config_.seed;
  m.config_hash = config_.hash();
  m.pool_size = part.at("pool_size").get<std::int64_t>();
  m.validation = part.at("validation").get<std::vector<std::int64_t>>();
  const auto& slices = part.at("slices");
  const auto& counts = part.at("class_counts");
  for (std::int64_t k = 0; k < config_.num_nodes; ++k) {
    NodeEntry e;
    e.id = node_id(k);
    e.architecture = resolve_architecture(config_.nodes[static_cast<std::size_t>(k)].architecture);
    e.training = config_.nodes[static_cast<std::size_t>(k)].training;
    e.slice = slices.at(static_cast<std::size_t>(k)).get<std::vector<std::int64_t>>();
    e.class_counts = counts.at(static_cast<std::size_t>(k)).get<std::vector<std::int64_t>>();
    if (record_matches(products_dir() / (e.id + ".json"), product_hash(k))) e.status = "products";
    else if (record_matches(node_dir(k) / "record.json", node_hash(k))) e.status = "trained";
    m.nodes.push_back(std::move(e));
  }
  m.student = resolve_architecture(config_.student.architecture);
  m.public_id = public_data().id;
  m.public_size = public_data().size();
  m.distill = config_.distill;
  if (record_matches(central_dir() / "bundles.json", bundle_hash()))
    m.weights = read_json(central_dir() / "bundles.json").at("weights").get<ImportanceWeights>();
  m.validate();
  manifest_ = std::move(m);
  return *manifest_;
}

void Federation::save_manifest() {
  manifest_.reset();
  write_json(manifest_path(), json(manifest()));
}

PrivateStore& Federation::store() {
  if (!store_) {
    if (!pool_) pool_ = config_.private_data.load();
    store_.emplace(*pool_, manifest(), access_);
  }
  return *store_;
}

StageRun Federation::partition(bool force) {
  return timed("partition", [&] {
    auto record = out_ / "partition.json";
    auto hash = partition_hash();
    if (!force && record_matches(record, hash)) return true;
    if (!pool_) pool_ = config_.private_data.load();
    const auto& pool = *pool_;
    if (pool.size() < 2) throw std::invalid_argument("partition: private pool needs at least two samples");
    auto labels = partition_labels(pool, config_.task);
    std::vector<std::int64_t> all(static_cast<std::size_t>(pool.size()));
    std::iota(all.begin(), all.end(), 0);
    auto seed = config_.effective_partition_seed();
    auto split = holdout_validation(all, config_.holdout_fraction, mix_seed(seed, 17));
    std::vector<std::int64_t> train_labels;
    for (auto i : split.train) train_labels.push_back(labels[static_cast<std::size_t>(i)]);
    PartitionSpec spec = config_.size_fractions.empty()
                             ? dirichlet_partition(train_labels, config_.num_nodes, config_.alpha, seed,
                                                   config_.task == Task::kReconstruction ? 1 : pool.num_classes)
                             : fraction_partition(static_cast<std::int64_t>(split.train.size()), config_.size_fractions,
                                                  seed);
    json slices = json::array();
    for (const auto& a : spec.assignments) {
      std::vector<std::int64_t> s;
      for (auto i : a) s.push_back(split.train[static_cast<std::size_t>(i)]);
      std::sort(s.begin(), s.end());
      slices.push_back(s);
    }
    ArchitectureSpec geometry;
    geometry.in_channels = pool.inputs.size(1);
    geometry.height = pool.inputs.size(2);
    geometry.width = pool.inputs.size(3);
    geometry.num_classes = config_.task == Task::kReconstruction ? 1 : pool.num_classes;
    write_json(record, {{"hash", hash},
                        {"pool_size", pool.size()},
                        {"pool_checksum", pool.checksum},
                        {"alpha", config_.alpha},
                        {"seed", seed},
                        {"validation", split.validation},
                        {"slices", slices},
                        {"class_counts", spec.class_counts},
                        {"non_iid_degree", non_iid_degree(spec)},
                        {"geometry", geometry}});
    store_.reset();
    manifest_.reset();
    save_manifest();
    return false;
  });
}

StageRun Federation::train_local(std::int64_t k, bool force) {
  if (k < 0 || k >= config_.num_nodes)
    throw ConfigError("train-local: node " + std::to_string(k) + " outside 0.." + std::to_string(config_.num_nodes - 1));
  return timed("local-training/" + node_id(k), [&] {
    auto record = node_dir(k) / "record.json";
    auto hash = node_hash(k);
    if (!force && record_matches(record, hash) && fs::exists(node_dir(k) / "model.pt")) return true;
    const auto& m = manifest();
    auto id = node_id(k);
    auto result = fedad::train_local(m, id, store());
    fs::create_directories(node_dir(k));
    save_network(*result.model, (node_dir(k) / "model.pt").string());
    write_json(record, {{"hash", hash},
                        {"node", id},
                        {"architecture", m.node(id).architecture},
                        {"train_size", static_cast<std::int64_t>(m.node(id).slice.size())},
                        {"epoch_losses", result.epoch_losses}});
    return false;
  });
}

NetworkPtr Federation::load_local_model(std::int64_t k) {
  require(node_dir(k) / "record.json", node_hash(k), "train-local", "local model of " + node_id(k));
  const auto& m = manifest();
  auto net = build_network(m.nodes.at(static_cast<std::size_t>(k)).architecture);
  load_network(*net, (node_dir(k) / "model.pt").string());
  net->eval();
  return net;
}

StageRun Federation::products(std::int64_t k, bool force) {
  if (k < 0 || k >= config_.num_nodes)
    throw ConfigError("products: node " + std::to_string(k) + " outside 0.." + std::to_string(config_.num_nodes - 1));
  return timed("products/" + node_id(k), [&] {
    auto id = node_id(k);
    auto hash = product_hash(k);
    if (!force && record_matches(products_dir() / (id + ".json"), hash) && fs::exists(products_dir() / (id + ".fadt")))
      return true;
    auto model = load_local_model(k);
    const auto& m = manifest();
    auto product =
        infer_public_products(*model, public_data(), config_.task, config_.products, config_.distill.tau, id);
    product.class_counts = m.node(id).class_counts;
    product.dataset_size = static_cast<std::int64_t>(m.node(id).slice.size());
    product.config_hash = hash;
    write_product(products_dir(), product);
    return false;
  });
}

std::vector<LocalProduct> Federation::load_products() {
  std::vector<LocalProduct> out;
  const auto& public_id = public_data().id;
  for (std::int64_t k = 0; k < config_.num_nodes; ++k) {
    auto id = node_id(k);
    require(products_dir() / (id + ".json"), product_hash(k), "products", "products of " + id);
    auto p = read_product(products_dir(), id);
    if (p.public_id != public_id)
      throw std::runtime_error("products of " + id + " were computed on a different public dataset (hash mismatch)");
    out.push_back(std::move(p));
  }
  return out;
}

StageRun Federation::bundles(bool force) {
  return timed("bundles", [&] {
    auto record = central_dir() / "bundles.json";
    auto hash = bundle_hash();
    if (!force && record_matches(record, hash) && fs::exists(central_dir() / "bundles.fadt")) return true;
    auto products = load_products();
    auto weights = product_weights(products, config_.weighting);
    auto b = build_bundles(products, weights, {config_.skip_zero_maps});
    fs::create_directories(central_dir());
    write_bundles(central_dir() / "bundles.fadt", b);
    BandwidthLedger ledger;
    ledger.method = "FedAD";
    ledger.asynchronous = true;
    std::int64_t zero_maps = 0;
    for (const auto& p : products) {
      auto bytes = fs::file_size(products_dir() / (p.node_id + ".fadt")) + fs::file_size(products_dir() / (p.node_id + ".json"));
      ledger.add({p.node_id, kCentralId, "inference-products", bytes, p.archive.payload_bytes, bytes - p.archive.payload_bytes, 0});
      zero_maps += p.zero_maps;
    }
    write_json(central_dir() / "ledger.json", ledger);
    io::atomic_write(central_dir() / "ledger.csv", ledger_csv(ledger));
    write_json(record, {{"hash", hash},
                        {"public_id", b.public_id},
                        {"kind", to_string(b.kind)},
                        {"weights", weights},
                        {"teacher_zero_maps", zero_maps}});
    save_manifest();
    return false;
  });
}

StageRun Federation::distill(bool force) {
  return timed("distill", [&] {
    auto record = central_dir() / "training.json";
    auto hash = distill_hash();
    if (!force && record_matches(record, hash) && fs::exists(central_dir() / "model.pt")) return true;
    require(central_dir() / "bundles.json", bundle_hash(), "bundles", "ensemble bundles");
    const auto& m = manifest();
    const auto& data = public_data();
    auto cfg = config_.distill;
    seed_torch(config_.seed, 1);
    auto student = build_student(m.student);
    const auto before = teacher_invocations();
    StudentState state;
    if (cfg.one_shot) {
      auto b = read_bundles(central_dir() / "bundles.fadt");
      if (b.public_id != data.id) throw std::runtime_error("bundles were built on a different public dataset");
      PrecomputedBundles source(std::move(b));
      state = fedad::distill(student, data, source, cfg);
    } else {
      std::vector<NetworkPtr> teachers;
      std::vector<std::string> ids;
      for (std::int64_t k = 0; k < config_.num_nodes; ++k) {
        teachers.push_back(load_local_model(k));
        ids.push_back(node_id(k));
      }
      OnlineTeachers source(teachers, ids, data, m.weights, config_.task, config_.products, cfg.tau,
                            {config_.skip_zero_maps});
      auto per_epoch = (data.size() + cfg.optimizer.batch_size - 1) / cfg.optimizer.batch_size;
      state.model = student;
      Trainer trainer(student->parameters(), cfg.optimizer, per_epoch * cfg.optimizer.epochs * cfg.rounds);
      for (std::int64_t e = 0; e < cfg.optimizer.epochs * cfg.rounds; ++e)
        distill_epoch(state, data, source, cfg, trainer);
      student->eval();
    }
    const auto invocations = teacher_invocations() - before;
    fs::create_directories(central_dir());
    save_network(*state.model, (central_dir() / "model.pt").string());
    auto rec = training_record(state, hash);
    rec["hash"] = hash;
    rec["teacher_invocations"] = invocations;
    write_json(record, rec);
    io::atomic_write(central_dir() / "losses.csv", loss_history_csv(state.history));
    return false;
  });
}

NetworkPtr Federation::load_central_model() {
  require(central_dir() / "training.json", distill_hash(), "distill", "central model");
  auto net = build_network(manifest().student);
  load_network(*net, (central_dir() / "model.pt").string());
  net->eval();
  return net;
}

FederationReport Federation::evaluate() {
  FederationReport report;
  timed("evaluate", [&] {
    auto central = load_central_model();
    const auto& m = manifest();
    const auto& test = test_data();
    report.name = config_.name;
    report.config_hash = config_.hash();
    report.seed = config_.seed;

    auto bundles_rec = read_json(central_dir() / "bundles.json");
    report.weights = bundles_rec.at("weights").get<ImportanceWeights>();
    report.teacher_zero_maps = bundles_rec.value("teacher_zero_maps", std::int64_t{0});
    report.ledger = read_json(central_dir() / "ledger.json").get<BandwidthLedger>();

    auto products = load_products();
    std::vector<torch::Tensor> teacher_outputs;
    double total = 0.0, weighted = 0.0;
    for (std::int64_t k = 0; k < config_.num_nodes; ++k) {
      auto model = load_local_model(k);
      auto outputs = predict(*model, test.inputs);
      auto r = score_outputs(outputs, test, config_.task);
      r.seed = config_.seed;
      r.config_hash = node_hash(k);
      auto size = static_cast<double>(m.nodes[static_cast<std::size_t>(k)].slice.size());
      report.standalone_mean += headline_score(r) / static_cast<double>(config_.num_nodes);
      weighted += size * headline_score(r);
      total += size;
      report.standalone.push_back(r);
      teacher_outputs.push_back(outputs);
      report.privacy.parameter_tensors_in_transfers += parameter_tensors_in(products[static_cast<std::size_t>(k)], *model);
    }
    report.standalone_weighted_mean = weighted / total;
    report.ensemble = score_outputs(weighted_ensemble(teacher_outputs, report.weights), test, config_.task);
    report.ensemble.seed = config_.seed;
    report.ensemble.config_hash = bundle_hash();
    report.central = evaluate_model(*central, test, config_.task);
    report.central.seed = config_.seed;
    report.central.config_hash = distill_hash();

    // private reads, from every stage of this run that touched the store
    AccessLog audit;
    if (fs::exists(out_ / "audit"))
      for (const auto& f : fs::directory_iterator(out_ / "audit"))
        for (const auto& r : read_json(f.path())) audit.add(access_from_json(r));
    report.privacy.reads_after_local_training = audit.reads_outside(kLocalTrainingStage);
    report.privacy.foreign_reads = audit.foreign_reads();
    report.privacy.teacher_invocations_during_distill =
        read_json(central_dir() / "training.json").value("teacher_invocations", std::int64_t{0});
    report.privacy.parameter_transfers = std::count_if(
        report.ledger.records.begin(), report.ledger.records.end(),
        [](const auto& r) { return r.payload_kind == "model-parameters"; });

    write_json(out_ / "metrics" / "central.json", report.central);
    write_json(out_ / "metrics" / "ensemble.json", report.ensemble);
    for (std::size_t k = 0; k < report.standalone.size(); ++k)
      write_json(out_ / "metrics" / (node_id(static_cast<std::int64_t>(k)) + ".json"), report.standalone[k]);

    std::vector<ComparisonRow> rows;
    auto metrics = [](const MetricReport& r) {
      std::map<std::string, double> v{{r.metric, r.mean}};
      for (const auto& [key, value] : r.extras) v[key] = value;
      return v;
    };
    for (std::size_t k = 0; k < report.standalone.size(); ++k)
      rows.push_back({"Standalone " + node_id(static_cast<std::int64_t>(k)), node_id(static_cast<std::int64_t>(k)),
                      "test", metrics(report.standalone[k])});
    rows.push_back({"Ensemble", "all", "test", metrics(report.ensemble)});
    rows.push_back({"FedAD", "all", "test", metrics(report.central)});
    io::atomic_write(out_ / "comparison.csv", comparison_csv(rows));
    io::atomic_write(out_ / "bandwidth.csv", bandwidth_csv(bandwidth_report(report.ledger)));
    return false;
  });
  report.stages = stages_;
  write_json(out_ / "report.json", report);
  return report;
}

FederationReport Federation::run_all(const NodeRunner& runner) {
  partition();
  std::vector<std::int64_t> nodes(static_cast<std::size_t>(config_.num_nodes));
  std::iota(nodes.begin(), nodes.end(), 0);
  for (const auto* stage : {"train-local", "products"}) {
    if (runner) {
      std::vector<std::int64_t> pending;
      for (auto k : nodes) {
        bool done = std::string(stage) == "train-local"
                        ? record_matches(node_dir(k) / "record.json", node_hash(k))
                        : record_matches(products_dir() / (node_id(k) + ".json"), product_hash(k));
        if (!done) pending.push_back(k);
      }
      if (!pending.empty()) runner(stage, pending);
      for (auto k : nodes) {
        if (std::string(stage) == "train-local")
          require(node_dir(k) / "record.json", node_hash(k), "train-local", "local model of " + node_id(k));
        else
          require(products_dir() / (node_id(k) + ".json"), product_hash(k), "products", "products of " + node_id(k));
      }
    } else {
      for (auto k : nodes) std::string(stage) == "train-local" ? train_local(k) : products(k);
    }
  }
  bundles();
  distill();
  return evaluate();
}

FedAvgResult Federation::baseline_fedavg(std::optional<std::int64_t> rounds_override) {
  FedAvgResult result;
  const auto rounds = rounds_override.value_or(config_.fedavg_rounds);
  timed("fedavg-baseline", [&] {
    auto dir = out_ / "fedavg";
    json spec;
    for (const auto& n : config_.nodes) spec.push_back({{"architecture", n.architecture}, {"training", n.training}});
    auto hash = hash_of({{"partition", partition_hash()},
                         {"nodes", spec},
                         {"rounds", rounds},
                         {"local_epochs", config_.fedavg_local_epochs},
                         {"seed", config_.seed},
                         {"test", config_.test_data}});
    const auto& m = manifest();
    if (record_matches(dir / "record.json", hash) && fs::exists(dir / "model.pt")) {
      auto rec = read_json(dir / "record.json");
      result.model = build_network(m.nodes.front().architecture);
      load_network(*result.model, (dir / "model.pt").string());
      result.model->eval();
      result.ledger = rec.at("ledger").get<BandwidthLedger>();
      result.param_bytes = rec.at("param_bytes").get<std::uint64_t>();
      result.report = rec.at("metrics").get<MetricReport>();
      result.reused = true;
      return true;
    }
    // the baseline protocol reads private data in every round; its reads go
    // to a separate audit so they do not mix with the one-shot pipeline's
    AccessLog log;
    if (!pool_) pool_ = config_.private_data.load();
    PrivateStore baseline_store(*pool_, m, log);
    result = fedavg_baseline(m, baseline_store, rounds, config_.fedavg_local_epochs);
    result.report = evaluate_model(*result.model, test_data(), config_.task);
    result.report.seed = config_.seed;
    result.report.config_hash = hash;
    fs::create_directories(dir);
    save_network(*result.model, (dir / "model.pt").string());
    json reads = json::array();
    for (const auto& r : log.records()) reads.push_back(r);
    write_json(dir / "record.json", {{"hash", hash},
                                     {"rounds", rounds},
                                     {"param_bytes", result.param_bytes},
                                     {"ledger", result.ledger},
                                     {"metrics", result.report},
                                     {"private_reads", reads}});
    io::atomic_write(dir / "ledger.csv", ledger_csv(result.ledger));
    return false;
  });
  return result;
}

}  // namespace fedad
