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
#include "fedad/config.hpp"

#include <algorithm>
#include <sstream>

#include "fedad/errors.hpp"
#include "fedad/io.hpp"
#include "fedad/schema_data.hpp"

namespace fedad {

using nlohmann::json;

Dataset DataSourceSpec::load() const {
  if (format == "synthetic" && path.empty()) {
    auto d = generate_synthetic(synthetic);
    d.checksum = dataset_checksum(d);
    return d;
  }
  if (path.empty()) throw ConfigError("data source '" + format + "' needs a path");
  return load_dataset(path, format);
}

void to_json(json& j, const DataSourceSpec& s) {
  j = json{{"format", s.format}, {"modality", s.modality}};
  if (!s.path.empty()) j["path"] = s.path;
  if (s.format == "synthetic" && s.path.empty()) j["synthetic"] = s.synthetic;
}

void from_json(const json& j, DataSourceSpec& s) {
  s = DataSourceSpec{};
  s.format = j.value("format", s.format);
  s.path = j.value("path", s.path);
  s.modality = j.value("modality", s.modality);
  if (j.contains("synthetic")) s.synthetic = j.at("synthetic").get<SyntheticConfig>();
}

std::string default_architecture(Task task) {
  switch (task) {
    case Task::kClassification: return "cnn-small";
    case Task::kSegmentation: return "seg-tiny";
    case Task::kReconstruction: return "unet-tiny+nonlocal";
  }
  return "cnn-small";
}

OptimizerSpec default_local_training(Task task) {
  OptimizerSpec s;
  if (task == Task::kReconstruction) {
    s.name = "adam";
    s.schedule = "constant";
    s.lr = 1e-3;
    s.lr_min = 1e-3;
    s.epochs = 10;
    s.batch_size = 32;
  } else {
    s.epochs = 10;
  }
  return s;
}

namespace {

json node_json(const NodeTemplate& n) { return {{"architecture", n.architecture}, {"training", n.training}}; }

NodeTemplate parse_node(const json& j, const NodeTemplate& base) {
  NodeTemplate n = base;
  n.architecture = j.value("architecture", n.architecture);
  if (j.contains("training")) {
    auto merged = json(n.training);
    merged.update(j.at("training"));
    n.training = merged.get<OptimizerSpec>();
  }
  return n;
}

std::string describe(const std::string& path) { return path.empty() ? "/" : path; }

const json& resolve_ref(const json& node, const json& root) {
  if (!node.contains("$ref")) return node;
  auto ref = node.at("$ref").get<std::string>();
  if (ref.rfind("#/", 0) != 0) throw ConfigError("schema: only local $ref supported, got " + ref);
  return root.at(json::json_pointer(ref.substr(1)));
}

bool type_matches(const json& v, const std::string& type) {
  if (type == "object") return v.is_object();
  if (type == "array") return v.is_array();
  if (type == "string") return v.is_string();
  if (type == "boolean") return v.is_boolean();
  if (type == "integer") return v.is_number_integer();
  if (type == "number") return v.is_number();
  if (type == "null") return v.is_null();
  throw ConfigError("schema: unknown type '" + type + "'");
}

void validate_node(const json& v, const json& schema_in, const json& root, const std::string& path) {
  const json& schema = resolve_ref(schema_in, root);
  auto fail = [&](const std::string& msg) { throw ConfigError("config " + describe(path) + ": " + msg); };

  if (schema.contains("type")) {
    auto type = schema.at("type").get<std::string>();
    if (!type_matches(v, type)) fail("expected " + type + ", got " + std::string(v.type_name()));
  }
  if (schema.contains("enum")) {
    const auto& options = schema.at("enum");
    if (std::find(options.begin(), options.end(), v) == options.end()) fail("must be one of " + options.dump());
  }
  if (v.is_number()) {
    double x = v.get<double>();
    auto bound = [&](const char* key) { return schema.contains(key) ? std::optional(schema.at(key).get<double>()) : std::nullopt; };
    if (auto b = bound("minimum"); b && x < *b) fail("must be >= " + json(*b).dump());
    if (auto b = bound("maximum"); b && x > *b) fail("must be <= " + json(*b).dump());
    if (auto b = bound("exclusiveMinimum"); b && x <= *b) fail("must be > " + json(*b).dump());
    if (auto b = bound("exclusiveMaximum"); b && x >= *b) fail("must be < " + json(*b).dump());
  }
  if (v.is_string() && schema.contains("minLength") &&
      v.get<std::string>().size() < schema.at("minLength").get<std::size_t>())
    fail("string too short");
  if (v.is_array()) {
    if (schema.contains("minItems") && v.size() < schema.at("minItems").get<std::size_t>())
      fail("needs at least " + schema.at("minItems").dump() + " items");
    if (schema.contains("items"))
      for (std::size_t i = 0; i < v.size(); ++i)
        validate_node(v[i], schema.at("items"), root, path + "/" + std::to_string(i));
  }
  if (v.is_object()) {
    if (schema.contains("required"))
      for (const auto& key : schema.at("required"))
        if (!v.contains(key.get<std::string>())) fail("missing required key '" + key.get<std::string>() + "'");
    const json empty = json::object();
    const json& props = schema.contains("properties") ? schema.at("properties") : empty;
    bool closed = schema.contains("additionalProperties") && schema.at("additionalProperties") == false;
    for (const auto& [key, value] : v.items()) {
      if (props.contains(key)) validate_node(value, props.at(key), root, path + "/" + key);
      else if (closed) fail("unknown key '" + key + "'");
    }
  }
}

}  // namespace

const json& experiment_schema() {
  static const json schema = json::parse(detail::kExperimentSchema);
  return schema;
}

void validate_against_schema(const json& document, const json& schema) {
  validate_node(document, schema, schema, "");
}

json ExperimentConfig::to_json() const {
  json nodes_j = json::array();
  for (const auto& n : nodes) nodes_j.push_back(node_json(n));
  json partition = {{"K", num_nodes}, {"alpha", alpha}, {"seed", effective_partition_seed()}};
  if (!size_fractions.empty()) partition["size_fractions"] = size_fractions;
  return json{
      {"name", name},
      {"task", fedad::to_string(task)},
      {"seed", seed},
      {"output_dir", output_dir},
      {"data",
       {{"private", private_data},
        {"test", test_data},
        {"public", public_data},
        {"public_size", public_size},
        {"holdout_fraction", holdout_fraction}}},
      {"partition", partition},
      {"nodes", nodes_j},
      {"student", node_json(student)},
      {"distill", distill},
      {"ensemble", {{"weighting", weighting}, {"skip_zero_maps", skip_zero_maps}}},
      {"products", {{"float16_attention", products.float16_attention}, {"top1_only", products.top1_only}}},
      {"fedavg", {{"rounds", fedavg_rounds}, {"local_epochs", fedavg_local_epochs}}},
      {"evaluation", {{"vc_dimension", evaluation.vc_dimension}, {"delta", evaluation.delta}, {"lambda", evaluation.lambda}}}};
}

std::string ExperimentConfig::hash() const {
  auto j = to_json();
  j.erase("output_dir");  // where results go does not change them
  return io::sha256_hex(j.dump());
}

ExperimentConfig parse_experiment_config(const json& doc) {
  validate_against_schema(doc, experiment_schema());
  ExperimentConfig c;
  try {
    c.name = doc.at("name").get<std::string>();
    c.task = task_from_string(doc.at("task").get<std::string>());
    c.seed = doc.value("seed", std::uint64_t{0});
    c.output_dir = doc.value("output_dir", std::string("runs/") + c.name);

    const auto& data = doc.at("data");
    auto source = [&](const char* key) {
      auto s = data.at(key).get<DataSourceSpec>();
      if (!data.at(key).contains("synthetic") || !data.at(key).at("synthetic").contains("task")) s.synthetic.task = c.task;
      return s;
    };
    c.private_data = source("private");
    c.test_data = source("test");
    c.public_data = source("public");
    c.public_size = data.value("public_size", std::int64_t{0});
    c.holdout_fraction = data.value("holdout_fraction", 0.1);

    const auto& part = doc.at("partition");
    c.num_nodes = part.at("K").get<std::int64_t>();
    c.alpha = part.value("alpha", 1.0);
    if (part.contains("seed")) c.partition_seed = part.at("seed").get<std::uint64_t>();
    if (part.contains("size_fractions")) c.size_fractions = part.at("size_fractions").get<std::vector<double>>();
    if (!c.size_fractions.empty() && static_cast<std::int64_t>(c.size_fractions.size()) != c.num_nodes)
      throw ConfigError("config /partition/size_fractions: needs exactly K entries");

    NodeTemplate base{default_architecture(c.task), default_local_training(c.task)};
    if (doc.contains("node_defaults")) base = parse_node(doc.at("node_defaults"), base);
    if (doc.contains("nodes")) {
      const auto& list = doc.at("nodes");
      if (static_cast<std::int64_t>(list.size()) != c.num_nodes)
        throw ConfigError("config /nodes: has " + std::to_string(list.size()) + " entries but K = " +
                          std::to_string(c.num_nodes));
      for (const auto& n : list) c.nodes.push_back(parse_node(n, base));
    } else {
      c.nodes.assign(static_cast<std::size_t>(c.num_nodes), base);
    }
    c.student = doc.contains("student") ? parse_node(doc.at("student"), base) : base;

    json distill = doc.value("distill", json::object());
    if (!distill.contains("task")) distill["task"] = fedad::to_string(c.task);
    if (!distill.contains("seed")) distill["seed"] = c.seed;
    c.distill = distill.get<DistillConfig>();
    if (c.distill.task != c.task) throw ConfigError("config /distill/task: must match the experiment task");

    if (doc.contains("ensemble")) {
      c.weighting = doc.at("ensemble").value("weighting", c.weighting);
      c.skip_zero_maps = doc.at("ensemble").value("skip_zero_maps", c.skip_zero_maps);
    }
    if (doc.contains("products")) {
      c.products.float16_attention = doc.at("products").value("float16_attention", false);
      c.products.top1_only = doc.at("products").value("top1_only", false);
    }
    if (c.products.top1_only && c.task != Task::kClassification)
      throw ConfigError("config /products/top1_only: only meaningful for classification");
    if (doc.contains("fedavg")) {
      c.fedavg_rounds = doc.at("fedavg").value("rounds", c.fedavg_rounds);
      c.fedavg_local_epochs = doc.at("fedavg").value("local_epochs", c.fedavg_local_epochs);
    }
    if (doc.contains("evaluation")) {
      const auto& e = doc.at("evaluation");
      c.evaluation.vc_dimension = e.value("vc_dimension", c.evaluation.vc_dimension);
      c.evaluation.delta = e.value("delta", c.evaluation.delta);
      c.evaluation.lambda = e.value("lambda", c.evaluation.lambda);
    }
    c.distill.validate();
    for (const auto& n : c.nodes) n.training.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  json doc;
  try {
    doc = json::parse(io::read_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": invalid JSON: " + e.what());
  }
  auto c = parse_experiment_config(doc);
  // relative data paths resolve against the config file's directory
  auto base = path.parent_path();
  for (auto* s : {&c.private_data, &c.test_data, &c.public_data})
    if (!s->path.empty() && std::filesystem::path(s->path).is_relative()) s->path = (base / s->path).string();
  return c;
}

void apply_seed_override(ExperimentConfig& config, std::uint64_t seed) {
  config.seed = seed;
  config.partition_seed.reset();
  config.distill.seed = seed;
}

}  // namespace fedad
