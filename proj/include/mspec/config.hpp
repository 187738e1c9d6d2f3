#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "mspec/benchmarks.hpp"
#include "mspec/errors.hpp"
#include "mspec/io.hpp"
#include "mspec/networks.hpp"
#include "mspec/training.hpp"

// Run configuration: one JSON document validated against a published schema
// before any work happens. Unknown keys are rejected.

namespace mspec::config {

using json = nlohmann::json;

struct RunConfig {
  std::string model_name = "gaussian2d";
  std::size_t observations_per_dataset = 100;  // K
  bench::MisspecConfig misspec;
  nets::NetworkHyper network;
  train::TrainConfig training;
  std::size_t m_validation = 1000;
  std::size_t null_repetitions = 1000;
  double alpha = 0.05;
  mmd::KernelSpec kernel;  // scales empty = default set for S
  std::uint64_t seed = 1;
  std::string out_dir = ".";
};

// The schema shipped with the tool (`mspec schema` prints it verbatim).
inline json schema() {
  return json::parse(R"({
  "$schema": "https://json-schema.org/draft/2020-12/schema",
  "title": "mspec run configuration",
  "type": "object",
  "additionalProperties": false,
  "required": ["model"],
  "properties": {
    "model": {
      "type": "object",
      "additionalProperties": false,
      "required": ["name"],
      "properties": {
        "name": {"type": "string", "enum": ["gaussian2d", "gaussian5d_niw", "cancer_stromal"]},
        "k": {"type": "integer", "minimum": 1},
        "misspec": {
          "type": "object",
          "additionalProperties": false,
          "properties": {
            "variant": {"type": "string"},
            "mu0": {"type": "array", "items": {"type": "number"}},
            "tau0": {"type": "number", "exclusiveMinimum": 0},
            "tau": {"type": "number", "exclusiveMinimum": 0},
            "lambda": {"type": "number", "minimum": 0, "maximum": 1},
            "df": {"type": "number", "minimum": 1},
            "pi": {"type": "number", "minimum": 0, "maximum": 1}
          }
        }
      }
    },
    "network": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "summary_dim": {"type": "integer", "minimum": 1},
        "equivariant_widths": {"type": "array", "items": {"type": "integer"}},
        "post_widths": {"type": "array", "items": {"type": "integer"}},
        "pooling": {"type": "string", "enum": ["mean", "max", "mean_max"]},
        "activation": {"type": "string", "enum": ["tanh", "softplus"]},
        "whiten_pooled": {"type": "boolean"},
        "flow_layers": {"type": "integer", "minimum": 0},
        "flow_hidden": {"type": "array", "items": {"type": "integer"}},
        "scale_clamp": {"type": "number", "exclusiveMinimum": 0}
      }
    },
    "train": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "gamma": {"type": "number", "minimum": 0},
        "batch_size": {"type": "integer", "minimum": 2},
        "n_steps": {"type": "integer", "minimum": 1},
        "learning_rate": {"type": "number", "exclusiveMinimum": 0},
        "cosine_decay": {"type": "boolean"},
        "clip_norm": {"type": "number", "exclusiveMinimum": 0}
      }
    },
    "detector": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "m_validation": {"type": "integer", "minimum": 1},
        "null_repetitions": {"type": "integer", "minimum": 100},
        "alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "kernel": {
          "type": "object",
          "additionalProperties": false,
          "properties": {
            "family": {"type": "string", "enum": ["gaussian", "imq"]},
            "scales": {"type": "array", "items": {"type": "number"}}
          }
        }
      }
    },
    "seed": {"type": "integer", "minimum": 0},
    "out_dir": {"type": "string"}
  }
})");
}

namespace detail {

inline void validate_node(const json& value, const json& node, const std::string& where) {
  const std::string type = node.value("type", "");
  auto fail = [&](const std::string& msg) { throw ConfigError("config " + where + ": " + msg); };

  if (type == "object") {
    if (!value.is_object()) fail("expected an object");
    const json props = node.value("properties", json::object());
    if (node.value("additionalProperties", true) == false) {
      for (const auto& [key, v] : value.items()) {
        (void)v;
        if (!props.contains(key)) fail("unknown key '" + key + "'");
      }
    }
    for (const auto& req : node.value("required", std::vector<std::string>{})) {
      if (!value.contains(req)) fail("missing required key '" + req + "'");
    }
    for (const auto& [key, sub] : props.items()) {
      if (value.contains(key)) validate_node(value.at(key), sub, where + "." + key);
    }
    return;
  }
  if (type == "array") {
    if (!value.is_array()) fail("expected an array");
    if (node.contains("items")) {
      std::size_t i = 0;
      for (const auto& item : value) {
        validate_node(item, node.at("items"), where + "[" + std::to_string(i++) + "]");
      }
    }
    return;
  }
  if (type == "integer") {
    if (!value.is_number_integer() && !value.is_number_unsigned()) fail("expected an integer");
  } else if (type == "number") {
    if (!value.is_number()) fail("expected a number");
  } else if (type == "string") {
    if (!value.is_string()) fail("expected a string");
  } else if (type == "boolean") {
    if (!value.is_boolean()) fail("expected a boolean");
  }
  if (node.contains("enum")) {
    bool ok = false;
    for (const auto& e : node.at("enum")) ok = ok || e == value;
    if (!ok) fail("value " + value.dump() + " not in " + node.at("enum").dump());
  }
  if (value.is_number()) {
    const double v = value.get<double>();
    if (node.contains("minimum") && v < node.at("minimum").get<double>()) fail("below minimum");
    if (node.contains("maximum") && v > node.at("maximum").get<double>()) fail("above maximum");
    if (node.contains("exclusiveMinimum") && v <= node.at("exclusiveMinimum").get<double>())
      fail("must be strictly above " + node.at("exclusiveMinimum").dump());
    if (node.contains("exclusiveMaximum") && v >= node.at("exclusiveMaximum").get<double>())
      fail("must be strictly below " + node.at("exclusiveMaximum").dump());
  }
}

}  // namespace detail

inline void validate(const json& j) { detail::validate_node(j, schema(), "$"); }

inline RunConfig parse(const json& j) {
  validate(j);
  RunConfig cfg;
  const auto& model = j.at("model");
  cfg.model_name = model.at("name").get<std::string>();
  cfg.observations_per_dataset = model.value("k", std::size_t{100});
  if (model.contains("misspec")) {
    const auto& mj = model.at("misspec");
    cfg.misspec.variant =
        bench::variant_from_name(mj.value("variant", std::string{"none"}));
    cfg.misspec.mu0 = mj.value("mu0", std::vector<double>{});
    cfg.misspec.tau0 = mj.value("tau0", 1.0);
    cfg.misspec.tau = mj.value("tau", 1.0);
    cfg.misspec.lambda = mj.value("lambda", 0.0);
    cfg.misspec.df = mj.value("df", 50.0);
    cfg.misspec.pi = mj.value("pi", 0.0);
    cfg.misspec.validate();
  }
  if (j.contains("network")) {
    const auto& nj = j.at("network");
    cfg.network.summary_dim = nj.value("summary_dim", std::size_t{2});
    cfg.network.equivariant_widths =
        nj.value("equivariant_widths", std::vector<std::size_t>{64, 64});
    cfg.network.post_widths = nj.value("post_widths", std::vector<std::size_t>{64});
    cfg.network.pooling = nets::pooling_from_name(nj.value("pooling", std::string{"mean_max"}));
    cfg.network.activation =
        nets::activation_from_name(nj.value("activation", std::string{"tanh"}));
    cfg.network.whiten_pooled = nj.value("whiten_pooled", false);
    cfg.network.flow_layers = nj.value("flow_layers", std::size_t{0});
    cfg.network.flow_hidden = nj.value("flow_hidden", std::vector<std::size_t>{64, 64});
    cfg.network.scale_clamp = nj.value("scale_clamp", 1.9);
  } else {
    cfg.network.summary_dim = 2;
  }
  if (j.contains("train")) {
    const auto& tj = j.at("train");
    cfg.training.gamma = tj.value("gamma", 1.0);
    cfg.training.batch_size = tj.value("batch_size", std::size_t{64});
    cfg.training.n_steps = tj.value("n_steps", std::size_t{2000});
    cfg.training.learning_rate = tj.value("learning_rate", 5e-4);
    cfg.training.cosine_decay = tj.value("cosine_decay", true);
    cfg.training.clip_norm = tj.value("clip_norm", 5.0);
  }
  if (j.contains("detector")) {
    const auto& dj = j.at("detector");
    cfg.m_validation = dj.value("m_validation", std::size_t{1000});
    cfg.null_repetitions = dj.value("null_repetitions", std::size_t{1000});
    cfg.alpha = dj.value("alpha", 0.05);
    if (dj.contains("kernel")) cfg.kernel = io::kernel_from_json(dj.at("kernel"));
  }
  cfg.seed = j.value("seed", std::uint64_t{1});
  cfg.out_dir = j.value("out_dir", std::string{"."});
  cfg.training.seed = cfg.seed;
  cfg.training.observations_per_dataset = cfg.observations_per_dataset;
  cfg.training.kernel = cfg.kernel;
  return cfg;
}

inline RunConfig load(const std::string& path) { return parse(io::read_json_file(path)); }

// Misspecification configuration for a severity-sweep grid cell. The variant
// follows from which parameters leave their anchors.
inline bench::MisspecConfig misspec_for_cell(const std::map<std::string, double>& cell,
                                             std::size_t mu_dim,
                                             const std::string& model_name = "gaussian2d") {
  bench::MisspecConfig m;
  for (const auto& [name, value] : cell) {
    if (name == "mu0") {
      m.mu0.assign(mu_dim, value);
    } else if (name == "tau0") {
      m.tau0 = value;
    } else if (name == "tau") {
      m.tau = value;
    } else if (name == "lambda") {
      m.lambda = value;
    } else if (name == "df") {
      m.df = value;
    } else if (name == "pi") {
      m.pi = value;
    } else if (name == "none" || name == "unused") {
      // placeholder axis
    } else {
      throw ConfigError("sweep: unknown axis parameter '" + name + "'");
    }
  }
  if (m.is_anchor() && !cell.contains("df")) {
    m.variant = bench::MisspecVariant::none;
    return m;
  }
  const bool mu_off = !m.mu0_is_zero();
  const bool tau0_off = m.tau0 != 1.0;
  if (cell.contains("df")) {
    m.variant = bench::MisspecVariant::student_t_sim;
  } else if (m.pi != 0.0) {
    m.variant = bench::MisspecVariant::necrosis;
  } else if (m.lambda != 0.0) {
    m.variant = model_name == "gaussian5d_niw" ? bench::MisspecVariant::beta_noise
                                               : bench::MisspecVariant::noise_mixture;
  } else if (m.tau != 1.0) {
    m.variant = bench::MisspecVariant::simulator_scale;
  } else if (mu_off && tau0_off) {
    m.variant = bench::MisspecVariant::prior_both;
  } else if (tau0_off) {
    m.variant = bench::MisspecVariant::prior_scale;
  } else {
    m.variant = bench::MisspecVariant::prior_location;
  }
  return m;
}

}  // namespace mspec::config
