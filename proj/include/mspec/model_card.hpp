#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mspec/benchmarks.hpp"
#include "mspec/errors.hpp"
#include "mspec/networks.hpp"
#include "mspec/util/base64.hpp"
#include "mspec/util/sha1.hpp"

// Persistence of a trained approximator as a single JSON document: hyper
// parameters, flow permutations, standardizer constants, flattened weights
// (base64, little-endian float64) and a content hash over the canonical
// serialization.

namespace mspec::card {

using json = nlohmann::json;

struct ModelCard {
  nets::Approximator ax;
  bench::MisspecConfig model_misspec;  // configuration the card was trained under
};

inline json misspec_to_json(const bench::MisspecConfig& m) {
  return json{{"variant", bench::variant_name(m.variant)}, {"mu0", m.mu0},   {"tau0", m.tau0},
              {"tau", m.tau},                              {"lambda", m.lambda},
              {"df", m.df},                                {"pi", m.pi}};
}

inline bench::MisspecConfig misspec_from_json(const json& j) {
  bench::MisspecConfig m;
  m.variant = bench::variant_from_name(j.at("variant").get<std::string>());
  m.mu0 = j.value("mu0", std::vector<double>{});
  m.tau0 = j.value("tau0", 1.0);
  m.tau = j.value("tau", 1.0);
  m.lambda = j.value("lambda", 0.0);
  m.df = j.value("df", 50.0);
  m.pi = j.value("pi", 0.0);
  m.validate();
  return m;
}

namespace detail {

inline json standardizer_to_json(const nets::Standardizer& s) {
  return json{{"mean", s.mean}, {"stddev", s.stddev}};
}

inline nets::Standardizer standardizer_from_json(const json& j) {
  nets::Standardizer s;
  s.mean = j.at("mean").get<std::vector<double>>();
  s.stddev = j.at("stddev").get<std::vector<double>>();
  s.validate();
  return s;
}

}  // namespace detail

inline json to_json(ModelCard& cardref) {
  nets::Approximator& ax = cardref.ax;
  json j;
  j["format"] = "mspec-model-card-v1";
  j["model"] = {{"name", ax.model_name}, {"misspec", misspec_to_json(cardref.model_misspec)}};
  j["dims"] = {{"d", ax.data_dim}, {"p", ax.param_dim}, {"s", ax.summary_dim}};
  j["architecture"] = {{"equivariant_widths", ax.hyper.equivariant_widths},
                       {"post_widths", ax.hyper.post_widths},
                       {"pooling", nets::pooling_name(ax.hyper.pooling)},
                       {"activation", nets::activation_name(ax.hyper.activation)},
                       {"flow_layers", ax.flow.config().n_layers},
                       {"flow_hidden", ax.hyper.flow_hidden},
                       {"scale_clamp", ax.hyper.scale_clamp},
                       {"flow_permutations", ax.flow.permutations()}};
  j["standardizers"] = {{"theta", detail::standardizer_to_json(ax.theta_std)},
                        {"x", detail::standardizer_to_json(ax.x_std)}};
  if (ax.summary.has_pooled_whitener()) {
    j["pooled_whitener"] = {{"mean", util::encode_f64(ax.summary.whitener_mean())},
                            {"matrix", util::encode_f64(ax.summary.whitener_matrix().values())}};
  }
  j["training"] = {{"seed", ax.seed},
                   {"gamma", ax.gamma},
                   {"trained_steps", ax.trained_steps},
                   {"observations_per_dataset", ax.train_k}};

  std::vector<double> flat;
  std::vector<std::vector<std::size_t>> shapes;
  for (auto* p : ax.params()) {
    shapes.push_back(p->shape());
    flat.insert(flat.end(), p->values().begin(), p->values().end());
  }
  j["weights"] = {{"shapes", shapes}, {"data", util::encode_f64(flat)}};

  j["content_hash"] = util::Sha1::of(j.dump());
  return j;
}

inline ModelCard from_json(const json& j) {
  if (j.value("format", "") != "mspec-model-card-v1")
    throw ConfigError("model card: unsupported format");

  // Verify the content hash over the canonical serialization without it.
  {
    json copy = j;
    const std::string stored = copy.value("content_hash", "");
    copy.erase("content_hash");
    if (stored != util::Sha1::of(copy.dump()))
      throw ConfigError("model card: content hash mismatch (file corrupted or edited)");
  }

  ModelCard card;
  nets::Approximator& ax = card.ax;
  ax.model_name = j.at("model").at("name").get<std::string>();
  card.model_misspec = misspec_from_json(j.at("model").at("misspec"));
  ax.data_dim = j.at("dims").at("d").get<std::size_t>();
  ax.param_dim = j.at("dims").at("p").get<std::size_t>();
  ax.summary_dim = j.at("dims").at("s").get<std::size_t>();

  const auto& arch = j.at("architecture");
  ax.hyper.summary_dim = ax.summary_dim;
  ax.hyper.equivariant_widths = arch.at("equivariant_widths").get<std::vector<std::size_t>>();
  ax.hyper.post_widths = arch.at("post_widths").get<std::vector<std::size_t>>();
  ax.hyper.pooling = nets::pooling_from_name(arch.at("pooling").get<std::string>());
  ax.hyper.activation = nets::activation_from_name(arch.value("activation", std::string{"tanh"}));
  ax.hyper.flow_layers = arch.at("flow_layers").get<std::size_t>();
  ax.hyper.flow_hidden = arch.at("flow_hidden").get<std::vector<std::size_t>>();
  ax.hyper.scale_clamp = arch.at("scale_clamp").get<double>();

  ax.theta_std = detail::standardizer_from_json(j.at("standardizers").at("theta"));
  ax.x_std = detail::standardizer_from_json(j.at("standardizers").at("x"));

  const auto& tr = j.at("training");
  ax.seed = tr.at("seed").get<std::uint64_t>();
  ax.gamma = tr.at("gamma").get<double>();
  ax.trained_steps = tr.at("trained_steps").get<std::uint64_t>();
  ax.train_k = tr.at("observations_per_dataset").get<std::size_t>();

  // Rebuild the networks, then overwrite every weight from the payload.
  {
    nets::SummaryConfig scfg;
    scfg.input_dim = ax.data_dim;
    scfg.bottleneck_dim = ax.summary_dim;
    scfg.equivariant_widths = ax.hyper.equivariant_widths;
    scfg.post_widths = ax.hyper.post_widths;
    scfg.pooling = ax.hyper.pooling;
    scfg.activation = ax.hyper.activation;
    nd::Rng rng(0);
    ax.summary = nets::SummaryNetwork(scfg, rng);
    if (j.contains("pooled_whitener")) {
      auto mean = util::decode_f64(j.at("pooled_whitener").at("mean").get<std::string>());
      auto matrix = util::decode_f64(j.at("pooled_whitener").at("matrix").get<std::string>());
      const std::size_t f = mean.size();
      ax.summary.set_pooled_whitener(std::move(mean), nd::Array({f, f}, std::move(matrix)));
      ax.hyper.whiten_pooled = true;
    } else {
      ax.hyper.whiten_pooled = false;
    }
  }
  {
    nets::FlowConfig fcfg;
    fcfg.param_dim = ax.param_dim;
    fcfg.cond_dim = ax.summary_dim;
    fcfg.n_layers = ax.hyper.flow_layers;
    fcfg.hidden = ax.hyper.flow_hidden;
    fcfg.scale_clamp = ax.hyper.scale_clamp;
    fcfg.permutations =
        arch.at("flow_permutations").get<std::vector<std::vector<std::size_t>>>();
    nd::Rng rng(0);
    ax.flow = nets::ConditionalCouplingFlow(fcfg, rng);
  }

  const auto shapes = j.at("weights").at("shapes").get<std::vector<std::vector<std::size_t>>>();
  const auto flat = util::decode_f64(j.at("weights").at("data").get<std::string>());
  auto params = ax.params();
  if (shapes.size() != params.size())
    throw ConfigError("model card: weight count does not match the architecture");
  std::size_t offset = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->shape() != nd::Shape(shapes[i].begin(), shapes[i].end()))
      throw ConfigError("model card: weight shape mismatch at tensor " + std::to_string(i));
    auto& vals = params[i]->mutable_values();
    if (offset + vals.size() > flat.size()) throw ConfigError("model card: weight payload too short");
    std::copy(flat.begin() + static_cast<std::ptrdiff_t>(offset),
              flat.begin() + static_cast<std::ptrdiff_t>(offset + vals.size()), vals.begin());
    offset += vals.size();
  }
  if (offset != flat.size()) throw ConfigError("model card: trailing weight payload");
  return card;
}

inline void save(ModelCard& cardref, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("model card: cannot write '" + path + "'");
  out << to_json(cardref).dump(2) << "\n";
}

inline ModelCard load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("model card: cannot read '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model card: invalid JSON: ") + e.what());
  }
  return from_json(j);
}

// The generative model this card was trained on.
inline bench::GenerativeModel training_model(const ModelCard& cardref) {
  return bench::make_model(cardref.ax.model_name, cardref.model_misspec);
}

}  // namespace mspec::card
