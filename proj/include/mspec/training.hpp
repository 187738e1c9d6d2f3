#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "mspec/benchmarks.hpp"
#include "mspec/data.hpp"
#include "mspec/errors.hpp"
#include "mspec/mmd.hpp"
#include "mspec/nd/linalg.hpp"
#include "mspec/networks.hpp"

// Online simulation-based training of the augmented objective: expected
// negative log posterior plus gamma times the squared MMD between summary
// outputs and a fresh unit-Gaussian sample.

namespace mspec::train {

struct TrainConfig {
  double gamma = 1.0;
  std::size_t batch_size = 64;
  std::size_t n_steps = 2000;
  std::size_t observations_per_dataset = 100;  // K
  double learning_rate = 5e-4;
  bool cosine_decay = true;
  double clip_norm = 5.0;
  std::uint64_t seed = 1;
  mmd::KernelSpec kernel;  // empty scale set = default Gaussian set for S

  void validate() const {
    if (batch_size < 2) throw ConfigError("TrainConfig: batch_size must be >= 2");
    if (n_steps < 1) throw ConfigError("TrainConfig: n_steps must be >= 1");
    if (observations_per_dataset < 1) throw ConfigError("TrainConfig: K must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("TrainConfig: learning rate must be > 0");
    if (!(clip_norm > 0.0)) throw ConfigError("TrainConfig: clip_norm must be > 0");
    if (gamma < 0.0) throw ConfigError("TrainConfig: gamma must be >= 0");
  }

  mmd::KernelSpec effective_kernel(std::size_t summary_dim) const {
    return kernel.scales.empty() ? mmd::KernelSpec::gaussian_for_dim(summary_dim) : kernel;
  }
};

struct TraceRow {
  std::uint64_t step = 0;
  double nll = 0.0;
  double mmd_sq = 0.0;
  double loss = 0.0;
  double grad_norm = 0.0;
  double ms = 0.0;
};

using TrainTrace = std::vector<TraceRow>;

// Training aborted on a non-finite loss; carries the trace up to the abort.
class DivergenceError : public NumericError {
 public:
  DivergenceError(const std::string& msg, TrainTrace trace)
      : NumericError(msg), trace(std::move(trace)) {}
  TrainTrace trace;
};

// ---------------------------------------------------------------------------
// Approximator construction. Standardizers are fitted once from prior and
// prior-predictive draws and persist in the model card.
// ---------------------------------------------------------------------------

inline nets::Approximator build_approximator(const bench::GenerativeModel& model,
                                             const nets::NetworkHyper& hyper,
                                             std::size_t observations_per_dataset,
                                             std::uint64_t seed) {
  if (hyper.summary_dim == 0) throw ConfigError("build_approximator: summary_dim must be set");
  nets::Approximator ax;
  ax.hyper = hyper;
  ax.data_dim = model.data_dim;
  ax.param_dim = model.param_dim;
  ax.summary_dim = hyper.summary_dim;
  ax.train_k = observations_per_dataset;
  ax.seed = seed;
  ax.model_name = model.name;

  nd::Rng rng(seed);

  // Theta standardization from 10,000 prior draws.
  {
    nd::Rng sub = rng.substream(0);
    const std::size_t n = 10000;
    std::vector<double> rows(n * model.param_dim);
    for (std::size_t i = 0; i < n; ++i) {
      nd::Rng draw = sub.substream(i);
      const auto th = model.sample_prior(draw);
      std::copy(th.values().begin(), th.values().end(),
                rows.begin() + static_cast<std::ptrdiff_t>(i * model.param_dim));
    }
    ax.theta_std = nets::Standardizer::fit(nd::Array({n, model.param_dim}, std::move(rows)));
  }

  // Observation standardization from prior-predictive simulations.
  {
    nd::Rng sub = rng.substream(1);
    const std::size_t n_sets = 300;
    const auto batch = bench::simulate_batch(model, n_sets, observations_per_dataset, sub);
    ax.x_std = nets::Standardizer::fit(batch.x);
  }

  {
    nets::SummaryConfig scfg;
    scfg.input_dim = model.data_dim;
    scfg.bottleneck_dim = hyper.summary_dim;
    scfg.equivariant_widths = hyper.equivariant_widths;
    scfg.post_widths = hyper.post_widths;
    scfg.pooling = hyper.pooling;
    scfg.activation = hyper.activation;
    nd::Rng sub = rng.substream(2);
    ax.summary = nets::SummaryNetwork(scfg, sub);
  }
  if (hyper.whiten_pooled) {
    // Whiten the pooled features against the prior predictive so every
    // feature direction starts at unit scale.
    nd::Rng sub = rng.substream(4);
    const std::size_t n_fit = 512;
    const auto batch = bench::simulate_batch(model, n_fit, observations_per_dataset, sub);
    const auto pooled =
        ax.summary.pooled_features(ax.x_std.apply(batch.x), n_fit, observations_per_dataset);
    const std::size_t f = pooled.shape()[1];

    std::vector<double> mean(f, 0.0);
    for (std::size_t i = 0; i < n_fit; ++i)
      for (std::size_t j = 0; j < f; ++j) mean[j] += pooled.at(i, j);
    for (auto& v : mean) v /= static_cast<double>(n_fit);

    nd::Mat cov(f);
    for (std::size_t i = 0; i < n_fit; ++i) {
      for (std::size_t a = 0; a < f; ++a) {
        const double ca = pooled.at(i, a) - mean[a];
        for (std::size_t b = a; b < f; ++b) cov(a, b) += ca * (pooled.at(i, b) - mean[b]);
      }
    }
    for (std::size_t a = 0; a < f; ++a)
      for (std::size_t b = a; b < f; ++b) {
        cov(a, b) /= static_cast<double>(n_fit - 1);
        cov(b, a) = cov(a, b);
      }

    const auto eig = nd::eigen_symmetric(cov);
    const double floor = std::max(eig.values.front(), 0.0) * 1e-6 + 1e-12;
    std::vector<double> w(f * f, 0.0);
    for (std::size_t a = 0; a < f; ++a) {
      for (std::size_t b = 0; b < f; ++b) {
        double s = 0.0;
        for (std::size_t c = 0; c < f; ++c) {
          s += eig.vectors(a, c) * eig.vectors(b, c) / std::sqrt(std::max(eig.values[c], floor));
        }
        w[a * f + b] = s;
      }
    }
    ax.summary.set_pooled_whitener(std::move(mean), nd::Array({f, f}, std::move(w)));
  }
  {
    nets::FlowConfig fcfg;
    fcfg.param_dim = model.param_dim;
    fcfg.cond_dim = hyper.summary_dim;
    fcfg.n_layers =
        hyper.flow_layers == 0 ? nets::FlowConfig::default_layers(model.param_dim) : hyper.flow_layers;
    fcfg.hidden = hyper.flow_hidden;
    fcfg.scale_clamp = hyper.scale_clamp;
    nd::Rng sub = rng.substream(3);
    ax.flow = nets::ConditionalCouplingFlow(fcfg, sub);
    ax.flow.zero_init_final_layers();
  }
  return ax;
}

// ---------------------------------------------------------------------------
// Augmented loss.
// ---------------------------------------------------------------------------

struct LossParts {
  nd::Array total;  // tracked scalar
  double nll = 0.0;
  double mmd_sq = 0.0;
};

// comparison: unit-Gaussian rows matched against the batch summaries. Only
// consulted when gamma > 0; with gamma == 0 this is exactly the NLL loss.
inline LossParts augmented_loss(const DatasetBatch& batch, nets::Approximator& ax,
                                const TrainConfig& cfg, const nd::Array& comparison) {
  batch.validate();
  if (batch.n < 2) throw ContractError("augmented_loss: batch must contain >= 2 datasets");
  const nd::Array z = nets::summarize_flat(ax, batch.x, batch.n, batch.k);
  const nd::Array theta_std = ax.theta_std.apply(batch.theta);
  const nd::Array nll = nd::neg(nd::mean(ax.flow.log_prob(theta_std, z)));

  LossParts parts;
  parts.nll = nll.value();
  if (cfg.gamma == 0.0) {
    parts.total = nll;
    return parts;
  }
  const auto kernel = cfg.effective_kernel(ax.summary_dim);
  const nd::Array mmd_term = mmd::mmd_sq_tracked(kernel, z, comparison);
  parts.mmd_sq = mmd_term.value();
  parts.total = nd::add(nll, nd::mul(mmd_term, cfg.gamma));
  return parts;
}

inline LossParts augmented_loss(const DatasetBatch& batch, nets::Approximator& ax,
                                const TrainConfig& cfg, nd::Rng& rng) {
  nd::Array comparison;
  if (cfg.gamma > 0.0) {
    comparison = nd::Array({batch.n, ax.summary_dim}, rng.normal_vector(batch.n * ax.summary_dim));
  }
  return augmented_loss(batch, ax, cfg, comparison);
}

// ---------------------------------------------------------------------------
// Adam with cosine-decayed step size and global-norm gradient clipping.
// ---------------------------------------------------------------------------

namespace detail {

class Adam {
 public:
  explicit Adam(std::size_t n_params) : m_(n_params), v_(n_params) {}

  void step(std::vector<nd::Array*>& params, const std::vector<std::vector<double>>& grads,
            double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t p = 0; p < params.size(); ++p) {
      auto& vals = params[p]->mutable_values();
      auto& m = m_[p];
      auto& v = v_[p];
      if (m.size() != vals.size()) {
        m.assign(vals.size(), 0.0);
        v.assign(vals.size(), 0.0);
      }
      for (std::size_t i = 0; i < vals.size(); ++i) {
        const double g = grads[p][i];
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
        vals[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
      }
    }
  }

 private:
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  std::uint64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Online training loop (fresh simulations every step).
// ---------------------------------------------------------------------------

inline TrainTrace train(const bench::GenerativeModel& model, nets::Approximator& ax,
                        const TrainConfig& cfg) {
  cfg.validate();
  if (model.param_dim != ax.param_dim || model.data_dim != ax.data_dim)
    throw ConfigError("train: model dimensions do not match the approximator");

  nd::Rng master(cfg.seed);
  auto params = ax.params();
  detail::Adam adam(params.size());
  TrainTrace trace;
  trace.reserve(cfg.n_steps);

  for (std::size_t step = 0; step < cfg.n_steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::uint64_t global_step = ax.trained_steps + step;
    nd::Rng step_rng = master.substream(global_step);

    // Fresh batch; bounded retries on simulator failure.
    DatasetBatch batch;
    bool simulated = false;
    for (int attempt = 0; attempt < 5 && !simulated; ++attempt) {
      try {
        batch = bench::simulate_batch(model, cfg.batch_size, cfg.observations_per_dataset,
                                      step_rng.substream(attempt));
        simulated = true;
      } catch (const SimulationError&) {
        if (attempt == 4) throw;
      }
    }

    LossParts parts;
    try {
      nd::Rng loss_rng = step_rng.substream(100);
      parts = augmented_loss(batch, ax, cfg, loss_rng);
    } catch (const NumericError& e) {
      throw DivergenceError("training step " + std::to_string(global_step) + ": " + e.what(),
                            std::move(trace));
    }

    auto grads = nd::backward(parts.total);
    std::vector<std::vector<double>> gvals(params.size());
    double norm_sq = 0.0;
    for (std::size_t p = 0; p < params.size(); ++p) {
      const auto g = grads.grad_values(*params[p]);
      gvals[p].assign(g.begin(), g.end());
      if (gvals[p].empty()) gvals[p].assign(params[p]->numel(), 0.0);
      for (double x : gvals[p]) norm_sq += x * x;
    }
    const double grad_norm = std::sqrt(norm_sq);
    if (!std::isfinite(grad_norm)) {
      throw DivergenceError("training step " + std::to_string(global_step) + ": non-finite gradient",
                            std::move(trace));
    }
    if (grad_norm > cfg.clip_norm) {
      const double scale = cfg.clip_norm / grad_norm;
      for (auto& g : gvals)
        for (double& x : g) x *= scale;
    }

    const double progress = cfg.n_steps > 1 ? static_cast<double>(step) / (cfg.n_steps - 1) : 0.0;
    const double lr = cfg.cosine_decay
                          ? cfg.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * progress))
                          : cfg.learning_rate;
    adam.step(params, gvals, lr);

    const auto t1 = std::chrono::steady_clock::now();
    trace.push_back({global_step, parts.nll, parts.mmd_sq, parts.total.value(), grad_norm,
                     std::chrono::duration<double, std::milli>(t1 - t0).count()});
  }
  ax.trained_steps += cfg.n_steps;
  ax.gamma = cfg.gamma;
  ax.train_k = cfg.observations_per_dataset;
  return trace;
}

// M fresh simulations pushed through the trained summary network. [M x S]
inline nd::Array make_validation_summaries(const bench::GenerativeModel& model,
                                           const nets::Approximator& ax, std::size_t m,
                                           std::size_t observations_per_dataset,
                                           const nd::Rng& stream) {
  if (m == 0) throw ContractError("make_validation_summaries: m must be >= 1");
  std::vector<double> rows(m * ax.summary_dim);
  const std::size_t chunk = 200;
  for (std::size_t start = 0; start < m; start += chunk) {
    const std::size_t count = std::min(chunk, m - start);
    // Per-dataset substreams are indexed globally so chunking cannot
    // change the draws.
    std::vector<double> xs(count * observations_per_dataset * model.data_dim);
    for (std::size_t i = 0; i < count; ++i) {
      nd::Rng sub = stream.substream(start + i);
      const auto theta = model.sample_prior(sub);
      const auto x = model.simulate(theta, observations_per_dataset, sub);
      std::copy(x.values().begin(), x.values().end(),
                xs.begin() + static_cast<std::ptrdiff_t>(i * observations_per_dataset * model.data_dim));
    }
    const nd::Array z = nets::summarize_flat(
        ax, nd::Array({count * observations_per_dataset, model.data_dim}, std::move(xs)), count,
        observations_per_dataset);
    std::copy(z.values().begin(), z.values().end(),
              rows.begin() + static_cast<std::ptrdiff_t>(start * ax.summary_dim));
  }
  return nd::Array({m, ax.summary_dim}, std::move(rows));
}

}  // namespace mspec::train
