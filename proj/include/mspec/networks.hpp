#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "mspec/errors.hpp"
#include "mspec/nd/array.hpp"
#include "mspec/nd/rng.hpp"

// The two neural components of the amortized approximator: a permutation
// invariant summary network with a linear bottleneck of S units, and a
// conditional affine-coupling flow that gives exact posterior densities and
// samples through the change of variables formula.

namespace mspec::nets {

enum class Pooling { mean, max, mean_max };

inline std::string pooling_name(Pooling p) {
  switch (p) {
    case Pooling::mean: return "mean";
    case Pooling::max: return "max";
    case Pooling::mean_max: return "mean_max";
  }
  return "mean_max";
}

inline Pooling pooling_from_name(const std::string& s) {
  if (s == "mean") return Pooling::mean;
  if (s == "max") return Pooling::max;
  if (s == "mean_max") return Pooling::mean_max;
  throw ConfigError("unknown pooling '" + s + "'");
}

// ---------------------------------------------------------------------------
// Plain fully connected stack.
// ---------------------------------------------------------------------------

enum class Activation { tanh, softplus };

inline std::string activation_name(Activation a) {
  return a == Activation::tanh ? "tanh" : "softplus";
}

inline Activation activation_from_name(const std::string& s) {
  if (s == "tanh") return Activation::tanh;
  if (s == "softplus") return Activation::softplus;
  throw ConfigError("unknown activation '" + s + "'");
}

struct Mlp {
  std::vector<nd::Array> weights;  // [in x out] tracked leaves
  std::vector<nd::Array> biases;   // [out]
  Activation activation = Activation::tanh;

  static Mlp create(const std::vector<std::size_t>& dims, nd::Rng& rng,
                    Activation act = Activation::tanh) {
    if (dims.size() < 2) throw ConfigError("Mlp: need at least input and output dims");
    Mlp m;
    m.activation = act;
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
      const std::size_t fan_in = dims[l], fan_out = dims[l + 1];
      const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      std::vector<double> w(fan_in * fan_out);
      for (auto& x : w) x = rng.uniform(-limit, limit);
      m.weights.push_back(nd::Array::leaf({fan_in, fan_out}, std::move(w)));
      m.biases.push_back(nd::Array::leaf({fan_out}, std::vector<double>(fan_out, 0.0)));
    }
    return m;
  }

  // x: [n x in]. final_linear leaves the last layer affine.
  nd::Array forward(const nd::Array& x, bool final_linear) const {
    nd::Array h = x;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      h = nd::add(nd::matmul(h, weights[l]), biases[l]);
      if (l + 1 < weights.size() || !final_linear) {
        h = activation == Activation::tanh ? nd::tanh(h) : nd::softplus(h);
      }
    }
    return h;
  }

  void collect_params(std::vector<nd::Array*>& out) {
    for (auto& w : weights) out.push_back(&w);
    for (auto& b : biases) out.push_back(&b);
  }
};

// ---------------------------------------------------------------------------
// Summary network: equivariant per-observation MLP, pooling, post-pool MLP
// ending in a linear bottleneck of S units.
// ---------------------------------------------------------------------------

struct SummaryConfig {
  std::size_t input_dim = 0;       // observation dimension D
  std::size_t bottleneck_dim = 0;  // summary dimension S
  std::vector<std::size_t> equivariant_widths{64, 64};
  std::vector<std::size_t> post_widths{64};
  Pooling pooling = Pooling::mean_max;
  Activation activation = Activation::tanh;

  void validate() const {
    if (input_dim == 0 || bottleneck_dim == 0)
      throw ConfigError("SummaryConfig: input_dim and bottleneck_dim must be > 0");
    if (equivariant_widths.empty())
      throw ConfigError("SummaryConfig: equivariant widths must be nonempty");
    // post_widths may be empty: the bottleneck is then a single affine layer
    // directly over the pooled features.
  }

  std::size_t pooled_dim() const {
    const std::size_t w = equivariant_widths.back();
    return pooling == Pooling::mean_max ? 2 * w : w;
  }
};

class SummaryNetwork {
 public:
  SummaryNetwork() = default;

  SummaryNetwork(SummaryConfig cfg, nd::Rng& rng) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::vector<std::size_t> edims{cfg_.input_dim};
    edims.insert(edims.end(), cfg_.equivariant_widths.begin(), cfg_.equivariant_widths.end());
    elem_ = Mlp::create(edims, rng, cfg_.activation);
    std::vector<std::size_t> pdims{cfg_.pooled_dim()};
    pdims.insert(pdims.end(), cfg_.post_widths.begin(), cfg_.post_widths.end());
    pdims.push_back(cfg_.bottleneck_dim);
    post_ = Mlp::create(pdims, rng, cfg_.activation);
  }

  const SummaryConfig& config() const { return cfg_; }

  // Equivariant stage plus pooling, before whitening and the bottleneck.
  nd::Array pooled_features(const nd::Array& x_flat, std::size_t n, std::size_t k) const {
    if (x_flat.ndim() != 2 || x_flat.shape()[1] != cfg_.input_dim) {
      throw ConfigError("SummaryNetwork: observation dim " +
                        std::to_string(x_flat.ndim() == 2 ? x_flat.shape()[1] : 0) +
                        " does not match network input dim " + std::to_string(cfg_.input_dim));
    }
    if (k == 0) throw ContractError("SummaryNetwork: need at least one observation per dataset");
    if (x_flat.shape()[0] != n * k) throw DimensionError("SummaryNetwork: rows != n*k");
    const nd::Array h = elem_.forward(x_flat, /*final_linear=*/false);
    switch (cfg_.pooling) {
      case Pooling::mean: return nd::segment_mean(h, n, k);
      case Pooling::max: return nd::segment_max(h, n, k);
      case Pooling::mean_max:
        return nd::concat_cols(nd::segment_mean(h, n, k), nd::segment_max(h, n, k));
    }
    return {};
  }

  // x_flat: [(n*k) x D] rows grouped by dataset. Returns [n x S] summaries.
  nd::Array forward_flat(const nd::Array& x_flat, std::size_t n, std::size_t k) const {
    nd::Array pooled = pooled_features(x_flat, n, k);
    if (!whiten_mean_.empty()) {
      pooled = nd::matmul(nd::sub(pooled, nd::Array({whiten_mean_.size()}, whiten_mean_)),
                          whitener_);
    }
    return post_.forward(pooled, /*final_linear=*/true);  // linear bottleneck
  }

  // Fixed affine whitening of the pooled features, fitted once at build
  // time. Pooled statistics mix O(1) location content with noise-level
  // directions that are orders of magnitude smaller; without equalizing
  // them, those directions are unreachable within a desk-scale step budget.
  void set_pooled_whitener(std::vector<double> mean, nd::Array whitener) {
    const std::size_t f = cfg_.pooled_dim();
    if (mean.size() != f || whitener.shape() != nd::Shape{f, f})
      throw ConfigError("SummaryNetwork: whitener dimensions do not match pooled features");
    whiten_mean_ = std::move(mean);
    whitener_ = whitener.detached();
  }

  bool has_pooled_whitener() const { return !whiten_mean_.empty(); }
  const std::vector<double>& whitener_mean() const { return whiten_mean_; }
  const nd::Array& whitener_matrix() const { return whitener_; }

  std::vector<nd::Array*> params() {
    std::vector<nd::Array*> out;
    elem_.collect_params(out);
    post_.collect_params(out);
    return out;
  }

 private:
  SummaryConfig cfg_;
  Mlp elem_;
  Mlp post_;
  std::vector<double> whiten_mean_;
  nd::Array whitener_;  // [F x F] constant
};

// ---------------------------------------------------------------------------
// Conditional affine coupling flow.
// ---------------------------------------------------------------------------

struct FlowConfig {
  std::size_t param_dim = 0;  // P (dimensions transported by the flow)
  std::size_t cond_dim = 0;   // S
  std::size_t n_layers = 4;   // 4 is adequate up to P=5, use 6 beyond
  std::vector<std::size_t> hidden{64, 64};
  double scale_clamp = 1.9;  // log-scales pass through a*tanh(s/a)
  // When set (one permutation per layer), used verbatim instead of drawing
  // fresh ones; persisted model cards restore flows through this.
  std::vector<std::vector<std::size_t>> permutations;

  void validate() const {
    if (param_dim == 0 || cond_dim == 0)
      throw ConfigError("FlowConfig: param_dim and cond_dim must be > 0");
    if (n_layers == 0) throw ConfigError("FlowConfig: need at least one coupling layer");
    if (!(scale_clamp > 0.0)) throw ConfigError("FlowConfig: scale_clamp must be > 0");
    if (!permutations.empty() && permutations.size() != n_layers)
      throw ConfigError("FlowConfig: need one permutation per layer");
  }

  static std::size_t default_layers(std::size_t p) { return p <= 5 ? 4 : 6; }
};

// For P == 1 the coupling degenerates to a conditional affine map whose scale
// and shift depend on the condition vector only; this keeps the density exact
// (no auxiliary dimension to marginalize).
class ConditionalCouplingFlow {
 public:
  ConditionalCouplingFlow() = default;

  ConditionalCouplingFlow(FlowConfig cfg, nd::Rng& rng) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const std::size_t p = cfg_.param_dim;
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
      // Fixed permutation applied before each layer; identity for the first.
      std::vector<std::size_t> perm(p);
      for (std::size_t i = 0; i < p; ++i) perm[i] = i;
      if (!cfg_.permutations.empty()) {
        perm = cfg_.permutations[l];
        if (perm.size() != p) throw ConfigError("FlowConfig: permutation size mismatch");
      } else if (l > 0 && p >= 2) {
        for (std::size_t i = p - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
      }
      perms_.push_back(perm);
      std::vector<std::size_t> inv(p);
      for (std::size_t i = 0; i < p; ++i) inv[perm[i]] = i;
      inv_perms_.push_back(inv);

      const auto [keep, moved] = split_sizes();
      std::vector<std::size_t> dims{keep + cfg_.cond_dim};
      dims.insert(dims.end(), cfg_.hidden.begin(), cfg_.hidden.end());
      dims.push_back(2 * moved);
      conditioners_.push_back(Mlp::create(dims, rng));
    }
  }

  const FlowConfig& config() const { return cfg_; }

  struct ForwardResult {
    nd::Array u;        // [n x P]
    nd::Array log_det;  // [n]
  };

  // theta, z: [n x P], [n x S]; theta in standardized space.
  ForwardResult forward(const nd::Array& theta, const nd::Array& z) const {
    check_inputs(theta, z);
    nd::Array x = theta;
    nd::Array log_det = nd::Array::zeros({theta.shape()[0]});
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
      try {
        x = nd::permute_cols(x, perms_[l]);
        const auto [cond_part, trans_part] = split(x, l);
        const auto [log_scale, shift] = conditioner_out(l, cond_part, z);
        const nd::Array moved =
            nd::add(nd::mul(trans_part, nd::exp(log_scale)), shift);
        x = merge(cond_part, moved, l);
        log_det = nd::add(log_det, nd::row_sum(log_scale));
      } catch (const NumericError& e) {
        throw NumericError("coupling layer " + std::to_string(l) + ": " + e.what());
      }
    }
    return {x, log_det};
  }

  nd::Array inverse(const nd::Array& u, const nd::Array& z) const {
    check_inputs(u, z);
    nd::Array x = u;
    for (std::size_t li = cfg_.n_layers; li-- > 0;) {
      try {
        const auto [cond_part, moved] = split(x, li);
        const auto [log_scale, shift] = conditioner_out(li, cond_part, z);
        const nd::Array trans_part =
            nd::mul(nd::sub(moved, shift), nd::exp(nd::neg(log_scale)));
        x = nd::permute_cols(merge(cond_part, trans_part, li), inv_perms_[li]);
      } catch (const NumericError& e) {
        throw NumericError("coupling layer " + std::to_string(li) + ": " + e.what());
      }
    }
    return x;
  }

  // log q(theta | z) against a unit Gaussian base, theta standardized. [n]
  nd::Array log_prob(const nd::Array& theta, const nd::Array& z) const {
    const auto fw = forward(theta, z);
    const double p = static_cast<double>(cfg_.param_dim);
    const nd::Array base = nd::sub(nd::mul(nd::row_sum(nd::square(fw.u)), -0.5),
                                   0.5 * p * std::log(2.0 * std::numbers::pi));
    return nd::add(base, fw.log_det);
  }

  // L posterior draws in standardized space for one condition vector. [L x P]
  nd::Array sample(const nd::Array& z_row, std::size_t draws, nd::Rng& rng) const {
    if (draws == 0) throw ContractError("flow sample: need at least one draw");
    if (z_row.numel() != cfg_.cond_dim) throw DimensionError("flow sample: condition dim mismatch");
    const nd::Array u({draws, cfg_.param_dim}, rng.normal_vector(draws * cfg_.param_dim));
    const nd::Array z = nd::tile_rows(z_row.detached(), draws);
    return inverse(u, z);
  }

  std::vector<nd::Array*> params() {
    std::vector<nd::Array*> out;
    for (auto& c : conditioners_) c.collect_params(out);
    return out;
  }

  // Zeroes the output layer of every conditioner so the flow starts as the
  // identity map; training from an identity flow is markedly more stable
  // than from random coupling scales.
  void zero_init_final_layers() {
    for (auto& c : conditioners_) {
      for (auto& v : c.weights.back().mutable_values()) v = 0.0;
      for (auto& v : c.biases.back().mutable_values()) v = 0.0;
    }
  }

  const std::vector<std::vector<std::size_t>>& permutations() const { return perms_; }

 private:
  // Sizes of (conditioning, transformed) parts. The whole vector is
  // transformed in the 1-d case.
  std::pair<std::size_t, std::size_t> split_sizes() const {
    const std::size_t p = cfg_.param_dim;
    if (p == 1) return {0, 1};
    const std::size_t keep = (p + 1) / 2;
    return {keep, p - keep};
  }

  // Odd layers transform the leading block, even layers the trailing block,
  // so every position is transformed even if a permutation degenerates.
  bool transform_first(std::size_t l) const { return l % 2 == 1; }

  std::pair<nd::Array, nd::Array> split(const nd::Array& x, std::size_t l) const {
    const auto [keep, moved] = split_sizes();
    if (keep == 0) return {nd::Array::zeros({x.shape()[0], 0}), x};
    if (transform_first(l)) {
      return {nd::slice_cols(x, moved, moved + keep), nd::slice_cols(x, 0, moved)};
    }
    return {nd::slice_cols(x, 0, keep), nd::slice_cols(x, keep, keep + moved)};
  }

  nd::Array merge(const nd::Array& cond_part, const nd::Array& moved, std::size_t l) const {
    const auto [keep, unused] = split_sizes();
    (void)unused;
    if (keep == 0) return moved;
    return transform_first(l) ? nd::concat_cols(moved, cond_part)
                              : nd::concat_cols(cond_part, moved);
  }

  // Clamped log-scale and shift from layer l's conditioner.
  std::pair<nd::Array, nd::Array> conditioner_out(std::size_t l, const nd::Array& cond_part,
                                                  const nd::Array& z) const {
    const auto [keep, moved] = split_sizes();
    const nd::Array input = keep == 0 ? z : nd::concat_cols(cond_part, z);
    const nd::Array out = conditioners_[l].forward(input, /*final_linear=*/true);
    const nd::Array raw_scale = nd::slice_cols(out, 0, moved);
    const nd::Array shift = nd::slice_cols(out, moved, 2 * moved);
    const double a = cfg_.scale_clamp;
    const nd::Array log_scale = nd::mul(nd::tanh(nd::mul(raw_scale, 1.0 / a)), a);
    return {log_scale, shift};
  }

  void check_inputs(const nd::Array& theta, const nd::Array& z) const {
    if (theta.ndim() != 2 || theta.shape()[1] != cfg_.param_dim)
      throw DimensionError("flow: parameter dim mismatch");
    if (z.ndim() != 2 || z.shape()[1] != cfg_.cond_dim)
      throw DimensionError("flow: condition dim mismatch");
    if (theta.shape()[0] != z.shape()[0]) throw DimensionError("flow: batch sizes differ");
  }

  FlowConfig cfg_;
  std::vector<Mlp> conditioners_;
  std::vector<std::vector<std::size_t>> perms_;
  std::vector<std::vector<std::size_t>> inv_perms_;
};

// ---------------------------------------------------------------------------
// Per-dimension affine standardization.
// ---------------------------------------------------------------------------

struct Standardizer {
  std::vector<double> mean;
  std::vector<double> stddev;

  static Standardizer fit(const nd::Array& rows) {
    if (rows.ndim() != 2 || rows.shape()[0] < 2)
      throw ContractError("Standardizer::fit: need a 2-d sample with >= 2 rows");
    const std::size_t n = rows.shape()[0], d = rows.shape()[1];
    Standardizer s;
    s.mean.assign(d, 0.0);
    s.stddev.assign(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) s.mean[j] += rows.values()[i * d + j];
    for (double& m : s.mean) m /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        const double c = rows.values()[i * d + j] - s.mean[j];
        s.stddev[j] += c * c;
      }
    for (double& v : s.stddev) v = std::sqrt(v / static_cast<double>(n - 1));
    s.validate();
    return s;
  }

  void validate() const {
    if (mean.empty() || mean.size() != stddev.size())
      throw ConfigError("Standardizer: inconsistent dimensions");
    for (double s : stddev) {
      if (!(s > 0.0)) throw ConfigError("Standardizer: every dimension needs stddev > 0");
    }
  }

  std::size_t dim() const { return mean.size(); }

  nd::Array apply(const nd::Array& rows) const {
    return nd::div(nd::sub(rows, nd::Array({dim()}, mean)), nd::Array({dim()}, stddev));
  }

  nd::Array invert(const nd::Array& rows) const {
    return nd::add(nd::mul(rows, nd::Array({dim()}, stddev)), nd::Array({dim()}, mean));
  }
};

// ---------------------------------------------------------------------------
// Trained approximator bundle (the persisted "model card" in memory).
// ---------------------------------------------------------------------------

struct NetworkHyper {
  std::size_t summary_dim = 0;  // S
  std::vector<std::size_t> equivariant_widths{64, 64};
  std::vector<std::size_t> post_widths{64};
  Pooling pooling = Pooling::mean_max;
  Activation activation = Activation::tanh;
  // Whiten pooled features against the prior predictive at build time.
  // Equalizes feature scales so low-variance (noise-level) directions are
  // reachable by the optimizer; off by default, since it also makes small
  // summary spaces more sensitive to simulator-noise shifts.
  bool whiten_pooled = false;
  std::size_t flow_layers = 0;  // 0 means pick by param dim
  std::vector<std::size_t> flow_hidden{64, 64};
  double scale_clamp = 1.9;
};

struct Approximator {
  SummaryNetwork summary;
  ConditionalCouplingFlow flow;
  Standardizer theta_std;
  Standardizer x_std;
  NetworkHyper hyper;
  std::size_t data_dim = 0;   // D
  std::size_t param_dim = 0;  // P
  std::size_t summary_dim = 0;
  std::size_t train_k = 0;  // observations per dataset during training
  std::uint64_t seed = 0;
  double gamma = 1.0;
  std::uint64_t trained_steps = 0;
  std::string model_name;

  std::vector<nd::Array*> params() {
    auto out = summary.params();
    for (auto* p : flow.params()) out.push_back(p);
    return out;
  }
};

// Copy whose weights carry no autograd history; forward passes through it
// build no graph. Use for inference and detection loops.
inline Approximator detached_copy(const Approximator& ax) {
  Approximator copy = ax;
  for (auto* p : copy.params()) *p = p->detached();
  return copy;
}

// Summaries for a flat batch of n datasets with k observations each.
inline nd::Array summarize_flat(const Approximator& ax, const nd::Array& x_flat, std::size_t n,
                                std::size_t k) {
  if (x_flat.ndim() != 2 || x_flat.shape()[1] != ax.data_dim) {
    throw ConfigError("summarize: observation dimension does not match the model card (D=" +
                      std::to_string(ax.data_dim) + ")");
  }
  return ax.summary.forward_flat(ax.x_std.apply(x_flat), n, k);
}

// Summary of one dataset [k x D] -> [1 x S]; datasets of any size are valid.
inline nd::Array summarize_one(const Approximator& ax, const nd::Array& x) {
  if (x.ndim() != 2) throw ContractError("summarize_one: dataset must be [k x D]");
  return summarize_flat(ax, x, 1, x.shape()[0]);
}

// De-standardized posterior draws for one summary vector. [L x P]
inline nd::Array sample_posterior(const Approximator& ax, const nd::Array& z_row,
                                  std::size_t draws, nd::Rng& rng) {
  return ax.theta_std.invert(ax.flow.sample(z_row, draws, rng));
}

}  // namespace mspec::nets
