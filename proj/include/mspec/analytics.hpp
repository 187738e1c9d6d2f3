#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "mspec/benchmarks.hpp"
#include "mspec/detector.hpp"
#include "mspec/errors.hpp"
#include "mspec/networks.hpp"
#include "mspec/nd/linalg.hpp"
#include "mspec/util/stats.hpp"

// Evaluation tooling: simulation-based calibration ranks, posterior-error
// metrics against analytic posteriors, summary-space PCA, and severity-grid
// sweeps producing heatmap-ready data.

namespace mspec::analytics {

// Posterior draws for one dataset: [k x D] -> [L x P].
using PosteriorSampler =
    std::function<nd::Array(const nd::Array& dataset, std::size_t draws, nd::Rng& rng)>;

inline PosteriorSampler approximator_sampler(const nets::Approximator& ax) {
  return [&ax](const nd::Array& x, std::size_t draws, nd::Rng& rng) {
    return nets::sample_posterior(ax, nets::summarize_one(ax, x), draws, rng);
  };
}

// ---------------------------------------------------------------------------
// Simulation-based calibration.
// ---------------------------------------------------------------------------

struct SbcResult {
  std::vector<std::vector<std::size_t>> ranks;  // [param][dataset], each in 0..l
  std::size_t l = 0;
  std::size_t n = 0;

  // Chi-squared uniformity p-value per parameter on binned ranks.
  std::vector<double> chi_squared_pvalues(std::size_t bins = 20) const {
    std::vector<double> out;
    for (const auto& param_ranks : ranks) {
      std::vector<std::size_t> counts(bins, 0);
      for (std::size_t r : param_ranks) {
        std::size_t b = r * bins / (l + 1);
        if (b >= bins) b = bins - 1;
        ++counts[b];
      }
      out.push_back(stats::chi_squared_uniform_pvalue(counts));
    }
    return out;
  }

  // Fraction of rank-ECDF points outside pointwise binomial bands at the
  // given level (coarse companion to the chi-squared check).
  double ecdf_band_violation_rate(double band_sd = 2.576) const {
    std::size_t outside = 0, total = 0;
    for (const auto& param_ranks : ranks) {
      std::vector<double> sorted(param_ranks.begin(), param_ranks.end());
      std::sort(sorted.begin(), sorted.end());
      const double nn = static_cast<double>(sorted.size());
      for (std::size_t i = 0; i < sorted.size(); ++i) {
        const double u = (sorted[i] + 0.5) / static_cast<double>(l + 1);
        const double ecdf = (static_cast<double>(i) + 0.5) / nn;
        const double sd = std::sqrt(std::max(u * (1.0 - u), 1e-12) / nn);
        total += 1;
        if (std::fabs(ecdf - u) > band_sd * sd) ++outside;
      }
    }
    return total == 0 ? 0.0 : static_cast<double>(outside) / static_cast<double>(total);
  }
};

// For each of n prior-predictive draws, ranks the true parameter within l
// posterior draws, per dimension.
inline SbcResult sbc(const bench::GenerativeModel& model, const PosteriorSampler& sampler,
                     std::size_t n, std::size_t l, std::size_t observations_per_dataset,
                     const nd::Rng& stream) {
  if (l < 50) throw ContractError("sbc: need at least 50 posterior draws per dataset");
  if (n == 0) throw ContractError("sbc: need at least one dataset");
  SbcResult result;
  result.l = l;
  result.n = n;
  result.ranks.assign(model.param_dim, std::vector<std::size_t>(n, 0));
  for (std::size_t i = 0; i < n; ++i) {
    nd::Rng sub = stream.substream(i);
    const auto theta_true = model.sample_prior(sub);
    const auto x = model.simulate(theta_true, observations_per_dataset, sub);
    nd::Rng post_rng = sub.substream(1);
    const auto draws = sampler(x, l, post_rng);
    for (std::size_t d = 0; d < model.param_dim; ++d) {
      std::size_t rank = 0;
      for (std::size_t j = 0; j < l; ++j) {
        if (draws.at(j, d) < theta_true.at(d)) ++rank;
      }
      result.ranks[d][i] = rank;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Posterior error against analytic posteriors (under the training model).
// ---------------------------------------------------------------------------

// RMSE between posterior means from `draws` sampler draws and the analytic
// posterior means, over all datasets and comparison dimensions. For the NIW
// family the comparison space is (mu, correlation matrix with standard
// deviations on the diagonal).
inline double posterior_error(const PosteriorSampler& sampler, const DatasetBatch& batch,
                              const std::vector<bench::AnalyticPosterior>& analytic,
                              std::size_t draws, const nd::Rng& stream) {
  batch.validate();
  if (analytic.size() != batch.n)
    throw ContractError("posterior_error: need one analytic posterior per dataset");
  if (draws == 0) throw ContractError("posterior_error: draws must be >= 1");

  double sum_sq = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < batch.n; ++i) {
    nd::Rng rng = stream.substream(i);
    const auto sample = sampler(batch.dataset(i), draws, rng);
    const std::size_t p = sample.shape()[1];
    std::vector<double> approx_mean(p, 0.0);
    for (std::size_t j = 0; j < draws; ++j)
      for (std::size_t d = 0; d < p; ++d) approx_mean[d] += sample.at(j, d);
    for (auto& v : approx_mean) v /= static_cast<double>(draws);

    const auto& post = analytic[i];
    switch (post.family) {
      case bench::AnalyticPosterior::Family::gaussian_known_cov: {
        if (post.mean.size() != p)
          throw ContractError("posterior_error: analytic dimension mismatch");
        for (std::size_t d = 0; d < p; ++d) {
          const double diff = approx_mean[d] - post.mean[d];
          sum_sq += diff * diff;
          ++count;
        }
        break;
      }
      case bench::AnalyticPosterior::Family::normal_inverse_wishart: {
        const std::size_t d = post.niw.mu.size();
        // Mean of draws mapped into (mu, corr-sd) space.
        std::vector<double> acc(d + d * d, 0.0);
        for (std::size_t j = 0; j < draws; ++j) {
          std::vector<double> theta_row(p);
          for (std::size_t c = 0; c < p; ++c) theta_row[c] = sample.at(j, c);
          const auto [mu, sigma] = bench::unpack_mean_cov(theta_row, d);
          const auto corr = bench::cov_to_corr_sd(sigma);
          for (std::size_t c = 0; c < d; ++c) acc[c] += mu[c];
          for (std::size_t rr = 0; rr < d; ++rr)
            for (std::size_t cc = 0; cc < d; ++cc) acc[d + rr * d + cc] += corr(rr, cc);
        }
        for (auto& v : acc) v /= static_cast<double>(draws);
        const auto corr_ref = bench::cov_to_corr_sd(post.expected_sigma());
        for (std::size_t c = 0; c < d; ++c) {
          const double diff = acc[c] - post.niw.mu[c];
          sum_sq += diff * diff;
          ++count;
        }
        for (std::size_t rr = 0; rr < d; ++rr)
          for (std::size_t cc = 0; cc <= rr; ++cc) {
            const double diff = acc[d + rr * d + cc] - corr_ref(rr, cc);
            sum_sq += diff * diff;
            ++count;
          }
        break;
      }
      default:
        throw ContractError("posterior_error: unsupported analytic posterior family");
    }
  }
  return std::sqrt(sum_sq / static_cast<double>(count));
}

// ---------------------------------------------------------------------------
// Summary-space PCA.
// ---------------------------------------------------------------------------

struct PcaResult {
  std::vector<double> explained_ratio;  // descending, sums to 1
  std::vector<double> eigenvalues;
  nd::Mat components;  // columns are principal directions
  bool degenerate = false;
};

inline PcaResult pca(const nd::Array& summaries) {
  if (summaries.ndim() != 2) throw ContractError("pca: summaries must be [M x S]");
  const std::size_t m = summaries.shape()[0], s = summaries.shape()[1];
  if (m <= s) throw ContractError("pca: need more samples than dimensions");

  std::vector<double> mean(s, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < s; ++j) mean[j] += summaries.at(i, j);
  for (auto& v : mean) v /= static_cast<double>(m);

  nd::Mat cov(s);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t a = 0; a < s; ++a) {
      const double ca = summaries.at(i, a) - mean[a];
      for (std::size_t b = a; b < s; ++b) {
        cov(a, b) += ca * (summaries.at(i, b) - mean[b]);
      }
    }
  }
  for (std::size_t a = 0; a < s; ++a)
    for (std::size_t b = a; b < s; ++b) {
      cov(a, b) /= static_cast<double>(m - 1);
      cov(b, a) = cov(a, b);
    }

  const auto eig = nd::eigen_symmetric(cov);
  PcaResult out;
  out.eigenvalues = eig.values;
  out.components = eig.vectors;
  double total = 0.0;
  for (double v : eig.values) total += std::max(v, 0.0);
  out.explained_ratio.resize(s);
  for (std::size_t i = 0; i < s; ++i) {
    const double clamped = std::max(eig.values[i], 0.0);
    if (eig.values[i] <= 0.0) out.degenerate = true;
    out.explained_ratio[i] = total > 0.0 ? clamped / total : 0.0;
  }
  return out;
}

// Pearson correlations between leading principal-component scores and the
// true parameters: [n_components x P].
inline nd::Mat pc_parameter_correlations(const nd::Array& summaries, const nd::Array& theta,
                                         std::size_t n_components) {
  const auto p = pca(summaries);
  const std::size_t m = summaries.shape()[0], s = summaries.shape()[1];
  if (theta.ndim() != 2 || theta.shape()[0] != m)
    throw ContractError("pc_parameter_correlations: theta rows must match summaries");
  const std::size_t np = theta.shape()[1];
  n_components = std::min(n_components, s);
  nd::Mat corr(std::max(n_components, np));  // square buffer, top-left block used
  std::vector<double> score(m), param(m);
  for (std::size_t c = 0; c < n_components; ++c) {
    for (std::size_t i = 0; i < m; ++i) {
      double v = 0.0;
      for (std::size_t j = 0; j < s; ++j) v += summaries.at(i, j) * p.components(j, c);
      score[i] = v;
    }
    for (std::size_t d = 0; d < np; ++d) {
      for (std::size_t i = 0; i < m; ++i) param[i] = theta.at(i, d);
      corr(c, d) = stats::pearson(score, param);
    }
  }
  return corr;
}

// ---------------------------------------------------------------------------
// Severity sweep.
// ---------------------------------------------------------------------------

struct AxisSpec {
  std::string name;
  std::vector<double> values;
};

struct CellResult {
  double axis1 = 0.0;
  double axis2 = 0.0;
  double median_rmmd = 0.0;
  double median_posterior_error = std::numeric_limits<double>::quiet_NaN();
  double reject_rate = 0.0;
  std::size_t reps = 0;
  bool failed = false;
};

struct SeverityGrid {
  AxisSpec axis1, axis2;
  std::vector<CellResult> cells;  // axis1-major
};

using ModelFactory =
    std::function<bench::GenerativeModel(const std::map<std::string, double>& cell)>;

// Analytic posterior under the training model for one dataset; empty when no
// analytic family is available (posterior error then stays NaN).
using AnalyticPosteriorFn = std::function<bench::AnalyticPosterior(const nd::Array& dataset)>;

struct SweepConfig {
  std::size_t n_obs = 100;       // datasets per diagnose call
  std::size_t reps = 20;         // repetitions per cell
  std::size_t k = 100;           // observations per dataset
  double alpha = 0.05;
  std::size_t posterior_draws = 250;
  std::size_t error_datasets = 10;  // datasets per rep entering the error metric
  std::uint64_t seed = 1;
};

inline SeverityGrid severity_sweep(const ModelFactory& factory, const nets::Approximator& ax,
                                   const detect::NullDistribution& null,
                                   const nd::Array& validation_z, const AxisSpec& axis1,
                                   const AxisSpec& axis2, const SweepConfig& cfg,
                                   const AnalyticPosteriorFn& analytic = nullptr) {
  if (axis1.values.empty() || axis2.values.empty())
    throw ContractError("severity_sweep: axes must be nonempty");
  SeverityGrid grid;
  grid.axis1 = axis1;
  grid.axis2 = axis2;
  const double critical = null.critical_mmd_sq(cfg.alpha);
  const nd::Rng master(cfg.seed);
  const auto sampler = approximator_sampler(ax);
  const mmd::FixedReference reference(null.kernel, validation_z);

  std::size_t cell_index = 0;
  for (double v1 : axis1.values) {
    for (double v2 : axis2.values) {
      CellResult cell;
      cell.axis1 = v1;
      cell.axis2 = v2;
      cell.reps = cfg.reps;
      const nd::Rng cell_rng = master.substream(cell_index);
      try {
        const auto model = factory({{axis1.name, v1}, {axis2.name, v2}});
        const auto source = detect::simulation_summary_source(model, ax, cfg.k);
        std::vector<double> rmmds(cfg.reps);
        std::vector<double> errors;
        std::size_t rejections = 0;
        for (std::size_t r = 0; r < cfg.reps; ++r) {
          const nd::Rng rep_rng = cell_rng.substream(r);
          const auto z = source(cfg.n_obs, rep_rng);
          const auto report = reference.mmd_to(z);
          rmmds[r] = report.rmmd;
          if (report.mmd_sq > critical) ++rejections;
          if (analytic) {
            const auto batch =
                bench::simulate_batch(model, cfg.error_datasets, cfg.k, rep_rng.substream(1));
            std::vector<bench::AnalyticPosterior> posts;
            posts.reserve(cfg.error_datasets);
            for (std::size_t i = 0; i < cfg.error_datasets; ++i)
              posts.push_back(analytic(batch.dataset(i)));
            errors.push_back(posterior_error(sampler, batch, posts, cfg.posterior_draws,
                                             rep_rng.substream(2)));
          }
        }
        cell.median_rmmd = stats::median(rmmds);
        cell.reject_rate = static_cast<double>(rejections) / static_cast<double>(cfg.reps);
        if (!errors.empty()) cell.median_posterior_error = stats::median(errors);
      } catch (const SimulationError&) {
        cell.failed = true;
      }
      grid.cells.push_back(cell);
      ++cell_index;
    }
  }
  return grid;
}

}  // namespace mspec::analytics
