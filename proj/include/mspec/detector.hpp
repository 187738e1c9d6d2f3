#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "mspec/benchmarks.hpp"
#include "mspec/data.hpp"
#include "mspec/errors.hpp"
#include "mspec/mmd.hpp"
#include "mspec/networks.hpp"
#include "mspec/util/parallel.hpp"

// Test-time misspecification detection: summary-space MMD between observed
// and validation samples, an empirical null distribution from fresh
// simulations, the level-alpha hypothesis test, power estimation against an
// alternative simulator, and bootstrap MMD summaries.

namespace mspec::detect {

// Produces summaries of `count` fresh simulated datasets. Implementations
// must derive all randomness from the given stream.
using SummarySource = std::function<nd::Array(std::size_t count, const nd::Rng& stream)>;

// Fresh simulations from a model pushed through a trained summary network.
inline SummarySource simulation_summary_source(const bench::GenerativeModel& model,
                                               const nets::Approximator& ax,
                                               std::size_t observations_per_dataset) {
  return [&model, &ax, observations_per_dataset](std::size_t count, const nd::Rng& stream) {
    const auto batch = bench::simulate_batch(model, count, observations_per_dataset, stream);
    return nets::summarize_flat(ax, batch.x, count, observations_per_dataset);
  };
}

// Fresh simulations through a closed-form summary map (one dataset of k
// observations at a time), for hand-crafted or analytic statistics.
inline SummarySource map_summary_source(const bench::GenerativeModel& model,
                                        std::function<nd::Array(const nd::Array&)> summary_map,
                                        std::size_t observations_per_dataset) {
  return [&model, summary_map = std::move(summary_map), observations_per_dataset](
             std::size_t count, const nd::Rng& stream) {
    std::vector<double> rows;
    std::size_t s_dim = 0;
    for (std::size_t i = 0; i < count; ++i) {
      nd::Rng sub = stream.substream(i);
      const auto theta = model.sample_prior(sub);
      const auto z = summary_map(model.simulate(theta, observations_per_dataset, sub));
      s_dim = z.numel();
      rows.insert(rows.end(), z.values().begin(), z.values().end());
    }
    return nd::Array({count, s_dim}, std::move(rows));
  };
}

// ---------------------------------------------------------------------------
// Diagnose: observed-vs-validation MMD in summary space.
// ---------------------------------------------------------------------------

inline mmd::MmdReport diagnose(const mmd::KernelSpec& kernel, const nd::Array& observed_z,
                               const nd::Array& validation_z) {
  if (observed_z.ndim() != 2 || validation_z.ndim() != 2 ||
      observed_z.shape()[1] != validation_z.shape()[1]) {
    throw ConfigError("diagnose: summary dimensions do not match");
  }
  return mmd::mmd_biased(kernel, observed_z, validation_z);
}

// Observed datasets may have arbitrary (even differing) sizes.
inline mmd::MmdReport diagnose(const nets::Approximator& ax, const mmd::KernelSpec& kernel,
                               const RaggedDatasets& observed, const nd::Array& validation_z) {
  if (observed.empty()) throw ContractError("diagnose: need at least one observed dataset");
  std::vector<double> rows;
  rows.reserve(observed.size() * ax.summary_dim);
  for (const auto& x : observed) {
    const auto z = nets::summarize_one(ax, x);
    rows.insert(rows.end(), z.values().begin(), z.values().end());
  }
  return diagnose(kernel, nd::Array({observed.size(), ax.summary_dim}, std::move(rows)),
                  validation_z);
}

// ---------------------------------------------------------------------------
// Null distribution and hypothesis test.
// ---------------------------------------------------------------------------

struct NullDistribution {
  std::vector<double> draws;  // mmd_sq, sorted ascending
  std::size_t n_obs = 0;      // observed-sample size the null was built for
  std::size_t m = 0;          // validation sample size
  mmd::KernelSpec kernel;
  std::uint64_t seed = 0;

  double quantile(double q) const {
    if (draws.empty()) throw ContractError("NullDistribution: empty");
    if (!(q > 0.0 && q < 1.0)) throw ContractError("NullDistribution: quantile needs q in (0,1)");
    const double pos = q * static_cast<double>(draws.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, draws.size() - 1);
    const double w = pos - static_cast<double>(lo);
    return (1.0 - w) * draws[lo] + w * draws[hi];
  }

  // Order-statistic critical value at level alpha: a fresh null draw exceeds
  // it with probability close to alpha.
  double critical_mmd_sq(double alpha) const {
    if (!(alpha > 0.0 && alpha < 1.0)) throw ContractError("critical_mmd_sq: alpha not in (0,1)");
    const std::size_t r = draws.size();
    std::size_t k = static_cast<std::size_t>(std::ceil((1.0 - alpha) * static_cast<double>(r + 1)));
    k = std::min(std::max<std::size_t>(k, 1), r);
    return draws[k - 1];
  }
};

// R repetitions of: simulate a fresh N-dataset summary sample, measure MMD
// against the fixed validation summaries. Repetitions may run on several
// workers; results are merged by repetition index, so the distribution is
// identical for any worker count.
inline NullDistribution estimate_null(const SummarySource& source, const nd::Array& validation_z,
                                      std::size_t n_obs, std::size_t repetitions,
                                      const mmd::KernelSpec& kernel, std::uint64_t seed,
                                      std::size_t workers = 1) {
  if (repetitions < 100) throw ContractError("estimate_null: need at least 100 repetitions");
  if (n_obs == 0) throw ContractError("estimate_null: n_obs must be >= 1");
  NullDistribution null;
  null.n_obs = n_obs;
  null.m = validation_z.shape()[0];
  null.kernel = kernel;
  null.seed = seed;
  null.draws.resize(repetitions);
  const nd::Rng stream(seed);
  const mmd::FixedReference reference(kernel, validation_z);
  util::parallel_for(repetitions, workers, [&](std::size_t r) {
    const nd::Array z = source(n_obs, stream.substream(r));
    null.draws[r] = reference.mmd_to(z).mmd_sq;
  });
  std::sort(null.draws.begin(), null.draws.end());
  return null;
}

struct MisspecTestResult {
  mmd::MmdReport observed;
  double critical_mmd_sq = 0.0;
  double critical_rmmd = 0.0;
  double alpha = 0.0;
  bool reject = false;
  double p_value = 1.0;
};

inline MisspecTestResult test(const mmd::MmdReport& observed, const NullDistribution& null,
                              double alpha) {
  const bool direct = observed.m == null.n_obs && observed.n == null.m;
  const bool swapped = observed.n == null.n_obs && observed.m == null.m;
  if (!direct && !swapped) {
    throw ContractError("test: observed sample sizes do not match the null distribution");
  }
  if (observed.kernel.family != null.kernel.family ||
      observed.kernel.scales != null.kernel.scales) {
    throw ContractError("test: kernel mismatch between observed report and null distribution");
  }
  MisspecTestResult result;
  result.observed = observed;
  result.alpha = alpha;
  result.critical_mmd_sq = null.critical_mmd_sq(alpha);
  result.critical_rmmd = std::sqrt(std::max(result.critical_mmd_sq, 0.0));
  result.reject = observed.mmd_sq > result.critical_mmd_sq;
  // (r + 1)/(R + 1) convention keeps p-values away from zero.
  std::size_t ge = 0;
  for (auto it = null.draws.rbegin(); it != null.draws.rend() && *it >= observed.mmd_sq; ++it) ++ge;
  result.p_value =
      static_cast<double>(ge + 1) / static_cast<double>(null.draws.size() + 1);
  return result;
}

// Fraction of `trials` fresh N-sized samples from the alternative whose MMD
// against the validation summaries exceeds the critical value.
inline double power(const SummarySource& alternative, const nd::Array& validation_z,
                    const NullDistribution& null, double alpha, std::size_t trials,
                    std::uint64_t seed, std::size_t workers = 1) {
  if (trials == 0) throw ContractError("power: trials must be >= 1");
  const double critical = null.critical_mmd_sq(alpha);
  const nd::Rng stream(seed);
  const mmd::FixedReference reference(null.kernel, validation_z);
  std::vector<unsigned char> rejected(trials, 0);
  util::parallel_for(trials, workers, [&](std::size_t t) {
    const nd::Array z = alternative(null.n_obs, stream.substream(t));
    rejected[t] = reference.mmd_to(z).mmd_sq > critical ? 1 : 0;
  });
  std::size_t rejections = 0;
  for (auto r : rejected) rejections += r;
  return static_cast<double>(rejections) / static_cast<double>(trials);
}

// ---------------------------------------------------------------------------
// Bootstrap MMD on precomputed summary pools.
// ---------------------------------------------------------------------------

struct BootstrapSummary {
  double median_rmmd = 0.0;
  double lo_rmmd = 0.0;  // 2.5% quantile
  double hi_rmmd = 0.0;  // 97.5% quantile
  std::size_t reps = 0;
  std::size_t n_b = 0;
};

inline BootstrapSummary bootstrap_mmd(const nd::Array& pool_model_z, const nd::Array& pool_obs_z,
                                      std::size_t n_b, std::size_t reps,
                                      const mmd::KernelSpec& kernel, std::uint64_t seed) {
  if (pool_model_z.ndim() != 2 || pool_obs_z.ndim() != 2 || pool_model_z.shape()[0] == 0 ||
      pool_obs_z.shape()[0] == 0) {
    throw ContractError("bootstrap_mmd: pools must be nonempty 2-d samples");
  }
  if (reps < 100) throw ContractError("bootstrap_mmd: need at least 100 repetitions");
  if (n_b == 0) throw ContractError("bootstrap_mmd: n_b must be >= 1");
  const std::size_t m = pool_model_z.shape()[0];
  const std::size_t n_pool = pool_obs_z.shape()[0];
  const std::size_t s = pool_model_z.shape()[1];

  std::vector<double> rmmds(reps);
  const nd::Rng stream(seed);
  for (std::size_t r = 0; r < reps; ++r) {
    nd::Rng rng = stream.substream(r);
    std::vector<double> a(m * s), b(n_b * s);
    for (std::size_t i = 0; i < m; ++i) {
      const std::size_t pick = rng.below(m);
      std::copy(pool_model_z.values().begin() + static_cast<std::ptrdiff_t>(pick * s),
                pool_model_z.values().begin() + static_cast<std::ptrdiff_t>((pick + 1) * s),
                a.begin() + static_cast<std::ptrdiff_t>(i * s));
    }
    for (std::size_t i = 0; i < n_b; ++i) {
      const std::size_t pick = rng.below(n_pool);
      std::copy(pool_obs_z.values().begin() + static_cast<std::ptrdiff_t>(pick * s),
                pool_obs_z.values().begin() + static_cast<std::ptrdiff_t>((pick + 1) * s),
                b.begin() + static_cast<std::ptrdiff_t>(i * s));
    }
    rmmds[r] =
        mmd::mmd_biased(kernel, nd::Array({m, s}, std::move(a)), nd::Array({n_b, s}, std::move(b)))
            .rmmd;
  }
  std::sort(rmmds.begin(), rmmds.end());
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(reps - 1);
    const std::size_t lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, reps - 1);
    const double w = pos - static_cast<double>(lo);
    return (1.0 - w) * rmmds[lo] + w * rmmds[hi];
  };
  BootstrapSummary out;
  out.median_rmmd = quantile(0.5);
  out.lo_rmmd = quantile(0.025);
  out.hi_rmmd = quantile(0.975);
  out.reps = reps;
  out.n_b = n_b;
  return out;
}

}  // namespace mspec::detect
