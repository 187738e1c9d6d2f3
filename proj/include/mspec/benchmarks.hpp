#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mspec/data.hpp"
#include "mspec/errors.hpp"
#include "mspec/nd/array.hpp"
#include "mspec/nd/linalg.hpp"
#include "mspec/nd/rng.hpp"

// Desk-scale generative models with configurable misspecification: the 2-d
// conjugate Gaussian mean model, the 5-d normal-inverse-Wishart model, the
// cancer/stromal point process with hand-crafted summaries, and the
// minimal-vs-overcomplete sufficiency counterexample.

namespace mspec::bench {

// ---------------------------------------------------------------------------
// Misspecification configuration.
// ---------------------------------------------------------------------------

enum class MisspecVariant {
  none,
  prior_location,
  prior_scale,
  prior_both,
  simulator_scale,
  noise_mixture,
  student_t_sim,
  beta_noise,
  necrosis,
};

inline std::string variant_name(MisspecVariant v) {
  switch (v) {
    case MisspecVariant::none: return "none";
    case MisspecVariant::prior_location: return "prior_location";
    case MisspecVariant::prior_scale: return "prior_scale";
    case MisspecVariant::prior_both: return "prior_both";
    case MisspecVariant::simulator_scale: return "simulator_scale";
    case MisspecVariant::noise_mixture: return "noise_mixture";
    case MisspecVariant::student_t_sim: return "student_t_sim";
    case MisspecVariant::beta_noise: return "beta_noise";
    case MisspecVariant::necrosis: return "necrosis";
  }
  return "none";
}

inline MisspecVariant variant_from_name(const std::string& s) {
  for (auto v : {MisspecVariant::none, MisspecVariant::prior_location, MisspecVariant::prior_scale,
                 MisspecVariant::prior_both, MisspecVariant::simulator_scale,
                 MisspecVariant::noise_mixture, MisspecVariant::student_t_sim,
                 MisspecVariant::beta_noise, MisspecVariant::necrosis}) {
    if (variant_name(v) == s) return v;
  }
  throw ConfigError("unknown misspecification variant '" + s + "'");
}

struct MisspecConfig {
  MisspecVariant variant = MisspecVariant::none;
  std::vector<double> mu0;  // prior location offset; empty means zero
  double tau0 = 1.0;        // prior variance multiplier
  double tau = 1.0;         // likelihood variance multiplier
  double lambda = 0.0;      // contamination probability per observation
  double df = 50.0;         // Student t degrees of freedom
  double pi = 0.0;          // necrosis probability per parent cell

  void validate() const {
    if (!(tau0 > 0.0) || !(tau > 0.0)) throw ConfigError("MisspecConfig: tau0 and tau must be > 0");
    if (lambda < 0.0 || lambda > 1.0) throw ConfigError("MisspecConfig: lambda must lie in [0,1]");
    if (pi < 0.0 || pi > 1.0) throw ConfigError("MisspecConfig: pi must lie in [0,1]");
    if (df < 1.0) throw ConfigError("MisspecConfig: df must be >= 1");
    if (variant == MisspecVariant::none && !is_anchor())
      throw ConfigError("MisspecConfig: variant 'none' requires anchor parameters");
  }

  bool mu0_is_zero() const {
    for (double v : mu0)
      if (v != 0.0) return false;
    return true;
  }

  // True when every parameter sits at the well-specified anchor, in which
  // case simulation must take exactly the training-model code path.
  bool is_anchor() const {
    return mu0_is_zero() && tau0 == 1.0 && tau == 1.0 && lambda == 0.0 && pi == 0.0;
  }

  // A Student t simulator with df <= 2 has no finite variance; downstream
  // reports call this out as an extreme simulation gap.
  bool infinite_variance_simulator() const {
    return variant == MisspecVariant::student_t_sim && df <= 2.0;
  }

  double mu0_at(std::size_t i) const { return i < mu0.size() ? mu0[i] : 0.0; }
};

// ---------------------------------------------------------------------------
// Generative model: prior sampler plus simulator, pure in (theta, K, stream).
// ---------------------------------------------------------------------------

struct GenerativeModel {
  std::string name;
  std::size_t param_dim = 0;
  std::size_t data_dim = 0;
  MisspecConfig misspec;
  std::function<nd::Array(nd::Rng&)> sample_prior;  // -> [P]
  std::function<nd::Array(const nd::Array& theta, std::size_t k, nd::Rng&)> simulate;  // -> [K x D]
};

// Simulates n datasets of k observations each; dataset i consumes substream i
// of the given stream, so results are independent of evaluation order.
inline DatasetBatch simulate_batch(const GenerativeModel& model, std::size_t n, std::size_t k,
                                   const nd::Rng& stream) {
  if (n == 0 || k == 0) throw ContractError("simulate_batch: n and k must be >= 1");
  DatasetBatch batch;
  batch.n = n;
  batch.k = k;
  batch.d = model.data_dim;
  std::vector<double> xs(n * k * model.data_dim);
  std::vector<double> thetas(n * model.param_dim);
  for (std::size_t i = 0; i < n; ++i) {
    nd::Rng sub = stream.substream(i);
    const nd::Array theta = model.sample_prior(sub);
    const nd::Array x = model.simulate(theta, k, sub);
    std::copy(theta.values().begin(), theta.values().end(),
              thetas.begin() + static_cast<std::ptrdiff_t>(i * model.param_dim));
    std::copy(x.values().begin(), x.values().end(),
              xs.begin() + static_cast<std::ptrdiff_t>(i * k * model.data_dim));
  }
  batch.x = nd::Array({n * k, model.data_dim}, std::move(xs));
  batch.theta = nd::Array({n, model.param_dim}, std::move(thetas));
  return batch;
}

// ---------------------------------------------------------------------------
// Analytic posteriors.
// ---------------------------------------------------------------------------

struct NiwParams {
  std::vector<double> mu;
  double lambda = 0.0;
  nd::Mat psi;
  double nu = 0.0;
};

struct AnalyticPosterior {
  enum class Family { gaussian_known_cov, normal_inverse_wishart };
  Family family = Family::gaussian_known_cov;

  // gaussian_known_cov
  std::vector<double> mean;
  nd::Mat cov;

  // normal_inverse_wishart
  NiwParams niw;

  std::size_t dim() const {
    return family == Family::gaussian_known_cov ? mean.size() : niw.mu.size();
  }

  // E[mu] = mu_K for the NIW family.
  std::vector<double> mu_mean() const {
    return family == Family::gaussian_known_cov ? mean : niw.mu;
  }

  // Marginal posterior of mu is multivariate t with these parameters
  // (location mu_K, scale Psi_K / (lambda_K * df), df = nu_K - D + 1).
  double mu_marginal_df() const {
    require_niw();
    return niw.nu - static_cast<double>(niw.mu.size()) + 1.0;
  }
  nd::Mat mu_marginal_scale() const {
    require_niw();
    nd::Mat s = niw.psi;
    const double f = 1.0 / (niw.lambda * mu_marginal_df());
    for (auto& v : s.a) v *= f;
    return s;
  }
  // Cov(mu) = Psi_K / (lambda_K (nu_K - D - 1)).
  nd::Mat mu_covariance() const {
    require_niw();
    nd::Mat s = niw.psi;
    const double f = 1.0 / (niw.lambda * (niw.nu - static_cast<double>(niw.mu.size()) - 1.0));
    for (auto& v : s.a) v *= f;
    return s;
  }
  // E[Sigma] = Psi_K / (nu_K - D - 1); requires nu_K > D + 1.
  nd::Mat expected_sigma() const {
    require_niw();
    const double denom = niw.nu - static_cast<double>(niw.mu.size()) - 1.0;
    if (!(denom > 0.0)) throw ContractError("expected_sigma: requires nu_K > D + 1");
    nd::Mat s = niw.psi;
    for (auto& v : s.a) v *= 1.0 / denom;
    return s;
  }

 private:
  void require_niw() const {
    if (family != Family::normal_inverse_wishart)
      throw ContractError("AnalyticPosterior: not a normal-inverse-Wishart posterior");
  }
};

// ---------------------------------------------------------------------------
// Experiment 1: 2-d Gaussian means, K observations, known unit covariance.
// ---------------------------------------------------------------------------

inline GenerativeModel gaussian2d(const MisspecConfig& misspec) {
  misspec.validate();
  switch (misspec.variant) {
    case MisspecVariant::none:
    case MisspecVariant::prior_location:
    case MisspecVariant::prior_scale:
    case MisspecVariant::prior_both:
    case MisspecVariant::simulator_scale:
    case MisspecVariant::noise_mixture: break;
    default:
      throw ConfigError("gaussian2d: variant '" + variant_name(misspec.variant) +
                        "' is not defined for this model family");
  }
  GenerativeModel m;
  m.name = "gaussian2d";
  m.param_dim = 2;
  m.data_dim = 2;
  m.misspec = misspec;
  const bool anchor = misspec.is_anchor();
  const double prior_sd = std::sqrt(misspec.tau0);
  const double sim_sd = std::sqrt(misspec.tau);
  const double mu0_x = misspec.mu0_at(0), mu0_y = misspec.mu0_at(1);
  const double lambda = misspec.lambda;

  m.sample_prior = [anchor, prior_sd, mu0_x, mu0_y](nd::Rng& rng) {
    if (anchor) return nd::Array({2}, {rng.normal(), rng.normal()});
    return nd::Array({2}, {mu0_x + prior_sd * rng.normal(), mu0_y + prior_sd * rng.normal()});
  };
  m.simulate = [anchor, sim_sd, lambda](const nd::Array& theta, std::size_t k, nd::Rng& rng) {
    std::vector<double> x(k * 2);
    const double mx = theta.at(0), my = theta.at(1);
    for (std::size_t i = 0; i < k; ++i) {
      if (anchor) {
        x[2 * i] = mx + rng.normal();
        x[2 * i + 1] = my + rng.normal();
      } else if (lambda > 0.0 && rng.uniform() < lambda) {
        // Contaminated observation: componentwise Beta(2,5) replacement.
        x[2 * i] = rng.beta(2.0, 5.0);
        x[2 * i + 1] = rng.beta(2.0, 5.0);
      } else {
        x[2 * i] = mx + sim_sd * rng.normal();
        x[2 * i + 1] = my + sim_sd * rng.normal();
      }
    }
    return nd::Array({k, 2}, std::move(x));
  };
  return m;
}

// Conjugate posterior of the 2-d training model (prior N(0, I), likelihood
// N(mu, I)): mean = K xbar / (K+1), covariance = I / (K+1).
inline AnalyticPosterior gaussian2d_posterior(const nd::Array& data) {
  if (data.ndim() != 2 || data.shape()[1] != 2)
    throw ContractError("gaussian2d_posterior: data must be [K x 2]");
  const std::size_t k = data.shape()[0];
  AnalyticPosterior p;
  p.family = AnalyticPosterior::Family::gaussian_known_cov;
  p.mean = {0.0, 0.0};
  for (std::size_t i = 0; i < k; ++i) {
    p.mean[0] += data.at(i, 0);
    p.mean[1] += data.at(i, 1);
  }
  const double denom = static_cast<double>(k) + 1.0;
  p.mean[0] /= denom;
  p.mean[1] /= denom;
  p.cov = nd::Mat(2);
  p.cov(0, 0) = p.cov(1, 1) = 1.0 / denom;
  return p;
}

// ---------------------------------------------------------------------------
// Experiment 2: 5-d Gaussian with normal-inverse-Wishart prior.
// ---------------------------------------------------------------------------

inline NiwParams niw_training_prior(std::size_t d = 5) {
  NiwParams p;
  p.mu.assign(d, 0.0);
  p.lambda = 5.0;
  p.psi = nd::Mat::identity(d);
  p.nu = 10.0;
  return p;
}

inline std::atomic<std::uint64_t>& niw_resample_count() {
  static std::atomic<std::uint64_t> count{0};
  return count;
}

namespace detail {

// Wishart(V, n) via the Bartlett factorization: W = L A A^T L^T, chol(V)=LL^T.
inline nd::Mat sample_wishart(const nd::Mat& scale, double dof, nd::Rng& rng) {
  const std::size_t d = scale.n;
  const nd::Mat l = nd::cholesky(scale);
  nd::Mat a(d);
  for (std::size_t i = 0; i < d; ++i) {
    a(i, i) = std::sqrt(rng.chi_squared(dof - static_cast<double>(i)));
    for (std::size_t j = 0; j < i; ++j) a(i, j) = rng.normal();
  }
  const nd::Mat la = nd::mat_mul(l, a);
  return nd::mat_mul(la, nd::mat_transpose(la));
}

inline nd::Mat sample_inverse_wishart(const nd::Mat& psi, double nu, nd::Rng& rng) {
  return nd::spd_inverse(sample_wishart(nd::spd_inverse(psi), nu, rng));
}

}  // namespace detail

// Draw (mu, Sigma) from a normal-inverse-Wishart distribution.
inline std::pair<std::vector<double>, nd::Mat> sample_niw(const NiwParams& p, nd::Rng& rng) {
  const std::size_t d = p.mu.size();
  nd::Mat sigma;
  for (int attempt = 0;; ++attempt) {
    sigma = detail::sample_inverse_wishart(p.psi, p.nu, rng);
    if (nd::is_positive_definite(sigma)) break;
    niw_resample_count().fetch_add(1, std::memory_order_relaxed);
    if (attempt >= 32) throw SimulationError("sample_niw: could not draw a PD covariance");
  }
  const nd::Mat l = nd::cholesky(sigma);
  std::vector<double> mu(d);
  std::vector<double> z(d);
  for (auto& v : z) v = rng.normal();
  const double f = 1.0 / std::sqrt(p.lambda);
  for (std::size_t i = 0; i < d; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j <= i; ++j) s += l(i, j) * z[j];
    mu[i] = p.mu[i] + f * s;
  }
  return {mu, sigma};
}

// theta packs mu followed by the row-major lower Cholesky factor of Sigma
// with log-transformed diagonal, so flow support is unconstrained.
inline std::vector<double> pack_mean_cov(const std::vector<double>& mu, const nd::Mat& sigma) {
  const std::size_t d = mu.size();
  const nd::Mat l = nd::cholesky(sigma);
  std::vector<double> theta(mu);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < i; ++j) theta.push_back(l(i, j));
    theta.push_back(std::log(l(i, i)));
  }
  return theta;
}

inline std::pair<std::vector<double>, nd::Mat> unpack_mean_cov(std::span<const double> theta,
                                                               std::size_t d) {
  if (theta.size() != d + d * (d + 1) / 2) throw ContractError("unpack_mean_cov: size mismatch");
  std::vector<double> mu(theta.begin(), theta.begin() + static_cast<std::ptrdiff_t>(d));
  nd::Mat l(d);
  std::size_t idx = d;
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < i; ++j) l(i, j) = theta[idx++];
    l(i, i) = std::exp(theta[idx++]);
  }
  return {mu, nd::mat_mul(l, nd::mat_transpose(l))};
}

// Correlation matrix with standard deviations on the diagonal, the
// evaluation parametrization for covariance recovery.
inline nd::Mat cov_to_corr_sd(const nd::Mat& sigma) {
  nd::Mat out(sigma.n);
  for (std::size_t i = 0; i < sigma.n; ++i) {
    out(i, i) = std::sqrt(sigma(i, i));
    for (std::size_t j = 0; j < i; ++j) {
      const double c = sigma(i, j) / (out(i, i) * std::sqrt(sigma(j, j)));
      out(i, j) = out(j, i) = c;
    }
  }
  return out;
}

inline GenerativeModel gaussian5d_niw(const MisspecConfig& misspec) {
  misspec.validate();
  switch (misspec.variant) {
    case MisspecVariant::none:
    case MisspecVariant::prior_location:
    case MisspecVariant::prior_scale:
    case MisspecVariant::prior_both:
    case MisspecVariant::student_t_sim:
    case MisspecVariant::beta_noise: break;
    default:
      throw ConfigError("gaussian5d_niw: variant '" + variant_name(misspec.variant) +
                        "' is not defined for this model family");
  }
  constexpr std::size_t d = 5;
  GenerativeModel m;
  m.name = "gaussian5d_niw";
  m.param_dim = d + d * (d + 1) / 2;  // 20
  m.data_dim = d;
  m.misspec = misspec;

  NiwParams prior = niw_training_prior(d);
  if (!misspec.mu0_is_zero()) {
    for (std::size_t i = 0; i < d; ++i) prior.mu[i] = misspec.mu0_at(i);
  }
  if (misspec.tau0 != 1.0) {
    for (std::size_t i = 0; i < d; ++i) prior.psi(i, i) = misspec.tau0;
  }
  // A Student t simulator differs from the Gaussian at every finite df, so
  // this variant has no anchor short-circuit.
  const bool student = misspec.variant == MisspecVariant::student_t_sim;
  const double df = misspec.df;
  const double lambda = misspec.variant == MisspecVariant::beta_noise ? misspec.lambda : 0.0;

  m.sample_prior = [prior](nd::Rng& rng) {
    const auto [mu, sigma] = sample_niw(prior, rng);
    return nd::Array({5 + 15}, pack_mean_cov(mu, sigma));
  };
  m.simulate = [student, df, lambda](const nd::Array& theta, std::size_t k, nd::Rng& rng) {
    const auto [mu, sigma] = unpack_mean_cov(theta.values(), d);
    const nd::Mat l = nd::cholesky(sigma);
    std::vector<double> x(k * d);
    std::vector<double> z(d);
    for (std::size_t i = 0; i < k; ++i) {
      if (lambda > 0.0 && rng.uniform() < lambda) {
        for (std::size_t j = 0; j < d; ++j) x[i * d + j] = rng.beta(2.0, 5.0);
        continue;
      }
      for (auto& v : z) v = rng.normal();
      // Student t: Gaussian scale mixture with a shared chi-squared draw.
      const double w = student ? std::sqrt(df / rng.chi_squared(df)) : 1.0;
      for (std::size_t r = 0; r < d; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c <= r; ++c) s += l(r, c) * z[c];
        x[i * d + r] = mu[r] + w * s;
      }
    }
    return nd::Array({k, d}, std::move(x));
  };
  return m;
}

// Conjugate update; K = 0 returns the prior unchanged.
inline AnalyticPosterior niw_posterior(const NiwParams& prior, const nd::Array& data) {
  AnalyticPosterior post;
  post.family = AnalyticPosterior::Family::normal_inverse_wishart;
  if (data.numel() == 0) {
    post.niw = prior;
    return post;
  }
  if (data.ndim() != 2 || data.shape()[1] != prior.mu.size())
    throw ContractError("niw_posterior: data must be [K x D]");
  const std::size_t k = data.shape()[0];
  const std::size_t d = prior.mu.size();
  const double kf = static_cast<double>(k);

  std::vector<double> xbar(d, 0.0);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < d; ++j) xbar[j] += data.at(i, j);
  for (auto& v : xbar) v /= kf;

  NiwParams& out = post.niw;
  out.lambda = prior.lambda + kf;
  out.nu = prior.nu + kf;
  out.mu.resize(d);
  for (std::size_t j = 0; j < d; ++j) out.mu[j] = (prior.lambda * prior.mu[j] + kf * xbar[j]) / out.lambda;

  out.psi = prior.psi;
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t r = 0; r < d; ++r)
      for (std::size_t c = 0; c < d; ++c)
        out.psi(r, c) += (data.at(i, r) - xbar[r]) * (data.at(i, c) - xbar[c]);
  const double w = prior.lambda * kf / (prior.lambda + kf);
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = 0; c < d; ++c)
      out.psi(r, c) += w * (xbar[r] - prior.mu[r]) * (xbar[c] - prior.mu[c]);
  return post;
}

// ---------------------------------------------------------------------------
// Experiment 3: cancer/stromal point process with hand-crafted summaries.
// ---------------------------------------------------------------------------

struct CancerStromalGeometry {
  double daughter_sd = 0.05;    // Gaussian dispersion of daughters around parents
  double necrosis_radius = 0.1; // daughters this close to a necrotic parent die
  std::size_t distance_sample = 50;
  int max_retries = 10;
};

// theta = (lambda_c, lambda_p, lambda_d): stromal rate, parent rate,
// daughters per parent. Each simulated observation is the 4-vector of
// hand-crafted statistics (cancer count, stromal count, mean and max
// nearest-cancer distance over sampled stromal cells).
inline GenerativeModel cancer_stromal(const MisspecConfig& misspec,
                                      const CancerStromalGeometry& geom = {}) {
  misspec.validate();
  if (misspec.variant != MisspecVariant::none && misspec.variant != MisspecVariant::necrosis) {
    throw ConfigError("cancer_stromal: variant '" + variant_name(misspec.variant) +
                      "' is not defined for this model family");
  }
  GenerativeModel m;
  m.name = "cancer_stromal";
  m.param_dim = 3;
  m.data_dim = 4;
  m.misspec = misspec;
  const double pi = misspec.pi;  // pi == 0 already takes the anchor code path

  m.sample_prior = [](nd::Rng& rng) {
    return nd::Array({3}, {rng.gamma(25.0, 0.03), rng.gamma(45.0, 3.0), rng.gamma(5.0, 0.5)});
  };
  m.simulate = [pi, geom](const nd::Array& theta, std::size_t k, nd::Rng& rng) {
    const double lambda_c = theta.at(0), lambda_p = theta.at(1), lambda_d = theta.at(2);
    std::vector<double> stats(k * 4);
    for (std::size_t pattern = 0; pattern < k; ++pattern) {
      std::vector<double> cancer_xy, stromal_xy;
      bool ok = false;
      for (int attempt = 0; attempt < geom.max_retries && !ok; ++attempt) {
        cancer_xy.clear();
        stromal_xy.clear();
        // Stromal cells: homogeneous Poisson on the unit square.
        const std::uint64_t n_stromal = rng.poisson(lambda_c);
        for (std::uint64_t i = 0; i < n_stromal; ++i) {
          stromal_xy.push_back(rng.uniform());
          stromal_xy.push_back(rng.uniform());
        }
        // Cancer cells: daughters dispersed around unobserved parents.
        const std::uint64_t n_parents = rng.poisson(lambda_p);
        for (std::uint64_t p = 0; p < n_parents; ++p) {
          const double px = rng.uniform(), py = rng.uniform();
          const bool necrotic = pi > 0.0 && rng.bernoulli(pi);
          const std::uint64_t n_daughters = rng.poisson(lambda_d);
          for (std::uint64_t dgt = 0; dgt < n_daughters; ++dgt) {
            const double dx = geom.daughter_sd * rng.normal();
            const double dy = geom.daughter_sd * rng.normal();
            if (necrotic && dx * dx + dy * dy <= geom.necrosis_radius * geom.necrosis_radius) {
              continue;  // necrosis removes daughters near the parent
            }
            cancer_xy.push_back(px + dx);
            cancer_xy.push_back(py + dy);
          }
        }
        ok = !cancer_xy.empty() && !stromal_xy.empty();
      }
      if (!ok) throw SimulationError("cancer_stromal: no cells after retries");

      const std::size_t n_cancer = cancer_xy.size() / 2;
      const std::size_t n_stromal = stromal_xy.size() / 2;
      // Nearest-cancer distances from a subsample of stromal cells.
      std::vector<std::size_t> pick(n_stromal);
      for (std::size_t i = 0; i < n_stromal; ++i) pick[i] = i;
      std::size_t take = std::min<std::size_t>(geom.distance_sample, n_stromal);
      for (std::size_t i = 0; i < take; ++i) {
        std::swap(pick[i], pick[i + rng.below(n_stromal - i)]);
      }
      double mean_dist = 0.0, max_dist = 0.0;
      for (std::size_t i = 0; i < take; ++i) {
        const double sx = stromal_xy[2 * pick[i]], sy = stromal_xy[2 * pick[i] + 1];
        double best = 1e300;
        for (std::size_t c = 0; c < n_cancer; ++c) {
          const double dx = sx - cancer_xy[2 * c], dy = sy - cancer_xy[2 * c + 1];
          best = std::min(best, dx * dx + dy * dy);
        }
        const double dist = std::sqrt(best);
        mean_dist += dist;
        max_dist = std::max(max_dist, dist);
      }
      mean_dist /= static_cast<double>(take);
      stats[pattern * 4 + 0] = static_cast<double>(n_cancer);
      stats[pattern * 4 + 1] = static_cast<double>(n_stromal);
      stats[pattern * 4 + 2] = mean_dist;
      stats[pattern * 4 + 3] = max_dist;
    }
    return nd::Array({k, 4}, std::move(stats));
  };
  return m;
}

// ---------------------------------------------------------------------------
// Sufficiency counterexample: two observations, shared mean, different
// noise variances; the standardized empirical average is distributed
// identically under both models.
// ---------------------------------------------------------------------------

enum class CounterexampleSummary { minimal, overcomplete };

struct CounterexamplePair {
  GenerativeModel well_specified;  // x_1, x_2 ~ N(mu, 2)
  GenerativeModel misspecified;    // x_1 ~ N(mu, 1), x_2 ~ N(mu, 3)
  CounterexampleSummary mode = CounterexampleSummary::minimal;
  std::size_t summary_dim = 1;

  static constexpr double prior_var = 0.5;  // mu ~ N(0, 1/2)

  // Minimal sufficient statistic for the mean, standardized by its marginal
  // variance under the training model: Var(xbar) = prior_var + (2+2)/4.
  static nd::Array minimal_summary(const nd::Array& x) {
    const double scale = 1.0 / std::sqrt(prior_var + 1.0);
    return nd::Array({1, 1}, {0.5 * (x.at(0, 0) + x.at(1, 0)) * scale});
  }

  // Overcomplete statistic: both coordinates, standardized per coordinate by
  // the training-model marginal variance prior_var + 2.
  static nd::Array overcomplete_summary(const nd::Array& x) {
    const double scale = 1.0 / std::sqrt(prior_var + 2.0);
    return nd::Array({1, 2}, {x.at(0, 0) * scale, x.at(1, 0) * scale});
  }

  nd::Array summarize(const nd::Array& x) const {
    return mode == CounterexampleSummary::minimal ? minimal_summary(x) : overcomplete_summary(x);
  }
};

// Model registry used by persisted configurations.
inline GenerativeModel make_model(const std::string& name, const MisspecConfig& misspec) {
  if (name == "gaussian2d") return gaussian2d(misspec);
  if (name == "gaussian5d_niw") return gaussian5d_niw(misspec);
  if (name == "cancer_stromal") return cancer_stromal(misspec);
  throw ConfigError("unknown model '" + name + "'");
}

inline CounterexamplePair sufficiency_counterexample(CounterexampleSummary mode) {
  auto make = [](const char* name, double var1, double var2) {
    GenerativeModel m;
    m.name = name;
    m.param_dim = 1;
    m.data_dim = 1;
    const double sd1 = std::sqrt(var1), sd2 = std::sqrt(var2);
    m.sample_prior = [](nd::Rng& rng) {
      return nd::Array({1}, {std::sqrt(CounterexamplePair::prior_var) * rng.normal()});
    };
    m.simulate = [sd1, sd2](const nd::Array& theta, std::size_t k, nd::Rng& rng) {
      if (k != 2) throw ContractError("counterexample simulator is defined for K = 2");
      const double mu = theta.at(0);
      return nd::Array({2, 1}, {mu + sd1 * rng.normal(), mu + sd2 * rng.normal()});
    };
    return m;
  };
  CounterexamplePair pair;
  pair.well_specified = make("counterexample_m", 2.0, 2.0);
  pair.misspecified = make("counterexample_mstar", 1.0, 3.0);
  pair.mode = mode;
  pair.summary_dim = mode == CounterexampleSummary::minimal ? 1 : 2;
  return pair;
}

}  // namespace mspec::bench
