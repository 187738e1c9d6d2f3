#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "mspec/benchmarks.hpp"
#include "mspec/mmd.hpp"
#include "mspec/util/stats.hpp"
#include "testutil.hpp"

namespace nd = mspec::nd;
namespace bench = mspec::bench;
using mspec::ConfigError;
using mspec::ContractError;

namespace {

bench::MisspecConfig variant_cfg(bench::MisspecVariant v) {
  bench::MisspecConfig cfg;
  cfg.variant = v;
  return cfg;
}

}  // namespace

TEST_CASE("gaussian2d conjugate posterior formula matches grid quadrature") {
  // Three observations, posterior mean should be K xbar / (K+1) and the
  // quadrature oracle integrates prior x likelihood on a grid.
  nd::Array data({3, 2}, {0.8, -0.3, 1.4, 0.2, 0.5, -1.0});
  const auto post = bench::gaussian2d_posterior(data);

  const int steps = 400;
  const double lo = -5.0, hi = 5.0, h = (hi - lo) / steps;
  double norm = 0.0, ex = 0.0, ey = 0.0;
  for (int i = 0; i <= steps; ++i) {
    for (int j = 0; j <= steps; ++j) {
      const double mx = lo + i * h, my = lo + j * h;
      double log_p = -0.5 * (mx * mx + my * my);
      for (std::size_t k = 0; k < 3; ++k) {
        const double dx = data.at(k, 0) - mx, dy = data.at(k, 1) - my;
        log_p += -0.5 * (dx * dx + dy * dy);
      }
      const double w = std::exp(log_p);
      norm += w;
      ex += w * mx;
      ey += w * my;
    }
  }
  CHECK(ex / norm == doctest::Approx(post.mean[0]).epsilon(1e-6));
  CHECK(ey / norm == doctest::Approx(post.mean[1]).epsilon(1e-6));
  CHECK(post.cov(0, 0) == doctest::Approx(0.25).epsilon(1e-12));  // 1/(K+1), K=3
}

TEST_CASE("gaussian2d posterior with K=100 has the expected shrinkage") {
  nd::Rng rng(1);
  auto model = bench::gaussian2d({});
  auto batch = bench::simulate_batch(model, 1, 100, rng);
  const auto post = bench::gaussian2d_posterior(batch.dataset(0));
  double xbar0 = 0.0;
  for (std::size_t i = 0; i < 100; ++i) xbar0 += batch.dataset(0).at(i, 0);
  xbar0 /= 100.0;
  CHECK(post.mean[0] == doctest::Approx(xbar0 * 100.0 / 101.0).epsilon(1e-12));
  CHECK(post.cov(0, 0) == doctest::Approx(1.0 / 101.0).epsilon(1e-12));
}

TEST_CASE("anchor parameters short-circuit to the training model bitwise") {
  bench::MisspecConfig anchored;
  anchored.variant = bench::MisspecVariant::prior_both;
  anchored.mu0 = {0.0, 0.0};
  anchored.tau0 = 1.0;
  auto model_anchor = bench::gaussian2d(anchored);
  auto model_none = bench::gaussian2d({});

  nd::Rng rng(77);
  auto b1 = bench::simulate_batch(model_anchor, 5, 20, rng);
  auto b2 = bench::simulate_batch(model_none, 5, 20, rng);
  for (std::size_t i = 0; i < b1.x.numel(); ++i) CHECK(b1.x.values()[i] == b2.x.values()[i]);
  for (std::size_t i = 0; i < b1.theta.numel(); ++i)
    CHECK(b1.theta.values()[i] == b2.theta.values()[i]);
}

TEST_CASE("full contamination keeps observations inside the unit square") {
  auto cfg = variant_cfg(bench::MisspecVariant::noise_mixture);
  cfg.lambda = 1.0;
  auto model = bench::gaussian2d(cfg);
  nd::Rng rng(3);
  auto batch = bench::simulate_batch(model, 10, 50, rng);
  for (double v : batch.x.values()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("model families reject foreign variants") {
  CHECK_THROWS_AS(bench::gaussian2d(variant_cfg(bench::MisspecVariant::necrosis)), ConfigError);
  CHECK_THROWS_AS(bench::gaussian2d(variant_cfg(bench::MisspecVariant::student_t_sim)),
                  ConfigError);
  CHECK_THROWS_AS(bench::gaussian5d_niw(variant_cfg(bench::MisspecVariant::noise_mixture)),
                  ConfigError);
  CHECK_THROWS_AS(bench::cancer_stromal(variant_cfg(bench::MisspecVariant::prior_scale)),
                  ConfigError);
}

TEST_CASE("invalid misspecification parameters are rejected") {
  bench::MisspecConfig cfg;
  cfg.variant = bench::MisspecVariant::prior_scale;
  cfg.tau0 = 0.0;
  CHECK_THROWS_AS(bench::gaussian2d(cfg), ConfigError);
  bench::MisspecConfig bad_none;
  bad_none.tau = 2.0;  // variant none must sit at the anchor
  CHECK_THROWS_AS(bad_none.validate(), ConfigError);
}

TEST_CASE("simulators are pure functions of theta, K and the stream") {
  auto model = bench::gaussian2d({});
  nd::Array theta({2}, {0.3, -0.6});
  nd::Rng r1(5), r2(5);
  auto x1 = model.simulate(theta, 7, r1);
  auto x2 = model.simulate(theta, 7, r2);
  for (std::size_t i = 0; i < x1.numel(); ++i) CHECK(x1.values()[i] == x2.values()[i]);
}

TEST_CASE("niw update hyperparameters") {
  auto prior = bench::niw_training_prior();
  nd::Rng rng(8);
  nd::Array data({100, 5}, rng.normal_vector(500));
  const auto post = bench::niw_posterior(prior, data);
  CHECK(post.niw.lambda == doctest::Approx(105.0).epsilon(1e-14));
  CHECK(post.niw.nu == doctest::Approx(110.0).epsilon(1e-14));

  // Scatter-updated Psi_K stays symmetric positive definite.
  CHECK(nd::is_positive_definite(post.niw.psi));
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j)
      CHECK(post.niw.psi(i, j) == doctest::Approx(post.niw.psi(j, i)).epsilon(1e-12));
}

TEST_CASE("niw update fixed point at a single datapoint equal to the prior mean") {
  auto prior = bench::niw_training_prior();
  prior.mu = {0.4, -0.2, 1.0, 0.0, 2.5};
  nd::Array data({1, 5}, {0.4, -0.2, 1.0, 0.0, 2.5});
  const auto post = bench::niw_posterior(prior, data);
  for (std::size_t i = 0; i < 5; ++i)
    CHECK(post.niw.mu[i] == doctest::Approx(prior.mu[i]).epsilon(1e-12));
}

TEST_CASE("niw update with no data returns the prior") {
  auto prior = bench::niw_training_prior();
  const auto post = bench::niw_posterior(prior, nd::Array({0, 5}, {}));
  CHECK(post.niw.lambda == prior.lambda);
  CHECK(post.niw.nu == prior.nu);
  for (std::size_t i = 0; i < 5; ++i) CHECK(post.niw.mu[i] == prior.mu[i]);
}

TEST_CASE("mean-covariance packing round trips") {
  nd::Rng rng(13);
  auto model = bench::gaussian5d_niw({});
  for (int rep = 0; rep < 5; ++rep) {
    const auto theta = model.sample_prior(rng);
    REQUIRE(theta.numel() == 20);
    const auto [mu, sigma] = bench::unpack_mean_cov(theta.values(), 5);
    const auto repacked = bench::pack_mean_cov(mu, sigma);
    for (std::size_t i = 0; i < 20; ++i)
      CHECK(repacked[i] == doctest::Approx(theta.values()[i]).epsilon(1e-9));
    CHECK(nd::is_positive_definite(sigma));
  }
}

TEST_CASE("student t simulator with df=2 is flagged as an extreme gap") {
  auto cfg = variant_cfg(bench::MisspecVariant::student_t_sim);
  cfg.df = 2.0;
  CHECK(cfg.infinite_variance_simulator());
  cfg.df = 30.0;
  CHECK_FALSE(cfg.infinite_variance_simulator());
  auto model = bench::gaussian5d_niw(cfg);
  nd::Rng rng(17);
  auto batch = bench::simulate_batch(model, 3, 10, rng);
  for (double v : batch.x.values()) CHECK(std::isfinite(v));
}

TEST_CASE("corr-sd transform has standard deviations on the diagonal") {
  nd::Mat sigma(2);
  sigma(0, 0) = 4.0;
  sigma(1, 1) = 9.0;
  sigma(0, 1) = sigma(1, 0) = 3.0;
  const auto t = bench::cov_to_corr_sd(sigma);
  CHECK(t(0, 0) == doctest::Approx(2.0));
  CHECK(t(1, 1) == doctest::Approx(3.0));
  CHECK(t(0, 1) == doctest::Approx(0.5));
  CHECK(t(1, 0) == doctest::Approx(0.5));
}

TEST_CASE("cancer stromal patterns produce four finite statistics") {
  auto model = bench::cancer_stromal({});
  nd::Rng rng(19);
  auto batch = bench::simulate_batch(model, 8, 1, rng);
  REQUIRE(batch.d == 4);
  for (std::size_t i = 0; i < 8; ++i) {
    CHECK(batch.x.at(i, 0) > 0.0);   // cancer count
    CHECK(batch.x.at(i, 1) > 0.0);   // stromal count
    CHECK(batch.x.at(i, 2) >= 0.0);  // mean nearest distance
    CHECK(batch.x.at(i, 3) >= batch.x.at(i, 2));
  }
}

TEST_CASE("cancer stromal prior means match the configured gamma laws") {
  auto model = bench::cancer_stromal({});
  nd::Rng rng(23);
  double s0 = 0, s1 = 0, s2 = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    auto th = model.sample_prior(rng);
    s0 += th.at(0);
    s1 += th.at(1);
    s2 += th.at(2);
  }
  CHECK(s0 / n == doctest::Approx(25.0 / 0.03).epsilon(0.02));
  CHECK(s1 / n == doctest::Approx(45.0 / 3.0).epsilon(0.02));
  CHECK(s2 / n == doctest::Approx(5.0 / 0.5).epsilon(0.02));
}

TEST_CASE("necrosis at pi=0 is bit-identical to the training model") {
  auto cfg = variant_cfg(bench::MisspecVariant::necrosis);
  cfg.pi = 0.0;
  auto a = bench::cancer_stromal(cfg);
  auto b = bench::cancer_stromal({});
  nd::Rng rng(29);
  auto ba = bench::simulate_batch(a, 4, 1, rng);
  auto bb = bench::simulate_batch(b, 4, 1, rng);
  for (std::size_t i = 0; i < ba.x.numel(); ++i) CHECK(ba.x.values()[i] == bb.x.values()[i]);
}

TEST_CASE("necrosis at pi=0.75 lowers cancer counts visibly") {
  auto cfg = variant_cfg(bench::MisspecVariant::necrosis);
  cfg.pi = 0.75;
  auto necrotic = bench::cancer_stromal(cfg);
  auto clean = bench::cancer_stromal({});
  nd::Rng rng(31);
  const int n = 300;
  double mean_clean = 0, mean_necrotic = 0;
  auto bc = bench::simulate_batch(clean, n, 1, rng.substream(0));
  auto bn = bench::simulate_batch(necrotic, n, 1, rng.substream(1));
  for (int i = 0; i < n; ++i) {
    mean_clean += bc.x.at(i, 0);
    mean_necrotic += bn.x.at(i, 0);
  }
  mean_clean /= n;
  mean_necrotic /= n;
  CHECK(mean_necrotic < 0.75 * mean_clean);
}

TEST_CASE("counterexample: minimal summary is unit gaussian under both models") {
  for (auto which : {0, 1}) {
    const auto pair = bench::sufficiency_counterexample(bench::CounterexampleSummary::minimal);
    const auto& model = which == 0 ? pair.well_specified : pair.misspecified;
    nd::Rng rng(37 + which);
    const int n = 40000;
    double s = 0.0, s2 = 0.0;
    for (int i = 0; i < n; ++i) {
      nd::Rng sub = rng.substream(i);
      const auto theta = model.sample_prior(sub);
      const auto x = model.simulate(theta, 2, sub);
      const double z = pair.summarize(x).at(0, 0);
      s += z;
      s2 += z * z;
    }
    const double mean = s / n;
    const double var = s2 / n - mean * mean;
    CHECK(std::fabs(mean) < 4.0 / std::sqrt(static_cast<double>(n)));
    CHECK(var == doctest::Approx(1.0).epsilon(0.03));
  }
}

TEST_CASE("counterexample: overcomplete summary separates the models") {
  const auto pair = bench::sufficiency_counterexample(bench::CounterexampleSummary::overcomplete);
  nd::Rng rng(41);
  const int n = 40000;
  double var_m0 = 0, var_m1 = 0, var_s0 = 0, var_s1 = 0;
  for (int i = 0; i < n; ++i) {
    nd::Rng sub_m = rng.substream(2 * i);
    nd::Rng sub_s = rng.substream(2 * i + 1);
    const auto tm = pair.well_specified.sample_prior(sub_m);
    const auto zm = pair.summarize(pair.well_specified.simulate(tm, 2, sub_m));
    const auto ts = pair.misspecified.sample_prior(sub_s);
    const auto zs = pair.summarize(pair.misspecified.simulate(ts, 2, sub_s));
    var_m0 += zm.at(0, 0) * zm.at(0, 0);
    var_m1 += zm.at(0, 1) * zm.at(0, 1);
    var_s0 += zs.at(0, 0) * zs.at(0, 0);
    var_s1 += zs.at(0, 1) * zs.at(0, 1);
  }
  // Under M both coordinates are standardized to variance 1; under M* the
  // coordinate variances split to (prior_var+1)/2.5 and (prior_var+3)/2.5.
  CHECK(var_m0 / n == doctest::Approx(1.0).epsilon(0.03));
  CHECK(var_m1 / n == doctest::Approx(1.0).epsilon(0.03));
  CHECK(var_s0 / n == doctest::Approx(0.6).epsilon(0.03));
  CHECK(var_s1 / n == doctest::Approx(1.4).epsilon(0.03));
}

TEST_CASE("counterexample: models differ in data space by mmd") {
  const auto pair = bench::sufficiency_counterexample(bench::CounterexampleSummary::minimal);
  nd::Rng rng(43);
  const std::size_t n = 600;
  auto draw = [&](const bench::GenerativeModel& model, std::uint64_t salt) {
    std::vector<double> rows(n * 2);
    for (std::size_t i = 0; i < n; ++i) {
      nd::Rng sub = rng.substream(salt * 100000 + i);
      const auto theta = model.sample_prior(sub);
      const auto x = model.simulate(theta, 2, sub);
      rows[2 * i] = x.at(0, 0);
      rows[2 * i + 1] = x.at(1, 0);
    }
    return nd::Array({n, 2}, std::move(rows));
  };
  const auto spec = mspec::mmd::KernelSpec::gaussian_for_dim(2);
  // Null scale: both samples from M.
  std::vector<double> null_draws;
  for (int r = 0; r < 60; ++r) {
    null_draws.push_back(
        mspec::mmd::mmd_biased(spec, draw(pair.well_specified, 2 * r), draw(pair.well_specified, 2 * r + 1))
            .mmd_sq);
  }
  const double q99 = mspec::stats::quantile(null_draws, 0.99);
  const double observed =
      mspec::mmd::mmd_biased(spec, draw(pair.well_specified, 9001), draw(pair.misspecified, 9002))
          .mmd_sq;
  CHECK(observed > q99);
}
