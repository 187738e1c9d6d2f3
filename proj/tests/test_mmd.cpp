#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "mspec/mmd.hpp"
#include "mspec/nd/rng.hpp"
#include "testutil.hpp"

namespace nd = mspec::nd;
namespace mmd = mspec::mmd;
using mspec::ContractError;

namespace {

mmd::KernelSpec single_gaussian(double s2) {
  return {mmd::KernelFamily::gaussian, {s2}};
}

nd::Array gaussian_sample(std::size_t n, std::size_t s, nd::Rng& rng) {
  return nd::Array({n, s}, rng.normal_vector(n * s));
}

std::vector<std::vector<double>> to_rows(const nd::Array& a) {
  std::vector<std::vector<double>> rows(a.shape()[0]);
  for (std::size_t i = 0; i < a.shape()[0]; ++i) {
    rows[i].assign(a.values().begin() + static_cast<std::ptrdiff_t>(i * a.shape()[1]),
                   a.values().begin() + static_cast<std::ptrdiff_t>((i + 1) * a.shape()[1]));
  }
  return rows;
}

double reference_kernel(const mmd::KernelSpec& spec, const std::vector<double>& x,
                        const std::vector<double>& y) {
  double d2 = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) d2 += (x[i] - y[i]) * (x[i] - y[i]);
  double k = 0.0;
  for (double s : spec.scales) {
    k += spec.family == mmd::KernelFamily::gaussian ? std::exp(-d2 / (2.0 * s)) : s / (s + d2);
  }
  return k;
}

}  // namespace

TEST_CASE("kernel at zero distance equals the number of scales") {
  mmd::KernelSpec spec{mmd::KernelFamily::gaussian, {0.5, 1.0, 2.0}};
  nd::Array a({2}, {0.3, -0.7});
  CHECK(mmd::kernel_eval(spec, a, a) == doctest::Approx(3.0).epsilon(1e-14));
}

TEST_CASE("gaussian kernel at squared distance 2 with unit bandwidth") {
  nd::Array a({2}, {0.0, 0.0});
  nd::Array b({2}, {1.0, 1.0});  // squared distance 2
  CHECK(mmd::kernel_eval(single_gaussian(1.0), a, b) ==
        doctest::Approx(0.36787944117144233).epsilon(1e-12));
}

TEST_CASE("imq kernel with unit offset at squared distance 1") {
  mmd::KernelSpec spec{mmd::KernelFamily::imq, {1.0}};
  nd::Array a({1}, {0.0});
  nd::Array b({1}, {1.0});
  CHECK(mmd::kernel_eval(spec, a, b) == doctest::Approx(0.5).epsilon(1e-14));
}

TEST_CASE("mmd of a sample against itself is exactly zero") {
  nd::Rng rng(11);
  auto a = gaussian_sample(37, 3, rng);
  const auto r = mmd::mmd_biased(mmd::KernelSpec::gaussian_for_dim(3), a, a);
  CHECK(r.mmd_sq == 0.0);
  CHECK(r.rmmd == 0.0);
}

TEST_CASE("hand-evaluated two-point mmd") {
  nd::Array a({1, 1}, {0.0});
  nd::Array b({1, 1}, {1.0});
  const auto r = mmd::mmd_biased(single_gaussian(1.0), a, b);
  // K_AA = 1, K_BB = 1, K_AB = e^{-1/2}.
  CHECK(r.mmd_sq == doctest::Approx(2.0 - 2.0 * std::exp(-0.5)).epsilon(1e-14));
  CHECK(r.mmd_sq == doctest::Approx(0.7869386805747332).epsilon(1e-12));
  CHECK(r.m == 1);
  CHECK(r.n == 1);
}

TEST_CASE("singleton samples are legal") {
  nd::Rng rng(3);
  auto a = gaussian_sample(1, 4, rng);
  auto b = gaussian_sample(50, 4, rng);
  const auto r = mmd::mmd_biased(mmd::KernelSpec::gaussian_for_dim(4), a, b);
  CHECK(std::isfinite(r.mmd_sq));
  CHECK(r.rmmd >= 0.0);
}

TEST_CASE("empty samples are rejected") {
  nd::Array empty({0, 2}, {});
  nd::Array b({1, 2}, {0.0, 0.0});
  CHECK_THROWS_AS(mmd::mmd_biased(mmd::KernelSpec::gaussian_for_dim(2), empty, b), ContractError);
}

TEST_CASE("mmd is bitwise symmetric") {
  nd::Rng rng(21);
  const auto spec = mmd::KernelSpec::gaussian_for_dim(3);
  for (int rep = 0; rep < 5; ++rep) {
    auto a = gaussian_sample(17 + rep, 3, rng);
    auto b = gaussian_sample(29, 3, rng);
    CHECK(mmd::mmd_biased(spec, a, b).mmd_sq == mmd::mmd_biased(spec, b, a).mmd_sq);
  }
  // Equal sample sizes as well.
  auto a = gaussian_sample(23, 3, rng);
  auto b = gaussian_sample(23, 3, rng);
  CHECK(mmd::mmd_biased(spec, a, b).mmd_sq == mmd::mmd_biased(spec, b, a).mmd_sq);
}

TEST_CASE("mmd_sq is nonnegative up to roundoff on random inputs") {
  nd::Rng rng(31);
  const auto spec = mmd::KernelSpec::gaussian_for_dim(2);
  for (int rep = 0; rep < 20; ++rep) {
    auto a = gaussian_sample(1 + rng.below(40), 2, rng);
    auto b = gaussian_sample(1 + rng.below(40), 2, rng);
    const auto r = mmd::mmd_biased(spec, a, b);
    CHECK(r.mmd_sq >= -1e-12);
    CHECK(r.rmmd * r.rmmd == doctest::Approx(std::max(r.mmd_sq, 0.0)).epsilon(1e-14));
  }
}

TEST_CASE("estimator matches the naive double loop") {
  nd::Rng rng(41);
  for (const auto family : {mmd::KernelFamily::gaussian, mmd::KernelFamily::imq}) {
    const auto spec = family == mmd::KernelFamily::gaussian ? mmd::KernelSpec::gaussian_for_dim(3)
                                                            : mmd::KernelSpec::imq_for_dim(3);
    for (int rep = 0; rep < 5; ++rep) {
      auto a = gaussian_sample(1 + rng.below(60), 3, rng);
      auto b = gaussian_sample(1 + rng.below(60), 3, rng);
      const double naive = testutil::naive_mmd_sq(
          to_rows(a), to_rows(b),
          [&](const std::vector<double>& x, const std::vector<double>& y) {
            return reference_kernel(spec, x, y);
          });
      CHECK(mmd::mmd_biased(spec, a, b).mmd_sq == doctest::Approx(naive).epsilon(1e-10));
    }
  }
}

TEST_CASE("tracked mmd agrees with the plain estimator") {
  nd::Rng rng(51);
  for (const auto family : {mmd::KernelFamily::gaussian, mmd::KernelFamily::imq}) {
    const auto spec = family == mmd::KernelFamily::gaussian ? mmd::KernelSpec::gaussian_for_dim(2)
                                                            : mmd::KernelSpec::imq_for_dim(2);
    auto a = gaussian_sample(25, 2, rng);
    auto b = gaussian_sample(30, 2, rng);
    CHECK(mmd::mmd_sq_tracked(spec, a, b).value() ==
          doctest::Approx(mmd::mmd_biased(spec, a, b).mmd_sq).epsilon(1e-10));
  }
}

TEST_CASE("gradient of tracked mmd matches finite differences") {
  nd::Rng rng(61);
  const auto spec = mmd::KernelSpec::gaussian_for_dim(2);
  const std::size_t m = 6, s = 2;
  auto b = gaussian_sample(9, s, rng);
  const auto a0 = rng.normal_vector(m * s);

  auto leaf = nd::Array::leaf({m, s}, a0);
  auto grads = nd::backward(mmd::mmd_sq_tracked(spec, leaf, b));
  auto analytic_arr = grads.grad(leaf);
  std::vector<double> analytic(analytic_arr.values().begin(), analytic_arr.values().end());

  const auto fd = testutil::fd_gradient(
      [&](const std::vector<double>& v) {
        return mmd::mmd_biased(spec, nd::Array({m, s}, v), b).mmd_sq;
      },
      a0);
  CHECK(testutil::max_rel_err(analytic, fd, 1e-4) < 1e-4);
}

TEST_CASE("null-distributed rmmd stays below the null quantile at the expected rate") {
  // Frozen-seed Monte Carlo: two 500-draw samples from the same unit
  // Gaussian should fall below the 95% null quantile in >= 93/100 trials.
  nd::Rng rng(71);
  const auto spec = mmd::KernelSpec::gaussian_for_dim(2);
  std::vector<double> null_draws;
  for (int r = 0; r < 199; ++r) {
    auto a = gaussian_sample(500, 2, rng);
    auto b = gaussian_sample(500, 2, rng);
    null_draws.push_back(mmd::mmd_biased(spec, a, b).rmmd);
  }
  std::sort(null_draws.begin(), null_draws.end());
  const double q95 = null_draws[static_cast<std::size_t>(0.95 * 199)];
  int below = 0;
  for (int t = 0; t < 100; ++t) {
    auto a = gaussian_sample(500, 2, rng);
    auto b = gaussian_sample(500, 2, rng);
    below += mmd::mmd_biased(spec, a, b).rmmd < q95;
  }
  CHECK(below >= 93);
}
