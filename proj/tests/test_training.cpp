#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numbers>

#include "mspec/training.hpp"

namespace nd = mspec::nd;
namespace bench = mspec::bench;
namespace nets = mspec::nets;
namespace train = mspec::train;
using mspec::ConfigError;

namespace {

nets::NetworkHyper tiny_hyper(std::size_t s) {
  nets::NetworkHyper h;
  h.summary_dim = s;
  h.equivariant_widths = {8, 8};
  h.post_widths = {8};
  h.flow_hidden = {8, 8};
  return h;
}

train::TrainConfig tiny_config() {
  train::TrainConfig cfg;
  cfg.batch_size = 16;
  cfg.n_steps = 10;
  cfg.observations_per_dataset = 10;
  cfg.seed = 5;
  return cfg;
}

}  // namespace

TEST_CASE("gamma zero reduces the loss to the pure nll term") {
  auto model = bench::gaussian2d({});
  auto ax = train::build_approximator(model, tiny_hyper(2), 10, 1);
  auto cfg = tiny_config();
  cfg.gamma = 0.0;
  nd::Rng rng(2);
  const auto batch = bench::simulate_batch(model, 16, 10, rng);
  nd::Rng loss_rng(3);
  const auto parts = train::augmented_loss(batch, ax, cfg, loss_rng);
  CHECK(parts.total.value() == parts.nll);
  CHECK(parts.mmd_sq == 0.0);
}

TEST_CASE("identity flow nll equals the closed-form base density") {
  auto model = bench::gaussian2d({});
  auto ax = train::build_approximator(model, tiny_hyper(2), 10, 1);
  for (auto* p : ax.flow.params()) {
    for (auto& v : p->mutable_values()) v = 0.0;
  }
  auto cfg = tiny_config();
  cfg.gamma = 1.0;
  nd::Rng rng(7);
  const auto batch = bench::simulate_batch(model, 32, 10, rng);
  const nd::Array comparison({32, 2}, rng.normal_vector(64));
  const auto parts = train::augmented_loss(batch, ax, cfg, comparison);

  const auto theta_std = ax.theta_std.apply(batch.theta);
  double want_nll = 0.0;
  for (std::size_t i = 0; i < 32; ++i) {
    double norm_sq = 0.0;
    for (std::size_t d = 0; d < 2; ++d) norm_sq += theta_std.at(i, d) * theta_std.at(i, d);
    want_nll += std::log(2.0 * std::numbers::pi) + 0.5 * norm_sq;
  }
  want_nll /= 32.0;
  CHECK(parts.nll == doctest::Approx(want_nll).epsilon(1e-12));
  CHECK(parts.mmd_sq >= 0.0);
  CHECK(parts.mmd_sq < 1.5);  // H0-scale noise floor for B=32
  CHECK(parts.total.value() == doctest::Approx(parts.nll + parts.mmd_sq).epsilon(1e-12));
}

TEST_CASE("duplicated batch rows leave the loss unchanged") {
  auto model = bench::gaussian2d({});
  auto ax = train::build_approximator(model, tiny_hyper(2), 10, 1);
  auto cfg = tiny_config();
  nd::Rng rng(11);
  const auto batch = bench::simulate_batch(model, 8, 10, rng);

  // Duplicate every dataset (and parameter row).
  mspec::DatasetBatch doubled;
  doubled.n = 16;
  doubled.k = 10;
  doubled.d = 2;
  std::vector<double> x2, th2;
  for (std::size_t i = 0; i < 8; ++i) {
    for (int rep = 0; rep < 2; ++rep) {
      const auto xi = batch.dataset(i);
      x2.insert(x2.end(), xi.values().begin(), xi.values().end());
      th2.push_back(batch.theta.at(i, 0));
      th2.push_back(batch.theta.at(i, 1));
    }
  }
  doubled.x = nd::Array({160, 2}, std::move(x2));
  doubled.theta = nd::Array({16, 2}, std::move(th2));

  const nd::Array comparison({12, 2}, rng.normal_vector(24));
  const auto a = train::augmented_loss(batch, ax, cfg, comparison);
  const auto b = train::augmented_loss(doubled, ax, cfg, comparison);
  CHECK(a.total.value() == doctest::Approx(b.total.value()).epsilon(1e-12));
}

TEST_CASE("one gradient step decreases the loss on the same batch") {
  auto model = bench::gaussian2d({});
  auto ax = train::build_approximator(model, tiny_hyper(2), 10, 1);
  auto cfg = tiny_config();
  nd::Rng rng(13);
  const auto batch = bench::simulate_batch(model, 16, 10, rng);
  const nd::Array comparison({16, 2}, rng.normal_vector(32));

  auto params = ax.params();
  const auto before = train::augmented_loss(batch, ax, cfg, comparison);
  auto grads = nd::backward(before.total);
  const double lr = 1e-3;
  for (auto* p : params) {
    const auto g = grads.grad_values(*p);
    if (g.empty()) continue;
    auto& vals = p->mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i) vals[i] -= lr * g[i];
  }
  const auto after = train::augmented_loss(batch, ax, cfg, comparison);
  CHECK(after.total.value() < before.total.value());
}

TEST_CASE("training is deterministic in the seed") {
  auto run = [] {
    auto model = bench::gaussian2d({});
    auto ax = train::build_approximator(model, tiny_hyper(2), 10, 42);
    auto cfg = tiny_config();
    cfg.n_steps = 20;
    train::train(model, ax, cfg);
    std::vector<double> flat;
    for (auto* p : ax.params())
      flat.insert(flat.end(), p->values().begin(), p->values().end());
    return flat;
  };
  const auto w1 = run();
  const auto w2 = run();
  REQUIRE(w1.size() == w2.size());
  for (std::size_t i = 0; i < w1.size(); ++i) CHECK(w1[i] == w2[i]);
}

TEST_CASE("trace covers every step and resume continues the count") {
  auto model = bench::gaussian2d({});
  auto ax = train::build_approximator(model, tiny_hyper(2), 10, 3);
  auto cfg = tiny_config();
  const auto t1 = train::train(model, ax, cfg);
  REQUIRE(t1.size() == cfg.n_steps);
  for (std::size_t i = 0; i < t1.size(); ++i) {
    CHECK(t1[i].step == i);
    CHECK(std::isfinite(t1[i].loss));
    CHECK(std::isfinite(t1[i].grad_norm));
  }
  CHECK(ax.trained_steps == cfg.n_steps);
  const auto t2 = train::train(model, ax, cfg);
  CHECK(t2.front().step == cfg.n_steps);
  CHECK(t2.back().step == 2 * cfg.n_steps - 1);
}

TEST_CASE("training loss falls on a smoothed basis over a short run") {
  auto model = bench::gaussian2d({});
  auto ax = train::build_approximator(model, tiny_hyper(2), 10, 9);
  auto cfg = tiny_config();
  cfg.n_steps = 150;
  cfg.batch_size = 32;
  const auto trace = train::train(model, ax, cfg);
  double early = 0.0, late = 0.0;
  for (std::size_t i = 0; i < 30; ++i) early += trace[i].loss;
  for (std::size_t i = trace.size() - 30; i < trace.size(); ++i) late += trace[i].loss;
  CHECK(late < early);
}

TEST_CASE("config validation") {
  train::TrainConfig cfg;
  cfg.batch_size = 1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.n_steps = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.gamma = -0.5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("pooled-feature whitening yields near-isotropic features and persists invariance") {
  auto model = bench::gaussian2d({});
  auto hyper = tiny_hyper(2);
  hyper.whiten_pooled = true;
  auto ax = train::build_approximator(model, hyper, 10, 77);
  REQUIRE(ax.summary.has_pooled_whitener());

  // Whitened pooled features of fresh prior-predictive draws have roughly
  // unit variance in every coordinate.
  nd::Rng rng(78);
  const auto batch = bench::simulate_batch(model, 400, 10, rng);
  const auto x_std = ax.x_std.apply(batch.x);
  auto pooled = ax.summary.pooled_features(x_std, 400, 10);
  const std::size_t f = pooled.shape()[1];
  const nd::Array centered =
      nd::sub(pooled, nd::Array({f}, ax.summary.whitener_mean()));
  const auto white = nd::matmul(centered, ax.summary.whitener_matrix());
  for (std::size_t j = 0; j < f; ++j) {
    double s2 = 0.0;
    for (std::size_t i = 0; i < 400; ++i) s2 += white.at(i, j) * white.at(i, j);
    s2 /= 399.0;
    CHECK(s2 > 0.3);
    CHECK(s2 < 3.0);
  }

  // Permutation invariance survives whitening.
  const auto z1 = nets::summarize_flat(ax, batch.x, 400, 10);
  std::vector<double> shuffled(batch.x.values().begin(), batch.x.values().end());
  for (std::size_t i = 0; i < 400; ++i) {
    for (std::size_t c = 0; c < 2; ++c) {
      std::swap(shuffled[(i * 10 + 0) * 2 + c], shuffled[(i * 10 + 7) * 2 + c]);
    }
  }
  const auto z2 = nets::summarize_flat(ax, nd::Array({4000, 2}, std::move(shuffled)), 400, 10);
  for (std::size_t i = 0; i < z1.numel(); ++i)
    CHECK(std::fabs(z1.values()[i] - z2.values()[i]) < 1e-10);
}

TEST_CASE("validation summaries are deterministic with the expected shape") {
  auto model = bench::gaussian2d({});
  auto ax = train::build_approximator(model, tiny_hyper(3), 10, 21);
  nd::Rng stream(33);
  const auto z1 = train::make_validation_summaries(model, ax, 1, 10, stream);
  REQUIRE(z1.shape() == nd::Shape{1, 3});
  const auto z250 = train::make_validation_summaries(model, ax, 250, 10, stream);
  const auto z250b = train::make_validation_summaries(model, ax, 250, 10, stream);
  REQUIRE(z250.shape() == nd::Shape{250, 3});
  for (std::size_t i = 0; i < z250.numel(); ++i) {
    CHECK(std::isfinite(z250.values()[i]));
    CHECK(z250.values()[i] == z250b.values()[i]);
  }
  // The first chunk's rows do not depend on the total count.
  for (std::size_t i = 0; i < z1.numel(); ++i) CHECK(z1.values()[i] == z250.values()[i]);
}
