#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "mspec/nd/array.hpp"
#include "mspec/nd/rng.hpp"
#include "testutil.hpp"

using mspec::ContractError;
using mspec::DimensionError;
using mspec::NumericError;
namespace nd = mspec::nd;

TEST_CASE("matmul identity maps a vector to itself") {
  nd::Array eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  nd::Array v({3, 1}, {2.5, -1.0, 7.0});
  auto out = nd::matmul(eye, v);
  CHECK(out.at(0, 0) == 2.5);
  CHECK(out.at(1, 0) == -1.0);
  CHECK(out.at(2, 0) == 7.0);
}

TEST_CASE("matmul hand-checked product") {
  nd::Array a({2, 2}, {1, 2, 3, 4});
  nd::Array b({2, 1}, {1, 1});
  auto out = nd::matmul(a, b);
  CHECK(out.at(0, 0) == 3.0);
  CHECK(out.at(1, 0) == 7.0);
}

TEST_CASE("matmul zero times ones is zero") {
  auto out = nd::matmul(nd::Array::zeros({2, 3}), nd::Array::ones({3, 2}));
  for (double x : out.values()) CHECK(x == 0.0);
}

TEST_CASE("matmul rejects mismatched inner dimensions") {
  CHECK_THROWS_AS(nd::matmul(nd::Array::ones({2, 3}), nd::Array::ones({2, 2})), DimensionError);
}

TEST_CASE("backward of sum gives all-ones gradient") {
  auto w = nd::Array::leaf({2, 3}, {1, 2, 3, 4, 5, 6});
  auto g = nd::backward(nd::sum(w));
  const auto gw = g.grad(w);
  for (double x : gw.values()) CHECK(x == 1.0);
}

TEST_CASE("backward of x squared at 3 gives 6") {
  auto x = nd::Array::leaf({}, {3.0});
  auto g = nd::backward(nd::mul(x, x));
  CHECK(g.grad(x).value() == doctest::Approx(6.0).epsilon(1e-12));
}

TEST_CASE("backward of logsumexp at [0,0] gives [0.5,0.5]") {
  auto x = nd::Array::leaf({2}, {0.0, 0.0});
  auto g = nd::backward(nd::logsumexp(x));
  CHECK(g.grad(x).at(0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(g.grad(x).at(1) == doctest::Approx(0.5).epsilon(1e-12));

  // Same answer from the finite-difference oracle.
  auto f = [](const std::vector<double>& v) {
    return nd::logsumexp(nd::Array({2}, v)).value();
  };
  const auto fd = testutil::fd_gradient(f, {0.0, 0.0});
  CHECK(testutil::max_abs_diff(fd, {0.5, 0.5}) < 1e-8);
}

TEST_CASE("backward requires a scalar tracked loss") {
  auto w = nd::Array::leaf({2}, {1.0, 2.0});
  CHECK_THROWS_AS(nd::backward(nd::exp(w)), ContractError);
  CHECK_THROWS_AS(nd::backward(nd::Array::scalar(1.0)), ContractError);
}

TEST_CASE("gradient of a non-participating leaf is zero") {
  auto a = nd::Array::leaf({2}, {1.0, 2.0});
  auto b = nd::Array::leaf({2}, {3.0, 4.0});
  auto g = nd::backward(nd::sum(a));
  CHECK(g.grad(b).at(0) == 0.0);
  CHECK(g.grad(b).at(1) == 0.0);
}

TEST_CASE("elementwise values") {
  CHECK(nd::exp(nd::Array::scalar(0.0)).value() == 1.0);
  CHECK(nd::mean(nd::Array({3}, {1, 2, 3})).value() == 2.0);
  CHECK(nd::softplus(nd::Array::scalar(0.0)).value() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(nd::tanh(nd::Array::scalar(0.0)).value() == 0.0);
}

TEST_CASE("log and exp domain violations raise numeric errors") {
  CHECK_THROWS_AS(nd::log(nd::Array::scalar(-1.0)), NumericError);
  CHECK_THROWS_AS(nd::log(nd::Array::scalar(0.0)), NumericError);
  CHECK_THROWS_AS(nd::exp(nd::Array::scalar(1e4)), NumericError);
  CHECK_THROWS_AS(nd::div(nd::Array::scalar(1.0), nd::Array::scalar(0.0)), NumericError);
}

TEST_CASE("broadcast add of row vector and scalar") {
  nd::Array m({2, 3}, {1, 2, 3, 4, 5, 6});
  auto r = nd::add(m, nd::Array({3}, {10, 20, 30}));
  CHECK(r.at(0, 0) == 11.0);
  CHECK(r.at(1, 2) == 36.0);
  auto s = nd::mul(m, 2.0);
  CHECK(s.at(1, 1) == 10.0);
  auto c = nd::add(m, nd::Array({2, 1}, {100, 200}));
  CHECK(c.at(0, 2) == 103.0);
  CHECK(c.at(1, 0) == 204.0);
  CHECK_THROWS_AS(nd::add(m, nd::Array({4}, {1, 2, 3, 4})), DimensionError);
}

TEST_CASE("segment pooling semantics") {
  // Two segments of three rows each, one feature column.
  nd::Array a({6, 1}, {1, 2, 3, 10, 20, 60});
  auto m = nd::segment_mean(a, 2, 3);
  CHECK(m.at(0, 0) == doctest::Approx(2.0));
  CHECK(m.at(1, 0) == doctest::Approx(30.0));
  auto mx = nd::segment_max(a, 2, 3);
  CHECK(mx.at(0, 0) == 3.0);
  CHECK(mx.at(1, 0) == 60.0);
}

TEST_CASE("slice, concat, permute round trips") {
  nd::Array a({2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});
  auto left = nd::slice_cols(a, 0, 2);
  auto right = nd::slice_cols(a, 2, 4);
  auto back = nd::concat_cols(left, right);
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(back.values()[i] == a.values()[i]);

  std::vector<std::size_t> perm = {2, 0, 3, 1};
  auto p = nd::permute_cols(a, perm);
  std::vector<std::size_t> inv(4);
  for (std::size_t j = 0; j < 4; ++j) inv[perm[j]] = j;
  auto restored = nd::permute_cols(p, inv);
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(restored.values()[i] == a.values()[i]);
}

// Builds the same scalar loss from a flat parameter vector, used for
// finite-difference checks of every primitive in one composite graph.
namespace {

double composite_loss(const std::vector<double>& v, bool tracked, std::vector<double>* grad_out) {
  // Layout: 6 values for a 2x3 matrix, 6 for a 3x2 matrix, 3 for a row vector.
  nd::Array a = tracked ? nd::Array::leaf({2, 3}, {v.begin(), v.begin() + 6})
                        : nd::Array({2, 3}, {v.begin(), v.begin() + 6});
  nd::Array b = tracked ? nd::Array::leaf({3, 2}, {v.begin() + 6, v.begin() + 12})
                        : nd::Array({3, 2}, {v.begin() + 6, v.begin() + 12});
  nd::Array c = tracked ? nd::Array::leaf({2}, {v.begin() + 12, v.begin() + 14})
                        : nd::Array({2}, {v.begin() + 12, v.begin() + 14});

  auto m = nd::matmul(a, b);                       // 2x2
  auto t = nd::tanh(nd::add(m, c));                // row broadcast
  auto s = nd::softplus(nd::mul(t, t));
  auto e = nd::exp(nd::mul(s, 0.3));
  auto l = nd::log(nd::add(e, 1.5));
  auto row = nd::row_sum(nd::concat_cols(l, nd::slice_cols(t, 0, 1)));
  auto pooled = nd::segment_mean(nd::transpose(nd::reshape(row, {1, 2})), 1, 2);
  auto loss = nd::add(nd::mean(nd::div(row, 2.0)),
                      nd::add(nd::logsumexp(row), nd::sum(pooled)));
  if (tracked && grad_out) {
    auto g = nd::backward(loss);
    grad_out->clear();
    for (const auto* arr : {&a, &b, &c}) {
      auto gv = g.grad(*arr);
      grad_out->insert(grad_out->end(), gv.values().begin(), gv.values().end());
    }
  }
  return loss.value();
}

}  // namespace

TEST_CASE("composite graph gradients match central finite differences") {
  std::mt19937_64 gen(1234);
  std::normal_distribution<double> dist(0.0, 0.7);
  for (int rep = 0; rep < 10; ++rep) {
    std::vector<double> v(14);
    for (auto& x : v) x = dist(gen);
    std::vector<double> analytic;
    composite_loss(v, true, &analytic);
    const auto fd = testutil::fd_gradient(
        [](const std::vector<double>& w) { return composite_loss(w, false, nullptr); }, v);
    CHECK(testutil::max_rel_err(analytic, fd, 1e-4) < 1e-4);
  }
}

TEST_CASE("per-primitive gradients match finite differences") {
  std::mt19937_64 gen(99);
  std::normal_distribution<double> dist(0.0, 0.8);
  auto rnd = [&](std::size_t n) {
    std::vector<double> v(n);
    for (auto& x : v) x = dist(gen);
    return v;
  };

  struct Case {
    const char* name;
    std::function<nd::Array(const nd::Array&)> op;
  };
  const Case cases[] = {
      {"exp", [](const nd::Array& x) { return nd::exp(x); }},
      {"tanh", [](const nd::Array& x) { return nd::tanh(x); }},
      {"softplus", [](const nd::Array& x) { return nd::softplus(x); }},
      {"square", [](const nd::Array& x) { return nd::square(x); }},
      {"neg", [](const nd::Array& x) { return nd::neg(x); }},
      {"log(softplus)", [](const nd::Array& x) { return nd::log(nd::softplus(x)); }},
      {"segment_max", [](const nd::Array& x) { return nd::segment_max(nd::reshape(x, {6, 1}), 2, 3); }},
      {"row_sum", [](const nd::Array& x) { return nd::row_sum(nd::reshape(x, {2, 3})); }},
      {"tile", [](const nd::Array& x) { return nd::tile_rows(nd::slice_cols(nd::reshape(x, {1, 6}), 0, 3), 4); }},
  };
  for (const auto& c : cases) {
    CAPTURE(c.name);
    const auto v = rnd(6);
    auto leaf = nd::Array::leaf({6}, v);
    auto g = nd::backward(nd::mean(nd::square(c.op(leaf))));
    auto analytic = g.grad(leaf);
    const auto fd = testutil::fd_gradient(
        [&](const std::vector<double>& w) {
          return nd::mean(nd::square(c.op(nd::Array({6}, w)))).value();
        },
        v);
    std::vector<double> got(analytic.values().begin(), analytic.values().end());
    CHECK(testutil::max_rel_err(got, fd, 1e-4) < 1e-4);
  }
}

TEST_CASE("backward is deterministic") {
  auto run = [] {
    std::vector<double> v(14, 0.0);
    std::mt19937_64 gen(5);
    std::normal_distribution<double> dist;
    for (auto& x : v) x = dist(gen);
    std::vector<double> g;
    composite_loss(v, true, &g);
    return g;
  };
  const auto g1 = run();
  const auto g2 = run();
  REQUIRE(g1.size() == g2.size());
  for (std::size_t i = 0; i < g1.size(); ++i) CHECK(g1[i] == g2[i]);
}

TEST_CASE("rng substreams are deterministic and decorrelated") {
  nd::Rng root(42);
  auto a1 = root.substream(7);
  auto a2 = root.substream(7);
  for (int i = 0; i < 16; ++i) CHECK(a1.next_u64() == a2.next_u64());
  auto b = root.substream(8);
  int same = 0;
  auto a3 = root.substream(7);
  for (int i = 0; i < 64; ++i) same += (a3.next_u64() == b.next_u64());
  CHECK(same == 0);
}

TEST_CASE("rng distributions have the expected first moments") {
  nd::Rng rng(2024);
  const int n = 200000;
  double sn = 0, sg = 0, sb = 0, sp = 0;
  for (int i = 0; i < n; ++i) {
    sn += rng.normal();
    sg += rng.gamma(5.0, 0.5);
    sb += rng.beta(2.0, 5.0);
    sp += static_cast<double>(rng.poisson(3.5));
  }
  CHECK(std::fabs(sn / n) < 0.02);
  CHECK(sg / n == doctest::Approx(10.0).epsilon(0.02));
  CHECK(sb / n == doctest::Approx(2.0 / 7.0).epsilon(0.02));
  CHECK(sp / n == doctest::Approx(3.5).epsilon(0.02));
}

TEST_CASE("poisson handles large means by chunking") {
  nd::Rng rng(9);
  double s = 0;
  const int n = 2000;
  for (int i = 0; i < n; ++i) s += static_cast<double>(rng.poisson(833.0));
  CHECK(s / n == doctest::Approx(833.0).epsilon(0.01));
}
