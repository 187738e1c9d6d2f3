#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "mspec/nd/array.hpp"
#include "mspec/nd/linalg.hpp"

// Shared test oracles. These deliberately avoid the library's autodiff and
// estimator fast paths: gradients come from central finite differences and
// MMD values from a literal double loop, so the implementations under test
// are checked against genuinely independent computations.

namespace testutil {

// Central finite-difference gradient of f at x.
inline std::vector<double> fd_gradient(const std::function<double(const std::vector<double>&)>& f,
                                       std::vector<double> x, double h = 1e-5) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double x0 = x[i];
    x[i] = x0 + h;
    const double fp = f(x);
    x[i] = x0 - h;
    const double fm = f(x);
    x[i] = x0;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

// Relative error with an absolute floor for near-zero references.
inline double rel_err(double got, double want, double floor = 1e-8) {
  return std::fabs(got - want) / std::max(std::fabs(want), floor);
}

inline double max_rel_err(const std::vector<double>& got, const std::vector<double>& want,
                          double floor = 1e-6) {
  double m = 0.0;
  for (std::size_t i = 0; i < got.size(); ++i) m = std::max(m, rel_err(got[i], want[i], floor));
  return m;
}

// Literal O(M*N) double-loop biased MMD^2 with a caller-supplied kernel.
inline double naive_mmd_sq(const std::vector<std::vector<double>>& a,
                           const std::vector<std::vector<double>>& b,
                           const std::function<double(const std::vector<double>&,
                                                      const std::vector<double>&)>& kernel) {
  double kaa = 0.0, kbb = 0.0, kab = 0.0;
  for (const auto& x : a)
    for (const auto& y : a) kaa += kernel(x, y);
  for (const auto& x : b)
    for (const auto& y : b) kbb += kernel(x, y);
  for (const auto& x : a)
    for (const auto& y : b) kab += kernel(x, y);
  const double m = static_cast<double>(a.size());
  const double n = static_cast<double>(b.size());
  return kaa / (m * m) + kbb / (n * n) - 2.0 * kab / (m * n);
}

// Trapezoid-rule integral of f over [lo, hi] with n panels.
inline double trapezoid(const std::function<double(double)>& f, double lo, double hi, int n) {
  const double h = (hi - lo) / n;
  double s = 0.5 * (f(lo) + f(hi));
  for (int i = 1; i < n; ++i) s += f(lo + i * h);
  return s * h;
}

}  // namespace testutil
