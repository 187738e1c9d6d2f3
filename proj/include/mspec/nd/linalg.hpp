#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "mspec/errors.hpp"

// Small dense matrix helpers for the low-dimensional analytic computations
// (conjugate posterior updates, Wishart sampling, PCA). Not autodiff-aware.

namespace mspec::nd {

struct Mat {
  std::size_t n = 0;  // square
  std::vector<double> a;

  Mat() = default;
  explicit Mat(std::size_t dim) : n(dim), a(dim * dim, 0.0) {}

  static Mat identity(std::size_t dim) {
    Mat m(dim);
    for (std::size_t i = 0; i < dim; ++i) m(i, i) = 1.0;
    return m;
  }

  double& operator()(std::size_t i, std::size_t j) { return a[i * n + j]; }
  double operator()(std::size_t i, std::size_t j) const { return a[i * n + j]; }
};

inline Mat mat_mul(const Mat& x, const Mat& y) {
  Mat out(x.n);
  for (std::size_t i = 0; i < x.n; ++i)
    for (std::size_t k = 0; k < x.n; ++k) {
      const double v = x(i, k);
      for (std::size_t j = 0; j < x.n; ++j) out(i, j) += v * y(k, j);
    }
  return out;
}

inline Mat mat_transpose(const Mat& x) {
  Mat out(x.n);
  for (std::size_t i = 0; i < x.n; ++i)
    for (std::size_t j = 0; j < x.n; ++j) out(j, i) = x(i, j);
  return out;
}

// Lower Cholesky factor of a symmetric positive definite matrix.
// Throws NumericError when the matrix is not numerically PD.
inline Mat cholesky(const Mat& s) {
  Mat l(s.n);
  for (std::size_t i = 0; i < s.n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double sum = s(i, j);
      for (std::size_t k = 0; k < j; ++k) sum -= l(i, k) * l(j, k);
      if (i == j) {
        if (sum <= 0.0 || !std::isfinite(sum)) {
          throw NumericError("cholesky: matrix is not positive definite");
        }
        l(i, j) = std::sqrt(sum);
      } else {
        l(i, j) = sum / l(j, j);
      }
    }
  }
  return l;
}

inline bool is_positive_definite(const Mat& s) {
  try {
    cholesky(s);
    return true;
  } catch (const NumericError&) {
    return false;
  }
}

// Solves L y = b for lower-triangular L.
inline std::vector<double> forward_solve(const Mat& l, const std::vector<double>& b) {
  std::vector<double> y(l.n);
  for (std::size_t i = 0; i < l.n; ++i) {
    double s = b[i];
    for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * y[k];
    y[i] = s / l(i, i);
  }
  return y;
}

// Solves L^T x = y for lower-triangular L.
inline std::vector<double> backward_solve(const Mat& l, const std::vector<double>& y) {
  std::vector<double> x(l.n);
  for (std::size_t ii = l.n; ii-- > 0;) {
    double s = y[ii];
    for (std::size_t k = ii + 1; k < l.n; ++k) s -= l(k, ii) * x[k];
    x[ii] = s / l(ii, ii);
  }
  return x;
}

// Inverse of a symmetric positive definite matrix via Cholesky.
inline Mat spd_inverse(const Mat& s) {
  const Mat l = cholesky(s);
  Mat inv(s.n);
  std::vector<double> e(s.n, 0.0);
  for (std::size_t j = 0; j < s.n; ++j) {
    e.assign(s.n, 0.0);
    e[j] = 1.0;
    const auto col = backward_solve(l, forward_solve(l, e));
    for (std::size_t i = 0; i < s.n; ++i) inv(i, j) = col[i];
  }
  return inv;
}

inline double spd_log_det(const Mat& s) {
  const Mat l = cholesky(s);
  double ld = 0.0;
  for (std::size_t i = 0; i < s.n; ++i) ld += std::log(l(i, i));
  return 2.0 * ld;
}

// log|det| of a general square matrix via partial-pivot LU.
inline double lu_log_abs_det(Mat m) {
  double ld = 0.0;
  for (std::size_t col = 0; col < m.n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < m.n; ++r)
      if (std::fabs(m(r, col)) > std::fabs(m(piv, col))) piv = r;
    if (m(piv, col) == 0.0) throw NumericError("lu_log_abs_det: singular matrix");
    if (piv != col)
      for (std::size_t j = 0; j < m.n; ++j) std::swap(m(piv, j), m(col, j));
    ld += std::log(std::fabs(m(col, col)));
    for (std::size_t r = col + 1; r < m.n; ++r) {
      const double f = m(r, col) / m(col, col);
      for (std::size_t j = col; j < m.n; ++j) m(r, j) -= f * m(col, j);
    }
  }
  return ld;
}

// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
// Returns eigenvalues (descending) and matching orthonormal eigenvectors
// as matrix columns.
struct EigenSym {
  std::vector<double> values;
  Mat vectors;
};

inline EigenSym eigen_symmetric(Mat s) {
  const std::size_t n = s.n;
  Mat v = Mat::identity(n);
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) off += s(i, j) * s(i, j);
    if (off < 1e-24) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::fabs(s(p, q)) < 1e-300) continue;
        const double theta = (s(q, q) - s(p, p)) / (2.0 * s(p, q));
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double w = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double skp = s(k, p), skq = s(k, q);
          s(k, p) = c * skp - w * skq;
          s(k, q) = w * skp + c * skq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double spk = s(p, k), sqk = s(q, k);
          s(p, k) = c * spk - w * sqk;
          s(q, k) = w * spk + c * sqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - w * vkq;
          v(k, q) = w * vkp + c * vkq;
        }
      }
    }
  }
  EigenSym out;
  out.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) out.values[i] = s(i, i);
  // Sort descending, permuting vector columns alongside.
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(),
            [&](std::size_t a, std::size_t b) { return out.values[a] > out.values[b]; });
  EigenSym sorted;
  sorted.values.resize(n);
  sorted.vectors = Mat(n);
  for (std::size_t j = 0; j < n; ++j) {
    sorted.values[j] = out.values[idx[j]];
    for (std::size_t i = 0; i < n; ++i) sorted.vectors(i, j) = v(i, idx[j]);
  }
  return sorted;
}

}  // namespace mspec::nd
