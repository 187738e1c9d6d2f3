#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "mspec/errors.hpp"
#include "mspec/nd/array.hpp"

// Kernel two-sample machinery: multiscale Gaussian / inverse-multiquadratic
// kernel sums and the biased (V-statistic) MMD^2 estimator. The biased form
// keeps the diagonal terms, so singleton samples (M=1 or N=1) are valid.

namespace mspec::mmd {

enum class KernelFamily { gaussian, imq };

struct KernelSpec {
  KernelFamily family = KernelFamily::gaussian;
  // Gaussian: squared bandwidths sigma^2. IMQ: offsets C in C / (C + d^2).
  std::vector<double> scales;

  void validate() const {
    if (scales.empty()) throw ContractError("KernelSpec: scale set must be nonempty");
    for (double s : scales) {
      if (!(s > 0.0)) throw ContractError("KernelSpec: scales must be strictly positive");
    }
  }

  // Scale sets pinned to the summary dimension. The detection target is a
  // unit Gaussian in S dimensions, whose expected pairwise squared distance
  // is 2S, so bandwidths bracket that value.
  static KernelSpec gaussian_for_dim(std::size_t s) {
    const double base = static_cast<double>(s);
    return {KernelFamily::gaussian, {base / 4.0, base / 2.0, base, 2.0 * base, 4.0 * base}};
  }
  static KernelSpec imq_for_dim(std::size_t s) {
    const double base = 2.0 * static_cast<double>(s);
    return {KernelFamily::imq,
            {0.25 * base, 0.5 * base, 1.0 * base, 2.0 * base, 4.0 * base}};
  }

  std::string family_name() const { return family == KernelFamily::gaussian ? "gaussian" : "imq"; }
};

struct MmdReport {
  double mmd_sq = 0.0;
  double rmmd = 0.0;  // sqrt(max(mmd_sq, 0))
  std::size_t m = 0;
  std::size_t n = 0;
  KernelSpec kernel;
};

namespace detail {

inline double kernel_from_sq_dist(const KernelSpec& spec, double d2) {
  double k = 0.0;
  if (spec.family == KernelFamily::gaussian) {
    for (double s2 : spec.scales) k += std::exp(-d2 / (2.0 * s2));
  } else {
    for (double c : spec.scales) k += c / (c + d2);
  }
  return k;
}

inline double sq_dist(const double* a, const double* b, std::size_t dim) {
  double d2 = 0.0;
  for (std::size_t i = 0; i < dim; ++i) {
    const double d = a[i] - b[i];
    d2 += d * d;
  }
  return d2;
}

// Mean of the full kernel matrix between row sets, diagonal included.
inline double kernel_matrix_mean(const KernelSpec& spec, const nd::Array& a, const nd::Array& b) {
  const std::size_t m = a.shape()[0], n = b.shape()[0], dim = a.shape()[1];
  const double* ap = a.values().data();
  const double* bp = b.values().data();
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      row += kernel_from_sq_dist(spec, sq_dist(ap + i * dim, bp + j * dim, dim));
    }
    total += row;
  }
  return total / (static_cast<double>(m) * static_cast<double>(n));
}

inline void require_sample(const nd::Array& a, const char* which) {
  if (a.ndim() != 2) throw ContractError(std::string("mmd: ") + which + " must be a 2-d sample");
  if (a.shape()[0] == 0) throw ContractError(std::string("mmd: ") + which + " sample is empty");
}

// Canonical operand order for the cross term, so the summation order (and
// with it the floating-point result) is identical under argument swap.
inline bool canonical_before(const nd::Array& a, const nd::Array& b) {
  if (a.shape()[0] != b.shape()[0]) return a.shape()[0] < b.shape()[0];
  const auto av = a.values(), bv = b.values();
  return !std::lexicographical_compare(bv.begin(), bv.end(), av.begin(), av.end());
}

}  // namespace detail

inline double kernel_eval(const KernelSpec& spec, const nd::Array& a, const nd::Array& b) {
  spec.validate();
  if (a.numel() != b.numel()) throw DimensionError("kernel_eval: dimension mismatch");
  return detail::kernel_from_sq_dist(
      spec, detail::sq_dist(a.values().data(), b.values().data(), a.numel()));
}

// Biased MMD^2 between row samples A [M x S] and B [N x S].
inline MmdReport mmd_biased(const KernelSpec& spec, const nd::Array& a, const nd::Array& b) {
  spec.validate();
  detail::require_sample(a, "A");
  detail::require_sample(b, "B");
  if (a.shape()[1] != b.shape()[1]) throw DimensionError("mmd_biased: feature dims differ");
  MmdReport r;
  r.m = a.shape()[0];
  r.n = b.shape()[0];
  r.kernel = spec;
  const double cross = detail::canonical_before(a, b) ? detail::kernel_matrix_mean(spec, a, b)
                                                      : detail::kernel_matrix_mean(spec, b, a);
  r.mmd_sq =
      detail::kernel_matrix_mean(spec, a, a) + detail::kernel_matrix_mean(spec, b, b) - 2.0 * cross;
  r.rmmd = std::sqrt(std::max(r.mmd_sq, 0.0));
  return r;
}

// Reference sample with a precomputed self-term, for repeated MMD
// evaluations against the same (validation) sample. Null-distribution and
// power loops call this thousands of times; recomputing the reference
// kernel mean would dominate their cost.
class FixedReference {
 public:
  FixedReference(KernelSpec spec, nd::Array reference)
      : spec_(std::move(spec)), ref_(std::move(reference)) {
    spec_.validate();
    detail::require_sample(ref_, "reference");
    mean_ref_ref_ = detail::kernel_matrix_mean(spec_, ref_, ref_);
  }

  const KernelSpec& kernel() const { return spec_; }
  const nd::Array& sample() const { return ref_; }

  MmdReport mmd_to(const nd::Array& a) const {
    detail::require_sample(a, "A");
    if (a.shape()[1] != ref_.shape()[1]) throw DimensionError("FixedReference: feature dims differ");
    MmdReport r;
    r.m = a.shape()[0];
    r.n = ref_.shape()[0];
    r.kernel = spec_;
    r.mmd_sq = detail::kernel_matrix_mean(spec_, a, a) + mean_ref_ref_ -
               2.0 * detail::kernel_matrix_mean(spec_, a, ref_);
    r.rmmd = std::sqrt(std::max(r.mmd_sq, 0.0));
    return r;
  }

 private:
  KernelSpec spec_;
  nd::Array ref_;
  double mean_ref_ref_ = 0.0;
};

// Differentiable biased MMD^2 for use inside training losses. Built from
// autodiff primitives via the Gram-matrix identity
// d2(i,j) = |a_i|^2 + |b_j|^2 - 2 <a_i, b_j>.
inline nd::Array mmd_sq_tracked(const KernelSpec& spec, const nd::Array& a, const nd::Array& b) {
  spec.validate();
  detail::require_sample(a, "A");
  detail::require_sample(b, "B");
  if (a.shape()[1] != b.shape()[1]) throw DimensionError("mmd_sq_tracked: feature dims differ");

  auto pair_sq_dists = [](const nd::Array& x, const nd::Array& y) {
    auto xs = nd::row_sum(nd::square(x));                    // [m]
    auto ys = nd::row_sum(nd::square(y));                    // [n]
    auto cross = nd::matmul(x, nd::transpose(y));            // [m x n]
    auto d2 = nd::add(nd::sub(nd::mul(cross, -2.0),
                              nd::reshape(nd::neg(xs), {x.shape()[0], 1})),
                      nd::reshape(ys, {1, y.shape()[0]}));
    return d2;
  };
  auto kernel_mean = [&spec](const nd::Array& d2) {
    nd::Array acc = nd::Array::zeros(d2.shape());
    for (double s : spec.scales) {
      if (spec.family == KernelFamily::gaussian) {
        acc = nd::add(acc, nd::exp(nd::mul(d2, -1.0 / (2.0 * s))));
      } else {
        acc = nd::add(acc, nd::div(nd::Array::full(d2.shape(), s), nd::add(d2, s)));
      }
    }
    return nd::mean(acc);
  };
  auto kaa = kernel_mean(pair_sq_dists(a, a));
  auto kbb = kernel_mean(pair_sq_dists(b, b));
  auto kab = kernel_mean(pair_sq_dists(a, b));
  return nd::sub(nd::add(kaa, kbb), nd::mul(kab, 2.0));
}

}  // namespace mspec::mmd
