#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mspec/errors.hpp"

// Dense float64 arrays (row-major) with reverse-mode automatic
// differentiation. The graph is dynamic: every operation on a tracked
// input appends a node holding a backward closure; backward() replays
// the closures in reverse topological order. Single-threaded by design,
// which makes gradients bitwise deterministic.

namespace mspec::nd {

using Shape = std::vector<std::size_t>;

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;

// Gradient buffers keyed by node identity.
class GradStore {
 public:
  std::vector<double>& acc(const Node* n, std::size_t numel) {
    auto it = grads_.find(n);
    if (it == grads_.end()) {
      it = grads_.emplace(n, std::vector<double>(numel, 0.0)).first;
    }
    return it->second;
  }
  const std::vector<double>* find(const Node* n) const {
    auto it = grads_.find(n);
    return it == grads_.end() ? nullptr : &it->second;
  }

 private:
  std::unordered_map<const Node*, std::vector<double>> grads_;
};

struct Node {
  std::vector<NodePtr> parents;
  std::size_t numel = 0;
  // Accumulates parent gradients given this node's upstream gradient.
  // Null for leaves.
  std::function<void(const std::vector<double>&, GradStore&)> back;
};

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

}  // namespace detail

class Array {
 public:
  Array() = default;

  Array(Shape shape, std::vector<double> values) : shape_(std::move(shape)), v_(std::move(values)) {
    if (detail::shape_numel(shape_) != v_.size()) {
      throw DimensionError("Array: shape " + detail::shape_str(shape_) + " does not match " +
                           std::to_string(v_.size()) + " values");
    }
  }

  static Array scalar(double v) { return Array({}, {v}); }
  static Array zeros(Shape s) { return Array(std::move(s), {}, 0.0); }
  static Array ones(Shape s) { return Array(std::move(s), {}, 1.0); }
  static Array full(Shape s, double v) { return Array(std::move(s), {}, v); }

  // Fresh autograd leaf carrying the given values.
  static Array leaf(Shape shape, std::vector<double> values) {
    Array a(std::move(shape), std::move(values));
    a.node_ = std::make_shared<detail::Node>();
    a.node_->numel = a.numel();
    return a;
  }

  const Shape& shape() const { return shape_; }
  std::size_t ndim() const { return shape_.size(); }
  std::size_t numel() const { return v_.size(); }
  std::size_t rows() const { return shape_.empty() ? 1 : shape_[0]; }
  std::size_t cols() const {
    if (shape_.size() >= 2) return shape_[1];
    return shape_.size() == 1 ? shape_[0] : 1;
  }

  std::span<const double> values() const { return v_; }
  std::vector<double>& mutable_values() { return v_; }

  double value() const {
    if (v_.size() != 1) throw ContractError("Array::value: array is not scalar");
    return v_[0];
  }
  double at(std::size_t i) const { return v_.at(i); }
  double at(std::size_t i, std::size_t j) const {
    if (shape_.size() != 2) throw ContractError("Array::at(i,j) requires a 2-d array");
    return v_[i * shape_[1] + j];
  }

  bool tracked() const { return node_ != nullptr; }
  const detail::NodePtr& node() const { return node_; }

  // Same values, no autograd history.
  Array detached() const { return Array(shape_, v_); }

 private:
  Array(Shape shape, std::vector<double>, double fill)
      : shape_(std::move(shape)), v_(detail::shape_numel(shape_), fill) {}

  Shape shape_;
  std::vector<double> v_;
  detail::NodePtr node_;

  friend Array make_op_result(Shape, std::vector<double>, std::vector<detail::NodePtr>,
                              std::function<void(const std::vector<double>&, detail::GradStore&)>,
                              const char*);
};

namespace detail {

inline void check_finite(std::span<const double> v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw NumericError(std::string(op) + " produced a non-finite value");
    }
  }
}

}  // namespace detail

// Builds an op result, attaching an autograd node when any parent is tracked.
inline Array make_op_result(Shape shape, std::vector<double> values,
                            std::vector<detail::NodePtr> parents,
                            std::function<void(const std::vector<double>&, detail::GradStore&)> back,
                            const char* op_name) {
  detail::check_finite(values, op_name);
  Array out(std::move(shape), std::move(values));
  bool any_tracked = false;
  for (const auto& p : parents) {
    if (p) any_tracked = true;
  }
  if (any_tracked) {
    auto node = std::make_shared<detail::Node>();
    for (auto& p : parents) {
      if (p) node->parents.push_back(p);
    }
    node->numel = out.numel();
    node->back = std::move(back);
    out.node_ = node;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Raw matmul kernels (row-major).
// ---------------------------------------------------------------------------

namespace detail {

// C[m x n] = A[m x k] * B[k x n]
inline void mm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                  std::size_t n) {
  std::fill(c, c + m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      const double* brow = b + p * n;
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

// C[m x k] = A[m x n] * B[k x n]^T
inline void mm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
                  std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      const double* arow = a + i * n;
      const double* brow = b + j * n;
      double s = 0.0;
      for (std::size_t p = 0; p < n; ++p) s += arow[p] * brow[p];
      c[i * k + j] = s;
    }
  }
}

// C[k x n] = A[m x k]^T * B[m x n]
inline void mm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                  std::size_t n) {
  std::fill(c, c + k * n, 0.0);
  for (std::size_t p = 0; p < m; ++p) {
    const double* arow = a + p * k;
    const double* brow = b + p * n;
    for (std::size_t i = 0; i < k; ++i) {
      const double api = arow[i];
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += api * brow[j];
    }
  }
}

inline void require_2d(const Array& a, const char* op) {
  if (a.ndim() != 2) throw DimensionError(std::string(op) + ": expected a 2-d array");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Core operations.
// ---------------------------------------------------------------------------

inline Array matmul(const Array& a, const Array& b) {
  detail::require_2d(a, "matmul");
  detail::require_2d(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: inner dimensions " + detail::shape_str(a.shape()) + " vs " +
                         detail::shape_str(b.shape()));
  }
  const std::size_t n = b.shape()[1];
  std::vector<double> out(m * n);
  detail::mm_nn(a.values().data(), b.values().data(), out.data(), m, k, n);

  auto na = a.node().get();
  auto nb = b.node().get();
  std::vector<double> av, bv;
  if (a.tracked() || b.tracked()) {
    av.assign(a.values().begin(), a.values().end());
    bv.assign(b.values().begin(), b.values().end());
  }
  return make_op_result(
      {m, n}, std::move(out), {a.node(), b.node()},
      [na, nb, av = std::move(av), bv = std::move(bv), m, k, n](const std::vector<double>& g,
                                                                detail::GradStore& gs) {
        if (na) {
          auto& ga = gs.acc(na, m * k);
          std::vector<double> tmp(m * k);
          detail::mm_nt(g.data(), bv.data(), tmp.data(), m, n, k);
          for (std::size_t i = 0; i < tmp.size(); ++i) ga[i] += tmp[i];
        }
        if (nb) {
          auto& gb = gs.acc(nb, k * n);
          std::vector<double> tmp(k * n);
          detail::mm_tn(av.data(), g.data(), tmp.data(), m, k, n);
          for (std::size_t i = 0; i < tmp.size(); ++i) gb[i] += tmp[i];
        }
      },
      "matmul");
}

inline Array transpose(const Array& a) {
  detail::require_2d(a, "transpose");
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a.values()[i * c + j];
  auto na = a.node().get();
  return make_op_result(
      {c, r}, std::move(out), {a.node()},
      [na, r, c](const std::vector<double>& g, detail::GradStore& gs) {
        auto& ga = gs.acc(na, r * c);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
      },
      "transpose");
}

namespace detail {

enum class Bcast { same, scalar_rhs, row_rhs, col_rhs };

// Broadcasting is restricted to a trailing feature axis (row vector rhs),
// a leading batch axis (column rhs of shape [r,1] or [r]), and scalars.
inline Bcast bcast_kind(const Array& a, const Array& b, const char* op) {
  if (a.shape() == b.shape()) return Bcast::same;
  if (b.numel() == 1) return Bcast::scalar_rhs;
  if (a.ndim() == 2) {
    const std::size_t r = a.shape()[0], c = a.shape()[1];
    if ((b.ndim() == 1 && b.shape()[0] == c) ||
        (b.ndim() == 2 && b.shape()[0] == 1 && b.shape()[1] == c)) {
      return Bcast::row_rhs;
    }
    if ((b.ndim() == 1 && b.shape()[0] == r && r != c) ||
        (b.ndim() == 2 && b.shape()[0] == r && b.shape()[1] == 1)) {
      return Bcast::col_rhs;
    }
  }
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                       shape_str(b.shape()));
}

template <class Fwd, class BackA, class BackB>
Array broadcast_binary(const Array& a, const Array& b, const char* op, Fwd fwd, BackA back_a,
                       BackB back_b) {
  const Bcast kind = bcast_kind(a, b, op);
  const std::size_t n = a.numel();
  const std::size_t c = a.ndim() == 2 ? a.shape()[1] : a.numel();
  std::vector<double> out(n);
  auto bidx = [kind, c](std::size_t i) -> std::size_t {
    switch (kind) {
      case Bcast::same: return i;
      case Bcast::scalar_rhs: return 0;
      case Bcast::row_rhs: return i % c;
      case Bcast::col_rhs: return i / c;
    }
    return 0;
  };
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i], bv[bidx(i)]);

  auto na = a.node().get();
  auto nb = b.node().get();
  std::vector<double> sa, sb;
  if (na || nb) {
    sa.assign(av.begin(), av.end());
    sb.assign(bv.begin(), bv.end());
  }
  const std::size_t bn = b.numel();
  return make_op_result(
      a.shape(), std::move(out), {a.node(), b.node()},
      [na, nb, sa = std::move(sa), sb = std::move(sb), bidx, n, bn, back_a,
       back_b](const std::vector<double>& g, detail::GradStore& gs) {
        if (na) {
          auto& ga = gs.acc(na, n);
          for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * back_a(sa[i], sb[bidx(i)]);
        }
        if (nb) {
          auto& gb = gs.acc(nb, bn);
          for (std::size_t i = 0; i < n; ++i) gb[bidx(i)] += g[i] * back_b(sa[i], sb[bidx(i)]);
        }
      },
      op);
}

}  // namespace detail

inline Array add(const Array& a, const Array& b) {
  return detail::broadcast_binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Array sub(const Array& a, const Array& b) {
  return detail::broadcast_binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Array mul(const Array& a, const Array& b) {
  return detail::broadcast_binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Array div(const Array& a, const Array& b) {
  return detail::broadcast_binary(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

inline Array add(const Array& a, double s) { return add(a, Array::scalar(s)); }
inline Array sub(const Array& a, double s) { return sub(a, Array::scalar(s)); }
inline Array mul(const Array& a, double s) { return mul(a, Array::scalar(s)); }
inline Array div(const Array& a, double s) { return div(a, Array::scalar(s)); }

namespace detail {

// Local derivative computed from the saved input.
template <class Fwd, class Back>
Array unary_op(const Array& a, const char* op, Fwd fwd, Back back) {
  const std::size_t n = a.numel();
  std::vector<double> out(n);
  const auto av = a.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i]);
  auto na = a.node().get();
  std::vector<double> sa;
  if (na) sa.assign(av.begin(), av.end());
  return make_op_result(
      a.shape(), std::move(out), {a.node()},
      [na, sa = std::move(sa), n, back](const std::vector<double>& g, detail::GradStore& gs) {
        auto& ga = gs.acc(na, n);
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * back(sa[i]);
      },
      op);
}

// Local derivative computed from the saved output (avoids re-evaluating
// transcendentals in the backward pass).
template <class Fwd, class BackFromOut>
Array unary_op_from_output(const Array& a, const char* op, Fwd fwd, BackFromOut back) {
  const std::size_t n = a.numel();
  std::vector<double> out(n);
  const auto av = a.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i]);
  auto na = a.node().get();
  std::vector<double> so;
  if (na) so = out;
  return make_op_result(
      a.shape(), std::move(out), {a.node()},
      [na, so = std::move(so), n, back](const std::vector<double>& g, detail::GradStore& gs) {
        auto& ga = gs.acc(na, n);
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * back(so[i]);
      },
      op);
}

}  // namespace detail

inline Array neg(const Array& a) {
  return detail::unary_op(
      a, "neg", [](double x) { return -x; }, [](double) { return -1.0; });
}

inline Array exp(const Array& a) {
  return detail::unary_op_from_output(
      a, "exp", [](double x) { return std::exp(x); }, [](double y) { return y; });
}

inline Array log(const Array& a) {
  return detail::unary_op(
      a, "log", [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}

inline Array tanh(const Array& a) {
  return detail::unary_op_from_output(
      a, "tanh", [](double x) { return std::tanh(x); }, [](double y) { return 1.0 - y * y; });
}

// Numerically stable log(1 + e^x).
inline Array softplus(const Array& a) {
  auto sp = [](double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); };
  auto sig = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
  return detail::unary_op(a, "softplus", sp, sig);
}

inline Array square(const Array& a) {
  return detail::unary_op(
      a, "square", [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

inline Array sum(const Array& a) {
  double s = 0.0;
  for (double x : a.values()) s += x;
  auto na = a.node().get();
  const std::size_t n = a.numel();
  return make_op_result(
      {}, {s}, {a.node()},
      [na, n](const std::vector<double>& g, detail::GradStore& gs) {
        auto& ga = gs.acc(na, n);
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[0];
      },
      "sum");
}

inline Array mean(const Array& a) {
  if (a.numel() == 0) throw ContractError("mean: empty array");
  double s = 0.0;
  for (double x : a.values()) s += x;
  const std::size_t n = a.numel();
  auto na = a.node().get();
  return make_op_result(
      {}, {s / static_cast<double>(n)}, {a.node()},
      [na, n](const std::vector<double>& g, detail::GradStore& gs) {
        auto& ga = gs.acc(na, n);
        const double w = g[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) ga[i] += w;
      },
      "mean");
}

// Row-wise sum of a 2-d array: [r x c] -> [r].
inline Array row_sum(const Array& a) {
  detail::require_2d(a, "row_sum");
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  std::vector<double> out(r, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i] += a.values()[i * c + j];
  auto na = a.node().get();
  return make_op_result(
      {r}, std::move(out), {a.node()},
      [na, r, c](const std::vector<double>& g, detail::GradStore& gs) {
        auto& ga = gs.acc(na, r * c);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[i];
      },
      "row_sum");
}

inline Array logsumexp(const Array& a) {
  if (a.numel() == 0) throw ContractError("logsumexp: empty array");
  const auto av = a.values();
  const double m = *std::max_element(av.begin(), av.end());
  double s = 0.0;
  for (double x : av) s += std::exp(x - m);
  const double lse = m + std::log(s);
  auto na = a.node().get();
  const std::size_t n = a.numel();
  std::vector<double> sa(av.begin(), av.end());
  return make_op_result(
      {}, {lse}, {a.node()},
      [na, n, sa = std::move(sa), lse](const std::vector<double>& g, detail::GradStore& gs) {
        auto& ga = gs.acc(na, n);
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[0] * std::exp(sa[i] - lse);
      },
      "logsumexp");
}

// Columns [c0, c1) of a 2-d array.
inline Array slice_cols(const Array& a, std::size_t c0, std::size_t c1) {
  detail::require_2d(a, "slice_cols");
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  if (c0 > c1 || c1 > c) throw DimensionError("slice_cols: invalid column range");
  const std::size_t w = c1 - c0;
  std::vector<double> out(r * w);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = a.values()[i * c + c0 + j];
  auto na = a.node().get();
  return make_op_result(
      {r, w}, std::move(out), {a.node()},
      [na, r, c, c0, w](const std::vector<double>& g, detail::GradStore& gs) {
        auto& ga = gs.acc(na, r * c);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < w; ++j) ga[i * c + c0 + j] += g[i * w + j];
      },
      "slice_cols");
}

inline Array concat_cols(const Array& a, const Array& b) {
  detail::require_2d(a, "concat_cols");
  detail::require_2d(b, "concat_cols");
  if (a.shape()[0] != b.shape()[0]) throw DimensionError("concat_cols: row counts differ");
  const std::size_t r = a.shape()[0], ca = a.shape()[1], cb = b.shape()[1];
  std::vector<double> out(r * (ca + cb));
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < ca; ++j) out[i * (ca + cb) + j] = a.values()[i * ca + j];
    for (std::size_t j = 0; j < cb; ++j) out[i * (ca + cb) + ca + j] = b.values()[i * cb + j];
  }
  auto na = a.node().get();
  auto nb = b.node().get();
  return make_op_result(
      {r, ca + cb}, std::move(out), {a.node(), b.node()},
      [na, nb, r, ca, cb](const std::vector<double>& g, detail::GradStore& gs) {
        if (na) {
          auto& ga = gs.acc(na, r * ca);
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < ca; ++j) ga[i * ca + j] += g[i * (ca + cb) + j];
        }
        if (nb) {
          auto& gb = gs.acc(nb, r * cb);
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < cb; ++j) gb[i * cb + j] += g[i * (ca + cb) + ca + j];
        }
      },
      "concat_cols");
}

// out[:, j] = a[:, perm[j]]
inline Array permute_cols(const Array& a, const std::vector<std::size_t>& perm) {
  detail::require_2d(a, "permute_cols");
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  if (perm.size() != c) throw DimensionError("permute_cols: permutation size mismatch");
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = a.values()[i * c + perm[j]];
  auto na = a.node().get();
  return make_op_result(
      {r, c}, std::move(out), {a.node()},
      [na, r, c, perm](const std::vector<double>& g, detail::GradStore& gs) {
        auto& ga = gs.acc(na, r * c);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) ga[i * c + perm[j]] += g[i * c + j];
      },
      "permute_cols");
}

inline Array reshape(const Array& a, Shape s) {
  if (detail::shape_numel(s) != a.numel()) throw DimensionError("reshape: element count mismatch");
  auto na = a.node().get();
  const std::size_t n = a.numel();
  std::vector<double> out(a.values().begin(), a.values().end());
  return make_op_result(
      std::move(s), std::move(out), {a.node()},
      [na, n](const std::vector<double>& g, detail::GradStore& gs) {
        auto& ga = gs.acc(na, n);
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
      },
      "reshape");
}

// Repeats a length-c vector (or 1 x c matrix) as n identical rows.
inline Array tile_rows(const Array& a, std::size_t n) {
  const std::size_t c = a.numel();
  std::vector<double> out(n * c);
  for (std::size_t i = 0; i < n; ++i)
    std::copy(a.values().begin(), a.values().end(), out.begin() + static_cast<std::ptrdiff_t>(i * c));
  auto na = a.node().get();
  return make_op_result(
      {n, c}, std::move(out), {a.node()},
      [na, n, c](const std::vector<double>& g, detail::GradStore& gs) {
        auto& ga = gs.acc(na, c);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < c; ++j) ga[j] += g[i * c + j];
      },
      "tile_rows");
}

// Mean over each length-k segment of rows: [(n*k) x c] -> [n x c].
inline Array segment_mean(const Array& a, std::size_t n, std::size_t k) {
  detail::require_2d(a, "segment_mean");
  if (a.shape()[0] != n * k) throw DimensionError("segment_mean: rows != n*k");
  if (k == 0) throw ContractError("segment_mean: empty segments");
  const std::size_t c = a.shape()[1];
  std::vector<double> out(n * c, 0.0);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < c; ++j) out[s * c + j] += a.values()[(s * k + i) * c + j];
  const double inv_k = 1.0 / static_cast<double>(k);
  for (double& x : out) x *= inv_k;
  auto na = a.node().get();
  return make_op_result(
      {n, c}, std::move(out), {a.node()},
      [na, n, k, c, inv_k](const std::vector<double>& g, detail::GradStore& gs) {
        auto& ga = gs.acc(na, n * k * c);
        for (std::size_t s = 0; s < n; ++s)
          for (std::size_t i = 0; i < k; ++i)
            for (std::size_t j = 0; j < c; ++j) ga[(s * k + i) * c + j] += g[s * c + j] * inv_k;
      },
      "segment_mean");
}

// Max over each length-k segment of rows; gradient routes to the first argmax.
inline Array segment_max(const Array& a, std::size_t n, std::size_t k) {
  detail::require_2d(a, "segment_max");
  if (a.shape()[0] != n * k) throw DimensionError("segment_max: rows != n*k");
  if (k == 0) throw ContractError("segment_max: empty segments");
  const std::size_t c = a.shape()[1];
  std::vector<double> out(n * c);
  std::vector<std::size_t> arg(n * c);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t j = 0; j < c; ++j) {
      double best = a.values()[(s * k) * c + j];
      std::size_t bi = 0;
      for (std::size_t i = 1; i < k; ++i) {
        const double x = a.values()[(s * k + i) * c + j];
        if (x > best) {
          best = x;
          bi = i;
        }
      }
      out[s * c + j] = best;
      arg[s * c + j] = bi;
    }
  }
  auto na = a.node().get();
  return make_op_result(
      {n, c}, std::move(out), {a.node()},
      [na, n, k, c, arg = std::move(arg)](const std::vector<double>& g, detail::GradStore& gs) {
        auto& ga = gs.acc(na, n * k * c);
        for (std::size_t s = 0; s < n; ++s)
          for (std::size_t j = 0; j < c; ++j) ga[(s * k + arg[s * c + j]) * c + j] += g[s * c + j];
      },
      "segment_max");
}

// ---------------------------------------------------------------------------
// Backward pass.
// ---------------------------------------------------------------------------

// Gradients of one scalar loss with respect to every tracked leaf in its graph.
class Gradients {
 public:
  // Zero for tracked leaves that did not participate in the loss.
  Array grad(const Array& leaf) const {
    if (!leaf.tracked()) throw ContractError("Gradients::grad: array is not tracked");
    const auto* g = store_.find(leaf.node().get());
    if (!g) return Array::zeros(leaf.shape());
    return Array(leaf.shape(), *g);
  }

  std::span<const double> grad_values(const Array& leaf) const {
    if (!leaf.tracked()) throw ContractError("Gradients::grad: array is not tracked");
    const auto* g = store_.find(leaf.node().get());
    return g ? std::span<const double>(*g) : std::span<const double>();
  }

 private:
  friend Gradients backward(const Array&);
  detail::GradStore store_;
  std::vector<detail::NodePtr> order_;  // keeps nodes alive while grads are held
};

inline Gradients backward(const Array& loss) {
  if (loss.numel() != 1) throw ContractError("backward: loss must be scalar");
  if (!loss.tracked()) throw ContractError("backward: loss is not part of a tracked graph");

  // Iterative postorder DFS; reverse order is a valid reverse-topological order.
  Gradients result;
  auto& order = result.order_;
  std::unordered_map<const detail::Node*, bool> visited;
  std::vector<std::pair<detail::NodePtr, std::size_t>> stack;
  stack.emplace_back(loss.node(), 0);
  visited[loss.node().get()] = true;
  while (!stack.empty()) {
    auto& [node, next_child] = stack.back();
    if (next_child < node->parents.size()) {
      auto child = node->parents[next_child++];
      if (!visited[child.get()]) {
        visited[child.get()] = true;
        stack.emplace_back(std::move(child), 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  result.store_.acc(loss.node().get(), 1)[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const detail::Node* n = it->get();
    if (!n->back) continue;  // leaf
    const auto* g = result.store_.find(n);
    if (!g) continue;  // unreachable from the loss
    n->back(*g, result.store_);
  }
  return result;
}

}  // namespace mspec::nd
