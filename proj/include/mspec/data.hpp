#pragma once

#include <cstddef>
#include <vector>

#include "mspec/errors.hpp"
#include "mspec/nd/array.hpp"

namespace mspec {

// A batch of n datasets, each with k exchangeable observations of dimension
// d, plus the parameter draws that generated them. Observations are stored
// flat, grouped by dataset: row (i*k + j) is observation j of dataset i.
struct DatasetBatch {
  std::size_t n = 0;
  std::size_t k = 0;
  std::size_t d = 0;
  nd::Array x;      // [(n*k) x d]
  nd::Array theta;  // [n x p]

  void validate() const {
    if (n == 0 || k == 0 || d == 0) throw ContractError("DatasetBatch: empty batch");
    if (x.ndim() != 2 || x.shape()[0] != n * k || x.shape()[1] != d)
      throw DimensionError("DatasetBatch: x shape mismatch");
    if (theta.ndim() != 2 || theta.shape()[0] != n)
      throw DimensionError("DatasetBatch: theta shape mismatch");
  }

  // Observations of dataset i as a [k x d] matrix.
  nd::Array dataset(std::size_t i) const {
    std::vector<double> rows(x.values().begin() + static_cast<std::ptrdiff_t>(i * k * d),
                             x.values().begin() + static_cast<std::ptrdiff_t>((i + 1) * k * d));
    return nd::Array({k, d}, std::move(rows));
  }
};

// Datasets whose observation counts may differ (e.g. files read back for
// diagnosis). Each entry is a [k_i x d] matrix.
using RaggedDatasets = std::vector<nd::Array>;

}  // namespace mspec
