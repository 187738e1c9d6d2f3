#pragma once

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mspec/analytics.hpp"
#include "mspec/data.hpp"
#include "mspec/detector.hpp"
#include "mspec/errors.hpp"
#include "mspec/training.hpp"
#include "mspec/util/sha1.hpp"

// File formats: CSV for bulk numeric tables, JSON for configs and reports.
// Doubles are written with round-trip precision so identical runs produce
// byte-identical files.

namespace mspec::io {

using json = nlohmann::json;

namespace detail {

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  return out;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) fields.push_back(field);
  return fields;
}

inline double parse_double(const std::string& s, const std::string& path, std::size_t line_no) {
  double v = 0.0;
  const auto* begin = s.data();
  const auto* end = s.data() + s.size();
  const auto res = std::from_chars(begin, end, v);
  if (res.ec != std::errc{} || res.ptr != end) {
    throw ConfigError(path + ":" + std::to_string(line_no) + ": cannot parse '" + s +
                      "' as a number");
  }
  return v;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Dataset CSV: header `dataset_id,obs_id,x0,...,x{D-1}`.
// ---------------------------------------------------------------------------

inline void write_datasets_csv(const std::string& path, const DatasetBatch& batch) {
  auto out = detail::open_out(path);
  out << "dataset_id,obs_id";
  for (std::size_t d = 0; d < batch.d; ++d) out << ",x" << d;
  out << "\n";
  for (std::size_t i = 0; i < batch.n; ++i) {
    for (std::size_t j = 0; j < batch.k; ++j) {
      out << i << "," << j;
      for (std::size_t d = 0; d < batch.d; ++d)
        out << "," << detail::fmt(batch.x.values()[(i * batch.k + j) * batch.d + d]);
      out << "\n";
    }
  }
}

// Parameter CSV: header `dataset_id,theta0,...`.
inline void write_params_csv(const std::string& path, const nd::Array& theta) {
  auto out = detail::open_out(path);
  const std::size_t p = theta.shape()[1];
  out << "dataset_id";
  for (std::size_t d = 0; d < p; ++d) out << ",theta" << d;
  out << "\n";
  for (std::size_t i = 0; i < theta.shape()[0]; ++i) {
    out << i;
    for (std::size_t d = 0; d < p; ++d) out << "," << detail::fmt(theta.at(i, d));
    out << "\n";
  }
}

// Reads a dataset CSV back; dataset sizes may differ (ragged).
inline RaggedDatasets read_datasets_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw ConfigError(path + ": empty file");
  const auto header = detail::split_csv_line(line);
  if (header.size() < 3 || header[0] != "dataset_id" || header[1] != "obs_id")
    throw ConfigError(path + ": expected header dataset_id,obs_id,x0,...");
  const std::size_t d = header.size() - 2;

  std::vector<std::vector<double>> per_dataset;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto fields = detail::split_csv_line(line);
    if (fields.size() != 2 + d)
      throw ConfigError(path + ":" + std::to_string(line_no) + ": wrong field count");
    const double idf = detail::parse_double(fields[0], path, line_no);
    const auto id = static_cast<std::size_t>(idf);
    if (id >= per_dataset.size()) per_dataset.resize(id + 1);
    for (std::size_t c = 0; c < d; ++c)
      per_dataset[id].push_back(detail::parse_double(fields[2 + c], path, line_no));
  }
  RaggedDatasets out;
  for (auto& rows : per_dataset) {
    if (rows.empty()) throw ConfigError(path + ": dataset ids must be dense");
    const std::size_t k = rows.size() / d;
    out.push_back(nd::Array({k, d}, std::move(rows)));
  }
  if (out.empty()) throw ConfigError(path + ": no data rows");
  return out;
}

// ---------------------------------------------------------------------------
// Summary matrices: header `z0,...,z{S-1}`.
// ---------------------------------------------------------------------------

inline void write_summaries_csv(const std::string& path, const nd::Array& z) {
  auto out = detail::open_out(path);
  const std::size_t s = z.shape()[1];
  for (std::size_t j = 0; j < s; ++j) out << (j ? "," : "") << "z" << j;
  out << "\n";
  for (std::size_t i = 0; i < z.shape()[0]; ++i) {
    for (std::size_t j = 0; j < s; ++j) out << (j ? "," : "") << detail::fmt(z.at(i, j));
    out << "\n";
  }
}

inline nd::Array read_summaries_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw ConfigError(path + ": empty file");
  const std::size_t s = detail::split_csv_line(line).size();
  std::vector<double> values;
  std::size_t rows = 0, line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto fields = detail::split_csv_line(line);
    if (fields.size() != s)
      throw ConfigError(path + ":" + std::to_string(line_no) + ": wrong field count");
    for (const auto& f : fields) values.push_back(detail::parse_double(f, path, line_no));
    ++rows;
  }
  return nd::Array({rows, s}, std::move(values));
}

// ---------------------------------------------------------------------------
// Training trace: header `step,nll,mmd_sq,loss,grad_norm,ms`.
// ---------------------------------------------------------------------------

inline void write_trace_csv(const std::string& path, const train::TrainTrace& trace,
                            bool append = false) {
  std::ofstream out(path, append ? std::ios::app : std::ios::out);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  if (!append) out << "step,nll,mmd_sq,loss,grad_norm,ms\n";
  for (const auto& row : trace) {
    out << row.step << "," << detail::fmt(row.nll) << "," << detail::fmt(row.mmd_sq) << ","
        << detail::fmt(row.loss) << "," << detail::fmt(row.grad_norm) << ","
        << detail::fmt(row.ms) << "\n";
  }
}

// Null-distribution draws, one mmd_sq per row.
inline void write_null_csv(const std::string& path, const detect::NullDistribution& null) {
  auto out = detail::open_out(path);
  out << "mmd_sq\n";
  for (double v : null.draws) out << detail::fmt(v) << "\n";
}

// Heatmap CSV: `axis1,axis2,median_rmmd,median_posterior_error,reject_rate,reps`.
inline void write_heatmap_csv(const std::string& path, const analytics::SeverityGrid& grid) {
  auto out = detail::open_out(path);
  out << "axis1,axis2,median_rmmd,median_posterior_error,reject_rate,reps\n";
  for (const auto& c : grid.cells) {
    out << detail::fmt(c.axis1) << "," << detail::fmt(c.axis2) << ","
        << (c.failed ? "failed" : detail::fmt(c.median_rmmd)) << ","
        << detail::fmt(c.median_posterior_error) << "," << detail::fmt(c.reject_rate) << ","
        << c.reps << "\n";
  }
}

// SBC raw ranks: `dataset_id,rank_theta0,...`.
inline void write_sbc_csv(const std::string& path, const analytics::SbcResult& sbc) {
  auto out = detail::open_out(path);
  out << "dataset_id";
  for (std::size_t d = 0; d < sbc.ranks.size(); ++d) out << ",rank_theta" << d;
  out << "\n";
  for (std::size_t i = 0; i < sbc.n; ++i) {
    out << i;
    for (std::size_t d = 0; d < sbc.ranks.size(); ++d) out << "," << sbc.ranks[d][i];
    out << "\n";
  }
}

// ---------------------------------------------------------------------------
// JSON reports.
// ---------------------------------------------------------------------------

inline json kernel_to_json(const mmd::KernelSpec& k) {
  return json{{"family", k.family_name()}, {"scales", k.scales}};
}

inline mmd::KernelSpec kernel_from_json(const json& j) {
  mmd::KernelSpec k;
  const std::string family = j.value("family", "gaussian");
  if (family == "gaussian") {
    k.family = mmd::KernelFamily::gaussian;
  } else if (family == "imq") {
    k.family = mmd::KernelFamily::imq;
  } else {
    throw ConfigError("unknown kernel family '" + family + "'");
  }
  k.scales = j.value("scales", std::vector<double>{});
  return k;
}

inline json test_result_to_json(const detect::MisspecTestResult& r, std::uint64_t seed) {
  return json{{"rmmd", r.observed.rmmd},
              {"mmd_sq", r.observed.mmd_sq},
              {"critical_rmmd", r.critical_rmmd},
              {"critical_mmd_sq", r.critical_mmd_sq},
              {"alpha", r.alpha},
              {"p_value", r.p_value},
              {"reject", r.reject},
              {"N", r.observed.m},
              {"M", r.observed.n},
              {"kernel", kernel_to_json(r.observed.kernel)},
              {"seed", seed}};
}

inline json pca_to_json(const analytics::PcaResult& p) {
  std::vector<std::vector<double>> components(p.components.n,
                                              std::vector<double>(p.components.n));
  for (std::size_t i = 0; i < p.components.n; ++i)
    for (std::size_t j = 0; j < p.components.n; ++j) components[i][j] = p.components(i, j);
  return json{{"explained_variance_ratio", p.explained_ratio},
              {"eigenvalues", p.eigenvalues},
              {"components", components},
              {"degenerate", p.degenerate}};
}

// Every artifact directory gets a manifest sufficient to reproduce it.
inline void write_manifest(const std::string& path, const std::string& command, const json& config,
                           std::uint64_t seed, const std::vector<std::string>& files) {
  json m;
  m["command"] = command;
  m["config"] = config;
  m["config_hash"] = util::Sha1::of(config.dump());
  m["seed"] = seed;
  m["tool"] = "mspec";
  m["format_version"] = 1;
  m["files"] = files;
  auto out = detail::open_out(path);
  out << m.dump(2) << "\n";
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read '" + path + "'");
  try {
    json j;
    in >> j;
    return j;
  } catch (const json::exception& e) {
    throw ConfigError(path + ": invalid JSON: " + e.what());
  }
}

}  // namespace mspec::io
