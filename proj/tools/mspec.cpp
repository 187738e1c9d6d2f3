// mspec: misspecification-aware amortized Bayesian inference.
//
// Trains a summary network + conditional normalizing flow under an
// MMD-augmented objective, then detects simulation gaps at test time via a
// sampling-based MMD hypothesis test in summary space.
//
// Exit codes: 0 ok / no rejection, 2 usage or config error,
//             3 misspecification rejected, 4 numerical failure.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "mspec/analytics.hpp"
#include "mspec/benchmarks.hpp"
#include "mspec/config.hpp"
#include "mspec/detector.hpp"
#include "mspec/io.hpp"
#include "mspec/model_card.hpp"
#include "mspec/training.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace mspec;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitReject = 3;
constexpr int kExitNumeric = 4;

std::uint64_t apply_seed_override(std::uint64_t seed) {
  if (const char* env = std::getenv("MSPEC_SEED")) {
    try {
      return std::stoull(env);
    } catch (const std::exception&) {
      throw ConfigError("MSPEC_SEED is not a valid integer");
    }
  }
  return seed;
}

void write_json_file(const std::string& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  out << j.dump(2) << "\n";
}

mmd::KernelSpec kernel_for(const std::string& family, std::size_t summary_dim) {
  if (family == "gaussian") return mmd::KernelSpec::gaussian_for_dim(summary_dim);
  if (family == "imq") return mmd::KernelSpec::imq_for_dim(summary_dim);
  throw ConfigError("unknown kernel family '" + family + "'");
}

// Null-distribution source whose simulated datasets match the observed
// dataset sizes one for one.
detect::SummarySource matched_size_source(const bench::GenerativeModel& model,
                                          const nets::Approximator& ax,
                                          std::vector<std::size_t> sizes) {
  return [&model, &ax, sizes = std::move(sizes)](std::size_t count, const nd::Rng& stream) {
    std::vector<double> rows;
    rows.reserve(count * ax.summary_dim);
    for (std::size_t i = 0; i < count; ++i) {
      nd::Rng sub = stream.substream(i);
      const std::size_t k = sizes[i % sizes.size()];
      const auto theta = model.sample_prior(sub);
      const auto x = model.simulate(theta, k, sub);
      const auto z = nets::summarize_flat(ax, x, 1, k);
      rows.insert(rows.end(), z.values().begin(), z.values().end());
    }
    return nd::Array({count, ax.summary_dim}, std::move(rows));
  };
}

analytics::AxisSpec parse_axis(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("axis must look like name=v1,v2,... (got '" + text + "')");
  analytics::AxisSpec axis;
  axis.name = text.substr(0, eq);
  std::istringstream ss(text.substr(eq + 1));
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      axis.values.push_back(std::stod(tok));
    } catch (const std::exception&) {
      throw ConfigError("axis value '" + tok + "' is not a number");
    }
  }
  if (axis.values.empty()) throw ConfigError("axis '" + axis.name + "' has no values");
  return axis;
}

std::string sibling_path(const std::string& card_path, const std::string& name) {
  return (fs::path(card_path).parent_path() / name).string();
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

struct SimulateArgs {
  std::string config_path;
  std::size_t n = 100;
  std::optional<std::size_t> k;
  std::string out_dir = "simulated";
};

int cmd_simulate(const SimulateArgs& args) {
  auto cfg = config::load(args.config_path);
  cfg.seed = apply_seed_override(cfg.seed);
  const auto model = bench::make_model(cfg.model_name, cfg.misspec);
  const std::size_t k = args.k.value_or(cfg.observations_per_dataset);

  fs::create_directories(args.out_dir);
  const auto batch = bench::simulate_batch(model, args.n, k, nd::Rng(cfg.seed));
  const auto data_path = (fs::path(args.out_dir) / "data.csv").string();
  const auto params_path = (fs::path(args.out_dir) / "params.csv").string();
  io::write_datasets_csv(data_path, batch);
  io::write_params_csv(params_path, batch.theta);
  io::write_manifest((fs::path(args.out_dir) / "manifest.json").string(), "simulate",
                     json{{"config", io::read_json_file(args.config_path)},
                          {"n", args.n},
                          {"k", k}},
                     cfg.seed, {"data.csv", "params.csv"});
  std::cout << "wrote " << args.n << " datasets (" << args.n * k << " rows) to " << args.out_dir
            << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config_path;
  std::string out_dir = "run";
  std::string resume_card;
};

int cmd_train(const TrainArgs& args) {
  auto cfg = config::load(args.config_path);
  cfg.seed = apply_seed_override(cfg.seed);
  cfg.training.seed = cfg.seed;
  const auto model = bench::make_model(cfg.model_name, cfg.misspec);

  card::ModelCard mc;
  if (!args.resume_card.empty()) {
    mc = card::load(args.resume_card);
    if (mc.ax.model_name != cfg.model_name)
      throw ConfigError("resume: card was trained on model '" + mc.ax.model_name + "'");
  } else {
    mc.ax = train::build_approximator(model, cfg.network, cfg.observations_per_dataset, cfg.seed);
    mc.model_misspec = cfg.misspec;
  }

  std::cout << "training " << cfg.model_name << " for " << cfg.training.n_steps << " steps (gamma="
            << cfg.training.gamma << ", batch=" << cfg.training.batch_size << ")\n";
  const auto trace = train::train(model, mc.ax, cfg.training);

  fs::create_directories(args.out_dir);
  const auto inference = nets::detached_copy(mc.ax);
  const auto validation = train::make_validation_summaries(
      model, inference, cfg.m_validation, cfg.observations_per_dataset,
      nd::Rng(cfg.seed).substream(9001));

  const auto card_path = (fs::path(args.out_dir) / "model_card.json").string();
  card::save(mc, card_path);
  io::write_summaries_csv((fs::path(args.out_dir) / "validation_z.csv").string(), validation);
  io::write_trace_csv((fs::path(args.out_dir) / "trace.csv").string(), trace);
  io::write_manifest((fs::path(args.out_dir) / "manifest.json").string(), "train",
                     io::read_json_file(args.config_path), cfg.seed,
                     {"model_card.json", "validation_z.csv", "trace.csv"});
  std::cout << "final loss " << trace.back().loss << " after step " << trace.back().step
            << "; artifacts in " << args.out_dir << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// diagnose
// ---------------------------------------------------------------------------

struct DiagnoseArgs {
  std::string card_path;
  std::string data_path;
  std::string validation_path;
  std::string out_dir;
  double alpha = 0.05;
  std::size_t null_repetitions = 1000;
  std::string kernel_family = "gaussian";
  bool write_null = false;
  std::uint64_t seed = 7;
  std::size_t workers = 1;
};

int cmd_diagnose(const DiagnoseArgs& args) {
  const auto mc = card::load(args.card_path);
  const auto ax = nets::detached_copy(mc.ax);
  const auto model = card::training_model(mc);
  const auto seed = apply_seed_override(args.seed);

  const auto observed = io::read_datasets_csv(args.data_path);
  const auto validation_path =
      args.validation_path.empty() ? sibling_path(args.card_path, "validation_z.csv")
                                   : args.validation_path;
  const auto validation = io::read_summaries_csv(validation_path);
  if (validation.shape()[1] != ax.summary_dim)
    throw ConfigError("validation summaries do not match the model card summary dimension");

  const auto kernel = kernel_for(args.kernel_family, ax.summary_dim);
  std::vector<double> zrows;
  zrows.reserve(observed.size() * ax.summary_dim);
  for (const auto& x : observed) {
    const auto z = nets::summarize_one(ax, x);
    zrows.insert(zrows.end(), z.values().begin(), z.values().end());
  }
  const nd::Array observed_z({observed.size(), ax.summary_dim}, std::move(zrows));
  const auto report = detect::diagnose(kernel, observed_z, validation);

  std::vector<std::size_t> sizes;
  sizes.reserve(observed.size());
  for (const auto& x : observed) sizes.push_back(x.shape()[0]);
  const auto null =
      detect::estimate_null(matched_size_source(model, ax, sizes), validation, observed.size(),
                            args.null_repetitions, kernel, seed, args.workers);
  const auto result = detect::test(report, null, args.alpha);

  json out = io::test_result_to_json(result, seed);
  std::cout << out.dump(2) << "\n";
  if (!args.out_dir.empty()) {
    fs::create_directories(args.out_dir);
    write_json_file((fs::path(args.out_dir) / "report.json").string(), out);
    // The observed summaries accompany every report, so a rejection can be
    // audited against the validation summary sample.
    io::write_summaries_csv((fs::path(args.out_dir) / "observed_z.csv").string(), observed_z);
    std::vector<std::string> files{"report.json", "observed_z.csv"};
    if (args.write_null) {
      io::write_null_csv((fs::path(args.out_dir) / "null.csv").string(), null);
      files.push_back("null.csv");
    }
    io::write_manifest((fs::path(args.out_dir) / "manifest.json").string(), "diagnose",
                       json{{"card", args.card_path},
                            {"data", args.data_path},
                            {"alpha", args.alpha},
                            {"null_repetitions", args.null_repetitions},
                            {"kernel", args.kernel_family}},
                       seed, files);
  }
  return result.reject ? kExitReject : kExitOk;
}

// ---------------------------------------------------------------------------
// power
// ---------------------------------------------------------------------------

struct PowerArgs {
  std::string card_path;
  std::string alt_config_path;
  std::string validation_path;
  std::string out_path;
  std::size_t n = 100;
  std::size_t trials = 200;
  double alpha = 0.05;
  std::size_t null_repetitions = 1000;
  std::string kernel_family = "gaussian";
  std::uint64_t seed = 11;
  std::size_t workers = 1;
};

int cmd_power(const PowerArgs& args) {
  const auto mc = card::load(args.card_path);
  const auto ax = nets::detached_copy(mc.ax);
  const auto model = card::training_model(mc);
  const auto alt_cfg = config::load(args.alt_config_path);
  const auto alt_model = bench::make_model(alt_cfg.model_name, alt_cfg.misspec);
  if (alt_model.data_dim != ax.data_dim)
    throw ConfigError("power: alternative model data dimension mismatch");
  const auto seed = apply_seed_override(args.seed);

  const auto validation_path =
      args.validation_path.empty() ? sibling_path(args.card_path, "validation_z.csv")
                                   : args.validation_path;
  const auto validation = io::read_summaries_csv(validation_path);
  const auto kernel = kernel_for(args.kernel_family, ax.summary_dim);

  const std::size_t k = mc.ax.train_k;
  const auto null = detect::estimate_null(detect::simulation_summary_source(model, ax, k),
                                          validation, args.n, args.null_repetitions, kernel, seed,
                                          args.workers);
  const double pw = detect::power(detect::simulation_summary_source(alt_model, ax, k), validation,
                                  null, args.alpha, args.trials, seed + 1, args.workers);
  json out{{"power", pw},
           {"alpha", args.alpha},
           {"n", args.n},
           {"trials", args.trials},
           {"critical_rmmd", std::sqrt(std::max(null.critical_mmd_sq(args.alpha), 0.0))},
           {"alternative", alt_cfg.model_name},
           {"variant", bench::variant_name(alt_cfg.misspec.variant)},
           {"seed", seed}};
  std::cout << out.dump(2) << "\n";
  if (!args.out_path.empty()) write_json_file(args.out_path, out);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

struct SweepArgs {
  std::string card_path;
  std::string validation_path;
  std::string axis1;
  std::string axis2;
  std::string out_path = "heatmap.csv";
  std::size_t n_obs = 100;
  std::size_t reps = 20;
  double alpha = 0.05;
  std::size_t null_repetitions = 500;
  std::string kernel_family = "gaussian";
  std::uint64_t seed = 13;
  std::size_t workers = 1;
};

int cmd_sweep(const SweepArgs& args) {
  const auto mc = card::load(args.card_path);
  const auto ax = nets::detached_copy(mc.ax);
  const auto model = card::training_model(mc);
  const auto seed = apply_seed_override(args.seed);

  const auto validation_path =
      args.validation_path.empty() ? sibling_path(args.card_path, "validation_z.csv")
                                   : args.validation_path;
  const auto validation = io::read_summaries_csv(validation_path);
  const auto kernel = kernel_for(args.kernel_family, ax.summary_dim);
  const std::size_t k = mc.ax.train_k;

  const auto axis1 = parse_axis(args.axis1);
  const auto axis2 = args.axis2.empty() ? analytics::AxisSpec{"unused", {0.0}}
                                        : parse_axis(args.axis2);

  const auto null = detect::estimate_null(detect::simulation_summary_source(model, ax, k),
                                          validation, args.n_obs, args.null_repetitions, kernel,
                                          seed, args.workers);

  const std::string model_name = mc.ax.model_name;
  analytics::ModelFactory factory = [&](const std::map<std::string, double>& cell) {
    return bench::make_model(model_name,
                             config::misspec_for_cell(cell, ax.param_dim, model_name));
  };
  analytics::AnalyticPosteriorFn analytic;
  if (model_name == "gaussian2d") {
    analytic = [](const nd::Array& data) { return bench::gaussian2d_posterior(data); };
  }

  analytics::SweepConfig scfg;
  scfg.n_obs = args.n_obs;
  scfg.reps = args.reps;
  scfg.k = k;
  scfg.alpha = args.alpha;
  scfg.seed = seed;
  const auto grid = analytics::severity_sweep(factory, ax, null, validation, axis1, axis2, scfg,
                                              analytic);
  io::write_heatmap_csv(args.out_path, grid);
  std::cout << "wrote " << grid.cells.size() << " cells to " << args.out_path << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// sbc
// ---------------------------------------------------------------------------

struct SbcArgs {
  std::string card_path;
  std::string out_path = "sbc_ranks.csv";
  std::size_t n = 200;
  std::size_t l = 99;
  std::uint64_t seed = 17;
};

int cmd_sbc(const SbcArgs& args) {
  const auto mc = card::load(args.card_path);
  const auto ax = nets::detached_copy(mc.ax);
  const auto model = card::training_model(mc);
  const auto seed = apply_seed_override(args.seed);
  const auto result = analytics::sbc(model, analytics::approximator_sampler(ax), args.n, args.l,
                                     mc.ax.train_k, nd::Rng(seed));
  io::write_sbc_csv(args.out_path, result);
  json pvals = json::array();
  for (double p : result.chi_squared_pvalues()) pvals.push_back(p);
  std::cout << json{{"chi_squared_pvalues", pvals}, {"n", args.n}, {"l", args.l}}.dump(2) << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// pca
// ---------------------------------------------------------------------------

struct PcaArgs {
  std::string card_path;
  std::string summaries_path;
  std::string out_path = "pca.json";
  std::size_t m = 1000;
  std::uint64_t seed = 19;
};

int cmd_pca(const PcaArgs& args) {
  nd::Array summaries;
  if (!args.summaries_path.empty()) {
    summaries = io::read_summaries_csv(args.summaries_path);
  } else {
    const auto mc = card::load(args.card_path);
    const auto ax = nets::detached_copy(mc.ax);
    const auto model = card::training_model(mc);
    summaries = train::make_validation_summaries(model, ax, args.m, mc.ax.train_k,
                                                 nd::Rng(apply_seed_override(args.seed)));
  }
  const auto result = analytics::pca(summaries);
  const auto out = io::pca_to_json(result);
  write_json_file(args.out_path, out);
  double cum = 0.0;
  std::size_t needed = 0;
  for (double r : result.explained_ratio) {
    cum += r;
    ++needed;
    if (cum >= 0.95) break;
  }
  std::cout << "wrote " << args.out_path << "; " << needed
            << " components explain 95% of summary variance\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"misspecification-aware amortized Bayesian inference"};
  app.require_subcommand(1);

  std::function<int()> action;

  auto* schema_cmd = app.add_subcommand("schema", "print the run-config JSON schema");
  schema_cmd->callback([&] {
    action = [] {
      std::cout << config::schema().dump(2) << "\n";
      return kExitOk;
    };
  });

  SimulateArgs sim;
  auto* sim_cmd = app.add_subcommand("simulate", "simulate datasets to CSV");
  sim_cmd->add_option("--config", sim.config_path, "run config JSON")->required();
  sim_cmd->add_option("--n", sim.n, "number of datasets");
  sim_cmd->add_option("--k", sim.k, "observations per dataset (default: config)");
  sim_cmd->add_option("--out", sim.out_dir, "output directory");
  sim_cmd->callback([&] { action = [&] { return cmd_simulate(sim); }; });

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "train the amortized approximator");
  train_cmd->add_option("--config", tr.config_path, "run config JSON")->required();
  train_cmd->add_option("--out", tr.out_dir, "output directory");
  train_cmd->add_option("--resume", tr.resume_card, "model card to continue training from");
  train_cmd->callback([&] { action = [&] { return cmd_train(tr); }; });

  DiagnoseArgs dg;
  auto* diag_cmd = app.add_subcommand("diagnose", "misspecification test on observed data");
  diag_cmd->add_option("--card", dg.card_path, "model card JSON")->required();
  diag_cmd->add_option("--data", dg.data_path, "observed datasets CSV")->required();
  diag_cmd->add_option("--validation", dg.validation_path, "validation summaries CSV");
  diag_cmd->add_option("--alpha", dg.alpha, "type I error level");
  diag_cmd->add_option("--null-r", dg.null_repetitions, "null-distribution repetitions");
  diag_cmd->add_option("--kernel", dg.kernel_family, "kernel family (gaussian|imq)");
  diag_cmd->add_option("--out", dg.out_dir, "artifact directory for report.json");
  diag_cmd->add_flag("--write-null", dg.write_null, "also write null.csv");
  diag_cmd->add_option("--seed", dg.seed, "seed for the null estimation");
  diag_cmd->add_option("--workers", dg.workers, "simulator parallelism (default 1)");
  diag_cmd->callback([&] { action = [&] { return cmd_diagnose(dg); }; });

  PowerArgs pw;
  auto* power_cmd = app.add_subcommand("power", "test power against an alternative model");
  power_cmd->add_option("--card", pw.card_path, "model card JSON")->required();
  power_cmd->add_option("--alt-config", pw.alt_config_path, "config of the alternative model")
      ->required();
  power_cmd->add_option("--validation", pw.validation_path, "validation summaries CSV");
  power_cmd->add_option("--n", pw.n, "observed datasets per trial");
  power_cmd->add_option("--trials", pw.trials, "number of trials");
  power_cmd->add_option("--alpha", pw.alpha, "type I error level");
  power_cmd->add_option("--null-r", pw.null_repetitions, "null repetitions");
  power_cmd->add_option("--kernel", pw.kernel_family, "kernel family");
  power_cmd->add_option("--out", pw.out_path, "output JSON path");
  power_cmd->add_option("--seed", pw.seed, "seed");
  power_cmd->add_option("--workers", pw.workers, "simulator parallelism");
  power_cmd->callback([&] { action = [&] { return cmd_power(pw); }; });

  SweepArgs sw;
  auto* sweep_cmd = app.add_subcommand("sweep", "severity grid sweep to heatmap CSV");
  sweep_cmd->add_option("--card", sw.card_path, "model card JSON")->required();
  sweep_cmd->add_option("--axis1", sw.axis1, "first axis, e.g. mu0=0,1,2,3")->required();
  sweep_cmd->add_option("--axis2", sw.axis2, "second axis (optional)");
  sweep_cmd->add_option("--validation", sw.validation_path, "validation summaries CSV");
  sweep_cmd->add_option("--out", sw.out_path, "heatmap CSV path");
  sweep_cmd->add_option("--n-obs", sw.n_obs, "datasets per diagnose call");
  sweep_cmd->add_option("--reps", sw.reps, "repetitions per cell");
  sweep_cmd->add_option("--alpha", sw.alpha, "type I error level");
  sweep_cmd->add_option("--null-r", sw.null_repetitions, "null repetitions");
  sweep_cmd->add_option("--kernel", sw.kernel_family, "kernel family");
  sweep_cmd->add_option("--seed", sw.seed, "seed");
  sweep_cmd->add_option("--workers", sw.workers, "simulator parallelism");
  sweep_cmd->callback([&] { action = [&] { return cmd_sweep(sw); }; });

  SbcArgs sb;
  auto* sbc_cmd = app.add_subcommand("sbc", "simulation-based calibration ranks");
  sbc_cmd->add_option("--card", sb.card_path, "model card JSON")->required();
  sbc_cmd->add_option("--n", sb.n, "datasets");
  sbc_cmd->add_option("--l", sb.l, "posterior draws per dataset");
  sbc_cmd->add_option("--out", sb.out_path, "ranks CSV path");
  sbc_cmd->add_option("--seed", sb.seed, "seed");
  sbc_cmd->callback([&] { action = [&] { return cmd_sbc(sb); }; });

  PcaArgs pc;
  auto* pca_cmd = app.add_subcommand("pca", "summary-space principal component analysis");
  pca_cmd->add_option("--card", pc.card_path, "model card JSON");
  pca_cmd->add_option("--summaries", pc.summaries_path, "precomputed summaries CSV");
  pca_cmd->add_option("--m", pc.m, "fresh simulations when using --card");
  pca_cmd->add_option("--out", pc.out_path, "output JSON path");
  pca_cmd->add_option("--seed", pc.seed, "seed");
  pca_cmd->callback([&] { action = [&] { return cmd_pca(pc); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    return action ? action() : kExitConfig;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ContractError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DimensionError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const train::DivergenceError& e) {
    std::cerr << "numerical failure: " << e.what() << " (" << e.trace.size()
              << " trace rows completed)\n";
    return kExitNumeric;
  } catch (const NumericError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const SimulationError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  }
}
