// Copyright (C) 2026 the mgd authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: sampling, volatility sweeps, the MALA/MGD barrier
// benchmark, dataset ingestion, scattering feature dumps, and histogram
// entropy. Exit codes: 0 ok, 2 config error, 3 data error, 4 diverged run.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mgd/analysis.hpp"
#include "mgd/baselines.hpp"
#include "mgd/core.hpp"
#include "mgd/io.hpp"
#include "mgd/moment_maps.hpp"
#include "mgd/moment_path.hpp"
#include "mgd/scattering.hpp"
#include "mgd/solver.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct ExperimentConfig {
  std::string family = "monomial:4";
  std::string algorithm = "pc";  // pc | precomputed | offline
  double sigma2 = 1.0;
  std::vector<double> sigma2_list;
  long n_steps = 0;  // 0: use the step rule
  double rule_a = 400.0;
  double rule_b = 1000.0;
  long n_rep = 10000;
  long n_mc = 0;  // 0: min(n_rep, 200000)
  double delta = 1e-7;
  double epsilon = 0.0;
  std::uint64_t seed = 0;
  bool deterministic = true;
  std::string data_path;
  std::string data_kind = "auto";  // auto | samples | series | field
  std::string output_dir = ".";
  std::vector<double> target_poly;  // log p*(x) = sum_k c_k x^k, for sweep metrics
  double support_lo = -8.0;
  double support_hi = 8.0;
  std::vector<double> beta_list;
  double kl_target = 1e-3;
  int threads = 0;

  json to_json() const {
    return json{{"family", family},
                {"algorithm", algorithm},
                {"sigma2", sigma2},
                {"sigma2_list", sigma2_list},
                {"n_steps", n_steps},
                {"rule_a", rule_a},
                {"rule_b", rule_b},
                {"n_rep", n_rep},
                {"n_mc", n_mc},
                {"delta", delta},
                {"epsilon", epsilon},
                {"seed", seed},
                {"deterministic", deterministic},
                {"data_path", data_path},
                {"data_kind", data_kind},
                {"output_dir", output_dir},
                {"target_poly", target_poly},
                {"support_lo", support_lo},
                {"support_hi", support_hi},
                {"beta_list", beta_list},
                {"kl_target", kl_target},
                {"threads", threads}};
  }

  static ExperimentConfig from_json(const json& j) {
    ExperimentConfig cfg;
    const json reference = cfg.to_json();
    for (const auto& [key, value] : j.items()) {
      if (!reference.contains(key)) {
        throw mgd::ConfigError("unknown configuration key: " + key);
      }
      (void)value;
    }
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("family", cfg.family);
    get("algorithm", cfg.algorithm);
    get("sigma2", cfg.sigma2);
    get("sigma2_list", cfg.sigma2_list);
    get("n_steps", cfg.n_steps);
    get("rule_a", cfg.rule_a);
    get("rule_b", cfg.rule_b);
    get("n_rep", cfg.n_rep);
    get("n_mc", cfg.n_mc);
    get("delta", cfg.delta);
    get("epsilon", cfg.epsilon);
    get("seed", cfg.seed);
    get("deterministic", cfg.deterministic);
    get("data_path", cfg.data_path);
    get("data_kind", cfg.data_kind);
    get("output_dir", cfg.output_dir);
    get("target_poly", cfg.target_poly);
    get("support_lo", cfg.support_lo);
    get("support_hi", cfg.support_hi);
    get("beta_list", cfg.beta_list);
    get("kl_target", cfg.kl_target);
    get("threads", cfg.threads);
    return cfg;
  }
};

std::string config_hash(const ExperimentConfig& cfg) {
  const std::string dump = cfg.to_json().dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : dump) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream out;
  out << std::hex << h;
  return out.str();
}

// ---------------------------------------------------------------------------
// Moment family parsing
// ---------------------------------------------------------------------------

struct Poly {
  std::vector<double> coeffs;  // c_0 + c_1 x + ...
  double eval(double x) const {
    double acc = 0.0;
    for (auto it = coeffs.rbegin(); it != coeffs.rend(); ++it) acc = acc * x + *it;
    return acc;
  }
  double deriv(double x) const {
    double acc = 0.0;
    for (std::size_t k = coeffs.size(); k-- > 1;) {
      acc = acc * x + static_cast<double>(k) * coeffs[k];
    }
    return acc;
  }
  double deriv2(double x) const {
    double acc = 0.0;
    for (std::size_t k = coeffs.size(); k-- > 2;) {
      acc = acc * x + static_cast<double>(k * (k - 1)) * coeffs[k];
    }
    return acc;
  }
};

std::vector<double> parse_double_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    out.push_back(std::stod(item));
  }
  return out;
}

struct FamilySpec {
  std::string name;       // monomial | quadratic | abs | logdensity-poly | scattering
  long monomial_degree = 4;
  Poly log_density;
  int scatter_j = 3;
  int scatter_l = 4;
};

FamilySpec parse_family(const std::string& text) {
  FamilySpec spec;
  const auto colon = text.find(':');
  spec.name = text.substr(0, colon);
  const std::string args = colon == std::string::npos ? "" : text.substr(colon + 1);
  if (spec.name == "monomial") {
    spec.monomial_degree = args.empty() ? 4 : std::stol(args);
  } else if (spec.name == "logdensity-poly") {
    if (args.empty()) throw mgd::ConfigError("logdensity-poly needs coefficients, e.g. 0,0.4,4,0,-0.8");
    spec.log_density.coeffs = parse_double_list(args);
  } else if (spec.name == "scattering") {
    std::stringstream ss(args);
    std::string item;
    while (std::getline(ss, item, ',')) {
      const auto eq = item.find('=');
      if (eq == std::string::npos) throw mgd::ConfigError("scattering family expects J=..,L=..");
      const std::string key = item.substr(0, eq);
      const int value = std::stoi(item.substr(eq + 1));
      if (key == "J") {
        spec.scatter_j = value;
      } else if (key == "L") {
        spec.scatter_l = value;
      } else {
        throw mgd::ConfigError("unknown scattering parameter: " + key);
      }
    }
  } else if (spec.name != "quadratic" && spec.name != "abs") {
    throw mgd::ConfigError("unknown moment family: " + text);
  }
  return spec;
}

// ---------------------------------------------------------------------------
// Dataset loading
// ---------------------------------------------------------------------------

struct Dataset {
  mgd::Matrix states;                // one row per realization
  std::vector<Eigen::Index> shape;   // per-state shape, e.g. {d} or {h, w}
  bool is_single_realization = false;
};

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

Dataset load_dataset(const ExperimentConfig& cfg, const FamilySpec& family) {
  if (cfg.data_path.empty()) throw mgd::ConfigError("missing --data path");
  std::string kind = cfg.data_kind;
  if (kind == "auto") {
    kind = family.name == "scattering" ? "series" : "samples";
  }
  Dataset ds;
  if (ends_with(cfg.data_path, ".csv")) {
    mgd::Vector column = mgd::read_csv_column(cfg.data_path);
    if (!column.allFinite()) throw mgd::DataError("dataset has non-finite entries: " + cfg.data_path);
    if (kind == "series") {
      ds.states.resize(1, column.size());
      ds.states.row(0) = column.transpose();
      ds.shape = {column.size()};
      ds.is_single_realization = true;
    } else if (kind == "samples") {
      ds.states.resize(column.size(), 1);
      ds.states.col(0) = column;
      ds.shape = {1};
    } else {
      throw mgd::ConfigError("CSV input supports kinds 'samples' and 'series'");
    }
    return ds;
  }
  mgd::FieldFile field = mgd::read_field_file(cfg.data_path);
  if (!field.data.allFinite()) throw mgd::DataError("dataset has non-finite entries: " + cfg.data_path);
  if (kind == "samples") {
    if (field.dims.size() == 1) {
      ds.states.resize(field.dims[0], 1);
      ds.states.col(0) = field.data;
      ds.shape = {1};
    } else if (field.dims.size() == 2) {
      ds.states = Eigen::Map<const mgd::Matrix>(field.data.data(), field.dims[0], field.dims[1]);
      ds.shape = {field.dims[1]};
    } else {
      throw mgd::ConfigError("samples field file must have 1 or 2 dims");
    }
  } else if (kind == "series") {
    if (field.dims.size() != 1) throw mgd::ConfigError("series field file must have one dim");
    ds.states.resize(1, field.dims[0]);
    ds.states.row(0) = field.data.transpose();
    ds.shape = {field.dims[0]};
    ds.is_single_realization = true;
  } else if (kind == "field") {
    if (field.dims.size() == 2) {
      ds.states.resize(1, field.dims[0] * field.dims[1]);
      ds.states.row(0) = field.data.transpose();
      ds.shape = {field.dims[0], field.dims[1]};
      ds.is_single_realization = true;
    } else if (field.dims.size() == 3) {
      const Eigen::Index per = field.dims[1] * field.dims[2];
      ds.states = Eigen::Map<const mgd::Matrix>(field.data.data(), field.dims[0], per);
      ds.shape = {field.dims[1], field.dims[2]};
    } else {
      throw mgd::ConfigError("field file must have 2 or 3 dims");
    }
  } else {
    throw mgd::ConfigError("unknown data kind: " + kind);
  }
  return ds;
}

mgd::MomentFunctionPtr make_moment_function(const FamilySpec& family, const Dataset& ds) {
  const Eigen::Index d = ds.states.cols();
  if (family.name == "monomial") {
    if (d != 1) throw mgd::ConfigError("monomial family needs scalar states");
    return mgd::monomial_map(family.monomial_degree);
  }
  if (family.name == "quadratic") return mgd::quadratic_map(d);
  if (family.name == "abs") {
    if (d != 1) throw mgd::ConfigError("abs family needs scalar states");
    return mgd::abs_quadratic_map();
  }
  if (family.name == "logdensity-poly") {
    if (d != 1) throw mgd::ConfigError("logdensity-poly family needs scalar states");
    Poly p = family.log_density;
    return mgd::log_density_map([p](double x) { return p.eval(x); },
                                [p](double x) { return p.deriv(x); },
                                [p](double x) { return p.deriv2(x); });
  }
  if (family.name == "scattering") {
    if (ds.shape.empty() || ds.shape.size() > 2) {
      throw mgd::ConfigError("scattering family needs a series or a 2D field dataset");
    }
    const int kappa = static_cast<int>(ds.shape.size());
    const auto per_axis = static_cast<int>(ds.shape[0]);
    for (auto s : ds.shape) {
      if (s != ds.shape[0]) throw mgd::ConfigError("scattering fields must be square");
    }
    return mgd::scattering_map(per_axis, kappa, family.scatter_j, family.scatter_l);
  }
  throw mgd::ConfigError("unknown moment family: " + family.name);
}

// ---------------------------------------------------------------------------
// Shared run plumbing
// ---------------------------------------------------------------------------

mgd::MgdConfig solver_config(const ExperimentConfig& cfg, double sigma2) {
  mgd::MgdConfig sc;
  sc.sigma2 = sigma2;
  sc.step_rule = {cfg.rule_a, cfg.rule_b};
  sc.n_steps_override = cfg.n_steps;
  sc.n_rep = cfg.n_rep;
  sc.delta = cfg.delta;
  sc.epsilon_confine = cfg.epsilon;
  sc.seed = {cfg.seed};
  sc.deterministic = cfg.deterministic;
  return sc;
}

Eigen::Index effective_n_mc(const ExperimentConfig& cfg) {
  if (cfg.n_mc > 0) return cfg.n_mc;
  return std::min<Eigen::Index>(cfg.n_rep, 200000);
}

struct RunOutput {
  mgd::ParticleEnsemble ensemble;
  mgd::SolverTrace trace;
  Eigen::Index n_steps = 0;
};

RunOutput run_solver(const ExperimentConfig& cfg, double sigma2, const mgd::MomentFunction& phi,
                     const Dataset& ds) {
  mgd::MgdConfig sc = solver_config(cfg, sigma2);
  mgd::MomentPath path = mgd::estimate_moment_path(ds.states, phi, sc.n_steps(),
                                                   effective_n_mc(cfg),
                                                   mgd::InterpolantSchedule::cosine(), sc.seed);
  RunOutput out;
  out.n_steps = sc.n_steps();
  if (cfg.algorithm == "pc") {
    auto [ens, trace] = mgd::mgd_run(sc, phi, path);
    out.ensemble = std::move(ens);
    out.trace = std::move(trace);
  } else if (cfg.algorithm == "precomputed") {
    auto [ens, trace] = mgd::mgd_run_precomputed(sc, phi, path, ds.states, mgd::SgdParams());
    out.ensemble = std::move(ens);
    out.trace = std::move(trace);
  } else if (cfg.algorithm == "offline") {
    mgd::CoefficientTable table = mgd::learn_coefficients_offline(sc, phi, path, 8);
    out.ensemble.states.resize(sc.n_rep, phi.input_dim());
    for (Eigen::Index i = 0; i < sc.n_rep; ++i) {
      out.ensemble.states.row(i) =
          mgd::sample_with_coefficients(table, phi, sc.seed, static_cast<std::uint64_t>(i))
              .transpose();
    }
    out.trace.eta_hat = table.eta;
    out.trace.theta_hat = table.theta;
    out.trace.moment_residual = mgd::Vector::Zero(table.n_steps());
    out.trace.entropy_increment = mgd::Vector::Zero(table.n_steps());
    out.trace.entropy_partial = mgd::Vector::Zero(table.n_steps());
    out.trace.h0_entropy = mgd::gaussian_entropy(phi.input_dim());
    double running = out.trace.h0_entropy;
    for (Eigen::Index k = 0; k < table.n_steps(); ++k) {
      const double inc = table.theta.row(k).dot(path.values.row(k + 1) - path.values.row(k));
      out.trace.entropy_increment[k] = inc;
      running += inc;
      out.trace.entropy_partial[k] = running;
    }
    mgd::Vector final_residual = mgd::detail::mean_phi(out.ensemble.states, phi).mean -
                                 path.values.row(table.n_steps()).transpose();
    out.trace.moment_residual[table.n_steps() - 1] = final_residual.lpNorm<Eigen::Infinity>();
  } else {
    throw mgd::ConfigError("unknown algorithm: " + cfg.algorithm);
  }
  return out;
}

void write_trace_csv(const std::string& path, const mgd::SolverTrace& trace) {
  mgd::CsvWriter csv(path, {"k", "t", "eta_inf", "theta_inf", "moment_residual",
                            "entropy_partial"});
  const auto n = trace.moment_residual.size();
  for (Eigen::Index k = 0; k < n; ++k) {
    csv.row(k, static_cast<double>(k + 1) / static_cast<double>(n),
            trace.eta_hat.row(k).lpNorm<Eigen::Infinity>(),
            trace.theta_hat.row(k).lpNorm<Eigen::Infinity>(), trace.moment_residual[k],
            trace.entropy_partial[k]);
  }
}

double dataset_gaussian_entropy(const Dataset& ds) {
  if (ds.shape.size() == 2) {
    Eigen::Map<const mgd::Matrix> field(ds.states.row(0).data(), ds.shape[0], ds.shape[1]);
    return mgd::gaussian_entropy_rate_2d(mgd::Matrix(field)).entropy();
  }
  if (ds.is_single_realization && ds.states.cols() > 1) {
    return mgd::gaussian_entropy_rate(ds.states.row(0).transpose()).entropy();
  }
  // Scalar samples: closed form from the sample variance.
  const double mean = ds.states.col(0).mean();
  const double var = (ds.states.col(0).array() - mean).square().mean();
  return 0.5 * std::log(2.0 * M_PI * M_E * var);
}

int threads_from(const ExperimentConfig& cfg) {
  return cfg.threads > 0 ? cfg.threads : static_cast<int>(mgd::default_thread_count());
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

int cmd_sample(const ExperimentConfig& cfg) {
  mgd::set_thread_count(static_cast<unsigned>(threads_from(cfg)));
  const auto start = std::chrono::steady_clock::now();
  FamilySpec family = parse_family(cfg.family);
  Dataset ds = load_dataset(cfg, family);
  mgd::MomentFunctionPtr phi = make_moment_function(family, ds);

  RunOutput run = run_solver(cfg, cfg.sigma2, *phi, ds);

  fs::create_directories(cfg.output_dir);
  std::vector<Eigen::Index> dims;
  dims.push_back(run.ensemble.n_rep());
  for (auto s : ds.shape) dims.push_back(s);
  const std::string sample_path = (fs::path(cfg.output_dir) / "samples.f64").string();
  Eigen::Map<const mgd::Vector> flat(run.ensemble.states.data(), run.ensemble.states.size());
  mgd::write_field_file(sample_path, dims, flat);
  write_trace_csv((fs::path(cfg.output_dir) / "trace.csv").string(), run.trace);

  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  json summary{{"seed", cfg.seed},
               {"config_hash", config_hash(cfg)},
               {"moment_residual_max", run.trace.max_residual()},
               {"H_star", run.trace.h_star()},
               {"wall_time", wall},
               {"n_steps", run.n_steps},
               {"sigma2", cfg.sigma2},
               {"r", phi->output_dim()},
               {"d", phi->input_dim()},
               {"corrector_sign_flips", run.trace.corrector_sign_flips}};
  std::ofstream(fs::path(cfg.output_dir) / "summary.json") << summary.dump(2) << "\n";
  std::cout << summary.dump(2) << "\n";
  return 0;
}

int cmd_sweep(const ExperimentConfig& cfg) {
  mgd::set_thread_count(static_cast<unsigned>(threads_from(cfg)));
  if (cfg.sigma2_list.empty()) throw mgd::ConfigError("sweep needs a non-empty --sigma2 list");
  FamilySpec family = parse_family(cfg.family);
  Dataset ds = load_dataset(cfg, family);
  mgd::MomentFunctionPtr phi = make_moment_function(family, ds);
  const bool have_target = !cfg.target_poly.empty() && phi->input_dim() == 1;
  Poly target;
  double target_entropy = 0.0;
  if (have_target) {
    target.coeffs = cfg.target_poly;
    target_entropy = mgd::analytic_entropy_1d([&](double x) { return target.eval(x); },
                                              cfg.support_lo, cfg.support_hi);
  }
  const double h_gauss = dataset_gaussian_entropy(ds);

  fs::create_directories(cfg.output_dir);
  mgd::CsvWriter csv((fs::path(cfg.output_dir) / "sweep.csv").string(),
                     {"sigma2", "n_steps", "H_star", "hist_entropy", "kl", "gap_hist",
                      "gap_hstar", "negentropy", "moment_residual_max"});

  std::vector<std::pair<double, double>> hist_gap_points, hstar_gap_points;
  for (double sigma2 : cfg.sigma2_list) {
    RunOutput run = run_solver(cfg, sigma2, *phi, ds);
    const double h_star = run.trace.h_star();
    double hist_entropy = std::numeric_limits<double>::quiet_NaN();
    if (phi->input_dim() == 1) {
      hist_entropy = mgd::histogram_entropy(run.ensemble.states.col(0));
    }
    double kl = std::numeric_limits<double>::quiet_NaN();
    double gap_hist = std::numeric_limits<double>::quiet_NaN();
    double gap_hstar = std::numeric_limits<double>::quiet_NaN();
    if (have_target) {
      kl = mgd::kl_vs_density(run.ensemble.states.col(0),
                              [&](double x) { return target.eval(x); }, cfg.support_lo,
                              cfg.support_hi);
      gap_hist = target_entropy - hist_entropy;
      gap_hstar = target_entropy - h_star;
      if (gap_hist > 0.0) hist_gap_points.emplace_back(sigma2, gap_hist);
      if (gap_hstar > 0.0) hstar_gap_points.emplace_back(sigma2, gap_hstar);
    }
    const double negentropy =
        mgd::negentropy_estimate(h_gauss, h_star, phi->input_dim());
    csv.row(sigma2, run.n_steps, h_star, hist_entropy, kl, gap_hist, gap_hstar, negentropy,
            run.trace.max_residual());
  }

  json summary{{"config_hash", config_hash(cfg)}, {"seed", cfg.seed}};
  if (have_target) {
    summary["target_entropy"] = target_entropy;
    if (hist_gap_points.size() >= 3) {
      summary["hist_gap_slope"] = mgd::loglog_rate_fit(hist_gap_points);
    }
    if (hstar_gap_points.size() >= 3) {
      summary["hstar_gap_slope"] = mgd::loglog_rate_fit(hstar_gap_points);
    }
  }
  std::ofstream(fs::path(cfg.output_dir) / "sweep_summary.json") << summary.dump(2) << "\n";
  std::cout << summary.dump(2) << "\n";
  return 0;
}

int cmd_benchmark(const ExperimentConfig& cfg) {
  mgd::set_thread_count(static_cast<unsigned>(threads_from(cfg)));
  if (cfg.beta_list.empty()) throw mgd::ConfigError("benchmark needs a non-empty --beta list");
  mgd::BarrierCostOptions opts;
  opts.kl_target = cfg.kl_target;
  opts.seed = {cfg.seed};
  if (cfg.n_rep > 0) opts.n_chains = cfg.n_rep;
  opts.step_rule = {cfg.rule_a, cfg.rule_b};
  auto rows = mgd::barrier_cost_experiment(cfg.beta_list, opts);

  fs::create_directories(cfg.output_dir);
  mgd::CsvWriter csv((fs::path(cfg.output_dir) / "benchmark.csv").string(),
                     {"beta", "algorithm", "n_steps", "achieved_kl", "censored"});
  for (const auto& row : rows) {
    csv.row(row.beta, row.algorithm, row.n_steps, row.kl, row.censored ? 1 : 0);
  }
  for (const auto& row : rows) {
    std::cout << row.algorithm << " beta=" << row.beta << " n_steps=" << row.n_steps
              << " kl=" << row.kl << (row.censored ? " (censored)" : "") << "\n";
  }
  return 0;
}

struct IngestOptions {
  std::string input;
  std::string kind = "series";
  std::string out = "ingested.f64";
  bool log_returns = false;
  bool standardize = true;
  bool dyadic_crop = false;
};

Eigen::Index largest_dyadic(Eigen::Index n) {
  Eigen::Index p = 1;
  while (p * 2 <= n) p *= 2;
  return p;
}

int cmd_ingest(const IngestOptions& opts) {
  std::vector<Eigen::Index> dims;
  mgd::Vector data;
  if (ends_with(opts.input, ".csv")) {
    data = mgd::read_csv_column(opts.input);
    dims = {data.size()};
  } else {
    mgd::FieldFile field = mgd::read_field_file(opts.input);
    data = field.data;
    dims = field.dims;
  }
  if (opts.kind == "series" && dims.size() != 1) {
    throw mgd::ConfigError("series ingest expects one-dimensional input");
  }
  if (opts.kind == "field" && dims.size() != 2) {
    throw mgd::ConfigError("field ingest expects two-dimensional input");
  }

  // Non-finite entries are a hard data error; report where they sit.
  std::vector<Eigen::Index> bad;
  for (Eigen::Index i = 0; i < data.size() && bad.size() < 16; ++i) {
    if (!std::isfinite(data[i])) bad.push_back(i);
  }
  if (!bad.empty()) {
    std::string positions;
    for (auto i : bad) positions += std::to_string(i) + " ";
    throw mgd::DataError("non-finite input values at flat positions: " + positions);
  }

  json stats;
  stats["n_raw"] = data.size();
  if (opts.log_returns) {
    if (dims.size() != 1) throw mgd::ConfigError("log returns apply to series only");
    if ((data.array() <= 0.0).any()) {
      throw mgd::DataError("log returns need strictly positive prices");
    }
    mgd::Vector returns(data.size() - 1);
    for (Eigen::Index i = 0; i + 1 < data.size(); ++i) {
      returns[i] = std::log(data[i + 1]) - std::log(data[i]);
    }
    data = returns;
    dims = {data.size()};
    stats["log_returns"] = true;
  }
  if (opts.standardize) {
    const double mean = data.mean();
    const double sd = std::sqrt((data.array() - mean).square().mean());
    stats["mean"] = mean;
    stats["std"] = sd;
    if (!(sd > 0.0)) throw mgd::DataError("degenerate input: zero variance after preprocessing");
    data = (data.array() - mean) / sd;
  }
  if (opts.dyadic_crop) {
    if (dims.size() == 1) {
      const Eigen::Index n = largest_dyadic(dims[0]);
      if (n != dims[0]) {
        std::cerr << "warning: cropping series from " << dims[0] << " to " << n << "\n";
      }
      data = data.head(n).eval();
      dims = {n};
    } else {
      const Eigen::Index r = largest_dyadic(dims[0]);
      const Eigen::Index c = largest_dyadic(dims[1]);
      if (r != dims[0] || c != dims[1]) {
        std::cerr << "warning: cropping field from " << dims[0] << "x" << dims[1] << " to " << r
                  << "x" << c << "\n";
      }
      Eigen::Map<const mgd::Matrix> full(data.data(), dims[0], dims[1]);
      mgd::Matrix cropped = full.topLeftCorner(r, c);
      data = Eigen::Map<const mgd::Vector>(cropped.data(), cropped.size());
      dims = {r, c};
    }
  }
  stats["dims"] = dims;
  mgd::write_field_file(opts.out, dims, data);
  std::ofstream(opts.out + ".stats.json") << stats.dump(2) << "\n";
  std::cout << stats.dump(2) << "\n";
  return 0;
}

int cmd_scatter(const std::string& input, int J, int L, const std::string& out_path) {
  mgd::FieldFile field = mgd::read_field_file(input);
  if (field.dims.size() > 2) throw mgd::ConfigError("scatter expects a series or a 2D field");
  const int kappa = static_cast<int>(field.dims.size());
  for (auto dim : field.dims) {
    if (dim != field.dims[0]) throw mgd::ConfigError("scatter expects square fields");
  }
  mgd::FilterBank bank = mgd::build_filter_bank(static_cast<int>(field.dims[0]), kappa, J, L);
  mgd::ScatteringIndex index = mgd::ScatteringIndex::full(bank);
  mgd::Vector moments = mgd::scattering_moments(field.data, bank, index);

  mgd::CsvWriter csv(out_path, {"idx", "family", "j", "ell", "jp", "ellp", "jpp", "ellpp", "part",
                                "value"});
  for (Eigen::Index e = 0; e < index.size(); ++e) {
    const auto& entry = index.entries[static_cast<std::size_t>(e)];
    auto channel_j = [&](int c) { return c < 0 ? -1 : bank.channels[static_cast<std::size_t>(c)].j; };
    auto channel_l = [&](int c) { return c < 0 ? -1 : bank.channels[static_cast<std::size_t>(c)].ell; };
    csv.row(e, static_cast<int>(entry.family), channel_j(entry.lam), channel_l(entry.lam),
            channel_j(entry.lam_p), channel_l(entry.lam_p), channel_j(entry.lam_pp),
            channel_l(entry.lam_pp), entry.imag ? "im" : "re", moments[e]);
  }
  std::cout << "wrote " << index.size() << " moments to " << out_path << "\n";
  return 0;
}

int cmd_entropy(const std::string& input, Eigen::Index bins) {
  mgd::Vector samples;
  if (ends_with(input, ".csv")) {
    samples = mgd::read_csv_column(input);
  } else {
    samples = mgd::read_field_file(input).data;
  }
  const double h = mgd::histogram_entropy(samples, bins);
  json out{{"n", samples.size()}, {"bins", bins}, {"entropy", h}};
  std::cout << out.dump(2) << "\n";
  return 0;
}

void add_common_flags(CLI::App* cmd, ExperimentConfig& cfg, std::string& sigma2_list_text,
                      std::string& target_poly_text, std::string& beta_list_text) {
  cmd->add_option("--family", cfg.family,
                  "moment family: monomial:R | quadratic | abs | logdensity-poly:c0,c1,... | "
                  "scattering:J=..,L=..");
  cmd->add_option("--algorithm", cfg.algorithm, "pc | precomputed | offline");
  cmd->add_option("--sigma2", cfg.sigma2, "volatility squared");
  cmd->add_option("--sigma2-list", sigma2_list_text, "comma-separated sigma^2 values (sweep)");
  cmd->add_option("--steps", cfg.n_steps, "explicit step count (0: use a*sigma2+b)");
  cmd->add_option("--rule-a", cfg.rule_a, "step rule coefficient a");
  cmd->add_option("--rule-b", cfg.rule_b, "step rule coefficient b");
  cmd->add_option("--nrep", cfg.n_rep, "particle count");
  cmd->add_option("--nmc", cfg.n_mc, "Monte-Carlo pairs for the moment path (0: auto)");
  cmd->add_option("--delta", cfg.delta, "Gram regularization");
  cmd->add_option("--epsilon", cfg.epsilon, "confinement strength");
  cmd->add_option("--seed", cfg.seed, "master seed");
  cmd->add_flag("--deterministic,!--free-running", cfg.deterministic,
                "fixed reduction order (default on)");
  cmd->add_option("--data", cfg.data_path, "dataset path (.csv or FieldFile)");
  cmd->add_option("--data-kind", cfg.data_kind, "auto | samples | series | field");
  cmd->add_option("--out", cfg.output_dir, "output directory");
  cmd->add_option("--target-poly", target_poly_text,
                  "log-density polynomial coefficients of the analytic target");
  cmd->add_option("--support-lo", cfg.support_lo, "target support lower bound");
  cmd->add_option("--support-hi", cfg.support_hi, "target support upper bound");
  cmd->add_option("--beta", beta_list_text, "comma-separated barrier heights (benchmark)");
  cmd->add_option("--kl-target", cfg.kl_target, "KL threshold (benchmark)");
  cmd->add_option("--threads,-t", cfg.threads, "worker threads (default: MGD_THREADS or cores)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Moment-guided diffusion sampler and analysis toolkit"};
  app.require_subcommand(1);

  ExperimentConfig cfg;
  std::string sigma2_list_text, target_poly_text, beta_list_text, config_path;

  auto* sample = app.add_subcommand("sample", "run the sampler and write samples + trace");
  auto* sweep = app.add_subcommand("sweep", "run a sigma^2 sweep and tabulate convergence");
  auto* benchmark = app.add_subcommand("benchmark", "MALA vs MGD barrier cost table");
  for (auto* cmd : {sample, sweep, benchmark}) {
    add_common_flags(cmd, cfg, sigma2_list_text, target_poly_text, beta_list_text);
    cmd->add_option("--config", config_path, "load configuration from JSON (flags override)");
  }

  IngestOptions ingest;
  auto* ingest_cmd = app.add_subcommand("ingest", "preprocess a dataset into a FieldFile");
  ingest_cmd->add_option("input", ingest.input, "input path (.csv or FieldFile)")->required();
  ingest_cmd->add_option("--kind", ingest.kind, "series | field");
  ingest_cmd->add_option("--out", ingest.out, "output FieldFile path");
  ingest_cmd->add_flag("--log-returns", ingest.log_returns, "price series to log-returns");
  ingest_cmd->add_flag("--standardize,!--no-standardize", ingest.standardize,
                       "zero mean, unit variance (default on)");
  ingest_cmd->add_flag("--dyadic", ingest.dyadic_crop, "crop to the largest dyadic size");

  std::string scatter_input, scatter_out = "scatter.csv";
  int scatter_j = 3, scatter_l = 4;
  auto* scatter_cmd = app.add_subcommand("scatter", "emit scattering moments of one file");
  scatter_cmd->add_option("input", scatter_input, "FieldFile input")->required();
  scatter_cmd->add_option("--J", scatter_j, "scale count");
  scatter_cmd->add_option("--L", scatter_l, "orientation count (2D)");
  scatter_cmd->add_option("--out", scatter_out, "output CSV path");

  std::string entropy_input;
  long entropy_bins = 500;
  auto* entropy_cmd = app.add_subcommand("entropy", "histogram entropy of a sample file");
  entropy_cmd->add_option("input", entropy_input, "samples (.csv or FieldFile)")->required();
  entropy_cmd->add_option("--bins", entropy_bins, "quantile bin count");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (!config_path.empty()) {
      // The config file replaces every experiment key; list flags below may
      // still extend it.
      std::ifstream in(config_path);
      if (!in) throw mgd::DataError("cannot open config: " + config_path);
      json j;
      try {
        in >> j;
      } catch (const json::exception& e) {
        throw mgd::ConfigError("malformed config JSON: " + std::string(e.what()));
      }
      cfg = ExperimentConfig::from_json(j);
    }
    if (!sigma2_list_text.empty()) cfg.sigma2_list = parse_double_list(sigma2_list_text);
    if (!target_poly_text.empty()) cfg.target_poly = parse_double_list(target_poly_text);
    if (!beta_list_text.empty()) cfg.beta_list = parse_double_list(beta_list_text);

    if (sample->parsed()) return cmd_sample(cfg);
    if (sweep->parsed()) return cmd_sweep(cfg);
    if (benchmark->parsed()) return cmd_benchmark(cfg);
    if (ingest_cmd->parsed()) return cmd_ingest(ingest);
    if (scatter_cmd->parsed()) return cmd_scatter(scatter_input, scatter_j, scatter_l, scatter_out);
    if (entropy_cmd->parsed()) return cmd_entropy(entropy_input, entropy_bins);
    return 2;
  } catch (const mgd::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const mgd::DivergedError& e) {
    std::cerr << "diverged: " << e.what() << "\n";
    return 4;
  } catch (const mgd::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
