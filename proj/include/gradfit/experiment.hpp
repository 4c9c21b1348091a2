#pragma once

// Config-driven experiment runner: generates synthetic datasets, selects
// the kernel lengthscale by 5-fold cross-validation on function data,
// tunes lambda by GCV, fits at each requested gradient level on the same
// dataset, scores against the experiment's closed-form reference, and
// emits CSV reports plus per-fit GCV curves. The full report is a pure
// function of (config, master seed), independent of the thread count.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "gradfit/dataset.hpp"
#include "gradfit/estimator.hpp"
#include "gradfit/kernels.hpp"

namespace gradfit {

std::vector<double> default_tau_grid();  // 8 log-spaced in [0.05, 2]

struct EstimatorSettings {
  KernelFamily family = KernelFamily::Matern52;
  int r = 0;  // 0 -> full interaction (r = d)
  int s = 8;
  std::optional<double> tau;       // absent -> 5-fold CV over tau_grid
  std::vector<double> tau_grid;    // empty -> default_tau_grid()
  std::optional<double> lambda;    // absent -> GCV
  std::vector<double> lambda_grid; // empty -> default grid
  std::optional<std::vector<double>> weights;  // absent -> difference-based
  std::size_t block_cap = 2'000'000;
};

struct ExperimentConfig {
  enum class Kind { BlackScholes, CobbDouglas, SyntheticRate };
  Kind kind = Kind::BlackScholes;
  int replications = 30;
  std::uint64_t seed = 0;
  int test_points = 4096;
  int threads = 1;
  bool dump_models = false;

  std::vector<int> grid_sizes;     // black_scholes: points per axis
  std::vector<int> q_values;       // black_scholes
  std::vector<int> n_values;       // cobb_douglas / synthetic_rate
  std::vector<double> rho_values;  // cobb_douglas
  std::vector<int> p_levels;

  double rate_sigma = 0.5;  // synthetic_rate noise sd

  EstimatorSettings est;
  std::string out_dir = "out";

  void validate() const;
};

ExperimentConfig load_experiment_config(const std::string& path);

struct FitRow {
  std::string experiment;
  std::string cell_key;
  int n = 0;
  int q = 0;          // 0 -> not applicable
  double rho = 0.0;   // NaN -> not applicable
  int p = 0;
  int replication = 0;
  std::vector<double> taus;  // per-coordinate lengthscales used
  double lambda = 0.0;
  double mse = 0.0;
  double se = 0.0;
  GcvCurve curve;  // empty when lambda was fixed
};

struct AggregateRow {
  std::string experiment;
  std::string cell_key;
  int n = 0;
  int q = 0;
  double rho = 0.0;
  int p = 0;
  double mean_mse = 0.0;
  double se_mean = 0.0;
  double ratio_to_p0 = 0.0;  // NaN when no p = 0 baseline in the sweep
};

struct ExperimentReport {
  std::vector<FitRow> rows;
  std::vector<AggregateRow> aggregates;
};

ExperimentReport run_experiment(const ExperimentConfig& config);

struct RateReport {
  struct Slope {
    int p = 0;
    double slope = 0.0;
    double intercept = 0.0;
  };
  std::vector<Slope> slopes;  // least-squares fit of log mean-MSE vs log n
  ExperimentReport detail;
};

RateReport rate_study(const ExperimentConfig& config);

// results.csv, aggregates.csv and curves/*.csv under dir; byte-identical
// across reruns of the same report.
void emit_report(const ExperimentReport& report, const std::string& dir);
void emit_rate_report(const RateReport& report, const std::string& dir);

// Named closed-form references for evaluation configs.
struct Reference {
  std::function<double(std::span<const double>)> value;
  DomainBox box;
};
Reference reference_by_name(const std::string& name);

struct FitFileResult {
  FittedModel model;
  std::vector<double> taus;
  std::vector<double> weights;
  std::vector<double> channel_rms;  // training residual RMS per channel
};

// Fit a CSV dataset under an estimator config and write the model export.
FitFileResult fit_file(const std::string& csv_path,
                       const std::string& config_path,
                       const std::string& model_out);

struct EvalResult {
  std::string reference;
  double mse = 0.0;
  double se = 0.0;
  int n_test = 0;
};

EvalResult eval_model(const std::string& model_path,
                      const std::string& config_path);

}  // namespace gradfit
