// gradfit command-line runner.
//
//   gradfit run  --config cfg.ini [--seed S] [--out DIR] [--threads K]
//   gradfit rate --config cfg.ini [--seed S] [--out DIR] [--threads K]
//   gradfit fit  --data data.csv --config cfg.ini [--out model.txt]
//   gradfit eval --model model.txt --config cfg.ini
//
// Exit codes: 0 success, 2 configuration error, 3 numerical failure.

#include <CLI11.hpp>

#include <cstdio>
#include <exception>
#include <optional>
#include <string>

#include "gradfit/errors.hpp"
#include "gradfit/experiment.hpp"

namespace {

struct CommonOpts {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<int> threads;
};

gradfit::ExperimentConfig load_with_overrides(const CommonOpts& opts) {
  gradfit::ExperimentConfig cfg = gradfit::load_experiment_config(opts.config);
  if (opts.seed) cfg.seed = *opts.seed;
  if (opts.out) cfg.out_dir = *opts.out;
  if (opts.threads) cfg.threads = *opts.threads;
  cfg.validate();
  return cfg;
}

int run_verb(const CommonOpts& opts) {
  const gradfit::ExperimentConfig cfg = load_with_overrides(opts);
  const gradfit::ExperimentReport report = gradfit::run_experiment(cfg);
  gradfit::emit_report(report, cfg.out_dir);
  std::printf("wrote %zu fit rows, %zu aggregates to %s\n",
              report.rows.size(), report.aggregates.size(),
              cfg.out_dir.c_str());
  for (const auto& a : report.aggregates) {
    std::printf("  %-24s p=%d  mean_mse=%.6g  se=%.3g  ratio_p0=%.4g\n",
                a.cell_key.c_str(), a.p, a.mean_mse, a.se_mean, a.ratio_to_p0);
  }
  return 0;
}

int rate_verb(const CommonOpts& opts) {
  const gradfit::ExperimentConfig cfg = load_with_overrides(opts);
  const gradfit::RateReport report = gradfit::rate_study(cfg);
  gradfit::emit_rate_report(report, cfg.out_dir);
  for (const auto& s : report.slopes) {
    std::printf("p=%d  log-log slope %.4f  (intercept %.4f)\n", s.p, s.slope,
                s.intercept);
  }
  return 0;
}

int fit_verb(const std::string& data, const std::string& config,
             const std::string& out) {
  const gradfit::FitFileResult res = gradfit::fit_file(data, config, out);
  std::printf("model written to %s\n", out.c_str());
  std::printf("tau =");
  for (const double t : res.taus) std::printf(" %.6g", t);
  std::printf("  lambda = %.6g\n", res.model.lambda_used());
  for (std::size_t j = 0; j < res.weights.size(); ++j) {
    std::printf("w_%zu = %.6g\n", j + 1, res.weights[j]);
  }
  for (std::size_t c = 0; c < res.channel_rms.size(); ++c) {
    std::printf("channel %zu training rms = %.6g\n", c, res.channel_rms[c]);
  }
  return 0;
}

int eval_verb(const std::string& model, const std::string& config) {
  const gradfit::EvalResult res = gradfit::eval_model(model, config);
  std::printf("reference = %s\nn_test = %d\nmse = %.8g\nse = %.3g\n",
              res.reference.c_str(), res.n_test, res.mse, res.se);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"random-feature regression with mixed gradient data"};
  app.require_subcommand(1);

  CommonOpts run_opts, rate_opts;
  std::string fit_data, fit_config, fit_out = "model.txt";
  std::string eval_model_path, eval_config;

  auto add_common = [](CLI::App* sub, CommonOpts& opts) {
    sub->add_option("--config", opts.config, "experiment config file")
        ->required();
    sub->add_option("--seed", opts.seed, "master seed override");
    sub->add_option("--out", opts.out, "output directory override");
    sub->add_option("--threads", opts.threads, "worker thread override");
  };

  CLI::App* run = app.add_subcommand("run", "run a table experiment");
  add_common(run, run_opts);
  CLI::App* rate = app.add_subcommand("rate", "run the convergence-rate study");
  add_common(rate, rate_opts);

  CLI::App* fit = app.add_subcommand("fit", "fit a CSV dataset");
  fit->add_option("--data", fit_data, "dataset CSV")->required();
  fit->add_option("--config", fit_config, "estimator config file")->required();
  fit->add_option("--out", fit_out, "model output path");

  CLI::App* eval = app.add_subcommand("eval", "evaluate a model file");
  eval->add_option("--model", eval_model_path, "model file")->required();
  eval->add_option("--config", eval_config, "eval config file")->required();

  try {
    app.parse(argc, argv);
    if (run->parsed()) return run_verb(run_opts);
    if (rate->parsed()) return rate_verb(rate_opts);
    if (fit->parsed()) return fit_verb(fit_data, fit_config, fit_out);
    if (eval->parsed()) return eval_verb(eval_model_path, eval_config);
    return 2;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const gradfit::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const gradfit::NumericError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
}
