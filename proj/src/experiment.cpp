#include "gradfit/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>
#include <thread>

#include "gradfit/errors.hpp"
#include "gradfit/rng.hpp"
#include "gradfit/sim.hpp"

namespace gradfit {

std::vector<double> default_tau_grid() {
  std::vector<double> grid(8);
  const double lo = std::log10(0.05), hi = std::log10(4.0);
  for (int i = 0; i < 8; ++i) {
    grid[static_cast<std::size_t>(i)] = std::pow(10.0, lo + (hi - lo) * i / 7.0);
  }
  return grid;
}

namespace {

// ---------------------------------------------------------------------
// Minimal INI reader: [section] headers, key = value lines, '#' or ';'
// comments.

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

class IniFile {
 public:
  static IniFile parse(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config: " + path);
    IniFile ini;
    std::string line, section;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const auto hash = line.find_first_of("#;");
      if (hash != std::string::npos) line = line.substr(0, hash);
      line = trim(line);
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']') {
          throw ConfigError(path + ":" + std::to_string(line_no) +
                            ": malformed section header");
        }
        section = trim(line.substr(1, line.size() - 2));
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw ConfigError(path + ":" + std::to_string(line_no) +
                          ": expected key = value");
      }
      ini.values_[section + "." + trim(line.substr(0, eq))] =
          trim(line.substr(eq + 1));
    }
    return ini;
  }

  bool has(const std::string& section, const std::string& key) const {
    return values_.count(section + "." + key) > 0;
  }
  std::string get(const std::string& section, const std::string& key,
                  const std::string& fallback) const {
    const auto it = values_.find(section + "." + key);
    return it == values_.end() ? fallback : it->second;
  }
  std::string require(const std::string& section, const std::string& key) const {
    const auto it = values_.find(section + "." + key);
    if (it == values_.end()) {
      throw ConfigError("config: missing [" + section + "] " + key);
    }
    return it->second;
  }

 private:
  std::map<std::string, std::string> values_;
};

double to_double(const std::string& s, const std::string& what) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config: bad number for " + what + ": '" + s + "'");
  }
}

int to_int(const std::string& s, const std::string& what) {
  const double v = to_double(s, what);
  const int i = static_cast<int>(v);
  if (v != i) throw ConfigError("config: expected integer for " + what);
  return i;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    cell = trim(cell);
    if (!cell.empty()) out.push_back(cell);
  }
  return out;
}

std::vector<double> to_double_list(const std::string& s, const std::string& what) {
  std::vector<double> out;
  for (const auto& c : split_list(s)) out.push_back(to_double(c, what));
  if (out.empty()) throw ConfigError("config: empty list for " + what);
  return out;
}

std::vector<int> to_int_list(const std::string& s, const std::string& what) {
  std::vector<int> out;
  for (const auto& c : split_list(s)) out.push_back(to_int(c, what));
  if (out.empty()) throw ConfigError("config: empty list for " + what);
  return out;
}

std::string tidy(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}

// ---------------------------------------------------------------------

EstimatorSettings load_estimator(const IniFile& ini) {
  EstimatorSettings est;
  est.family = kernel_family_from_string(
      ini.get("estimator", "kernel", "matern52"));
  est.r = to_int(ini.get("estimator", "r", "0"), "[estimator] r");
  est.s = to_int(ini.get("estimator", "s", "8"), "[estimator] s");
  const std::string tau = ini.get("estimator", "tau", "auto");
  if (tau != "auto") est.tau = to_double(tau, "[estimator] tau");
  const std::string tg = ini.get("estimator", "tau_grid", "default");
  if (tg != "default") est.tau_grid = to_double_list(tg, "[estimator] tau_grid");
  const std::string lambda = ini.get("estimator", "lambda", "gcv");
  if (lambda != "gcv") est.lambda = to_double(lambda, "[estimator] lambda");
  const std::string lg = ini.get("estimator", "lambda_grid", "default");
  if (lg != "default") {
    est.lambda_grid = to_double_list(lg, "[estimator] lambda_grid");
  }
  const std::string w = ini.get("estimator", "weights", "auto");
  if (w == "1") {
    est.weights = std::vector<double>{};  // resolved to ones at fit time
  } else if (w != "auto") {
    est.weights = to_double_list(w, "[estimator] weights");
  }
  if (ini.has("estimator", "block_cap")) {
    est.block_cap = static_cast<std::size_t>(to_double(
        ini.require("estimator", "block_cap"), "[estimator] block_cap"));
  }
  return est;
}

}  // namespace

void ExperimentConfig::validate() const {
  if (replications < 1) {
    throw ConfigError("experiment: replications must be >= 1");
  }
  if (test_points < 100) {
    throw ConfigError("experiment: test_points must be >= 100");
  }
  if (threads < 1) throw ConfigError("experiment: threads must be >= 1");
  if (p_levels.empty()) throw ConfigError("experiment: p_levels is empty");
  int p_cap = 0;
  switch (kind) {
    case Kind::BlackScholes:
      p_cap = 3;
      if (grid_sizes.empty()) throw ConfigError("experiment: grid list empty");
      if (q_values.empty()) throw ConfigError("experiment: q list empty");
      for (const int g : grid_sizes) {
        if (g < 2) throw ConfigError("experiment: grid must be >= 2");
      }
      for (const int q : q_values) {
        if (q < 1) throw ConfigError("experiment: q must be >= 1");
      }
      break;
    case Kind::CobbDouglas:
      p_cap = 2;
      if (n_values.empty()) throw ConfigError("experiment: n list empty");
      if (rho_values.empty()) throw ConfigError("experiment: rho list empty");
      break;
    case Kind::SyntheticRate:
      p_cap = 1;
      if (n_values.empty()) throw ConfigError("experiment: n list empty");
      break;
  }
  for (const int p : p_levels) {
    if (p < 0 || p > p_cap) {
      throw ConfigError("experiment: p level " + std::to_string(p) +
                        " not supported by this generator");
    }
  }
  if (est.s < 1) throw ConfigError("experiment: s must be >= 1");
  if (est.r < 0) throw ConfigError("experiment: r must be >= 0");
}

ExperimentConfig load_experiment_config(const std::string& path) {
  const IniFile ini = IniFile::parse(path);
  ExperimentConfig cfg;
  const std::string name = ini.require("experiment", "name");
  if (name == "black_scholes") {
    cfg.kind = ExperimentConfig::Kind::BlackScholes;
  } else if (name == "cobb_douglas") {
    cfg.kind = ExperimentConfig::Kind::CobbDouglas;
  } else if (name == "synthetic_rate") {
    cfg.kind = ExperimentConfig::Kind::SyntheticRate;
  } else {
    throw ConfigError("config: unknown experiment '" + name + "'");
  }
  cfg.replications = to_int(ini.get("experiment", "replications", "30"),
                            "replications");
  cfg.seed = static_cast<std::uint64_t>(
      to_double(ini.get("experiment", "seed", "0"), "seed"));
  cfg.test_points =
      to_int(ini.get("experiment", "test_points", "4096"), "test_points");
  cfg.threads = to_int(ini.get("experiment", "threads", "1"), "threads");
  cfg.dump_models = ini.get("experiment", "dump_models", "false") == "true";

  if (ini.has("sweep", "grid")) {
    cfg.grid_sizes = to_int_list(ini.require("sweep", "grid"), "[sweep] grid");
  }
  if (ini.has("sweep", "q")) {
    cfg.q_values = to_int_list(ini.require("sweep", "q"), "[sweep] q");
  }
  if (ini.has("sweep", "n")) {
    cfg.n_values = to_int_list(ini.require("sweep", "n"), "[sweep] n");
  }
  if (ini.has("sweep", "rho")) {
    cfg.rho_values = to_double_list(ini.require("sweep", "rho"), "[sweep] rho");
  }
  cfg.p_levels = to_int_list(ini.get("sweep", "p_levels", "0"), "p_levels");
  cfg.rate_sigma = to_double(ini.get("rate", "sigma", "0.5"), "[rate] sigma");
  cfg.est = load_estimator(ini);
  cfg.out_dir = ini.get("output", "dir", "out");
  cfg.validate();
  return cfg;
}

namespace {

// ---------------------------------------------------------------------
// Sweep cells

struct Cell {
  std::string key;
  int n = 0;          // function design points
  int grid = 0;       // black_scholes
  int q = 0;
  double rho = std::numeric_limits<double>::quiet_NaN();
};

std::vector<Cell> enumerate_cells(const ExperimentConfig& cfg) {
  std::vector<Cell> cells;
  switch (cfg.kind) {
    case ExperimentConfig::Kind::BlackScholes:
      for (const int g : cfg.grid_sizes) {
        for (const int q : cfg.q_values) {
          Cell c;
          c.grid = g;
          c.n = g * g * g;
          c.q = q;
          c.key = "bs_g" + std::to_string(g) + "_q" + std::to_string(q);
          cells.push_back(c);
        }
      }
      break;
    case ExperimentConfig::Kind::CobbDouglas:
      for (const int n : cfg.n_values) {
        for (const double rho : cfg.rho_values) {
          Cell c;
          c.n = n;
          c.rho = rho;
          c.key = "cd_n" + std::to_string(n) + "_rho" + tidy(rho);
          cells.push_back(c);
        }
      }
      break;
    case ExperimentConfig::Kind::SyntheticRate:
      for (const int n : cfg.n_values) {
        Cell c;
        c.n = n;
        c.key = "rate_n" + std::to_string(n);
        cells.push_back(c);
      }
      break;
  }
  return cells;
}

std::string experiment_name(ExperimentConfig::Kind kind) {
  switch (kind) {
    case ExperimentConfig::Kind::BlackScholes: return "black_scholes";
    case ExperimentConfig::Kind::CobbDouglas: return "cobb_douglas";
    case ExperimentConfig::Kind::SyntheticRate: return "synthetic_rate";
  }
  return "?";
}

MixedDataset generate(const ExperimentConfig& cfg, const Cell& cell,
                      std::uint64_t seed) {
  switch (cfg.kind) {
    case ExperimentConfig::Kind::BlackScholes: {
      BsConfig bs;
      bs.grid = {cell.grid, cell.grid, cell.grid};
      bs.q = cell.q;
      bs.seed = seed;
      return gen_bs_dataset(bs);
    }
    case ExperimentConfig::Kind::CobbDouglas:
      return gen_cost_dataset(cell.n, cell.rho, seed);
    case ExperimentConfig::Kind::SyntheticRate:
      return gen_wave_dataset(cell.n, cfg.rate_sigma, seed, 1);
  }
  throw ConfigError("unreachable experiment kind");
}

Reference experiment_reference(ExperimentConfig::Kind kind) {
  switch (kind) {
    case ExperimentConfig::Kind::BlackScholes:
      return reference_by_name("black_scholes");
    case ExperimentConfig::Kind::CobbDouglas:
      return reference_by_name("cobb_douglas");
    case ExperimentConfig::Kind::SyntheticRate:
      return reference_by_name("wave");
  }
  throw ConfigError("unreachable experiment kind");
}

// ---------------------------------------------------------------------
// Lengthscale selection: 5-fold CV on function data only, prediction
// error objective. A shared-tau sweep over the grid seeds one cyclic
// per-coordinate refinement pass, since surfaces are rarely equally
// smooth in every direction.

struct CvScore {
  double mean = 0.0;
  double se = 0.0;  // spread of the per-fold errors
};

CvScore cv_tau_error(const MixedDataset& data, const EstimatorSettings& est,
                     const std::vector<double>& taus, std::uint64_t feat_seed,
                     const std::vector<std::vector<Eigen::Index>>& folds) {
  std::vector<double> fold_err;
  for (const auto& holdout : folds) {
    std::vector<char> held(static_cast<std::size_t>(data.func.size()), 0);
    for (const auto i : holdout) held[static_cast<std::size_t>(i)] = 1;
    MixedDataset train;
    train.d = data.d;
    train.box = data.box;
    const Eigen::Index n_train =
        data.func.size() - static_cast<Eigen::Index>(holdout.size());
    train.func.t.resize(n_train, data.d);
    train.func.y.resize(n_train);
    Eigen::Index w = 0;
    for (Eigen::Index i = 0; i < data.func.size(); ++i) {
      if (held[static_cast<std::size_t>(i)]) continue;
      train.func.t.row(w) = data.func.t.row(i);
      train.func.y(w) = data.func.y(i);
      ++w;
    }
    FitConfig fc;
    fc.features.r = est.r == 0 ? data.d : est.r;
    fc.features.s = est.s;
    for (const double tau : taus) {
      fc.features.kernels.push_back(KernelSpec{est.family, tau});
    }
    fc.features.seed = feat_seed;
    fc.features.block_cap = est.block_cap;
    fc.p = 0;
    fc.lambda = est.lambda;
    fc.lambda_grid = est.lambda_grid;
    const FittedModel model = fit(train, fc);
    double err = 0.0;
    for (const auto i : holdout) {
      Eigen::VectorXd t = data.func.t.row(i);
      const double diff =
          model.predict({t.data(), static_cast<std::size_t>(t.size())}) -
          data.func.y(i);
      err += diff * diff;
    }
    fold_err.push_back(err / static_cast<double>(holdout.size()));
  }
  CvScore score;
  for (const double e : fold_err) score.mean += e;
  score.mean /= static_cast<double>(fold_err.size());
  double var = 0.0;
  for (const double e : fold_err) var += (e - score.mean) * (e - score.mean);
  var /= static_cast<double>(fold_err.size() - 1);
  score.se = std::sqrt(var / static_cast<double>(fold_err.size()));
  return score;
}

std::vector<double> select_tau(const MixedDataset& data,
                               const EstimatorSettings& est,
                               std::uint64_t feat_seed,
                               std::uint64_t cv_seed) {
  const auto du = static_cast<std::size_t>(data.d);
  if (est.tau.has_value()) {
    return std::vector<double>(du, est.tau.value());
  }
  const std::vector<double> grid =
      est.tau_grid.empty() ? default_tau_grid() : est.tau_grid;
  if (grid.size() == 1) return std::vector<double>(du, grid[0]);

  // deterministic shuffled 5-fold split of the function rows
  const Eigen::Index n = data.func.size();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(cv_seed);
  for (Eigen::Index i = n - 1; i > 0; --i) {
    const auto j = static_cast<Eigen::Index>(rng.next_u64() %
                                             static_cast<std::uint64_t>(i + 1));
    std::swap(order[static_cast<std::size_t>(i)],
              order[static_cast<std::size_t>(j)]);
  }
  constexpr int kFolds = 5;
  std::vector<std::vector<Eigen::Index>> folds(kFolds);
  for (Eigen::Index i = 0; i < n; ++i) {
    folds[static_cast<std::size_t>(i % kFolds)].push_back(
        order[static_cast<std::size_t>(i)]);
  }

  // stage 1: shared tau over the grid
  std::vector<CvScore> scores;
  scores.reserve(grid.size());
  std::size_t arg = 0;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    scores.push_back(cv_tau_error(data, est,
                                  std::vector<double>(du, grid[i]),
                                  feat_seed, folds));
  }
  for (std::size_t i = 1; i < grid.size(); ++i) {
    if (scores[i].mean < scores[arg].mean) arg = i;
  }
  CvScore best = scores[arg];
  std::vector<double> taus(du, grid[arg]);
  if (data.d == 1) return taus;

  // stage 2: cyclic per-coordinate refinement; accept only clearly
  // better trials
  constexpr double kStep = 2.5;
  for (std::size_t j = 0; j < du; ++j) {
    for (const double factor : {kStep, 1.0 / kStep}) {
      std::vector<double> trial = taus;
      trial[j] = std::clamp(taus[j] * factor, grid.front(), grid.back() * kStep);
      if (trial[j] == taus[j]) continue;
      const CvScore sc = cv_tau_error(data, est, trial, feat_seed, folds);
      if (sc.mean < best.mean - 0.5 * std::max(best.se, sc.se)) {
        best = sc;
        taus = trial;
        break;  // one move per coordinate
      }
    }
  }
  return taus;
}

// ---------------------------------------------------------------------

struct TaskResult {
  std::vector<FitRow> rows;
  std::vector<std::pair<std::string, FittedModel>> models;  // dump_models
};

TaskResult run_task(const ExperimentConfig& cfg, const Cell& cell,
                    std::size_t cell_idx, int rep, const Reference& ref) {
  const std::uint64_t data_seed = derive_seed(cfg.seed, cell_idx, rep, 1);
  const std::uint64_t feat_seed = derive_seed(cfg.seed, cell_idx, rep, 2);
  const std::uint64_t cv_seed = derive_seed(cfg.seed, cell_idx, rep, 3);
  const std::uint64_t mse_seed = derive_seed(cfg.seed, cell_idx, rep, 4);

  const MixedDataset data = generate(cfg, cell, data_seed);
  std::vector<double> weights_full;
  if (cfg.est.weights.has_value()) {
    weights_full = cfg.est.weights.value();
    if (weights_full.empty()) {
      weights_full.assign(static_cast<std::size_t>(data.p()), 1.0);
    }
  } else if (data.p() > 0) {
    weights_full = default_weights(data);
  }
  const int p_top = *std::max_element(cfg.p_levels.begin(), cfg.p_levels.end());
  if (static_cast<int>(weights_full.size()) < p_top) {
    throw ConfigError("experiment: fewer weights than the highest p level");
  }
  const std::vector<double> taus = select_tau(data, cfg.est, feat_seed, cv_seed);

  TaskResult out;
  for (const int p : cfg.p_levels) {
    FitConfig fc;
    fc.features.r = cfg.est.r == 0 ? data.d : cfg.est.r;
    fc.features.s = cfg.est.s;
    for (const double tau : taus) {
      fc.features.kernels.push_back(KernelSpec{cfg.est.family, tau});
    }
    fc.features.seed = feat_seed;
    fc.features.block_cap = cfg.est.block_cap;
    fc.p = p;
    fc.weights.assign(weights_full.begin(),
                      weights_full.begin() + p);
    fc.lambda = cfg.est.lambda;
    fc.lambda_grid = cfg.est.lambda_grid;
    const FittedModel model = fit(data, fc);
    const MseResult ms = mse_eval(
        [&](std::span<const double> t) { return model.predict(t); },
        ref.value, data.box, cfg.test_points, mse_seed);
    FitRow row;
    row.experiment = experiment_name(cfg.kind);
    row.cell_key = cell.key;
    row.n = cell.n;
    row.q = cell.q;
    row.rho = cell.rho;
    row.p = p;
    row.replication = rep;
    row.taus = taus;
    row.lambda = model.lambda_used();
    row.mse = ms.mse;
    row.se = ms.se;
    if (model.gcv_curve().has_value()) row.curve = model.gcv_curve().value();
    out.rows.push_back(std::move(row));
    if (cfg.dump_models) {
      out.models.emplace_back(cell.key + "_rep" + std::to_string(rep) + "_p" +
                                  std::to_string(p),
                              model);
    }
  }
  return out;
}

}  // namespace

ExperimentReport run_experiment(const ExperimentConfig& config) {
  config.validate();
  const std::vector<Cell> cells = enumerate_cells(config);
  const Reference ref = experiment_reference(config.kind);

  struct Task {
    std::size_t cell_idx;
    int rep;
  };
  std::vector<Task> tasks;
  for (std::size_t c = 0; c < cells.size(); ++c) {
    for (int r = 0; r < config.replications; ++r) tasks.push_back({c, r});
  }
  std::vector<TaskResult> results(tasks.size());
  std::vector<std::exception_ptr> failures(tasks.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= tasks.size()) break;
      const Task& task = tasks[i];
      try {
        results[i] = run_task(config, cells[task.cell_idx], task.cell_idx,
                              task.rep, ref);
      } catch (...) {
        failures[i] = std::current_exception();
      }
    }
  };
  const int n_threads = std::min<int>(config.threads,
                                      static_cast<int>(tasks.size()));
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < n_threads; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    if (failures[i]) {
      const std::string ctx = "cell " + cells[tasks[i].cell_idx].key +
                              " replication " + std::to_string(tasks[i].rep);
      try {
        std::rethrow_exception(failures[i]);
      } catch (const ConfigError& e) {
        throw ConfigError(ctx + ": " + e.what());
      } catch (const NumericError& e) {
        throw NumericError(ctx + ": " + e.what());
      } catch (const std::exception& e) {
        throw NumericError(ctx + ": " + e.what());
      }
    }
  }

  ExperimentReport report;
  for (auto& res : results) {
    for (auto& row : res.rows) report.rows.push_back(std::move(row));
  }
  if (config.dump_models) {
    const std::filesystem::path dir =
        std::filesystem::path(config.out_dir) / "models";
    std::filesystem::create_directories(dir);
    for (const auto& res : results) {
      for (const auto& [name, model] : res.models) {
        model.save((dir / (name + ".model.txt")).string());
      }
    }
  }

  // aggregates in cell-major, p-major order
  for (std::size_t c = 0; c < cells.size(); ++c) {
    std::map<int, std::vector<double>> by_p;
    for (const auto& row : report.rows) {
      if (row.cell_key == cells[c].key) by_p[row.p].push_back(row.mse);
    }
    double p0_mean = std::numeric_limits<double>::quiet_NaN();
    if (by_p.count(0)) {
      const auto& v = by_p[0];
      p0_mean = std::accumulate(v.begin(), v.end(), 0.0) /
                static_cast<double>(v.size());
    }
    for (const auto& [p, v] : by_p) {
      AggregateRow agg;
      agg.experiment = experiment_name(config.kind);
      agg.cell_key = cells[c].key;
      agg.n = cells[c].n;
      agg.q = cells[c].q;
      agg.rho = cells[c].rho;
      agg.p = p;
      agg.mean_mse = std::accumulate(v.begin(), v.end(), 0.0) /
                     static_cast<double>(v.size());
      double var = 0.0;
      for (const double x : v) {
        var += (x - agg.mean_mse) * (x - agg.mean_mse);
      }
      var = v.size() > 1 ? var / static_cast<double>(v.size() - 1) : 0.0;
      agg.se_mean = std::sqrt(var / static_cast<double>(v.size()));
      agg.ratio_to_p0 = agg.mean_mse / p0_mean;  // NaN without baseline
      report.aggregates.push_back(std::move(agg));
    }
  }
  return report;
}

RateReport rate_study(const ExperimentConfig& config) {
  if (config.kind != ExperimentConfig::Kind::SyntheticRate) {
    throw ConfigError("rate_study: experiment must be synthetic_rate");
  }
  config.validate();
  if (config.n_values.size() < 2) {
    throw ConfigError("rate_study: need at least two sample sizes");
  }
  RateReport rate;
  rate.detail = run_experiment(config);
  for (const int p : config.p_levels) {
    std::vector<double> lx, ly;
    for (const int n : config.n_values) {
      double sum = 0.0;
      int cnt = 0;
      for (const auto& row : rate.detail.rows) {
        if (row.p == p && row.n == n) {
          sum += row.mse;
          ++cnt;
        }
      }
      lx.push_back(std::log(static_cast<double>(n)));
      ly.push_back(std::log(sum / cnt));
    }
    const double mx =
        std::accumulate(lx.begin(), lx.end(), 0.0) / static_cast<double>(lx.size());
    const double my =
        std::accumulate(ly.begin(), ly.end(), 0.0) / static_cast<double>(ly.size());
    double sxx = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < lx.size(); ++i) {
      sxx += (lx[i] - mx) * (lx[i] - mx);
      sxy += (lx[i] - mx) * (ly[i] - my);
    }
    RateReport::Slope s;
    s.p = p;
    s.slope = sxy / sxx;
    s.intercept = my - s.slope * mx;
    rate.slopes.push_back(s);
  }
  return rate;
}

// ---------------------------------------------------------------------
// Emission

namespace {

std::string csv_num(double v) {
  if (std::isnan(v)) return "";
  return format_full(v);
}

std::string join_taus(const std::vector<double>& taus) {
  std::string out;
  for (std::size_t i = 0; i < taus.size(); ++i) {
    if (i > 0) out += ";";
    out += format_full(taus[i]);
  }
  return out;
}

void write_results_csv(const ExperimentReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open for writing: " + path);
  out << "experiment,n,q,rho,p,replication,tau,lambda,mse,se\n";
  for (const auto& r : report.rows) {
    out << r.experiment << "," << r.n << ","
        << (r.q > 0 ? std::to_string(r.q) : "") << "," << csv_num(r.rho) << ","
        << r.p << "," << r.replication << "," << join_taus(r.taus) << ","
        << format_full(r.lambda) << "," << format_full(r.mse) << ","
        << format_full(r.se) << "\n";
  }
}

void write_aggregates_csv(const ExperimentReport& report,
                          const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open for writing: " + path);
  out << "experiment,n,q,rho,p,mean_mse,se_mean,ratio_to_p0\n";
  for (const auto& a : report.aggregates) {
    out << a.experiment << "," << a.n << ","
        << (a.q > 0 ? std::to_string(a.q) : "") << "," << csv_num(a.rho) << ","
        << a.p << "," << format_full(a.mean_mse) << ","
        << format_full(a.se_mean) << "," << csv_num(a.ratio_to_p0) << "\n";
  }
}

}  // namespace

void emit_report(const ExperimentReport& report, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "curves");
  write_results_csv(report, (fs::path(dir) / "results.csv").string());
  write_aggregates_csv(report, (fs::path(dir) / "aggregates.csv").string());
  for (const auto& r : report.rows) {
    if (r.curve.lambdas.empty()) continue;
    const std::string name = r.cell_key + "_rep" +
                             std::to_string(r.replication) + "_p" +
                             std::to_string(r.p) + ".csv";
    std::ofstream out((fs::path(dir) / "curves" / name).string());
    if (!out) throw ConfigError("cannot write curve file " + name);
    out << "lambda,gcv\n";
    for (std::size_t i = 0; i < r.curve.lambdas.size(); ++i) {
      out << format_full(r.curve.lambdas[i]) << ","
          << format_full(r.curve.values[i]) << "\n";
    }
  }
}

void emit_rate_report(const RateReport& report, const std::string& dir) {
  namespace fs = std::filesystem;
  emit_report(report.detail, dir);
  std::ofstream out((fs::path(dir) / "rate_slopes.csv").string());
  if (!out) throw ConfigError("cannot write rate_slopes.csv");
  out << "p,slope,intercept\n";
  for (const auto& s : report.slopes) {
    out << s.p << "," << format_full(s.slope) << ","
        << format_full(s.intercept) << "\n";
  }
}

// ---------------------------------------------------------------------

Reference reference_by_name(const std::string& name) {
  Reference ref;
  if (name == "black_scholes") {
    ref.value = [](std::span<const double> t) {
      return bs_reference(t[0], t[1], t[2]);
    };
    ref.box = DomainBox{{80.0, 0.01, 0.2}, {120.0, 0.05, 1.0}};
  } else if (name == "cobb_douglas") {
    ref.value = [](std::span<const double> t) { return cost_surface_value(t); };
    ref.box = DomainBox{{0.5, 0.5, 0.5}, {1.5, 1.5, 1.5}};
  } else if (name == "wave") {
    ref.value = [](std::span<const double> t) { return wave_value(t); };
    ref.box = DomainBox::unit(1);
  } else {
    throw ConfigError("unknown reference: " + name);
  }
  return ref;
}

// ---------------------------------------------------------------------

namespace {

DomainBox infer_box(const MixedDataset& data) {
  const int d = data.d;
  DomainBox unit = DomainBox::unit(d);
  DomainBox box;
  box.lo.assign(static_cast<std::size_t>(d),
                std::numeric_limits<double>::infinity());
  box.hi.assign(static_cast<std::size_t>(d),
                -std::numeric_limits<double>::infinity());
  auto absorb = [&](const ObsGroup& g) {
    for (Eigen::Index i = 0; i < g.t.rows(); ++i) {
      for (int j = 0; j < d; ++j) {
        const auto ju = static_cast<std::size_t>(j);
        box.lo[ju] = std::min(box.lo[ju], g.t(i, j));
        box.hi[ju] = std::max(box.hi[ju], g.t(i, j));
      }
    }
  };
  absorb(data.func);
  for (const auto& g : data.grads) absorb(g);
  bool inside_unit = true;
  for (int j = 0; j < d; ++j) {
    const auto ju = static_cast<std::size_t>(j);
    if (box.lo[ju] < 0.0 || box.hi[ju] > 1.0) inside_unit = false;
  }
  if (inside_unit) return unit;
  for (int j = 0; j < d; ++j) {
    const auto ju = static_cast<std::size_t>(j);
    if (!(box.hi[ju] > box.lo[ju])) {
      box.lo[ju] -= 0.5;
      box.hi[ju] += 0.5;
    }
  }
  return box;
}

}  // namespace

FitFileResult fit_file(const std::string& csv_path,
                       const std::string& config_path,
                       const std::string& model_out) {
  const IniFile ini = IniFile::parse(config_path);
  MixedDataset data = read_dataset_csv(csv_path);

  const int p_declared =
      to_int(ini.get("data", "p", std::to_string(data.p())), "[data] p");
  if (data.p() > p_declared) {
    throw SchemaError(csv_path + ": channel index " + std::to_string(data.p()) +
                      " exceeds declared p = " + std::to_string(p_declared));
  }
  if (data.p() < p_declared) {
    throw SchemaError(csv_path + ": declared p = " + std::to_string(p_declared) +
                      " but only " + std::to_string(data.p()) +
                      " gradient channels present");
  }
  if (ini.has("data", "d") &&
      to_int(ini.require("data", "d"), "[data] d") != data.d) {
    throw SchemaError(csv_path + ": dimension mismatches [data] d");
  }
  if (ini.has("data", "box_lo") || ini.has("data", "box_hi")) {
    DomainBox box;
    box.lo = to_double_list(ini.require("data", "box_lo"), "[data] box_lo");
    box.hi = to_double_list(ini.require("data", "box_hi"), "[data] box_hi");
    if (box.d() != data.d) throw ConfigError("config: box dimension mismatch");
    data.box = box;
  } else {
    data.box = infer_box(data);
  }
  data.validate();

  const EstimatorSettings est = load_estimator(ini);
  std::vector<double> weights;
  if (est.weights.has_value()) {
    weights = est.weights.value();
    if (weights.empty()) weights.assign(static_cast<std::size_t>(data.p()), 1.0);
  } else if (data.p() > 0) {
    weights = default_weights(data);
  }
  const std::uint64_t feat_seed = static_cast<std::uint64_t>(
      to_double(ini.get("estimator", "seed", "0"), "[estimator] seed"));
  const std::vector<double> taus =
      select_tau(data, est, feat_seed, derive_seed(feat_seed, 99));

  FitConfig fc;
  fc.features.r = est.r == 0 ? data.d : est.r;
  fc.features.s = est.s;
  for (const double tau : taus) {
    fc.features.kernels.push_back(KernelSpec{est.family, tau});
  }
  fc.features.seed = feat_seed;
  fc.features.block_cap = est.block_cap;
  fc.p = data.p();
  fc.weights = weights;
  fc.lambda = est.lambda;
  fc.lambda_grid = est.lambda_grid;

  FitFileResult res{fit(data, fc), taus, weights, {}};
  res.model.save(model_out);

  // per-channel training residual RMS
  auto rms_channel = [&](const ObsGroup& g, int channel) {
    double acc = 0.0;
    for (Eigen::Index i = 0; i < g.size(); ++i) {
      Eigen::VectorXd t = g.t.row(i);
      const std::span<const double> ts(t.data(),
                                       static_cast<std::size_t>(t.size()));
      const double fitted = channel == 0
                                ? res.model.predict(ts)
                                : res.model.predict_grad(ts, channel - 1);
      const double diff = fitted - g.y(i);
      acc += diff * diff;
    }
    return std::sqrt(acc / static_cast<double>(g.size()));
  };
  res.channel_rms.push_back(rms_channel(data.func, 0));
  for (int j = 1; j <= data.p(); ++j) {
    res.channel_rms.push_back(
        rms_channel(data.grads[static_cast<std::size_t>(j - 1)], j));
  }
  return res;
}

EvalResult eval_model(const std::string& model_path,
                      const std::string& config_path) {
  const IniFile ini = IniFile::parse(config_path);
  const FittedModel model = FittedModel::load(model_path);
  EvalResult res;
  res.reference = ini.require("eval", "reference");
  res.n_test = to_int(ini.get("eval", "n_test", "10000"), "[eval] n_test");
  const auto seed = static_cast<std::uint64_t>(
      to_double(ini.get("eval", "seed", "0"), "[eval] seed"));
  const Reference ref = reference_by_name(res.reference);
  const MseResult ms = mse_eval(
      [&](std::span<const double> t) { return model.predict(t); }, ref.value,
      model.box(), res.n_test, seed);
  res.mse = ms.mse;
  res.se = ms.se;
  return res;
}

}  // namespace gradfit
