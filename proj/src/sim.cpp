#include "gradfit/sim.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <numbers>

#include "gradfit/errors.hpp"
#include "gradfit/rng.hpp"

namespace gradfit {

namespace {

double norm_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

double terminal_price(double s0, double r, double sigma, double omega,
                      double maturity) {
  return s0 * std::exp((r - 0.5 * sigma * sigma) * maturity +
                       sigma * std::sqrt(maturity) * omega);
}

}  // namespace

double bs_payoff(double s0, double r, double sigma, double omega,
                 double maturity, double strike) {
  const double st = terminal_price(s0, r, sigma, omega, maturity);
  const double pay = st - strike;
  return pay > 0.0 ? std::exp(-r * maturity) * pay : 0.0;
}

IpaGradients ipa_gradients(double s0, double r, double sigma, double omega,
                           double maturity, double strike) {
  const double st = terminal_price(s0, r, sigma, omega, maturity);
  const double disc = std::exp(-r * maturity);
  const double in = st >= strike ? 1.0 : 0.0;
  const double y0 = st > strike ? disc * (st - strike) : 0.0;
  IpaGradients g;
  g.d_s0 = disc * (st / s0) * in;
  g.d_r = -maturity * y0 + disc * maturity * st * in;
  g.d_sigma = disc / sigma *
              (std::log(st / s0) - (r + 0.5 * sigma * sigma) * maturity) * st *
              in;
  return g;
}

double bs_reference(double s0, double r, double sigma) {
  const double d1 =
      (std::log(100.0) - std::log(s0) - (r - 0.5 * sigma * sigma)) / sigma;
  return s0 * norm_cdf(-d1 + sigma) - 100.0 * std::exp(-r) * norm_cdf(-d1);
}

MixedDataset gen_bs_dataset(const BsConfig& cfg) {
  if (cfg.q < 1) throw ConfigError("gen_bs_dataset: q must be >= 1");
  for (const int g : cfg.grid) {
    if (g < 2) throw ConfigError("gen_bs_dataset: need >= 2 points per axis");
  }
  cfg.box.validate();
  const Eigen::Index n = static_cast<Eigen::Index>(cfg.grid[0]) *
                         cfg.grid[1] * cfg.grid[2];
  MixedDataset data;
  data.d = 3;
  data.box = cfg.box;
  data.func.t.resize(n, 3);
  data.func.y.resize(n);
  data.grads.resize(3);
  for (auto& g : data.grads) {
    g.t.resize(n, 3);
    g.y.resize(n);
  }
  auto axis_value = [&](int axis, int i) {
    const int g = cfg.grid[static_cast<std::size_t>(axis)];
    if (i == g - 1) return cfg.box.hi[static_cast<std::size_t>(axis)];
    return cfg.box.lo[static_cast<std::size_t>(axis)] +
           cfg.box.width(axis) * static_cast<double>(i) /
               static_cast<double>(g - 1);
  };
  Eigen::Index idx = 0;
  for (int i0 = 0; i0 < cfg.grid[0]; ++i0) {
    for (int i1 = 0; i1 < cfg.grid[1]; ++i1) {
      for (int i2 = 0; i2 < cfg.grid[2]; ++i2, ++idx) {
        const double s0 = axis_value(0, i0);
        const double r = axis_value(1, i1);
        const double sigma = axis_value(2, i2);
        // independent substream per design point
        Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(idx)));
        double acc0 = 0.0, acc1 = 0.0, acc2 = 0.0, acc3 = 0.0;
        for (int k = 0; k < cfg.q; ++k) {
          const double omega = rng.normal();
          acc0 += bs_payoff(s0, r, sigma, omega);
          const IpaGradients g = ipa_gradients(s0, r, sigma, omega);
          acc1 += g.d_s0;
          acc2 += g.d_r;
          acc3 += g.d_sigma;
        }
        const double q = static_cast<double>(cfg.q);
        data.func.t(idx, 0) = s0;
        data.func.t(idx, 1) = r;
        data.func.t(idx, 2) = sigma;
        data.func.y(idx) = acc0 / q;
        for (int j = 0; j < 3; ++j) {
          data.grads[static_cast<std::size_t>(j)].t.row(idx) =
              data.func.t.row(idx);
        }
        data.grads[0].y(idx) = acc1 / q;
        data.grads[1].y(idx) = acc2 / q;
        data.grads[2].y(idx) = acc3 / q;
      }
    }
  }
  return data;
}

// ---------------------------------------------------------------------

double CobbDouglasParams::elasticity_sum() const {
  double c = 0.0;
  for (const double e : elasticities) c += e;
  return c;
}

double cobb_douglas_value(const CobbDouglasParams& params,
                          std::span<const double> t) {
  const int d = params.d();
  if (static_cast<int>(t.size()) != d) {
    throw ConfigError("cobb_douglas_value: expected " + std::to_string(d) +
                      " inputs");
  }
  for (const double v : t) {
    if (!(v > 0.0)) {
      throw ConfigError("cobb_douglas_value: inputs must be positive");
    }
  }
  const double c = params.elasticity_sum();
  double value = std::pow(params.efficiency, -1.0 / c);
  for (int j = 0; j < d - 1; ++j) {
    const double cj = params.elasticities[static_cast<std::size_t>(j)];
    value *= std::pow(c / cj, cj / c);
    value *= std::pow(t[static_cast<std::size_t>(j)], cj / c);
  }
  value *= std::pow(t[static_cast<std::size_t>(d - 1)], 1.0 / c);
  return value;
}

double cobb_douglas_grad(const CobbDouglasParams& params,
                         std::span<const double> t, int j) {
  const int d = params.d();
  if (j < 0 || j >= d) throw ConfigError("cobb_douglas_grad: bad coordinate");
  const double c = params.elasticity_sum();
  const double expo =
      j == d - 1 ? 1.0 / c
                 : params.elasticities[static_cast<std::size_t>(j)] / c;
  return expo * cobb_douglas_value(params, t) / t[static_cast<std::size_t>(j)];
}

double cost_surface_value(std::span<const double> t) {
  if (t.size() != 3) throw ConfigError("cost_surface_value: expected 3 inputs");
  const CobbDouglasParams params;
  const double full[4] = {t[0], t[1], 1.0, t[2]};
  return cobb_douglas_value(params, full);
}

double cost_surface_grad(std::span<const double> t, int j) {
  if (t.size() != 3) throw ConfigError("cost_surface_grad: expected 3 inputs");
  if (j < 0 || j > 2) throw ConfigError("cost_surface_grad: bad coordinate");
  const CobbDouglasParams params;
  const double full[4] = {t[0], t[1], 1.0, t[2]};
  return cobb_douglas_grad(params, full, j == 2 ? 3 : j);
}

namespace {

// PSD square root of the equicorrelation matrix; throws if not PSD.
Eigen::MatrixXd correlation_factor(int m, double rho) {
  Eigen::MatrixXd corr = Eigen::MatrixXd::Constant(m, m, rho);
  corr.diagonal().setOnes();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(corr);
  if (es.eigenvalues().minCoeff() < -1e-10) {
    throw NumericError("correlation matrix is not positive semi-definite");
  }
  return es.eigenvectors() *
         es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
}

}  // namespace

MixedDataset gen_cost_dataset(int n, double rho, std::uint64_t seed) {
  if (n < 1) throw ConfigError("gen_cost_dataset: n must be >= 1");
  const Eigen::MatrixXd factor = correlation_factor(3, rho);
  constexpr double kSd = 0.35;
  MixedDataset data;
  data.d = 3;
  data.box = DomainBox{{0.5, 0.5, 0.5}, {1.5, 1.5, 1.5}};
  data.func.t.resize(n, 3);
  data.func.y.resize(n);
  data.grads.resize(2);
  for (auto& g : data.grads) {
    g.t.resize(n, 3);
    g.y.resize(n);
  }
  Rng rng(seed);
  Eigen::Vector3d z;
  for (Eigen::Index i = 0; i < n; ++i) {
    double pt[3];
    for (int j = 0; j < 3; ++j) pt[j] = rng.uniform(0.5, 1.5);
    for (int c = 0; c < 3; ++c) z(c) = rng.normal();
    const Eigen::Vector3d eps = kSd * (factor * z);
    for (int j = 0; j < 3; ++j) {
      data.func.t(i, j) = pt[j];
      data.grads[0].t(i, j) = pt[j];
      data.grads[1].t(i, j) = pt[j];
    }
    data.func.y(i) = cost_surface_value(pt) + eps(0);
    data.grads[0].y(i) = cost_surface_grad(pt, 0) + eps(1);
    data.grads[1].y(i) = cost_surface_grad(pt, 1) + eps(2);
  }
  return data;
}

Eigen::MatrixXd gen_correlated_errors(int n, const ErrorSpec& spec,
                                      std::uint64_t seed) {
  if (n < 1) throw ConfigError("gen_correlated_errors: n must be >= 1");
  if (spec.sigmas.empty()) {
    throw ConfigError("gen_correlated_errors: no channels");
  }
  if (!spec.white_noise && !(spec.upsilon > 1.0)) {
    throw ConfigError("gen_correlated_errors: upsilon must exceed 1");
  }
  const int m = static_cast<int>(spec.sigmas.size());
  const Eigen::MatrixXd factor = correlation_factor(m, spec.rho);

  // Moving-average weights with a_k ~ (1 + k)^{-(upsilon + 1)/2} give an
  // autocovariance decaying at the (1 + h)^{-upsilon} order.
  const int lag = spec.white_noise ? 0 : 100;
  Eigen::VectorXd a(lag + 1);
  for (int k = 0; k <= lag; ++k) {
    a(k) = std::pow(1.0 + k, -(spec.upsilon + 1.0) / 2.0);
  }
  a /= a.norm();  // unit marginal variance

  Rng rng(seed);
  Eigen::MatrixXd innovations(n + lag, m);
  Eigen::VectorXd z(m);
  for (Eigen::Index i = 0; i < innovations.rows(); ++i) {
    for (int c = 0; c < m; ++c) z(c) = rng.normal();
    innovations.row(i) = (factor * z).transpose();
  }
  const double bias = spec.bias_scale * std::pow(static_cast<double>(n), -0.6);
  Eigen::MatrixXd out(n, m);
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(m);
    for (int k = 0; k <= lag; ++k) {
      acc += a(k) * innovations.row(i + lag - k);
    }
    for (int c = 0; c < m; ++c) {
      out(i, c) = spec.sigmas[static_cast<std::size_t>(c)] * acc(c) + bias;
    }
  }
  return out;
}

// ---------------------------------------------------------------------

// Three octaves with amplitudes 2^{-1.5 k}: the value spectrum decays
// quickly while the derivative spectrum stays strong at every scale, so
// gradient observations expose the fine structure long before value data
// alone can resolve it.
double wave_value(std::span<const double> t) {
  double acc = 0.0;
  for (int k = 0; k < 3; ++k) {
    const double freq = static_cast<double>(1 << k);
    acc += std::pow(freq, -1.5) *
           std::sin(2.0 * std::numbers::pi * freq * t[0]);
  }
  return acc;
}

double wave_grad(std::span<const double> t, int j) {
  if (j != 0) throw ConfigError("wave_grad: univariate truth");
  double acc = 0.0;
  for (int k = 0; k < 3; ++k) {
    const double freq = static_cast<double>(1 << k);
    acc += std::pow(freq, -0.5) * 2.0 * std::numbers::pi *
           std::cos(2.0 * std::numbers::pi * freq * t[0]);
  }
  return acc;
}

MixedDataset gen_wave_dataset(int n, double sigma, std::uint64_t seed, int p) {
  if (p < 0 || p > 1) throw ConfigError("gen_wave_dataset: p must be 0 or 1");
  if (n < 1) throw ConfigError("gen_wave_dataset: n must be >= 1");
  MixedDataset data;
  data.d = 1;
  data.box = DomainBox::unit(1);
  data.func.t.resize(n, 1);
  data.func.y.resize(n);
  data.grads.resize(static_cast<std::size_t>(p));
  for (auto& g : data.grads) {
    g.t.resize(n, 1);
    g.y.resize(n);
  }
  ErrorSpec noise;
  noise.sigmas.assign(static_cast<std::size_t>(p) + 1, sigma);
  noise.white_noise = true;
  const Eigen::MatrixXd eps =
      gen_correlated_errors(n, noise, derive_seed(seed, 1));
  Rng rng(derive_seed(seed, 0));
  for (Eigen::Index i = 0; i < n; ++i) {
    const double x = rng.uniform();
    data.func.t(i, 0) = x;
    data.func.y(i) = wave_value({&x, 1}) + eps(i, 0);
    if (p == 1) {
      data.grads[0].t(i, 0) = x;
      data.grads[0].y(i) = wave_grad({&x, 1}, 0) + eps(i, 1);
    }
  }
  return data;
}

// ---------------------------------------------------------------------

MseResult mse_eval(
    const std::function<double(std::span<const double>)>& predict,
    const std::function<double(std::span<const double>)>& truth,
    const DomainBox& box, int n_test, std::uint64_t seed) {
  if (n_test < 100) throw ConfigError("mse_eval: n_test must be >= 100");
  box.validate();
  const int d = box.d();
  Rng rng(seed);
  std::vector<double> t(static_cast<std::size_t>(d));
  double mean = 0.0, m2 = 0.0;
  for (int i = 0; i < n_test; ++i) {
    for (int j = 0; j < d; ++j) {
      t[static_cast<std::size_t>(j)] =
          rng.uniform(box.lo[static_cast<std::size_t>(j)],
                      box.hi[static_cast<std::size_t>(j)]);
    }
    const double diff = predict(t) - truth(t);
    const double sq = diff * diff;
    const double delta = sq - mean;
    mean += delta / static_cast<double>(i + 1);
    m2 += delta * (sq - mean);
  }
  const double var = m2 / static_cast<double>(n_test - 1);
  return {mean, std::sqrt(var / static_cast<double>(n_test))};
}

}  // namespace gradfit
